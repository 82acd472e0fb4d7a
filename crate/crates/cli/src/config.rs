//! Experiment configuration: TOML file, flag overrides, validation, hashing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fewshot::adapt::AdaptConfig;
use fewshot::dynamics::{DEFAULT_MARGIN, DEFAULT_WINDOW};
use fewshot::infer::Protocol;
use fewshot::model::{ModelConfig, PretrainConfig};
use fewshot::peft::{PeftOptions, Strategy};
use fewshot::synth::{Profile, TaskSpec, UniverseConfig, WorldConfig};

pub const OUT_ENV: &str = "FEWSHOT_OUT";

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_protocol() -> Protocol {
    Protocol::BaseToNovel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub breakpoint: BreakpointSection,
}

/// World generator settings plus the downstream task preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub latent_dim: usize,
    pub lex_dim: usize,
    pub features: usize,
    pub nuisance: usize,
    pub pretrain_classes: usize,
    pub pretrain_samples: usize,
    pub lex_noise: f64,
    pub downstream_lex_noise: f64,
    pub profile: Profile,
    /// downstream classes shared with pretraining
    pub overlap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_per_class: Option<usize>,
    /// replaces the profile's universe entirely
    #[serde(skip_serializing_if = "Option::is_none")]
    pub universe: Option<UniverseConfig>,
}

impl Default for DataSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        DataSection {
            seed: w.seed,
            latent_dim: w.latent_dim,
            lex_dim: w.lex_dim,
            features: w.features,
            nuisance: w.nuisance,
            pretrain_classes: w.pretrain_classes,
            pretrain_samples: w.pretrain_samples,
            lex_noise: w.lex_noise,
            downstream_lex_noise: w.downstream_lex_noise,
            profile: Profile::Separable,
            overlap: 0,
            eval_per_class: None,
            universe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub blocks: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab: usize,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection { blocks: m.blocks, width: m.width, mlp_hidden: m.mlp_hidden, grid_h: m.grid_h, grid_w: m.grid_w, vocab: m.vocab, ln_eps: m.ln_eps, init_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    #[serde(rename = "M")]
    pub m_per_shot: usize,
    pub k: usize,
    pub alpha: f64,
    pub lr: f64,
    pub wd: f64,
    pub batch: usize,
    pub eval_interval: usize,
    pub peft: Strategy,
    pub lora_rank: usize,
    pub lora_gamma: f64,
    pub prompt_len: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptConfig::default();
        let p = PeftOptions::default();
        AdaptSection {
            m_per_shot: a.m_per_shot,
            k: a.k,
            alpha: a.alpha,
            lr: a.lr,
            wd: a.weight_decay,
            batch: a.batch,
            eval_interval: a.eval_interval,
            peft: Strategy::LayerNorm,
            lora_rank: p.lora_rank,
            lora_gamma: p.lora_gamma,
            prompt_len: p.prompt_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BreakpointSection {
    pub window: usize,
    pub margin: f64,
}

impl Default for BreakpointSection {
    fn default() -> Self {
        BreakpointSection { window: DEFAULT_WINDOW, margin: DEFAULT_MARGIN }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides (dotted keys, TOML values)
    /// and validates the result.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        for (key, value) in overrides {
            set_dotted(&mut doc, key, parse_value(value))?;
        }
        let config: ExperimentConfig = toml::Value::Table(doc).try_into().context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seed list has duplicates");
        }
        self.world().validate()?;
        self.model_config().validate()?;
        self.adapt_config(0).validate()?;
        let d = &self.data;
        if d.overlap > d.pretrain_classes {
            bail!("overlap {} exceeds the {} pretraining classes", d.overlap, d.pretrain_classes);
        }
        let spec = self.task_spec();
        if spec.universe.first_class + spec.universe.classes > self.model.vocab {
            bail!("downstream classes {}..{} exceed the vocabulary of {}", spec.universe.first_class, spec.universe.first_class + spec.universe.classes, self.model.vocab);
        }
        if spec.universe.samples_per_class < self.adapt.k + spec.eval_per_class {
            bail!("{} samples per class cannot supply k={} shots and {} eval samples", spec.universe.samples_per_class, self.adapt.k, spec.eval_per_class);
        }
        if self.breakpoint.window == 0 || !(self.breakpoint.margin > 0.0) {
            bail!("breakpoint window must be positive and margin > 0");
        }
        if self.adapt.lora_rank == 0 || self.adapt.prompt_len == 0 {
            bail!("lora_rank and prompt_len must be positive");
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        let d = &self.data;
        WorldConfig {
            seed: d.seed,
            latent_dim: d.latent_dim,
            lex_dim: d.lex_dim,
            grid_h: self.model.grid_h,
            grid_w: self.model.grid_w,
            features: d.features,
            nuisance: d.nuisance,
            vocab: self.model.vocab,
            pretrain_classes: d.pretrain_classes,
            pretrain_samples: d.pretrain_samples,
            lex_noise: d.lex_noise,
            downstream_lex_noise: d.downstream_lex_noise,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let w = self.world();
        let m = &self.model;
        ModelConfig { blocks: m.blocks, width: m.width, mlp_hidden: m.mlp_hidden, grid_h: m.grid_h, grid_w: m.grid_w, patch_dim: w.patch_dim(), vocab: m.vocab, lex_dim: w.lex_dim, ln_eps: m.ln_eps }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = self.data.profile.task_spec(&self.world());
        if let Some(u) = &self.data.universe {
            spec.universe = u.clone();
        } else {
            spec.universe.first_class -= self.data.overlap;
        }
        spec.k = self.adapt.k;
        if let Some(e) = self.data.eval_per_class {
            spec.eval_per_class = e;
        }
        spec
    }

    pub fn adapt_config(&self, seed: u64) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig { m_per_shot: a.m_per_shot, k: a.k, alpha: a.alpha, lr: a.lr, weight_decay: a.wd, batch: a.batch, eval_interval: a.eval_interval, seed }
    }

    pub fn peft_options(&self, seed: u64) -> PeftOptions {
        let a = &self.adapt;
        PeftOptions { lora_rank: a.lora_rank, lora_gamma: a.lora_gamma, prompt_len: a.prompt_len, seed, ..PeftOptions::default() }
    }

    /// Compact JSON with sorted keys; equal strings mean equal configs. The
    /// output directory is left out since it does not affect any result.
    pub fn canonical(&self) -> String {
        let value = serde_json::to_value(ExperimentConfig { output_dir: None, ..self.clone() }).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Config value, then `$FEWSHOT_OUT`, then `./out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Reads a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key {key:?}");
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?} descends into a non-table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("override must look like key=value, got {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = ExperimentConfig::parse("", &[]).unwrap();
        assert_eq!(c.seeds.len(), 3);
        assert_eq!(c.adapt.m_per_shot, 300);
        assert_eq!(c.adapt.alpha, 0.6);
        assert_eq!(c.protocol, Protocol::BaseToNovel);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::parse("[adapt]\nalpah = 0.5", &[]).is_err());
    }

    #[test]
    fn overrides_replace_keys() {
        let o = vec![("adapt.alpha".to_string(), "0.3".to_string()), ("adapt.peft".to_string(), "lora".to_string())];
        let c = ExperimentConfig::parse("[adapt]\nalpha = 0.9", &o).unwrap();
        assert_eq!(c.adapt.alpha, 0.3);
        assert_eq!(c.adapt.peft, Strategy::Lora);
        assert!(ExperimentConfig::parse("", &[("adapt.alpha".into(), "2.0".into())]).is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::parse("seeds = [0, 1, 2]\n[adapt]\nalpha = 0.6", &[]).unwrap();
        let b = ExperimentConfig::parse("[adapt]\n  alpha=0.6\n", &[]).unwrap();
        let c = ExperimentConfig::parse("[adapt]\nalpha = 0.5", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        let d = ExperimentConfig::parse("output_dir = \"/tmp/x\"\n[adapt]\nalpha = 0.6", &[]).unwrap();
        assert_eq!(a.hash(), d.hash());
    }
}
