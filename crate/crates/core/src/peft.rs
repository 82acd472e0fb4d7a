//! Trainable-set selection (LayerNorm, BitFit) and injected modules (LoRA,
//! prompt context) for parameter-efficient adaptation.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::{last_segment, DualEncoder, LoraState, Tower, PROMPT_CTX, TEMPLATE_WORDS};
use crate::synth::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    LayerNorm,
    Lora,
    BitFit,
    Prompt,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::LayerNorm => "layernorm",
            Strategy::Lora => "lora",
            Strategy::BitFit => "bitfit",
            Strategy::Prompt => "prompt",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(Strategy::LayerNorm),
            "lora" => Ok(Strategy::Lora),
            "bitfit" => Ok(Strategy::BitFit),
            "prompt" => Ok(Strategy::Prompt),
            other => Err(Error::Argument(format!("unknown PEFT strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftOptions {
    pub lora_rank: usize,
    pub lora_gamma: f64,
    pub lora_init_std: f64,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for PeftOptions {
    fn default() -> Self {
        PeftOptions { lora_rank: 2, lora_gamma: 1.0, lora_init_std: 0.02, prompt_len: 4, seed: 0 }
    }
}

/// The trainable set, split by tower.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSet {
    pub strategy: Strategy,
    pub vision: Vec<String>,
    pub text: Vec<String>,
}

impl ParamSet {
    pub fn names(&self) -> Vec<String> {
        self.vision.iter().chain(&self.text).cloned().collect()
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.vision.iter().chain(&self.text).cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vision.iter().chain(&self.text).any(|n| n == name)
    }

    pub fn scalars(&self, model: &DualEncoder) -> usize {
        self.vision.iter().chain(&self.text).map(|n| model.params[n].len()).sum()
    }

    fn from_names(strategy: Strategy, names: Vec<String>) -> Self {
        let (vision, text) = names.into_iter().partition(|n| n.starts_with(Tower::Vision.prefix()));
        ParamSet { strategy, vision, text }
    }
}

fn is_ln(name: &str) -> bool {
    matches!(last_segment(name), "ln_gamma" | "ln_beta")
}

fn is_bias(name: &str) -> bool {
    last_segment(name).starts_with("bias_")
}

/// Selects or injects the trainable parameters for `strategy` and freezes
/// everything else.
pub fn attach(strategy: Strategy, model: &mut DualEncoder, opts: &PeftOptions) -> Result<ParamSet> {
    if let Some(s) = model.strategy {
        bail!(State, "strategy {s} is already attached");
    }
    let names: Vec<String> = match strategy {
        Strategy::LayerNorm => model.params.keys().filter(|n| is_ln(n)).cloned().collect(),
        Strategy::BitFit => model.params.keys().filter(|n| is_bias(n)).cloned().collect(),
        Strategy::Lora => {
            if opts.lora_rank == 0 {
                bail!(Argument, "lora rank must be at least 1");
            }
            let d = model.config.width;
            let r = opts.lora_rank;
            let mut rng = rng_for(opts.seed, 0x10AA);
            let mut names = Vec::new();
            for tower in [Tower::Vision, Tower::Text] {
                for i in 0..model.config.blocks {
                    for t in ["q", "k", "v"] {
                        let pre = format!("{}.block{i}.attn", tower.prefix());
                        let a: Vec<f64> = (0..r * d).map(|_| rng.sample::<f64, _>(StandardNormal) * opts.lora_init_std).collect();
                        let an = format!("{pre}.lora_a_{t}");
                        let bn = format!("{pre}.lora_b_{t}");
                        model.params.insert(an.clone(), Tensor::new(vec![r, d], a)?);
                        model.params.insert(bn.clone(), Tensor::zeros(vec![d, r]));
                        names.push(an);
                        names.push(bn);
                    }
                }
            }
            model.lora = Some(LoraState { rank: r, gamma: opts.lora_gamma, merged: false });
            names.sort();
            names
        }
        Strategy::Prompt => {
            let len = opts.prompt_len;
            if len == 0 || len > TEMPLATE_WORDS.len() {
                bail!(Argument, "prompt length must be in 1..={}, got {len}", TEMPLATE_WORDS.len());
            }
            let d = model.config.width;
            let tokens = &model.params["text.embed.tokens"].values;
            let mut ctx = Vec::with_capacity(len * d);
            for &w in &TEMPLATE_WORDS[..len] {
                ctx.extend_from_slice(&tokens[w * d..(w + 1) * d]);
            }
            model.params.insert(PROMPT_CTX.into(), Tensor::new(vec![len, d], ctx)?);
            model.prompt_len = len;
            vec![PROMPT_CTX.to_string()]
        }
    };
    let set: BTreeSet<&String> = names.iter().collect();
    for (name, t) in model.params.iter_mut() {
        t.requires_grad = set.contains(name);
    }
    model.strategy = Some(strategy);
    Ok(ParamSet::from_names(strategy, names))
}

/// Trainable scalars `strategy` would select on `model` (as pretrained).
pub fn peft_params(strategy: Strategy, model: &DualEncoder, opts: &PeftOptions) -> Result<usize> {
    let mut m = DualEncoder::from_parts(
        model.config.clone(),
        model.params.iter().filter(|(n, _)| !n.contains(".lora_") && n.as_str() != PROMPT_CTX).map(|(n, t)| (n.clone(), t.clone())).collect(),
        None,
        None,
        0,
    );
    let set = attach(strategy, &mut m, opts)?;
    Ok(set.scalars(&m))
}

/// Folds every adapter into its base weight, `W += gamma * (B A)^T`, and
/// removes the adapter tensors.
pub fn merge_lora(model: &mut DualEncoder) -> Result<()> {
    let state = match model.lora {
        None => bail!(State, "no LoRA adapters attached"),
        Some(LoraState { merged: true, .. }) => bail!(State, "LoRA adapters already merged"),
        Some(s) => s,
    };
    let d = model.config.width;
    let r = state.rank;
    for tower in [Tower::Vision, Tower::Text] {
        for i in 0..model.config.blocks {
            for t in ["q", "k", "v"] {
                let pre = format!("{}.block{i}.attn", tower.prefix());
                let a = model.params.remove(&format!("{pre}.lora_a_{t}")).ok_or_else(|| Error::State(format!("missing {pre}.lora_a_{t}")))?;
                let b = model.params.remove(&format!("{pre}.lora_b_{t}")).ok_or_else(|| Error::State(format!("missing {pre}.lora_b_{t}")))?;
                let w = model.params.get_mut(&format!("{pre}.w_{t}")).expect("base weight present");
                // w is stored input-major (x W), the adapter maps x to B A x
                for row in 0..d {
                    for col in 0..d {
                        let mut delta = 0.0;
                        for k in 0..r {
                            delta += b.values[col * r + k] * a.values[k * d + row];
                        }
                        if delta != 0.0 {
                            w.values[row * d + col] += state.gamma * delta;
                        }
                    }
                }
            }
        }
    }
    model.lora = Some(LoraState { merged: true, ..state });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{World, WorldConfig};

    fn fresh() -> DualEncoder {
        let w = World::new(WorldConfig::default()).unwrap();
        DualEncoder::new(ModelConfig::default(), &w.vocabulary(), 1).unwrap()
    }

    #[test]
    fn counts() {
        let m = fresh();
        let o = PeftOptions::default();
        assert_eq!(peft_params(Strategy::LayerNorm, &m, &o).unwrap(), 640);
        assert_eq!(peft_params(Strategy::Lora, &m, &o).unwrap(), 1536);
        assert_eq!(peft_params(Strategy::Prompt, &m, &o).unwrap(), 128);
        let bitfit = peft_params(Strategy::BitFit, &m, &o).unwrap();
        assert!(640 < bitfit && bitfit < 1536);
    }

    #[test]
    fn layernorm_selects_twenty_vectors() {
        let mut m = fresh();
        let set = attach(Strategy::LayerNorm, &mut m, &PeftOptions::default()).unwrap();
        assert_eq!(set.names().len(), 20);
        assert_eq!(set.vision.len(), 10);
    }

    #[test]
    fn bitfit_selects_only_biases() {
        let mut m = fresh();
        let set = attach(Strategy::BitFit, &mut m, &PeftOptions::default()).unwrap();
        let names = set.names();
        assert!(names.iter().all(|n| last_segment(n).starts_with("bias_")));
        assert!(!names.iter().any(|n| last_segment(n).starts_with("w_")));
        let all_bias = m.params.keys().filter(|n| last_segment(n).starts_with("bias_")).count();
        assert_eq!(names.len(), all_bias);
    }

    #[test]
    fn double_attach_and_unknown_strategy() {
        let mut m = fresh();
        attach(Strategy::BitFit, &mut m, &PeftOptions::default()).unwrap();
        assert!(matches!(attach(Strategy::LayerNorm, &mut m, &PeftOptions::default()), Err(Error::State(_))));
        assert!(matches!("adapter".parse::<Strategy>(), Err(Error::Argument(_))));
    }

    #[test]
    fn merge_state_errors() {
        let mut m = fresh();
        assert!(matches!(merge_lora(&mut m), Err(Error::State(_))));
        attach(Strategy::Lora, &mut m, &PeftOptions::default()).unwrap();
        let before = m.params["vision.block0.attn.w_q"].values.clone();
        merge_lora(&mut m).unwrap();
        assert_eq!(m.params["vision.block0.attn.w_q"].values, before);
        assert!(!m.params.keys().any(|n| n.contains("lora_")));
        assert!(matches!(merge_lora(&mut m), Err(Error::State(_))));
    }
}
