//! Synthetic class universes, base/novel splits and few-shot task assembly.
//!
//! A [`World`] fixes everything shared by all datasets drawn from it: latent
//! class prototypes, the per-patch rendering maps, the lexical map that gives
//! each class name a feature vector, and the directions along which a
//! downstream domain differs from the pretraining domain. Universes are sets
//! of rendered samples for a range of class ids.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const DATA_FORMAT_VERSION: u32 = 1;

pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn normals(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub lex_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// rendered features per patch
    pub features: usize,
    /// extra per-patch channels that carry no class signal unless a domain adds one
    pub nuisance: usize,
    pub vocab: usize,
    /// class ids below this are the pretraining classes
    pub pretrain_classes: usize,
    pub pretrain_samples: usize,
    pub lex_noise: f64,
    pub downstream_lex_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            latent_dim: 16,
            lex_dim: 16,
            grid_h: 2,
            grid_w: 2,
            features: 16,
            nuisance: 4,
            vocab: 128,
            pretrain_classes: 96,
            pretrain_samples: 30,
            lex_noise: 0.3,
            downstream_lex_noise: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.features + self.nuisance
    }

    pub fn image_len(&self) -> usize {
        self.patches() * self.patch_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.lex_dim == 0 || self.features == 0 || self.patches() == 0 {
            bail!(Config, "world dimensions must be positive");
        }
        if self.vocab < 2 || self.pretrain_classes > self.vocab {
            bail!(Config, "vocab {} cannot hold {} pretraining classes", self.vocab, self.pretrain_classes);
        }
        if self.pretrain_classes < 2 || self.pretrain_samples < 2 {
            bail!(Config, "pretraining needs at least 2 classes with 2 samples each");
        }
        if self.lex_noise < 0.0 || self.downstream_lex_noise < 0.0 {
            bail!(Config, "noise scales must be non-negative");
        }
        Ok(())
    }
}

/// Lexical feature vectors for every class id, one row per id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl Vocabulary {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.features[class * self.dim..(class + 1) * self.dim]
    }
}

/// How a universe's rendering departs from the pretraining domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// latent offset along a fixed world direction
    pub offset: f64,
    /// additive per-patch feature bias
    pub style: f64,
    /// log-scale of per-feature gains
    pub gain: f64,
    /// strength of a fixed latent mixing perturbation
    pub mix: f64,
    /// scale of a context code written into the nuisance channels: each class
    /// in the lower half of the range owns one, upper-half samples draw one
    /// of those at random
    pub shortcut: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift { offset: 0.0, style: 0.0, gain: 0.0, mix: 0.0, shortcut: 0.0 }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseConfig {
    pub seed: u64,
    pub first_class: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    /// feature-space noise added after rendering
    pub noise: f64,
    /// latent within-class spread
    pub intra: f64,
    /// scale of the nuisance channels
    pub nuisance_noise: f64,
    pub shift: DomainShift,
}

/// Strength of the context code in pretraining samples, so the pretrained
/// image tower already reads the nuisance channels.
pub const PRETRAIN_SHORTCUT: f64 = 2.0;

impl UniverseConfig {
    /// The pretraining universe of `world`: classes `0..pretrain_classes`.
    pub fn pretraining(world: &WorldConfig) -> Self {
        UniverseConfig {
            seed: 1,
            first_class: 0,
            classes: world.pretrain_classes,
            samples_per_class: world.pretrain_samples,
            noise: 0.5,
            intra: 0.5,
            nuisance_noise: 1.0,
            shift: DomainShift { shortcut: PRETRAIN_SHORTCUT, ..DomainShift::none() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    render: Vec<f64>,
    lexmap: Vec<f64>,
    offset_dir: Vec<f64>,
    style: Vec<f64>,
    gain: Vec<f64>,
    mix: Vec<f64>,
}

const TAG_RENDER: u64 = 1;
const TAG_LEX: u64 = 2;
const TAG_SHIFT: u64 = 3;
const TAG_PROTO: u64 = 1 << 32;
const TAG_NAME: u64 = 2 << 32;
const TAG_SIG: u64 = 3 << 32;
const TAG_SAMPLES: u64 = 4 << 32;
const TAG_CONTEXT: u64 = 5 << 32;

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let (p, f, l) = (config.patches(), config.features, config.latent_dim);
        let s = 1.0 / (l as f64).sqrt();
        let render = normals(&mut rng_for(config.seed, TAG_RENDER), p * f * l, s);
        let lexmap = normals(&mut rng_for(config.seed, TAG_LEX), config.lex_dim * l, s);
        let mut rng = rng_for(config.seed, TAG_SHIFT);
        let offset_dir = normals(&mut rng, l, 1.0);
        let style = normals(&mut rng, p * f, 1.0);
        let gain = normals(&mut rng, f, 1.0);
        let mix = normals(&mut rng, l * l, s);
        Ok(World { config, render, lexmap, offset_dir, style, gain, mix })
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        normals(&mut rng_for(self.config.seed, TAG_PROTO + class as u64), self.config.latent_dim, 1.0)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let c = &self.config;
        let mut features = Vec::with_capacity(c.vocab * c.lex_dim);
        for class in 0..c.vocab {
            let z = self.prototype(class);
            let noise = if class < c.pretrain_classes { c.lex_noise } else { c.downstream_lex_noise };
            let eps = normals(&mut rng_for(c.seed, TAG_NAME + class as u64), c.lex_dim, noise);
            for r in 0..c.lex_dim {
                let row = &self.lexmap[r * c.latent_dim..(r + 1) * c.latent_dim];
                features.push(crate::tensor::dot(row, &z) + eps[r]);
            }
        }
        Vocabulary { size: c.vocab, dim: c.lex_dim, features }
    }

    fn render_sample(&self, z: &[f64], u: &UniverseConfig, signature: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.config;
        let (p, f, l, q) = (c.patches(), c.features, c.latent_dim, c.nuisance);
        let sh = &u.shift;
        let mut zz: Vec<f64> = z.iter().zip(normals(rng, l, u.intra)).map(|(a, b)| a + b).collect();
        if sh.mix != 0.0 {
            let mut mixed = zz.clone();
            for i in 0..l {
                mixed[i] += sh.mix * crate::tensor::dot(&self.mix[i * l..(i + 1) * l], &zz);
            }
            zz = mixed;
        }
        for (a, d) in zz.iter_mut().zip(&self.offset_dir) {
            *a += sh.offset * d;
        }
        let mut x = Vec::with_capacity(p * (f + q));
        for patch in 0..p {
            for feat in 0..f {
                let row = &self.render[(patch * f + feat) * l..(patch * f + feat + 1) * l];
                let mut v = crate::tensor::dot(row, &zz) + u.noise * rng.sample::<f64, _>(StandardNormal);
                v = v * (sh.gain * self.gain[feat]).exp() + sh.style * self.style[patch * f + feat];
                x.push(v);
            }
            for ch in 0..q {
                let sig = signature.get(patch * q + ch).copied().unwrap_or(0.0);
                x.push(u.nuisance_noise * rng.sample::<f64, _>(StandardNormal) + sig);
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub class: usize,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub world: WorldConfig,
    pub class_ids: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    /// grouped by class in `class_ids` order
    pub samples: Vec<Sample>,
}

impl Universe {
    pub fn samples_of(&self, class: usize) -> &[Sample] {
        let i = self.class_ids.iter().position(|&c| c == class).expect("class in universe");
        let n = self.config.samples_per_class;
        &self.samples[i * n..(i + 1) * n]
    }
}

pub fn make_universe(world: &World, config: &UniverseConfig) -> Result<Universe> {
    if config.classes < 2 {
        bail!(Config, "a universe needs at least 2 classes, got {}", config.classes);
    }
    if config.samples_per_class == 0 {
        bail!(Config, "samples_per_class must be positive");
    }
    if config.first_class + config.classes > world.config.vocab {
        bail!(Config, "classes {}..{} exceed the vocabulary of {}", config.first_class, config.first_class + config.classes, world.config.vocab);
    }
    if config.noise < 0.0 || config.intra < 0.0 || config.nuisance_noise < 0.0 {
        bail!(Config, "noise scales must be non-negative");
    }
    let class_ids: Vec<usize> = (config.first_class..config.first_class + config.classes).collect();
    let prototypes: Vec<Vec<f64>> = class_ids.iter().map(|&c| world.prototype(c)).collect();
    let sig_len = world.config.patches() * world.config.nuisance;
    let owners = config.classes.div_ceil(2);
    let contexts: Vec<Vec<f64>> = if config.shift.shortcut != 0.0 && sig_len > 0 {
        class_ids[..owners].iter().map(|&c| normals(&mut rng_for(world.config.seed, TAG_SIG + c as u64), sig_len, config.shift.shortcut)).collect()
    } else {
        Vec::new()
    };
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for (i, (&class, z)) in class_ids.iter().zip(&prototypes).enumerate() {
        let mut rng = rng_for(config.seed, TAG_SAMPLES + class as u64);
        let mut pick = rng_for(config.seed, TAG_CONTEXT + class as u64);
        for _ in 0..config.samples_per_class {
            let context: &[f64] = match contexts.len() {
                0 => &[],
                n if i < owners => &contexts[i % n],
                n => &contexts[pick.gen_range(0..n)],
            };
            let x = world.render_sample(z, config, context, &mut rng);
            samples.push(Sample { class, x });
        }
    }
    Ok(Universe { config: config.clone(), world: world.config.clone(), class_ids, prototypes, samples })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl Split {
    /// Every class is a base class and there are no novel ones.
    pub fn all_to_all(class_ids: &[usize]) -> Self {
        let mut base = class_ids.to_vec();
        base.sort_unstable();
        Split { base, novel: Vec::new() }
    }
}

/// First `ceil(|C|/2)` ids in ascending order are base, the rest novel.
pub fn split_base_novel(class_ids: &[usize]) -> Result<Split> {
    if class_ids.len() < 2 {
        bail!(Argument, "need at least 2 classes to split, got {}", class_ids.len());
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != class_ids.len() {
        bail!(Argument, "duplicate class ids");
    }
    let nb = ids.len().div_ceil(2);
    let novel = ids.split_off(nb);
    Ok(Split { base: ids, novel })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub k: usize,
    pub shots: Vec<Sample>,
    pub eval_base: Vec<Sample>,
    pub eval_novel: Vec<Sample>,
}

impl FewShotTask {
    /// `C = B ∪ N` in ascending order.
    pub fn candidates(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.base.iter().chain(&self.novel).copied().collect();
        c.sort_unstable();
        c
    }

    pub fn is_all_to_all(&self) -> bool {
        self.novel.is_empty()
    }

    /// Position of a base class in `base`.
    pub fn base_index(&self, class: usize) -> Option<usize> {
        self.base.binary_search(&class).ok()
    }

    pub fn shot_labels(&self) -> Vec<usize> {
        self.shots.iter().map(|s| self.base_index(s.class).expect("shot from a base class")).collect()
    }
}

/// Draws `k` shots per base class without replacement; `eval_per_class`
/// further samples of every class become held-out evaluation data.
pub fn make_task(universe: &Universe, split: &Split, k: usize, eval_per_class: usize, seed: u64) -> Result<FewShotTask> {
    if k == 0 {
        bail!(Config, "k must be at least 1");
    }
    if split.base.is_empty() {
        bail!(Config, "task needs at least one base class");
    }
    for c in split.base.iter().chain(&split.novel) {
        if !universe.class_ids.contains(c) {
            bail!(Config, "class {c} is not in the universe");
        }
    }
    if split.base.iter().any(|b| split.novel.contains(b)) {
        bail!(Config, "base and novel classes overlap");
    }
    let per_class = universe.config.samples_per_class;
    if per_class < k + eval_per_class {
        bail!(Config, "{per_class} samples per class cannot supply {k} shots and {eval_per_class} eval samples");
    }
    let mut base = split.base.clone();
    base.sort_unstable();
    let mut novel = split.novel.clone();
    novel.sort_unstable();
    let mut shots = Vec::with_capacity(k * base.len());
    let mut eval_base = Vec::with_capacity(eval_per_class * base.len());
    let mut eval_novel = Vec::with_capacity(eval_per_class * novel.len());
    for &c in base.iter().chain(&novel) {
        let mut order: Vec<usize> = (0..per_class).collect();
        order.shuffle(&mut rng_for(seed, c as u64));
        let pool = universe.samples_of(c);
        if base.contains(&c) {
            shots.extend(order[..k].iter().map(|&i| pool[i].clone()));
            eval_base.extend(order[k..k + eval_per_class].iter().map(|&i| pool[i].clone()));
        } else {
            eval_novel.extend(order[k..k + eval_per_class].iter().map(|&i| pool[i].clone()));
        }
    }
    Ok(FewShotTask { base, novel, k, shots, eval_base, eval_novel })
}

/// Named downstream settings shipped with the library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Separable,
    Hard,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Profile::Separable),
            "hard" => Ok(Profile::Hard),
            other => Err(Error::Argument(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub universe: UniverseConfig,
    pub k: usize,
    pub eval_per_class: usize,
}

impl Profile {
    /// Downstream universe and task sizes; classes start right after the
    /// pretraining range so they are unseen during pretraining.
    pub fn task_spec(self, world: &WorldConfig) -> TaskSpec {
        match self {
            Profile::Separable => TaskSpec {
                universe: UniverseConfig {
                    seed: 11,
                    first_class: world.pretrain_classes,
                    classes: 10,
                    samples_per_class: 40,
                    noise: 0.3,
                    intra: 0.3,
                    nuisance_noise: 1.0,
                    shift: DomainShift { offset: 1.0, style: 0.5, gain: 0.2, mix: 0.2, shortcut: 0.0 },
                },
                k: 4,
                eval_per_class: 20,
            },
            Profile::Hard => TaskSpec {
                universe: UniverseConfig {
                    seed: 12,
                    first_class: world.pretrain_classes,
                    classes: 20,
                    samples_per_class: 60,
                    noise: 0.5,
                    intra: 0.5,
                    nuisance_noise: 1.0,
                    shift: DomainShift { offset: 0.0, style: 0.0, gain: 0.5, mix: 0.0, shortcut: 0.8 },
                },
                k: 8,
                eval_per_class: 50,
            },
        }
    }
}

/// Contents of a data file written by `save_data`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataBundle {
    pub universe: Universe,
    pub task: Option<FewShotTask>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DataFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    bundle: DataBundle,
}

const DATA_FORMAT: &str = "fewshot-data";

pub fn save_data(path: &Path, bundle: &DataBundle) -> Result<()> {
    let file = DataFile { format: DATA_FORMAT.into(), version: DATA_FORMAT_VERSION, bundle: bundle.clone() };
    let text = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_data(path: &Path) -> Result<DataBundle> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(DATA_FORMAT) {
        bail!(Format, "{} is not a data file", path.display());
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATA_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: DATA_FORMAT_VERSION });
    }
    let file: DataFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    Ok(file.bundle)
}
