//! The bundled reference benchmark: default world, pretrained model and the
//! per-profile task and optimizer settings used by the acceptance checks.

use crate::adapt::AdaptConfig;
use crate::error::Result;
use crate::model::{pretrain, DualEncoder, ModelConfig, PretrainConfig, PretrainReport};
use crate::synth::{make_task, make_universe, split_base_novel, FewShotTask, Profile, Split, Universe, UniverseConfig, World, WorldConfig};

/// Architecture sized for `world`.
pub fn model_config(world: &WorldConfig) -> ModelConfig {
    ModelConfig { patch_dim: world.patch_dim(), lex_dim: world.lex_dim, vocab: world.vocab, ..ModelConfig::default() }
}

/// Pretrains a fresh model on the world's pretraining universe.
pub fn pretrained(world: &World, config: &PretrainConfig, init_seed: u64) -> Result<(DualEncoder, PretrainReport)> {
    let universe = make_universe(world, &UniverseConfig::pretraining(&world.config))?;
    let mut model = DualEncoder::new(model_config(&world.config), &world.vocabulary(), init_seed)?;
    let report = pretrain(&mut model, &universe, config)?;
    Ok((model, report))
}

/// Downstream universe and base/novel split of a profile.
pub fn downstream(world: &World, profile: Profile) -> Result<(Universe, Split)> {
    let spec = profile.task_spec(&world.config);
    let universe = make_universe(world, &spec.universe)?;
    let split = split_base_novel(&universe.class_ids)?;
    Ok((universe, split))
}

pub fn task(world: &World, profile: Profile, seed: u64) -> Result<FewShotTask> {
    let spec = profile.task_spec(&world.config);
    let (universe, split) = downstream(world, profile)?;
    make_task(&universe, &split, spec.k, spec.eval_per_class, seed)
}

/// Adaptation settings the profile was calibrated with.
pub fn adapt_config(world: &WorldConfig, profile: Profile, seed: u64) -> AdaptConfig {
    let k = profile.task_spec(world).k;
    match profile {
        Profile::Hard => AdaptConfig { m_per_shot: 100, k, alpha: 0.6, lr: 1e-3, eval_interval: 50, seed, ..AdaptConfig::default() },
        Profile::Separable => AdaptConfig { m_per_shot: 100, k, alpha: 0.6, eval_interval: 50, seed, ..AdaptConfig::default() },
    }
}
