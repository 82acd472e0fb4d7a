//! Regenerates the JSON fixtures under `tests/fixtures`.
//!
//! ```text
//! cargo run --release -p fewshot --example gen_fixtures
//! ```
//!
//! `oracles.json` comes from the scalar references alone. `reference_runs.json`
//! records measured values of seeded runs on the bundled benchmark.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fewshot::adapt::{compute_budget, init_classifier, run_2sfs, run_single_stage};
use fewshot::bench;
use fewshot::dynamics::{detect_breakpoint, parse_grid, sweep_alpha, DEFAULT_MARGIN, DEFAULT_WINDOW};
use fewshot::infer::{evaluate, Protocol};
use fewshot::model::{holdout_accuracy, PretrainConfig};
use fewshot::peft::{PeftOptions, Strategy};
use fewshot::reference::{finite_difference_gradient, scalar_adamw_reference, GradientRule, ScalarAdamW};
use fewshot::synth::{make_universe, Profile, Universe, UniverseConfig, World, WorldConfig};

/// Plain scalar layer norm, kept apart from the graph implementation.
fn layer_norm_sum(a: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> f64 {
    let n = a.len() as f64;
    let mu = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    a.iter().zip(gamma).zip(beta).map(|((x, g), b)| g * (x - mu) / s + b).sum()
}

fn adamw_case(name: &str, spec: ScalarAdamW) -> serde_json::Value {
    let rule = match spec.rule {
        GradientRule::Quadratic { curvature, target } => json!({"quadratic": {"curvature": curvature, "target": target}}),
        GradientRule::Constant(g) => json!({"constant": g}),
        GradientRule::Alternating(g) => json!({"alternating": g}),
    };
    json!({
        "name": name,
        "theta0": spec.theta0,
        "steps": spec.steps,
        "lr": spec.lr,
        "weight_decay": spec.weight_decay,
        "beta1": spec.beta1,
        "beta2": spec.beta2,
        "eps": spec.eps,
        "rule": rule,
        "trajectory": scalar_adamw_reference(&spec),
    })
}

fn oracles() -> serde_json::Value {
    let base = ScalarAdamW { theta0: 1.0, steps: 10, lr: 1e-2, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, rule: GradientRule::Constant(0.5) };
    let adamw = vec![
        adamw_case("constant", base),
        adamw_case("alternating", ScalarAdamW { theta0: -0.3, weight_decay: 0.0, rule: GradientRule::Alternating(1.0), ..base }),
        adamw_case("quadratic", ScalarAdamW { theta0: 2.0, lr: 0.1, rule: GradientRule::Quadratic { curvature: 3.0, target: -1.0 }, ..base }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ln: Vec<serde_json::Value> = (0..5)
        .map(|_| {
            let d = 6;
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
            let beta: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let eps = 1e-5;
            let grad = finite_difference_gradient(|g| layer_norm_sum(&a, g, &beta, eps), &gamma, 1e-5).unwrap();
            json!({"a": a, "gamma": gamma, "beta": beta, "eps": eps, "grad_gamma": grad})
        })
        .collect();
    json!({"adamw": adamw, "layer_norm_sum_grad": ln})
}

/// The first 64 classes of the pretraining universe with their holdout samples.
fn first_classes(u: &Universe, n: usize) -> Universe {
    let per = u.config.samples_per_class;
    Universe {
        config: UniverseConfig { classes: n, ..u.config.clone() },
        world: u.world.clone(),
        class_ids: u.class_ids[..n].to_vec(),
        prototypes: u.prototypes[..n].to_vec(),
        samples: u.samples[..n * per].to_vec(),
    }
}

fn reference_runs() -> serde_json::Value {
    let world = World::new(WorldConfig::default()).unwrap();
    let pc = PretrainConfig::default();
    let (model, report) = bench::pretrained(&world, &pc, 0).unwrap();
    let pre_universe = make_universe(&world, &UniverseConfig::pretraining(&world.config)).unwrap();
    let acc64 = holdout_accuracy(&model, &first_classes(&pre_universe, 64), pc.holdout).unwrap();
    eprintln!("pretrained: {report:?}, 64-class holdout {acc64:.2}");

    let wc = &world.config;
    let opts = PeftOptions { seed: 7, ..Default::default() };
    let task7 = bench::task(&world, Profile::Hard, 7).unwrap();
    let cfg7 = bench::adapt_config(wc, Profile::Hard, 7);
    let single7 = run_single_stage(&model, Strategy::LayerNorm, &opts, &task7, &cfg7).unwrap();
    let two7 = run_2sfs(&model, Strategy::LayerNorm, &opts, &task7, &cfg7).unwrap();
    let b = compute_budget(&cfg7);
    let init = evaluate(Protocol::BaseToNovel, &two7.model, &init_classifier(&two7.model, &task7.base).unwrap(), &task7).unwrap();

    let opts0 = PeftOptions::default();
    let task0 = bench::task(&world, Profile::Hard, 0).unwrap();
    let cfg0 = bench::adapt_config(wc, Profile::Hard, 0);
    let single0 = run_single_stage(&model, Strategy::LayerNorm, &opts0, &task0, &cfg0).unwrap();
    let bp = detect_breakpoint(&single0.curve, DEFAULT_WINDOW, DEFAULT_MARGIN).unwrap();
    eprintln!("breakpoint: {bp:?}");
    let sweep = sweep_alpha(&model, Strategy::LayerNorm, &opts0, &task0, &cfg0, &parse_grid("0.2:0.8:0.1").unwrap()).unwrap();
    eprintln!("sweep best alpha {}", sweep.best);

    json!({
        "pretrain": {
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "zero_shot_acc": report.zero_shot_acc,
            "tau": report.tau,
            "holdout_acc_64": acc64,
            "chance_64": 100.0 / 64.0,
        },
        "stage_one_seed7": {
            "loss_start": single7.curve.records[0].loss,
            "loss_end": single7.curve.records.last().unwrap().loss,
        },
        "stage_two_seed7": {
            "m1": b.m1,
            "base_acc_init": init.base_acc,
            "base_acc_final": two7.metrics.base_acc,
            "metrics": two7.metrics,
        },
        "breakpoint_layernorm_seed0": bp,
        "sweep_alpha_seed0": sweep,
    })
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let write = |name: &str, v: serde_json::Value| {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&v).unwrap() + "\n").unwrap();
        eprintln!("wrote {name}");
    };
    write("oracles.json", oracles());
    if std::env::args().any(|a| a == "--oracles-only") {
        return;
    }
    write("reference_runs.json", reference_runs());
}
