//! Reverse-mode gradients against central finite differences. Shared by the
//! gradient tests here and the acceptance suite of the CLI crate.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewshot::adapt::{stage_one_loss, stage_two_loss};
use fewshot::model::{DualEncoder, ModelConfig};
use fewshot::peft::{attach, PeftOptions, Strategy};
use fewshot::reference::finite_difference_gradient;
use fewshot::synth::Vocabulary;
use fewshot::tensor::{Graph, Var};

pub const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

/// Norm-wise relative error; gradients that vanish identically (the key
/// bias under softmax, for one) are compared in absolute terms instead.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) < 1e-8 {
        return diff;
    }
    diff / na.max(nb)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes to the gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xF00D), r * c);
    let w = g.constant(r, c, w).unwrap();
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Builds the op on fresh random leaves and compares every leaf gradient.
fn check_op(name: &str, shapes: &[(usize, usize)], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| randn(&mut rng, r * c)).collect();
        let eval = |vals: &[Vec<f64>]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let leaves: Vec<Var> = shapes.iter().zip(vals).map(|(&(r, c), v)| g.param(r, c, v.clone()).unwrap()).collect();
            let out = build(&mut g, &leaves);
            let loss = if g.shape(out) == (1, 1) { out } else { project(&mut g, out, seed) };
            (g, leaves, loss)
        };
        let (mut g, leaves, loss) = eval(&values);
        g.backward(loss).unwrap();
        for (i, &leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(leaf).unwrap().to_vec();
            let numeric = finite_difference_gradient(
                |x| {
                    let mut v = values.clone();
                    v[i] = x.to_vec();
                    let (g, _, loss) = eval(&v);
                    g.scalar(loss)
                },
                &values[i],
                H,
            )
            .unwrap();
            let e = rel_err(&analytic, &numeric);
            assert!(e < TOL, "{name}: input {i}, seed {seed}, relative error {e:e}");
        }
    }
}

pub fn elementwise_and_linear_ops() {
    check_op("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op("matmul_nt", &[(3, 4), (2, 4)], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check_op("add", &[(3, 4), (3, 4)], |g, v| g.add(v[0], v[1]).unwrap());
    check_op("mul", &[(3, 4), (3, 4)], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op("add_row", &[(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1]).unwrap());
    check_op("add_tiled", &[(6, 4), (3, 4)], |g, v| g.add_tiled(v[0], v[1]).unwrap());
    check_op("scale", &[(3, 4)], |g, v| g.scale(v[0], 1.7).unwrap());
    check_op("scale_exp", &[(3, 4), (1, 1)], |g, v| g.scale_exp(v[0], v[1]).unwrap());
    check_op("transpose", &[(3, 4)], |g, v| g.transpose(v[0]).unwrap());
    check_op("sum", &[(3, 4)], |g, v| g.sum(v[0]).unwrap());
    check_op("gather_rows", &[(5, 3)], |g, v| g.gather_rows(v[0], &[0, 2, 2, 4]).unwrap());
    check_op("concat_rows", &[(2, 3), (3, 3)], |g, v| g.concat_rows(v[0], v[1]).unwrap());
}

pub fn nonlinear_ops() {
    check_op("layer_norm", &[(3, 5), (1, 5), (1, 5)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    check_op("gelu", &[(3, 4)], |g, v| g.gelu(v[0]).unwrap());
    check_op("attention", &[(6, 4), (6, 4), (6, 4)], |g, v| g.attention(v[0], v[1], v[2], 3).unwrap());
    check_op("mean_pool", &[(6, 4)], |g, v| g.mean_pool(v[0], 3).unwrap());
    check_op("l2_normalize", &[(3, 4)], |g, v| g.l2_normalize(v[0]).unwrap());
    check_op("cosine", &[(3, 4), (2, 4)], |g, v| g.cosine(v[0], v[1]).unwrap());
    check_op("cross_entropy", &[(4, 3)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

fn tiny_model(seed: u64) -> DualEncoder {
    let config = ModelConfig { blocks: 1, width: 8, mlp_hidden: 16, grid_h: 2, grid_w: 2, patch_dim: 4, vocab: 12, lex_dim: 4, ln_eps: 1e-5 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
    let vocab = Vocabulary { size: 12, dim: 4, features: randn(&mut rng, 48) };
    DualEncoder::new(config, &vocab, seed).unwrap()
}

/// Stage-one loss through the whole model against finite differences over
/// every trainable tensor of `strategy`.
pub fn check_stage_one(strategy: Strategy) {
    for seed in 0..SEEDS {
        let mut model = tiny_model(seed);
        let set = attach(strategy, &mut model, &PeftOptions { lora_rank: 2, prompt_len: 2, seed, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // move every trainable tensor off its initialization (LoRA B starts at zero)
        for name in set.names() {
            for v in model.params.get_mut(&name).unwrap().values.iter_mut() {
                *v += 0.3 * rng.gen_range(-1.0..1.0);
            }
        }
        let images: Vec<Vec<f64>> = (0..5).map(|_| randn(&mut rng, 16)).collect();
        let imgs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let base = [3, 5, 7];
        let labels = [0, 1, 2, 1, 0];
        let trainable: BTreeSet<String> = set.name_set();
        let loss_of = |m: &DualEncoder| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, &trainable).unwrap();
            let l = stage_one_loss(m, &mut g, &b, &imgs, &labels, &base).unwrap();
            (g, b, l)
        };
        let (mut g, b, loss) = loss_of(&model);
        g.backward(loss).unwrap();
        for name in set.names() {
            let analytic = g.grad(b.var(&name)).unwrap().to_vec();
            let x0 = model.params[&name].values.clone();
            let numeric = finite_difference_gradient(
                |x| {
                    let mut m = model.clone();
                    m.params.get_mut(&name).unwrap().values = x.to_vec();
                    let (g, _, l) = loss_of(&m);
                    g.scalar(l)
                },
                &x0,
                H,
            )
            .unwrap();
            let e = rel_err(&analytic, &numeric);
            assert!(e < TOL, "{strategy} {name} seed {seed}: relative error {e:e}");
        }
    }
}

pub fn stage_two_loss_matches_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, nb, d) = (7, 3, 5);
        let feats: Vec<f64> = (0..n)
            .flat_map(|_| {
                let v = randn(&mut rng, d);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(move |x| x / norm)
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % nb).collect();
        let phi0 = randn(&mut rng, nb * d);
        let tau = 1.0 + 30.0 * rng.gen::<f64>();
        let eval = |phi: &[f64]| {
            let mut g = Graph::new();
            let p = g.param(nb, d, phi.to_vec()).unwrap();
            let x = g.constant(n, d, feats.clone()).unwrap();
            let l = stage_two_loss(&mut g, p, x, &labels, tau).unwrap();
            (g, p, l)
        };
        let (mut g, p, l) = eval(&phi0);
        g.backward(l).unwrap();
        let analytic = g.grad(p).unwrap().to_vec();
        let numeric = finite_difference_gradient(|x| { let (g, _, l) = eval(x); g.scalar(l) }, &phi0, H).unwrap();
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "stage two seed {seed}: relative error {e:e}");
    }
}
