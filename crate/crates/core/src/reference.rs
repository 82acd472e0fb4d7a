//! Brute-force reference implementations used to check the main code paths.
//! Nothing here calls into the tensor, model or optimizer code.

use crate::error::{bail, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        bail!(Argument, "step must be positive, got {h}");
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Linear scan over `categories` in ascending order; the lowest id wins ties.
pub fn exhaustive_argmax(categories: &[usize], scorer: impl Fn(usize) -> f64) -> Option<usize> {
    let mut ids = categories.to_vec();
    ids.sort_unstable();
    let mut best: Option<(usize, f64)> = None;
    for c in ids {
        let s = scorer(c);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((c, s)),
        }
    }
    best.map(|(c, _)| c)
}

#[derive(Clone, Copy, Debug)]
pub enum GradientRule {
    /// `g = c (theta - target)`
    Quadratic { curvature: f64, target: f64 },
    Constant(f64),
    /// `+g` on odd steps, `-g` on even steps
    Alternating(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct ScalarAdamW {
    pub theta0: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rule: GradientRule,
}

/// Textbook AdamW on one scalar; returns `theta` after each step.
pub fn scalar_adamw_reference(spec: &ScalarAdamW) -> Vec<f64> {
    let mut theta = spec.theta0;
    let mut m = 0.0f64;
    let mut v = 0.0f64;
    let mut out = Vec::with_capacity(spec.steps);
    for t in 1..=spec.steps {
        let g = match spec.rule {
            GradientRule::Quadratic { curvature, target } => curvature * (theta - target),
            GradientRule::Constant(g) => g,
            GradientRule::Alternating(g) => {
                if t % 2 == 1 {
                    g
                } else {
                    -g
                }
            }
        };
        m = spec.beta1 * m + (1.0 - spec.beta1) * g;
        v = spec.beta2 * v + (1.0 - spec.beta2) * g * g;
        let mhat = m / (1.0 - spec.beta1.powi(t as i32));
        let vhat = v / (1.0 - spec.beta2.powi(t as i32));
        theta -= spec.lr * spec.weight_decay * theta;
        theta -= spec.lr * mhat / (vhat.sqrt() + spec.eps);
        out.push(theta);
    }
    out
}
