//! Held-out accuracy curves, breakpoint detection and hyperparameter sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_rng, compute_budget, init_classifier, peft_step, protocol_of, run_2sfs_with, sample_batch, stage_two, AdaptConfig};
use crate::error::{bail, Result};
use crate::infer::evaluate;
use crate::model::DualEncoder;
use crate::peft::{attach, PeftOptions, Strategy};
use crate::synth::FewShotTask;
use crate::tensor::OptimizerState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iter: usize,
    pub loss: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCurve {
    pub strategy: String,
    pub config_hash: String,
    pub records: Vec<CurveRecord>,
}

impl DynamicsCurve {
    pub fn empty(strategy: &str) -> Self {
        DynamicsCurve { strategy: strategy.to_string(), config_hash: String::new(), records: Vec::new() }
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.iter).collect()
    }

    pub fn novel(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.novel_acc).collect()
    }

    pub fn base(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.base_acc).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub iter: usize,
    pub peak_novel: f64,
    pub final_novel: f64,
    pub decline: f64,
    pub window: usize,
    pub margin: f64,
}

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_MARGIN: f64 = 2.0;

/// Centered moving average of width `window`, truncated at the edges.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let before = (window - 1) / 2;
    let after = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// The smoothed novel-accuracy peak is a breakpoint when the curve ends at
/// least `margin` points below it while smoothed base accuracy ends no lower
/// than it was at the peak.
pub fn detect_breakpoint(curve: &DynamicsCurve, window: usize, margin: f64) -> Result<Option<Breakpoint>> {
    let n = curve.records.len();
    if n < 3 {
        bail!(Argument, "breakpoint detection needs at least 3 records, got {n}");
    }
    if window == 0 || window > n {
        bail!(Argument, "smoothing window {window} does not fit a curve of {n} records");
    }
    if !(margin > 0.0) {
        bail!(Argument, "margin must be positive, got {margin}");
    }
    let novel = curve.novel();
    if novel.iter().any(|v| v.is_nan()) {
        bail!(Argument, "curve has no novel accuracy");
    }
    let sn = smooth(&novel, window);
    let sb = smooth(&curve.base(), window);
    let peak = crate::model::argmax(&sn);
    let last = n - 1;
    if sn[last] <= sn[peak] - margin && sb[last] >= sb[peak] {
        Ok(Some(Breakpoint {
            iter: curve.records[peak].iter,
            peak_novel: sn[peak],
            final_novel: sn[last],
            decline: sn[peak] - sn[last],
            window,
            margin,
        }))
    } else {
        Ok(None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub m: usize,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
}

impl SweepRow {
    /// HM under base-to-novel, base accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.hm.unwrap_or(self.base_acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best: f64,
}

impl SweepTable {
    fn from_rows(rows: Vec<SweepRow>) -> Self {
        let scores: Vec<f64> = rows.iter().map(SweepRow::score).collect();
        let best = rows[crate::model::argmax(&scores)].param;
        SweepTable { rows, best }
    }

    pub fn best_index(&self) -> usize {
        self.rows.iter().position(|r| r.param == self.best).expect("best is a row")
    }
}

/// `start:stop:step` (inclusive stop) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    if spec.is_empty() {
        bail!(Argument, "empty grid");
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| crate::Error::Argument(format!("bad grid value {s:?}")));
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, c] => {
            let (a, b, c) = (num(a)?, num(b)?, num(c)?);
            if !(c > 0.0) || b < a {
                bail!(Argument, "bad range {spec:?}");
            }
            let n = ((b - a) / c + 1e-9).floor() as usize;
            // round to the step's precision so 0.2 + 3*0.1 prints as 0.5
            let digits = (-c.log10().floor()).max(0.0) as i32 + 6;
            let p = 10f64.powi(digits);
            (0..=n).map(|i| ((a + i as f64 * c) * p).round() / p).collect()
        }
        [_] => spec.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => bail!(Argument, "bad grid {spec:?}"),
    };
    Ok(grid)
}

/// Runs the two-stage procedure for every alpha in `grid` with the seed of
/// `base`. The stage-one prefix is shared: all alphas see the same rng stream
/// and optimizer trajectory, so each row equals an independent run.
pub fn sweep_alpha(pretrained: &DualEncoder, strategy: Strategy, peft: &PeftOptions, task: &FewShotTask, base: &AdaptConfig, grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        bail!(Argument, "empty alpha grid");
    }
    let configs: Vec<AdaptConfig> = grid.iter().map(|&alpha| AdaptConfig { alpha, ..base.clone() }).collect();
    for c in &configs {
        c.validate()?;
    }
    let budgets: Vec<_> = configs.iter().map(compute_budget).collect();
    let mut stops: Vec<usize> = budgets.iter().map(|b| b.m1).collect();
    stops.sort_unstable();
    stops.dedup();
    let mut model = pretrained.clone();
    let set = attach(strategy, &mut model, peft)?;
    let names = set.names();
    let trainable = set.name_set();
    let labels = task.shot_labels();
    let mut rng = adapt_rng(base);
    let mut opt = OptimizerState::new(base.optimizer());
    let mut snapshots = Vec::with_capacity(stops.len());
    let mut it = 0;
    for &stop in &stops {
        while it < stop {
            let idx = sample_batch(task, base.batch, &mut rng)?;
            peft_step(&mut model, &names, &trainable, &mut opt, task, &labels, &idx)?;
            it += 1;
        }
        snapshots.push((stop, model.clone(), rng.clone()));
    }
    let rows = configs
        .par_iter()
        .zip(budgets.par_iter())
        .map(|(c, b)| {
            let (_, m, r) = snapshots.iter().find(|(s, _, _)| *s == b.m1).expect("snapshot per stop");
            let mut rng = r.clone();
            let mut classifier = init_classifier(m, &task.base)?;
            stage_two(m, &mut classifier, task, c, b.m2, b.m1, &mut rng, None)?;
            let metrics = evaluate(protocol_of(task), m, &classifier, task)?;
            Ok(SweepRow { param: c.alpha, m: b.m, base_acc: metrics.base_acc, novel_acc: metrics.novel_acc, hm: metrics.hm })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable::from_rows(rows))
}

/// Runs the two-stage procedure for every iterations-per-shot value in `grid`.
pub fn sweep_budget(pretrained: &DualEncoder, strategy: Strategy, peft: &PeftOptions, task: &FewShotTask, base: &AdaptConfig, grid: &[usize]) -> Result<SweepTable> {
    if grid.is_empty() {
        bail!(Argument, "empty budget grid");
    }
    let rows = grid
        .par_iter()
        .map(|&m_per_shot| {
            let c = AdaptConfig { m_per_shot, ..base.clone() };
            let run = run_2sfs_with(pretrained, strategy, peft, task, &c, false)?;
            Ok(SweepRow { param: m_per_shot as f64, m: run.budget.m, base_acc: run.metrics.base_acc, novel_acc: run.metrics.novel_acc, hm: run.metrics.hm })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable::from_rows(rows))
}
