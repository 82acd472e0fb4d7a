//! Two-stage adaptation: PEFT on the base-class cross-entropy for the first
//! `ceil(alpha * m)` steps, then a text-initialized linear classifier trained
//! on frozen image features for the rest of the budget.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CurveRecord, DynamicsCurve};
use crate::error::{bail, Result};
use crate::infer::{evaluate, Metrics, Protocol};
use crate::model::{argmax, Bound, DualEncoder, LOGIT_SCALE};
use crate::peft::{attach, ParamSet, PeftOptions, Strategy};
use crate::synth::{rng_for, FewShotTask};
use crate::tensor::{dot, AdamWConfig, Graph, OptimizerState, Registry, Tensor, Var};

pub const PHI: &str = "classifier.phi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// iterations per shot
    #[serde(rename = "M")]
    pub m_per_shot: usize,
    pub k: usize,
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { m_per_shot: 300, k: 16, alpha: 0.6, lr: 2e-4, weight_decay: 0.01, batch: 32, eval_interval: 200, seed: 0 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_per_shot * self.k == 0 {
            bail!(Config, "budget m = M*k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Config, "alpha must lie in [0, 1], got {}", self.alpha);
        }
        if self.batch == 0 || self.eval_interval == 0 {
            bail!(Config, "batch and eval_interval must be at least 1");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            bail!(Config, "lr must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.lr, self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub m: usize,
    pub m1: usize,
    pub m2: usize,
}

pub fn compute_budget(config: &AdaptConfig) -> Budget {
    let m = config.m_per_shot * config.k;
    // the guard keeps products such as 0.7 * 100 = 70.00000000000001 from rounding up
    let m1 = ((config.alpha * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m);
    Budget { m, m1, m2: m - m1 }
}

/// `batch` shot indices drawn uniformly with replacement.
pub fn sample_batch(task: &FewShotTask, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = task.shots.len();
    if n == 0 {
        bail!(State, "task has no shots");
    }
    Ok((0..batch).map(|_| rng.gen_range(0..n)).collect())
}

/// Row-per-base-class weights, initialized from the class text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub base: Vec<usize>,
    pub phi: Tensor,
    pub trainable: bool,
}

impl Classifier {
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.phi.shape[1];
        &self.phi.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.phi.values.chunks(self.phi.shape[1]).map(<[f64]>::to_vec).collect()
    }

    /// Rows scaled to unit norm, as used for scoring.
    pub fn unit_rows(&self) -> Vec<Vec<f64>> {
        self.rows()
            .into_iter()
            .map(|r| {
                let n = dot(&r, &r).sqrt();
                r.into_iter().map(|v| v / n).collect()
            })
            .collect()
    }
}

pub fn init_classifier(model: &DualEncoder, base: &[usize]) -> Result<Classifier> {
    if base.is_empty() {
        bail!(Argument, "cannot build a classifier for an empty base set");
    }
    let mut ids = base.to_vec();
    ids.sort_unstable();
    let rows = model.encode_texts(&ids)?;
    let d = model.config.width;
    let phi = Tensor::new(vec![ids.len(), d], rows.concat())?;
    Ok(Classifier { base: ids, phi, trainable: true })
}

/// Collects curve records at multiples of the interval and at the final step.
#[derive(Clone, Debug)]
pub struct CurveRecorder {
    pub interval: usize,
    pub total: usize,
    pub records: Vec<CurveRecord>,
}

impl CurveRecorder {
    pub fn new(interval: usize, total: usize) -> Self {
        CurveRecorder { interval: interval.max(1), total, records: Vec::new() }
    }

    pub fn due(&self, iter: usize) -> bool {
        iter % self.interval == 0 || iter == self.total
    }

    pub fn into_curve(self, strategy: &str, config_hash: &str) -> DynamicsCurve {
        DynamicsCurve { strategy: strategy.to_string(), config_hash: config_hash.to_string(), records: self.records }
    }
}

fn accuracy_of(scores: impl Iterator<Item = (usize, usize)>) -> f64 {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (p, l) in scores {
        n += 1;
        if p == l {
            hit += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        100.0 * hit as f64 / n as f64
    }
}

fn predict_rows(emb: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<usize> {
    emb.iter().map(|e| argmax(&rows.iter().map(|r| dot(e, r)).collect::<Vec<_>>())).collect()
}

fn images(samples: &[crate::synth::Sample]) -> Vec<&[f64]> {
    samples.iter().map(|s| s.x.as_slice()).collect()
}

fn labels_in(samples: &[crate::synth::Sample], classes: &[usize]) -> Vec<usize> {
    samples.iter().map(|s| classes.binary_search(&s.class).expect("sample class in set")).collect()
}

fn mean_ce(logit_rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logit_rows.iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    total / labels.len() as f64
}

/// Held-out accuracies of the text-encoder predictor and the full-shot
/// training loss, all under the current parameters.
pub fn text_snapshot(model: &DualEncoder, task: &FewShotTask) -> Result<(f64, f64, f64)> {
    let tau = model.tau();
    let base_text = model.encode_texts(&task.base)?;
    let shot_emb = model.encode_images(&images(&task.shots))?;
    let logits: Vec<Vec<f64>> = shot_emb.iter().map(|e| base_text.iter().map(|t| tau * dot(e, t)).collect()).collect();
    let loss = mean_ce(&logits, &task.shot_labels());
    let eb = model.encode_images(&images(&task.eval_base))?;
    let base_acc = accuracy_of(predict_rows(&eb, &base_text).into_iter().zip(labels_in(&task.eval_base, &task.base)));
    let novel_acc = novel_accuracy(model, task)?;
    Ok((loss, base_acc, novel_acc))
}

/// Novel-class held-out accuracy through the text encoder; NaN without novel data.
pub fn novel_accuracy(model: &DualEncoder, task: &FewShotTask) -> Result<f64> {
    if task.novel.is_empty() || task.eval_novel.is_empty() {
        return Ok(f64::NAN);
    }
    let novel_text = model.encode_texts(&task.novel)?;
    let en = model.encode_images(&images(&task.eval_novel))?;
    Ok(accuracy_of(predict_rows(&en, &novel_text).into_iter().zip(labels_in(&task.eval_novel, &task.novel))))
}

/// Cross-entropy of `tau * cos(image, text)` over the base-class prompts;
/// `labels` index into `base`.
pub fn stage_one_loss(model: &DualEncoder, g: &mut Graph, b: &Bound, images: &[&[f64]], labels: &[usize], base: &[usize]) -> Result<Var> {
    let img = model.image_graph(g, b, images)?;
    let txt = model.text_graph(g, b, base)?;
    let cos = g.matmul_nt(img, txt)?;
    let logits = g.scale_exp(cos, b.var(LOGIT_SCALE))?;
    g.cross_entropy(logits, labels)
}

/// Cross-entropy of `tau * cos(feature, phi row)` on fixed unit features.
pub fn stage_two_loss(g: &mut Graph, phi: Var, features: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let w = g.l2_normalize(phi)?;
    let cos = g.matmul_nt(features, w)?;
    let logits = g.scale(cos, tau)?;
    g.cross_entropy(logits, labels)
}

/// One optimizer step of the base-class cross-entropy over the PEFT set.
/// Returns the mini-batch loss before the update.
pub fn peft_step(model: &mut DualEncoder, names: &[String], trainable: &BTreeSet<String>, opt: &mut OptimizerState, task: &FewShotTask, labels: &[usize], idx: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable)?;
    let imgs: Vec<&[f64]> = idx.iter().map(|&i| task.shots[i].x.as_slice()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let loss = stage_one_loss(model, &mut g, &b, &imgs, &y, &task.base)?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    for name in names {
        let grad = g.grad(b.var(name)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params[name].len()]);
        model.params.get_mut(name).expect("bound").set_grad(grad)?;
    }
    opt.step(&mut model.params, names)?;
    Ok(value)
}

/// Runs `steps` PEFT updates starting at iteration `start`. Only tensors in
/// `set` change.
pub fn stage_one(model: &mut DualEncoder, set: &ParamSet, task: &FewShotTask, config: &AdaptConfig, steps: usize, rng: &mut ChaCha8Rng, mut recorder: Option<&mut CurveRecorder>) -> Result<usize> {
    if model.strategy != Some(set.strategy) {
        bail!(State, "parameter set does not belong to the attached strategy");
    }
    let names = set.names();
    let trainable = set.name_set();
    let labels = task.shot_labels();
    let mut opt = OptimizerState::new(config.optimizer());
    for it in 0..=steps {
        if let Some(rec) = recorder.as_deref_mut() {
            if rec.due(it) {
                let (loss, base_acc, novel_acc) = text_snapshot(model, task)?;
                rec.records.push(CurveRecord { iter: it, loss, base_acc, novel_acc });
            }
        }
        if it == steps {
            break;
        }
        let idx = sample_batch(task, config.batch, rng)?;
        peft_step(model, &names, &trainable, &mut opt, task, &labels, &idx)?;
    }
    Ok(steps)
}

/// Trains the classifier rows on frozen image features for `steps` updates,
/// recording iterations `start+1..=start+steps`. Nothing in `model` changes.
pub fn stage_two(model: &DualEncoder, classifier: &mut Classifier, task: &FewShotTask, config: &AdaptConfig, steps: usize, start: usize, rng: &mut ChaCha8Rng, mut recorder: Option<&mut CurveRecorder>) -> Result<usize> {
    if steps == 0 {
        return Ok(0);
    }
    if !classifier.trainable {
        bail!(State, "classifier is frozen");
    }
    let tau = model.tau();
    let d = model.config.width;
    let labels: Vec<usize> = task.shots.iter().map(|s| classifier.base.binary_search(&s.class).expect("shot class in classifier")).collect();
    let feats = model.encode_images(&images(&task.shots))?;
    let eval_feats = model.encode_images(&images(&task.eval_base))?;
    let eval_labels = labels_in(&task.eval_base, &classifier.base);
    let novel_acc = if recorder.is_some() { novel_accuracy(model, task)? } else { f64::NAN };
    let nb = classifier.base.len();
    let mut reg = Registry::new();
    reg.insert(PHI.to_string(), std::mem::replace(&mut classifier.phi, Tensor::zeros(vec![0])));
    let names = vec![PHI.to_string()];
    let mut opt = OptimizerState::new(config.optimizer());
    let result = (|| -> Result<()> {
        for it in start + 1..=start + steps {
            let idx = sample_batch(task, config.batch, rng)?;
            let mut g = Graph::new();
            let phi = g.param(nb, d, reg[PHI].values.clone())?;
            let batch: Vec<f64> = idx.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let x = g.constant(idx.len(), d, batch)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = stage_two_loss(&mut g, phi, x, &y, tau)?;
            g.backward(loss)?;
            let grad = g.grad(phi).expect("phi tracked").to_vec();
            reg.get_mut(PHI).expect("present").set_grad(grad)?;
            opt.step(&mut reg, &names)?;
            if let Some(rec) = recorder.as_deref_mut() {
                if rec.due(it) {
                    let tmp = Classifier { base: classifier.base.clone(), phi: reg[PHI].clone(), trainable: true };
                    let rows = tmp.unit_rows();
                    let logits: Vec<Vec<f64>> = feats.iter().map(|e| rows.iter().map(|r| tau * dot(e, r)).collect()).collect();
                    let loss = mean_ce(&logits, &labels);
                    let base_acc = accuracy_of(predict_rows(&eval_feats, &rows).into_iter().zip(eval_labels.iter().copied()));
                    rec.records.push(CurveRecord { iter: it, loss, base_acc, novel_acc });
                }
            }
        }
        Ok(())
    })();
    let mut phi = reg.remove(PHI).expect("present");
    phi.grad = None;
    classifier.phi = phi;
    result.map(|_| steps)
}

/// Outcome of a complete two-stage run.
#[derive(Clone, Debug)]
pub struct TwoStageRun {
    pub model: DualEncoder,
    pub params: ParamSet,
    pub classifier: Classifier,
    pub curve: DynamicsCurve,
    pub budget: Budget,
    pub steps: usize,
    pub metrics: Metrics,
}

pub fn adapt_rng(config: &AdaptConfig) -> ChaCha8Rng {
    rng_for(config.seed, 0xADA9)
}

pub fn protocol_of(task: &FewShotTask) -> Protocol {
    if task.is_all_to_all() {
        Protocol::AllToAll
    } else {
        Protocol::BaseToNovel
    }
}

pub fn run_2sfs(pretrained: &DualEncoder, strategy: Strategy, peft: &PeftOptions, task: &FewShotTask, config: &AdaptConfig) -> Result<TwoStageRun> {
    run_2sfs_with(pretrained, strategy, peft, task, config, true)
}

pub(crate) fn run_2sfs_with(pretrained: &DualEncoder, strategy: Strategy, peft: &PeftOptions, task: &FewShotTask, config: &AdaptConfig, record: bool) -> Result<TwoStageRun> {
    config.validate()?;
    let budget = compute_budget(config);
    let mut model = pretrained.clone();
    let params = attach(strategy, &mut model, peft)?;
    let mut rng = adapt_rng(config);
    let mut recorder = record.then(|| CurveRecorder::new(config.eval_interval, budget.m));
    let s1 = stage_one(&mut model, &params, task, config, budget.m1, &mut rng, recorder.as_mut())?;
    let mut classifier = init_classifier(&model, &task.base)?;
    let s2 = stage_two(&model, &mut classifier, task, config, budget.m2, budget.m1, &mut rng, recorder.as_mut())?;
    classifier.trainable = false;
    model.reset_text_encoder_calls();
    let metrics = evaluate(protocol_of(task), &model, &classifier, task)?;
    let curve = recorder.map(|r| r.into_curve(strategy.name(), "")).unwrap_or_else(|| DynamicsCurve::empty(strategy.name()));
    Ok(TwoStageRun { model, params, classifier, curve, budget, steps: s1 + s2, metrics })
}

#[derive(Clone, Debug)]
pub struct SingleStageRun {
    pub model: DualEncoder,
    pub params: ParamSet,
    pub curve: DynamicsCurve,
    pub steps: usize,
    pub metrics: Metrics,
}

/// All `m` steps go to PEFT; the prediction uses the adapted text encoder.
pub fn run_single_stage(pretrained: &DualEncoder, strategy: Strategy, peft: &PeftOptions, task: &FewShotTask, config: &AdaptConfig) -> Result<SingleStageRun> {
    config.validate()?;
    let m = compute_budget(config).m;
    let mut model = pretrained.clone();
    let params = attach(strategy, &mut model, peft)?;
    let mut rng = adapt_rng(config);
    let mut recorder = CurveRecorder::new(config.eval_interval, m);
    let steps = stage_one(&mut model, &params, task, config, m, &mut rng, Some(&mut recorder))?;
    let classifier = init_classifier(&model, &task.base)?;
    model.reset_text_encoder_calls();
    let metrics = evaluate(protocol_of(task), &model, &classifier, task)?;
    Ok(SingleStageRun { model, params, curve: recorder.into_curve(strategy.name(), ""), steps, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        let mut c = AdaptConfig { m_per_shot: 300, k: 16, alpha: 0.6, ..Default::default() };
        assert_eq!(compute_budget(&c), Budget { m: 4800, m1: 2880, m2: 1920 });
        c.alpha = 0.3;
        assert_eq!(compute_budget(&c), Budget { m: 4800, m1: 1440, m2: 3360 });
        c.alpha = 1.0;
        assert_eq!(compute_budget(&c).m2, 0);
        c.alpha = 0.0;
        assert_eq!(compute_budget(&c).m1, 0);
        let c = AdaptConfig { m_per_shot: 10, k: 10, alpha: 0.7, ..Default::default() };
        assert_eq!(compute_budget(&c).m1, 70);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig::default().validate().is_ok());
    }
}
