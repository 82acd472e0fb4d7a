//! Category-selective prediction and evaluation metrics.
//!
//! Base classes are scored against stored classifier rows, novel classes
//! against text embeddings from the adapted text encoder, computed once per
//! evaluation and cached.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapt::Classifier;
use crate::error::{bail, Error, Result};
use crate::model::{argmax, DualEncoder};
use crate::synth::{FewShotTask, Sample};
use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "base-to-novel")]
    BaseToNovel,
    #[serde(rename = "all-to-all")]
    AllToAll,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::BaseToNovel => "base-to-novel",
            Protocol::AllToAll => "all-to-all",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-to-novel" => Ok(Protocol::BaseToNovel),
            "all-to-all" => Ok(Protocol::AllToAll),
            other => Err(Error::Argument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub protocol: Protocol,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
    pub text_encoder_calls: u64,
}

pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if base < 0.0 || novel < 0.0 || base.is_nan() || novel.is_nan() {
        bail!(Domain, "accuracies must be non-negative, got {base} and {novel}");
    }
    if base == 0.0 && novel == 0.0 {
        bail!(Domain, "harmonic mean of two zeros is undefined");
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Percentage of positions where the prediction equals the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hit = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hit as f64 / labels.len() as f64
}

pub struct SelectivePredictor<'a> {
    model: &'a DualEncoder,
    classifier: &'a Classifier,
    rows: Vec<Vec<f64>>,
    novel: BTreeMap<usize, Vec<f64>>,
    calls: u64,
}

impl<'a> SelectivePredictor<'a> {
    pub fn new(model: &'a DualEncoder, classifier: &'a Classifier) -> Self {
        SelectivePredictor { model, classifier, rows: classifier.unit_rows(), novel: BTreeMap::new(), calls: 0 }
    }

    /// Text-encoder forward passes made for novel classes so far.
    pub fn text_calls(&self) -> u64 {
        self.calls
    }

    /// Embeds any not-yet-cached novel classes among `classes` in one pass.
    pub fn prepare(&mut self, classes: &[usize]) -> Result<()> {
        let mut missing = Vec::new();
        for &c in classes {
            if self.classifier.base.binary_search(&c).is_err() && !self.novel.contains_key(&c) && !missing.contains(&c) {
                if c >= self.model.config.vocab {
                    bail!(Argument, "class {c} is neither a base class nor in the vocabulary");
                }
                missing.push(c);
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        missing.sort_unstable();
        let emb = self.model.encode_texts(&missing)?;
        self.calls += missing.len() as u64;
        for (c, e) in missing.into_iter().zip(emb) {
            self.novel.insert(c, e);
        }
        Ok(())
    }

    /// `tau * cos` score of an image embedding against one candidate.
    pub fn score(&self, image_embedding: &[f64], class: usize) -> Result<f64> {
        let tau = self.model.tau();
        if let Ok(i) = self.classifier.base.binary_search(&class) {
            return Ok(tau * dot(image_embedding, &self.rows[i]));
        }
        match self.novel.get(&class) {
            Some(t) => Ok(tau * dot(image_embedding, t)),
            None => bail!(State, "novel class {class} not prepared"),
        }
    }

    pub fn predict_embedding(&mut self, image_embedding: &[f64], candidates: &[usize]) -> Result<usize> {
        if candidates.is_empty() {
            bail!(Argument, "empty candidate set");
        }
        self.prepare(candidates)?;
        let mut ids = candidates.to_vec();
        ids.sort_unstable();
        let scores = ids.iter().map(|&c| self.score(image_embedding, c)).collect::<Result<Vec<_>>>()?;
        Ok(ids[argmax(&scores)])
    }

    pub fn predict(&mut self, x: &[f64], candidates: &[usize]) -> Result<usize> {
        let e = self.model.encode_image(x)?;
        self.predict_embedding(&e, candidates)
    }
}

pub fn selective_predict(x: &[f64], candidates: &[usize], model: &DualEncoder, classifier: &Classifier) -> Result<usize> {
    SelectivePredictor::new(model, classifier).predict(x, candidates)
}

fn predict_all(p: &mut SelectivePredictor, model: &DualEncoder, samples: &[Sample], candidates: &[usize]) -> Result<f64> {
    let imgs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let emb = model.encode_images(&imgs)?;
    let mut preds = Vec::with_capacity(emb.len());
    for e in &emb {
        preds.push(p.predict_embedding(e, candidates)?);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    Ok(accuracy(&preds, &labels))
}

/// Base-to-novel scores base samples against B and novel samples against N;
/// all-to-all scores base samples against B only.
pub fn evaluate(protocol: Protocol, model: &DualEncoder, classifier: &Classifier, task: &FewShotTask) -> Result<Metrics> {
    if task.eval_base.is_empty() {
        bail!(State, "task has no held-out base samples");
    }
    if classifier.base != task.base {
        bail!(Argument, "classifier rows do not match the task's base classes");
    }
    let before = model.text_encoder_calls();
    let mut p = SelectivePredictor::new(model, classifier);
    let base_acc = predict_all(&mut p, model, &task.eval_base, &task.base)?;
    let (novel_acc, hm) = match protocol {
        Protocol::AllToAll => (None, None),
        Protocol::BaseToNovel => {
            if task.novel.is_empty() || task.eval_novel.is_empty() {
                bail!(State, "base-to-novel evaluation needs held-out novel samples");
            }
            p.prepare(&task.novel)?;
            let n = predict_all(&mut p, model, &task.eval_novel, &task.novel)?;
            let hm = if base_acc + n > 0.0 { harmonic_mean(base_acc, n)? } else { 0.0 };
            (Some(n), Some(hm))
        }
    };
    let calls = model.text_encoder_calls() - before;
    Ok(Metrics { protocol, base_acc, novel_acc, hm, text_encoder_calls: calls })
}
