//! Read-only diagnostics of a trained model: a leave-one-out KNN probe of
//! pooled point-cloud tokens per LM layer, generative classification under
//! two prompt formats and a caption overlap score.

mod plot;
mod sweep;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use plot::{line_plot, Series};
pub use sweep::{
    ablation_grid, data_fraction_sweep, default_grid, evaluate_run, read_results, write_results, Arm, GridCell,
    ResultRow, RunOutcome, RunSpec, Sweep, SweepOptions, RESULT_HEADER,
};

use crate::error::{Error, Result};
use crate::lm::split_words;
use crate::pointenc::ShapeSample;
use crate::stack::{pooled_pc_tokens, Model, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// LM layers to probe, counted from 1. Empty means all layers.
    #[serde(default)]
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            ks: vec![1, 10],
        }
    }
}

impl ProbeConfig {
    pub fn resolved_layers(&self, lm_layers: usize) -> Result<Vec<usize>> {
        let layers: Vec<usize> = if self.layers.is_empty() {
            (1..=lm_layers).collect()
        } else {
            self.layers.clone()
        };
        for &l in &layers {
            if l == 0 || l > lm_layers {
                return Err(Error::LayerOutOfRange { layer: l, max: lm_layers });
            }
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Invalid(format!("K values must be >= 1, got {:?}", self.ks)));
        }
        Ok(layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnCell {
    pub layer: usize,
    pub k: usize,
    /// Percentage in `[0, 100]`.
    pub acc: f64,
}

/// Leave-one-out KNN predictions with Euclidean distance. Distance ties go
/// to the lower index and vote ties to the lower class id.
pub fn knn_predict(features: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::shape("knn", &[n], &[labels.len()]));
    }
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("K={k} needs 1 <= K < {n} items")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut preds = Vec::with_capacity(n);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist.push((d, j));
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, j) in &dist[..k] {
            votes[labels[j]] += 1;
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Leave-one-out KNN accuracy in percent.
pub fn knn_accuracy(features: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let preds = knn_predict(features, labels, k)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Pooled point-cloud token features per probed layer: `out[layer][sample]`.
pub fn pooled_features(model: &Model<f32>, samples: &[&ShapeSample], layers: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::with_capacity(samples.len()); layers.len()];
    for s in samples {
        let grouping = model.group(&s.cloud)?;
        for (li, v) in pooled_pc_tokens(model, &grouping, layers)?.into_iter().enumerate() {
            out[li].push(v);
        }
    }
    Ok(out)
}

pub fn knn_probe(model: &Model<f32>, samples: &[&ShapeSample], cfg: &ProbeConfig) -> Result<Vec<KnnCell>> {
    if samples.is_empty() {
        return Err(Error::Invalid("KNN probe needs a nonempty test split".into()));
    }
    let layers = cfg.resolved_layers(model.cfg.lm.layers)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let feats = pooled_features(model, samples, &layers)?;
    let mut cells = Vec::new();
    for (li, &layer) in layers.iter().enumerate() {
        for &k in &cfg.ks {
            cells.push(KnnCell {
                layer,
                k,
                acc: knn_accuracy(&feats[li], &labels, k)?,
            });
        }
    }
    Ok(cells)
}

/// Accuracies (percent) of decoded outputs: the closed-set parse takes the
/// first generated class-name token as the prediction; the open parse
/// accepts the true class name anywhere in the output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyScore {
    pub closed: f64,
    pub open: f64,
}

pub fn score_classification(outputs: &[Vec<usize>], labels: &[usize], class_tokens: &[usize]) -> Result<ClassifyScore> {
    if outputs.len() != labels.len() {
        return Err(Error::shape("classification", &[outputs.len()], &[labels.len()]));
    }
    if outputs.is_empty() {
        return Err(Error::Invalid("no outputs to score".into()));
    }
    let (mut closed, mut open) = (0, 0);
    for (out, &label) in outputs.iter().zip(labels) {
        let truth = class_tokens[label];
        if out.iter().find(|t| class_tokens.contains(t)) == Some(&truth) {
            closed += 1;
        }
        if out.contains(&truth) {
            open += 1;
        }
    }
    let n = outputs.len() as f64;
    Ok(ClassifyScore {
        closed: 100.0 * closed as f64 / n,
        open: 100.0 * open as f64 / n,
    })
}

/// Vocabulary ids of the dataset's class names, indexed by class id.
pub fn class_tokens(model: &Model<f32>, classes: &[String]) -> Result<Vec<usize>> {
    classes
        .iter()
        .map(|c| {
            model.vocab.id(c).ok_or_else(|| Error::Unknown {
                what: "class token",
                name: c.clone(),
            })
        })
        .collect()
}

pub fn classify_generative(
    model: &Model<f32>,
    samples: &[&ShapeSample],
    classes: &[String],
    mode: Task,
) -> Result<ClassifyScore> {
    let tokens = class_tokens(model, classes)?;
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        outputs.push(model.decode(&model.group(&s.cloud)?, mode)?);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    score_classification(&outputs, &labels, &tokens)
}

pub const STOPWORDS: [&str; 8] = ["a", "an", "the", "this", "is", "of", "in", "it"];

fn content_words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Multiset token F1 (percent) between a generation and a reference,
/// ignoring stopwords. Two empty texts score 100.
pub fn token_f1(generated: &str, reference: &str) -> f64 {
    let (g, r) = (content_words(generated), content_words(reference));
    if g.is_empty() && r.is_empty() {
        return 100.0;
    }
    if g.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0;
    for w in &g {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / g.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    100.0 * 2.0 * p * rc / (p + rc)
}

pub fn caption_score(model: &Model<f32>, samples: &[&ShapeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to caption".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let ids = model.decode(&model.group(&s.cloud)?, Task::Caption)?;
        total += token_f1(&model.vocab.detokenize(&ids), &s.caption);
    }
    Ok(total / samples.len() as f64)
}

/// Everything the probes measure on one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub knn: Vec<KnnCell>,
    pub mn_i: f64,
    pub mn_c: f64,
    pub obj_analog_i: f64,
    pub obj_analog_c: f64,
    pub caption_f1: f64,
}

impl EvalResult {
    pub fn knn_at(&self, layer: usize, k: usize) -> Option<f64> {
        self.knn.iter().find(|c| c.layer == layer && c.k == k).map(|c| c.acc)
    }
}

/// Which parts of [`evaluate`] to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalParts {
    pub knn: bool,
    pub classify: bool,
    pub caption: bool,
}

impl EvalParts {
    pub const ALL: EvalParts = EvalParts {
        knn: true,
        classify: true,
        caption: true,
    };
}

/// Probes a model on the given samples. Skipped parts are reported as NaN
/// (or an empty KNN table).
pub fn evaluate(
    model: &Model<f32>,
    samples: &[&ShapeSample],
    classes: &[String],
    cfg: &ProbeConfig,
    parts: EvalParts,
) -> Result<EvalResult> {
    let knn = if parts.knn { knn_probe(model, samples, cfg)? } else { Vec::new() };
    let (i, c) = if parts.classify {
        (
            classify_generative(model, samples, classes, Task::Instruct)?,
            classify_generative(model, samples, classes, Task::Complete)?,
        )
    } else {
        let nan = ClassifyScore {
            closed: f64::NAN,
            open: f64::NAN,
        };
        (nan, nan)
    };
    let caption_f1 = if parts.caption { caption_score(model, samples)? } else { f64::NAN };
    Ok(EvalResult {
        knn,
        mn_i: i.closed,
        mn_c: c.closed,
        obj_analog_i: i.open,
        obj_analog_c: c.open,
        caption_f1,
    })
}
