use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MetaError, TrainConfig};
use crate::autodiff::{Graph, Tensor};
use crate::loss;
use crate::network::{self, Params};
use crate::scalar::Scalar;

/// How a test sample is judged known or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionRule {
    /// Accept iff the discriminator's `p_open < threshold`.
    #[default]
    Discriminator,
    /// Accept iff the class-probability entropy divided by `ln K` is below
    /// the threshold.
    Entropy,
}

impl std::str::FromStr for DecisionRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discriminator" => Ok(DecisionRule::Discriminator),
            "entropy" => Ok(DecisionRule::Entropy),
            other => Err(format!(
                "unknown decision rule `{other}` (expected discriminator or entropy)"
            )),
        }
    }
}

impl fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionRule::Discriminator => "discriminator",
            DecisionRule::Entropy => "entropy",
        })
    }
}

/// Threshold-independent outputs for a batch of test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub k: usize,
    /// `n × k` class probabilities, row-major.
    pub probs: Vec<f64>,
    /// Discriminator logit difference `open − known`.
    pub open_gap: Vec<f64>,
    pub p_open: Vec<f64>,
}

impl Scores {
    pub fn len(&self) -> usize {
        self.p_open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_open.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Predictive entropy of row `i` divided by `ln K`.
    pub fn normalized_entropy(&self, i: usize) -> f64 {
        if self.k < 2 {
            return 0.0;
        }
        let h: f64 = self
            .row(i)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h / (self.k as f64).ln()
    }

    fn concat(parts: Vec<Scores>, k: usize) -> Scores {
        let mut out = Scores {
            k,
            probs: Vec::new(),
            open_gap: Vec::new(),
            p_open: Vec::new(),
        };
        for p in parts {
            out.probs.extend(p.probs);
            out.open_gap.extend(p.open_gap);
            out.p_open.extend(p.p_open);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub accept_known: bool,
    /// Episode label (index into the known-class list) with the highest score.
    pub predicted_label: usize,
    pub p_open: f64,
    pub scores: Vec<f64>,
}

fn chunked<T: Scalar>(x: &Tensor<T>, chunk: usize) -> Vec<Tensor<T>> {
    let n = x.shape()[0];
    let per = x.len() / n;
    let chunk = chunk.max(1);
    (0..n)
        .step_by(chunk)
        .map(|s| {
            let len = chunk.min(n - s);
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(shape, x.data()[s * per..(s + len) * per].to_vec()).expect("chunk")
        })
        .collect()
}

/// Embeddings of an image batch, chunks evaluated in parallel and
/// concatenated in order.
pub(crate) fn embed_parallel<T: Scalar>(
    params: &Params<T>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>, MetaError> {
    let parts = chunked(images, chunk)
        .into_par_iter()
        .map(|c| network::embed_values(params, &c, c.shape()[0]))
        .collect::<Result<Vec<_>, _>>()?;
    let d = params.arch().embed_dim();
    let data: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![images.shape()[0], d], data)?)
}

/// Class probabilities and discriminator outputs of `test` embeddings
/// against prototypes built from `support` embeddings.
pub(crate) fn score_embeddings<T: Scalar>(
    params: &Params<T>,
    support: &Tensor<T>,
    support_labels: &[usize],
    test: &Tensor<T>,
    cfg: &TrainConfig,
    chunk: usize,
) -> Result<Scores, MetaError> {
    let k = cfg.n_closed;
    let parts = chunked(test, chunk)
        .into_par_iter()
        .map(|t| -> Result<Scores, MetaError> {
            let mut g = Graph::new();
            let nodes = params.register(&mut g, false)?;
            let s = g.constant(support.clone())?;
            let protos = loss::prototypes(&mut g, s, support_labels, k)?;
            let e = g.constant(t)?;
            let probs = loss::class_probs(&mut g, e, protos, cfg.mode, cfg.tau)?;
            let feats = loss::disc_features(&mut g, params.arch().disc_input, e, protos, cfg.tau)?;
            let disc = network::discriminate(&mut g, &nodes, feats)?;
            let logits = g.value(disc.logits).to_f64();
            let p = g.value(disc.probs).to_f64();
            Ok(Scores {
                k,
                probs: g.value(probs).to_f64(),
                open_gap: logits.chunks_exact(2).map(|l| l[1] - l[0]).collect(),
                p_open: p.chunks_exact(2).map(|r| r[1]).collect(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scores::concat(parts, k))
}

/// Embeds support and test images and scores the test set.
pub fn score<T: Scalar>(
    params: &Params<T>,
    support_images: &Tensor<T>,
    support_labels: &[usize],
    test_images: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<Scores, MetaError> {
    let s = embed_parallel(params, support_images, 64)?;
    let t = embed_parallel(params, test_images, 64)?;
    score_embeddings(params, &s, support_labels, &t, cfg, 64)
}

fn accepts(scores: &Scores, i: usize, threshold: f64, rule: DecisionRule) -> bool {
    match rule {
        DecisionRule::Discriminator => {
            // p_open < t  <=>  logit(p_open) < logit(t), without saturating p_open
            let cut = if threshold >= 1.0 {
                f64::INFINITY
            } else if threshold <= 0.0 {
                f64::NEG_INFINITY
            } else {
                (threshold / (1.0 - threshold)).ln()
            };
            scores.open_gap[i] < cut
        }
        DecisionRule::Entropy => threshold >= 1.0 || scores.normalized_entropy(i) < threshold,
    }
}

/// Applies `rule` at `threshold` to precomputed scores.
pub fn decide(scores: &Scores, threshold: f64, rule: DecisionRule) -> Vec<Decision> {
    (0..scores.len())
        .map(|i| {
            let row = scores.row(i);
            let predicted_label =
                (0..scores.k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            Decision {
                accept_known: accepts(scores, i, threshold, rule),
                predicted_label,
                p_open: scores.p_open[i],
                scores: row.to_vec(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRate {
    pub class: usize,
    pub samples: usize,
    pub accept_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall_macro: f64,
    pub closed_accuracy: f64,
    pub per_class: Vec<ClassRate>,
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts and derived rates. `known[j]` is the original class id
/// of episode label `j`; any truth outside `known` is an unknown sample.
pub fn evaluate(
    decisions: &[Decision],
    truths: &[usize],
    known: &[usize],
) -> Result<MetricsReport, MetaError> {
    if decisions.len() != truths.len() {
        return Err(MetaError::LengthMismatch {
            what: "truth labels",
            expected: decisions.len(),
            actual: truths.len(),
        });
    }
    let (mut tp, mut fn_, mut fp, mut tn, mut correct) = (0, 0, 0, 0, 0);
    let mut per = vec![(0usize, 0usize); known.len()];
    for (i, (d, &truth)) in decisions.iter().zip(truths).enumerate() {
        if d.predicted_label >= known.len() {
            return Err(MetaError::UnknownPrediction {
                sample: i,
                class: d.predicted_label,
            });
        }
        match known.iter().position(|&c| c == truth) {
            Some(j) => {
                per[j].0 += 1;
                if d.accept_known {
                    tp += 1;
                    per[j].1 += 1;
                } else {
                    fn_ += 1;
                }
                if d.predicted_label == j {
                    correct += 1;
                }
            }
            None if d.accept_known => fp += 1,
            None => tn += 1,
        }
    }
    let per_class: Vec<ClassRate> = known
        .iter()
        .zip(&per)
        .map(|(&class, &(samples, accepted))| ClassRate {
            class,
            samples,
            accept_rate: ratio(accepted, samples, 0.0),
        })
        .collect();
    let populated: Vec<f64> = per_class
        .iter()
        .filter(|c| c.samples > 0)
        .map(|c| c.accept_rate)
        .collect();
    let recall_macro = if populated.is_empty() {
        0.0
    } else {
        populated.iter().sum::<f64>() / populated.len() as f64
    };
    Ok(MetricsReport {
        tp,
        fn_,
        fp,
        tn,
        tpr: ratio(tp, tp + fn_, 0.0),
        fpr: ratio(fp, fp + tn, 0.0),
        precision: ratio(tp, tp + fp, 1.0),
        recall_macro,
        closed_accuracy: ratio(correct, tp + fn_, 0.0),
        per_class,
    })
}

/// Metrics at every threshold of a sorted, non-empty grid.
pub fn threshold_sweep(
    scores: &Scores,
    truths: &[usize],
    known: &[usize],
    grid: &[f64],
    rule: DecisionRule,
) -> Result<Vec<MetricsReport>, MetaError> {
    check_grid(grid)?;
    grid.iter()
        .map(|&t| evaluate(&decide(scores, t, rule), truths, known))
        .collect()
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<(), MetaError> {
    if grid.is_empty() {
        return Err(MetaError::InvalidConfig("threshold grid is empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetaError::InvalidConfig(
            "threshold grid must be finite and sorted ascending".into(),
        ));
    }
    Ok(())
}
