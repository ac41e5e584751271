use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::decide::{check_grid, embed_parallel, score_embeddings};
use super::{decide, evaluate, DecisionRule, MetaError, MetricsReport, Scores, TrainConfig};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::episodes::{draw_partition, stack_images, Partition};
use crate::network::Params;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Independent known/unknown partitions the metrics are averaged over.
    pub n_evaluations: usize,
    pub threshold: f64,
    pub rule: DecisionRule,
    /// Support images per known class; `None` uses every training image of
    /// the known classes.
    pub support_per_class: Option<usize>,
    /// Images per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_evaluations: 4,
            threshold: 0.5,
            rule: DecisionRule::Discriminator,
            support_per_class: None,
            chunk: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if self.n_evaluations == 0 {
            return Err(MetaError::InvalidConfig(
                "n_evaluations must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(MetaError::InvalidConfig(format!(
                "threshold {} is outside [0, 1]",
                self.threshold
            )));
        }
        if self.support_per_class == Some(0) {
            return Err(MetaError::InvalidConfig(
                "support_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    partition: Partition,
    scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub index: usize,
    pub partition: Partition,
    pub metrics: MetricsReport,
}

/// Counts summed and rates averaged over the evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub threshold: f64,
    pub rule: DecisionRule,
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
    pub evaluations: Vec<EvaluationRecord>,
}

/// Scored meta-test evaluations: for each, a random known/unknown split of
/// the classes, prototypes from the known classes' training images, and
/// the whole test split as queries.
#[derive(Debug, Clone)]
pub struct MetaTest {
    evaluations: Vec<Prepared>,
    truths: Vec<usize>,
    test_embeddings: Vec<f64>,
    embed_dim: usize,
}

impl MetaTest {
    pub fn prepare<T: Scalar>(
        params: &Params<T>,
        train: &Dataset,
        test: &Dataset,
        cfg: &TrainConfig,
        eval: &EvalConfig,
    ) -> Result<MetaTest, MetaError> {
        eval.validate()?;
        let pool: Vec<usize> = test
            .present_classes()
            .into_iter()
            .filter(|&c| c < train.n_classes() && !train.indices_of(c).is_empty())
            .collect();
        let all_test: Vec<usize> = (0..test.len()).collect();
        let test_emb = embed_parallel(params, &stack_images::<T>(test, &all_test), eval.chunk)?;
        let all_train: Vec<usize> = (0..train.len()).collect();
        let train_emb = embed_parallel(params, &stack_images::<T>(train, &all_train), eval.chunk)?;
        let d = params.arch().embed_dim();

        let mut rng = stream(cfg.seed, Stream::Evaluation);
        let mut evaluations = Vec::with_capacity(eval.n_evaluations);
        for _ in 0..eval.n_evaluations {
            let partition = draw_partition(&pool, cfg.n_closed, &mut rng)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (j, &c) in partition.closed.iter().enumerate() {
                let idx = train.indices_of(c);
                let chosen: Vec<usize> = match eval.support_per_class {
                    Some(m) if m < idx.len() => {
                        let mut pick = index::sample(&mut rng, idx.len(), m).into_vec();
                        pick.sort_unstable();
                        pick.into_iter().map(|p| idx[p]).collect()
                    }
                    _ => idx,
                };
                for i in chosen {
                    rows.extend_from_slice(train_emb.row(i));
                    labels.push(j);
                }
            }
            let support = Tensor::new(vec![labels.len(), d], rows)?;
            let scores = score_embeddings(params, &support, &labels, &test_emb, cfg, eval.chunk)?;
            evaluations.push(Prepared { partition, scores });
        }
        Ok(MetaTest {
            evaluations,
            truths: test.labels().to_vec(),
            test_embeddings: test_emb.to_f64(),
            embed_dim: d,
        })
    }

    pub fn len(&self) -> usize {
        self.evaluations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evaluations.is_empty()
    }

    pub fn partition(&self, i: usize) -> &Partition {
        &self.evaluations[i].partition
    }

    pub fn scores(&self, i: usize) -> &Scores {
        &self.evaluations[i].scores
    }

    pub fn truths(&self) -> &[usize] {
        &self.truths
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn test_embedding(&self, i: usize) -> &[f64] {
        &self.test_embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn report(&self, threshold: f64, rule: DecisionRule) -> Result<AggregateReport, MetaError> {
        let mut records = Vec::with_capacity(self.evaluations.len());
        for (index, e) in self.evaluations.iter().enumerate() {
            let metrics = evaluate(
                &decide(&e.scores, threshold, rule),
                &self.truths,
                &e.partition.closed,
            )?;
            records.push(EvaluationRecord {
                index,
                partition: e.partition.clone(),
                metrics,
            });
        }
        let n = records.len() as f64;
        let mean =
            |f: fn(&MetricsReport) -> f64| records.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let sum =
            |f: fn(&MetricsReport) -> usize| records.iter().map(|r| f(&r.metrics)).sum::<usize>();
        Ok(AggregateReport {
            threshold,
            rule,
            tp: sum(|m| m.tp),
            fn_: sum(|m| m.fn_),
            fp: sum(|m| m.fp),
            tn: sum(|m| m.tn),
            tpr: mean(|m| m.tpr),
            fpr: mean(|m| m.fpr),
            precision: mean(|m| m.precision),
            recall_macro: mean(|m| m.recall_macro),
            closed_accuracy: mean(|m| m.closed_accuracy),
            evaluations: records,
        })
    }

    pub fn sweep(
        &self,
        grid: &[f64],
        rule: DecisionRule,
    ) -> Result<Vec<AggregateReport>, MetaError> {
        check_grid(grid)?;
        grid.iter().map(|&t| self.report(t, rule)).collect()
    }
}
