//! Episodic meta-training, the open/closed decision rule, metrics and the
//! meta-test protocol.

mod decide;
mod protocol;
pub mod report;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    grad_check, AutodiffError, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor,
};
use crate::data::{DataError, Dataset};
use crate::episodes::{draw_partition, sample_episode, Episode, EpisodeError, OpenSampling};
use crate::loss::{self, Lambdas, LossBreakdown, LossError, LossNodes, ProbMode};
use crate::network::{self, init_params, Arch, NetworkError, ParamNodes, Params};
use crate::rng::{stream, Stream};
use crate::scalar::{Scalar, ScalarWidth};

pub use decide::{
    decide, evaluate, score, threshold_sweep, ClassRate, Decision, DecisionRule, MetricsReport,
    Scores,
};
pub use protocol::{AggregateReport, EvalConfig, EvaluationRecord, MetaTest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub n_closed: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub n_open: usize,
    pub lambdas: Lambdas,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub tau: f64,
    pub mode: ProbMode,
    pub open_sampling: OpenSampling,
    pub seed: u64,
    pub scalar: ScalarWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            n_closed: 4,
            n_support: 10,
            n_query: 10,
            n_open: 10,
            lambdas: Lambdas::default(),
            lr0: 0.01,
            lr_halving_period: 1000,
            tau: 0.1,
            mode: ProbMode::Features,
            open_sampling: OpenSampling::Pooled,
            seed: 0,
            scalar: ScalarWidth::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let fail = |m: String| Err(MetaError::InvalidConfig(m));
        for (name, v) in [
            ("n_closed", self.n_closed),
            ("n_support", self.n_support),
            ("n_query", self.n_query),
            ("n_open", self.n_open),
            ("lr_halving_period", self.lr_halving_period),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let l = self.lambdas;
        for (name, v) in [
            ("lambda1", l.meta_ce),
            ("lambda2", l.entropy),
            ("lambda3", l.open),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be a finite value >= 0, got {}", self.lr0));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// `lr0 · 0.5^floor(idx / period)`.
pub fn lr(episode_idx: usize, cfg: &TrainConfig) -> f64 {
    let halvings = episode_idx / cfg.lr_halving_period.max(1);
    cfg.lr0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

#[derive(Debug)]
pub enum MetaError {
    InvalidConfig(String),
    Data(DataError),
    Episode(EpisodeError),
    Network(NetworkError),
    Loss(LossError),
    NonFinite {
        episode: Option<usize>,
        detail: String,
    },
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    UnknownPrediction {
        sample: usize,
        class: usize,
    },
}

impl fmt::Display for MetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Episode(e) => write!(f, "{e}"),
            Self::Network(e) => write!(f, "{e}"),
            Self::Loss(e) => write!(f, "{e}"),
            Self::NonFinite {
                episode: Some(i),
                detail,
            } => {
                write!(f, "non-finite value in episode {i}: {detail}")
            }
            Self::NonFinite {
                episode: None,
                detail,
            } => write!(f, "non-finite value: {detail}"),
            Self::LengthMismatch {
                what,
                expected,
                actual,
            } => {
                write!(f, "{what}: expected {expected} entries, got {actual}")
            }
            Self::UnknownPrediction { sample, class } => {
                write!(
                    f,
                    "sample {sample} predicts class {class}, which is not a known class"
                )
            }
        }
    }
}

impl std::error::Error for MetaError {}

impl MetaError {
    /// True when the failure is a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MetaError::NonFinite { .. })
    }

    fn at_episode(self, idx: usize) -> Self {
        match self {
            MetaError::NonFinite { detail, .. } => MetaError::NonFinite {
                episode: Some(idx),
                detail,
            },
            other => other,
        }
    }
}

fn non_finite(e: &AutodiffError) -> Option<MetaError> {
    match e {
        AutodiffError::NonFinite { .. } => Some(MetaError::NonFinite {
            episode: None,
            detail: e.to_string(),
        }),
        _ => None,
    }
}

impl From<AutodiffError> for MetaError {
    fn from(e: AutodiffError) -> Self {
        non_finite(&e).unwrap_or(MetaError::Network(NetworkError::Autodiff(e)))
    }
}

impl From<NetworkError> for MetaError {
    fn from(e: NetworkError) -> Self {
        match &e {
            NetworkError::Autodiff(a) => non_finite(a).unwrap_or(MetaError::Network(e)),
            _ => MetaError::Network(e),
        }
    }
}

impl From<LossError> for MetaError {
    fn from(e: LossError) -> Self {
        match &e {
            LossError::Autodiff(a) => non_finite(a).unwrap_or(MetaError::Loss(e)),
            _ => MetaError::Loss(e),
        }
    }
}

impl From<EpisodeError> for MetaError {
    fn from(e: EpisodeError) -> Self {
        MetaError::Episode(e)
    }
}

impl From<DataError> for MetaError {
    fn from(e: DataError) -> Self {
        MetaError::Data(e)
    }
}

fn check_arch(arch: &Arch, cfg: &TrainConfig) -> Result<(), MetaError> {
    if arch.n_closed != cfg.n_closed {
        return Err(MetaError::InvalidConfig(format!(
            "architecture expects {} known classes, training uses {}",
            arch.n_closed, cfg.n_closed
        )));
    }
    Ok(())
}

/// Prototypes from the support embeddings, then the weighted loss on the
/// query and open samples and one SGD step on every parameter. Returns the
/// updated parameters and the pre-update loss.
pub fn train_episode<T: Scalar>(
    params: &Params<T>,
    episode: &Episode<'_>,
    cfg: &TrainConfig,
    episode_idx: usize,
) -> Result<(Params<T>, LossBreakdown), MetaError> {
    run_episode(params, episode, cfg, episode_idx).map_err(|e| e.at_episode(episode_idx))
}

/// Labels of one episode batch laid out as `[support | query | open]`.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLayout<'a> {
    pub k: usize,
    pub support_labels: &'a [usize],
    pub query_labels: &'a [usize],
    pub n_open: usize,
}

impl<'a> EpisodeLayout<'a> {
    pub fn of(episode: &'a Episode<'_>) -> Self {
        EpisodeLayout {
            k: episode.k(),
            support_labels: &episode.support_labels,
            query_labels: &episode.query_labels,
            n_open: episode.open.len(),
        }
    }
}

/// Builds the weighted episode loss for the image batch `images`
/// (`[support | query | open]`).
pub fn episode_loss<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    arch: &Arch,
    images: NodeId,
    layout: EpisodeLayout<'_>,
    cfg: &TrainConfig,
) -> Result<LossNodes, MetaError> {
    let (ns, nq, no) = (
        layout.support_labels.len(),
        layout.query_labels.len(),
        layout.n_open,
    );
    let emb = network::embed(g, nodes, arch, images)?;
    let support = g.rows(emb, 0, ns)?;
    let protos = loss::prototypes(g, support, layout.support_labels, layout.k)?;
    let query = g.rows(emb, ns, nq)?;
    let pq = loss::class_probs(g, query, protos, cfg.mode, cfg.tau)?;
    let meta_ce = loss::loss_meta_ce(g, pq, layout.query_labels)?;
    let open_probs = if no > 0 {
        let open = g.rows(emb, ns + nq, no)?;
        Some(loss::class_probs(g, open, protos, cfg.mode, cfg.tau)?)
    } else {
        None
    };
    let entropy = loss::loss_entropy(g, open_probs)?;
    let tr = g.rows(emb, ns, nq + no)?;
    let feats = loss::disc_features(g, arch.disc_input, tr, protos, cfg.tau)?;
    let disc = network::discriminate(g, nodes, feats)?;
    let beta: Vec<bool> = (0..nq + no).map(|i| i >= nq).collect();
    let open_bce = loss::loss_open(g, disc.probs, &beta)?;
    Ok(loss::loss_total(
        g,
        meta_ce,
        entropy,
        open_bce,
        cfg.lambdas,
    )?)
}

/// Central-difference check of the episode loss gradient with respect to
/// every parameter tensor, on the fixed image batch `images`.
pub fn episode_grad_check<T: Scalar>(
    params: &Params<T>,
    images: &Tensor<T>,
    layout: EpisodeLayout<'_>,
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, MetaError> {
    let arch = params.arch();
    let report = grad_check(params.tensors(), opts, |g, ids| {
        let nodes = ParamNodes::from_ids(ids.to_vec());
        let x = g.constant(images.clone())?;
        episode_loss(g, &nodes, arch, x, layout, cfg)
            .map(|l| l.total)
            .map_err(|e| match e {
                MetaError::Network(NetworkError::Autodiff(a))
                | MetaError::Loss(LossError::Autodiff(a)) => a,
                other => AutodiffError::InvalidTensor(other.to_string()),
            })
    })?;
    Ok(report)
}

fn run_episode<T: Scalar>(
    params: &Params<T>,
    episode: &Episode<'_>,
    cfg: &TrainConfig,
    episode_idx: usize,
) -> Result<(Params<T>, LossBreakdown), MetaError> {
    let arch = params.arch();
    let mut g = Graph::new();
    let nodes = params.register(&mut g, true)?;
    let x = g.constant(episode.batch::<T>())?;
    let nodes_total = episode_loss(&mut g, &nodes, arch, x, EpisodeLayout::of(episode), cfg)?;
    let breakdown = nodes_total.breakdown(&g, cfg.lambdas);

    let mut grads = g.backward(nodes_total.total)?;
    let grads = nodes
        .ids()
        .iter()
        .map(|&id| grads.take(id).ok_or(AutodiffError::UnknownNode(id.index())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        return Err(MetaError::NonFinite {
            episode: None,
            detail: format!("gradient of {} is not finite", arch.layout()[bad].0),
        });
    }
    Ok((params.sgd_step(&grads, lr(episode_idx, cfg)), breakdown))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Params<T>,
    pub curve: Vec<EpisodeLog>,
}

/// `cfg.episodes` rounds of partition → episode → SGD step, starting from
/// parameters initialised with `cfg.seed`.
pub fn meta_train<T: Scalar>(
    train: &Dataset,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, MetaError> {
    meta_train_with(train, arch, cfg, |_| {})
}

/// [`meta_train`] with a per-episode callback.
pub fn meta_train_with<T: Scalar, F: FnMut(&EpisodeLog)>(
    train: &Dataset,
    arch: &Arch,
    cfg: &TrainConfig,
    mut on_episode: F,
) -> Result<TrainOutcome<T>, MetaError> {
    cfg.validate()?;
    check_arch(arch, cfg)?;
    if train.height() != arch.input_size || train.width() != arch.input_size {
        return Err(MetaError::InvalidConfig(format!(
            "images are {}x{}, architecture expects {}x{}",
            train.height(),
            train.width(),
            arch.input_size,
            arch.input_size
        )));
    }
    let mut params = init_params::<T>(arch, cfg.seed)?;
    let pool = train.present_classes();
    let mut rng = stream(cfg.seed, Stream::Episodes);
    let mut curve = Vec::with_capacity(cfg.episodes);
    for idx in 0..cfg.episodes {
        let partition = draw_partition(&pool, cfg.n_closed, &mut rng)?;
        let episode = sample_episode(
            train,
            &partition,
            cfg.n_support,
            cfg.n_query,
            cfg.n_open,
            cfg.open_sampling,
            &mut rng,
        )?;
        let (next, loss) = train_episode(&params, &episode, cfg, idx)?;
        params = next;
        let log = EpisodeLog {
            episode: idx,
            loss,
            lr: lr(idx, cfg),
        };
        on_episode(&log);
        curve.push(log);
    }
    Ok(TrainOutcome { params, curve })
}
