//! Prototypes, the distance-softmax class probabilities, and the three
//! entropy-awareness loss terms.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::network::DiscInput;
use crate::scalar::Scalar;

/// Floor applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// How distances become class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbMode {
    /// Normalise embedding and prototypes, then softmax(−‖v̂ − â‖² / tau).
    #[default]
    Features,
    /// softmax(L2(−‖v − a‖²) / tau), normalising the K-vector of distances.
    Logits,
}

impl std::str::FromStr for ProbMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "features" => Ok(ProbMode::Features),
            "logits" => Ok(ProbMode::Logits),
            other => Err(format!(
                "unknown probability mode `{other}` (expected features or logits)"
            )),
        }
    }
}

impl fmt::Display for ProbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbMode::Features => "features",
            ProbMode::Logits => "logits",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub meta_ce: f64,
    pub entropy: f64,
    pub open: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            meta_ce: 0.5,
            entropy: 0.25,
            open: 0.25,
        }
    }
}

impl Lambdas {
    pub fn new(meta_ce: f64, entropy: f64, open: f64) -> Self {
        Lambdas {
            meta_ce,
            entropy,
            open,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.meta_ce == 0.0 && self.entropy == 0.0 && self.open == 0.0
    }
}

#[derive(Debug)]
pub enum LossError {
    MissingClass {
        class: usize,
    },
    LabelOutOfRange {
        label: usize,
        k: usize,
    },
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    InvalidTau(f64),
    Autodiff(AutodiffError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingClass { class } => write!(f, "no support embedding for class {class}"),
            Self::LabelOutOfRange { label, k } => {
                write!(f, "label {label} out of range for {k} classes")
            }
            Self::LengthMismatch {
                what,
                expected,
                actual,
            } => {
                write!(f, "{what}: expected {expected} entries, got {actual}")
            }
            Self::InvalidTau(t) => write!(f, "temperature must be positive and finite, got {t}"),
            Self::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<AutodiffError> for LossError {
    fn from(e: AutodiffError) -> Self {
        LossError::Autodiff(e)
    }
}

/// Class-mean of `support` (`[n, d]`) rows by label, as `[k, d]`.
pub fn prototypes<T: Scalar>(
    g: &mut Graph<T>,
    support: NodeId,
    labels: &[usize],
    k: usize,
) -> Result<NodeId, LossError> {
    let n = g.value(support).shape()[0];
    if labels.len() != n {
        return Err(LossError::LengthMismatch {
            what: "support labels",
            expected: n,
            actual: labels.len(),
        });
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(LossError::LabelOutOfRange { label: l, k });
        }
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(LossError::MissingClass { class });
    }
    let mut avg = vec![T::zero(); k * n];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * n + i] = T::one() / T::of(counts[l] as f64);
    }
    let avg = g.constant(Tensor::new(vec![k, n], avg)?)?;
    Ok(g.matmul(avg, support)?)
}

/// Squared distances `[n, k]` between rows of `emb` and `protos`, in the
/// space `mode` compares them in.
pub fn distances<T: Scalar>(
    g: &mut Graph<T>,
    emb: NodeId,
    protos: NodeId,
    mode: ProbMode,
) -> Result<NodeId, LossError> {
    Ok(match mode {
        ProbMode::Features => {
            let e = g.l2_normalize(emb, 1)?;
            let p = g.l2_normalize(protos, 1)?;
            g.pairwise_sq_dist(e, p)?
        }
        ProbMode::Logits => g.pairwise_sq_dist(emb, protos)?,
    })
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidTau(tau))
    }
}

/// `[n, k]` class probabilities from squared distances.
pub fn probs_from_distances<T: Scalar>(
    g: &mut Graph<T>,
    dist: NodeId,
    mode: ProbMode,
    tau: f64,
) -> Result<NodeId, LossError> {
    check_tau(tau)?;
    let mut z = g.scale(dist, -1.0)?;
    if mode == ProbMode::Logits {
        z = g.l2_normalize(z, 1)?;
    }
    let z = g.scale(z, 1.0 / tau)?;
    Ok(g.softmax(z)?)
}

pub fn class_probs<T: Scalar>(
    g: &mut Graph<T>,
    emb: NodeId,
    protos: NodeId,
    mode: ProbMode,
    tau: f64,
) -> Result<NodeId, LossError> {
    check_tau(tau)?;
    let d = distances(g, emb, protos, mode)?;
    probs_from_distances(g, d, mode, tau)
}

/// Discriminator input for `emb`: the embedding itself, or the ascending
/// squared distances to the normalised prototypes divided by `tau`.
pub fn disc_features<T: Scalar>(
    g: &mut Graph<T>,
    input: DiscInput,
    emb: NodeId,
    protos: NodeId,
    tau: f64,
) -> Result<NodeId, LossError> {
    check_tau(tau)?;
    Ok(match input {
        DiscInput::Embedding => emb,
        DiscInput::Distances => {
            let d = distances(g, emb, protos, ProbMode::Features)?;
            let d = g.sort_rows(d)?;
            g.scale(d, 1.0 / tau)?
        }
    })
}

fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>, LossError> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(LossError::LabelOutOfRange { label: l, k });
        }
        data[i * k + l] = T::one();
    }
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Result<NodeId, LossError> {
    Ok(g.constant(Tensor::scalar(T::zero()))?)
}

/// Mean over rows of `−log p[label]`.
pub fn loss_meta_ce<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    labels: &[usize],
) -> Result<NodeId, LossError> {
    let shape = g.value(probs).shape().to_vec();
    if labels.len() != shape[0] {
        return Err(LossError::LengthMismatch {
            what: "query labels",
            expected: shape[0],
            actual: labels.len(),
        });
    }
    let target = g.constant(one_hot(labels, shape[1])?)?;
    let lp = g.log_floor(probs, PROB_FLOOR)?;
    let picked = g.mul(lp, target)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / labels.len() as f64)?)
}

/// Mean over rows of `Σ p log p`; zero for an empty batch.
pub fn loss_entropy<T: Scalar>(
    g: &mut Graph<T>,
    probs: Option<NodeId>,
) -> Result<NodeId, LossError> {
    let Some(probs) = probs else {
        return zero(g);
    };
    let n = g.value(probs).shape()[0];
    let lp = g.log_floor(probs, PROB_FLOOR)?;
    let plp = g.mul(probs, lp)?;
    let total = g.sum(plp)?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Mean binary cross-entropy of the `[n, 2]` discriminator softmax
/// (`[known, open]`) against `beta` (true = open).
pub fn loss_open<T: Scalar>(
    g: &mut Graph<T>,
    disc_probs: NodeId,
    beta: &[bool],
) -> Result<NodeId, LossError> {
    let labels: Vec<usize> = beta.iter().map(|&b| b as usize).collect();
    let n = g.value(disc_probs).shape()[0];
    if labels.len() != n {
        return Err(LossError::LengthMismatch {
            what: "open flags",
            expected: n,
            actual: labels.len(),
        });
    }
    loss_meta_ce(g, disc_probs, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub meta_ce: f64,
    pub entropy_dist: f64,
    pub open_bce: f64,
    pub total: f64,
    pub weights: Lambdas,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub meta_ce: NodeId,
    pub entropy_dist: NodeId,
    pub open_bce: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, weights: Lambdas) -> LossBreakdown {
        let v = |id: NodeId| g.value(id).data()[0].as_f64();
        LossBreakdown {
            meta_ce: v(self.meta_ce),
            entropy_dist: v(self.entropy_dist),
            open_bce: v(self.open_bce),
            total: v(self.total),
            weights,
        }
    }
}

/// `λ1·meta_ce + λ2·entropy + λ3·open`.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    meta_ce: NodeId,
    entropy_dist: NodeId,
    open_bce: NodeId,
    w: Lambdas,
) -> Result<LossNodes, LossError> {
    let a = g.scale(meta_ce, w.meta_ce)?;
    let b = g.scale(entropy_dist, w.entropy)?;
    let c = g.scale(open_bce, w.open)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossNodes {
        meta_ce,
        entropy_dist,
        open_bce,
        total,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::network::{embed, init_params, Arch, ParamNodes};

    fn c(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> NodeId {
        g.constant(Tensor::from_f64(shape, v).unwrap()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn item(g: &Graph<f64>, id: NodeId) -> f64 {
        g.value(id).data()[0]
    }

    #[test]
    fn prototype_examples() {
        let mut g = Graph::new();
        let s = c(&mut g, &[3, 2], &[1.0, 0.0, 0.0, 1.0, 3.0, -2.0]);
        let p = prototypes(&mut g, s, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(p).to_f64(), vec![0.5, 0.5, 3.0, -2.0]);
        assert!(matches!(
            prototypes(&mut g, s, &[0, 0, 0], 2),
            Err(LossError::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn prototypes_match_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d, k) = (37, 6, 5);
        let x = random(&mut rng, n * d);
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < k { i } else { rng.random_range(0..k) })
            .collect();
        let mut g = Graph::new();
        let s = c(&mut g, &[n, d], &x);
        let p = prototypes(&mut g, s, &labels, k).unwrap();
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
            for col in 0..d {
                let mut acc = 0.0;
                for &i in &members {
                    acc += x[i * d + col];
                }
                let want = acc / members.len() as f64;
                assert!((g.value(p).row(j)[col] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_mode_example() {
        let mut g = Graph::new();
        let v = c(&mut g, &[1, 2], &[1.0, 0.0]);
        let a = c(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let p = class_probs(&mut g, v, a, ProbMode::Features, 0.1).unwrap();
        let p = g.value(p).to_f64();
        assert!((p[0] - 1.0).abs() < 1e-8);
        assert!((p[1] - 2.061153622e-9).abs() < 1e-15);
    }

    #[test]
    fn equidistant_prototypes_give_uniform_in_both_modes() {
        for mode in [ProbMode::Features, ProbMode::Logits] {
            let mut g = Graph::new();
            let v = c(&mut g, &[1, 2], &[1.0, 1.0]);
            let a = c(&mut g, &[2, 2], &[2.0, 1.0, 1.0, 2.0]);
            let p = class_probs(&mut g, v, a, mode, 0.1).unwrap();
            for x in g.value(p).to_f64() {
                assert!((x - 0.5).abs() < 1e-12, "{mode}");
            }
        }
    }

    #[test]
    fn logits_mode_is_close_to_uniform_at_unit_tau() {
        let mut g = Graph::new();
        let v = c(&mut g, &[1, 2], &[1.0, 0.0]);
        let a = c(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let lit = class_probs(&mut g, v, a, ProbMode::Logits, 1.0).unwrap();
        // z = (0, -2) normalised to (0, -1): softmax = (e/(1+e), 1/(1+e))
        let e = std::f64::consts::E;
        let lit = g.value(lit).to_f64();
        assert!((lit[0] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn meta_ce_examples() {
        let mut g = Graph::new();
        let onehot = c(&mut g, &[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let l = loss_meta_ce(&mut g, onehot, &[1, 0]).unwrap();
        assert_eq!(item(&g, l), 0.0);
        let uniform = c(&mut g, &[3, 4], &[0.25; 12]);
        let l = loss_meta_ce(&mut g, uniform, &[0, 3, 2]).unwrap();
        assert!((item(&g, l) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn meta_ce_matches_per_sample_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k) = (23, 5);
        let mut g = Graph::new();
        let z = c(&mut g, &[n, k], &random(&mut rng, n * k));
        let p = g.softmax(z).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let l = loss_meta_ce(&mut g, p, &labels).unwrap();
        let rows = g.value(p).clone();
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            acc -= rows.row(i)[y].ln();
        }
        assert!((item(&g, l) - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let mut g = Graph::new();
        let u = c(&mut g, &[1, 4], &[0.25; 4]);
        let l = loss_entropy(&mut g, Some(u)).unwrap();
        assert!((item(&g, l) + 1.386294).abs() < 1e-6);
        let oh = c(&mut g, &[1, 4], &[0.0, 0.0, 1.0, 0.0]);
        let l = loss_entropy(&mut g, Some(oh)).unwrap();
        assert_eq!(item(&g, l), 0.0);
        let l = loss_entropy(&mut g, None).unwrap();
        assert_eq!(item(&g, l), 0.0);
    }

    #[test]
    fn entropy_is_stationary_at_uniform() {
        let mut g = Graph::<f64>::new();
        let z = g
            .param(Tensor::from_f64(&[2, 3], &[0.7; 6]).unwrap())
            .unwrap();
        let p = g.softmax(z).unwrap();
        let l = loss_entropy(&mut g, Some(p)).unwrap();
        let grads = g.backward(l).unwrap();
        for v in grads.get(z).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn open_bce_examples() {
        let mut g = Graph::new();
        let half = c(&mut g, &[1, 2], &[0.5, 0.5]);
        let l = loss_open(&mut g, half, &[true]).unwrap();
        assert!((item(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = c(&mut g, &[1, 2], &[0.0, 1.0]);
        let l = loss_open(&mut g, sure, &[true]).unwrap();
        assert_eq!(item(&g, l), 0.0);
        let two = c(&mut g, &[2, 2], &[0.1, 0.9, 0.8, 0.2]);
        let l = loss_open(&mut g, two, &[true, false]).unwrap();
        assert!((item(&g, l) - 0.164252).abs() < 1e-6);
        let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((item(&g, l) - want).abs() < 1e-12);
    }

    fn total_of(parts: (f64, f64, f64), w: Lambdas) -> LossBreakdown {
        let mut g = Graph::new();
        let a = c(&mut g, &[], &[parts.0]);
        let b = c(&mut g, &[], &[parts.1]);
        let d = c(&mut g, &[], &[parts.2]);
        loss_total(&mut g, a, b, d, w).unwrap().breakdown(&g, w)
    }

    #[test]
    fn total_examples() {
        let parts = (1.0, -1.386294, 0.693147);
        let b = total_of(parts, Lambdas::default());
        assert!((b.total - 0.326713).abs() < 1e-6);
        assert_eq!(b.total, 0.5 * 1.0 + 0.25 * -1.386294 + 0.25 * 0.693147);
        assert_eq!(total_of(parts, Lambdas::new(1.0, 0.0, 0.0)).total, 1.0);
        assert_eq!(total_of(parts, Lambdas::new(0.0, 0.0, 0.0)).total, 0.0);
    }

    #[test]
    fn sorted_distance_features_are_ascending() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let e = c(&mut g, &[5, 3], &random(&mut rng, 15));
        let p = c(&mut g, &[4, 3], &random(&mut rng, 12));
        let f = disc_features(&mut g, DiscInput::Distances, e, p, 0.25).unwrap();
        let v = g.value(f).clone();
        assert_eq!(v.shape(), &[5, 4]);
        for i in 0..5 {
            assert!(v.row(i).windows(2).all(|w| w[0] <= w[1]));
            assert!(v.row(i).iter().all(|&d| (0.0..=16.0 + 1e-12).contains(&d)));
        }
    }

    #[test]
    fn losses_pass_grad_check_through_embedding() {
        let arch = Arch {
            input_size: 8,
            conv_channels: vec![3, 4],
            kernel_size: 3,
            disc_input: DiscInput::Distances,
            n_closed: 2,
        };
        let params = init_params::<f64>(&arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let imgs: Vec<f64> = (0..7 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut leaves = params.tensors().to_vec();
        leaves.push(Tensor::new(vec![7, 8, 8, 1], imgs).unwrap());
        for mode in [ProbMode::Features, ProbMode::Logits] {
            let report = grad_check(&leaves, &GradCheckOptions::default(), |g, ids| {
                let n = ids.len() - 1;
                let nodes = ParamNodes::from_ids(ids[..n].to_vec());
                let e = embed(g, &nodes, &arch, ids[n]).map_err(|e| match e {
                    crate::network::NetworkError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                let s = g.rows(e, 0, 4)?;
                let q = g.rows(e, 4, 2)?;
                let o = g.rows(e, 6, 1)?;
                let protos = prototypes(g, s, &[0, 1, 0, 1], 2).unwrap();
                let pq = class_probs(g, q, protos, mode, 0.5).unwrap();
                let po = class_probs(g, o, protos, mode, 0.5).unwrap();
                let ce = loss_meta_ce(g, pq, &[1, 0]).unwrap();
                let ent = loss_entropy(g, Some(po)).unwrap();
                let all = g.rows(e, 4, 3)?;
                let f = disc_features(g, DiscInput::Distances, all, protos, 0.5).unwrap();
                let d = crate::network::discriminate(g, &nodes, f).unwrap();
                let bce = loss_open(g, d.probs, &[false, false, true]).unwrap();
                Ok(loss_total(g, ce, ent, bce, Lambdas::default())
                    .unwrap()
                    .total)
            })
            .unwrap();
            assert!(report.passed(), "{mode}: {report:?}");
            assert!(report.checked > 100);
        }
    }

    proptest! {
        #[test]
        fn probs_are_valid_and_pick_nearest(seed in any::<u64>(), tau in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let e = c(&mut g, &[6, 4], &random(&mut rng, 24));
            let p = c(&mut g, &[3, 4], &random(&mut rng, 12));
            let pr = class_probs(&mut g, e, p, ProbMode::Features, tau).unwrap();
            let d = distances(&mut g, e, p, ProbMode::Features).unwrap();
            let (pr, d) = (g.value(pr).clone(), g.value(d).clone());
            for i in 0..6 {
                let row = pr.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&x| x > 0.0));
                let amax = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                let amin = (0..3).min_by(|&a, &b| d.row(i)[a].total_cmp(&d.row(i)[b])).unwrap();
                prop_assert_eq!(amax, amin);
            }
        }

        #[test]
        fn entropy_within_bounds(seed in any::<u64>(), scale in 0.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let z: Vec<f64> = random(&mut rng, 20).into_iter().map(|x| x * scale).collect();
            let z = c(&mut g, &[4, 5], &z);
            let p = g.softmax(z).unwrap();
            let l = loss_entropy(&mut g, Some(p)).unwrap();
            let v = item(&g, l);
            prop_assert!(v <= 1e-12 && v >= -(5f64).ln() - 1e-12);
        }

        #[test]
        fn meta_ce_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let z = c(&mut g, &[4, 3], &random(&mut rng, 12));
            let p = g.softmax(z).unwrap();
            let l = loss_meta_ce(&mut g, p, &[0, 1, 2, 0]).unwrap();
            prop_assert!(item(&g, l) >= 0.0);
        }

        #[test]
        fn doubling_lambdas_doubles_total(a in -3.0f64..3.0, b in -3.0f64..0.0, d in 0.0f64..3.0,
                                         l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0) {
            let w = Lambdas::new(l1, l2, l3);
            let one = total_of((a, b, d), w);
            let two = total_of((a, b, d), Lambdas::new(2.0 * l1, 2.0 * l2, 2.0 * l3));
            prop_assert!((two.total - 2.0 * one.total).abs() < 1e-12);
            prop_assert_eq!((one.meta_ce, one.entropy_dist, one.open_bce), (two.meta_ce, two.entropy_dist, two.open_bce));
        }
    }
}
