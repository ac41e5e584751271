use crate::scalar::Scalar;

use super::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per leaf.
    pub max_entries_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            max_entries_per_leaf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - central| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a non-differentiable point.
    pub excluded: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compare reverse-mode gradients against central differences.
///
/// `build` records a scalar-valued function of the given leaves on a fresh
/// graph and returns its output node. Entries whose `±eps` perturbation
/// changes the graph's [`Graph::kink_signature`] (a ReLU, max-pool, sort or
/// log-floor branch flips) are excluded and counted in `excluded`.
pub fn grad_check<T, F>(
    leaves: &[Tensor<T>],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut graph = Graph::new();
    let ids = leaves
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut graph, &ids)?;
    let base_sig = graph.kink_signature();
    let grads = graph.backward(out)?;

    let eval = |perturbed: &[Tensor<T>]| -> Result<(f64, Vec<u64>), AutodiffError> {
        let mut g = Graph::new();
        let ids = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut g, &ids)?;
        let value = g
            .value(out)
            .item()
            .ok_or_else(|| AutodiffError::NotScalar {
                shape: g.value(out).shape().to_vec(),
            })?;
        Ok((value.as_f64(), g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        tol: opts.tol,
    };
    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    for (li, id) in ids.iter().enumerate() {
        let n = leaves[li].len();
        let analytic = grads
            .get(*id)
            .map(|t| t.to_f64())
            .unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries_per_leaf {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for entry in entries {
            let orig = work[li].data()[entry];
            work[li].data_mut()[entry] = orig + T::of(opts.eps);
            let plus = eval(&work);
            work[li].data_mut()[entry] = orig - T::of(opts.eps);
            let minus = eval(&work);
            work[li].data_mut()[entry] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(AutodiffError::NonFinite { .. }), _)
                | (_, Err(AutodiffError::NonFinite { .. })) => {
                    return Err(AutodiffError::FiniteDifference { leaf: li, entry });
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            if plus.1 != base_sig || minus.1 != base_sig {
                report.excluded += 1;
                continue;
            }
            let fd = (plus.0 - minus.0) / (2.0 * opts.eps);
            if !fd.is_finite() {
                return Err(AutodiffError::FiniteDifference { leaf: li, entry });
            }
            let a = analytic[entry];
            let err = (a - fd).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
