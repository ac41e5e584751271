use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    t(shape, &values)
}

#[test]
fn conv_with_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 5, 4, 3], &mut rng, -1.0, 1.0);
    let mut k = vec![0.0; 3 * 3 * 3 * 3];
    for c in 0..3 {
        // centre tap (1, 1), c_in == c_out
        k[((3 + 1) * 3 + c) * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone()).unwrap();
    let ki = g.constant(t(&[3, 3, 3, 3], &k)).unwrap();
    let bi = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.conv2d(xi, ki, bi).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn dense_identity_and_gap_mean() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).to_f64(), vec![1.0, 2.0]);

    let m = g.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = g.gap(m).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).to_f64(), vec![2.5]);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g
        .param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]))
        .unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64(), vec![1.0; 6]);
}

#[test]
fn backward_of_square_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64(), vec![6.0]);
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
    let mut g = Graph::new();
    let z = g.param(t(&[1, 2], &[0.0, 0.0])).unwrap();
    let p = g.softmax(z).unwrap();
    let lp = g.log(p).unwrap();
    let onehot = g.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
    let picked = g.mul(lp, onehot).unwrap();
    let s = g.sum(picked).unwrap();
    let loss = g.neg(s).unwrap();
    let grads = g.backward(loss).unwrap();
    let dz = grads.get(z).unwrap().to_f64();
    assert!((dz[0] + 0.5).abs() < 1e-15);
    assert!((dz[1] - 0.5).abs() < 1e-15);
}

#[test]
fn backward_twice_and_non_scalar_are_errors() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NotScalar { .. })
    ));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), AutodiffError::BackwardTwice);
    // a new forward re-arms backward
    let s2 = g.mean(x).unwrap();
    assert!(g.backward(s2).is_ok());
}

#[test]
fn shape_mismatch_reports_node_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
    let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    match g.add(a, b) {
        Err(AutodiffError::ShapeMismatch {
            node,
            expected,
            actual,
            ..
        }) => {
            assert_eq!(node, 2);
            assert_eq!(expected, vec![2]);
            assert_eq!(actual, vec![3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let x = g.constant(t(&[1, 3, 3, 1], &[0.0; 9])).unwrap();
    assert!(matches!(
        g.max_pool2(x),
        Err(AutodiffError::ShapeMismatch { .. })
    ));
}

#[test]
fn non_finite_values_are_reported_with_node() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
    assert_eq!(
        g.log(x).unwrap_err(),
        AutodiffError::NonFinite { node: 1, op: "log" }
    );
    // the floored log is finite
    let y = g.log_floor(x, 1e-12).unwrap();
    assert!((g.value(y).data()[1] - 1e-12f64.ln()).abs() < 1e-12);
    assert!(matches!(
        g.constant(t(&[1], &[f64::NAN])),
        Err(AutodiffError::InvalidTensor(_)) | Err(AutodiffError::NonFinite { .. })
    ));
}

#[test]
fn l2_normalize_unit_norm_and_zero_error() {
    let mut g = Graph::new();
    let x = g
        .constant(t(&[2, 3], &[3.0, 4.0, 0.0, 1.0, 1.0, 1.0]))
        .unwrap();
    let y = g.l2_normalize(x, 1).unwrap();
    for row in g.value(y).data().chunks(3) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    let cols = g.l2_normalize(x, 0).unwrap();
    let v = g.value(cols).data().to_vec();
    for c in 0..3 {
        let norm = (v[c] * v[c] + v[3 + c] * v[3 + c]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
    assert!(matches!(
        g.l2_normalize(z, 1),
        Err(AutodiffError::ZeroNorm { .. })
    ));
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2, 1], &[5.0, 5.0, 5.0, 5.0])).unwrap();
    let p = g.max_pool2(x).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64(), vec![0.0, 0.0, 1.0]);
}

#[test]
fn grad_check_is_exact_for_linear_graphs() {
    let x = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
    for eps in [1e-3, 1e-5, 1e-7] {
        let opts = GradCheckOptions {
            eps,
            tol: 1e-6,
            max_entries_per_leaf: None,
        };
        let report = grad_check(&[x.clone()], &opts, |g, ids| {
            let s = g.scale(ids[0], 3.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }
}

#[test]
fn grad_check_excludes_relu_kink() {
    let x = t(&[2], &[0.0, 1.0]);
    let report = grad_check(&[x], &GradCheckOptions::default(), |g, ids| {
        let r = g.relu(ids[0])?;
        g.sum(r)
    })
    .unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 1);
    assert!(report.passed());
}

#[test]
fn fan_out_accumulates_like_duplicated_leaves() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4], &mut rng, -1.0, 1.0);
    let w = random(&[4, 2], &mut rng, -1.0, 1.0);

    // shared: f(x) = sum(tanh-free mix) = sum(x·W) + sum(x ⊙ x)
    let mut g = Graph::new();
    let xi = g.param(x.clone()).unwrap();
    let wi = g.constant(w.clone()).unwrap();
    let a = g.matmul(xi, wi).unwrap();
    let sa = g.sum(a).unwrap();
    let b = g.mul(xi, xi).unwrap();
    let sb = g.sum(b).unwrap();
    let out = g.add(sa, sb).unwrap();
    let shared = g.backward(out).unwrap().get(xi).unwrap().to_f64();

    // duplicated: three independent copies, gradients summed by hand
    let mut g = Graph::new();
    let x1 = g.param(x.clone()).unwrap();
    let x2 = g.param(x.clone()).unwrap();
    let x3 = g.param(x.clone()).unwrap();
    let wi = g.constant(w).unwrap();
    let a = g.matmul(x1, wi).unwrap();
    let sa = g.sum(a).unwrap();
    let b = g.mul(x2, x3).unwrap();
    let sb = g.sum(b).unwrap();
    let out = g.add(sa, sb).unwrap();
    let grads = g.backward(out).unwrap();
    let parts: Vec<Vec<f64>> = [x1, x2, x3]
        .iter()
        .map(|id| grads.get(*id).unwrap().to_f64())
        .collect();
    for i in 0..shared.len() {
        let summed = parts[0][i] + parts[1][i] + parts[2][i];
        assert!((shared[i] - summed).abs() < 1e-14);
    }
}

/// Scalar probe `sum(f(inputs) ⊙ R)` for a fixed random `R`, so the check
/// covers the whole Jacobian rather than only its column sums.
fn probe(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId, AutodiffError> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let n: usize = shape.iter().product::<usize>().max(1);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = g.constant(Tensor::new(shape, r)?)?;
    let m = g.mul(out, r)?;
    g.sum(m)
}

type Builder = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>;

fn primitive_cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Builder)> {
    vec![
        (
            "conv2d",
            vec![
                (vec![2, 4, 4, 2], -1.0, 1.0),
                (vec![3, 3, 2, 3], -1.0, 1.0),
                (vec![3], -1.0, 1.0),
            ],
            |g, i| g.conv2d(i[0], i[1], i[2]),
        ),
        ("max_pool2", vec![(vec![2, 4, 4, 3], -1.0, 1.0)], |g, i| {
            g.max_pool2(i[0])
        }),
        ("relu", vec![(vec![3, 5], -1.0, 1.0)], |g, i| g.relu(i[0])),
        (
            "dense",
            vec![
                (vec![3, 4], -1.0, 1.0),
                (vec![4, 2], -1.0, 1.0),
                (vec![2], -1.0, 1.0),
            ],
            |g, i| g.dense(i[0], i[1], i[2]),
        ),
        (
            "matmul",
            vec![(vec![3, 4], -1.0, 1.0), (vec![4, 5], -1.0, 1.0)],
            |g, i| g.matmul(i[0], i[1]),
        ),
        ("gap", vec![(vec![2, 3, 3, 4], -1.0, 1.0)], |g, i| {
            g.gap(i[0])
        }),
        ("softmax", vec![(vec![3, 4], -3.0, 3.0)], |g, i| {
            g.softmax(i[0])
        }),
        ("log", vec![(vec![6], 0.2, 3.0)], |g, i| {
            g.log_floor(i[0], 1e-12)
        }),
        (
            "add",
            vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            |g, i| g.add(i[0], i[1]),
        ),
        (
            "sub",
            vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            |g, i| g.sub(i[0], i[1]),
        ),
        (
            "mul",
            vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            |g, i| g.mul(i[0], i[1]),
        ),
        ("neg", vec![(vec![5], -1.0, 1.0)], |g, i| g.neg(i[0])),
        ("scale", vec![(vec![5], -1.0, 1.0)], |g, i| {
            g.scale(i[0], -2.5)
        }),
        ("sum", vec![(vec![2, 3], -1.0, 1.0)], |g, i| g.sum(i[0])),
        ("mean", vec![(vec![2, 3], -1.0, 1.0)], |g, i| g.mean(i[0])),
        ("l2_normalize_rows", vec![(vec![3, 4], 0.1, 1.0)], |g, i| {
            g.l2_normalize(i[0], 1)
        }),
        (
            "l2_normalize_cols",
            vec![(vec![3, 4], -1.0, 1.0)],
            |g, i| g.l2_normalize(i[0], 0),
        ),
        (
            "pairwise_sq_dist",
            vec![(vec![4, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)],
            |g, i| g.pairwise_sq_dist(i[0], i[1]),
        ),
        ("rows", vec![(vec![5, 2], -1.0, 1.0)], |g, i| {
            g.rows(i[0], 1, 3)
        }),
        ("sort_rows", vec![(vec![3, 4], -1.0, 1.0)], |g, i| {
            g.sort_rows(i[0])
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences_over_100_seeds() {
    let opts = GradCheckOptions::default();
    for (name, shapes, build) in primitive_cases() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|(s, lo, hi)| random(s, &mut rng, *lo, *hi))
                .collect();
            let report = grad_check(&leaves, &opts, |g, ids| {
                let out = build(g, ids)?;
                probe(g, out, seed)
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
        }
        assert!(checked > 0, "{name}: nothing checked");
        assert!(worst <= 1e-6, "{name}: max relative error {worst:e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3, 4], values).unwrap()).unwrap();
        let p = g.softmax(z).unwrap();
        for row in g.value(p).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_norm(values in prop::collection::vec(-10.0f64..10.0, 8)) {
        prop_assume!(values.chunks(4).all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], values).unwrap()).unwrap();
        let y = g.l2_normalize(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
