use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remind_core::numerics::gradcheck::{check_gradients, GradCheck};
use remind_core::numerics::{softmax_rows, Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    out
}

fn arb_matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

#[test]
fn construction_checks_the_shape() {
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
    assert_eq!(t.at(1, 2), 5.0);
    assert!(t.clone().reshape(vec![4]).is_err());
    assert_eq!(t.clone().reshape(vec![3, 2]).unwrap().at(2, 1), 5.0);
    assert_eq!(Tensor::<f64>::eye(3).sum(), 3.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform_and_masked_entries_vanish() {
    let x = Tensor::<f64>::zeros(&[2, 4]);
    let p = softmax_rows(&x, None).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let mask = [true, false, true, false, false, false, false, true];
    let p = softmax_rows(&x, Some(&mask)).unwrap();
    assert_eq!(p.data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert!(softmax_rows(&x, Some(&[false; 8])).is_err());
    let big = Tensor::<f64>::from_f64(vec![1, 2], &[1000.0, 1000.0]).unwrap();
    assert_eq!(softmax_rows(&big, None).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn tape_gradient_of_a_quadratic_form_matches_the_closed_form() {
    // d/dx (x^T A x) = (A + A^T) x
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[4, 4], &mut rng);
    let x = random(&[4, 1], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let av = g.constant(a.clone());
    let ax = g.matmul(av, xv).unwrap();
    let prod = g.mul(ax, xv).unwrap();
    let loss = g.sum(prod);
    let grad = g.grad(loss, &[xv]).unwrap().remove(0);
    let sym = a
        .matmul(&x)
        .unwrap()
        .data()
        .iter()
        .zip(a.transpose().unwrap().matmul(&x).unwrap().data())
        .map(|(p, q)| p + q)
        .collect::<Vec<_>>();
    for (g, s) in grad.data().iter().zip(&sym) {
        assert!((g - s).abs() < 1e-12);
    }
}

#[test]
fn gradients_accumulate_over_reused_nodes() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap();
    let loss = g.sum(z);
    // loss = 2 x^2, gradient 4x
    let grad = g.grad(loss, &[x]).unwrap().remove(0);
    assert_eq!(grad.data(), &[4.0, -8.0, 2.0]);
}

#[test]
fn f32_and_f64_forward_passes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[5, 6], &mut rng);
    let b = random(&[6, 3], &mut rng);
    let run64 = {
        let mut g = Graph::<f64>::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let m = g.matmul(x, y).unwrap();
        let t = g.tanh(m);
        let s = g.softmax_rows(t, None).unwrap();
        g.value(s).clone()
    };
    let run32 = {
        let mut g = Graph::<f32>::new();
        let (x, y) = (g.constant(a.cast()), g.constant(b.cast()));
        let m = g.matmul(x, y).unwrap();
        let t = g.tanh(m);
        let s = g.softmax_rows(t, None).unwrap();
        g.value(s).cast::<f64>()
    };
    assert!(run64.max_abs_diff(&run32) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_the_triple_loop(a in arb_matrix(1..5, 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&[a.cols(), rng.random_range(1..5)], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_involution(a in arb_matrix(1..6, 1..6)) {
        let t = a.transpose().unwrap();
        prop_assert_eq!(t.shape(), &[a.cols(), a.rows()][..]);
        prop_assert_eq!(t.transpose().unwrap(), a);
    }

    #[test]
    fn softmax_rows_are_distributions(a in arb_matrix(1..5, 1..6), bits in any::<u64>()) {
        let mask: Vec<bool> = (0..a.len()).map(|i| i % a.cols() == 0 || (bits >> (i % 64)) & 1 == 1).collect();
        let p = softmax_rows(&a, Some(&mask)).unwrap();
        for r in 0..a.rows() {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !mask[r * a.cols() + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
        // Adding a per-row constant changes nothing.
        let shifted = Tensor::from_fn(a.rows(), a.cols(), |r, c| a.at(r, c) + r as f64 * 7.5);
        prop_assert!(softmax_rows(&shifted, Some(&mask)).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn slicing_undoes_concatenation(a in arb_matrix(1..4, 3..4), b in arb_matrix(1..4, 3..4)) {
        let joined = Tensor::concat_rows(&[&a, &b]).unwrap();
        prop_assert_eq!(joined.slice_rows(0, a.rows()).unwrap(), a.clone());
        prop_assert_eq!(joined.slice_rows(a.rows(), b.rows()).unwrap(), b);
    }

    #[test]
    fn random_compositions_pass_the_finite_difference_oracle(seed in any::<u64>(), n in 1usize..4, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[n, k], &mut rng), random(&[k, 3], &mut rng), random(&[3], &mut rng)];
        let report = check_gradients(&inputs, GradCheck::default(), &mut rng, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let a = g.silu(h);
            let b = g.rms_norm(a, 1e-6);
            let s = g.softmax_rows(b, None)?;
            let t = g.tanh(h);
            let p = g.mul(s, t)?;
            Ok(g.sum(p))
        })
        .unwrap();
        prop_assert!(report.passed(), "{:?}", report.failures);
    }
}
