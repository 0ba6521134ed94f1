use mmd_repr::autodiff::Tape;
use mmd_repr::kernels::{
    median_heuristic_bandwidth, mmd_biased, mmd_biased_node, multi_domain_mmd, DomainBatch,
    DomainLabels, Kernel,
};
use mmd_repr::rng::{stream, Rng};
use mmd_repr::Tensor;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, v).unwrap()
}

fn k(kernel: &Kernel, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Linear {} => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Gaussian { bandwidth } => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-d2 / (bandwidth * bandwidth)).exp()
        }
    }
}

/// `(value, magnitude)`: the three double sums written out with loops, and the
/// sum of their absolute values for a scale-aware tolerance.
fn mmd_oracle(kernel: &Kernel, x: &Tensor, y: &Tensor) -> (f64, f64) {
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let mut xx = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            xx += k(kernel, x.row(i), x.row(j));
        }
    }
    let mut yy = 0.0;
    for i in 0..y.rows() {
        for j in 0..y.rows() {
            yy += k(kernel, y.row(i), y.row(j));
        }
    }
    let mut xy = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            xy += k(kernel, x.row(i), y.row(j));
        }
    }
    let terms = [xx / (n * n), yy / (m * m), -2.0 * xy / (n * m)];
    (terms.iter().sum(), terms.iter().map(|t| t.abs()).sum())
}

/// `Σ_s ‖μ_s − μ‖²`, each term expanded into its three double sums.
fn multi_oracle(kernel: &Kernel, h: &Tensor, labels: &[usize], domains: usize) -> (f64, f64) {
    let n = h.rows() as f64;
    let mut all = 0.0;
    for i in 0..h.rows() {
        for j in 0..h.rows() {
            all += k(kernel, h.row(i), h.row(j));
        }
    }
    let (mut total, mut magnitude) = (0.0, 0.0);
    for s in 0..domains {
        let members: Vec<usize> = (0..h.rows()).filter(|&i| labels[i] == s).collect();
        let ns = members.len() as f64;
        let mut within = 0.0;
        let mut cross = 0.0;
        for &i in &members {
            for &j in &members {
                within += k(kernel, h.row(i), h.row(j));
            }
            for j in 0..h.rows() {
                cross += k(kernel, h.row(i), h.row(j));
            }
        }
        let terms = [within / (ns * ns), all / (n * n), -2.0 * cross / (ns * n)];
        total += terms.iter().sum::<f64>();
        magnitude += terms.iter().map(|t| t.abs()).sum::<f64>();
    }
    (total, magnitude)
}

fn random_kernel(rng: &mut Rng) -> Kernel {
    if rng.random_bool(0.5) {
        Kernel::Linear {}
    } else {
        Kernel::gaussian(rng.random_range(0.3..3.0)).unwrap()
    }
}

fn close(value: f64, oracle: (f64, f64)) -> bool {
    let (expected, magnitude) = oracle;
    (value - expected.max(0.0)).abs() <= 1e-12 * magnitude.max(1e-300)
}

#[test]
fn biased_mmd_matches_the_double_sum_oracle() {
    let mut rng = stream(11, "oracle");
    for case in 0..100 {
        let d = rng.random_range(1..=5);
        let x = normal_matrix(rng.random_range(1..=10), d, 1.5, &mut rng);
        let y = normal_matrix(rng.random_range(1..=10), d, 1.5, &mut rng);
        let kernel = random_kernel(&mut rng);
        let got = mmd_biased(&kernel, &x, &y).unwrap();
        let want = mmd_oracle(&kernel, &x, &y);
        assert!(
            close(got, want),
            "case {case}: {got} vs {want:?} ({kernel:?})"
        );
    }
}

#[test]
fn multi_domain_mmd_matches_the_double_sum_oracle() {
    let mut rng = stream(12, "oracle");
    for case in 0..100 {
        let d = rng.random_range(1..=5);
        let s = rng.random_range(1..=4);
        // every domain gets at least one row
        let mut labels: Vec<usize> = (0..s).collect();
        let extra = rng.random_range(0..=10 - s);
        labels.extend((0..extra).map(|_| rng.random_range(0..s)));
        let h = normal_matrix(labels.len(), d, 1.5, &mut rng);
        let kernel = random_kernel(&mut rng);
        let batch =
            DomainBatch::new(h.clone(), DomainLabels::new(labels.clone(), s).unwrap()).unwrap();
        let got = multi_domain_mmd(&kernel, &batch).unwrap();
        let want = multi_oracle(&kernel, &h, &labels, s);
        assert!(close(got, want), "case {case}: {got} vs {want:?}");
    }
}

#[test]
fn closed_form_values() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    assert!((mmd_biased(&Kernel::Linear {}, &x, &y).unwrap() - 2.0).abs() <= 1e-12);

    let g = Kernel::gaussian(1.0).unwrap();
    let a = Tensor::from_rows(&[vec![0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let expected = 2.0 - 2.0 * (-1.0f64).exp();
    assert!((mmd_biased(&g, &a, &b).unwrap() - expected).abs() <= 1e-12);

    let mut rng = stream(3, "closed");
    let z = normal_matrix(9, 4, 2.0, &mut rng);
    for kernel in [Kernel::Linear {}, g] {
        assert!(mmd_biased(&kernel, &z, &z).unwrap() <= 1e-12);
    }
}

#[test]
fn mmd_gradient_wrt_samples_matches_finite_differences() {
    let mut rng = stream(4, "grad");
    for kernel in [Kernel::Linear {}, Kernel::gaussian(1.3).unwrap()] {
        let x = normal_matrix(4, 3, 1.0, &mut rng);
        let y = normal_matrix(5, 3, 1.0, &mut rng).map(|v| v + 0.5);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone()).unwrap();
        let yn = tape.leaf(y.clone()).unwrap();
        let out = mmd_biased_node(&mut tape, &kernel, xn, yn).unwrap();
        let grads = tape.backward(out).unwrap();
        let gx = grads.get(xn).unwrap().clone();

        let f = |x: &Tensor| mmd_oracle(&kernel, x, &y).0;
        let h = 1e-5;
        let (mut diff, mut norm_a, mut norm_b) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = gx.data()[i];
            diff += (fd - an) * (fd - an);
            norm_a += an * an;
            norm_b += fd * fd;
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_b.sqrt());
        assert!(rel < 1e-5, "{kernel:?}: relative error {rel}");
    }
}

#[test]
fn mmd_shrinks_with_sample_size_under_the_null() {
    let mut means = Vec::new();
    for n in [10, 100, 1000] {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = stream(seed, "consistency");
            let x = normal_matrix(n, 2, 1.0, &mut rng);
            let y = normal_matrix(n, 2, 1.0, &mut rng);
            let kernel = Kernel::gaussian(median_heuristic_bandwidth(&x, &y).unwrap()).unwrap();
            total += mmd_biased(&kernel, &x, &y).unwrap();
        }
        means.push(total / 20.0);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-5.0f64..5.0, r * cols)
            .prop_map(move |v| Tensor::from_vec(r, cols, v).unwrap())
    })
}

fn kernel_strategy() -> impl Strategy<Value = Kernel> {
    prop_oneof![
        Just(Kernel::Linear {}),
        (0.2f64..4.0).prop_map(|s| Kernel::gaussian(s).unwrap()),
    ]
}

proptest! {
    #[test]
    fn mmd_is_exactly_symmetric_and_non_negative(
        d in 1usize..4,
        seed in any::<u64>(),
        kernel in kernel_strategy(),
    ) {
        let mut rng = stream(seed, "symmetry");
        let x = normal_matrix(rng.random_range(1..=8), d, 2.0, &mut rng);
        let y = normal_matrix(rng.random_range(1..=8), d, 2.0, &mut rng);
        let xy = mmd_biased(&kernel, &x, &y).unwrap();
        let yx = mmd_biased(&kernel, &y, &x).unwrap();
        prop_assert_eq!(xy.to_bits(), yx.to_bits());
        prop_assert!(xy >= 0.0);
    }

    #[test]
    fn multi_domain_mmd_is_non_negative(
        h in matrix(2..=12, 3),
        kernel in kernel_strategy(),
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "labels");
        let s = rng.random_range(1..=h.rows().min(4));
        let mut labels: Vec<usize> = (0..s).collect();
        labels.extend((s..h.rows()).map(|_| rng.random_range(0..s)));
        let batch = DomainBatch::new(h, DomainLabels::new(labels, s).unwrap()).unwrap();
        prop_assert!(multi_domain_mmd(&kernel, &batch).unwrap() >= 0.0);
    }

    #[test]
    fn two_equal_domains_give_half_the_pairwise_mmd_under_a_linear_kernel(
        a in matrix(1..=6, 3),
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "reduction");
        let b = normal_matrix(a.rows(), 3, 2.0, &mut rng);
        let pooled = a.vstack(&b).unwrap();
        let labels: Vec<usize> = (0..pooled.rows()).map(|i| usize::from(i >= a.rows())).collect();
        let batch = DomainBatch::new(pooled, DomainLabels::new(labels, 2).unwrap()).unwrap();
        let multi = multi_domain_mmd(&Kernel::Linear {}, &batch).unwrap();
        let pair = mmd_biased(&Kernel::Linear {}, &a, &b).unwrap();
        prop_assert!((multi - 0.5 * pair).abs() <= 1e-12 * pair.max(1.0), "{} vs {}", multi, pair);
    }
}
