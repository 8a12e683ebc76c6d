use flix::data_io::{gen_synthetic, parse_libsvm, partition_contiguous, write_libsvm, RawDataset, SyntheticSpec};
use flix::flix::population_variance;
use flix::linalg;
use flix::solvers::{RunOptions, StepsizeMode};
use flix::{
    client_rng, k_sweep, run_dcgd, run_dgd, run_diana, AlphaVector, ClientObjective, CompressorSpec, FlixProblem,
    QuadraticObjective,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = RawDataset> {
    (1usize..12).prop_flat_map(|dim| {
        let row = proptest::collection::btree_map(0..dim, -1e6f64..1e6, 0..=dim)
            .prop_map(|m| m.into_iter().collect::<Vec<_>>());
        let labeled = (prop_oneof![Just(-1.0), Just(1.0)], row);
        proptest::collection::vec(labeled, 1..20).prop_map(move |rows| {
            let (labels, rows): (Vec<f64>, Vec<_>) = rows.into_iter().unzip();
            RawDataset { labels, rows, dim }
        })
    })
}

proptest! {
    #[test]
    fn partition_covers_rows_in_order(r in 1usize..5000, frac in 0.0f64..1.0) {
        let n = 1 + ((r - 1) as f64 * frac) as usize;
        let p = partition_contiguous(r, n).unwrap();
        prop_assert_eq!(p.ranges.len(), n);
        prop_assert_eq!(p.ranges[0].start, 0);
        prop_assert_eq!(p.ranges[n - 1].end, r);
        for (i, w) in p.ranges.windows(2).enumerate() {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert_eq!(w[0].end, (i + 1) * r / n);
        }
        let sizes = p.sizes();
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn libsvm_roundtrip(ds in dataset()) {
        let text = write_libsvm(&ds);
        let back = parse_libsvm(&text, Some(ds.dim)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn k_sweep_shape(d in 1usize..500, count in 2usize..12) {
        let ks = k_sweep(d, count);
        prop_assert_eq!(ks[0], 1);
        prop_assert_eq!(*ks.last().unwrap(), d);
        prop_assert!(ks.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ks.len() <= count);
    }

    #[test]
    fn rand_k_support(d in 1usize..60, kfrac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((d - 1) as f64 * kfrac) as usize;
        let spec = CompressorSpec::rand_k(k, d).unwrap();
        let v: Vec<f64> = (0..d).map(|i| i as f64 + 1.0).collect();
        let c = spec.compress(&v, &mut client_rng(seed, 0, 0)).unwrap();
        let kept: Vec<usize> = (0..d).filter(|&j| c[j] != 0.0).collect();
        prop_assert_eq!(kept.len(), k);
        for j in kept {
            prop_assert_eq!(c[j], (d as f64 / k as f64) * v[j]);
        }
    }

    #[test]
    fn deployed_variance_scales(beta in 0.0f64..=1.0, seed in 0u64..1000) {
        let clients = gen_synthetic(&SyntheticSpec::quadratic(5, 3, 1.0, 1.0, seed)).unwrap();
        let p = FlixProblem::from_clients(clients, AlphaVector::uniform(5, beta).unwrap(), 1e-10, 10).unwrap();
        let base = population_variance(p.local_models());
        let x = vec![seed as f64 * 0.01, -1.0, 2.0];
        let got = p.deployed_variance(&x);
        prop_assert!((got - (1.0 - beta).powi(2) * base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn mixture_gradient_matches_finite_differences(seed in 0u64..200) {
        let clients = gen_synthetic(&SyntheticSpec::logistic(3, 4, 15, 0.05, seed)).unwrap();
        let alpha = AlphaVector::new(vec![0.2, 0.7, 1.0]).unwrap();
        let p = FlixProblem::from_clients(clients, alpha, 1e-9, 100_000).unwrap();
        let x = vec![0.3, -0.2, 0.5, 0.1];
        let g = p.grad(&x).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (p.value(&xp).unwrap() - p.value(&xm).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-7, "coordinate {}: {} vs {}", j, fd, g[j]);
        }
    }
}

fn small_quadratics() -> FlixProblem {
    let clients = gen_synthetic(&SyntheticSpec::quadratic(3, 4, 0.5, 2.0, 21)).unwrap();
    FlixProblem::from_clients(clients, AlphaVector::new(vec![0.4, 0.8, 1.0]).unwrap(), 1e-12, 10).unwrap()
}

#[test]
fn full_weight_is_plain_average_loss() {
    let clients = gen_synthetic(&SyntheticSpec::logistic(4, 5, 20, 0.1, 2)).unwrap();
    let p = FlixProblem::from_clients(clients.clone(), AlphaVector::uniform(4, 1.0).unwrap(), 1e-9, 100_000).unwrap();
    let x = vec![0.1, 0.2, -0.3, 0.0, 1.0];
    let erm = clients.iter().map(|c| c.value(&x).unwrap()).sum::<f64>() / 4.0;
    assert!((p.value(&x).unwrap() - erm).abs() < 1e-14);
}

#[test]
fn rand_k_step_is_unbiased_for_the_exact_step() {
    let p = small_quadratics();
    let specs = vec![CompressorSpec::rand_k(1, 4).unwrap(); 3];
    let opts = RunOptions::new(StepsizeMode::Manual(0.1), 1);
    let exact = run_dgd(&p, &opts).unwrap().x_final;
    let runs = 10_000;
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    for seed in 0..runs {
        let x = run_dcgd(&p, &specs, &opts, seed).unwrap().x_final;
        for j in 0..4 {
            sum[j] += x[j];
            sum_sq[j] += x[j] * x[j];
        }
    }
    let nr = runs as f64;
    for j in 0..4 {
        let m = sum[j] / nr;
        let se = ((sum_sq[j] / nr - m * m).max(0.0) / nr).sqrt();
        assert!(
            (m - exact[j]).abs() <= 4.0 * se + 1e-15,
            "coordinate {j}: {m} vs {} (se {se})",
            exact[j]
        );
    }
}

#[test]
fn uplink_advances_by_payload() {
    let p = small_quadratics();
    let opts = RunOptions::new(StepsizeMode::Theoretical, 6);
    let t = run_dgd(&p, &opts).unwrap();
    assert!(t
        .records
        .windows(2)
        .all(|w| w[1].uplink_floats - w[0].uplink_floats == 12));
    let specs = vec![CompressorSpec::rand_k(3, 4).unwrap(); 3];
    for t in [
        run_dcgd(&p, &specs, &opts, 1).unwrap(),
        run_diana(&p, &specs, &opts, 1).unwrap(),
    ] {
        assert_eq!(t.records[0].uplink_floats, 0);
        assert!(t
            .records
            .windows(2)
            .all(|w| w[1].uplink_floats - w[0].uplink_floats == 9));
    }
}

#[test]
fn diana_beats_dcgd_floor_on_quadratics() {
    let p = small_quadratics();
    let specs = vec![CompressorSpec::rand_k(1, 4).unwrap(); 3];
    let x_star = flix::verification::quad_flix_minimizer(&p).unwrap();
    let f_star = p.value(&x_star).unwrap();
    let opts = RunOptions::new(StepsizeMode::Theoretical, 3000);
    let diana = run_diana(&p, &specs, &opts, 5).unwrap().final_record().value - f_star;
    let dcgd = run_dcgd(&p, &specs, &opts, 5).unwrap().final_record().value - f_star;
    assert!(diana < 1e-12, "{diana:e}");
    assert!(dcgd > 1e-8, "{dcgd:e}");
}

#[test]
fn quadratic_optimum_matches_gradient_descent_reference() {
    // The closed form and a long plain descent run agree to 1e-9.
    let p = small_quadratics();
    let closed = flix::verification::quad_flix_minimizer(&p).unwrap();
    let t = run_dgd(&p, &RunOptions::new(StepsizeMode::Theoretical, 20_000)).unwrap();
    assert!(linalg::max_abs_diff(&closed, &t.x_final) <= 1e-9);

    let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let c: ClientObjective = QuadraticObjective::new(a, DVector::from_vec(vec![1.0, 1.0]), 0.0)
        .unwrap()
        .into();
    let p = FlixProblem::from_clients(vec![c], AlphaVector::uniform(1, 0.3).unwrap(), 1e-12, 10).unwrap();
    let x = flix::verification::quad_flix_minimizer(&p).unwrap();
    assert!(linalg::max_abs_diff(&x, &p.local_models()[0]) < 1e-14);
}
