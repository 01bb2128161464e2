use land_core::eval::{aic_bic, f_measure, num_params};
use land_core::geodesic::exp_endpoint;
use land_core::land::{normalization_constant, LandParams};
use land_core::mixture::{e_step, LandMixture};
use land_core::{log_map, ConstantMetric, DataMatrix, GeodesicSolverConfig, LearnedMetric, Metric, MetricParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(n: usize, d: usize) -> impl Strategy<Value = DataMatrix> {
    prop::collection::vec(-3.0..3.0f64, n * d).prop_map(move |v| DataMatrix::new(n, d, v).unwrap())
}

/// Random SPD matrix L L^T + 0.1 I.
fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let l = DMatrix::from_vec(d, d, v);
        &l * l.transpose() + DMatrix::identity(d, d) * 0.1
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_entries_are_positive_and_bounded(
        data in points(12, 3),
        x in prop::collection::vec(-4.0..4.0f64, 3),
        sigma in 0.05..3.0f64,
        rho in 1e-3..1.0f64,
    ) {
        let m = LearnedMetric::new(data, MetricParams::new(sigma, rho).unwrap()).unwrap();
        let diag = m.metric_tensor(&x).unwrap();
        for v in &diag {
            prop_assert!(*v > 0.0 && v.is_finite());
            prop_assert!(*v <= 1.0 / rho * (1.0 + 1e-12));
        }
        let density = m.measure_density(&x).unwrap();
        let expected: f64 = diag.iter().product::<f64>().sqrt();
        prop_assert!((density - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn constant_metric_exp_and_log_are_vector_arithmetic(
        diag in prop::collection::vec(0.1..10.0f64, 2),
        x in prop::collection::vec(-2.0..2.0f64, 2),
        v in prop::collection::vec(-2.0..2.0f64, 2),
    ) {
        let m = ConstantMetric::new(diag).unwrap();
        let cfg = GeodesicSolverConfig::default();
        let y = exp_endpoint(&m, &x, &v, &cfg).unwrap();
        let back = log_map(&m, &x, &y, &cfg).unwrap();
        for d in 0..2 {
            prop_assert!((y[d] - (x[d] + v[d])).abs() < 1e-12);
            prop_assert!((back[d] - v[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_metric_normalization_is_exact(
        diag in prop::collection::vec(0.2..5.0f64, 2),
        sigma in spd(2),
        seed in any::<u64>(),
    ) {
        // m(mu, v) = sqrt(prod diag) everywhere, so C = Z sqrt(prod diag).
        let m = ConstantMetric::new(diag.clone()).unwrap();
        let p = LandParams::from_covariance(vec![0.0, 0.0], sigma.clone()).unwrap();
        let mc = normalization_constant(&m, p.mu(), &sigma, 50, seed, &[1], &GeodesicSolverConfig::sampling()).unwrap();
        let expected = p.log_z().exp() * diag.iter().product::<f64>().sqrt();
        prop_assert!((mc.estimate() - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn responsibilities_are_row_stochastic(
        data in points(20, 2),
        mu0 in prop::collection::vec(-2.0..2.0f64, 2),
        mu1 in prop::collection::vec(-2.0..2.0f64, 2),
        s0 in spd(2),
        s1 in spd(2),
        w in 0.01..0.99f64,
    ) {
        let metric = ConstantMetric::identity(2);
        let comps: Vec<LandParams> = [(mu0, s0), (mu1, s1)]
            .into_iter()
            .map(|(mu, s)| {
                let p = LandParams::from_covariance(mu, s).unwrap();
                let nc = normalization_constant(&metric, p.mu(), p.sigma(), 4, 0, &[0], &GeodesicSolverConfig::sampling()).unwrap();
                p.with_norm_const(nc.norm_const())
            })
            .collect();
        let mix = LandMixture::new(vec![w, 1.0 - w], comps).unwrap();
        let r = e_step(&data, &mix, &metric, &GeodesicSolverConfig::default()).unwrap();
        for row in r.rows() {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixture_weights_must_sum_to_one(w in prop::collection::vec(0.0..1.0f64, 3)) {
        let c = LandParams::from_covariance(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let total: f64 = w.iter().sum();
        let res = LandMixture::new(w.clone(), vec![c.clone(), c.clone(), c]);
        if (total - 1.0).abs() > 1e-9 {
            prop_assert!(res.is_err());
        } else {
            prop_assert!(res.is_ok());
        }
        if total > 0.0 {
            let normed: Vec<f64> = w.iter().map(|v| v / total).collect();
            let c = LandParams::from_covariance(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
            let mix = LandMixture::new(normed, vec![c.clone(), c.clone(), c]).unwrap();
            prop_assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn f_measure_ignores_cluster_names(
        labels in prop::collection::vec(0i64..3, 30),
        clusters in prop::collection::vec(0usize..4, 30),
        perm in Just([3usize, 0, 2, 1]),
    ) {
        let f = f_measure(&labels, &clusters).unwrap();
        let renamed: Vec<usize> = clusters.iter().map(|c| perm[*c]).collect();
        prop_assert!((f - f_measure(&labels, &renamed).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
        let as_clusters: Vec<usize> = labels.iter().map(|l| perm[*l as usize]).collect();
        prop_assert!((f_measure(&labels, &as_clusters).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn information_criteria_order_survives_a_shift(
        l1 in -1e3..1e3f64,
        l2 in -1e3..1e3f64,
        shift in -1e3..1e3f64,
        k in 1usize..5,
        n in 10usize..1000,
    ) {
        let nu = num_params(k, 2);
        let (a1, b1) = aic_bic(l1, nu, n);
        let (a2, b2) = aic_bic(l2, nu, n);
        let (a1s, b1s) = aic_bic(l1 + shift, nu, n);
        let (a2s, b2s) = aic_bic(l2 + shift, nu, n);
        prop_assert_eq!(a1 < a2, a1s < a2s);
        prop_assert_eq!(b1 < b2, b1s < b2s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn learned_metric_exp_log_roundtrip(
        angle in 0.0..std::f64::consts::TAU,
        radius in 0.05..0.4f64,
        base in 0usize..20,
    ) {
        let anchors: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / 19.0;
                vec![t.cos(), 0.5 * t.sin()]
            })
            .collect();
        let data = DataMatrix::from_rows(&anchors).unwrap();
        let m = LearnedMetric::new(data, MetricParams::new(0.25, 0.01).unwrap()).unwrap();
        let cfg = GeodesicSolverConfig::default();
        let x = anchors[base].clone();
        let v = vec![radius * angle.cos(), radius * angle.sin()];
        // Scale the velocity to unit metric speed times radius so the endpoint
        // stays near the data.
        let speed = m.squared_norm(&x, &v).unwrap().sqrt();
        let v: Vec<f64> = v.iter().map(|c| c * radius / speed).collect();
        let y = exp_endpoint(&m, &x, &v, &cfg).unwrap();
        let back = log_map(&m, &x, &y, &cfg).unwrap();
        let again = exp_endpoint(&m, &x, &back, &cfg).unwrap();
        let err = ((again[0] - y[0]).powi(2) + (again[1] - y[1]).powi(2)).sqrt();
        prop_assert!(err < 1e-5, "endpoint error {err}");
    }
}
