#[path = "support/oracles.rs"]
mod oracles;

use nalgebra::DMatrix;
use proptest::prelude::*;
use repgeo::align::{procrustes_fit, r_squared_at};
use repgeo::bundle::{filter_labels, load_bundle, save_bundle, ActivationBundle, ActivationRecord};
use repgeo::dissim::{DissimilarityMatrix, Metric};
use repgeo::embed::{
    classical_mds, double_center, knn_geodesics, knn_graph, negative_mass_fraction,
    participation_ratio, trustworthiness,
};
use repgeo::logistic::{fit, objective_and_gradient, LogisticConfig};
use repgeo::steer::normalize_direction;
use repgeo::uq::{auc_roc, expected_calibration_error, fit_isotonic, fit_platt};

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

fn points(max_n: usize, max_m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (3..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
        prop::collection::vec(-5.0f64..5.0, n * m).prop_map(move |v| DMatrix::from_row_slice(n, m, &v))
    })
}

fn small_bundle() -> impl Strategy<Value = ActivationBundle> {
    (1usize..4, 1usize..5, 1usize..12).prop_flat_map(|(layers, dim, n)| {
        (
            prop::collection::vec(prop::collection::vec(-1e3f32..1e3, n * dim), layers),
            prop::collection::vec((0usize..3, 0usize..3), n),
        )
            .prop_map(move |(mats, labs)| {
                let names = ["joy", "fear", "calm"];
                let records = labs
                    .iter()
                    .enumerate()
                    .map(|(i, &(t, p))| {
                        ActivationRecord::misclassified(format!("r{i}"), names[t], names[p])
                    })
                    .collect();
                ActivationBundle::new("prop", dim, records, mats).unwrap()
            })
    })
}

fn logistic_data() -> impl Strategy<Value = (DMatrix<f64>, Vec<bool>)> {
    (6usize..40, 1usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(x, y)| (DMatrix::from_row_slice(n, d, &x), y))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bundle_round_trip(bundle in small_bundle()) {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        prop_assert_eq!(back, bundle);
    }

    #[test]
    fn nan_anywhere_is_rejected(bundle in small_bundle(), pick in any::<prop::sample::Index>()) {
        let mut b = bundle;
        let layer = pick.index(b.n_layers);
        let pos = pick.index(b.layer_matrices[layer].len());
        b.layer_matrices[layer][pos] = f32::NAN;
        prop_assert!(b.validate().is_err());
    }

    #[test]
    fn filter_is_monotone(bundle in small_bundle(), lo in 0usize..5, extra in 0usize..5) {
        let a = filter_labels(&bundle, lo);
        let b = filter_labels(&bundle, lo + extra);
        prop_assert!(b.labels.iter().all(|l| a.labels.contains(l)));
    }

    #[test]
    fn gradient_matches_finite_differences(
        (x, y) in logistic_data(),
        w0 in prop::collection::vec(-1.0f64..1.0, 5),
        b0 in -1.0f64..1.0,
    ) {
        let d = x.ncols();
        let w = &w0[..d];
        let (_, g) = objective_and_gradient(&x, &y, 1.0, w, b0);
        let h = 1e-6;
        for j in 0..=d {
            let bump = |s: f64| {
                let mut wp = w.to_vec();
                let mut bp = b0;
                if j < d { wp[j] += s } else { bp += s }
                objective_and_gradient(&x, &y, 1.0, &wp, bp).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1.0), "j={} fd={} g={}", j, fd, g[j]);
        }
    }

    #[test]
    fn optimum_independent_of_start(
        (x, y) in logistic_data(),
        w0 in prop::collection::vec(-3.0f64..3.0, 5),
        b0 in -3.0f64..3.0,
    ) {
        let cfg = LogisticConfig::default();
        let a = fit(&x, &y, &cfg, None).unwrap();
        let b = fit(&x, &y, &cfg, Some((&w0[..x.ncols()], b0))).unwrap();
        prop_assert!(a.converged && b.converged);
        prop_assert!(a.grad_norm <= 1e-6);
        prop_assert!((&a.weights - &b.weights).amax() < 1e-5);
        prop_assert!((a.bias - b.bias).abs() < 1e-5);
    }

    #[test]
    fn mds_reproduces_euclidean_distances(p in points(30, 5)) {
        let n = p.nrows();
        let d = DissimilarityMatrix::from_points(labels(n), &p).unwrap();
        let k = p.ncols().min(n - 1);
        let r = classical_mds(&d, k).unwrap();
        prop_assert!((r.distance_matrix() - &d.values).amax() < 1e-8);
        let again = classical_mds(&d, k).unwrap();
        prop_assert!((again.distance_matrix() - r.distance_matrix()).amax() < 1e-10);
        let b = double_center(&d.values);
        for i in 0..n {
            prop_assert!(b.row(i).sum().abs() <= 1e-10 * (1.0 + d.values.amax().powi(2)));
        }
        prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn trustworthiness_matches_oracle(p in points(14, 4), proj in prop::collection::vec(-1.0f64..1.0, 4), k_pick in any::<prop::sample::Index>()) {
        let n = p.nrows();
        prop_assume!(n >= 3);
        let original = oracles::euclidean(&p);
        let w = DMatrix::from_column_slice(p.ncols(), 1, &proj[..p.ncols()]);
        let coords = &p * w;
        let k = 1 + k_pick.index((n - 1) / 2);
        let t = trustworthiness(&original, &coords, k).unwrap();
        prop_assert_eq!(t, oracles::trustworthiness(&original, &coords, k));
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn bridging_leaves_component_geodesics_alone(p in points(16, 2), k in 1usize..3) {
        let n = p.nrows();
        prop_assume!(k < n);
        let d = DissimilarityMatrix::from_points(labels(n), &p).unwrap();
        let adj = knn_graph(&d.values, k).unwrap();
        // Dijkstra-free oracle: Bellman-Ford style relaxation on the unbridged graph
        let mut g = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { adj[(i, j)].unwrap_or(f64::INFINITY) });
        for _ in 0..n {
            for i in 0..n { for j in 0..n { for m in 0..n {
                let v = g[(i, m)] + g[(m, j)];
                if v < g[(i, j)] { g[(i, j)] = v; }
            }}}
        }
        let (full, diag) = knn_geodesics(&d, k).unwrap();
        prop_assert!(full.iter().all(|v| v.is_finite()));
        for i in 0..n {
            for j in 0..n {
                if g[(i, j)].is_finite() {
                    prop_assert!((full[(i, j)] - g[(i, j)]).abs() < 1e-9);
                }
            }
        }
        let n_components = {
            let mut seen = vec![false; n];
            let mut c = 0;
            for s in 0..n {
                if !seen[s] {
                    c += 1;
                    for j in 0..n { if g[(s, j)].is_finite() { seen[j] = true; } }
                }
            }
            c
        };
        prop_assert_eq!(diag.n_bridges_added, n_components - 1);
        prop_assert_eq!(diag.graph_connected, n_components == 1);
    }

    #[test]
    fn participation_ratio_bounds(ev in prop::collection::vec(-1.0f64..5.0, 1..20)) {
        let nonzero = ev.iter().filter(|v| **v > 0.0).count();
        if let Some(pr) = participation_ratio(&ev) {
            prop_assert!(pr >= 1.0 - 1e-12 && pr <= nonzero as f64 + 1e-12);
        } else {
            prop_assert_eq!(nonzero, 0);
        }
        if let Some(m) = negative_mass_fraction(&ev) {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn near_metric_noise_keeps_negative_mass_small(p in points(20, 3), noise in prop::collection::vec(-0.01f64..0.01, 400)) {
        let n = p.nrows();
        let d = oracles::euclidean(&p);
        prop_assume!(d.amax() > 1e-3);
        let perturbed = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (i.min(j), i.max(j));
            if a == b { 0.0 } else { d[(a, b)] * (1.0 + noise[a * 20 + b]) }
        });
        let r = classical_mds(&DissimilarityMatrix::from_matrix(labels(n), perturbed, Metric::External).unwrap(), 1).unwrap();
        prop_assert!(negative_mass_fraction(&r.eigenvalues).unwrap() < 0.05);
    }

    #[test]
    fn procrustes_invariant_to_similarity_of_x(
        p in prop::collection::vec(-3.0f64..3.0, 24),
        q in prop::collection::vec(-3.0f64..3.0, 24),
        theta in 0.0f64..6.3,
        reflect in any::<bool>(),
        s in 0.1f64..10.0,
    ) {
        let x = DMatrix::from_row_slice(12, 2, &p);
        let y = DMatrix::from_row_slice(12, 2, &q);
        let (c, sn) = (theta.cos(), theta.sin());
        let rot = if reflect {
            DMatrix::from_row_slice(2, 2, &[c, sn, sn, -c])
        } else {
            DMatrix::from_row_slice(2, 2, &[c, -sn, sn, c])
        };
        let base = procrustes_fit(&x, &y).unwrap();
        let moved = procrustes_fit(&(&x * rot * s), &y).unwrap();
        prop_assert!((base.r_squared - moved.r_squared).abs() < 1e-10);
        let r = base.rotation_matrix();
        prop_assert!((r.transpose() * &r - DMatrix::identity(2, 2)).amax() < 1e-10);
        prop_assert!((r.determinant().abs() - 1.0).abs() < 1e-10);
        prop_assert!(base.r_squared <= 1.0 + 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base.r_val) && (-1.0..=1.0).contains(&base.r_aro));
    }

    #[test]
    fn procrustes_beats_fixed_candidates(
        p in prop::collection::vec(-3.0f64..3.0, 20),
        q in prop::collection::vec(-3.0f64..3.0, 20),
        theta in 0.0f64..6.3,
        a in 0.01f64..5.0,
    ) {
        let x = DMatrix::from_row_slice(10, 2, &p);
        let y = DMatrix::from_row_slice(10, 2, &q);
        let rot = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let best = procrustes_fit(&x, &y).unwrap().r_squared;
        prop_assert!(best >= r_squared_at(&x, &y, &rot, a) - 1e-12);
    }

    #[test]
    fn ece_bounds_and_single_bin(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60),
    ) {
        let (p, o): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
        let e = expected_calibration_error(&p, &o, 10).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let one = expected_calibration_error(&p, &o, 1).unwrap();
        let mp = p.iter().sum::<f64>() / p.len() as f64;
        let mo = o.iter().filter(|v| **v).count() as f64 / o.len() as f64;
        prop_assert!((one - (mp - mo).abs()).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_count_and_is_rank_invariant(
        rows in prop::collection::vec((-5i32..5, any::<bool>()), 2..60),
    ) {
        let (s, o): (Vec<f64>, Vec<bool>) = rows.into_iter().map(|(s, o)| (s as f64, o)).unzip();
        prop_assume!(o.iter().any(|v| *v) && o.iter().any(|v| !*v));
        let a = auc_roc(&s, &o).unwrap();
        prop_assert_eq!(a, oracles::auc(&s, &o));
        let t: Vec<f64> = s.iter().map(|v| (v / 3.0).exp() * 7.0 - 2.0).collect();
        prop_assert_eq!(auc_roc(&t, &o).unwrap(), a);
    }

    #[test]
    fn calibration_maps_are_monotone(
        rows in prop::collection::vec((-4.0f64..4.0, any::<bool>()), 4..60),
    ) {
        let (s, o): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        for map in [fit_platt(&s, &o).unwrap(), fit_isotonic(&s, &o).unwrap()] {
            let probs: Vec<f64> = sorted.iter().map(|&v| map.apply(v)).collect();
            prop_assert!(probs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn normalization_is_scale_invariant(beta in prop::collection::vec(-10.0f64..10.0, 1..20), s in 1.0f64..1e3) {
        let norm = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let (a, _) = normalize_direction(&beta);
        let scaled: Vec<f64> = beta.iter().map(|v| v * s).collect();
        let (b, _) = normalize_direction(&scaled);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 2.0 * 1e-8 / norm + 1e-15);
        if norm >= 1.0 {
            let out = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(out >= 1.0 - 1e-7 && out <= 1.0);
        }
    }
}
