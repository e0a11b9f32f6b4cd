//! One line per acceptance criterion: checks at the stated tolerance plus a
//! runtime budget. Exits nonzero when any criterion fails.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repgeo::align::{procrustes_fit, procrustes_permutation_test};
use repgeo::bundle::filter_labels;
use repgeo::dissim::{from_accuracy, AccuracyMapping, DissimilarityMatrix, Metric};
use repgeo::embed::{
    classical_mds, geodesic_euclidean_ratios, isomap, spectrum_diagnostics, trustworthiness,
    valid_trust_ks, IsomapOptions, NeighborChoice,
};
use repgeo::logistic::{self, objective_and_gradient, LogisticConfig};
use repgeo::probe::{accuracy_significance, load_grid, probe_grid, train_pair_probe, ProbeConfig};
use repgeo::steer::{build_steering_set, load_steering, normalize_direction, save_steering, select_layers};
use repgeo::synth::{generate, label_means, noise_matrix, two_cluster_matrix, Scenario, SyntheticSpec};
use repgeo::uq::{auc_roc, expected_calibration_error, run_uq, UqConfig};
use repgeo_cli::{cmd_all, cmd_synth, PipelineConfig};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mds_exactness() -> Check {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(3..=30);
        let m = r.random_range(1..=5);
        let scale = r.random_range(0.1..10.0);
        let p = gaussian(&mut r, n, m) * scale;
        let d = DissimilarityMatrix::from_points(labels(n), &p).map_err(|e| e.to_string())?;
        let e = classical_mds(&d, n - 1).map_err(|e| e.to_string())?;
        worst = worst.max((e.distance_matrix() - &d.values).amax());
    }
    ensure(worst < 1e-8, || format!("max distance error {worst:.3e}"))?;
    Ok(format!("200 instances, max distance error {worst:.2e}"))
}

fn trust_oracle() -> Check {
    let mut r = rng(2);
    for t in 0..100 {
        let n = r.random_range(5..=25);
        let dim = r.random_range(2..=6);
        let x = gaussian(&mut r, n, dim);
        let out_dim = r.random_range(1..=2);
        let coords = &x * gaussian(&mut r, dim, out_dim) + gaussian(&mut r, n, out_dim) * 0.3;
        let original = oracles::euclidean(&x);
        let ks: Vec<usize> = valid_trust_ks(n).collect();
        let k = ks[r.random_range(0..ks.len())];
        let got = trustworthiness(&original, &coords, k).map_err(|e| e.to_string())?;
        let want = oracles::trustworthiness(&original, &coords, k);
        ensure(got == want, || format!("instance {t}: {got} != {want} (n = {n}, k = {k})"))?;
    }
    Ok("100 instances equal to brute force".into())
}

fn rotation(theta: f64, reflect: bool) -> DMatrix<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    if reflect {
        DMatrix::from_row_slice(2, 2, &[c, s, s, -c])
    } else {
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }
}

fn procrustes() -> Check {
    let mut r = rng(3);
    let mut worst_scale = 0.0f64;
    let mut min_r2 = 1.0f64;
    for _ in 0..50 {
        let n = r.random_range(4..=20);
        let x = gaussian(&mut r, n, 2);
        let s = r.random_range(0.1..10.0);
        let rot = rotation(r.random_range(0.0..std::f64::consts::TAU), r.random_bool(0.5));
        let shift = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 3.0 } else { -1.5 });
        let y = &x * &rot * s + shift;
        let f = procrustes_fit(&x, &y).map_err(|e| e.to_string())?;
        min_r2 = min_r2.min(f.r_squared);
        worst_scale = worst_scale.max((f.scale - s).abs());
    }
    ensure(min_r2 >= 1.0 - 1e-9, || format!("planted R² {min_r2}"))?;
    ensure(worst_scale <= 1e-6, || format!("scale error {worst_scale:.3e}"))?;
    let mut worst_grid = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(5..=20);
        let x = gaussian(&mut r, n, 2);
        let y = &x * rotation(r.random_range(0.0..6.3), r.random_bool(0.5)) * 2.0 + gaussian(&mut r, n, 2);
        let f = procrustes_fit(&x, &y).map_err(|e| e.to_string())?;
        worst_grid = worst_grid.max((f.r_squared - oracles::procrustes_r2(&x, &y)).abs());
    }
    ensure(worst_grid <= 1e-6, || format!("grid oracle gap {worst_grid:.3e}"))?;
    let x = gaussian(&mut r, 17, 2);
    let y = &x * rotation(0.7, false) * 1.8;
    let p = procrustes_permutation_test(&x, &y, 2000, 11).map_err(|e| e.to_string())?.p_value;
    ensure(p == Some(1.0 / 2001.0), || format!("planted p {p:?}"))?;
    Ok(format!(
        "min planted R² {min_r2:.12}, scale error {worst_scale:.1e}, grid gap {worst_grid:.1e}, p = 1/2001"
    ))
}

fn permutation_calibration() -> Check {
    let mut r = rng(4);
    let trials = 500;
    let mut hits_align = 0;
    for t in 0..trials {
        let x = gaussian(&mut r, 17, 2);
        let y = gaussian(&mut r, 17, 2);
        let p = procrustes_permutation_test(&x, &y, 2000, t as u64)
            .map_err(|e| e.to_string())?
            .p_value
            .expect("permutation p-value");
        hits_align += (p <= 0.05) as usize;
    }
    let mut hits_acc = 0;
    let cfg = ProbeConfig::default();
    for t in 0..trials {
        let x = gaussian(&mut r, 60, 2);
        let mut y: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
        rand::seq::SliceRandom::shuffle(y.as_mut_slice(), &mut r);
        let s = accuracy_significance(&x, &y, 2000, t as u64, &cfg).map_err(|e| e.to_string())?;
        hits_acc += (s.p_value <= 0.05) as usize;
    }
    let (fa, fb) = (hits_align as f64 / trials as f64, hits_acc as f64 / trials as f64);
    ensure(fa <= 0.07 && fb <= 0.07, || format!("P(p <= 0.05): procrustes {fa:.3}, accuracy {fb:.3}"))?;
    Ok(format!("P(p <= 0.05) procrustes {fa:.3} (T = 2000), accuracy {fb:.3} (T = 2000)"))
}

fn parabola_d() -> Result<DissimilarityMatrix, String> {
    let spec = SyntheticSpec::preset(Scenario::ParabolaV);
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let grid = probe_grid(&bundle, &filter_labels(&bundle, 1), spec.seed, &ProbeConfig::default())
        .map_err(|e| e.to_string())?;
    from_accuracy(&grid, grid.n_layers - 1, AccuracyMapping::Accuracy).map_err(|e| e.to_string())
}

fn isomap_unrolling() -> Check {
    let d = parabola_d()?;
    let t = |rank: usize| -> Result<(f64, f64), String> {
        let m = classical_mds(&d, rank).map_err(|e| e.to_string())?;
        let i = isomap(&d, &IsomapOptions { rank, neighbors: NeighborChoice::Auto }).map_err(|e| e.to_string())?;
        Ok((m.trustworthiness().unwrap_or(f64::NAN), i.trustworthiness().unwrap_or(f64::NAN)))
    };
    let (m1, i1) = t(1)?;
    let (m2, i2) = t(2)?;
    ensure(i1 - m1 >= 0.05, || format!("rank-1 gain {:.4} (mds {m1:.4}, isomap {i1:.4})", i1 - m1))?;
    ensure((i2 - m2).abs() <= 0.01, || format!("rank-2 difference {:.4}", i2 - m2))?;
    Ok(format!("rank 1: mds {m1:.4} isomap {i1:.4}; rank 2: mds {m2:.4} isomap {i2:.4}"))
}

fn geodesic_ratios() -> Check {
    let spec = SyntheticSpec::preset(Scenario::FlatLine);
    let means = label_means(&spec).map_err(|e| e.to_string())?;
    let flat = DissimilarityMatrix::from_points(labels(means.nrows()), &means).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for k in 1..flat.len() {
        let g = geodesic_euclidean_ratios(&flat, k, &[0.0, 100.0]).map_err(|e| e.to_string())?;
        for p in &g.ratio_percentiles {
            worst = worst.max((p.ratio - 1.0).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("flat_line ratio deviation {worst:.3e}"))?;
    let d = parabola_d()?;
    let iso = isomap(&d, &IsomapOptions { rank: 1, neighbors: NeighborChoice::Auto }).map_err(|e| e.to_string())?;
    let p90 = iso.geodesic.and_then(|g| g.percentile(90.0)).ok_or("no 90th percentile")?;
    ensure(p90 > 1.05, || format!("parabola p90 ratio {p90:.4}"))?;
    Ok(format!("flat_line max |ratio - 1| {worst:.1e}; parabola_v p90 {p90:.3} (k = {})", iso.k_neighbors.unwrap_or(0)))
}

fn eigengap() -> Check {
    let two = DissimilarityMatrix::from_matrix(labels(6), two_cluster_matrix(6, 0.1, 0.9), Metric::External)
        .map_err(|e| e.to_string())?;
    let s = spectrum_diagnostics(&two, 2000, 5).map_err(|e| e.to_string())?;
    let p1 = s.eigengap_p_hi.first().copied().flatten().ok_or("no p-value at k = 1")?;
    ensure(p1 < 0.05 && s.flagged.contains(&1), || format!("two-cluster p_hi(1) = {p1}"))?;
    let mut flagged = 0;
    for seed in 0..200 {
        let d = DissimilarityMatrix::from_matrix(labels(10), noise_matrix(10, seed), Metric::External)
            .map_err(|e| e.to_string())?;
        let s = spectrum_diagnostics(&d, 2000, seed).map_err(|e| e.to_string())?;
        flagged += s.flagged.contains(&1) as usize;
    }
    let rate = flagged as f64 / 200.0;
    ensure(rate <= 0.07, || format!("noise flags k = 1 in {flagged}/200"))?;
    Ok(format!("two-cluster p_hi(1) = {p1:.4}; noise flags k = 1 in {flagged}/200"))
}

fn probe_correctness() -> Check {
    let cfg = ProbeConfig::default();
    let mut r = rng(8);
    let mut worst_grad = 0.0f64;
    let mut min_sep = 1.0f64;
    for seed in 0..20 {
        let mut x = gaussian(&mut r, 400, 8);
        for i in 200..400 {
            x[(i, 0)] += 6.0;
        }
        let y: Vec<bool> = (0..400).map(|i| i >= 200).collect();
        let f = train_pair_probe(&x, &y, seed, &cfg).map_err(|e| e.to_string())?;
        ensure(f.converged, || "separable fit did not converge".into())?;
        worst_grad = worst_grad.max(f.grad_norm);
        min_sep = min_sep.min(f.test_accuracy);
    }
    ensure(min_sep >= 0.95, || format!("separable test accuracy {min_sep}"))?;
    let spec = SyntheticSpec::preset(Scenario::GaussianClusters);
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let grid = probe_grid(&bundle, &filter_labels(&bundle, 1), 0, &cfg).map_err(|e| e.to_string())?;
    let last = grid.n_layers - 1;
    let fixture_min = grid
        .probes
        .iter()
        .filter(|((_, l), _)| *l == last)
        .map(|(_, p)| p.test_accuracy)
        .fold(1.0, f64::min);
    ensure(fixture_min >= 0.95, || format!("gaussian_clusters min pair accuracy {fixture_min}"))?;
    for p in grid.probes.values() {
        worst_grad = worst_grad.max(p.grad_norm);
    }
    let mut inside = 0;
    let seeds = 1000;
    for seed in 0..seeds {
        let x = gaussian(&mut r, 400, 8);
        let y: Vec<bool> = (0..400).map(|i| i >= 200).collect();
        let f = train_pair_probe(&x, &y, seed, &cfg).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(f.grad_norm);
        inside += (0.35..=0.65).contains(&f.test_accuracy) as usize;
    }
    let frac = inside as f64 / seeds as f64;
    ensure(frac >= 0.99, || format!("no-signal accuracy inside [0.35, 0.65] for {frac:.3}"))?;
    ensure(worst_grad <= 1e-6, || format!("gradient norm {worst_grad:.3e}"))?;
    let mut worst_fd = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(6..40);
        let d = r.random_range(1..6);
        let x = gaussian(&mut r, n, d);
        let y: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let w: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let b: f64 = r.sample(StandardNormal);
        let (_, g) = objective_and_gradient(&x, &y, 1.0, &w, b);
        let h = 1e-6;
        for j in 0..=d {
            let at = |s: f64| {
                let (mut wp, mut bp) = (w.clone(), b);
                if j < d {
                    wp[j] += s;
                } else {
                    bp += s;
                }
                objective_and_gradient(&x, &y, 1.0, &wp, bp).0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst_fd = worst_fd.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
        let fit = logistic::fit(&x, &y, &LogisticConfig::default(), None).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(fit.grad_norm);
    }
    ensure(worst_fd <= 1e-4, || format!("finite-difference gap {worst_fd:.3e}"))?;
    ensure(worst_grad <= 1e-6, || format!("gradient norm {worst_grad:.3e}"))?;
    Ok(format!(
        "separable min {min_sep:.4}, clusters min {fixture_min:.4}, no-signal inside {frac:.3}, max |grad| {worst_grad:.1e}, fd gap {worst_fd:.1e}"
    ))
}

fn uq_pipeline() -> Check {
    let spec = SyntheticSpec::preset(Scenario::UqBoundary);
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let grid = probe_grid(&bundle, &filter_labels(&bundle, 1), 0, &ProbeConfig::default()).map_err(|e| e.to_string())?;
    let cfg = UqConfig::default();
    let report = run_uq(&bundle, &grid, &cfg, 0).map_err(|e| e.to_string())?;
    ensure(report.skipped.is_empty(), || format!("skipped pairs {:?}", report.skipped))?;
    let min_rows = report.per_pair.iter().map(|m| m.n_train + m.n_val + m.n_test).min().unwrap_or(0);
    ensure(min_rows >= 500, || format!("smallest pair has {min_rows} rows"))?;
    let p = report.pooled.ok_or("no pooled metrics")?;
    ensure(p.auc_roc >= 0.85, || format!("pooled AUC {:.4}", p.auc_roc))?;
    ensure(p.accuracy - p.baseline_accuracy >= 0.05, || {
        format!("accuracy {:.4} vs baseline {:.4}", p.accuracy, p.baseline_accuracy)
    })?;
    ensure(p.ece <= 0.05, || format!("ECE {:.4}", p.ece))?;
    let e = |p: &[f64], o: &[bool]| expected_calibration_error(p, o, 10).map_err(|e| e.to_string());
    ensure(e(&[1.0; 4], &[true; 4])? == 0.0, || "ECE all-correct".into())?;
    ensure(e(&[1.0; 4], &[false; 4])? == 1.0, || "ECE all-wrong".into())?;
    let probs = [0.1, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9, 0.9];
    let outs = [true, false, false, false, false, true, true, true, true, false];
    let hand = 0.5 * (0.1f64 - 0.2).abs() + 0.5 * (0.9f64 - 0.8).abs();
    ensure(e(&probs, &outs)? == hand, || "ECE hand example".into())?;
    let a = |s: &[f64], o: &[bool]| auc_roc(s, o).map_err(|e| e.to_string());
    ensure(a(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true])? == 1.0, || "AUC separated".into())?;
    ensure(a(&[0.5; 4], &[true, false, true, false])? == 0.5, || "AUC ties".into())?;
    let mut r = rng(9);
    for _ in 0..20 {
        let s: Vec<f64> = (0..50).map(|_| (r.random_range(0..20) as f64) / 20.0).collect();
        let mut o: Vec<bool> = (0..50).map(|_| r.random_bool(0.5)).collect();
        o[0] = true;
        o[1] = false;
        ensure(a(&s, &o)? == oracles::auc(&s, &o), || "AUC brute force".into())?;
    }
    Ok(format!(
        "pooled AUC {:.4}, accuracy {:.4} (baseline {:.4}), ECE {:.4}, n = {}",
        p.auc_roc, p.accuracy, p.baseline_accuracy, p.ece, p.n
    ))
}

fn steering() -> Check {
    let (v, degenerate) = normalize_direction(&[3.0, 4.0]);
    ensure(!degenerate && (v[0] - 0.6).abs() <= 1e-8 && (v[1] - 0.8).abs() <= 1e-8, || format!("{v:?}"))?;
    let layers = select_layers(&[0.5, 0.6, 0.9, 0.92, 0.95], 3).map_err(|e| e.to_string())?;
    ensure(layers == vec![2, 1, 4], || format!("selected {layers:?}"))?;
    let spec = SyntheticSpec { n_per_label: 40, n_wrong_per_pair: 0, ..SyntheticSpec::smoke() };
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let grid = probe_grid(&bundle, &filter_labels(&bundle, 1), 0, &ProbeConfig::default()).map_err(|e| e.to_string())?;
    let set = build_steering_set(&grid, &grid.labels[0], &grid.labels[1], Some(&grid.labels[2]), 3, 1.0)
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_steering(&set, dir.path().join("a")).map_err(|e| e.to_string())?;
    let back = load_steering(dir.path().join("a")).map_err(|e| e.to_string())?;
    let bits = |s: &repgeo::SteeringVectorSet| -> Vec<u32> {
        s.layers.iter().flat_map(|l| &l.vectors).flat_map(|v| v.values.iter().map(|x| x.to_bits())).collect()
    };
    ensure(back == set && bits(&back) == bits(&set), || "round trip changed the set".into())?;
    save_steering(&back, dir.path().join("b")).map_err(|e| e.to_string())?;
    for f in ["header.json", "vectors.f32"] {
        let (a, b) = (dir.path().join("a").join(f), dir.path().join("b").join(f));
        ensure(std::fs::read(&a).ok() == std::fs::read(&b).ok(), || format!("{f} differs after re-export"))?;
    }
    Ok(format!("(3,4) -> ({:.8}, {:.8}); layers {layers:?}; bit-exact round trip", v[0], v[1]))
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable output dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").display().to_string();
                out.push((rel, std::fs::read(&p).expect("readable artifact")));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = tmp.path().join("fixture");
    cmd_synth(&SyntheticSpec::smoke(), &fx)
        .and_then(|o| o.write(&fx))
        .map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let cfg = PipelineConfig {
            bundle_path: Some(fx.join("bundle")),
            reference_path: Some(fx.join("reference.csv")),
            out_dir: tmp.path().join(name),
            seed: 7,
            ..PipelineConfig::default()
        };
        cmd_all(&cfg).map_err(|e| e.to_string())?;
        Ok(files(&cfg.out_dir))
    };
    let (a, b) = (run("first")?, run("second")?);
    let kinds = ["json", "csv", "svg", "f32"];
    for k in kinds {
        ensure(a.iter().any(|(p, _)| p.ends_with(k)), || format!("no .{k} artifact"))?;
    }
    ensure(a.len() == b.len(), || "artifact sets differ".into())?;
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        ensure(pa == pb && ba == bb, || format!("{pa} differs"))?;
    }
    load_grid(tmp.path().join("first").join("probe")).map_err(|e| e.to_string())?;
    Ok(format!("{} artifacts byte-identical across two runs", a.len()))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { name: "mds-exactness", budget: Duration::from_secs(10), run: mds_exactness },
        Criterion { name: "trustworthiness-oracle", budget: Duration::from_secs(10), run: trust_oracle },
        Criterion { name: "procrustes", budget: Duration::from_secs(60), run: procrustes },
        Criterion { name: "permutation-calibration", budget: Duration::from_secs(300), run: permutation_calibration },
        Criterion { name: "isomap-unrolling", budget: Duration::from_secs(30), run: isomap_unrolling },
        Criterion { name: "geodesic-ratios", budget: Duration::from_secs(10), run: geodesic_ratios },
        Criterion { name: "eigengap-test", budget: Duration::from_secs(300), run: eigengap },
        Criterion { name: "probe-correctness", budget: Duration::from_secs(60), run: probe_correctness },
        Criterion { name: "uq-pipeline", budget: Duration::from_secs(60), run: uq_pipeline },
        Criterion { name: "steering-derivation", budget: Duration::from_secs(1), run: steering },
        Criterion { name: "determinism", budget: Duration::from_secs(120), run: determinism },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    println!("acceptance suite");
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        failed += !ok as usize;
        println!(
            "{} {:<24} {:>8.2}s / {:>3}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
