//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kflow::data::{find_system, integrate_rk4};
use kflow::evaluation::{evaluate_series, mean_smapes, prepare, run_benchmark, train_with, BenchmarkRow, Method, Protocol};
use kflow::forecaster::fit;
use kflow::kernels::{eval_elemental, gram, ElementalKernelId, ParamIndex};
use kflow::loss::{grad_loss, regularized_quadratic_form, rho};
use kflow::metrics::hausdorff;
use kflow::optimizer::{feasible_init, init_params, soft_threshold};
use kflow::{DelayDataset, KernelParams, TimeSeries, NUM_PARAMS, NUM_THETA};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYSTEMS: [&str; 4] = ["Lorenz", "Rossler", "Thomas", "Duffing"];
const SAMPLES: usize = 7200;

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }
}

fn report(id: usize, title: &str, o: &Outcome) -> bool {
    println!(
        "{} criterion {id} ({title}): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.summary
    );
    for d in &o.details {
        println!("    {d}");
    }
    o.pass
}

fn generate(name: &str) -> TimeSeries {
    let spec = find_system(name).unwrap();
    integrate_rk4(&spec, SAMPLES, spec.default_dt).unwrap()
}

fn score_line(row: &BenchmarkRow) -> String {
    let parts: Vec<String> = Method::ALL
        .iter()
        .map(|&m| {
            let s = row.score(m);
            let nnz = s.nnz_alpha.map_or(String::new(), |n| format!(" nnz={n}"));
            format!("{}: smape={:.4} hd={:.4}{nnz}", m.name(), s.smape, s.hausdorff)
        })
        .collect();
    format!("{}: {}", row.system, parts.join("; "))
}

struct Fixture {
    rows: Vec<BenchmarkRow>,
    lorenz_seconds: f64,
}

fn benchmark() -> Fixture {
    let protocol = Protocol::default();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let lorenz = generate("Lorenz");
    let start = Instant::now();
    let lorenz_row = single.install(|| evaluate_series(&lorenz, &protocol));
    let lorenz_seconds = start.elapsed().as_secs_f64();
    let others: Vec<TimeSeries> = SYSTEMS[1..].iter().map(|s| generate(s)).collect();
    let mut rows = vec![lorenz_row];
    rows.extend(run_benchmark(&others, &protocol));
    Fixture { rows, lorenz_seconds }
}

fn criterion_1(f: &Fixture) -> Outcome {
    let s = f.rows[0].score(Method::SparseKf);
    let pass = s.smape <= 0.1 && s.hausdorff <= 0.1 && f.lorenz_seconds <= 600.0;
    let mut o = Outcome::new(
        pass,
        format!(
            "SparseKF smape={:.4} (<= 0.1), rollout hd={:.4} (<= 0.1), single-thread wall={:.0}s (<= 600)",
            s.smape, s.hausdorff, f.lorenz_seconds
        ),
    );
    if let Some(cv) = &f.rows[0].cv {
        o.details.push(format!(
            "cv grid {:?} mean smape {:?} selected lambda2={}",
            cv.grid, cv.mean_smapes, cv.selected_lambda2
        ));
    }
    o
}

fn criterion_2(f: &Fixture) -> Outcome {
    let sparse = f.rows[0].score(Method::SparseKf).nnz_alpha.unwrap_or(0);
    let regular = f.rows[0].score(Method::RegularKf).nnz_alpha.unwrap_or(0);
    Outcome::new(
        (1..=6).contains(&sparse) && regular >= 15,
        format!("Lorenz SparseKF nnz={sparse} (in 1..=6), RegularKF nnz={regular} (>= 15)"),
    )
}

fn criterion_3(f: &Fixture) -> Outcome {
    let m = mean_smapes(&f.rows);
    let (rbf, regular, sparse) = (m[0], m[2], m[3]);
    let mut o = Outcome::new(
        sparse < regular && regular < rbf,
        format!("mean smape SparseKF={sparse:.4} < RegularKF={regular:.4} < RBF={rbf:.4}"),
    );
    o.details = f.rows.iter().map(score_line).collect();
    o
}

fn criterion_4() -> Outcome {
    const LAMBDA1: f64 = 0.05;
    let (mut total, mut good) = (0, 0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = DMatrix::from_fn(20, 6, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0));
        let ds = DelayDataset::from_parts(x.clone(), y.clone(), 2).unwrap();
        let params = feasible_init(&ds, seed, LAMBDA1, 20).unwrap();
        let c = sample(&mut rng, 20, 10).into_vec();
        let (xc, yc) = (x.select_rows(&c), y.select_rows(&c));
        let loss = |p: &KernelParams| rho(p, &x, &y, &xc, &yc, LAMBDA1).unwrap();
        let grad = grad_loss(&params, &x, &y, &xc, &yc, LAMBDA1).unwrap();
        for k in sample(&mut rng, NUM_PARAMS, 10) {
            let idx = ParamIndex::from_flat(k).unwrap();
            let v = params.get(idx).unwrap();
            let h = 1e-5 * v.abs().max(1.0);
            let (mut up, mut down) = (params.clone(), params.clone());
            up.set(idx, v + h).unwrap();
            down.set(idx, v - h).unwrap();
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            let analytic = grad.get(idx);
            let scale = analytic.abs().max(numeric.abs());
            total += 1;
            if scale < 1e-8 || (analytic - numeric).abs() <= 1e-4 * scale {
                good += 1;
            }
        }
    }
    let ratio = good as f64 / total as f64;
    Outcome::new(
        ratio >= 0.95,
        format!("{good}/{total} sampled coordinates within 1e-4 relative ({:.1}% >= 95%)", 100.0 * ratio),
    )
}

fn psd_params(rng: &mut ChaCha8Rng) -> KernelParams {
    let mut p = KernelParams::zeros();
    for k in [1, 3, 4, 10] {
        p.alpha_mut()[k - 1] = rng.gen_range(0.5..1.0);
    }
    for t in p.theta_mut().iter_mut() {
        *t = rng.gen_range(0.5..1.5);
    }
    p
}

fn hausdorff_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let dist = |i: usize, j: usize| (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum::<f64>().sqrt();
    let mut h: f64 = 0.0;
    for i in 0..a.nrows() {
        h = h.max((0..b.nrows()).map(|j| dist(i, j)).fold(f64::INFINITY, f64::min));
    }
    for j in 0..b.nrows() {
        h = h.max((0..a.nrows()).map(|i| dist(i, j)).fold(f64::INFINITY, f64::min));
    }
    h
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for trial in 0..400u64 {
        let n = rng.gen_range(1..=6);
        let x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let params = if trial % 2 == 0 {
            psd_params(&mut rng)
        } else {
            let mut p = init_params(trial);
            for (i, a) in p.alpha_mut().iter_mut().enumerate() {
                if ![8, 11, 12, 18, 19].contains(&i) {
                    *a = 0.0;
                }
            }
            p
        };
        let mut a = gram(&params, &x).unwrap();
        let near_singular = a.clone().symmetric_eigen().eigenvalues.iter().any(|v| (v + 0.05).abs() < 1e-3);
        if near_singular {
            continue;
        }
        for i in 0..n {
            a[(i, i)] += 0.05;
        }
        let inv = a.try_inverse().unwrap();
        let oracle: f64 = (0..2).map(|j| (y.column(j).transpose() * &inv * y.column(j))[(0, 0)]).sum();
        let got = regularized_quadratic_form(&params, &x, &y, 0.05).unwrap();
        worst = worst.max((got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    let mut bitwise = true;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(200, 3, |_, _| rng.gen_range(-10.0..10.0));
        let b = DMatrix::from_fn(200, 3, |_, _| rng.gen_range(-10.0..10.0));
        bitwise &= hausdorff(&a, &b).unwrap().to_bits() == hausdorff_oracle(&a, &b).to_bits();
    }
    Outcome::new(
        worst <= 1e-10 && bitwise,
        format!("max qf relative error {worst:.2e} (<= 1e-10), hausdorff bitwise on 20 pairs of 200-point sets: {bitwise}"),
    )
}

fn random_theta(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..NUM_THETA).map(|_| rng.gen_range(0.5..1.5)).collect();
    t[3] = rng.gen_range(1..=4) as f64;
    t
}

fn criterion_6() -> Outcome {
    let mut checks: Vec<(String, bool)> = Vec::new();

    let mut sym_worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_theta(&mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for id in ElementalKernelId::all() {
            let (a, b) = (eval_elemental(id, &x, &y, &theta).unwrap(), eval_elemental(id, &y, &x, &theta).unwrap());
            sym_worst = sym_worst.max((a - b).abs() / (1.0 + a.abs()));
        }
    }
    checks.push((format!("symmetry worst {sym_worst:.1e} (<= 1e-12)"), sym_worst <= 1e-12));

    let listed = [1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 14, 15, 16, 17, 18, 21];
    let mut offenders = Vec::new();
    for k in listed {
        let id = ElementalKernelId::new(k).unwrap();
        let worst = (0..50u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta = random_theta(&mut rng);
                let x = DMatrix::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0));
                let g = gram(&KernelParams::single(id, &theta).unwrap(), &x).unwrap();
                g.symmetric_eigen().eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min);
        if worst < -1e-8 {
            offenders.push(format!("k{k} ({worst:.2e})"));
        }
    }
    checks.push((
        format!("PSD subset min eigenvalue >= -1e-8; violations: [{}]", offenders.join(", ")),
        offenders.is_empty(),
    ));

    let (mut lo, mut hi, mut scale_worst): (f64, f64, f64) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = psd_params(&mut rng);
        let xb = DMatrix::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0));
        let yb = DMatrix::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0));
        let c = sample(&mut rng, 20, 10).into_vec();
        let (xc, yc) = (xb.select_rows(&c), yb.select_rows(&c));
        let lambda1 = [0.0, 1e-3, 0.01, 0.05][seed as usize % 4];
        let r = rho(&params, &xb, &yb, &xc, &yc, lambda1).unwrap();
        (lo, hi) = (lo.min(r), hi.max(r));
        let s = rng.gen_range(0.1..10.0);
        let r2 = rho(&params, &xb, &(&yb * s), &xc, &(&yc * s), lambda1).unwrap();
        scale_worst = scale_worst.max((r - r2).abs() / r.abs().max(1.0));
    }
    checks.push((
        format!("rho range [{lo:.3e}, {hi:.6}] within [-1e-6, 1+1e-6]"),
        lo >= -1e-6 && hi <= 1.0 + 1e-6,
    ));
    checks.push((format!("rho scale invariance worst {scale_worst:.1e} (<= 1e-12)"), scale_worst <= 1e-12));

    let mut interp_worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(15, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(15, 3, |_, _| rng.gen_range(-1.0..1.0));
        let ds = DelayDataset::from_parts(x.clone(), y.clone(), 1).unwrap();
        let model = fit(&KernelParams::gaussian(0.3), &ds, 0.0).unwrap();
        let err = (model.predict(&x).unwrap() - &y).amax() / (1.0 + y.amax());
        interp_worst = interp_worst.max(err);
    }
    checks.push((format!("interpolation at lambda1=0 worst {interp_worst:.1e} (<= 1e-6)"), interp_worst <= 1e-6));

    let mut prox_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let (v, t) = (rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0));
        let obj = |z: f64| 0.5 * (z - v) * (z - v) + t * z.abs();
        let best = obj(soft_threshold(v, t));
        prox_ok &= (0..=2000).all(|i| best <= obj(-6.0 + 12.0 * i as f64 / 2000.0) + 1e-12);
    }
    checks.push(("soft-threshold beats every grid point".into(), prox_ok));

    let mut spec = find_system("lorenz").unwrap();
    spec.transient_skip = 0;
    let end_state = |dt: f64| -> Vec<f64> {
        let n = (1.0 / dt).round() as usize + 1;
        integrate_rk4(&spec, n, dt).unwrap().values().row(n - 1).iter().copied().collect()
    };
    let reference = end_state(1e-4);
    let err = |dt: f64| {
        end_state(dt)
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let ratio = err(0.004) / err(0.002);
    checks.push((format!("RK4 error ratio {ratio:.2} in [12, 20]"), (12.0..=20.0).contains(&ratio)));

    let failed = checks.iter().filter(|c| !c.1).count();
    let mut o = Outcome::new(failed == 0, format!("{} of {} invariant checks hold", checks.len() - failed, checks.len()));
    o.details = checks
        .into_iter()
        .map(|(d, ok)| format!("{} {d}", if ok { "ok  " } else { "FAIL" }))
        .collect();
    o
}

fn kflow(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(args)
        .current_dir(dir)
        .env("KFLOW_THREADS", "1")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_7() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let small = ["--epochs", "20", "--batch-size", "60", "--lambda2-grid", "0,0.01"];
    let mut ok = true;
    for d in &dirs {
        let p = d.path();
        ok &= kflow(&["generate", "--system", "lorenz", "--n", "400", "--out", "series.csv"], p);
        let mut train = vec!["train", "--input", "series.csv", "--out", "model.json", "--plot"];
        train.extend(small);
        ok &= kflow(&train, p);
        ok &= kflow(
            &["forecast", "--model", "model.json", "--input", "series.csv", "--mode", "rollout", "--steps", "50", "--out", "pred.csv", "--plot"],
            p,
        );
        std::fs::write(p.join("manifest.txt"), "series.csv\nrossler\n").unwrap();
        let mut bench = vec!["benchmark", "--manifest", "manifest.txt", "--out", "bench", "--n", "300"];
        bench.extend(small);
        ok &= kflow(&bench, p);
        ok &= kflow(&["train", "--input", "series.csv", "--config", "model.json", "--out", "replay.json"], p);
    }
    let files = [
        "series.csv",
        "model.json",
        "model.report.json",
        "model.loss.csv",
        "model.loss.svg",
        "pred.csv",
        "pred.scores.json",
        "pred.svg",
        "bench/report.json",
        "bench/report.csv",
        "bench/report.md",
        "bench/distribution.csv",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).ok();
        let b = std::fs::read(dirs[1].path().join(f)).ok();
        if a.is_none() || a != b {
            differing.push(f.to_string());
        }
    }
    let replay = std::fs::read(dirs[0].path().join("replay.json")).ok();
    let replay_matches = replay.is_some() && replay == std::fs::read(dirs[0].path().join("model.json")).ok();
    Outcome::new(
        ok && differing.is_empty() && replay_matches,
        format!(
            "{} artifacts compared across two runs, differing: {:?}; replay from embedded config identical: {replay_matches}; all commands succeeded: {ok}",
            files.len(),
            differing
        ),
    )
}

fn criterion_8() -> Outcome {
    let protocol = Protocol::default();
    let prepared = prepare(&generate("Lorenz"), protocol.tau, protocol.train_fraction).unwrap();
    let n = prepared.train.len();
    let nnz = |lambda2: f64| train_with(&prepared.train, &protocol.train_config(n, lambda2)).unwrap().nnz_alpha;
    let (strong, weak) = (nnz(1.0), nnz(1e-3));
    Outcome::new(strong <= weak, format!("nnz(lambda2=1)={strong} <= nnz(lambda2=0.001)={weak}"))
}

fn main() {
    // Positional numbers select criteria; libtest flags such as --nocapture are ignored.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| selected.is_empty() || selected.contains(&id);
    let started = Instant::now();
    let mut results = Vec::new();
    if want(4) {
        results.push(report(4, "gradient suite", &criterion_4()));
    }
    if want(5) {
        results.push(report(5, "oracle equivalence", &criterion_5()));
    }
    if want(6) {
        results.push(report(6, "invariant suite", &criterion_6()));
    }
    if want(7) {
        results.push(report(7, "determinism", &criterion_7()));
    }
    if want(8) {
        results.push(report(8, "monotone sparsity", &criterion_8()));
    }
    if want(1) || want(2) || want(3) {
        let fixture = benchmark();
        for (id, title, check) in [
            (1, "Lorenz end-to-end", criterion_1 as fn(&Fixture) -> Outcome),
            (2, "sparsity", criterion_2),
            (3, "ordering", criterion_3),
        ] {
            if want(id) {
                results.push(report(id, title, &check(&fixture)));
            }
        }
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed ({:.0}s)",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
