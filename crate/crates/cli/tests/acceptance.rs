//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdlab::analytic::{self, PolicyEvalProblem};
use tdlab::bound_calculus;
use tdlab::experiment_harness::{self, GammaSamples};
use tdlab::feature_space::{self, FeatureMap};
use tdlab::markov::{self, MarkovChain};
use tdlab::schedule::{ScheduleKind, StepSchedule};
use tdlab::{rng, td_dynamics};
use tdlab_cli::config::{Loaded, ProblemConfigFile};

type Verdict = (bool, String);

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Loaded {
    let file = ProblemConfigFile::load(&configs_dir().join(name)).expect("config parses");
    Loaded::from_file(file).expect("config validates")
}

fn random_problem(seed: u64) -> PolicyEvalProblem {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = r.random_range(2..=8);
    let d = r.random_range(1..=s.min(4));
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            let w: Vec<f64> = (0..s).map(|_| r.random::<f64>() + 0.02).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect()
        })
        .collect();
    let chain = MarkovChain::from_rows(&rows).unwrap();
    let pi = markov::stationary_distribution(&chain).unwrap();
    let gamma = r.random_range(0.05..0.95);
    let raw = FeatureMap::new(DMatrix::from_fn(s, d, |_, _| r.random_range(-1.0..1.0))).unwrap();
    let target = feature_space::feature_threshold(gamma) * r.random_range(0.1..0.98);
    let scale = target / feature_space::lambda_m(&raw, &pi).unwrap();
    let rewards = DVector::from_fn(s, |_, _| r.random_range(-2.0..2.0));
    PolicyEvalProblem::new(chain, rewards, gamma, raw.scaled(scale).unwrap()).unwrap()
}

fn tabular_problem() -> PolicyEvalProblem {
    let chain = MarkovChain::from_rows(&[vec![0.3, 0.4, 0.3], vec![0.2, 0.5, 0.3], vec![0.6, 0.2, 0.2]]).unwrap();
    let pi = markov::stationary_distribution(&chain).unwrap();
    let id = FeatureMap::new(DMatrix::identity(3, 3)).unwrap();
    let gamma = 0.5;
    let scale = 0.9 * feature_space::feature_threshold(gamma) / feature_space::lambda_m(&id, &pi).unwrap();
    PolicyEvalProblem::new(chain, DVector::from_vec(vec![1.0, -0.5, 2.0]), gamma, id.scaled(scale).unwrap()).unwrap()
}

fn all_problems() -> Vec<(String, PolicyEvalProblem)> {
    let mut out: Vec<(String, PolicyEvalProblem)> =
        (0..20).map(|s| (format!("random #{s}"), random_problem(s))).collect();
    out.push(("reference".into(), load("reference.json").problem));
    out.push(("scalar".into(), load("scalar.json").problem));
    out.push(("tabular".into(), tabular_problem()));
    out
}

fn criterion_1() -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..20 {
        let p = random_problem(seed);
        let alpha = analytic::contraction_factor(&p).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1_000 + seed);
        for _ in 0..10_000 {
            let scale = 10f64.powf(r.random_range(-3.0..3.0));
            let x = DVector::from_fn(p.dim(), |_, _| r.random_range(-1.0..1.0) * scale);
            let z = DVector::from_fn(p.dim(), |_, _| r.random_range(-1.0..1.0) * scale);
            let lhs = (p.mean_field(&x) - p.mean_field(&z)).norm();
            worst = worst.max(lhs - alpha * (&x - &z).norm());
        }
    }
    (worst <= 1e-9, format!("max(|T x - T z| - alpha |x - z|) = {worst:.3e} over 2e5 pairs"))
}

fn criterion_2() -> Verdict {
    let mut worst_mf = 0.0f64;
    let mut worst_pb = 0.0f64;
    for (_, p) in all_problems() {
        let x = analytic::fixed_point(&p).unwrap();
        worst_mf = worst_mf.max((p.mean_field(&x) - &x).norm());
        let v = p.features().matrix() * &x;
        let pv = feature_space::project_d(&p.bellman(&v), p.features(), p.stationary()).unwrap();
        worst_pb = worst_pb.max((&v - pv).norm());
    }
    let tab = tabular_problem();
    let x = analytic::fixed_point(&tab).unwrap();
    let gap = (tab.features().matrix() * x - analytic::exact_value_function(&tab).unwrap()).norm();
    (
        worst_mf <= 1e-8 && worst_pb <= 1e-8 && gap <= 1e-8,
        format!("mean-field residual {worst_mf:.2e}, projected Bellman {worst_pb:.2e}, tabular gap {gap:.2e}"),
    )
}

fn criterion_3() -> Verdict {
    let mut worst = 0.0f64;
    let mut anchors_zero = true;
    for (_, p) in all_problems() {
        let sol = analytic::poisson_solve(&p, 0).unwrap();
        worst = worst.max(sol.u_residual).max(sol.w_residual);
        anchors_zero &= sol.u[0].iter().all(|v| *v == 0.0) && sol.w[0].iter().all(|v| *v == 0.0);
    }
    let chain = MarkovChain::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.3, 0.3, 0.4]]).unwrap();
    let features = FeatureMap::new(DMatrix::from_row_slice(3, 2, &[0.3, 0.1, -0.2, 0.25, 0.1, -0.3])).unwrap();
    let p = PolicyEvalProblem::new(chain, DVector::from_vec(vec![1.0, -0.4, 0.6]), 0.6, features).unwrap();
    let i0 = 2;
    let sol = analytic::poisson_solve(&p, i0).unwrap();
    let (s, d) = (p.n_states(), p.dim());
    let mut g = DMatrix::zeros(s, d + d * d);
    for i in 0..s {
        let (f1, f2) = (p.f1(i), p.f2(i));
        for a in 0..d {
            g[(i, a)] = f1[a];
            for b in 0..d {
                g[(i, d + a * d + b)] = f2[(a, b)];
            }
        }
    }
    let means = p.stationary().pi().transpose() * &g;
    for i in 0..s {
        for c in 0..g.ncols() {
            g[(i, c)] -= means[c];
        }
    }
    let h = markov::expected_hitting_sums(p.chain(), i0, &g, 100_000, &mut rng::stream(33, 0)).unwrap();
    let mut worst_z = 0.0f64;
    for i in 0..s {
        for a in 0..d {
            let z = (h.mean[(i, a)] - sol.u[i][a]).abs() / h.std_err[(i, a)].max(1e-300);
            worst_z = worst_z.max(z);
            for b in 0..d {
                let col = d + a * d + b;
                let z = (h.mean[(i, col)] - sol.w[i][(a, b)]).abs() / h.std_err[(i, col)].max(1e-300);
                worst_z = worst_z.max(z);
            }
        }
    }
    (
        worst <= 1e-8 && anchors_zero && worst_z <= 3.0,
        format!("max residual {worst:.2e}, anchors zero: {anchors_zero}, regenerative max z-score {worst_z:.2}"),
    )
}

fn criterion_4() -> Verdict {
    let l = load("scalar.json");
    let c = &l.solution.constants;
    let x = l.solution.x_star[0];
    let expected_alpha = (1.0f64 - 0.25 * (1.0 - 0.25 * 2.25)).sqrt();
    let (a, _) = l.problem.mean_field_affine();
    let slope = a[(0, 0)];
    let ok = (x - 4.0).abs() <= 1e-12
        && (c.alpha - expected_alpha).abs() <= 1e-6
        && (c.alpha - 0.94373).abs() <= 1e-5
        && (slope - 0.875).abs() <= 1e-12
        && slope <= c.alpha
        && [c.u_max, c.w_max, c.c1, c.c2, c.c3].iter().all(|v| *v == 0.0);
    (
        ok,
        format!(
            "x* = {x}, alpha = {:.6}, slope = {slope}, U_max = {}, W_max = {}, c1 = {}, c2 = {}, c3 = {}",
            c.alpha, c.u_max, c.w_max, c.c1, c.c2, c.c3
        ),
    )
}

fn m_grid(n0: usize, upto: usize) -> Vec<usize> {
    let mut out = vec![n0, n0 + 1];
    let mut m = (n0 + 1) as f64;
    while (m as usize) < upto {
        m *= 1.3;
        out.push((m as usize).min(upto));
    }
    out.dedup();
    out
}

fn criterion_5() -> Verdict {
    let reference_alpha = load("reference.json").solution.constants.alpha;
    let schedules = vec![
        StepSchedule::harmonic(0.5).unwrap(),
        StepSchedule::harmonic(0.99).unwrap(),
        StepSchedule::new(ScheduleKind::Harmonic, 3.0, 1.0, 3.0, 3).unwrap(),
        StepSchedule::polynomial(0.9, 0.6).unwrap(),
        StepSchedule::polynomial(0.5, 0.51).unwrap(),
    ];
    let mut worst_tel = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for h in &schedules {
        for n0 in [h.valid_from().max(1), 10, 100] {
            for m in m_grid(n0, 10_000) {
                worst_tel = worst_tel.max(bound_calculus::telescoping_residual(h, n0, m));
                let (lhs, rhs) = bound_calculus::step_weight_domination(h, n0, m);
                worst_ratio = worst_ratio.max(lhs / rhs);
            }
        }
    }
    let mut worst_b4 = 0.0f64;
    for alpha in [0.5, 0.9, reference_alpha] {
        let d1 = 1.5 / (1.0 - alpha);
        let valid_from = d1.floor() as usize;
        let h = StepSchedule::new(ScheduleKind::Harmonic, d1, 1.0, d1, valid_from).unwrap();
        for n0 in [valid_from.max(1), valid_from + 10, 100.max(valid_from)] {
            for (lhs, rhs) in bound_calculus::rate_domination(&h, alpha, n0, 10_000) {
                worst_b4 = worst_b4.max(lhs / rhs);
            }
        }
    }
    (
        worst_tel <= 1e-12 && worst_ratio <= 1.0 && worst_b4 <= 1.0 + 1e-12,
        format!(
            "telescoping residual {worst_tel:.2e}, max a(k)chi/(gamma2 beta) = {worst_ratio:.4}, max rate domination ratio = {worst_b4:.4}"
        ),
    )
}

fn criterion_6() -> Verdict {
    let l = load("reference.json");
    let x = &l.solution.x_star + DVector::from_vec(vec![0.7, -0.4]);
    let moments = td_dynamics::conditional_noise_moments(&l.problem, &l.solution, &x, 100_000, &mut rng::stream(6, 0));
    let worst = moments
        .iter()
        .map(|m| m.m_x.max_z_score().max(m.u_tilde.max_z_score()).max(m.w_tilde_x.max_z_score()))
        .fold(0.0, f64::max);
    (worst <= 3.0, format!("max |mean| / std_err over states and terms = {worst:.2}"))
}

fn criterion_7() -> Verdict {
    let l = load("reference.json");
    let cfg = l.file.experiment();
    let ok_shape = cfg.n0 == 100 && cfg.horizon == 10_000 && cfg.n_trajectories == 2000 && cfg.d_const.is_none();
    let r = experiment_harness::run_alltime_experiment(&l.problem, &l.solution, &l.schedule, &cfg).unwrap();
    let emp = r.empirical_alltime_prob;
    let theory = r.theoretical_lower_bound;
    let consistent = theory.is_some_and(|t| emp.estimate >= t - 2.0 * emp.half_width);
    let by_delta: Vec<u64> = r.grid.iter().filter(|g| g.epsilon == cfg.epsilon).map(|g| g.violations).collect();
    let monotone = by_delta.len() == 5 && by_delta.windows(2).all(|w| w[1] <= w[0]);
    (
        ok_shape && consistent && monotone,
        format!(
            "empirical {:.4} (half-width {:.4}) vs theoretical {:?} with fitted D = {:?}; violations by delta {:?}",
            emp.estimate, emp.half_width, theory, r.d_const_used, by_delta
        ),
    )
}

fn criterion_8() -> Verdict {
    let l = load("reference.json");
    let mut cfg = l.file.experiment();
    cfg.horizon = 100_000;
    cfg.n_trajectories = 100;
    let c = experiment_harness::convergence_diagnostics(&l.problem, &l.solution, &l.schedule, &cfg).unwrap();
    let at = |m: usize| c.checkpoints.iter().find(|q| q.m == m).map(|q| q.median).unwrap();
    let (early, late) = (at(1_000), at(100_000));
    (
        l.schedule.is_harmonic() && early >= 3.0 * late,
        format!(
            "median error {early:.5} at n = 1e3, {late:.5} at n = 1e5 (ratio {:.2}), log-log slope {:?}",
            early / late,
            c.log_log_slope
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tdlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("OUTPUT_DIR")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Verdict {
    let config = configs_dir().join("reference.json");
    let config = config.to_str().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("jobs1"), tmp.path().join("jobs8"));
    let base = ["experiment", config, "--horizon", "3000", "--seed", "99"];
    let ok_a = run_cli(&[&base[..], &["--jobs", "1"]].concat(), &a);
    let ok_b = run_cli(&[&base[..], &["--jobs", "8"]].concat(), &b);
    if !(ok_a && ok_b) {
        return (false, "experiment command failed".into());
    }
    let (fa, fb) = (dir_contents(&a), dir_contents(&b));
    let (s1, s2) = (tmp.path().join("solve1"), tmp.path().join("solve2"));
    let solve_same = run_cli(&["solve", config], &s1) && run_cli(&["solve", config], &s2) && dir_contents(&s1) == dir_contents(&s2);
    (
        fa == fb && fa.len() == 3 && solve_same,
        format!(
            "{} experiment files identical across --jobs 1/8: {}; solve rerun identical: {solve_same}",
            fa.len(),
            fa == fb
        ),
    )
}

fn criterion_10() -> Verdict {
    // Gamma_m with P(Gamma_m > delta) = min(1, 2d exp(-2 delta^2 m)), i.e. beta_{n0}(m) = 1/m.
    let dim = 2;
    let true_d = 2.0;
    let schedule = StepSchedule::new(ScheduleKind::Harmonic, 1.0, 1.0, 1.0, 1).unwrap();
    let steps = vec![200, 400, 800, 1600];
    let mut r = rng::stream(10, 0);
    let samples = steps
        .iter()
        .map(|&m| {
            let beta = schedule.beta(100, m);
            (0..1_000_000)
                .map(|_| {
                    let e: f64 = -(1.0 - r.random::<f64>()).ln();
                    (beta / true_d * ((2.0 * dim as f64).ln() + e)).sqrt()
                })
                .collect()
        })
        .collect();
    let gs = GammaSamples { n0: 100, steps, samples };
    match experiment_harness::fit_d(&gs, &[0.05, 0.06, 0.07], &schedule, dim) {
        Ok(fit) => {
            let rel = (fit.d_lsq - true_d).abs() / true_d;
            (rel <= 0.05, format!("fitted D = {:.4} (relative error {:.2}%) from {} points", fit.d_lsq, rel * 100.0, fit.points.len()))
        }
        Err(e) => (false, format!("fit failed: {e}")),
    }
}

fn main() {
    let criteria: Vec<(u32, &str, f64, fn() -> Verdict)> = vec![
        (1, "contraction oracle", 10.0, criterion_1),
        (2, "fixed-point round trip", 1.0, criterion_2),
        (3, "Poisson solutions", 30.0, criterion_3),
        (4, "scalar ground truth", 1.0, criterion_4),
        (5, "step-size calculus", 5.0, criterion_5),
        (6, "martingale zero mean", 30.0, criterion_6),
        (7, "all-time bound consistency", 300.0, criterion_7),
        (8, "convergence sanity", 300.0, criterion_8),
        (9, "determinism across --jobs", 60.0, criterion_9),
        (10, "fit-D round trip", 10.0, criterion_10),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let secs = start.elapsed().as_secs_f64();
        let in_budget = secs <= budget;
        let pass = pass && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id:>2} ({name}): {detail} [{secs:.2} s of {budget} s{}]",
            if pass { "PASS" } else { "FAIL" },
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
