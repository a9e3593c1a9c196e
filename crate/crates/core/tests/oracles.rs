use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdlab::analytic::{self, AnalyticSolution, PolicyEvalProblem};
use tdlab::bound_calculus::{self, BoundQuery, Horizon, PInitSource};
use tdlab::feature_space::{self, FeatureMap};
use tdlab::markov::{self, MarkovChain};
use tdlab::schedule::{ScheduleKind, StepSchedule};
use tdlab::td_dynamics::{self, RunSpec};
use tdlab::rng;

fn random_problem(seed: u64) -> PolicyEvalProblem {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = r.random_range(2..=6);
    let d = r.random_range(1..=s.min(3));
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            let w: Vec<f64> = (0..s).map(|_| r.random::<f64>() + 0.05).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect()
        })
        .collect();
    let chain = MarkovChain::from_rows(&rows).unwrap();
    let pi = markov::stationary_distribution(&chain).unwrap();
    let gamma = r.random_range(0.1..0.9);
    let raw = FeatureMap::new(DMatrix::from_fn(s, d, |_, _| r.random_range(-1.0..1.0))).unwrap();
    let target = feature_space::feature_threshold(gamma) * r.random_range(0.2..0.95);
    let scale = target / feature_space::lambda_m(&raw, &pi).unwrap();
    let rewards = DVector::from_fn(s, |_, _| r.random_range(-1.0..1.0));
    PolicyEvalProblem::new(chain, rewards, gamma, raw.scaled(scale).unwrap()).unwrap()
}

#[test]
fn mean_field_contracts_with_alpha() {
    for seed in 0..10 {
        let p = random_problem(seed);
        let alpha = analytic::contraction_factor(&p).unwrap();
        assert!(alpha < 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..500 {
            let x = DVector::from_fn(p.dim(), |_, _| r.random_range(-10.0..10.0));
            let z = DVector::from_fn(p.dim(), |_, _| r.random_range(-10.0..10.0));
            let lhs = (p.mean_field(&x) - p.mean_field(&z)).norm();
            assert!(lhs <= alpha * (&x - &z).norm() + 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn fixed_point_and_poisson_residuals() {
    for seed in 0..10 {
        let p = random_problem(seed);
        let sol = AnalyticSolution::compute(&p, 0).unwrap();
        assert!(sol.residuals.mean_field <= 1e-8);
        assert!(sol.residuals.projected_bellman <= 1e-8);
        assert!(sol.residuals.poisson_u <= 1e-8 && sol.residuals.poisson_w <= 1e-8);
        assert!(sol.poisson.u[0].iter().all(|v| *v == 0.0));
        assert!(sol.poisson.w[0].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn poisson_matches_regenerative_sums() {
    let chain = MarkovChain::from_rows(&[
        vec![0.2, 0.5, 0.3],
        vec![0.6, 0.1, 0.3],
        vec![0.3, 0.3, 0.4],
    ])
    .unwrap();
    let features = FeatureMap::new(DMatrix::from_row_slice(3, 2, &[0.3, 0.1, -0.2, 0.25, 0.1, -0.3])).unwrap();
    let p = PolicyEvalProblem::new(chain, DVector::from_vec(vec![1.0, -0.4, 0.6]), 0.6, features).unwrap();
    let i0 = 1;
    let sol = AnalyticSolution::compute(&p, i0).unwrap();
    let (s, d) = (p.n_states(), p.dim());
    let pi = p.stationary().pi();
    let mut g = DMatrix::zeros(s, d + d * d);
    for i in 0..s {
        let f1 = p.f1(i);
        let f2 = p.f2(i);
        for c in 0..d {
            g[(i, c)] = f1[c];
            for c2 in 0..d {
                g[(i, d + c * d + c2)] = f2[(c, c2)];
            }
        }
    }
    let means = pi.transpose() * &g;
    for i in 0..s {
        for c in 0..g.ncols() {
            g[(i, c)] -= means[c];
        }
    }
    let mut r = rng::stream(5, 0);
    let h = markov::expected_hitting_sums(p.chain(), i0, &g, 20_000, &mut r).unwrap();
    for i in 0..s {
        for c in 0..d {
            let diff = (h.mean[(i, c)] - sol.poisson.u[i][c]).abs();
            assert!(diff <= 4.0 * h.std_err[(i, c)] + 1e-12, "U({i})[{c}]");
        }
        for a in 0..d {
            for b in 0..d {
                let col = d + a * d + b;
                let diff = (h.mean[(i, col)] - sol.poisson.w[i][(a, b)]).abs();
                assert!(diff <= 4.0 * h.std_err[(i, col)] + 1e-12, "W({i})[{a},{b}]");
            }
        }
    }
}

#[test]
fn noise_decomposition_reconstructs_every_step() {
    let p = random_problem(3);
    let sol = AnalyticSolution::compute(&p, 0).unwrap();
    let h = StepSchedule::harmonic(0.9).unwrap();
    let spec = RunSpec {
        n0: 5,
        horizon: 2_000,
        initial_x: DVector::zeros(p.dim()),
        initial_state: 0,
    };
    let rec = td_dynamics::run_online(&p, &sol, &h, &spec, &mut rng::stream(1, 0), true).unwrap();
    let log = rec.noise_log.unwrap();
    assert_eq!(log.len(), 1_995);
    assert!(log.iter().all(|n| n.reconstruction_residual <= 1e-10));
    // Martingale differences average out along the path.
    let mean_m: f64 = log.iter().map(|n| n.tau1.norm() / h.a(n.n)).sum::<f64>() / log.len() as f64;
    assert!(mean_m.is_finite());
}

#[test]
fn martingale_terms_have_zero_conditional_mean() {
    let p = random_problem(7);
    let sol = AnalyticSolution::compute(&p, 0).unwrap();
    let x = &sol.x_star + DVector::from_element(p.dim(), 0.5);
    let moments = td_dynamics::conditional_noise_moments(&p, &sol, &x, 20_000, &mut rng::stream(2, 0));
    for m in moments {
        assert!(m.m_x.max_z_score() < 4.5, "state {}", m.state);
        assert!(m.u_tilde.max_z_score() < 4.5, "state {}", m.state);
        assert!(m.w_tilde_x.max_z_score() < 4.5, "state {}", m.state);
    }
}

#[test]
fn deterministic_iterates_contract_towards_fixed_point() {
    let p = random_problem(11);
    let sol = AnalyticSolution::compute(&p, 0).unwrap();
    let alpha = sol.constants.alpha;
    let h = StepSchedule::harmonic(0.9).unwrap();
    let z0 = DVector::from_element(p.dim(), 3.0);
    let zs = td_dynamics::run_deterministic(&p, &h, 1, 5_000, &z0).unwrap();
    let e0 = (&z0 - &sol.x_star).norm();
    for (k, z) in zs.iter().enumerate() {
        let m = 1 + k;
        let bound = h.psi(m, 1, alpha) * e0;
        assert!((z - &sol.x_star).norm() <= bound * (1.0 + 1e-9) + 1e-12);
    }
}

fn reference_constants() -> tdlab::ConstantsBundle {
    let p = random_problem(2);
    AnalyticSolution::compute(&p, 0).unwrap().constants
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_monotone_in_m_epsilon_delta(
        eps in 0.01f64..1.0,
        delta in 0.01f64..1.0,
        bump in 0.0f64..0.5,
    ) {
        let c = reference_constants();
        let h = StepSchedule::polynomial(0.5, 0.7).unwrap();
        let n0 = bound_calculus::check_n0(&c, &h, 1).unwrap().smallest_feasible.unwrap();
        let base = bound_calculus::radius_values(eps, delta, n0, n0 + 300, &c, &h).unwrap();
        prop_assert!(base.windows(2).all(|w| w[1] <= w[0]));
        let e2 = (eps + bump).min(1.0);
        let d2 = (delta + bump).min(1.0);
        let more_eps = bound_calculus::radius_values(e2, delta, n0, n0 + 300, &c, &h).unwrap();
        let more_delta = bound_calculus::radius_values(eps, d2, n0, n0 + 300, &c, &h).unwrap();
        for k in 0..base.len() {
            prop_assert!(more_eps[k] >= base[k]);
            prop_assert!(more_delta[k] >= base[k]);
        }
    }

    #[test]
    fn tail_monotone_in_n0_and_d(d_const in 0.5f64..20.0, delta in 0.05f64..1.0, extra in 1usize..50) {
        let c = reference_constants();
        let h = StepSchedule::polynomial(0.5, 0.7).unwrap();
        let n0 = bound_calculus::check_n0(&c, &h, 1).unwrap().smallest_feasible.unwrap();
        let q = |n0: usize, d: f64| BoundQuery::new(0.5, delta, n0, Horizon::Infinite, d, 0.0, PInitSource::UserBound, &c, &h).unwrap();
        let base = bound_calculus::tail_probability(&q(n0, d_const), &c, &h).unwrap().tail_sum;
        let later = bound_calculus::tail_probability(&q(n0 + extra, d_const), &c, &h).unwrap().tail_sum;
        let bigger_d = bound_calculus::tail_probability(&q(n0, d_const * 1.5), &c, &h).unwrap().tail_sum;
        prop_assert!(later <= base * (1.0 + 1e-12));
        prop_assert!(bigger_d <= base * (1.0 + 1e-12));
    }

    #[test]
    fn telescoping_identity_holds(d1 in 0.05f64..0.99, n0 in 1usize..50, len in 1usize..2000) {
        let h = StepSchedule::harmonic(d1).unwrap();
        prop_assert!(bound_calculus::telescoping_residual(&h, n0, n0 + len) <= 1e-12);
    }

    #[test]
    fn schedule_table_matches_analytic(d3 in 0.1f64..0.99, d2 in 0.3f64..1.0) {
        let poly = StepSchedule::polynomial(d3, d2).unwrap();
        let values: Vec<f64> = (0..500).map(|n| poly.a(n)).collect();
        let table = StepSchedule::new(ScheduleKind::Table { values }, d3, d2, d3, 0).unwrap();
        for (k, n) in [(0usize, 10usize), (5, 300), (100, 499)] {
            prop_assert!((table.chi(n, k) - poly.chi(n, k)).abs() <= 1e-14);
            prop_assert!((table.b(k, n as i64) - poly.b(k, n as i64)).abs() <= 1e-12);
        }
    }
}
