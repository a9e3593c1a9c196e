//! Finite irreducible aperiodic Markov chains.
//!
//! A [`MarkovChain`] is only constructed after the transition matrix has been
//! checked for stochasticity, irreducibility and aperiodicity. Stationary
//! analysis is a direct linear solve; regenerative hitting sums are estimated
//! by simulation and serve as an independent check on the Poisson solver.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Row sums must equal one to this tolerance. Nothing is renormalised.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct MarkovChain {
    p: DMatrix<f64>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl PartialEq for MarkovChain {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p
    }
}

impl MarkovChain {
    /// Validates `p` and builds the chain.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = p.shape();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(Error::Empty);
        }
        for i in 0..rows {
            for j in 0..cols {
                let v = p[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidEntry { row: i, col: j, value: v });
                }
            }
            let sum: f64 = p.row(i).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NotStochastic { row: i, sum });
            }
        }
        let adjacency = support(&p);
        if let Some(unreachable) = first_unreachable(&adjacency) {
            return Err(Error::NotIrreducible { unreachable });
        }
        let period = period(&adjacency);
        if period != 1 {
            return Err(Error::Periodic { period });
        }
        let samplers = (0..rows)
            .map(|i| {
                let row: Vec<f64> = p.row(i).iter().copied().collect();
                WeightedIndex::new(row).expect("validated stochastic row")
            })
            .collect();
        Ok(Self { p, samplers })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::from_rows(rows, "transition matrix row")?)
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }

    /// Draws the successor of `state`.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        self.samplers[state].sample(rng)
    }
}

/// Positive-entry digraph as adjacency lists.
fn support(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..p.nrows())
        .map(|i| (0..p.ncols()).filter(|&j| p[(i, j)] > 0.0).collect())
        .collect()
}

fn bfs_levels(adjacency: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adjacency.len()];
    level[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let next = level[u].unwrap() + 1;
        for &v in &adjacency[u] {
            if level[v].is_none() {
                level[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    level
}

/// Strong connectivity: every state reachable from 0 and reaching 0.
fn first_unreachable(adjacency: &[Vec<usize>]) -> Option<usize> {
    let n = adjacency.len();
    let mut reverse = vec![Vec::new(); n];
    for (u, succ) in adjacency.iter().enumerate() {
        for &v in succ {
            reverse[v].push(u);
        }
    }
    let forward = bfs_levels(adjacency, 0);
    let backward = bfs_levels(&reverse, 0);
    (0..n).find(|&i| forward[i].is_none() || backward[i].is_none())
}

/// Period of a strongly connected digraph: the gcd over all edges u -> v of
/// `level(u) + 1 - level(v)`, with levels from a BFS rooted anywhere.
fn period(adjacency: &[Vec<usize>]) -> usize {
    let level = bfs_levels(adjacency, 0);
    let mut g = 0usize;
    for (u, succ) in adjacency.iter().enumerate() {
        let lu = level[u].expect("strongly connected") as i64;
        for &v in succ {
            let lv = level[v].expect("strongly connected") as i64;
            g = gcd(g, (lu + 1 - lv).unsigned_abs() as usize);
        }
    }
    g
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The invariant distribution `pi` and its diagonal matrix `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pi: DVector<f64>,
}

impl StationaryDistribution {
    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi)
    }

    pub fn sqrt_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi.map(f64::sqrt))
    }

    /// `sum_i pi(i) g(i)` for a scalar per-state function.
    pub fn expect(&self, g: &DVector<f64>) -> f64 {
        self.pi.dot(g)
    }

    /// Draws a state from `pi`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(self.pi.iter().copied())
            .expect("positive stationary weights")
            .sample(rng)
    }
}

/// Solves `(P^T - I) pi = 0` with the last equation replaced by `sum pi = 1`.
pub fn stationary_distribution(chain: &MarkovChain) -> Result<StationaryDistribution> {
    let s = chain.n_states();
    let mut a = chain.matrix().transpose() - DMatrix::<f64>::identity(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    a.row_mut(s - 1).fill(1.0);
    rhs[s - 1] = 1.0;
    let pi = linalg::solve_vec_checked(&a, &rhs, "stationary distribution")?;
    if pi.iter().any(|&v| v <= 0.0) {
        return Err(Error::solver(
            "stationary distribution",
            "solution has non-positive entries",
        ));
    }
    let balance = (chain.matrix().transpose() * &pi - &pi).amax();
    if balance > 1e-10 {
        return Err(Error::solver(
            "stationary distribution",
            format!("balance residual {balance:e} exceeds 1e-10"),
        ));
    }
    Ok(StationaryDistribution { pi })
}

/// Simulates `length` states starting from `initial_state` (which is `Y_0`).
pub fn sample_path<R: Rng + ?Sized>(
    chain: &MarkovChain,
    initial_state: usize,
    length: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(initial_state < chain.n_states(), "initial state out of range");
    let mut path = Vec::with_capacity(length);
    if length == 0 {
        return path;
    }
    let mut y = initial_state;
    path.push(y);
    for _ in 1..length {
        y = chain.step(y, rng);
        path.push(y);
    }
    path
}

/// Monte Carlo estimate of `E_i[ sum_{m < tau} g(Y_m) ]` per start state `i`,
/// where `tau` is the first time `n > 0` with `Y_n = i0`.
#[derive(Debug, Clone)]
pub struct HittingSums {
    /// `s x k` sample means.
    pub mean: DMatrix<f64>,
    /// `s x k` standard errors of the means.
    pub std_err: DMatrix<f64>,
    pub cycles_per_state: usize,
}

/// `g` is `s x k`: one row of `k` function components per state.
pub fn expected_hitting_sums<R: Rng + ?Sized>(
    chain: &MarkovChain,
    i0: usize,
    g: &DMatrix<f64>,
    cycles_per_state: usize,
    rng: &mut R,
) -> Result<HittingSums> {
    let s = chain.n_states();
    if g.nrows() != s {
        return Err(Error::dims("hitting-sum integrand rows", s, g.nrows()));
    }
    if i0 >= s {
        return Err(Error::dims("anchor state", s, i0));
    }
    let k = g.ncols();
    let mut mean = DMatrix::zeros(s, k);
    let mut std_err = DMatrix::zeros(s, k);
    let n = cycles_per_state.max(2) as f64;
    for start in 0..s {
        let mut sum = DVector::<f64>::zeros(k);
        let mut sum_sq = DVector::<f64>::zeros(k);
        for _ in 0..cycles_per_state.max(2) {
            let mut acc = DVector::<f64>::zeros(k);
            let mut y = start;
            loop {
                acc += g.row(y).transpose();
                y = chain.step(y, rng);
                if y == i0 {
                    break;
                }
            }
            sum += &acc;
            sum_sq += acc.component_mul(&acc);
        }
        for c in 0..k {
            let m = sum[c] / n;
            let var = ((sum_sq[c] / n - m * m) * n / (n - 1.0)).max(0.0);
            mean[(start, c)] = m;
            std_err[(start, c)] = (var / n).sqrt();
        }
    }
    Ok(HittingSums {
        mean,
        std_err,
        cycles_per_state: cycles_per_state.max(2),
    })
}
