//! Classical baselines and exact reference solvers.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GeldError, Result};
use crate::tsp::{Tour, TspInstance};

/// Largest instance the exhaustive solvers accept.
pub const BRUTE_FORCE_MAX_N: usize = 10;

#[derive(Clone, Debug)]
pub struct HeuristicResult {
    pub tour: Tour,
    pub iterations_used: usize,
    pub wall_time: Duration,
}

struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed();
        #[cfg(target_arch = "wasm32")]
        Duration::ZERO
    }
}

/// Greedy chain to the nearest unvisited node, lower index on ties.
pub fn nearest_neighbor(inst: &TspInstance, start: usize) -> Result<Tour> {
    let n = inst.len();
    if start >= n {
        return Err(GeldError::Index { index: start, len: n });
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, &seen) in visited.iter().enumerate() {
            if !seen {
                let d = inst.dist(cur, j);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    Tour::new(inst, order)
}

/// First-improvement 2-opt. One iteration is one full sweep over all edge
/// pairs; stops at a local optimum or after `max_iters` sweeps.
pub fn two_opt(inst: &TspInstance, tour: &Tour, max_iters: usize) -> Result<HeuristicResult> {
    let started = Stopwatch::start();
    let mut t = tour.order().to_vec();
    let n = t.len();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut improved = false;
        for i in 0..n.saturating_sub(2) {
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b, c, d) = (t[i], t[i + 1], t[j], t[(j + 1) % n]);
                let delta = inst.dist(a, c) + inst.dist(b, d) - inst.dist(a, b) - inst.dist(c, d);
                if delta < -1e-10 {
                    t[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let out = Tour::new(inst, t)?;
    // floating-point drift across many reversals can leave a tie; never report worse
    let tour = if out.length() <= tour.length() { out } else { tour.clone() };
    Ok(HeuristicResult { tour, iterations_used: iterations, wall_time: started.elapsed() })
}

/// Nearest neighbour from node 0 followed by 2-opt.
pub fn nn_two_opt(inst: &TspInstance, max_iters: usize) -> Result<HeuristicResult> {
    let started = Stopwatch::start();
    let nn = nearest_neighbor(inst, 0)?;
    let mut r = two_opt(inst, &nn, max_iters)?;
    r.wall_time = started.elapsed();
    Ok(r)
}

/// Random insertion: nodes in a seeded random order, each inserted where it
/// lengthens the partial tour least. The first three nodes form the seed
/// triangle.
pub fn random_insertion(inst: &TspInstance, seed: u64) -> Result<Tour> {
    let n = inst.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tour: Vec<usize> = order[..3].to_vec();
    for &x in &order[3..] {
        let pos = cheapest_insertion(inst, &tour, x);
        tour.insert(pos + 1, x);
    }
    Tour::new(inst, tour)
}

/// Edge `(tour[p], tour[p+1])` whose replacement by a detour through `x`
/// costs least; lowest `p` on ties.
pub(crate) fn cheapest_insertion(inst: &TspInstance, tour: &[usize], x: usize) -> usize {
    let m = tour.len();
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for p in 0..m {
        let (a, b) = (tour[p], tour[(p + 1) % m]);
        let cost = inst.dist(a, x) + inst.dist(x, b) - inst.dist(a, b);
        if cost < best_cost {
            best_cost = cost;
            best = p;
        }
    }
    best
}

struct Search {
    n: usize,
    dist: Vec<f64>,
    /// Cheapest edge into each node; every node still to be entered costs
    /// at least this much.
    min_in: Vec<f64>,
    best_len: f64,
    best: Vec<usize>,
    path: Vec<usize>,
    used: Vec<bool>,
    /// Node the path must finish at: 0 for a cycle, `n − 1` for an open path.
    terminal: usize,
}

impl Search {
    fn new(inst: &TspInstance, terminal: usize, fixed: &[usize]) -> Self {
        let n = inst.len();
        let mut dist = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                dist[a * n + b] = inst.dist(a, b);
            }
        }
        let min_in = (0..n)
            .map(|j| (0..n).filter(|&k| k != j).map(|k| dist[k * n + j]).fold(f64::INFINITY, f64::min))
            .collect();
        let mut used = vec![false; n];
        for &f in fixed {
            used[f] = true;
        }
        Self { n, dist, min_in, best_len: f64::INFINITY, best: Vec::new(), path: vec![0], used, terminal }
    }

    fn dfs(&mut self, len: f64, remaining: usize, rest_bound: f64) {
        if len + rest_bound >= self.best_len {
            return;
        }
        let last = *self.path.last().expect("non-empty path");
        if remaining == 0 {
            let total = len + self.dist[last * self.n + self.terminal];
            if total < self.best_len {
                self.best_len = total;
                self.best = self.path.clone();
            }
            return;
        }
        for j in 0..self.n {
            if !self.used[j] {
                self.used[j] = true;
                self.path.push(j);
                self.dfs(len + self.dist[last * self.n + j], remaining - 1, rest_bound - self.min_in[j]);
                self.path.pop();
                self.used[j] = false;
            }
        }
    }

    fn run(&mut self, remaining: usize) {
        let rest: f64 = (0..self.n).filter(|&j| !self.used[j]).map(|j| self.min_in[j]).sum::<f64>()
            + self.min_in[self.terminal];
        self.dfs(0.0, remaining, rest);
    }
}

/// Exact optimum by depth-first enumeration of the cycles through node 0,
/// pruned with a cheapest-incoming-edge bound. `n ≤ 10`.
pub fn brute_force_optimal(inst: &TspInstance) -> Result<Tour> {
    let n = inst.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(GeldError::Precondition(format!("brute force needs n ≤ {BRUTE_FORCE_MAX_N}, got {n}")));
    }
    let mut s = Search::new(inst, 0, &[0]);
    s.run(n - 1);
    Tour::new(inst, s.best)
}

/// Shortest open path from node 0 to node `n−1` through all nodes of `inst`.
/// At most 10 interior nodes.
pub fn optimal_open_path(inst: &TspInstance) -> Result<Vec<usize>> {
    let n = inst.len();
    if n < 2 || n - 2 > BRUTE_FORCE_MAX_N {
        return Err(GeldError::Precondition(format!("open path search needs 2..={} nodes", BRUTE_FORCE_MAX_N + 2)));
    }
    let mut s = Search::new(inst, n - 1, &[0, n - 1]);
    s.run(n - 2);
    let mut path = s.best;
    path.push(n - 1);
    Ok(path)
}
