//! Tour construction and improvement with a trained model: greedy rollout,
//! beam search, and re-construction (RC) of random sub-paths, optionally
//! many segments at once (PRC).

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::{build_decoder_input, next_node_distribution};
use crate::encoder::{encode_normalized, NodeEmbeddings};
use crate::error::{GeldError, Result};
use crate::heuristics::optimal_open_path;
use crate::model::ModelParams;
use crate::numeric::Scalar;
use crate::tsp::{nearest_among, normalize_coords, path_length, MetricMode, Point, Tour, TspInstance};

/// Index of the largest probability; first one on ties.
fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Candidate distribution at one step. A single candidate is certain and
/// skips the model call.
fn step_distribution<T: Scalar>(
    params: &ModelParams<T>,
    emb: &NodeEmbeddings<T>,
    norm: &[Point],
    prev: usize,
    dest: usize,
    candidates: &[usize],
) -> Result<Vec<T>> {
    if candidates.len() == 1 {
        return Ok(vec![T::one()]);
    }
    let step = build_decoder_input(emb, prev, dest, candidates, norm)?;
    next_node_distribution(&step, &params.decoder, params.config.heads)
}

/// Greedy completion of a path that starts at `first`, must end at `dest`
/// and has to visit every node in `available`. Returns the visiting order
/// starting with `first`, excluding `dest` unless it is `first`.
pub(crate) fn greedy_path<T: Scalar>(
    params: &ModelParams<T>,
    emb: &NodeEmbeddings<T>,
    norm: &[Point],
    k_m: usize,
    first: usize,
    dest: usize,
    mut available: Vec<usize>,
) -> Result<Vec<usize>> {
    let mut path = Vec::with_capacity(available.len() + 1);
    path.push(first);
    let mut prev = first;
    while !available.is_empty() {
        let cands = nearest_among(norm, prev, &available, k_m)?;
        let p = step_distribution(params, emb, norm, prev, dest, &cands)?;
        let chosen = cands[argmax(&p)];
        let pos = available.iter().position(|&v| v == chosen).expect("candidate is available");
        available.swap_remove(pos);
        path.push(chosen);
        prev = chosen;
    }
    Ok(path)
}

fn prepare<T: Scalar>(inst: &TspInstance, params: &ModelParams<T>, k_m: usize) -> Result<(Vec<Point>, NodeEmbeddings<T>)> {
    if k_m == 0 {
        return Err(GeldError::Argument("k_m must be at least 1".into()));
    }
    let norm = normalize_coords(inst.coords())?;
    let emb = encode_normalized(&norm, params)?;
    Ok((norm, emb))
}

/// Starts at node 0 and repeatedly takes the most probable of the `k_m`
/// nearest unvisited nodes.
pub fn greedy_rollout<T: Scalar>(inst: &TspInstance, params: &ModelParams<T>, k_m: usize) -> Result<Tour> {
    let (norm, emb) = prepare(inst, params, k_m)?;
    let path = greedy_path(params, &emb, &norm, k_m, 0, 0, (1..inst.len()).collect())?;
    Tour::new(inst, path)
}

/// Partial tours kept by beam search.
#[derive(Clone, Debug, Default)]
pub struct BeamState {
    pub paths: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub available: Vec<Vec<usize>>,
}

struct Expansion {
    score: f64,
    beam: usize,
    prob: f64,
    pos: usize,
    node: usize,
}

fn expansion_order(a: &Expansion, b: &Expansion) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.beam.cmp(&b.beam))
        .then(b.prob.partial_cmp(&a.prob).unwrap_or(Ordering::Equal))
        .then(a.pos.cmp(&b.pos))
}

/// Keeps the `beam_width` prefixes with the highest cumulative log
/// probability and returns the shortest completed tour among them.
pub fn beam_search<T: Scalar>(
    inst: &TspInstance,
    params: &ModelParams<T>,
    beam_width: usize,
    k_m: usize,
) -> Result<Tour> {
    if beam_width == 0 {
        return Err(GeldError::Argument("beam width must be at least 1".into()));
    }
    let (norm, emb) = prepare(inst, params, k_m)?;
    let n = inst.len();
    let mut state = BeamState { paths: vec![vec![0]], log_probs: vec![0.0], available: vec![(1..n).collect()] };
    for _ in 1..n {
        let per_beam: Vec<Result<(Vec<usize>, Vec<T>)>> = state
            .paths
            .par_iter()
            .zip(&state.available)
            .map(|(path, avail)| {
                let prev = *path.last().expect("non-empty");
                let cands = nearest_among(&norm, prev, avail, k_m)?;
                let p = step_distribution(params, &emb, &norm, prev, 0, &cands)?;
                Ok((cands, p))
            })
            .collect();
        let mut expansions = Vec::new();
        for (b, r) in per_beam.into_iter().enumerate() {
            let (cands, p) = r?;
            for (pos, (&node, &prob)) in cands.iter().zip(&p).enumerate() {
                let prob = prob.as_f64();
                expansions.push(Expansion { score: state.log_probs[b] + prob.ln(), beam: b, prob, pos, node });
            }
        }
        expansions.sort_by(expansion_order);
        expansions.truncate(beam_width);
        let mut next = BeamState::default();
        for e in expansions {
            let mut path = state.paths[e.beam].clone();
            path.push(e.node);
            let mut avail = state.available[e.beam].clone();
            let at = avail.iter().position(|&v| v == e.node).expect("available");
            avail.swap_remove(at);
            next.paths.push(path);
            next.log_probs.push(e.score);
            next.available.push(avail);
        }
        state = next;
    }
    let mut best: Option<Tour> = None;
    for path in state.paths {
        let t = Tour::new(inst, path)?;
        if best.as_ref().is_none_or(|b| t.length() < b.length()) {
            best = Some(t);
        }
    }
    best.ok_or(GeldError::Exhausted)
}

/// One of the eight symmetries of the unit square.
pub fn augment8(norm_coords: &[Point], id: u8) -> Result<Vec<Point>> {
    let f = |p: &Point| -> Point {
        let (x, y) = (p[0], p[1]);
        match id {
            0 => [x, y],
            1 => [y, x],
            2 => [x, 1.0 - y],
            3 => [y, 1.0 - x],
            4 => [1.0 - x, y],
            5 => [1.0 - y, x],
            6 => [1.0 - x, 1.0 - y],
            _ => [1.0 - y, 1.0 - x],
        }
    };
    if id > 7 {
        return Err(GeldError::Argument(format!("augmentation id {id} outside 0..8")));
    }
    Ok(norm_coords.iter().map(f).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Clockwise,
    CounterClockwise,
}

/// One re-construction: which stretch of the tour to re-solve and how to
/// present it to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcPlan {
    /// Start position in the tour before the offset shift.
    pub start: usize,
    /// Number of nodes in the segment, endpoints included (≥ 4).
    pub len: usize,
    pub direction: Direction,
    /// Cyclic shift `n_ε` added to `start`.
    pub offset: usize,
    /// Symmetry id applied to the segment coordinates, `0..8`.
    pub augmentation: u8,
}

impl RcPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.len < 4 || self.len > n {
            return Err(GeldError::Argument(format!("segment of {} nodes in a tour of {n}", self.len)));
        }
        if self.augmentation > 7 {
            return Err(GeldError::Argument(format!("augmentation id {}", self.augmentation)));
        }
        Ok(())
    }

    /// Tour positions of the segment, in reading order.
    pub fn positions(&self, n: usize) -> Vec<usize> {
        let base = (self.start + self.offset) % n;
        (0..self.len)
            .map(|t| match self.direction {
                Direction::Clockwise => (base + t) % n,
                Direction::CounterClockwise => (base + n - t % n) % n,
            })
            .collect()
    }
}

/// Re-solves an open path with both endpoints fixed. `coords` are the
/// segment's normalised (and possibly augmented) coordinates; the answer is
/// a permutation of `0..len` beginning with 0 and ending with `len − 1`.
pub trait PathSolver: Sync {
    fn solve_path(&self, coords: &[Point]) -> Result<Vec<usize>>;
}

/// Greedy decoding of the segment with the model.
pub struct ModelPathSolver<'a, T> {
    pub params: &'a ModelParams<T>,
    pub k_m: usize,
}

impl<T: Scalar> PathSolver for ModelPathSolver<'_, T> {
    fn solve_path(&self, coords: &[Point]) -> Result<Vec<usize>> {
        let len = coords.len();
        let emb = encode_normalized(coords, self.params)?;
        let mut path = greedy_path(self.params, &emb, coords, self.k_m, 0, len - 1, (1..len - 1).collect())?;
        path.push(len - 1);
        Ok(path)
    }
}

/// Exhaustive open-path search; a drop-in replacement for the model on
/// segments of at most 12 nodes.
pub struct ExactPathSolver;

impl PathSolver for ExactPathSolver {
    fn solve_path(&self, coords: &[Point]) -> Result<Vec<usize>> {
        let sub = TspInstance::new("segment", coords.to_vec(), MetricMode::ContinuousEuclid)?;
        optimal_open_path(&sub)
    }
}

/// Positions and replacement nodes when the plan finds a shorter path.
fn propose<S: PathSolver + ?Sized>(
    inst: &TspInstance,
    order: &[usize],
    plan: &RcPlan,
    solver: &S,
) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
    let n = order.len();
    plan.validate(n)?;
    let positions = plan.positions(n);
    let nodes: Vec<usize> = positions.iter().map(|&p| order[p]).collect();
    let sub: Vec<Point> = nodes.iter().map(|&v| inst.coords()[v]).collect();
    let norm = match normalize_coords(&sub) {
        Ok(c) => c,
        // every node of the segment coincides: nothing to improve
        Err(GeldError::DegenerateInstance(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let coords = augment8(&norm, plan.augmentation)?;
    let local = solver.solve_path(&coords)?;
    if local.len() != nodes.len() || local[0] != 0 || local[local.len() - 1] != nodes.len() - 1 {
        return Err(GeldError::InvalidTour("sub-path solver broke the fixed endpoints".into()));
    }
    let new_nodes: Vec<usize> = local.iter().map(|&i| nodes[i]).collect();
    if path_length(inst, &new_nodes) < path_length(inst, &nodes) {
        Ok(Some((positions, new_nodes)))
    } else {
        Ok(None)
    }
}

/// One re-construction step. The tour is returned unchanged unless the
/// re-solved segment is strictly shorter.
pub fn rc_step<S: PathSolver + ?Sized>(inst: &TspInstance, tour: &Tour, plan: &RcPlan, solver: &S) -> Result<Tour> {
    let Some((positions, new_nodes)) = propose(inst, tour.order(), plan, solver)? else {
        return Ok(tour.clone());
    };
    let mut order = tour.order().to_vec();
    for (&p, &v) in positions.iter().zip(&new_nodes) {
        order[p] = v;
    }
    let out = Tour::new(inst, order)?;
    Ok(if out.length() < tour.length() { out } else { tour.clone() })
}

/// Disjoint segments covering the cycle from a random rotation, one node
/// apart, each of length uniform in `[4, min(max_len, n)]`.
pub fn tile_segments(n: usize, max_len: usize, direction: Direction, rng: &mut impl Rng) -> Vec<RcPlan> {
    let upper = max_len.min(n);
    if upper < 4 {
        return Vec::new();
    }
    let offset = rng.random_range(1..=n);
    let mut plans = Vec::new();
    let mut cursor = 0;
    while n - cursor >= 4 {
        let len = rng.random_range(4..=upper).min(n - cursor);
        let start = match direction {
            Direction::Clockwise => cursor,
            Direction::CounterClockwise => cursor + len - 1,
        };
        plans.push(RcPlan { start, len, direction, offset, augmentation: rng.random_range(0..8) });
        cursor += len + 1;
        if cursor >= n {
            break;
        }
    }
    plans
}

/// Parallel re-construction: each iteration tiles the tour into disjoint
/// segments, re-solves them all and applies every improvement. Reading
/// direction alternates with iteration parity. Length never increases.
pub fn prc<S: PathSolver + ?Sized>(
    inst: &TspInstance,
    tour: &Tour,
    solver: &S,
    iterations: usize,
    max_segment: usize,
    seed: u64,
) -> Result<Tour> {
    prc_observed(inst, tour, solver, iterations, max_segment, seed, |_, _| {})
}

/// [`prc`] that reports the current tour after every iteration.
pub fn prc_observed<S: PathSolver + ?Sized>(
    inst: &TspInstance,
    tour: &Tour,
    solver: &S,
    iterations: usize,
    max_segment: usize,
    seed: u64,
    mut on_iteration: impl FnMut(usize, &Tour),
) -> Result<Tour> {
    if iterations == 0 {
        return Err(GeldError::Argument("PRC needs at least one iteration".into()));
    }
    let n = inst.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = tour.clone();
    for it in 0..iterations {
        let direction = if it % 2 == 0 { Direction::Clockwise } else { Direction::CounterClockwise };
        let plans = tile_segments(n, max_segment, direction, &mut rng);
        let proposals: Vec<Result<Option<(Vec<usize>, Vec<usize>)>>> =
            plans.par_iter().map(|plan| propose(inst, cur.order(), plan, solver)).collect();
        let mut order = cur.order().to_vec();
        let mut changed = false;
        for p in proposals {
            if let Some((positions, nodes)) = p? {
                for (&pos, &v) in positions.iter().zip(&nodes) {
                    order[pos] = v;
                }
                changed = true;
            }
        }
        if changed {
            let next = Tour::new(inst, order)?;
            if next.length() < cur.length() {
                cur = next;
            }
        }
        on_iteration(it, &cur);
    }
    Ok(cur)
}

/// [`prc`] driven by the model's greedy decoder.
pub fn prc_with_model<T: Scalar>(
    inst: &TspInstance,
    tour: &Tour,
    params: &ModelParams<T>,
    k_m: usize,
    iterations: usize,
    seed: u64,
) -> Result<Tour> {
    let solver = ModelPathSolver { params, k_m };
    prc(inst, tour, &solver, iterations, k_m, seed)
}
