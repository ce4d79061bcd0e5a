//! Two-stage training: supervised learning on small labelled instances, then
//! self-improvement on growing random instances labelled by the model's own
//! beam search plus parallel re-construction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_logits_on_tape, step_rows};
use crate::encoder::encode_on_tape;
use crate::error::{GeldError, Result};
use crate::inference::{beam_search, greedy_rollout, prc_with_model, Direction};
use crate::io::generate::{generate_instances, Pattern};
use crate::model::vars::ModelVars;
use crate::model::ModelParams;
use crate::numeric::{Adam, Tape};
use crate::tsp::{assign_regions, distance_matrix, nearest_among, normalize_coords, Point, RegionAssignment, Tour, TspInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Candidate window and small-scale bound.
    pub k_m: usize,
    /// Largest instance size reached by the curriculum.
    pub n_max: usize,
    pub n_e1: usize,
    pub n_e2: usize,
    /// Instances generated per self-improvement epoch, and labelled
    /// small instances mixed into each inner iteration.
    pub n_bs_t: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub lr1: f64,
    pub lr2: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub t_max: usize,
    pub eps_gap: f64,
    pub t_imp: usize,
    pub beam_width: usize,
    pub prc_iterations: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale values.
    pub fn full() -> Self {
        Self {
            k_m: 100,
            n_max: 1000,
            n_e1: 50,
            n_e2: 50,
            n_bs_t: 64,
            batch: 64,
            lr1: 1e-4,
            lr2: 1e-5,
            lr_decay: 0.97,
            t_max: 5,
            eps_gap: 1e-3,
            t_imp: 3,
            beam_width: 16,
            prc_iterations: 1000,
            seed: 0,
        }
    }

    /// Values sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            k_m: 20,
            n_max: 100,
            n_e1: 4,
            n_e2: 20,
            n_bs_t: 16,
            batch: 32,
            lr1: 1e-3,
            lr2: 1e-4,
            lr_decay: 0.97,
            t_max: 5,
            eps_gap: 1e-3,
            t_imp: 3,
            beam_width: 4,
            prc_iterations: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_m >= self.n_max {
            return Err(GeldError::Argument(format!("k_m {} must be below n_max {}", self.k_m, self.n_max)));
        }
        if self.t_max == 0 || self.eps_gap.is_nan() || self.eps_gap <= 0.0 {
            return Err(GeldError::Argument("t_max must be ≥ 1 and eps_gap > 0".into()));
        }
        if self.batch == 0 || self.n_bs_t == 0 || self.beam_width == 0 || self.n_e2 == 0 {
            return Err(GeldError::Argument("batch sizes, beam width and n_e2 must be positive".into()));
        }
        Ok(())
    }
}

/// Instances with a label tour each.
#[derive(Clone, Debug, Default)]
pub struct LabeledBatch {
    pub instances: Vec<TspInstance>,
    pub labels: Vec<Tour>,
}

impl LabeledBatch {
    pub fn new(instances: Vec<TspInstance>, labels: Vec<Tour>) -> Result<Self> {
        if instances.len() != labels.len() {
            return Err(GeldError::Argument(format!("{} instances but {} labels", instances.len(), labels.len())));
        }
        for (inst, label) in instances.iter().zip(&labels) {
            label.validate(inst)?;
        }
        Ok(Self { instances, labels })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// The stretch of a label tour used for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    /// `j`: the window holds `j + 1` nodes.
    pub len: usize,
    pub direction: Direction,
}

/// One decoding step with its ground-truth choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisedStep {
    pub prev: usize,
    pub dest: usize,
    pub candidates: Vec<usize>,
    /// Position of the label's next node in `candidates`.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialSample {
    pub window: Window,
    pub steps: Vec<SupervisedStep>,
}

/// Picks a random window of the label and replays it: the first node is
/// the starting `prev`, the last node is the destination, nodes outside the
/// window count as visited. Steps whose target is not among the `k_m`
/// nearest candidates are dropped.
pub fn sample_partial_solution(
    norm_coords: &[Point],
    label: &Tour,
    k_m: usize,
    rng: &mut impl Rng,
) -> Result<PartialSample> {
    let n = label.len();
    if n < 4 {
        return Err(GeldError::Precondition(format!("partial solutions need n ≥ 4, got {n}")));
    }
    let window = Window {
        start: rng.random_range(0..n),
        len: rng.random_range(3..n),
        direction: if rng.random_bool(0.5) { Direction::Clockwise } else { Direction::CounterClockwise },
    };
    Ok(PartialSample { window, steps: replay_window(norm_coords, label, window, k_m)? })
}

pub(crate) fn replay_window(norm_coords: &[Point], label: &Tour, w: Window, k_m: usize) -> Result<Vec<SupervisedStep>> {
    let n = label.len();
    let order = label.order();
    let seq: Vec<usize> = (0..=w.len)
        .map(|t| match w.direction {
            Direction::Clockwise => order[(w.start + t) % n],
            Direction::CounterClockwise => order[(w.start + n - t) % n],
        })
        .collect();
    let dest = seq[w.len];
    let mut available: Vec<usize> = seq[1..w.len].to_vec();
    let mut prev = seq[0];
    let mut steps = Vec::with_capacity(w.len - 1);
    for &next in &seq[1..w.len] {
        let candidates = nearest_among(norm_coords, prev, &available, k_m)?;
        if let Some(target) = candidates.iter().position(|&c| c == next) {
            steps.push(SupervisedStep { prev, dest, candidates, target });
        }
        let at = available.iter().position(|&v| v == next).expect("window node");
        available.swap_remove(at);
        prev = next;
    }
    Ok(steps)
}

/// A sample ready for the loss: normalised coordinates, regions and steps.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub norm_coords: Vec<Point>,
    pub regions: RegionAssignment,
    pub sample: PartialSample,
}

impl TrainingExample {
    pub fn new(inst: &TspInstance, label: &Tour, params: &ModelParams<f64>, rng: &mut impl Rng) -> Result<Self> {
        let norm_coords = normalize_coords(inst.coords())?;
        let sample = sample_partial_solution(&norm_coords, label, params.config.k_max, rng)?;
        Self::from_sample(norm_coords, sample, params)
    }

    pub fn from_sample(norm_coords: Vec<Point>, sample: PartialSample, params: &ModelParams<f64>) -> Result<Self> {
        let c = &params.config;
        let regions = assign_regions(&norm_coords, c.region_rows, c.region_cols)?;
        Ok(Self { norm_coords, regions, sample })
    }
}

/// Summed cross-entropy of one example and its parameter gradients, in
/// `named_tensors` order. Steps with a single candidate add exactly zero.
pub fn example_loss_and_grad(params: &ModelParams<f64>, ex: &TrainingExample) -> Result<(f64, Vec<Vec<f64>>)> {
    let (loss, grads) = example_pass(params, ex, true)?;
    Ok((loss, grads.expect("requested")))
}

fn example_pass(
    params: &ModelParams<f64>,
    ex: &TrainingExample,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
    let active: Vec<&SupervisedStep> = ex.sample.steps.iter().filter(|s| s.candidates.len() > 1).collect();
    if active.is_empty() {
        return Ok((0.0, want_grad.then(zeros)));
    }
    let heads = params.config.heads;
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let emb = encode_on_tape(&mut tape, &vars.encoder, &ex.norm_coords, heads, &ex.regions)?;
    let mut losses = Vec::with_capacity(active.len());
    for s in active {
        let rows = step_rows(s.prev, s.dest, &s.candidates);
        let dist = distance_matrix(&ex.norm_coords, &rows)?;
        let logits = decoder_logits_on_tape(&mut tape, &vars.decoder, emb, &rows, dist, heads)?;
        let mut allowed = vec![true; rows.len()];
        allowed[0] = false;
        allowed[rows.len() - 1] = false;
        losses.push(tape.cross_entropy(logits, &allowed, s.target + 1)?);
    }
    let total = tape.sum(&losses)?;
    let loss = tape.value(total).data()[0];
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grads = tape.backward(total)?;
    let out = vars
        .all
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((loss, Some(out)))
}

/// Forward-only [`batch_loss_and_grad`].
pub fn batch_loss(params: &ModelParams<f64>, batch: &[TrainingExample]) -> Result<f64> {
    let steps: usize = batch.iter().map(|e| e.sample.steps.len()).sum();
    let parts: Vec<Result<(f64, _)>> = batch.par_iter().map(|ex| example_pass(params, ex, false)).collect();
    let mut loss = 0.0;
    for p in parts {
        loss += p?.0;
    }
    Ok(if steps == 0 { 0.0 } else { loss / steps as f64 })
}

/// Mean cross-entropy over every supervised step of the batch, with its
/// gradient.
pub fn batch_loss_and_grad(params: &ModelParams<f64>, batch: &[TrainingExample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let steps: usize = batch.iter().map(|e| e.sample.steps.len()).sum();
    let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> =
        batch.par_iter().map(|ex| example_loss_and_grad(params, ex)).collect();
    let mut loss = 0.0;
    let mut grad: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    if steps == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / steps as f64;
    for g in grad.iter_mut().flatten() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

fn apply_step(params: &mut ModelParams<f64>, adam: &mut Adam, batch: &[TrainingExample]) -> Result<f64> {
    let (loss, grad) = batch_loss_and_grad(params, batch)?;
    if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(GeldError::NonFinite(format!(
            "loss {loss} after {} optimizer steps on a batch of {} samples",
            adam.steps_taken(),
            batch.len()
        )));
    }
    let mut slots = params.tensors_mut();
    adam.step(&mut slots, &grad);
    Ok(loss)
}

/// One supervised update on small instances. Returns the loss before the
/// update.
pub fn sl_train_step(params: &mut ModelParams<f64>, adam: &mut Adam, batch: &[TrainingExample]) -> Result<f64> {
    let k_m = params.config.k_max;
    if let Some(e) = batch.iter().find(|e| e.norm_coords.len() > k_m) {
        return Err(GeldError::Precondition(format!(
            "supervised batches hold instances of at most {k_m} nodes, got {}",
            e.norm_coords.len()
        )));
    }
    apply_step(params, adam, batch)
}

/// Instance size for a self-improvement epoch: `k_m + ⌊epoch·(n_max − k_m)/n_e2⌋`.
pub fn curriculum_scale(epoch: usize, cfg: &TrainConfig) -> Result<usize> {
    if epoch == 0 || epoch > cfg.n_e2 {
        return Err(GeldError::Argument(format!("epoch {epoch} outside 1..={}", cfg.n_e2)));
    }
    Ok(cfg.k_m + epoch * (cfg.n_max - cfg.k_m) / cfg.n_e2)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: u8,
    pub epoch: usize,
    pub scale: usize,
    pub len_g: Option<f64>,
    pub len_i: Option<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub seconds: f64,
}

fn lr_at(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32 - 1)
}

/// One pass over `data` in shuffled mini-batches; returns the mean loss.
fn train_pass(
    params: &mut ModelParams<f64>,
    adam: &mut Adam,
    data: &[(&TspInstance, &Tour)],
    batch: usize,
    small_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut total, mut steps) = (0.0, 0usize);
    for chunk in order.chunks(batch) {
        let examples = chunk
            .iter()
            .map(|&i| TrainingExample::new(data[i].0, data[i].1, params, rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = if small_only {
            sl_train_step(params, adam, &examples)?
        } else {
            apply_step(params, adam, &examples)?
        };
        total += loss;
        steps += 1;
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

/// Supervised stage: `n_e1` epochs over the labelled data. `on_epoch` sees
/// every log record and the parameters after that epoch.
pub fn train_stage1(
    params: &mut ModelParams<f64>,
    adam: &mut Adam,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainLog, &ModelParams<f64>) -> Result<()>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs: Vec<(&TspInstance, &Tour)> = data.instances.iter().zip(&data.labels).collect();
    for epoch in 1..=cfg.n_e1 {
        let t0 = Instant::now();
        adam.lr = lr_at(cfg.lr1, cfg.lr_decay, epoch);
        let loss = train_pass(params, adam, &pairs, cfg.batch, true, &mut rng)?;
        let log = TrainLog {
            stage: 1,
            epoch,
            scale: data.instances.iter().map(|i| i.len()).max().unwrap_or(0),
            len_g: None,
            len_i: None,
            loss,
            iterations: 1,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&log, params)?;
    }
    Ok(())
}

/// Greedy lengths and improved pseudo-labels for a set of instances.
pub struct PseudoLabels {
    pub greedy_mean: f64,
    pub improved_mean: f64,
    pub tours: Vec<Tour>,
}

/// Greedy rollout, then PRC started from the shorter of the greedy and
/// beam-search tours.
pub fn pseudo_labels(
    params: &ModelParams<f32>,
    instances: &[TspInstance],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PseudoLabels> {
    let k_m = params.config.k_max;
    let per: Vec<Result<(f64, Tour)>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let g = greedy_rollout(inst, params, k_m)?;
            let b = beam_search(inst, params, cfg.beam_width, k_m)?;
            let init = if b.length() < g.length() { b } else { g.clone() };
            let improved = if cfg.prc_iterations > 0 {
                prc_with_model(inst, &init, params, k_m, cfg.prc_iterations, seed.wrapping_add(i as u64))?
            } else {
                init
            };
            Ok((g.length(), improved))
        })
        .collect();
    let mut g_sum = 0.0;
    let mut tours = Vec::with_capacity(instances.len());
    for r in per {
        let (g, t) = r?;
        g_sum += g;
        tours.push(t);
    }
    let k = instances.len().max(1) as f64;
    let improved_mean = tours.iter().map(|t| t.length()).sum::<f64>() / k;
    Ok(PseudoLabels { greedy_mean: g_sum / k, improved_mean, tours })
}

/// One self-improvement epoch. Inner iterations stop after `t_max`, once
/// greedy is within `eps_gap` of the pseudo-labels, or after `t_imp`
/// iterations without better labels.
pub fn sil_epoch(
    epoch: usize,
    params: &mut ModelParams<f64>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    data_s: &LabeledBatch,
    rng: &mut ChaCha8Rng,
) -> Result<TrainLog> {
    let t0 = Instant::now();
    let scale = curriculum_scale(epoch, cfg)?;
    adam.lr = lr_at(cfg.lr2, cfg.lr_decay, epoch);
    let data2 = generate_instances(Pattern::Uniform, scale, cfg.n_bs_t, rng.random())?;
    let first = pseudo_labels(&params.cast(), &data2, cfg, rng.random())?;
    let (mut len_g, mut len_i, mut solution) = (first.greedy_mean, first.improved_mean, first.tours);
    let (mut t1, mut t2) = (0, 0);
    let mut loss = f64::NAN;
    while t1 < cfg.t_max && len_g / len_i - 1.0 > cfg.eps_gap && t2 < cfg.t_imp {
        let mut pairs: Vec<(&TspInstance, &Tour)> = data2.iter().zip(&solution).collect();
        if !data_s.is_empty() {
            for _ in 0..cfg.n_bs_t {
                let i = rng.random_range(0..data_s.len());
                pairs.push((&data_s.instances[i], &data_s.labels[i]));
            }
        }
        loss = train_pass(params, adam, &pairs, cfg.batch, false, rng)?;
        let next = pseudo_labels(&params.cast(), &data2, cfg, rng.random())?;
        len_g = next.greedy_mean;
        if next.improved_mean < len_i {
            t2 = 0;
            len_i = next.improved_mean;
            solution = next.tours;
        } else {
            t2 += 1;
        }
        t1 += 1;
    }
    Ok(TrainLog {
        stage: 2,
        epoch,
        scale,
        len_g: Some(len_g),
        len_i: Some(len_i),
        loss,
        iterations: t1,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Self-improvement stage: `sil_epoch` for every epoch of the curriculum.
pub fn train_stage2(
    params: &mut ModelParams<f64>,
    adam: &mut Adam,
    data_s: &LabeledBatch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainLog, &ModelParams<f64>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    for epoch in 1..=cfg.n_e2 {
        let log = sil_epoch(epoch, params, adam, cfg, data_s, &mut rng)?;
        on_epoch(&log, params)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristics::brute_force_optimal;
    use crate::model::ModelConfig;
    use crate::numeric::check_gradients;

    fn random_inst(n: usize, seed: u64) -> TspInstance {
        generate_instances(Pattern::Uniform, n, 1, seed).unwrap().remove(0)
    }

    fn toy_params() -> ModelParams<f64> {
        let cfg = ModelConfig { hidden: 16, heads: 4, decoder_layers: 1, k_max: 10, ..ModelConfig::desk() };
        ModelParams::init(cfg, 1).unwrap()
    }

    fn identity_tour(inst: &TspInstance) -> Tour {
        Tour::new(inst, (0..inst.len()).collect()).unwrap()
    }

    #[test]
    fn minimal_window_has_two_steps() {
        let inst = random_inst(8, 1);
        let norm = normalize_coords(inst.coords()).unwrap();
        let w = Window { start: 5, len: 3, direction: Direction::Clockwise };
        let steps = replay_window(&norm, &identity_tour(&inst), w, 20).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!((steps[0].prev, steps[0].dest), (5, 0));
        assert_eq!(steps[0].candidates[steps[0].target], 6);
        assert_eq!(steps[1].candidates, vec![7]);
    }

    #[test]
    fn full_window_counts() {
        let inst = random_inst(6, 2);
        let norm = normalize_coords(inst.coords()).unwrap();
        for dir in [Direction::Clockwise, Direction::CounterClockwise] {
            let w = Window { start: 2, len: 5, direction: dir };
            let steps = replay_window(&norm, &identity_tour(&inst), w, 20).unwrap();
            assert_eq!(steps.len(), 4);
        }
        let w = Window { start: 2, len: 5, direction: Direction::CounterClockwise };
        let steps = replay_window(&norm, &identity_tour(&inst), w, 20).unwrap();
        assert_eq!((steps[0].prev, steps[0].dest), (2, 3));
    }

    #[test]
    fn start_index_is_uniform() {
        let inst = random_inst(20, 3);
        let norm = normalize_coords(inst.coords()).unwrap();
        let label = identity_tour(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 20];
        let trials = 10_000;
        for _ in 0..trials {
            counts[sample_partial_solution(&norm, &label, 20, &mut rng).unwrap().window.start] += 1;
        }
        let expected = trials as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom: mean 19, sd sqrt(38)
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn single_candidate_steps_cost_nothing() {
        let params = toy_params();
        let inst = random_inst(8, 5);
        let norm = normalize_coords(inst.coords()).unwrap();
        let mut steps = replay_window(&norm, &identity_tour(&inst), Window { start: 0, len: 3, direction: Direction::Clockwise }, 1).unwrap();
        steps.retain(|s| s.candidates.len() == 1);
        assert!(!steps.is_empty());
        let sample = PartialSample { window: Window { start: 0, len: 3, direction: Direction::Clockwise }, steps };
        let ex = TrainingExample::from_sample(norm, sample, &params).unwrap();
        let (loss, grad) = batch_loss_and_grad(&params, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let params = toy_params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<TrainingExample> = (0..2)
            .map(|s| {
                let inst = random_inst(9, 10 + s);
                let label = brute_force_optimal(&inst).unwrap();
                TrainingExample::new(&inst, &label, &params, &mut rng).unwrap()
            })
            .collect();
        let config = params.config.clone();
        let f = |ts: &[crate::numeric::Tensor<f64>]| {
            let p = ModelParams::from_tensors(config.clone(), ts.to_vec())?;
            batch_loss_and_grad(&p, &batch)
        };
        let flat: Vec<_> = params.tensors().into_iter().cloned().collect();
        let report = check_gradients(f, &flat, &params.names(), 1e-5, Some(3), 7).unwrap();
        assert!(report.max_rel_diff < 1e-3, "{:?}", report.flagged(1e-3));
    }

    #[test]
    fn overfits_one_batch() {
        let mut params = toy_params();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<TrainingExample> = (0..4)
            .map(|s| {
                let inst = random_inst(9, 20 + s);
                let label = brute_force_optimal(&inst).unwrap();
                TrainingExample::new(&inst, &label, &params, &mut rng).unwrap()
            })
            .collect();
        let mut adam = Adam::new(3e-3);
        let first = sl_train_step(&mut params, &mut adam, &batch).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = sl_train_step(&mut params, &mut adam, &batch).unwrap();
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn sl_rejects_large_instances() {
        let mut params = toy_params();
        let inst = random_inst(12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = TrainingExample::new(&inst, &identity_tour(&inst), &params, &mut rng).unwrap();
        assert!(sl_train_step(&mut params, &mut Adam::new(1e-3), &[ex]).is_err());
    }

    #[test]
    fn curriculum_endpoints() {
        let cfg = TrainConfig { n_e2: 50, ..TrainConfig::desk() };
        assert_eq!(curriculum_scale(1, &cfg).unwrap(), 21);
        assert_eq!(curriculum_scale(50, &cfg).unwrap(), 100);
        assert!(curriculum_scale(0, &cfg).is_err());
        assert!(curriculum_scale(51, &cfg).is_err());
        let scales: Vec<usize> = (1..=50).map(|e| curriculum_scale(e, &cfg).unwrap()).collect();
        assert!(scales.windows(2).all(|w| w[0] <= w[1]));
    }

    fn tiny_sil_cfg() -> TrainConfig {
        TrainConfig {
            k_m: 10,
            n_max: 30,
            n_e2: 4,
            n_bs_t: 2,
            batch: 4,
            beam_width: 2,
            prc_iterations: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn sil_termination_bounds() {
        let mut params = toy_params();
        let mut adam = Adam::new(1e-4);
        let data_s = LabeledBatch::default();
        let cfg = TrainConfig { eps_gap: f64::INFINITY, ..tiny_sil_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = params.clone();
        let log = sil_epoch(1, &mut params, &mut adam, &cfg, &data_s, &mut rng).unwrap();
        assert_eq!(log.iterations, 0);
        assert_eq!(params, before);

        let cfg = TrainConfig { t_max: 1, eps_gap: 1e-12, ..tiny_sil_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log = sil_epoch(2, &mut params, &mut adam, &cfg, &data_s, &mut rng).unwrap();
        assert_eq!(log.iterations, 1);
    }

    #[test]
    fn pseudo_labels_never_worse_than_greedy() {
        let params = toy_params().cast::<f32>();
        let insts = generate_instances(Pattern::Uniform, 25, 3, 2).unwrap();
        let pl = pseudo_labels(&params, &insts, &tiny_sil_cfg(), 0).unwrap();
        for (inst, t) in insts.iter().zip(&pl.tours) {
            t.validate(inst).unwrap();
            assert!(t.length() <= greedy_rollout(inst, &params, 10).unwrap().length());
        }
        assert!(pl.improved_mean <= pl.greedy_mean);
    }
}
