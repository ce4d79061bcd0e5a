//! The `geld` command line: generation, training, solving, improvement,
//! benchmarking and gradient checks.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::heuristics::{brute_force_optimal, nn_two_opt, random_insertion, BRUTE_FORCE_MAX_N};
use crate::inference::{beam_search, greedy_rollout, prc_with_model};
use crate::io::tsplib::MetricChoice;
use crate::io::{
    generate_instances, generate_instances_with, load_checkpoint, read_instance, save_checkpoint, write_instance,
    GeneratorParams, Pattern, RunReport, RunRow,
};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::{check_gradients_with, Adam, Tensor};
use crate::training::{batch_loss, batch_loss_and_grad, train_stage1, train_stage2, LabeledBatch, TrainConfig, TrainLog, TrainingExample};
use crate::tsp::{Tour, TspInstance};

/// 2-opt sweep budget of the NN+2-opt baseline.
pub const TWO_OPT_SWEEPS: usize = 1000;

#[derive(Parser, Debug)]
#[command(name = "geld", version, about = "Neural and classical solvers for Euclidean TSP")]
pub struct Cli {
    /// Worker threads for instance-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write random instances as TSPLIB files.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Solve every instance with one method.
    Solve(SolveArgs),
    /// Build an initial tour and refine it with parallel re-construction.
    Improve(ImproveArgs),
    /// Run several methods over several datasets.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PatternArg {
    Uniform,
    Clustered,
    Explosion,
    Implosion,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Uniform => Pattern::Uniform,
            PatternArg::Clustered => Pattern::Clustered,
            PatternArg::Explosion => Pattern::Explosion,
            PatternArg::Implosion => Pattern::Implosion,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    pub pattern: PatternArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub min_clusters: usize,
    #[arg(long, default_value_t = 8)]
    pub max_clusters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub cluster_sigma: f64,
    /// Disc radius used by explosion and implosion.
    #[arg(long, default_value_t = 0.3)]
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: Stage,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these parameters (required for stage2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Size of the labelled small instances.
    #[arg(long, default_value_t = 10)]
    pub data_n: usize,
    #[arg(long, default_value_t = 50_000)]
    pub data_count: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub n_bs: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub prc: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Auto,
    Continuous,
    Rounded,
}

impl From<MetricArg> for MetricChoice {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Auto => MetricChoice::Auto,
            MetricArg::Continuous => MetricChoice::Continuous,
            MetricArg::Rounded => MetricChoice::Rounded,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Greedy,
    Beam,
    Ri,
    Nn2opt,
    Brute,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Beam => "beam",
            Method::Ri => "ri",
            Method::Nn2opt => "nn2opt",
            Method::Brute => "brute",
        }
    }

    fn needs_model(self) -> bool {
        matches!(self, Method::Greedy | Method::Beam)
    }
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// A TSPLIB file or a directory of them.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub metric: MetricArg,
    /// JSON report whose rows give reference lengths by instance name.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Use the exact optimum as reference on instances with at most 10 nodes.
    #[arg(long)]
    pub exact_reference: bool,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Candidate window; defaults to the checkpoint's.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub beam_width: usize,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub mode: Method,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ImproveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "ri")]
    pub init: Method,
    /// PRC iterations.
    #[arg(long, default_value_t = 1000)]
    pub prc: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Datasets: TSPLIB files or directories.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, num_args = 1.., default_values = ["nn2opt", "ri"])]
    pub methods: Vec<Method>,
    #[arg(long, value_enum, default_value = "auto")]
    pub metric: MetricArg,
    #[arg(long)]
    pub exact_reference: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also run PRC for this many iterations after every method.
    #[arg(long)]
    pub prc: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Check these parameters instead of a fresh initialisation.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 4)]
    pub per_param: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 6)]
    pub decoder_layers: usize,
}

/// Result of [`run_command`].
#[derive(Debug, Default)]
pub struct CommandOutcome {
    pub code: i32,
    pub report: Option<RunReport>,
}

/// Parses `argv` (program name first) and runs the command. Usage errors
/// give exit code 2, failures exit code 1.
pub fn run_command<I, S>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return CommandOutcome { code, report: None };
        }
    };
    match execute(cli) {
        Ok(report) => CommandOutcome { code: 0, report },
        Err(e) => {
            eprintln!("error: {e:#}");
            CommandOutcome { code: 1, report: None }
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<Option<RunReport>> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build()?;
    let seed = cli.seed;
    pool.install(|| match cli.command {
        Command::Gen(a) => gen(&a, seed).map(|_| None),
        Command::Train(a) => train(&a, seed).map(|_| None),
        Command::Solve(a) => solve(&a, seed).map(Some),
        Command::Improve(a) => improve(&a, seed).map(Some),
        Command::Bench(a) => bench(&a, seed).map(Some),
        Command::GradCheck(a) => grad_check(&a, seed).map(|_| None),
    })
}

fn gen(a: &GenArgs, seed: u64) -> anyhow::Result<()> {
    let params = GeneratorParams {
        min_clusters: a.min_clusters,
        max_clusters: a.max_clusters,
        cluster_sigma: a.cluster_sigma,
        radius: a.radius,
    };
    let insts = generate_instances_with(a.pattern.into(), a.n, a.count, seed, &params)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for inst in &insts {
        write_instance(inst, &a.out.join(format!("{}.tsp", inst.name())))?;
    }
    println!("wrote {} instances to {}", insts.len(), a.out.display());
    Ok(())
}

/// Label tour for a small training instance: exact when cheap, NN+2-opt
/// otherwise.
pub fn label_tour(inst: &TspInstance) -> crate::Result<Tour> {
    if inst.len() <= BRUTE_FORCE_MAX_N {
        brute_force_optimal(inst)
    } else {
        Ok(nn_two_opt(inst, TWO_OPT_SWEEPS)?.tour)
    }
}

/// `count` uniform instances of `n` nodes with their label tours.
pub fn labeled_dataset(n: usize, count: usize, seed: u64) -> crate::Result<LabeledBatch> {
    let instances = generate_instances(Pattern::Uniform, n, count, seed)?;
    let labels = instances.par_iter().map(label_tour).collect::<crate::Result<Vec<_>>>()?;
    LabeledBatch::new(instances, labels)
}

fn train(a: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let mut cfg = TrainConfig { seed, k_m: a.k_max, ..TrainConfig::desk() };
    if let Some(v) = a.n_max {
        cfg.n_max = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.n_bs {
        cfg.n_bs_t = v;
    }
    if let Some(v) = a.beam_width {
        cfg.beam_width = v;
    }
    if let Some(v) = a.prc {
        cfg.prc_iterations = v;
    }
    let mut params: ModelParams<f64> = match &a.init {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.cast(),
        None if a.stage == Stage::Stage2 => bail!("stage2 needs --init with stage-1 parameters"),
        None => {
            let mc = ModelConfig {
                hidden: a.hidden,
                heads: a.heads,
                decoder_layers: a.decoder_layers,
                k_max: a.k_max,
                ..ModelConfig::desk()
            };
            ModelParams::init(mc, seed)?
        }
    };
    cfg.k_m = params.config.k_max;
    let data = labeled_dataset(a.data_n, a.data_count, seed)?;
    let mut log_file = match &a.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let out = a.out.clone();
    let mut on_epoch = |log: &TrainLog, p: &ModelParams<f64>| -> crate::Result<()> {
        let line = serde_json::to_string(log).expect("plain data");
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        save_checkpoint(&p.cast(), &out)
    };
    match a.stage {
        Stage::Stage1 => {
            if let Some(e) = a.epochs {
                cfg.n_e1 = e;
            }
            let mut adam = Adam::new(a.lr.unwrap_or(cfg.lr1));
            cfg.lr1 = adam.lr;
            train_stage1(&mut params, &mut adam, &data, &cfg, &mut on_epoch)?;
        }
        Stage::Stage2 => {
            if let Some(e) = a.epochs {
                cfg.n_e2 = e;
            }
            let mut adam = Adam::new(a.lr.unwrap_or(cfg.lr2));
            cfg.lr2 = adam.lr;
            cfg.validate()?;
            train_stage2(&mut params, &mut adam, &data, &cfg, &mut on_epoch)?;
        }
    }
    Ok(())
}

/// Every `.tsp` file under `path` (sorted by file name), or `path` itself.
pub fn load_inputs(path: &Path, metric: MetricChoice) -> anyhow::Result<Vec<TspInstance>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsp"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no .tsp files in {}", path.display());
    }
    files
        .iter()
        .map(|f| read_instance(f, metric).with_context(|| format!("reading {}", f.display())))
        .collect()
}

fn load_model(m: &ModelArgs, method_needs: bool) -> anyhow::Result<Option<(ModelParams<f32>, usize)>> {
    match &m.ckpt {
        Some(p) => {
            let params = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            let k = m.k_max.unwrap_or(params.config.k_max);
            Ok(Some((params, k)))
        }
        None if method_needs => Err(anyhow!("this method needs --ckpt")),
        None => Ok(None),
    }
}

fn references(input: &InputArgs) -> anyhow::Result<HashMap<String, f64>> {
    let mut refs = HashMap::new();
    if let Some(p) = &input.reference {
        let rep = RunReport::from_json(&fs::read_to_string(p)?)?;
        for r in rep.rows {
            refs.insert(r.name, r.length);
        }
    }
    Ok(refs)
}

fn instance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn run_method(
    inst: &TspInstance,
    method: Method,
    model: Option<&(ModelParams<f32>, usize)>,
    beam_width: usize,
    seed: u64,
) -> anyhow::Result<Tour> {
    let need = || model.ok_or_else(|| anyhow!("method {} needs --ckpt", method.name()));
    Ok(match method {
        Method::Greedy => {
            let (p, k) = need()?;
            greedy_rollout(inst, p, *k)?
        }
        Method::Beam => {
            let (p, k) = need()?;
            beam_search(inst, p, beam_width, *k)?
        }
        Method::Ri => random_insertion(inst, seed)?,
        Method::Nn2opt => nn_two_opt(inst, TWO_OPT_SWEEPS)?.tour,
        Method::Brute => brute_force_optimal(inst)?,
    })
}

/// Runs `f` on every instance in parallel, keeping input order.
fn rows_for<F>(
    insts: &[TspInstance],
    label: &str,
    seed: u64,
    exact_reference: bool,
    refs: &HashMap<String, f64>,
    f: F,
) -> anyhow::Result<Vec<RunRow>>
where
    F: Fn(&TspInstance, u64) -> anyhow::Result<Tour> + Sync,
{
    insts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let s = instance_seed(seed, i);
            let t0 = Instant::now();
            let tour = f(inst, s)?;
            let seconds = t0.elapsed().as_secs_f64();
            let reference = match refs.get(inst.name()) {
                Some(&r) => Some(r),
                None if exact_reference && inst.len() <= BRUTE_FORCE_MAX_N => {
                    Some(brute_force_optimal(inst)?.length())
                }
                None => None,
            };
            let row = RunRow {
                name: inst.name().to_string(),
                n: inst.len(),
                method: label.to_string(),
                length: tour.length(),
                gap_pct: None,
                seconds,
                seed: s,
            };
            Ok(row.with_reference(reference)?)
        })
        .collect()
}

fn emit(report: &RunReport, path: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = path {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn solve(a: &SolveArgs, seed: u64) -> anyhow::Result<RunReport> {
    let insts = load_inputs(&a.input.input, a.input.metric.into())?;
    let model = load_model(&a.model, a.mode.needs_model())?;
    let refs = references(&a.input)?;
    let rows = rows_for(&insts, a.mode.name(), seed, a.input.exact_reference, &refs, |inst, s| {
        run_method(inst, a.mode, model.as_ref(), a.model.beam_width, s)
    })?;
    let report = RunReport { rows };
    emit(&report, a.report.as_deref())?;
    Ok(report)
}

fn improve(a: &ImproveArgs, seed: u64) -> anyhow::Result<RunReport> {
    let insts = load_inputs(&a.input.input, a.input.metric.into())?;
    let model = load_model(&a.model, true)?.expect("required");
    let refs = references(&a.input)?;
    let label = format!("{}+prc{}", a.init.name(), a.prc);
    let rows = rows_for(&insts, &label, seed, a.input.exact_reference, &refs, |inst, s| {
        let init = run_method(inst, a.init, Some(&model), a.model.beam_width, s)?;
        Ok(prc_with_model(inst, &init, &model.0, model.1, a.prc, s)?)
    })?;
    let report = RunReport { rows };
    emit(&report, a.report.as_deref())?;
    Ok(report)
}

fn bench(a: &BenchArgs, seed: u64) -> anyhow::Result<RunReport> {
    let needs = a.methods.iter().any(|m| m.needs_model()) || a.prc.is_some();
    let model = load_model(&a.model, needs)?;
    let refs = HashMap::new();
    let mut report = RunReport::default();
    for input in &a.inputs {
        let insts = load_inputs(input, a.metric.into())?;
        for &m in &a.methods {
            let rows = rows_for(&insts, m.name(), seed, a.exact_reference, &refs, |inst, s| {
                run_method(inst, m, model.as_ref(), a.model.beam_width, s)
            })?;
            report.rows.extend(rows);
            if let (Some(iters), Some(md)) = (a.prc, model.as_ref()) {
                let label = format!("{}+prc{iters}", m.name());
                let rows = rows_for(&insts, &label, seed, a.exact_reference, &refs, |inst, s| {
                    let init = run_method(inst, m, Some(md), a.model.beam_width, s)?;
                    Ok(prc_with_model(inst, &init, &md.0, md.1, iters, s)?)
                })?;
                report.rows.extend(rows);
            }
        }
    }
    emit(&report, a.report.as_deref())?;
    Ok(report)
}

/// Training examples on random `n`-node instances, each a random window of
/// a random tour.
pub fn grad_check_examples(
    params: &ModelParams<f64>,
    n: usize,
    samples: usize,
    seed: u64,
) -> crate::Result<Vec<TrainingExample>> {
    use rand::seq::SliceRandom;
    let insts = generate_instances(Pattern::Uniform, n, samples, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    insts
        .iter()
        .map(|inst| {
            let mut order: Vec<usize> = (0..inst.len()).collect();
            order.shuffle(&mut rng);
            let label = Tour::new(inst, order)?;
            TrainingExample::new(inst, &label, params, &mut rng)
        })
        .collect()
}

/// Gradient check of the mean training loss over `examples`.
pub fn check_training_gradients(
    params: &ModelParams<f64>,
    examples: &[TrainingExample],
    eps: f64,
    per_param: usize,
    seed: u64,
) -> crate::Result<crate::numeric::GradReport> {
    let config = params.config.clone();
    let (_, analytic) = batch_loss_and_grad(params, examples)?;
    let f = |ts: &[Tensor<f64>]| {
        let p = ModelParams::from_tensors(config.clone(), ts.to_vec())?;
        batch_loss(&p, examples)
    };
    let flat: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    check_gradients_with(f, &analytic, &flat, &params.names(), eps, Some(per_param), seed)
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> anyhow::Result<()> {
    let params: ModelParams<f64> = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.cast(),
        None => {
            let cfg = ModelConfig { hidden: a.hidden, decoder_layers: a.decoder_layers, ..ModelConfig::full() };
            ModelParams::init(cfg, seed)?
        }
    };
    let examples = grad_check_examples(&params, a.n, a.samples, seed)?;
    let report = check_training_gradients(&params, &examples, a.eps, a.per_param, seed)?;
    println!(
        "probed {} coordinates: max abs diff {:.3e}, max rel diff {:.3e}",
        report.per_parameter.len(),
        report.max_abs_diff,
        report.max_rel_diff
    );
    let flagged = report.flagged(a.tolerance);
    if !flagged.is_empty() {
        bail!("gradient mismatch above {} in: {}", a.tolerance, flagged.join(", "));
    }
    Ok(())
}
