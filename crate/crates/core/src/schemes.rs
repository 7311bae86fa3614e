//! Classical particle Euler, iterative Monte Carlo Picard and iterated MLMC
//! Picard simulation.
//!
//! Every particle draws its initial condition and Brownian path from keyed
//! streams `(seed, picard step, level, particle)`, and reductions run in a
//! fixed order, so results do not depend on the worker count.
//!
//! The classical scheme uses Picard index 1 in its keys, which makes a
//! one-step Picard run of a measure-independent model replay it exactly.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{CompensatedSum, FieldScratch, LevelTerm, MlmcMeasure, MomentPath, ParticleCloud};
use crate::models::{CostMode, InitialSampler, InteractingKernelModel, KernelModel, Model, MomentKernelModel};
use crate::planner::{self, Plan};
use crate::rng::{coarsen_into, fill_increments, StreamKey, StreamRole};
use crate::time_grid::TimeGrid;

/// Chunk length for deterministic parallel reductions.
const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Classical,
    PicardMc,
    PicardMlmc,
}

impl SchemeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Classical => "classical",
            SchemeKind::PicardMc => "picard-mc",
            SchemeKind::PicardMlmc => "picard-mlmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "classical" => Ok(SchemeKind::Classical),
            "picard-mc" => Ok(SchemeKind::PicardMc),
            "picard-mlmc" => Ok(SchemeKind::PicardMlmc),
            other => Err(Error::Parse(format!(
                "unknown method `{other}` (expected classical, picard-mc or picard-mlmc)"
            ))),
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The zeroth Picard iterate `M^(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMeasure {
    /// Initial samples held constant in time.
    #[default]
    FrozenInitial,
    /// Fresh samples of the model's prior law at every grid point.
    ModelPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Samples {
    Classical { particles: u64, level: usize },
    /// `particles[m-1]` particles at Picard step `m`.
    PicardMc { particles: Vec<u64>, level: usize },
    /// `particles[m-1][ℓ]` coupled pairs at Picard step `m`, level `ℓ`.
    PicardMlmc { particles: Vec<Vec<u64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub samples: Samples,
    pub initial_measure: InitialMeasure,
    pub seed: u64,
    /// Worker threads; `0` uses the available parallelism.
    pub workers: usize,
    /// Classical scheme only: store the cloud on this coarser grid.
    pub record_level: Option<usize>,
    /// Keep the measure of every Picard step in the output.
    pub keep_history: bool,
    /// Opt-in projection of drift components onto `[lo, hi]`.
    pub drift_clamp: Option<[f64; 2]>,
}

impl SchemeConfig {
    fn with_samples(samples: Samples, seed: u64) -> Self {
        Self {
            samples,
            initial_measure: InitialMeasure::FrozenInitial,
            seed,
            workers: 1,
            record_level: None,
            keep_history: false,
            drift_clamp: None,
        }
    }

    pub fn classical(particles: u64, level: usize, seed: u64) -> Self {
        Self::with_samples(Samples::Classical { particles, level }, seed)
    }

    pub fn picard_mc(particles: Vec<u64>, level: usize, seed: u64) -> Self {
        Self::with_samples(Samples::PicardMc { particles, level }, seed)
    }

    pub fn picard_mlmc(particles: Vec<Vec<u64>>, seed: u64) -> Self {
        Self::with_samples(Samples::PicardMlmc { particles }, seed)
    }

    pub fn from_plan(plan: &Plan, seed: u64) -> Self {
        Self::picard_mlmc(plan.samples.clone(), seed)
    }

    pub fn initial_measure(mut self, initial: InitialMeasure) -> Self {
        self.initial_measure = initial;
        self
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn record_level(mut self, level: usize) -> Self {
        self.record_level = Some(level);
        self
    }

    pub fn keep_history(mut self, keep: bool) -> Self {
        self.keep_history = keep;
        self
    }

    pub fn drift_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.drift_clamp = Some([lo, hi]);
        self
    }

    pub fn kind(&self) -> SchemeKind {
        match self.samples {
            Samples::Classical { .. } => SchemeKind::Classical,
            Samples::PicardMc { .. } => SchemeKind::PicardMc,
            Samples::PicardMlmc { .. } => SchemeKind::PicardMlmc,
        }
    }

    pub fn picard_steps(&self) -> usize {
        match &self.samples {
            Samples::Classical { .. } => 0,
            Samples::PicardMc { particles, .. } => particles.len(),
            Samples::PicardMlmc { particles } => particles.len(),
        }
    }

    /// Finest level simulated; the estimate path lives on this grid.
    pub fn max_level(&self) -> usize {
        match &self.samples {
            Samples::Classical { level, .. } | Samples::PicardMc { level, .. } => *level,
            Samples::PicardMlmc { particles } => particles.first().map_or(0, |r| r.len().saturating_sub(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |n: &u64| *n >= 1;
        match &self.samples {
            Samples::Classical { particles, .. } => {
                if *particles == 0 {
                    return Err(Error::parameter("classical scheme needs at least one particle"));
                }
                if let Some(r) = self.record_level {
                    if r > self.max_level() {
                        return Err(Error::parameter("record level exceeds the simulation level"));
                    }
                }
            }
            Samples::PicardMc { particles, .. } => {
                if particles.is_empty() {
                    return Err(Error::parameter("picard-mc needs at least one Picard step"));
                }
                if !particles.iter().all(positive) {
                    return Err(Error::parameter("sample counts must be positive"));
                }
            }
            Samples::PicardMlmc { particles } => {
                if particles.is_empty() {
                    return Err(Error::parameter("picard-mlmc needs at least one Picard step"));
                }
                let width = particles[0].len();
                if width == 0 || particles.iter().any(|row| row.len() != width) {
                    return Err(Error::parameter(
                        "picard-mlmc needs L+1 sample counts for every Picard step",
                    ));
                }
                if !particles.iter().flatten().all(positive) {
                    return Err(Error::parameter("sample counts must be positive"));
                }
            }
        }
        TimeGrid::new(self.max_level(), 1.0)?;
        Ok(())
    }

    /// Predicted cost for this configuration.
    pub fn predicted_cost(&self, horizon: f64, mode: CostMode) -> f64 {
        match &self.samples {
            Samples::Classical { particles, level } => {
                planner::classical_predicted_cost(*particles, *level, horizon, mode)
            }
            Samples::PicardMc { particles, level } => {
                let rows: Vec<Vec<u64>> = particles.iter().map(|&n| vec![n]).collect();
                planner::predicted_cost(&rows, &[*level], horizon, mode)
            }
            Samples::PicardMlmc { particles } => {
                let levels: Vec<usize> = (0..particles[0].len()).collect();
                planner::predicted_cost(particles, &levels, horizon, mode)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub mode: CostMode,
    pub predicted: f64,
    /// Kernel evaluations actually performed. Interacting form: pair
    /// evaluations `(b, σ)(x, y)`. Moment form: feature-map evaluations plus
    /// reduced-coefficient evaluations.
    pub measured: u64,
    /// Measured evaluations per Picard step (one entry for the classical
    /// scheme).
    pub per_step: Vec<u64>,
}

impl CostLedger {
    pub fn ratio(&self) -> f64 {
        self.measured as f64 / self.predicted
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub kind: SchemeKind,
    /// Final measure; the classical cloud is stored as a single-level measure.
    pub measure: MlmcMeasure,
    /// Measures of Picard steps `1..=M` when requested.
    pub history: Vec<MlmcMeasure>,
    /// `⟨·, P⟩` of the final measure at every point of the report grid.
    pub estimate_path: Vec<f64>,
    pub report_level: usize,
    pub horizon: f64,
    pub cost: CostLedger,
    pub wall_seconds: f64,
}

impl SimulationOutput {
    pub fn report_grid(&self) -> TimeGrid {
        TimeGrid::new(self.report_level, self.horizon).expect("validated at simulation time")
    }

    /// `⟨·, P⟩` at `T`.
    pub fn terminal_estimate(&self) -> f64 {
        *self.estimate_path.last().expect("path is never empty")
    }
}

/// Evaluates the final measure against `payoff` at `η_L(t)`.
pub fn estimate<F: Fn(&[f64]) -> f64>(output: &SimulationOutput, payoff: F, t: f64) -> Result<f64> {
    let eta = output.report_grid().eta(t)?;
    output.measure.eval_scalar(payoff, eta)
}

pub fn simulate(model: &Model, config: &SchemeConfig) -> Result<SimulationOutput> {
    config.validate()?;
    TimeGrid::new(config.max_level(), model.horizon)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::parameter(format!("cannot start worker pool: {e}")))?;
    let start = Instant::now();
    let mut out = pool.install(|| match &config.samples {
        Samples::Classical { particles, level } => run_classical(model, config, *particles, *level),
        Samples::PicardMc { particles, level } => {
            let layouts: Vec<Vec<Block>> = particles
                .iter()
                .map(|&n| {
                    vec![Block {
                        level: *level,
                        count: n,
                        coupled: false,
                    }]
                })
                .collect();
            run_picard(model, config, &layouts, *level)
        }
        Samples::PicardMlmc { particles } => {
            let layouts: Vec<Vec<Block>> = particles
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(l, &n)| Block {
                            level: l,
                            count: n,
                            coupled: l > 0,
                        })
                        .collect()
                })
                .collect();
            run_picard(model, config, &layouts, config.max_level())
        }
    })?;
    out.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

pub fn simulate_classical(model: &Model, particles: u64, level: usize, seed: u64) -> Result<SimulationOutput> {
    simulate(model, &SchemeConfig::classical(particles, level, seed))
}

pub fn simulate_picard_mc(model: &Model, particles: &[u64], level: usize, seed: u64) -> Result<SimulationOutput> {
    simulate(model, &SchemeConfig::picard_mc(particles.to_vec(), level, seed))
}

pub fn simulate_picard_mlmc(model: &Model, particles: &[Vec<u64>], seed: u64) -> Result<SimulationOutput> {
    simulate(model, &SchemeConfig::picard_mlmc(particles.to_vec(), seed))
}

/// A block of particles within one Picard step; all draw keys at `level`.
#[derive(Debug, Clone, Copy)]
struct Block {
    level: usize,
    count: u64,
    coupled: bool,
}

/// Coefficient source for one Picard step.
enum Field<'a> {
    Moment(&'a MomentKernelModel, MomentPath),
    Interacting(&'a InteractingKernelModel, &'a MlmcMeasure),
}

struct StepContext<'a> {
    field: Field<'a>,
    sampler: &'a InitialSampler,
    seed: u64,
    picard_step: usize,
    horizon: f64,
    dim: usize,
    noise_dim: usize,
    clamp: Option<[f64; 2]>,
}

struct ParticleResult {
    fine: Vec<f64>,
    coarse: Option<Vec<f64>>,
    evaluations: u64,
}

impl StepContext<'_> {
    fn particle(&self, block: &Block, i: u64) -> Result<ParticleResult> {
        let key = StreamKey::new(self.seed, self.picard_step, block.level, i, StreamRole::InitialCondition);
        let mut x0 = vec![0.0; self.dim];
        self.sampler.sample(&mut key.stream(), &mut x0);
        let r = self.noise_dim;
        let steps = 1usize << block.level;
        let mut inc = vec![0.0; steps * r];
        let h = self.horizon * (-(block.level as f64)).exp2();
        fill_increments(&mut key.with_role(StreamRole::Brownian).stream(), h, &mut inc);
        let mut scratch = self.scratch();
        let (fine, mut evaluations) = self.euler(block.level, &x0, &inc, i, &mut scratch)?;
        let coarse = if block.coupled {
            let mut coarse_inc = vec![0.0; steps / 2 * r];
            coarsen_into(&inc, r, &mut coarse_inc);
            let (path, e) = self.euler(block.level - 1, &x0, &coarse_inc, i, &mut scratch)?;
            evaluations += e;
            Some(path)
        } else {
            None
        };
        Ok(ParticleResult {
            fine,
            coarse,
            evaluations,
        })
    }

    fn scratch(&self) -> Option<FieldScratch> {
        match &self.field {
            Field::Interacting(k, _) => Some(FieldScratch::new(k)),
            Field::Moment(..) => None,
        }
    }

    fn euler(
        &self,
        level: usize,
        x0: &[f64],
        inc: &[f64],
        particle: u64,
        scratch: &mut Option<FieldScratch>,
    ) -> Result<(Vec<f64>, u64)> {
        let (d, r) = (self.dim, self.noise_dim);
        let steps = 1usize << level;
        let h = self.horizon * (-(level as f64)).exp2();
        let mut path = vec![0.0; (steps + 1) * d];
        path[..d].copy_from_slice(x0);
        let mut drift = vec![0.0; d];
        let mut diffusion = vec![0.0; d * r];
        let mut evaluations = 0u64;
        for k in 0..steps {
            let (done, rest) = path.split_at_mut((k + 1) * d);
            let x = &done[k * d..];
            match &self.field {
                Field::Moment(model, moments) => {
                    model.coefficients(x, moments.at_dyadic(level, k), &mut drift, &mut diffusion);
                    evaluations += 1;
                }
                Field::Interacting(kernel, measure) => {
                    let s = scratch.as_mut().expect("interacting scratch");
                    evaluations += measure.field_at_dyadic(kernel, x, level, k, &mut drift, &mut diffusion, s);
                }
            }
            if let Some([lo, hi]) = self.clamp {
                drift.iter_mut().for_each(|b| *b = b.clamp(lo, hi));
            }
            let dw = &inc[k * r..(k + 1) * r];
            let next = &mut rest[..d];
            for c in 0..d {
                let mut v = x[c] + drift[c] * h;
                for j in 0..r {
                    v += diffusion[c * r + j] * dw[j];
                }
                next[c] = v;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    picard_step: self.picard_step,
                    level,
                    particle,
                    time_index: k + 1,
                });
            }
        }
        Ok((path, evaluations))
    }
}

/// Builds `M^(0)` on the grid of `level` with `count` samples where needed.
fn initial_measure(model: &Model, config: &SchemeConfig, level: usize, count: u64) -> Result<MlmcMeasure> {
    let d = model.dim();
    let horizon = model.horizon;
    match config.initial_measure {
        InitialMeasure::FrozenInitial => {
            let law = model.kernel.initial_law();
            let sampler = law.sampler()?;
            let count = if law.is_point_mass() { 1 } else { count as usize };
            let mut samples = vec![0.0; count * d];
            for (i, chunk) in samples.chunks_exact_mut(d).enumerate() {
                let key = StreamKey::new(config.seed, 0, 0, i as u64 + 1, StreamRole::InitialCondition);
                sampler.sample(&mut key.stream(), chunk);
            }
            Ok(MlmcMeasure::single(0, ParticleCloud::constant(horizon, d, samples)?))
        }
        InitialMeasure::ModelPrior => {
            let prior = model.prior.as_ref().ok_or_else(|| {
                Error::parameter(format!("model `{}` has no prior law for the initial Picard measure", model.name))
            })?;
            if prior.start.len() != d {
                return Err(Error::parameter("prior start has the wrong dimension"));
            }
            let grid = TimeGrid::new(level, horizon)?;
            let columns = grid.len();
            let n = count as usize;
            let mut states = vec![0.0; n * columns * d];
            for (i, traj) in states.chunks_exact_mut(columns * d).enumerate() {
                let mut rng = StreamKey::new(config.seed, 0, level, i as u64 + 1, StreamRole::Prior).stream();
                for k in 0..columns {
                    let sd = prior.scale * grid.point(k).sqrt();
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        traj[k * d + c] = prior.start[c] + sd * z;
                    }
                }
            }
            Ok(MlmcMeasure::single(0, ParticleCloud::new(grid, d, n, states)?))
        }
    }
}

fn run_picard(model: &Model, config: &SchemeConfig, layouts: &[Vec<Block>], report_level: usize) -> Result<SimulationOutput> {
    let d = model.dim();
    let r = model.noise_dim();
    let law = model.kernel.initial_law();
    if law.dim() != d {
        return Err(Error::parameter("initial law dimension differs from the model dimension"));
    }
    let sampler = law.sampler()?;
    let mode = model.kernel.mode();
    let path_level = report_level;
    // M^(0) gets as many samples as the finest block of step 1.
    let initial_count = layouts[0].last().expect("validated").count;
    let mut previous = initial_measure(model, config, path_level, initial_count)?;
    let mut per_step = Vec::with_capacity(layouts.len());
    let mut history = Vec::new();
    for (idx, blocks) in layouts.iter().enumerate() {
        let m = idx + 1;
        let mut step_cost = 0u64;
        let field = match &model.kernel {
            KernelModel::Moment(km) => {
                let path = previous.moment_path(km, path_level);
                step_cost += path.evaluations();
                Field::Moment(km, path)
            }
            KernelModel::Interacting(k) => Field::Interacting(k, &previous),
        };
        let ctx = StepContext {
            field,
            sampler: &sampler,
            seed: config.seed,
            picard_step: m,
            horizon: model.horizon,
            dim: d,
            noise_dim: r,
            clamp: config.drift_clamp,
        };
        let mut terms = Vec::with_capacity(blocks.len());
        for block in blocks {
            let results: Vec<Result<ParticleResult>> = (1..=block.count)
                .into_par_iter()
                .map(|i| ctx.particle(block, i))
                .collect();
            let n = block.count as usize;
            let fine_len = ((1usize << block.level) + 1) * d;
            let mut fine = Vec::with_capacity(n * fine_len);
            let mut coarse = Vec::new();
            for res in results {
                let p = res?;
                step_cost += p.evaluations;
                fine.extend_from_slice(&p.fine);
                if let Some(c) = p.coarse {
                    coarse.extend_from_slice(&c);
                }
            }
            let fine = ParticleCloud::new(TimeGrid::new(block.level, model.horizon)?, d, n, fine)?;
            terms.push(if block.coupled {
                let grid = TimeGrid::new(block.level - 1, model.horizon)?;
                LevelTerm::pair(fine, ParticleCloud::new(grid, d, n, coarse)?)?
            } else {
                LevelTerm::base(fine)
            });
        }
        drop(ctx);
        let measure = MlmcMeasure::new(m, terms)?;
        per_step.push(step_cost);
        if config.keep_history {
            history.push(measure.clone());
        }
        previous = measure;
    }
    let payoff = &model.payoff;
    let estimate_path = previous.eval_path(|x| payoff.eval(x), report_level);
    Ok(SimulationOutput {
        kind: config.kind(),
        measure: previous,
        history,
        estimate_path,
        report_level,
        horizon: model.horizon,
        cost: CostLedger {
            mode,
            predicted: config.predicted_cost(model.horizon, mode),
            measured: per_step.iter().sum(),
            per_step,
        },
        wall_seconds: 0.0,
    })
}

/// Deterministic mean over particles: fixed chunks summed in parallel, chunk
/// sums combined in index order.
fn chunked_mean<F>(states: &[f64], d: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = states.len() / d;
    let partials: Vec<Vec<CompensatedSum>> = states
        .par_chunks(REDUCE_CHUNK * d)
        .map(|chunk| {
            let mut acc = vec![CompensatedSum::default(); width];
            let mut buf = vec![0.0; width];
            for x in chunk.chunks_exact(d) {
                f(x, &mut buf);
                for (a, &v) in acc.iter_mut().zip(&buf) {
                    a.add(v);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![CompensatedSum::default(); width];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p.value());
        }
    }
    total.iter().map(|t| t.value() / n as f64).collect()
}

fn run_classical(model: &Model, config: &SchemeConfig, particles: u64, level: usize) -> Result<SimulationOutput> {
    let d = model.dim();
    let r = model.noise_dim();
    let n = particles as usize;
    let law = model.kernel.initial_law();
    if law.dim() != d {
        return Err(Error::parameter("initial law dimension differs from the model dimension"));
    }
    let sampler = law.sampler()?;
    let grid = TimeGrid::new(level, model.horizon)?;
    let h = grid.step();
    let record_level = config.record_level.unwrap_or(level);
    let stride = 1usize << (level - record_level);
    let record_columns = (1usize << record_level) + 1;
    let mode = model.kernel.mode();
    let seed = config.seed;

    let mut x = vec![0.0; n * d];
    let mut rngs: Vec<ChaCha8Rng> = x
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, xi)| {
            let key = StreamKey::new(seed, 1, level, i as u64 + 1, StreamRole::InitialCondition);
            sampler.sample(&mut key.stream(), xi);
            key.with_role(StreamRole::Brownian).stream()
        })
        .collect();
    let mut recorded = vec![0.0; n * record_columns * d];
    let record = |recorded: &mut [f64], x: &[f64], col: usize| {
        for (i, xi) in x.chunks_exact(d).enumerate() {
            let at = (i * record_columns + col) * d;
            recorded[at..at + d].copy_from_slice(xi);
        }
    };
    record(&mut recorded, &x, 0);
    let payoff = &model.payoff;
    let payoff_mean = |x: &[f64]| chunked_mean(x, d, 1, |xi, o| o[0] = payoff.eval(xi))[0];
    let mut estimate_path = Vec::with_capacity(grid.len());
    estimate_path.push(payoff_mean(&x));

    let mut next = vec![0.0; n * d];
    let mut evaluations = 0u64;
    let clamp = config.drift_clamp;
    for k in 0..grid.steps() {
        let moments = match &model.kernel {
            KernelModel::Moment(km) => {
                evaluations += 2 * particles;
                Some(chunked_mean(&x, d, km.features(), |xi, o| km.eval_features(xi, o)))
            }
            KernelModel::Interacting(_) => {
                evaluations += particles * particles;
                None
            }
        };
        let current = &x;
        let failure = next
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(i, (out, rng))| {
                let xi = &current[i * d..(i + 1) * d];
                let mut drift = vec![0.0; d];
                let mut diffusion = vec![0.0; d * r];
                match (&model.kernel, &moments) {
                    (KernelModel::Moment(km), Some(m)) => km.coefficients(xi, m, &mut drift, &mut diffusion),
                    (KernelModel::Interacting(kernel), _) => {
                        interacting_field(kernel, xi, current, &mut drift, &mut diffusion)
                    }
                    _ => unreachable!(),
                }
                if let Some([lo, hi]) = clamp {
                    drift.iter_mut().for_each(|b| *b = b.clamp(lo, hi));
                }
                let mut dw = vec![0.0; r];
                fill_increments(rng, h, &mut dw);
                for c in 0..d {
                    let mut v = xi[c] + drift[c] * h;
                    for j in 0..r {
                        v += diffusion[c * r + j] * dw[j];
                    }
                    out[c] = v;
                }
                if out.iter().all(|v| v.is_finite()) {
                    None
                } else {
                    Some(i)
                }
            })
            .filter_map(|f| f)
            .min();
        if let Some(i) = failure {
            return Err(Error::NonFinite {
                picard_step: 0,
                level,
                particle: i as u64 + 1,
                time_index: k + 1,
            });
        }
        std::mem::swap(&mut x, &mut next);
        if (k + 1) % stride == 0 {
            record(&mut recorded, &x, (k + 1) / stride);
        }
        estimate_path.push(payoff_mean(&x));
    }
    drop(rngs);
    let cloud = ParticleCloud::new(TimeGrid::new(record_level, model.horizon)?, d, n, recorded)?;
    Ok(SimulationOutput {
        kind: SchemeKind::Classical,
        measure: MlmcMeasure::single(1, cloud),
        history: Vec::new(),
        estimate_path,
        report_level: level,
        horizon: model.horizon,
        cost: CostLedger {
            mode,
            predicted: config.predicted_cost(model.horizon, mode),
            measured: evaluations,
            per_step: vec![evaluations],
        },
        wall_seconds: 0.0,
    })
}

fn interacting_field(kernel: &InteractingKernelModel, x: &[f64], cloud: &[f64], drift: &mut [f64], diffusion: &mut [f64]) {
    let d = kernel.dim;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; diffusion.len()];
    drift.fill(0.0);
    diffusion.fill(0.0);
    for y in cloud.chunks_exact(d) {
        kernel.drift(x, y, &mut b);
        kernel.diffusion(x, y, &mut s);
        drift.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
        diffusion.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
    }
    let n = (cloud.len() / d) as f64;
    drift.iter_mut().for_each(|a| *a /= n);
    diffusion.iter_mut().for_each(|a| *a /= n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        kuramoto_interacting_model, kuramoto_model, ornstein_uhlenbeck_interacting_model,
        ornstein_uhlenbeck_model, InitialLaw, Payoff,
    };
    use crate::rng::{coarsen, fine_path};

    #[test]
    fn single_particle_kuramoto_is_brownian() {
        let model = kuramoto_model();
        let out = simulate_classical(&model, 1, 5, 17).unwrap();
        let key = StreamKey::new(17, 1, 5, 1, StreamRole::InitialCondition);
        let path = fine_path(key, 5, 1.0, 1).unwrap();
        let cloud = &out.measure.terms()[0].fine;
        let mut w = 0.0;
        for k in 0..32 {
            w += path.increment(k)[0];
            assert_eq!(cloud.state(0, k + 1)[0], w);
        }
    }

    #[test]
    fn single_particle_interacting_kuramoto_is_brownian() {
        let out = simulate_classical(&kuramoto_interacting_model(), 1, 4, 3).unwrap();
        let key = StreamKey::new(3, 1, 4, 1, StreamRole::InitialCondition);
        let path = fine_path(key, 4, 1.0, 1).unwrap();
        let terminal: f64 = path.increments().iter().sum();
        assert!((out.measure.terms()[0].fine.terminal(0)[0] - terminal).abs() < 1e-14);
    }

    #[test]
    fn picard_first_step_from_point_mass_has_zero_initial_drift() {
        // M^(0) = δ0: drift sin(x)·1 − cos(x)·0 at x = 0 is 0, so the first
        // increment is the Brownian increment alone.
        let model = kuramoto_model();
        let out = simulate_picard_mc(&model, &[4], 3, 9).unwrap();
        let key = StreamKey::new(9, 1, 3, 2, StreamRole::InitialCondition);
        let path = fine_path(key, 3, 1.0, 1).unwrap();
        assert_eq!(out.measure.terms()[0].fine.state(1, 1)[0], path.increment(0)[0]);
    }

    #[test]
    fn decoupled_one_step_picard_replays_classical() {
        let model = ornstein_uhlenbeck_model(1.0);
        let a = simulate_classical(&model, 50, 6, 4).unwrap();
        let b = simulate_picard_mc(&model, &[50], 6, 4).unwrap();
        assert_eq!(a.measure.terms()[0].fine, b.measure.terms()[0].fine);
        let ai = simulate_classical(&ornstein_uhlenbeck_interacting_model(1.0), 50, 6, 4).unwrap();
        assert_eq!(ai.measure.terms()[0].fine, a.measure.terms()[0].fine);
    }

    #[test]
    fn mlmc_pairs_share_coarsened_noise() {
        let model = ornstein_uhlenbeck_model(0.5);
        let out = simulate_picard_mlmc(&model, &[vec![8, 4, 2, 2]], 21).unwrap();
        let term = &out.measure.terms()[3];
        let coarse = term.coarse.as_ref().unwrap();
        for i in 0..2 {
            let key = StreamKey::new(21, 1, 3, i as u64 + 1, StreamRole::InitialCondition);
            let fine_inc = fine_path(key, 3, 1.0, 1).unwrap();
            let coarse_inc = coarsen(&fine_inc).unwrap();
            // b = −x, σ = 1, explicit Euler on the coarse grid.
            let mut x = 0.5;
            for k in 0..4 {
                x = x + (-x) * 0.25 + coarse_inc.increment(k)[0];
                assert_eq!(coarse.state(i, k + 1)[0], x);
            }
        }
    }

    #[test]
    fn one_step_one_level_is_frozen_measure_euler() {
        // M = 1, L = 0, frozen δ0: the drift uses ⟨δ0, ·⟩ throughout.
        let model = kuramoto_model();
        let out = simulate_picard_mlmc(&model, &[vec![3]], 5).unwrap();
        for i in 0..3 {
            let key = StreamKey::new(5, 1, 0, i as u64 + 1, StreamRole::InitialCondition);
            let dw = fine_path(key, 0, 1.0, 1).unwrap().increment(0)[0];
            assert_eq!(out.measure.terms()[0].fine.state(i, 1)[0], dw);
        }
    }

    #[test]
    fn payoff_one_estimates_exactly_one() {
        let model = kuramoto_model().with_payoff(Payoff::Constant(1.0));
        let out = simulate(
            &model,
            &SchemeConfig::picard_mlmc(vec![vec![16, 8, 4]; 2], 1).initial_measure(InitialMeasure::ModelPrior),
        )
        .unwrap();
        assert!(out.estimate_path.iter().all(|&v| v == 1.0));
        assert_eq!(estimate(&out, |_| 1.0, 0.3).unwrap(), 1.0);
        assert_eq!(out.estimate_path.len(), 5);
    }

    #[test]
    fn classical_terminal_estimate_is_plain_average() {
        let model = kuramoto_model();
        let out = simulate_classical(&model, 37, 3, 2).unwrap();
        let cloud = &out.measure.terms()[0].fine;
        let direct: f64 = (0..37).map(|i| model.payoff.eval(cloud.terminal(i))).sum::<f64>() / 37.0;
        assert!((estimate(&out, |x| model.payoff.eval(x), 1.0).unwrap() - direct).abs() < 1e-14);
        assert!((out.terminal_estimate() - direct).abs() < 1e-14);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let model = kuramoto_interacting_model();
        let cfg = SchemeConfig::picard_mlmc(vec![vec![40, 20, 10], vec![60, 30, 15]], 8)
            .initial_measure(InitialMeasure::ModelPrior);
        let one = simulate(&model, &cfg.clone().workers(1)).unwrap();
        let four = simulate(&model, &cfg.workers(4)).unwrap();
        assert_eq!(one.measure, four.measure);
        assert_eq!(one.estimate_path, four.estimate_path);
        let c1 = simulate(&kuramoto_model(), &SchemeConfig::classical(3000, 4, 1).workers(1)).unwrap();
        let c3 = simulate(&kuramoto_model(), &SchemeConfig::classical(3000, 4, 1).workers(3)).unwrap();
        assert_eq!(c1.estimate_path, c3.estimate_path);
    }

    #[test]
    fn classical_record_level_subsamples() {
        let model = kuramoto_model();
        let full = simulate_classical(&model, 20, 4, 6).unwrap();
        let sub = simulate(&model, &SchemeConfig::classical(20, 4, 6).record_level(1)).unwrap();
        let (a, b) = (&full.measure.terms()[0].fine, &sub.measure.terms()[0].fine);
        for i in 0..20 {
            assert_eq!(b.state(i, 1), a.state(i, 8));
            assert_eq!(b.terminal(i), a.terminal(i));
        }
        assert_eq!(full.estimate_path, sub.estimate_path);
    }

    #[test]
    fn non_finite_states_abort_with_location() {
        use std::sync::Arc;
        let exploding = InteractingKernelModel::new(
            1,
            1,
            Arc::new(|x, _, o| o[0] = 1e200 * x[0].abs().max(1.0)),
            Arc::new(|_, _, o| o[0] = 0.0),
            InitialLaw::point(1.0),
        );
        let mut model = ornstein_uhlenbeck_interacting_model(1.0);
        model.kernel = KernelModel::Interacting(exploding);
        let err = simulate_picard_mc(&model, &[3], 2, 1).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                picard_step: 1,
                level: 2,
                particle: 1,
                time_index: 2
            }
        );
        assert!(matches!(
            simulate_classical(&model, 3, 2, 1),
            Err(Error::NonFinite { particle: 1, time_index: 2, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let model = kuramoto_model();
        assert!(simulate_classical(&model, 0, 2, 1).is_err());
        assert!(simulate_picard_mc(&model, &[], 2, 1).is_err());
        assert!(simulate_picard_mlmc(&model, &[vec![2, 1], vec![3]], 1).is_err());
        assert!(simulate_picard_mlmc(&model, &[vec![2, 0]], 1).is_err());
        let burgers = crate::models::burgers_model();
        let err = simulate(
            &burgers,
            &SchemeConfig::picard_mc(vec![2], 1, 1).initial_measure(InitialMeasure::ModelPrior),
        );
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn drift_clamp_bounds_the_drift() {
        // Clamping the OU drift −x to [0, 0] leaves x0 + W.
        let model = ornstein_uhlenbeck_interacting_model(0.7);
        let out = simulate(&model, &SchemeConfig::picard_mc(vec![3], 3, 2).drift_clamp(0.0, 0.0)).unwrap();
        let key = StreamKey::new(2, 1, 3, 3, StreamRole::InitialCondition);
        let path = fine_path(key, 3, 1.0, 1).unwrap();
        let mut x = 0.7;
        for k in 0..8 {
            x += path.increment(k)[0];
            assert_eq!(out.measure.terms()[0].fine.state(2, k + 1)[0], x);
        }
    }

    #[test]
    fn moment_cost_matches_the_counter_model() {
        let model = kuramoto_model();
        let out = simulate_picard_mlmc(&model, &[vec![8, 4], vec![8, 4]], 1).unwrap();
        // Step 1: δ0 features (1 column on the constant cloud) + particle steps
        // 8·1 + 4·(2 + 1). Step 2: features of M^(1): 8·2 + 4·3 + 4·2, plus
        // the same particle steps.
        assert_eq!(out.cost.per_step, vec![1 + 8 + 12, 16 + 12 + 8 + 8 + 12]);
    }
}
