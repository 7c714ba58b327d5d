//! The shipped experiments, shared by the command-line runner and the
//! acceptance tests.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::bound::{
    annealed_bound, importance_sampling_log_marginal, AnnealingSchedule, AutoregressiveReverse, ChainModel,
    ChainNoise, HmcOperator, InverseModel, MlpMomentumInverse, MomentumInverse, PilotPairs, SweepOperator, TemperedGibbs,
};
use crate::error::{check_dim, Error, Result};
use crate::exact::{
    exact_kl, exact_sweep_chain_bound, expected_chain_bound, log_normalizer, marginal_q_density, r_squared_accuracy,
    DensityTable, Grid, HviStep, MomentumGrid, MIN_POINTS,
};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::optimize::{
    evaluate, mcvi_optimize, sequential_mcvi, stream_rng, AdamConfig, EvalFn, Objective, SequentialConfig, Stats, Tick, Trace,
    TrainConfig,
};
use crate::params::{GaussianModel, LinearGaussianModel, Params};
use crate::targets::{
    BetaBinomial, BivariateGaussian, DecoderTarget, OverdispersionData, TargetDensity, ToyDecoder,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    GaussGibbs,
    GaussOverrelax,
    BetabinomHvi,
    ToyDecoderHvi,
    AnnealedGauss,
    SequentialGauss,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::GaussGibbs,
        Experiment::GaussOverrelax,
        Experiment::BetabinomHvi,
        Experiment::ToyDecoderHvi,
        Experiment::AnnealedGauss,
        Experiment::SequentialGauss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::GaussGibbs => "gauss-gibbs",
            Experiment::GaussOverrelax => "gauss-overrelax",
            Experiment::BetabinomHvi => "betabinom-hvi",
            Experiment::ToyDecoderHvi => "toy-decoder-hvi",
            Experiment::AnnealedGauss => "annealed-gauss",
            Experiment::SequentialGauss => "sequential-gauss",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment {s:?}")))
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Chain length `T`.
    pub steps: usize,
    /// Leapfrog iterations per Hamiltonian step.
    pub leapfrog: usize,
    /// Number of final iterates in the mixture bound.
    pub mixture_k: usize,
    /// One reverse model shared by all steps instead of one per step.
    pub tied_inverse: bool,
    /// Momentum model inputs: 0 for a fixed Gaussian, 2 for `(z, grad log p)`.
    pub momentum_inputs: usize,
    /// Initial over-relaxation parameter.
    pub alpha_init: f64,
    /// Chains used to fit the reverse models by least squares.
    pub pilot: usize,
    /// Refit the reverse models every this many iterations (0 fits them once).
    pub refit_every: usize,
    /// Estimates used for the final evaluation.
    pub eval_draws: usize,
    /// Iterations fitting `q0` alone before a Hamiltonian chain is trained.
    pub warmup: usize,
    /// Nodes per axis of the quadrature oracles.
    pub grid_points: usize,
    /// Adds wall-clock seconds to every result row.
    pub record_timing: bool,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Defaults tuned for `experiment`.
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        let train = TrainConfig {
            seed,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let mut cfg = Self {
            experiment,
            steps: 10,
            leapfrog: 1,
            mixture_k: 1,
            tied_inverse: false,
            momentum_inputs: 2,
            alpha_init: 0.0,
            pilot: 4000,
            refit_every: 0,
            eval_draws: 4000,
            warmup: 3000,
            grid_points: 48,
            record_timing: false,
            train,
        };
        match experiment {
            Experiment::GaussGibbs | Experiment::GaussOverrelax => {
                cfg.train.iterations = 16000;
                cfg.train.eval_every = 500;
                cfg.refit_every = 500;
            }
            Experiment::SequentialGauss => {
                cfg.steps = 5;
                cfg.train.iterations = 2000;
                cfg.train.eval_every = 0;
                cfg.refit_every = 250;
            }
            Experiment::BetabinomHvi | Experiment::ToyDecoderHvi => {
                cfg.steps = 1;
                cfg.train.iterations = 3000;
                cfg.train.eval_every = 1000;
            }
            Experiment::AnnealedGauss => {
                cfg.train.iterations = 3000;
                cfg.train.adam.step_size = 1e-2;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.momentum_inputs > 2 {
            return Err(Error::invalid("momentum_inputs must be 0, 1 or 2"));
        }
        if !(self.alpha_init.abs() < 1.0) {
            return Err(Error::invalid("alpha_init must lie in (-1, 1)"));
        }
        if self.mixture_k == 0 || self.mixture_k > self.steps + 1 {
            return Err(Error::invalid(format!(
                "mixture_k must lie in 1..={}, got {}",
                self.steps + 1,
                self.mixture_k
            )));
        }
        if self.eval_draws < 2 {
            return Err(Error::invalid("eval_draws must be at least 2"));
        }
        if self.grid_points < MIN_POINTS {
            return Err(Error::invalid(format!("grid_points must be at least {MIN_POINTS}")));
        }
        if self.pilot < 16 {
            return Err(Error::invalid("pilot must be at least 16"));
        }
        match self.experiment {
            Experiment::BetabinomHvi | Experiment::ToyDecoderHvi if self.steps != 1 => {
                Err(Error::invalid("hamiltonian experiments use steps = 1"))
            }
            Experiment::AnnealedGauss | Experiment::SequentialGauss if self.steps == 0 => {
                Err(Error::invalid("steps must be at least 1"))
            }
            Experiment::SequentialGauss if self.tied_inverse => {
                Err(Error::invalid("sequential growth needs one reverse model per step"))
            }
            _ => Ok(()),
        }
    }
}

/// One evaluation tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub iteration: usize,
    pub smoothed: f64,
    pub exact_bound: Option<f64>,
    pub exact_kl: Option<f64>,
    pub r_squared: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub params: Params,
    /// Named scalar results of the run, in a fixed order.
    pub summary: Vec<(String, f64)>,
}

impl RunOutput {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// `sigma1 = 1, sigma2 = 10`.
pub fn bivariate_target() -> BivariateGaussian {
    BivariateGaussian::new(1.0, 10.0).expect("valid scales")
}

/// Chain start `N((-10, -10), 1e-10 I)`.
pub const CHAIN_START: [f64; 2] = [-10.0, -10.0];
pub const CHAIN_START_VAR: f64 = 1e-10;

pub type SweepChain<'a> = ChainModel<'a, BivariateGaussian, SweepOperator, AutoregressiveReverse>;

/// Sweep chain from the fixed start with pilot-fitted reverse models.
pub fn gauss_chain<'a>(
    target: &'a BivariateGaussian,
    params: &mut Params,
    cfg: &ExperimentConfig,
    overrelax: bool,
) -> Result<SweepChain<'a>> {
    let log_std = 0.5 * CHAIN_START_VAR.ln();
    let q0 = GaussianModel::add(params, "q0", CHAIN_START.to_vec(), vec![log_std; 2], false);
    let alphas = if overrelax {
        vec![params.add("alpha", vec![cfg.alpha_init], true)]
    } else {
        Vec::new()
    };
    let op = SweepOperator::new(target, alphas)?;
    fit_reverse(target, params, q0, op, cfg)
}

/// Attaches reverse models fitted by least squares on pilot chains.
fn fit_reverse<'a>(
    target: &'a BivariateGaussian,
    params: &mut Params,
    q0: GaussianModel,
    op: SweepOperator,
    cfg: &ExperimentConfig,
) -> Result<SweepChain<'a>> {
    let mut chain = ChainModel {
        target,
        q0,
        op,
        inverse: AutoregressiveReverse { models: Vec::new() },
        steps: cfg.steps,
    };
    if cfg.steps == 0 {
        return Ok(chain);
    }
    let pilot = pilot_sets(&chain, params.values(), cfg, 0)?;
    let mut rng = stream_rng(cfg.train.seed, &[0x9171]);
    chain.inverse = AutoregressiveReverse::add_fitted(params, "r", &pilot, &mut rng)?;
    Ok(chain)
}

fn pilot_sets(chain: &SweepChain<'_>, theta: &[f64], cfg: &ExperimentConfig, tag: u64) -> Result<Vec<PilotPairs>> {
    let mut rng = stream_rng(cfg.train.seed, &[0x9170, tag]);
    let pilot = chain.pilot(theta, cfg.pilot, &mut rng)?;
    Ok(if cfg.tied_inverse { vec![pilot.concat()] } else { pilot })
}

/// Adam on the chain bound, with the reverse models refitted by least squares
/// every `cfg.refit_every` iterations. Each block restarts the optimizer state.
fn train_sweep_chain(
    chain: &mut SweepChain<'_>,
    params: &mut Params,
    cfg: &ExperimentConfig,
    mut eval: impl FnMut(&SweepChain<'_>, &[f64]) -> Result<Vec<f64>>,
) -> Result<Trace> {
    let block = if cfg.refit_every == 0 || chain.steps == 0 {
        cfg.train.iterations
    } else {
        cfg.refit_every
    };
    let mut trace = Trace::default();
    let mut done = 0;
    let mut b = 0u64;
    let refit = cfg.refit_every > 0 && chain.steps > 0;
    let total = cfg.train.iterations;
    let every = cfg.train.eval_every;
    let is_tick = |it: usize| every > 0 && (it.is_multiple_of(every) || it == total);
    while done < total {
        let n = block.min(total - done);
        let tc = TrainConfig {
            iterations: n,
            seed: stream_rng(cfg.train.seed, &[0xb10c, b]).next_u64(),
            eval_every: usize::from(every > 0),
            ..cfg.train.clone()
        };
        let part = {
            let frozen: &SweepChain<'_> = chain;
            let mut mid = |local: usize, theta: &[f64]| -> Result<Vec<f64>> {
                if local < n && is_tick(done + local) {
                    eval(frozen, theta)
                } else {
                    Ok(Vec::new())
                }
            };
            mcvi_optimize(frozen, params, &tc, Some(&mut mid))?
        };
        if refit {
            let pilot = pilot_sets(chain, params.values(), cfg, b + 1)?;
            chain.inverse.refit(params, &pilot)?;
        }
        trace.batch_means.extend(&part.batch_means);
        for tick in part.ticks {
            let it = done + tick.iteration;
            if !is_tick(it) {
                continue;
            }
            let metrics = if tick.iteration == n {
                eval(chain, params.values())?
            } else {
                tick.metrics
            };
            trace.ticks.push(Tick {
                iteration: it,
                smoothed: trace.smoothed_at(it - 1, cfg.train.smoothing),
                metrics,
            });
        }
        trace.failed_draws += part.failed_draws;
        trace.attempted_draws += part.attempted_draws;
        done += n;
        b += 1;
    }
    Ok(trace)
}

/// The clock is read only when timing is recorded.
fn clock(cfg: &ExperimentConfig) -> Option<Instant> {
    cfg.record_timing.then(Instant::now)
}

fn with_time(mut metrics: Vec<f64>, start: Option<Instant>) -> Vec<f64> {
    if let Some(start) = start {
        metrics.push(start.elapsed().as_secs_f64());
    }
    metrics
}

fn rows_from_trace(trace: &Trace, layout: &[Metric], record_timing: bool) -> Vec<ResultRow> {
    trace
        .ticks
        .iter()
        .map(|t| {
            let mut row = ResultRow {
                iteration: t.iteration,
                smoothed: t.smoothed,
                exact_bound: None,
                exact_kl: None,
                r_squared: None,
                seconds: None,
            };
            for (m, &v) in layout.iter().zip(&t.metrics) {
                match m {
                    Metric::Bound => row.exact_bound = Some(v),
                    Metric::Kl => row.exact_kl = Some(v),
                    Metric::RSquared => row.r_squared = Some(v),
                }
            }
            if record_timing {
                row.seconds = t.metrics.last().copied();
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Metric {
    Bound,
    Kl,
    RSquared,
}

fn push_stats(summary: &mut Vec<(String, f64)>, name: &str, s: Stats) {
    summary.push((format!("{name}_mean"), s.mean));
    summary.push((format!("{name}_se"), s.se));
}

fn run_gauss(cfg: &ExperimentConfig, overrelax: bool) -> Result<RunOutput> {
    let start = clock(cfg);
    let target = bivariate_target();
    let mut params = Params::new();
    let mut chain = gauss_chain(&target, &mut params, cfg, overrelax)?;
    let trace = train_sweep_chain(&mut chain, &mut params, cfg, |c, theta| {
        let b = exact_sweep_chain_bound(c, theta)?.value();
        Ok(with_time(vec![b], start))
    })?;
    let theta = params.values();
    let exact = exact_sweep_chain_bound(&chain, theta)?;
    let mut summary = Vec::new();
    if overrelax {
        summary.push(("alpha".to_string(), chain.op.alpha(theta, 1)));
    }
    summary.push(("exact_bound".to_string(), exact.value()));
    let prefix = exact.prefix();
    let mix = crate::bound::mixture_iterates_bound(&prefix, cfg.mixture_k)?;
    summary.push(("exact_mixture_bound".to_string(), mix));
    push_stats(&mut summary, "bound", evaluate(&chain, theta, cfg.eval_draws, cfg.train.seed, 1)?);
    summary.push(("log_normalizer".to_string(), log_normalizer_of(&target)));
    Ok(RunOutput {
        rows: rows_from_trace(&trace, &[Metric::Bound], cfg.record_timing),
        params,
        summary,
    })
}

fn run_sequential(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = clock(cfg);
    let target = bivariate_target();
    let mut params = Params::new();
    let log_std = 0.5 * CHAIN_START_VAR.ln();
    let q0 = GaussianModel::add(&mut params, "q0", CHAIN_START.to_vec(), vec![log_std; 2], false);
    let alphas = (0..cfg.steps)
        .map(|t| params.add(format!("alpha.{t}"), vec![cfg.alpha_init], true))
        .collect();
    let op = SweepOperator::new(&target, alphas)?;
    let mut chain = fit_reverse(&target, &mut params, q0, op, cfg)?;
    let step_groups: Vec<Vec<String>> = (0..cfg.steps)
        .map(|t| {
            let prefix = format!("r.{t}.");
            std::iter::once(format!("alpha.{t}"))
                .chain(
                    params
                        .groups()
                        .iter()
                        .filter(|g| g.name.starts_with(&prefix))
                        .map(|g| g.name.clone()),
                )
                .collect()
        })
        .collect();
    let seq_cfg = SequentialConfig {
        train: cfg.train.clone(),
        block: cfg.refit_every,
        eval_draws: cfg.eval_draws,
        eval_tag: 1,
    };
    let mut finished = vec![0.0; cfg.steps];
    let seed = cfg.train.seed;
    let pilot = cfg.pilot;
    let result = sequential_mcvi(&mut chain, &mut params, &step_groups, &seq_cfg, |c, p, b| {
        let t = c.steps;
        let mut rng = stream_rng(seed, &[0x9172, t as u64, b as u64]);
        let sets = c.pilot(p.values(), pilot, &mut rng)?;
        c.inverse.refit_set(p, t - 1, &sets[t - 1])?;
        if let Some(start) = start {
            finished[t - 1] = start.elapsed().as_secs_f64();
        }
        Ok(())
    })?;
    let theta = params.values();
    let prefix = exact_sweep_chain_bound(&chain, theta)?.prefix();
    let rows = result
        .traces
        .iter()
        .enumerate()
        .map(|(i, tr)| ResultRow {
            iteration: (i + 1) * cfg.train.iterations,
            smoothed: tr.smoothed_at(tr.batch_means.len().saturating_sub(1), cfg.train.smoothing),
            exact_bound: Some(prefix[i + 1]),
            exact_kl: None,
            r_squared: None,
            seconds: cfg.record_timing.then_some(finished[i]),
        })
        .collect();
    let mut summary = Vec::new();
    let mut stopped = chain.clone();
    stopped.steps = 0;
    let initial = evaluate(&stopped, theta, cfg.eval_draws, seed, 1)?;
    push_stats(&mut summary, "initial", initial);
    let mut total = initial.mean;
    for (t, g) in result.gains.iter().enumerate() {
        push_stats(&mut summary, &format!("gain.{}", t + 1), *g);
        summary.push((format!("alpha.{}", t + 1), chain.op.alpha(theta, t + 1)));
        total += g.mean;
    }
    summary.push(("telescoped".to_string(), total));
    let paired = evaluate(&chain, theta, cfg.eval_draws, seed, 1)?;
    push_stats(&mut summary, "joint_paired", paired);
    push_stats(&mut summary, "joint", evaluate(&chain, theta, cfg.eval_draws, seed, 2)?);
    summary.push(("exact_bound".to_string(), prefix[cfg.steps]));
    summary.push(("log_normalizer".to_string(), log_normalizer_of(&target)));
    Ok(RunOutput { rows, params, summary })
}

fn log_normalizer_of<T: TargetDensity>(target: &T) -> f64 {
    target.known_log_normalizer().unwrap_or(f64::NAN)
}

/// Paired single-noise estimates of the annealed bound and of the ELBO of the
/// annealing start `q0`.
struct AnnealedPair<'a> {
    target: &'a BivariateGaussian,
    q0: GaussianModel,
    schedule: AnnealingSchedule,
    gibbs: TemperedGibbs,
    part: AnnealedPart,
}

#[derive(Clone, Copy)]
enum AnnealedPart {
    Annealed,
    Elbo,
    Difference,
}

impl Objective for AnnealedPair<'_> {
    fn estimate<S: Real>(&self, theta: &[S], rng: &mut ChaCha8Rng) -> Result<S> {
        let dim = self.target.dim();
        let noise = ChainNoise::draw(rng, dim, self.schedule.steps(), dim);
        let q0 = self.q0.build(theta)?;
        let annealed = annealed_bound(self.target, &q0, &self.schedule, &self.gibbs, &noise)?.value;
        let z0 = q0.sample_reparam(&noise.z0)?;
        let elbo = self.target.log_joint(&z0) - q0.log_pdf(&z0)?;
        Ok(match self.part {
            AnnealedPart::Annealed => annealed,
            AnnealedPart::Elbo => elbo,
            AnnealedPart::Difference => annealed - elbo,
        })
    }
}

fn run_annealed(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = clock(cfg);
    let target = bivariate_target();
    let mut params = Params::new();
    let q0 = GaussianModel::add(&mut params, "q0", vec![0.0; 2], vec![0.0; 2], true);
    let elbo_chain = ChainModel {
        target: &target,
        q0,
        op: SweepOperator::new(&target, Vec::new())?,
        inverse: AutoregressiveReverse { models: Vec::new() },
        steps: 0,
    };
    let mut eval = |_: usize, theta: &[f64]| -> Result<Vec<f64>> {
        let b = exact_sweep_chain_bound(&elbo_chain, theta)?.value();
        Ok(with_time(vec![b], start))
    };
    let eval_fn: &mut EvalFn = &mut eval;
    let trace = mcvi_optimize(&elbo_chain, &mut params, &cfg.train, Some(eval_fn))?;
    let theta = params.values();
    let pair = |part| -> Result<AnnealedPair<'_>> {
        Ok(AnnealedPair {
            target: &target,
            q0,
            schedule: AnnealingSchedule::linear(cfg.steps)?,
            gibbs: TemperedGibbs::new(&target)?,
            part,
        })
    };
    let seed = cfg.train.seed;
    let mut summary = Vec::new();
    summary.push((
        "exact_elbo".to_string(),
        exact_sweep_chain_bound(&elbo_chain, theta)?.value(),
    ));
    for (name, part) in [
        ("annealed", AnnealedPart::Annealed),
        ("elbo", AnnealedPart::Elbo),
        ("improvement", AnnealedPart::Difference),
    ] {
        push_stats(&mut summary, name, evaluate(&pair(part)?, theta, cfg.eval_draws, seed, 1)?);
    }
    summary.push(("log_normalizer".to_string(), log_normalizer_of(&target)));
    Ok(RunOutput {
        rows: rows_from_trace(&trace, &[Metric::Bound], cfg.record_timing),
        params,
        summary,
    })
}

pub type HviChain<'a, T> = ChainModel<'a, T, HmcOperator, MomentumInverse>;

/// Initial leapfrog step size in units of the `q0` scale.
const STEP_INIT: f64 = 0.5;

/// `q0 = N(mean, exp(log_std)^2)` and a Hamiltonian operator whose step size,
/// mass and momentum model are placeholders until [`init_dynamics`].
fn hmc_parts(
    params: &mut Params,
    cfg: &ExperimentConfig,
    mean: Vec<f64>,
    log_std: Vec<f64>,
    rng: &mut impl Rng,
) -> (GaussianModel, HmcOperator) {
    let d = mean.len();
    let q0 = GaussianModel::add(params, "q0", mean, log_std, true);
    let log_step = params.add("log_step", vec![STEP_INIT.ln()], true);
    let log_mass = params.add("log_mass", vec![0.0; d], true);
    let inputs = vec![d; cfg.momentum_inputs];
    let momentum = LinearGaussianModel::add(params, "momentum", d, &inputs, vec![0.0; d], rng);
    let op = HmcOperator {
        log_step,
        log_mass,
        leapfrog_steps: cfg.leapfrog,
        momentum: vec![momentum],
    };
    (q0, op)
}

/// One Hamiltonian step with a linear-Gaussian reverse model of the same form
/// as the momentum model.
pub fn hvi_chain<'a, T: TargetDensity>(
    target: &'a T,
    params: &mut Params,
    cfg: &ExperimentConfig,
    mean: Vec<f64>,
    log_std: Vec<f64>,
) -> Result<HviChain<'a, T>> {
    let d = target.dim();
    check_dim("q0 mean", d, mean.len())?;
    let mut rng = stream_rng(cfg.train.seed, &[0x3017]);
    let (q0, op) = hmc_parts(params, cfg, mean, log_std, &mut rng);
    let inputs = vec![d; cfg.momentum_inputs];
    let inverse = LinearGaussianModel::add(params, "r", d, &inputs, vec![0.0; d], &mut rng);
    Ok(ChainModel {
        target,
        q0,
        op,
        inverse: MomentumInverse { models: vec![inverse] },
        steps: cfg.steps,
    })
}

/// Scales the dynamics to the current `q0`: mass `diag(1 / sigma^2)`, step
/// [`STEP_INIT`], and the momentum model `N(0, M)`. Returns the `q0` log-scale.
pub fn init_dynamics(q0: &GaussianModel, op: &HmcOperator, params: &mut Params) -> Vec<f64> {
    let log_std = q0.log_std.get(params.values()).to_vec();
    let theta = params.values_mut();
    op.log_step.get_mut(theta)[0] = STEP_INIT.ln();
    for (m, s) in op.log_mass.get_mut(theta).iter_mut().zip(&log_std) {
        *m = -2.0 * s;
    }
    for model in &op.momentum {
        reset_to_mass(model, theta, &log_std);
    }
    log_std
}

fn reset_to_mass(model: &LinearGaussianModel, theta: &mut [f64], q0_log_std: &[f64]) {
    for (l, s) in model.log_std.get_mut(theta).iter_mut().zip(q0_log_std) {
        *l = -s;
    }
    model.bias.get_mut(theta).fill(0.0);
}

/// [`init_dynamics`] plus the reverse model set to `N(0, M)`.
pub fn init_hmc_from_q0<T: TargetDensity>(chain: &HviChain<'_, T>, params: &mut Params) {
    let log_std = init_dynamics(&chain.q0, &chain.op, params);
    for model in &chain.inverse.models {
        reset_to_mass(model, params.values_mut(), &log_std);
    }
}

/// Fits `q0` alone for `cfg.warmup` iterations at step size 1e-2.
fn warmup_q0<T, I>(chain: &mut ChainModel<'_, T, HmcOperator, I>, params: &mut Params, cfg: &ExperimentConfig) -> Result<()>
where
    T: TargetDensity,
    I: InverseModel<T>,
{
    if cfg.warmup == 0 {
        return Ok(());
    }
    let saved: Vec<(String, bool)> = params
        .groups()
        .iter()
        .map(|g| (g.name.clone(), g.trainable))
        .collect();
    params.freeze_all();
    params.set_trainable("q0.mean", true)?;
    params.set_trainable("q0.log_std", true)?;
    let steps = chain.steps;
    chain.steps = 0;
    let warm = TrainConfig {
        iterations: cfg.warmup,
        seed: stream_rng(cfg.train.seed, &[0x3a2b]).next_u64(),
        eval_every: 0,
        adam: AdamConfig {
            step_size: 1e-2,
            ..cfg.train.adam
        },
        ..cfg.train.clone()
    };
    let result = mcvi_optimize(&*chain, params, &warm, None);
    chain.steps = steps;
    for (name, trainable) in saved {
        params.set_trainable(&name, trainable)?;
    }
    result.map(|_| ())
}

pub type ToyChain<'a> = ChainModel<'a, DecoderTarget, HmcOperator, MlpMomentumInverse>;

/// Hidden units of the toy decoder reverse network.
const TOY_REVERSE_HIDDEN: usize = 32;

/// One Hamiltonian step on the toy decoder posterior with a network reverse
/// model.
pub fn toy_chain<'a>(target: &'a DecoderTarget, params: &mut Params, cfg: &ExperimentConfig) -> ToyChain<'a> {
    let mut rng = stream_rng(cfg.train.seed, &[0x3017]);
    let d = target.dim();
    let (q0, op) = hmc_parts(params, cfg, vec![0.0; d], vec![0.0; d], &mut rng);
    let inverse = MlpMomentumInverse::add(params, "r", d, TOY_REVERSE_HIDDEN, &mut rng);
    ChainModel {
        target,
        q0,
        op,
        inverse,
        steps: cfg.steps,
    }
}

/// [`init_dynamics`], then standardizes the network input by `q0` and sets its
/// output to `N(0, M)`.
pub fn init_toy_from_q0(chain: &mut ToyChain<'_>, params: &mut Params) {
    let log_std = init_dynamics(&chain.q0, &chain.op, params);
    let theta = params.values_mut();
    chain.inverse.input_center = chain.q0.mean.get(theta).to_vec();
    chain.inverse.input_scale = log_std.iter().map(|s| s.exp()).collect();
    for (b, s) in chain.inverse.b_log_std.get_mut(theta).iter_mut().zip(&log_std) {
        *b = -s;
    }
    chain.inverse.b_mean.get_mut(theta).fill(0.0);
}

/// The final-state marginal of a one-step chain against the posterior, as
/// `(KL(q || p), R^2)`.
pub fn hvi_accuracy<T: TargetDensity>(
    chain: &HviChain<'_, T>,
    theta: &[f64],
    log_z: f64,
    points: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if chain.steps != 1 {
        return Err(Error::invalid("the marginal oracle needs a one-step chain"));
    }
    let mut rng = stream_rng(seed, &[0x9d1d]);
    let finals: Vec<Vec<f64>> = chain.pilot(theta, 4000, &mut rng)?.remove(0).into_iter().map(|p| p.1).collect();
    let d = chain.target.dim();
    let n = finals.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| finals.iter().map(|z| z[j]).sum::<f64>() / n).collect();
    let half: Vec<f64> = (0..d)
        .map(|j| {
            let var = finals.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
            GRID_HALF_WIDTH * var.sqrt()
        })
        .collect();
    let grid = Grid::centered(&mean, &half, points)?;
    let step = HviStep {
        target: chain.target,
        q0: chain.q0.build(theta)?,
        momentum: chain.op.momentum[0].build(theta)?,
        hmc: chain.op.hmc_params(theta)?,
    };
    let placement = chain.inverse.models[0].build(theta)?;
    let mgrid = MomentumGrid {
        points,
        half_width: GRID_HALF_WIDTH,
    };
    let q = marginal_q_density(&step, &grid, &placement, &mgrid)?;
    let log_p = (0..grid.len()).map(|k| chain.target.log_joint(&grid.point(k)) - log_z).collect();
    let p = DensityTable::from_log_values(grid, log_p)?;
    Ok((exact_kl(&q, &p)?, r_squared_accuracy(&q, &p)?))
}

/// Oracle grids span this many standard deviations each side.
const GRID_HALF_WIDTH: f64 = 8.0;

/// Posterior of the cancer mortality data in `(logit eta, log K)`.
pub fn betabinom_target() -> BetaBinomial {
    BetaBinomial::new(&OverdispersionData::cancer_mortality())
}

/// Quadrature grid holding the beta-binomial posterior.
pub fn betabinom_grid(points: usize) -> Result<Grid> {
    Grid::rect((-9.5, -2.5), (0.0, 28.0), points)
}

fn run_betabinom(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = clock(cfg);
    let target = betabinom_target();
    let log_z = log_normalizer(&target, &betabinom_grid(128)?)?;
    let mut params = Params::new();
    let mut chain = hvi_chain(&target, &mut params, cfg, vec![-6.0, 6.0], vec![0.0; 2])?;
    let seed = cfg.train.seed;
    let points = cfg.grid_points;
    let view = chain.clone();
    let mut eval = |_: usize, theta: &[f64]| -> Result<Vec<f64>> {
        let (kl, r2) = hvi_accuracy(&view, theta, log_z, points, seed)?;
        Ok(with_time(vec![kl, r2], start))
    };
    warmup_q0(&mut chain, &mut params, cfg)?;
    init_hmc_from_q0(&chain, &mut params);
    let trace = mcvi_optimize(&chain, &mut params, &cfg.train, Some(&mut eval))?;
    let theta = params.values();
    let (kl, r2) = hvi_accuracy(&chain, theta, log_z, points, seed)?;
    let mut summary = vec![("exact_kl".to_string(), kl), ("r_squared".to_string(), r2)];
    push_stats(&mut summary, "bound", evaluate(&chain, theta, cfg.eval_draws, seed, 1)?);
    summary.push(("log_normalizer".to_string(), log_z));
    summary.push(("step_size".to_string(), theta[chain.op.log_step.offset].exp()));
    Ok(RunOutput {
        rows: rows_from_trace(&trace, &[Metric::Kl, Metric::RSquared], cfg.record_timing),
        params,
        summary,
    })
}

/// The fixed decoder problem: a one-dimensional latent, 16 softplus units and
/// 16 binary outputs, with one observation drawn from the model.
pub fn toy_decoder_target() -> Result<DecoderTarget> {
    let mut rng = stream_rng(TOY_SEED, &[]);
    let decoder = ToyDecoder::random(1, 16, 16, 3.0, &mut rng)?;
    let z: f64 = rng.sample(StandardNormal);
    let x = decoder.sample(&[z], &mut rng);
    DecoderTarget::new(decoder, x)
}

const TOY_SEED: u64 = 4;

/// Grid holding the toy decoder posterior.
pub fn toy_decoder_grid() -> Result<Grid> {
    Grid::line(-10.0, 10.0, 2001)
}

/// Iterations of the low-noise phase closing every toy decoder stage.
const POLISH_ITERATIONS: usize = 2000;

/// Noise nodes per axis for the expected bound of the toy chain.
const NOISE_POINTS: usize = 121;

/// Trains `K = 0, 1, ..., cfg.leapfrog` in turn. Each stage starts from the
/// previous optimum with the step size scaled by `(K - 1) / K`, which keeps the
/// trajectory length.
fn run_toy_decoder(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = clock(cfg);
    let target = toy_decoder_target()?;
    let log_z = log_normalizer(&target, &toy_decoder_grid()?)?;
    let mut params = Params::new();
    let mut chain = toy_chain(&target, &mut params, cfg);
    chain.op.leapfrog_steps = 0;
    warmup_q0(&mut chain, &mut params, cfg)?;
    init_toy_from_q0(&mut chain, &mut params);
    let seed = cfg.train.seed;
    let mut summary = Vec::new();
    let mut rows = Vec::new();
    for k in 0..=cfg.leapfrog {
        chain.op.leapfrog_steps = k;
        if k > 1 {
            params.values_mut()[chain.op.log_step.offset] += ((k - 1) as f64 / k as f64).ln();
        }
        let view = chain.clone();
        let mut eval = |_: usize, theta: &[f64]| -> Result<Vec<f64>> {
            let b = expected_chain_bound(&view, theta, NOISE_POINTS)?;
            Ok(with_time(vec![b], start))
        };
        let stage = TrainConfig {
            seed: stream_rng(seed, &[0x57a9, k as u64]).next_u64(),
            ..cfg.train.clone()
        };
        let trace = mcvi_optimize(&chain, &mut params, &stage, Some(&mut eval))?;
        let polish = TrainConfig {
            iterations: POLISH_ITERATIONS,
            draws: cfg.train.draws * 4,
            seed: stream_rng(seed, &[0x9011, k as u64]).next_u64(),
            eval_every: 0,
            adam: AdamConfig {
                step_size: cfg.train.adam.step_size / 10.0,
                ..cfg.train.adam
            },
            ..cfg.train.clone()
        };
        mcvi_optimize(&chain, &mut params, &polish, None)?;
        let offset = k * cfg.train.iterations;
        rows.extend(rows_from_trace(&trace, &[Metric::Bound], cfg.record_timing).into_iter().map(|mut r| {
            r.iteration += offset;
            r
        }));
        let expected = expected_chain_bound(&chain, params.values(), NOISE_POINTS)?;
        summary.push((format!("exact_bound.{k}"), expected));
        summary.push((format!("gap.{k}"), log_z - expected));
    }
    let theta = params.values();
    let weights = crate::optimize::sample_estimates(&chain, theta, cfg.eval_draws, seed, 2)?;
    let is = importance_sampling_log_marginal(weights.len(), |i| Ok(weights[i]))?;
    let expected = expected_chain_bound(&chain, theta, NOISE_POINTS)?;
    summary.push(("exact_bound".to_string(), expected));
    push_stats(&mut summary, "bound", Stats::from_samples(&weights));
    summary.push(("is_log_marginal".to_string(), is));
    summary.push(("log_normalizer".to_string(), log_z));
    summary.push(("gap".to_string(), is - expected));
    Ok(RunOutput { rows, params, summary })
}

/// Runs `cfg.experiment` end to end.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::GaussGibbs => run_gauss(cfg, false),
        Experiment::GaussOverrelax => run_gauss(cfg, true),
        Experiment::SequentialGauss => run_sequential(cfg),
        Experiment::AnnealedGauss => run_annealed(cfg),
        Experiment::BetabinomHvi => run_betabinom(cfg),
        Experiment::ToyDecoderHvi => run_toy_decoder(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("gauss".parse::<Experiment>().is_err());
    }

    fn quick(e: Experiment) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(e, 3);
        cfg.train.iterations = 60;
        cfg.train.eval_every = 20;
        cfg.refit_every = 20;
        cfg.pilot = 200;
        cfg.eval_draws = 100;
        cfg.warmup = 50;
        cfg
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ExperimentConfig::new(Experiment::GaussOverrelax, 1);
        base.validate().unwrap();
        let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
            Box::new(|c| c.momentum_inputs = 3),
            Box::new(|c| c.alpha_init = 1.0),
            Box::new(|c| c.mixture_k = 0),
            Box::new(|c| c.mixture_k = 12),
            Box::new(|c| c.grid_points = 8),
            Box::new(|c| c.pilot = 3),
            Box::new(|c| c.eval_draws = 1),
            Box::new(|c| c.train.iterations = 0),
            Box::new(|c| {
                c.experiment = Experiment::BetabinomHvi;
                c.steps = 2;
            }),
            Box::new(|c| {
                c.experiment = Experiment::SequentialGauss;
                c.tied_inverse = true;
            }),
            Box::new(|c| {
                c.experiment = Experiment::AnnealedGauss;
                c.steps = 0;
            }),
        ];
        for (i, f) in cases.iter().enumerate() {
            let mut c = base.clone();
            f(&mut c);
            assert!(c.validate().is_err(), "case {i}");
            assert!(run(&c).is_err(), "case {i}");
        }
    }

    #[test]
    fn gibbs_without_steps_is_the_q0_elbo() {
        let mut cfg = quick(Experiment::GaussGibbs);
        cfg.steps = 0;
        cfg.mixture_k = 1;
        let out = run(&cfg).unwrap();
        let q0 = crate::distributions::DiagGaussian::new(CHAIN_START.to_vec(), vec![0.5 * CHAIN_START_VAR.ln(); 2]).unwrap();
        let sd = CHAIN_START_VAR.sqrt();
        let grid = Grid::centered(&CHAIN_START, &[8.0 * sd, 8.0 * sd], 101).unwrap();
        let elbo = crate::exact::quadrature_elbo(&bivariate_target(), &q0, &grid).unwrap();
        assert!((out.get("exact_bound").unwrap() - elbo).abs() < 1e-6);
        assert!(out.rows.iter().all(|r| (r.exact_bound.unwrap() - elbo).abs() < 1e-6));
    }

    #[test]
    fn runs_are_deterministic() {
        for e in [Experiment::GaussOverrelax, Experiment::SequentialGauss, Experiment::AnnealedGauss] {
            let mut cfg = quick(e);
            cfg.steps = 2;
            cfg.mixture_k = 2;
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a.rows, b.rows, "{e}");
            assert_eq!(a.summary, b.summary, "{e}");
            assert_eq!(a.params.values(), b.params.values(), "{e}");
        }
    }

    #[test]
    fn sequential_summary_telescopes() {
        let mut cfg = quick(Experiment::SequentialGauss);
        cfg.steps = 3;
        let out = run(&cfg).unwrap();
        let paired = out.get("joint_paired_mean").unwrap();
        assert!((out.get("telescoped").unwrap() - paired).abs() < 1e-9 * (1.0 + paired.abs()));
        assert_eq!(out.rows.len(), 3);
    }

    #[test]
    fn timing_column_is_opt_in() {
        let mut cfg = quick(Experiment::AnnealedGauss);
        let out = run(&cfg).unwrap();
        assert!(out.rows.iter().all(|r| r.seconds.is_none()));
        cfg.record_timing = true;
        let out = run(&cfg).unwrap();
        assert!(!out.rows.is_empty() && out.rows.iter().all(|r| r.seconds.is_some()));
    }

    #[test]
    fn hamiltonian_experiments_run_end_to_end() {
        let mut cfg = quick(Experiment::ToyDecoderHvi);
        cfg.leapfrog = 2;
        let out = run(&cfg).unwrap();
        for k in 0..=2 {
            assert!(out.get(&format!("gap.{k}")).unwrap() > 0.0);
        }
        assert_eq!(out.rows.len(), 9);
        let mut cfg = quick(Experiment::BetabinomHvi);
        cfg.leapfrog = 1;
        cfg.warmup = 1500;
        cfg.grid_points = 32;
        let out = run(&cfg).unwrap();
        let kl = out.get("exact_kl").unwrap();
        let r2 = out.get("r_squared").unwrap();
        assert!(kl > 0.0 && kl.is_finite() && (0.0..=1.0).contains(&r2), "{kl} {r2}");
    }
}
