//! Single-sample estimators of the auxiliary lower bound on `log p(x)`.
//!
//! A chain starts at `z_0 ~ q0` and runs `T` transitions. Each step contributes
//!
//! `ln alpha_t = ln p(z_t) - ln p(z_{t-1}) + ln r_t(. | z_t) - ln q_t(. | z_{t-1})`
//!
//! and the estimate is `ln p(z_0) - ln q0(z_0) + sum_t ln alpha_t`. What the
//! forward density `q_t` and reverse density `r_t` are evaluated on depends on the
//! operator: the previous state for Gaussian sweeps, the momentum for
//! Hamiltonian steps.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Real;
use crate::distributions::{ConditionalLinearGaussian, DiagGaussian};
use crate::error::{check_dim, Error, Result};
use crate::markov::{
    forward_order, hmc_transition, momentum_distribution, mh_rao_blackwell_term, overrelax_log_density,
    overrelax_sweep, HmcParams, MhInverse,
};
use crate::params::{small_weights, Anchors, GaussianModel, LinearGaussianModel, Params, Slot};
use crate::special;
use crate::targets::{QuadraticForm, TargetDensity};

/// Primitive standard-normal noise for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub z0: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl ChainNoise {
    pub fn draw(rng: &mut impl Rng, dim: usize, steps: usize, step_dim: usize) -> Self {
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let z0 = normals(dim);
        let steps = (0..steps).map(|_| normals(step_dim)).collect();
        Self { z0, steps }
    }
}

/// One forward move: the new state, `ln q_t` of whatever was sampled, and any
/// auxiliary output the reverse model scores (the final momentum for HMC).
#[derive(Debug, Clone)]
pub struct Forward<S> {
    pub z: Vec<S>,
    pub log_q: S,
    pub aux: Vec<S>,
}

pub trait TransitionOperator<T: TargetDensity>: Sync {
    /// Standard-normal draws consumed per step.
    fn noise_dim(&self, target: &T) -> usize;

    /// Step `t` (1-based) from `z_prev`.
    fn forward<S: Real>(&self, theta: &[S], target: &T, t: usize, z_prev: &[S], u: &[f64]) -> Result<Forward<S>>;
}

pub trait InverseModel<T: TargetDensity>: Sync {
    /// `ln r_t` of the reverse move of step `t`.
    fn log_density<S: Real>(
        &self,
        theta: &[S],
        target: &T,
        t: usize,
        z_prev: &[S],
        fwd: &Forward<S>,
    ) -> Result<S>;
}

#[derive(Debug, Clone)]
pub struct BoundEstimate<S> {
    /// `initial + sum(per_step)`
    pub value: S,
    /// `ln p(z_0) - ln q0(z_0)`
    pub initial: S,
    /// `ln alpha_t` for `t = 1..=T`
    pub per_step: Vec<S>,
    pub z0: Vec<S>,
    pub z_final: Vec<S>,
}

impl<S: Real> BoundEstimate<S> {
    fn start(initial: S, z0: Vec<S>) -> Self {
        Self {
            value: initial,
            initial,
            per_step: Vec::new(),
            z_final: z0.clone(),
            z0,
        }
    }

    fn push(&mut self, log_alpha: S, z: Vec<S>) {
        self.value += log_alpha;
        self.per_step.push(log_alpha);
        self.z_final = z;
    }

    /// Bound after `0..=T` steps.
    pub fn prefix_bounds(&self) -> Vec<S> {
        let mut acc = self.initial;
        let mut out = vec![acc];
        for &a in &self.per_step {
            acc += a;
            out.push(acc);
        }
        out
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }
}

fn step_err(t: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::StepFailed {
        step: t,
        source: Box::new(e),
    }
}

fn initial_point<T: TargetDensity, S: Real>(
    target: &T,
    q0: &DiagGaussian<S>,
    u: &[f64],
) -> Result<(Vec<S>, S)> {
    check_dim("q0 dimension", target.dim(), q0.dim())?;
    let z0 = q0.sample_reparam(u)?;
    let init = target.log_joint(&z0) - q0.log_pdf_of_noise(u)?;
    Ok((z0, init))
}

/// Chain estimate with an arbitrary operator and reverse model.
pub fn mcmc_lower_bound<T, S, O, I>(
    theta: &[S],
    target: &T,
    q0: &DiagGaussian<S>,
    op: &O,
    inverse: &I,
    noise: &ChainNoise,
) -> Result<BoundEstimate<S>>
where
    T: TargetDensity,
    S: Real,
    O: TransitionOperator<T>,
    I: InverseModel<T>,
{
    let (z0, init) = initial_point(target, q0, &noise.z0)?;
    let mut est = BoundEstimate::start(init, z0);
    let mut z = est.z0.clone();
    let mut lp = target.log_joint(&z);
    for (i, u) in noise.steps.iter().enumerate() {
        let t = i + 1;
        let fwd = op.forward(theta, target, t, &z, u).map_err(step_err(t))?;
        let log_r = inverse
            .log_density(theta, target, t, &z, &fwd)
            .map_err(step_err(t))?;
        let lp_new = target.log_joint(&fwd.z);
        let log_alpha = lp_new - lp + log_r - fwd.log_q;
        if !log_alpha.value().is_finite() {
            return Err(step_err(t)(Error::Divergence { step: t }));
        }
        lp = lp_new;
        z = fwd.z.clone();
        est.push(log_alpha, fwd.z);
    }
    Ok(est)
}

/// Hamiltonian chain: each step draws `v' ~ q_t(v' | z_{t-1})`, runs the
/// dynamics, and scores the final momentum under `r_t(v_t | z_t)`. No accept
/// step.
///
/// `momentum[t-1]` and `inverse[t-1]` are used at step `t`; a single entry is
/// shared by all steps.
pub fn hvi_lower_bound<T: TargetDensity, S: Real>(
    target: &T,
    q0: &DiagGaussian<S>,
    momentum: &[ConditionalLinearGaussian<S>],
    inverse: &[ConditionalLinearGaussian<S>],
    params: &HmcParams<S>,
    noise: &ChainNoise,
) -> Result<BoundEstimate<S>> {
    let steps = noise.steps.len();
    for (what, n) in [("momentum models", momentum.len()), ("inverse models", inverse.len())] {
        if n != 1 && n != steps {
            return Err(Error::invalid(format!("expected 1 or {steps} {what}, got {n}")));
        }
    }
    let (z0, init) = initial_point(target, q0, &noise.z0)?;
    let mut est = BoundEstimate::start(init, z0);
    let mut z = est.z0.clone();
    for (i, u) in noise.steps.iter().enumerate() {
        let t = i + 1;
        let pick = |models: &[ConditionalLinearGaussian<S>]| models.len().min(t) - 1;
        let step = hmc_transition(target, &z, &momentum[pick(momentum)], params, u).map_err(step_err(t))?;
        let r = momentum_distribution(target, &inverse[pick(inverse)], &step.z).map_err(step_err(t))?;
        let log_alpha =
            target.log_joint(&step.z) + r.log_pdf(&step.v)? - target.log_joint(&z) - step.log_q;
        if !log_alpha.value().is_finite() {
            return Err(step_err(t)(Error::Divergence { step: t }));
        }
        z = step.z.clone();
        est.push(log_alpha, step.z);
    }
    Ok(est)
}

/// Nondecreasing inverse temperatures from 0 to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    betas: Vec<f64>,
}

impl AnnealingSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("annealing schedule needs at least beta_0 and beta_T"));
        }
        if betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
            return Err(Error::invalid("annealing schedule must start at 0 and end at 1"));
        }
        if betas.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::invalid("annealing schedule must be nondecreasing"));
        }
        Ok(Self { betas })
    }

    /// `beta_t = t / T`
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("annealing schedule needs at least one step"));
        }
        Self::new((0..=steps).map(|t| t as f64 / steps as f64).collect())
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Gibbs sweep on the tempered density `(1 - beta) ln q0 + beta ln p` of a
/// Gaussian target and a diagonal Gaussian `q0`.
#[derive(Debug, Clone)]
pub struct TemperedGibbs {
    form: QuadraticForm<f64>,
}

impl TemperedGibbs {
    pub fn new<T: TargetDensity>(target: &T) -> Result<Self> {
        let form = target
            .gaussian_form()
            .ok_or(Error::Unsupported("tempered gibbs needs a gaussian target"))?;
        Ok(Self { form })
    }

    pub fn sweep<S: Real>(&self, q0: &DiagGaussian<S>, beta: f64, z: &[S], u: &[f64]) -> Result<crate::markov::Sweep<S>> {
        let form = self.form.tempered(q0, beta);
        overrelax_sweep(&form, z, S::zero(), &forward_order(z.len()), u)
    }

    /// `ln` of the reverse-order sweep density from `to` back to `from`.
    pub fn reverse_log_density<S: Real>(&self, q0: &DiagGaussian<S>, beta: f64, from: &[S], to: &[S]) -> Result<S> {
        let form = self.form.tempered(q0, beta);
        let mut order = forward_order(from.len());
        order.reverse();
        overrelax_log_density(&form, to, from, S::zero(), &order)
    }
}

/// Annealed bound `sum_t (beta_t - beta_{t-1}) [ln p(z_t) - ln q0(z_t)]`.
///
/// Step `t` applies a sweep that leaves the density at `beta_{t-1}` invariant,
/// so `z_t` is distributed as in annealed importance sampling just before the
/// weight for `beta_t` is taken. No reverse model is needed.
pub fn annealed_bound<T: TargetDensity, S: Real>(
    target: &T,
    q0: &DiagGaussian<S>,
    schedule: &AnnealingSchedule,
    transition: &TemperedGibbs,
    noise: &ChainNoise,
) -> Result<BoundEstimate<S>> {
    check_dim("annealing noise steps", schedule.steps(), noise.steps.len())?;
    let (z0, _) = initial_point(target, q0, &noise.z0)?;
    let mut est = BoundEstimate::start(S::zero(), z0);
    let mut z = est.z0.clone();
    let b = schedule.betas();
    for (i, u) in noise.steps.iter().enumerate() {
        let t = i + 1;
        z = transition.sweep(q0, b[t - 1], &z, u).map_err(step_err(t))?.z;
        let f = target.log_joint(&z) - q0.log_pdf(&z)?;
        est.push(f * (b[t] - b[t - 1]), z.clone());
    }
    Ok(est)
}

/// Mean of the last `k` of the prefix bounds `L_0..=L_T`, i.e. the bound of a
/// uniform mixture over the last `k` iterates whose reverse model for the
/// mixture index equals its forward distribution.
pub fn mixture_iterates_bound<S: Real>(prefix_bounds: &[S], k: usize) -> Result<S> {
    if k == 0 || k > prefix_bounds.len() {
        return Err(Error::invalid(format!(
            "mixture size {k} must be in 1..={}",
            prefix_bounds.len()
        )));
    }
    let tail = &prefix_bounds[prefix_bounds.len() - k..];
    Ok(crate::autodiff::sum(tail.iter().copied()) / k as f64)
}

/// `ln mean_i exp(w_i)` over `n` log-weights `w_i = ln p(x, z_i) - ln q(z_i)`.
///
/// For a chain, `w_i` is the full estimate `L` of one run: its exponential has
/// expectation `p(x)` because every reverse model is normalized.
pub fn importance_sampling_log_marginal(
    n: usize,
    mut log_weight: impl FnMut(usize) -> Result<f64>,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("importance sampling needs at least one sample"));
    }
    let w = (0..n).map(&mut log_weight).collect::<Result<Vec<_>>>()?;
    Ok(special::log_mean_exp(&w))
}

/// Random-walk Metropolis-Hastings chain of length one with the accept bit
/// summed out.
pub fn mh_lower_bound<T: TargetDensity, S: Real>(
    target: &T,
    q0: &DiagGaussian<S>,
    proposal_log_std: &[S],
    inverse: &MhInverse<S>,
    noise: &ChainNoise,
) -> Result<BoundEstimate<S>> {
    if noise.steps.len() != 1 {
        return Err(Error::invalid("the metropolis-hastings bound is defined for one step"));
    }
    let (z0, init) = initial_point(target, q0, &noise.z0)?;
    let mut est = BoundEstimate::start(init, z0);
    let term = mh_rao_blackwell_term(target, &est.z0, proposal_log_std, inverse, &noise.steps[0])
        .map_err(step_err(1))?;
    est.push(term.expected, term.proposal);
    Ok(est)
}

fn pick_step<X>(items: &[X], t: usize) -> &X {
    if items.len() == 1 {
        &items[0]
    } else {
        &items[t - 1]
    }
}

/// Coordinate-wise Gaussian sweep with over-relaxation parameter(s).
///
/// No alpha slots gives a Gibbs sweep. One slot is shared by all steps;
/// otherwise slot `t - 1` is used at step `t`.
#[derive(Debug, Clone)]
pub struct SweepOperator {
    form: QuadraticForm<f64>,
    pub alphas: Vec<Slot>,
}

impl SweepOperator {
    pub fn new<T: TargetDensity>(target: &T, alphas: Vec<Slot>) -> Result<Self> {
        let form = target
            .gaussian_form()
            .ok_or(Error::Unsupported("sweep operators need gaussian full conditionals"))?;
        Ok(Self { form, alphas })
    }

    pub fn alpha<S: Real>(&self, theta: &[S], t: usize) -> S {
        if self.alphas.is_empty() {
            S::zero()
        } else {
            pick_step(&self.alphas, t).scalar(theta)
        }
    }

    pub fn form(&self) -> &QuadraticForm<f64> {
        &self.form
    }
}

impl<T: TargetDensity> TransitionOperator<T> for SweepOperator {
    fn noise_dim(&self, _target: &T) -> usize {
        self.form.dim()
    }

    fn forward<S: Real>(&self, theta: &[S], _target: &T, t: usize, z_prev: &[S], u: &[f64]) -> Result<Forward<S>> {
        let s = overrelax_sweep(&self.form.lift(), z_prev, self.alpha(theta, t), &forward_order(z_prev.len()), u)?;
        Ok(Forward {
            z: s.z,
            log_q: s.log_q,
            aux: Vec::new(),
        })
    }
}

/// Reverse kernel of a [`SweepOperator`] (the same sweep in reversed axis
/// order). With it every `ln alpha_t` is exactly zero.
#[derive(Debug, Clone)]
pub struct DetailedBalanceReverse(pub SweepOperator);

impl<T: TargetDensity> InverseModel<T> for DetailedBalanceReverse {
    fn log_density<S: Real>(&self, theta: &[S], _target: &T, t: usize, z_prev: &[S], fwd: &Forward<S>) -> Result<S> {
        let mut order = forward_order(z_prev.len());
        order.reverse();
        overrelax_log_density(&self.0.form.lift(), &fwd.z, z_prev, self.0.alpha(theta, t), &order)
    }
}

/// Reverse model `r_t(z_{t-1} | z_t)` for a forward sweep in axis order
/// `0, 1, ..., d-1`, factored as
/// `prod_j r(z_{t-1}^j | z_t, z_{t-1}^{j+1..d})` with linear-Gaussian factors.
///
/// When the chain is Gaussian this family contains the exact conditional of
/// `z_{t-1}` given `z_t`.
#[derive(Debug, Clone)]
pub struct AutoregressiveReverse {
    /// `models[step][i]` predicts coordinate `d - 1 - i`.
    pub models: Vec<Vec<LinearGaussianModel>>,
}

/// Samples of `(z_{t-1}, z_t)` for one step, used to place the anchors of a
/// standardized reverse model.
pub type PilotPairs = Vec<(Vec<f64>, Vec<f64>)>;

impl AutoregressiveReverse {
    /// Plain (unanchored) factors, `steps` distinct sets or one shared set.
    pub fn add(
        params: &mut Params,
        name: &str,
        dim: usize,
        steps: usize,
        tied: bool,
        log_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let sets = if tied { 1 } else { steps.max(1) };
        let models = (0..sets)
            .map(|s| {
                (0..dim)
                    .map(|i| {
                        let inputs: Vec<usize> = if i == 0 { vec![dim] } else { vec![dim, i] };
                        LinearGaussianModel::add(params, &format!("{name}.{s}.{i}"), 1, &inputs, vec![log_std], rng)
                    })
                    .collect()
            })
            .collect();
        Self { models }
    }

    /// Standardized factors initialized by least squares on pilot pairs.
    ///
    /// `pilot[s]` holds pairs for parameter set `s`; with one set, pairs from all
    /// steps may be pooled into `pilot[0]`.
    pub fn add_fitted(params: &mut Params, name: &str, pilot: &[PilotPairs], rng: &mut impl Rng) -> Result<Self> {
        let mut models = Vec::with_capacity(pilot.len());
        for (s, pairs) in pilot.iter().enumerate() {
            let dim = pairs.first().map(|p| p.0.len()).ok_or_else(|| Error::invalid("empty pilot"))?;
            let set = (0..dim)
                .map(|i| {
                    let mut feature_centers = vec![vec![0.0; dim]];
                    if i > 0 {
                        feature_centers.push(vec![0.0; i]);
                    }
                    let anchors = Anchors {
                        center: vec![0.0],
                        feature_centers,
                    };
                    LinearGaussianModel::add_standardized(params, &format!("{name}.{s}.{i}"), anchors, vec![0.0], rng)
                })
                .collect();
            models.push(set);
        }
        let mut out = Self { models };
        out.refit(params, pilot)?;
        Ok(out)
    }

    /// Moves anchors and parameters of every standardized factor to the least
    /// squares fit on `pilot`, which must have one entry per parameter set.
    pub fn refit(&mut self, params: &mut Params, pilot: &[PilotPairs]) -> Result<()> {
        check_dim("pilot sets", self.models.len(), pilot.len())?;
        for (s, pairs) in pilot.iter().enumerate() {
            self.refit_set(params, s, pairs)?;
        }
        Ok(())
    }

    /// [`refit`](Self::refit) restricted to parameter set `s`.
    pub fn refit_set(&mut self, params: &mut Params, s: usize, pairs: &PilotPairs) -> Result<()> {
        let n = self.models.len();
        let set = self
            .models
            .get_mut(s)
            .ok_or_else(|| Error::invalid(format!("reverse set {s} out of range for {n} sets")))?;
        {
            let dim = set.len();
            for (i, model) in set.iter_mut().enumerate() {
                let j = dim - 1 - i;
                let rows: Vec<(Vec<f64>, f64)> = pairs
                    .iter()
                    .map(|(prev, cur)| {
                        let mut x = cur.clone();
                        x.extend_from_slice(&prev[j + 1..]);
                        (x, prev[j])
                    })
                    .collect();
                let fit = least_squares(&rows)?;
                let mut feature_centers = vec![fit.x_mean[..dim].to_vec()];
                if i > 0 {
                    feature_centers.push(fit.x_mean[dim..].to_vec());
                }
                model.anchors = Some(Anchors {
                    center: vec![fit.y_mean],
                    feature_centers,
                });
                let theta = params.values_mut();
                let scale = fit.residual_sd;
                model.log_std.get_mut(theta)[0] = scale.ln();
                model.bias.get_mut(theta)[0] = 0.0;
                model.weights[0]
                    .get_mut(theta)
                    .iter_mut()
                    .zip(&fit.coef[..dim])
                    .for_each(|(w, c)| *w = c / scale);
                if i > 0 {
                    model.weights[1]
                        .get_mut(theta)
                        .iter_mut()
                        .zip(&fit.coef[dim..])
                        .for_each(|(w, c)| *w = c / scale);
                }
            }
        }
        Ok(())
    }

    pub fn set_trainable(&self, params: &mut Params, trainable: bool) {
        for m in self.models.iter().flatten() {
            m.set_trainable(params, trainable);
        }
    }

    pub fn log_density_at<S: Real>(&self, theta: &[S], t: usize, z_prev: &[S], z: &[S]) -> Result<S> {
        let set = pick_step(&self.models, t);
        let d = z.len();
        check_dim("reverse model factors", d, set.len())?;
        let mut acc = S::zero();
        for (i, model) in set.iter().enumerate() {
            let j = d - 1 - i;
            let clg = model.build(theta)?;
            let dist = if i == 0 {
                clg.condition(&[z])?
            } else {
                clg.condition(&[z, &z_prev[j + 1..]])?
            };
            acc += dist.log_pdf(&z_prev[j..j + 1])?;
        }
        Ok(acc)
    }
}

impl<T: TargetDensity> InverseModel<T> for AutoregressiveReverse {
    fn log_density<S: Real>(&self, theta: &[S], _target: &T, t: usize, z_prev: &[S], fwd: &Forward<S>) -> Result<S> {
        self.log_density_at(theta, t, z_prev, &fwd.z)
    }
}

struct LeastSquares {
    x_mean: Vec<f64>,
    y_mean: f64,
    coef: Vec<f64>,
    residual_sd: f64,
}

fn least_squares(rows: &[(Vec<f64>, f64)]) -> Result<LeastSquares> {
    let n = rows.len();
    let p = rows.first().map(|r| r.0.len()).unwrap_or(0);
    if n < p + 2 {
        return Err(Error::invalid(format!("pilot needs more than {} samples, got {n}", p + 1)));
    }
    let mut x_mean = vec![0.0; p];
    let mut y_mean = 0.0;
    for (x, y) in rows {
        for (m, xi) in x_mean.iter_mut().zip(x) {
            *m += xi / n as f64;
        }
        y_mean += y / n as f64;
    }
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut xty = nalgebra::DVector::<f64>::zeros(p);
    for (x, y) in rows {
        for a in 0..p {
            let xa = x[a] - x_mean[a];
            xty[a] += xa * (y - y_mean);
            for b in 0..p {
                xtx[(a, b)] += xa * (x[b] - x_mean[b]);
            }
        }
    }
    // tiny ridge keeps exactly collinear pilots solvable
    let ridge = 1e-12 * (0..p).map(|a| xtx[(a, a)]).fold(0.0, f64::max).max(1e-300);
    for a in 0..p {
        xtx[(a, a)] += ridge;
    }
    let coef = xtx
        .cholesky()
        .ok_or(Error::Degenerate("pilot regression matrix is singular"))?
        .solve(&xty);
    let sse: f64 = rows
        .iter()
        .map(|(x, y)| {
            let pred: f64 = (0..p).map(|a| coef[a] * (x[a] - x_mean[a])).sum();
            (y - y_mean - pred).powi(2)
        })
        .sum();
    let residual_sd = (sse / (n - p - 1) as f64).sqrt().max(1e-12);
    Ok(LeastSquares {
        x_mean,
        y_mean,
        coef: coef.iter().copied().collect(),
        residual_sd,
    })
}

/// Hamiltonian transition with learned step size, diagonal mass and
/// momentum model(s) `q_t(v' | z_{t-1})`.
#[derive(Debug, Clone)]
pub struct HmcOperator {
    pub log_step: Slot,
    pub log_mass: Slot,
    pub leapfrog_steps: usize,
    pub momentum: Vec<LinearGaussianModel>,
}

impl HmcOperator {
    pub fn hmc_params<S: Real>(&self, theta: &[S]) -> Result<HmcParams<S>> {
        HmcParams::new(
            self.log_step.scalar(theta),
            self.log_mass.get(theta).to_vec(),
            self.leapfrog_steps,
        )
    }
}

impl<T: TargetDensity> TransitionOperator<T> for HmcOperator {
    fn noise_dim(&self, target: &T) -> usize {
        target.dim()
    }

    fn forward<S: Real>(&self, theta: &[S], target: &T, t: usize, z_prev: &[S], u: &[f64]) -> Result<Forward<S>> {
        let model = pick_step(&self.momentum, t).build(theta)?;
        let step = hmc_transition(target, z_prev, &model, &self.hmc_params(theta)?, u)?;
        Ok(Forward {
            z: step.z,
            log_q: step.log_q,
            aux: step.v,
        })
    }
}

/// `r_t(v_t | z_t)` for an [`HmcOperator`].
#[derive(Debug, Clone)]
pub struct MomentumInverse {
    pub models: Vec<LinearGaussianModel>,
}

impl<T: TargetDensity> InverseModel<T> for MomentumInverse {
    fn log_density<S: Real>(&self, theta: &[S], target: &T, t: usize, _z_prev: &[S], fwd: &Forward<S>) -> Result<S> {
        let clg = pick_step(&self.models, t).build(theta)?;
        momentum_distribution(target, &clg, &fwd.z)?.log_pdf(&fwd.aux)
    }
}

/// `r(v_t | z_t)` for an [`HmcOperator`] given by a network with one softplus
/// hidden layer on the standardized position, emitting the mean and log-scale
/// of a diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct MlpMomentumInverse {
    /// Subtracted from `z` before the network.
    pub input_center: Vec<f64>,
    /// Divides `z - input_center`.
    pub input_scale: Vec<f64>,
    pub hidden: usize,
    pub w1: Slot,
    pub b1: Slot,
    pub w_mean: Slot,
    pub b_mean: Slot,
    pub w_log_std: Slot,
    pub b_log_std: Slot,
}

impl MlpMomentumInverse {
    /// Hidden weights and biases `N(0, 1)`, output weights `N(0, 0.01^2)`,
    /// output biases 0.
    pub fn add(params: &mut Params, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let w1 = params.add(format!("{name}.w1"), normals(hidden * dim), true);
        let b1 = params.add(format!("{name}.b1"), normals(hidden), true);
        let w_mean = params.add(format!("{name}.w_mean"), small_weights(dim * hidden, rng), true);
        let b_mean = params.add(format!("{name}.b_mean"), vec![0.0; dim], true);
        let w_log_std = params.add(format!("{name}.w_log_std"), small_weights(dim * hidden, rng), true);
        let b_log_std = params.add(format!("{name}.b_log_std"), vec![0.0; dim], true);
        Self {
            input_center: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            hidden,
            w1,
            b1,
            w_mean,
            b_mean,
            w_log_std,
            b_log_std,
        }
    }

    pub fn distribution<S: Real>(&self, theta: &[S], z: &[S]) -> Result<DiagGaussian<S>> {
        let d = self.input_center.len();
        check_dim("network input", d, z.len())?;
        let x: Vec<S> = (0..d)
            .map(|i| (z[i] - self.input_center[i]) / self.input_scale[i])
            .collect();
        let (w1, b1) = (self.w1.get(theta), self.b1.get(theta));
        let h: Vec<S> = (0..self.hidden)
            .map(|j| (crate::autodiff::sum((0..d).map(|i| w1[j * d + i] * x[i])) + b1[j]).softplus())
            .collect();
        let layer = |w: &[S], b: &[S]| -> Vec<S> {
            (0..d)
                .map(|o| crate::autodiff::sum((0..self.hidden).map(|j| w[o * self.hidden + j] * h[j])) + b[o])
                .collect()
        };
        DiagGaussian::new(
            layer(self.w_mean.get(theta), self.b_mean.get(theta)),
            layer(self.w_log_std.get(theta), self.b_log_std.get(theta)),
        )
    }
}

impl<T: TargetDensity> InverseModel<T> for MlpMomentumInverse {
    fn log_density<S: Real>(&self, theta: &[S], _target: &T, _t: usize, _z_prev: &[S], fwd: &Forward<S>) -> Result<S> {
        self.distribution(theta, &fwd.z)?.log_pdf(&fwd.aux)
    }
}

/// Tempered Gibbs as a generic transition: step `t` leaves the density at
/// `beta_{t-1}` invariant.
#[derive(Debug, Clone)]
pub struct AnnealedOperator {
    pub gibbs: TemperedGibbs,
    pub schedule: AnnealingSchedule,
    pub q0: GaussianModel,
}

impl<T: TargetDensity> TransitionOperator<T> for AnnealedOperator {
    fn noise_dim(&self, target: &T) -> usize {
        target.dim()
    }

    fn forward<S: Real>(&self, theta: &[S], _target: &T, t: usize, z_prev: &[S], u: &[f64]) -> Result<Forward<S>> {
        let q0 = self.q0.build(theta)?;
        let s = self.gibbs.sweep(&q0, self.schedule.betas()[t - 1], z_prev, u)?;
        Ok(Forward {
            z: s.z,
            log_q: s.log_q,
            aux: Vec::new(),
        })
    }
}

/// `r(z_{t-1} | z_t) = q_t(z_t | z_{t-1}) p_t(z_{t-1}) / p_t(z_t)`, which for a
/// Gibbs sweep is the reverse-order sweep at the same temperature.
#[derive(Debug, Clone)]
pub struct AisReverse(pub AnnealedOperator);

impl<T: TargetDensity> InverseModel<T> for AisReverse {
    fn log_density<S: Real>(&self, theta: &[S], _target: &T, t: usize, z_prev: &[S], fwd: &Forward<S>) -> Result<S> {
        let q0 = self.0.q0.build(theta)?;
        self.0
            .gibbs
            .reverse_log_density(&q0, self.0.schedule.betas()[t - 1], z_prev, &fwd.z)
    }
}

/// `q0`, an operator and a reverse model over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct ChainModel<'a, T, O, I> {
    pub target: &'a T,
    pub q0: GaussianModel,
    pub op: O,
    pub inverse: I,
    pub steps: usize,
}

impl<T, O, I> ChainModel<'_, T, O, I>
where
    T: TargetDensity,
    O: TransitionOperator<T>,
    I: InverseModel<T>,
{
    pub fn draw_noise(&self, rng: &mut impl Rng) -> ChainNoise {
        ChainNoise::draw(rng, self.target.dim(), self.steps, self.op.noise_dim(self.target))
    }

    pub fn estimate_with<S: Real>(&self, theta: &[S], noise: &ChainNoise) -> Result<BoundEstimate<S>> {
        let q0 = self.q0.build(theta)?;
        mcmc_lower_bound(theta, self.target, &q0, &self.op, &self.inverse, noise)
    }

    pub fn estimate<S: Real>(&self, theta: &[S], rng: &mut impl Rng) -> Result<BoundEstimate<S>> {
        let noise = self.draw_noise(rng);
        self.estimate_with(theta, &noise)
    }

    /// Pairs `(z_{t-1}, z_t)` for every step, from `n` chains at `theta`.
    pub fn pilot(&self, theta: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<PilotPairs>> {
        let mut out = vec![Vec::with_capacity(n); self.steps];
        for _ in 0..n {
            let noise = self.draw_noise(rng);
            let q0 = self.q0.build(theta)?;
            let mut z = q0.sample_reparam(&noise.z0)?;
            for (i, u) in noise.steps.iter().enumerate() {
                let fwd = self.op.forward(theta, self.target, i + 1, &z, u)?;
                out[i].push((z, fwd.z.clone()));
                z = fwd.z;
            }
        }
        Ok(out)
    }
}
