//! Ground truth for problems with one or two latent dimensions.
//!
//! Densities are tabulated on uniform grids and integrated with the trapezoid
//! rule. Chains of Gaussian sweeps with linear-Gaussian reverse models have
//! closed-form bounds, computed here by propagating the chain as an affine map
//! of its primitive noise.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::bound::{AutoregressiveReverse, ChainModel, ChainNoise, InverseModel, SweepOperator, TransitionOperator};
use crate::distributions::{ConditionalLinearGaussian, DiagGaussian};
use crate::error::{check_dim, Error, Result};
use crate::markov::{leapfrog, momentum_distribution, HmcParams};
use crate::optimize::map_draws;
use crate::special::log_sum_exp;
use crate::targets::{QuadraticForm, TargetDensity};

/// Fewest points allowed on a grid axis.
pub const MIN_POINTS: usize = 32;

/// Largest allowed density on the grid boundary, relative to the peak.
pub const BOUNDARY_TOLERANCE: f64 = 1e-4;

/// Accepted total mass of a marginalized table.
pub const MASS_RANGE: (f64, f64) = (0.999, 1.001);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("grid axis needs finite lo < hi, got [{lo}, {hi}]")));
        }
        if n < MIN_POINTS {
            return Err(Error::invalid(format!("grid axis needs at least {MIN_POINTS} points, got {n}")));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        if k + 1 == self.n {
            self.hi
        } else {
            self.lo + k as f64 * self.step()
        }
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k + 1 == self.n {
            0.5 * self.step()
        } else {
            self.step()
        }
    }
}

/// Tensor grid over one or two axes. Nodes are ordered with the last axis
/// varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Unsupported("grids have one or two axes"));
        }
        Ok(Self { axes })
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![Axis::new(lo, hi, n)?])
    }

    pub fn rect(x: (f64, f64), y: (f64, f64), n: usize) -> Result<Self> {
        Self::new(vec![Axis::new(x.0, x.1, n)?, Axis::new(y.0, y.1, n)?])
    }

    /// `n` points per axis over `center ± half_width`.
    pub fn centered(center: &[f64], half_width: &[f64], n: usize) -> Result<Self> {
        check_dim("grid half widths", center.len(), half_width.len())?;
        let axes = center
            .iter()
            .zip(half_width)
            .map(|(&c, &h)| Axis::new(c - h, c + h, n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, k: usize) -> [usize; 2] {
        match self.axes.as_slice() {
            [_] => [k, 0],
            [_, b] => [k / b.n, k % b.n],
            _ => unreachable!(),
        }
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        let idx = self.index(k);
        self.axes.iter().zip(idx).map(|(a, i)| a.point(i)).collect()
    }

    pub fn weight(&self, k: usize) -> f64 {
        let idx = self.index(k);
        self.axes.iter().zip(idx).map(|(a, i)| a.weight(i)).product()
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        let idx = self.index(k);
        self.axes.iter().zip(idx).any(|(a, i)| i == 0 || i + 1 == a.n)
    }

    /// Same ranges with every interval halved.
    pub fn refined(&self) -> Self {
        Self {
            axes: self
                .axes
                .iter()
                .map(|a| Axis {
                    n: 2 * a.n - 1,
                    ..*a
                })
                .collect(),
        }
    }
}

/// `ln ∫ exp(f)` over the grid from node values of `f`, after checking that the
/// boundary density is negligible.
fn log_integral(grid: &Grid, log_values: &[f64]) -> Result<f64> {
    let peak = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::invalid("log density is not finite anywhere on the grid"));
    }
    if log_values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("log density is NaN on the grid"));
    }
    let edge = (0..grid.len())
        .filter(|&k| grid.is_boundary(k))
        .map(|k| log_values[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let ratio = (edge - peak).exp();
    if ratio > BOUNDARY_TOLERANCE {
        return Err(Error::GridTooSmall {
            ratio,
            threshold: BOUNDARY_TOLERANCE,
        });
    }
    let total: f64 = (0..grid.len())
        .map(|k| grid.weight(k) * (log_values[k] - peak).exp())
        .sum();
    Ok(peak + total.ln())
}

fn tabulate(grid: &Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
    map_draws(grid.len(), |k| f(&grid.point(k)))
}

/// `ln ∫ exp(log p(x, z)) dz` by the trapezoid rule.
pub fn log_normalizer<T: TargetDensity>(target: &T, grid: &Grid) -> Result<f64> {
    check_dim("grid dimension", target.dim(), grid.dim())?;
    let values = tabulate(grid, |z| target.log_joint(z));
    log_integral(grid, &values)
}

/// Log-density values at the nodes of a grid. Zero densities are stored as
/// `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    grid: Grid,
    log_density: Vec<f64>,
}

impl DensityTable {
    /// Wraps raw node densities, which must be finite and non-negative.
    pub fn new(grid: Grid, density: Vec<f64>) -> Result<Self> {
        check_dim("density table", grid.len(), density.len())?;
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid("density table entries must be finite and non-negative"));
        }
        let log_density = density.iter().map(|d| d.ln()).collect();
        Ok(Self { grid, log_density })
    }

    /// Wraps raw node log-densities.
    pub fn from_log_values(grid: Grid, log_density: Vec<f64>) -> Result<Self> {
        check_dim("density table", grid.len(), log_density.len())?;
        if log_density.iter().any(|d| d.is_nan() || *d == f64::INFINITY) {
            return Err(Error::invalid("density table log values must be below +inf and not NaN"));
        }
        Ok(Self { grid, log_density })
    }

    /// Tabulates `exp(f)` and normalizes it over the grid.
    pub fn from_log_density(grid: Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        let values = tabulate(&grid, f);
        let log_z = log_integral(&grid, &values)?;
        let log_density = values.iter().map(|v| v - log_z).collect();
        Ok(Self { grid, log_density })
    }

    /// Normalized posterior `p(z | x)`.
    pub fn posterior<T: TargetDensity>(target: &T, grid: Grid) -> Result<Self> {
        check_dim("grid dimension", target.dim(), grid.dim())?;
        Self::from_log_density(grid, |z| target.log_joint(z))
    }

    pub fn gaussian(q: &DiagGaussian<f64>, grid: Grid) -> Result<Self> {
        check_dim("grid dimension", q.dim(), grid.dim())?;
        Self::from_log_density(grid, |z| q.log_pdf(z).unwrap_or(f64::NEG_INFINITY))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_density
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_density.iter().map(|l| l.exp()).collect()
    }

    pub fn mass(&self) -> f64 {
        self.log_density
            .iter()
            .enumerate()
            .map(|(k, l)| l.exp() * self.grid.weight(k))
            .sum()
    }

    pub fn normalized(&self) -> Self {
        let log_m = self.mass().ln();
        Self {
            grid: self.grid.clone(),
            log_density: self.log_density.iter().map(|l| l - log_m).collect(),
        }
    }

    /// Writes `z1[,z2],density` with a header row.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.grid.dim()).map(|i| format!("z{i}")).collect();
        writeln!(out, "{},density", header.join(","))?;
        for (k, l) in self.log_density.iter().enumerate() {
            let z: Vec<String> = self.grid.point(k).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", z.join(","), l.exp())?;
        }
        Ok(())
    }
}

fn check_same_grid(q: &DensityTable, p: &DensityTable) -> Result<()> {
    if q.grid != p.grid {
        return Err(Error::invalid("density tables are on different grids"));
    }
    Ok(())
}

/// `KL(q || p) = ∫ q (ln q - ln p)`, with `0 ln 0 = 0`.
pub fn exact_kl(q: &DensityTable, p: &DensityTable) -> Result<f64> {
    check_same_grid(q, p)?;
    let mut kl = 0.0;
    for (k, (&lq, &lp)) in q.log_density.iter().zip(&p.log_density).enumerate() {
        let qk = lq.exp();
        if qk > 0.0 {
            kl += q.grid.weight(k) * qk * (lq - lp);
        }
    }
    Ok(kl.max(0.0))
}

/// Coefficient of determination of the least-squares affine fit of `ln q` on
/// `ln p`, with node weights `w_k q_k`. Nodes where either density vanishes are
/// skipped.
pub fn r_squared_accuracy(q: &DensityTable, p: &DensityTable) -> Result<f64> {
    check_same_grid(q, p)?;
    let pts: Vec<(f64, f64, f64)> = q
        .log_density
        .iter()
        .zip(&p.log_density)
        .enumerate()
        .filter(|(_, (lq, lp))| lq.exp() > 0.0 && lp.is_finite())
        .map(|(k, (&lq, &lp))| (q.grid.weight(k) * lq.exp(), lp, lq))
        .collect();
    let sw: f64 = pts.iter().map(|p| p.0).sum();
    if sw <= 0.0 {
        return Err(Error::Degenerate("no grid node carries mass under both densities"));
    }
    let mx = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / sw;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(w, x, y) in &pts {
        sxx += w * (x - mx).powi(2);
        syy += w * (y - my).powi(2);
        sxy += w * (x - mx) * (y - my);
    }
    let scale = 1e-12 * (1.0 + mx.abs().max(my.abs())).powi(2) * sw;
    if sxx <= scale || syy <= scale {
        return Err(Error::Degenerate("log density has no spread over the grid"));
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

/// `E_q[log p(x, z) - log q(z)]` by quadrature.
pub fn quadrature_elbo<T: TargetDensity>(target: &T, q: &DiagGaussian<f64>, grid: &Grid) -> Result<f64> {
    check_dim("grid dimension", target.dim(), grid.dim())?;
    let table = DensityTable::gaussian(q, grid.clone())?;
    let terms = tabulate(grid, |z| target.log_joint(z) - q.log_pdf(z).unwrap_or(f64::NAN));
    Ok(table
        .values()
        .iter()
        .zip(&terms)
        .enumerate()
        .filter(|(_, (d, _))| **d > 0.0)
        .map(|(k, (d, t))| grid.weight(k) * d * t)
        .sum())
}

/// A single Hamiltonian step from `q0` with momentum model `q(v' | z_0)`.
#[derive(Debug, Clone)]
pub struct HviStep<'a, T> {
    pub target: &'a T,
    pub q0: DiagGaussian<f64>,
    pub momentum: ConditionalLinearGaussian<f64>,
    pub hmc: HmcParams<f64>,
}

/// Momentum nodes per axis, placed over `mean ± half_width * std` of a
/// placement Gaussian evaluated at each output position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumGrid {
    pub points: usize,
    pub half_width: f64,
}

impl Default for MomentumGrid {
    fn default() -> Self {
        Self {
            points: 48,
            half_width: 7.0,
        }
    }
}

/// `q(z_1)` on `grid`, integrating out the final momentum.
///
/// Each node `(z_1, v_1)` is pulled back through the dynamics,
/// `(z_0, -v') = leapfrog(z_1, -v_1)`, and contributes `q0(z_0) q(v' | z_0)`;
/// the map preserves volume so no Jacobian enters. `placement` (usually the
/// reverse model `r(v | z)`) only positions the momentum nodes. The returned
/// table is not renormalized; its mass must lie in [`MASS_RANGE`].
pub fn marginal_q_density<T: TargetDensity>(
    step: &HviStep<'_, T>,
    grid: &Grid,
    placement: &ConditionalLinearGaussian<f64>,
    momentum_grid: &MomentumGrid,
) -> Result<DensityTable> {
    let d = step.target.dim();
    check_dim("grid dimension", d, grid.dim())?;
    check_dim("q0 dimension", d, step.q0.dim())?;
    let density = map_draws(grid.len(), |k| -> Result<f64> {
        let z1 = grid.point(k);
        let place = momentum_distribution(step.target, placement, &z1)?;
        let half: Vec<f64> = place.std().iter().map(|s| s * momentum_grid.half_width).collect();
        let vgrid = Grid::centered(place.mean(), &half, momentum_grid.points)?;
        let mut terms = Vec::with_capacity(vgrid.len());
        for j in 0..vgrid.len() {
            let v1 = vgrid.point(j);
            let back: Vec<f64> = v1.iter().map(|v| -v).collect();
            let (z0, vb) = leapfrog(step.target, &z1, &back, &step.hmc)?;
            let v_init: Vec<f64> = vb.iter().map(|v| -v).collect();
            let q_v = momentum_distribution(step.target, &step.momentum, &z0)?;
            let log_q = step.q0.log_pdf(&z0)? + q_v.log_pdf(&v_init)?;
            terms.push(vgrid.weight(j).ln() + log_q);
        }
        Ok(log_sum_exp(&terms))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let table = DensityTable::from_log_values(grid.clone(), density)?;
    let mass = table.mass();
    if !(MASS_RANGE.0..=MASS_RANGE.1).contains(&mass) {
        return Err(Error::MassOutOfRange {
            mass,
            lo: MASS_RANGE.0,
            hi: MASS_RANGE.1,
        });
    }
    Ok(table)
}

/// Expected initial term and expected `ln alpha_t` of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainExpectation {
    pub initial: f64,
    pub per_step: Vec<f64>,
}

impl ChainExpectation {
    pub fn value(&self) -> f64 {
        self.initial + self.per_step.iter().sum::<f64>()
    }

    /// Bound of the chain stopped after `t` steps, for `t = 0..=T`.
    pub fn prefix(&self) -> Vec<f64> {
        let mut acc = self.initial;
        let mut out = vec![acc];
        for s in &self.per_step {
            acc += s;
            out.push(acc);
        }
        out
    }
}

/// State as an affine function `M xi + c` of all primitive noise `xi`.
#[derive(Debug, Clone)]
struct AffineState {
    m: DMatrix<f64>,
    c: DVector<f64>,
}

impl AffineState {
    /// `E[(g . z + h)^2]` where `g` has one entry per coordinate.
    fn second_moment(&self, g: &DVector<f64>, h: f64) -> f64 {
        let row = g.transpose() * &self.m;
        row.norm_squared() + (g.dot(&self.c) + h).powi(2)
    }

    fn expected_form(&self, form: &QuadraticForm<f64>) -> f64 {
        let d = self.c.len();
        let p = DMatrix::from_fn(d, d, |i, j| form.precision[i][j]);
        let b = DVector::from_column_slice(&form.linear);
        let trace = (self.m.transpose() * &p * &self.m).trace();
        -0.5 * (trace + (self.c.transpose() * &p * &self.c)[0]) + b.dot(&self.c)
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact bound of a chain of over-relaxed sweeps (forward axis order) with
/// autoregressive linear-Gaussian reverse models, on a Gaussian target.
///
/// `alphas[t-1]` is used at step `t`. `reverse` holds one factor set per step
/// or a single shared set, factor `i` predicting coordinate `d - 1 - i` as in
/// [`AutoregressiveReverse`].
pub fn gaussian_chain_bound<T: TargetDensity>(
    target: &T,
    q0: &DiagGaussian<f64>,
    alphas: &[f64],
    reverse: &[Vec<ConditionalLinearGaussian<f64>>],
) -> Result<ChainExpectation> {
    let form = target
        .gaussian_form()
        .ok_or(Error::Unsupported("closed-form chain bounds need a gaussian target"))?;
    let d = target.dim();
    check_dim("q0 dimension", d, q0.dim())?;
    let steps = alphas.len();
    if steps > 0 && reverse.len() != 1 && reverse.len() < steps {
        return Err(Error::invalid(format!(
            "{steps} steps need 1 or {steps} reverse factor sets, got {}",
            reverse.len()
        )));
    }
    let offset = target.log_joint(&vec![0.0; d]);
    let n = d * (steps + 1);
    let std = q0.std();
    let mut state = AffineState {
        m: DMatrix::from_fn(d, n, |i, j| if i == j { std[i] } else { 0.0 }),
        c: DVector::from_column_slice(q0.mean()),
    };
    let log_q0: f64 = q0.log_std().iter().map(|l| -0.5 * LN_2PI - l - 0.5).sum();
    let mut lp = state.expected_form(&form) + offset;
    let initial = lp - log_q0;
    let mut per_step = Vec::with_capacity(steps);
    for (t, &alpha) in (1..=steps).zip(alphas) {
        if !(alpha.abs() < 1.0) {
            return Err(Error::invalid(format!("over-relaxation alpha must lie in (-1, 1), got {alpha}")));
        }
        let prev = state.clone();
        let shrink = 1.0 - alpha * alpha;
        let mut log_q = 0.0;
        for i in 0..d {
            let p_ii = form.precision[i][i];
            let var = shrink / p_ii;
            // new_i = (1 - a) mu_i(z) + a z_i + sd u, with mu_i affine in z
            let mut m_row = state.m.row(i) * alpha;
            let mut c_i = alpha * state.c[i] + (1.0 - alpha) * form.linear[i] / p_ii;
            for j in (0..d).filter(|&j| j != i) {
                let coef = -(1.0 - alpha) * form.precision[i][j] / p_ii;
                m_row += state.m.row(j) * coef;
                c_i += coef * state.c[j];
            }
            m_row[d * t + i] += var.sqrt();
            state.m.set_row(i, &m_row);
            state.c[i] = c_i;
            log_q += -0.5 * (LN_2PI + var.ln()) - 0.5;
        }
        let set = &reverse[if reverse.len() == 1 { 0 } else { t - 1 }];
        check_dim("reverse model factors", d, set.len())?;
        let joint = AffineState {
            m: DMatrix::from_fn(2 * d, n, |r, c| if r < d { prev.m[(r, c)] } else { state.m[(r - d, c)] }),
            c: DVector::from_fn(2 * d, |r, _| if r < d { prev.c[r] } else { state.c[r - d] }),
        };
        let mut log_r = 0.0;
        for (i, clg) in set.iter().enumerate() {
            let j = d - 1 - i;
            check_dim("reverse factor output", 1, clg.out_dim())?;
            let mut g = DVector::zeros(2 * d);
            g[j] = 1.0;
            let w = clg.weights();
            check_dim("reverse factor inputs", if i == 0 { 1 } else { 2 }, w.len())?;
            for c in 0..d {
                g[d + c] -= w[0].get(0, c);
            }
            if i > 0 {
                for c in 0..(d - j - 1) {
                    g[j + 1 + c] -= w[1].get(0, c);
                }
            }
            let ls = clg.log_std()[0];
            let e2 = joint.second_moment(&g, -clg.bias()[0]);
            log_r += -0.5 * LN_2PI - ls - 0.5 * e2 * (-2.0 * ls).exp();
        }
        let lp_new = state.expected_form(&form) + offset;
        per_step.push(lp_new - lp + log_r - log_q);
        lp = lp_new;
    }
    Ok(ChainExpectation { initial, per_step })
}

/// [`gaussian_chain_bound`] for a sweep chain model at `theta`.
pub fn exact_sweep_chain_bound<T: TargetDensity>(
    chain: &ChainModel<'_, T, SweepOperator, AutoregressiveReverse>,
    theta: &[f64],
) -> Result<ChainExpectation> {
    let q0 = chain.q0.build(theta)?;
    let alphas: Vec<f64> = (1..=chain.steps).map(|t| chain.op.alpha(theta, t)).collect();
    let reverse = chain
        .inverse
        .models
        .iter()
        .map(|set| set.iter().map(|m| m.build(theta)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    gaussian_chain_bound(chain.target, &q0, &alphas, &reverse)
}

/// Noise nodes per axis cover `[-NOISE_HALF_WIDTH, NOISE_HALF_WIDTH]`.
pub const NOISE_HALF_WIDTH: f64 = 8.0;

/// `E[L]` of a chain whose primitive noise has at most two dimensions, by
/// quadrature over the standard normal noise with `points` nodes per axis.
pub fn expected_chain_bound<T, O, I>(chain: &ChainModel<'_, T, O, I>, theta: &[f64], points: usize) -> Result<f64>
where
    T: TargetDensity,
    O: TransitionOperator<T>,
    I: InverseModel<T>,
{
    let d = chain.target.dim();
    let step_dim = chain.op.noise_dim(chain.target);
    let k = d + chain.steps * step_dim;
    if k > 2 {
        return Err(Error::Unsupported("noise quadrature handles at most two noise dimensions"));
    }
    let grid = Grid::centered(&vec![0.0; k], &vec![NOISE_HALF_WIDTH; k], points)?;
    let terms = map_draws(grid.len(), |n| -> Result<f64> {
        let xi = grid.point(n);
        let noise = ChainNoise {
            z0: xi[..d].to_vec(),
            steps: if step_dim == 0 {
                vec![Vec::new(); chain.steps]
            } else {
                xi[d..].chunks(step_dim).map(<[f64]>::to_vec).collect()
            },
        };
        let log_phi = -0.5 * xi.iter().map(|x| x * x).sum::<f64>() - 0.5 * LN_2PI * k as f64;
        let value: f64 = chain.estimate_with(theta, &noise)?.value;
        Ok(grid.weight(n) * log_phi.exp() * value)
    });
    terms.into_iter().sum()
}
