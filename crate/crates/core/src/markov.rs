//! Transition operators `q_t(z_t | z_{t-1})`: coordinate-wise Gaussian sweeps
//! (Gibbs and over-relaxation), Hamiltonian dynamics, and a single
//! Metropolis-Hastings step with the accept decision summed out.
//!
//! Every operator is a deterministic function of its inputs and of the primitive
//! noise passed in, so all outputs are differentiable in the operator parameters.

use crate::autodiff::Real;
use crate::distributions::{ConditionalLinearGaussian, DiagGaussian, LN_NORM};
use crate::error::{check_dim, Error, Result};
use crate::targets::{QuadraticForm, TargetDensity};

/// New state and the log-density of the realized move.
#[derive(Debug, Clone)]
pub struct Sweep<S> {
    pub z: Vec<S>,
    pub log_q: S,
}

/// Axes `0..dim` in increasing order.
pub fn forward_order(dim: usize) -> Vec<usize> {
    (0..dim).collect()
}

fn check_alpha<S: Real>(alpha: S) -> Result<()> {
    let a = alpha.value();
    if a.is_nan() || a.abs() >= 1.0 {
        return Err(Error::invalid(format!("over-relaxation alpha must lie in (-1, 1), got {a}")));
    }
    Ok(())
}

fn check_order(dim: usize, order: &[usize]) -> Result<()> {
    let mut seen = vec![false; dim];
    for &i in order {
        if i >= dim || seen[i] {
            return Err(Error::invalid(format!("axis order {order:?} is not a permutation of 0..{dim}")));
        }
        seen[i] = true;
    }
    if order.len() != dim {
        return Err(Error::invalid(format!("axis order {order:?} is not a permutation of 0..{dim}")));
    }
    Ok(())
}

/// One over-relaxed sweep: each axis `i` in `order` moves to
/// `N(mu_i + alpha (z_i - mu_i), var_i (1 - alpha^2))`, where `mu_i, var_i` are
/// the full-conditional moments given the current values of the other axes.
pub fn overrelax_sweep<S: Real>(
    form: &QuadraticForm<S>,
    z: &[S],
    alpha: S,
    order: &[usize],
    u: &[f64],
) -> Result<Sweep<S>> {
    let d = form.dim();
    check_dim("sweep state", d, z.len())?;
    check_dim("sweep noise", order.len(), u.len())?;
    check_order(d, order)?;
    check_alpha(alpha)?;
    let shrink = -alpha.square() + 1.0;
    let half_ln_shrink = shrink.ln() * 0.5;
    let mut cur = z.to_vec();
    let mut log_q = S::zero();
    for (&i, &ui) in order.iter().zip(u) {
        let (mu, var) = form.conditional(i, &cur);
        let mean = mu + alpha * (cur[i] - mu);
        let sd = (var * shrink).sqrt();
        cur[i] = mean + sd * ui;
        log_q += -(var.ln() * 0.5 + half_ln_shrink) + (LN_NORM - 0.5 * ui * ui);
    }
    Ok(Sweep { z: cur, log_q })
}

/// Log-density of moving from `from` to `to` with one sweep in `order`.
///
/// With `order` reversed this is the reverse kernel `q~(z_{t-1} | z_t)` of a
/// forward sweep, and `p(z_{t-1}) q(z_t | z_{t-1}) = p(z_t) q~(z_{t-1} | z_t)`.
pub fn overrelax_log_density<S: Real>(
    form: &QuadraticForm<S>,
    from: &[S],
    to: &[S],
    alpha: S,
    order: &[usize],
) -> Result<S> {
    let d = form.dim();
    check_dim("sweep start", d, from.len())?;
    check_dim("sweep end", d, to.len())?;
    check_order(d, order)?;
    check_alpha(alpha)?;
    let shrink = -alpha.square() + 1.0;
    let mut cur = from.to_vec();
    let mut acc = S::zero();
    for &i in order {
        let (mu, var) = form.conditional(i, &cur);
        let mean = mu + alpha * (cur[i] - mu);
        acc += crate::distributions::normal_log_pdf(to[i], mean, var * shrink);
        cur[i] = to[i];
    }
    Ok(acc)
}

fn target_form<T: TargetDensity, S: Real>(target: &T) -> Result<QuadraticForm<S>> {
    target
        .gaussian_form()
        .map(|f| f.lift())
        .ok_or(Error::Unsupported("target has no gaussian full conditionals"))
}

/// Gibbs sweep over the target's full conditionals.
pub fn gibbs_step<T: TargetDensity, S: Real>(
    target: &T,
    z: &[S],
    order: &[usize],
    u: &[f64],
) -> Result<Sweep<S>> {
    overrelax_sweep(&target_form(target)?, z, S::zero(), order, u)
}

/// Over-relaxed sweep in the natural axis order.
pub fn overrelax_step<T: TargetDensity, S: Real>(
    target: &T,
    z: &[S],
    alpha: S,
    u: &[f64],
) -> Result<Sweep<S>> {
    overrelax_sweep(&target_form(target)?, z, alpha, &forward_order(z.len()), u)
}

/// Leapfrog settings. Step size and diagonal mass are stored as logs.
#[derive(Debug, Clone)]
pub struct HmcParams<S> {
    pub log_step: S,
    pub log_mass: Vec<S>,
    pub steps: usize,
}

impl<S: Real> HmcParams<S> {
    pub fn new(log_step: S, log_mass: Vec<S>, steps: usize) -> Result<Self> {
        if log_mass.is_empty() {
            return Err(Error::invalid("mass matrix dimension must be at least 1"));
        }
        if !log_step.value().is_finite() || log_mass.iter().any(|m| !m.value().is_finite()) {
            return Err(Error::invalid("step size and mass must be finite"));
        }
        Ok(Self {
            log_step,
            log_mass,
            steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_mass.len()
    }

    /// `0.5 v' M^{-1} v`
    pub fn kinetic(&self, v: &[S]) -> S {
        crate::autodiff::sum(
            v.iter()
                .zip(&self.log_mass)
                .map(|(&vi, &lm)| vi.square() * (-lm).exp() * 0.5),
        )
    }
}

fn checked_gradient<T: TargetDensity, S: Real>(target: &T, z: &[S], step: usize) -> Result<Vec<S>> {
    let g = target.grad_log_joint(z);
    if g.iter().chain(z).any(|x| !x.value().is_finite()) {
        return Err(Error::Divergence { step });
    }
    Ok(g)
}

/// `steps` leapfrog iterations of the Hamiltonian `0.5 v'M^{-1}v - log p(z)`.
///
/// A non-finite position or gradient fails with the 1-based index of the
/// iteration (0 when the starting point is already bad).
pub fn leapfrog<T: TargetDensity, S: Real>(
    target: &T,
    z: &[S],
    v: &[S],
    params: &HmcParams<S>,
) -> Result<(Vec<S>, Vec<S>)> {
    check_dim("leapfrog position", target.dim(), z.len())?;
    check_dim("leapfrog momentum", z.len(), v.len())?;
    check_dim("leapfrog mass", z.len(), params.dim())?;
    let eps = params.log_step.exp();
    let half = eps * 0.5;
    let inv_mass: Vec<S> = params.log_mass.iter().map(|&m| (-m).exp()).collect();
    let mut z = z.to_vec();
    let mut v = v.to_vec();
    if params.steps == 0 {
        return Ok((z, v));
    }
    let mut g = checked_gradient(target, &z, 0)?;
    for k in 0..params.steps {
        for i in 0..z.len() {
            v[i] += half * g[i];
            z[i] += eps * inv_mass[i] * v[i];
        }
        g = checked_gradient(target, &z, k + 1)?;
        for i in 0..z.len() {
            v[i] += half * g[i];
        }
    }
    Ok((z, v))
}

/// Conditioning vectors for a momentum model with `n` inputs: none, `z`, or
/// `z` and the target gradient at `z`.
pub fn momentum_features<T: TargetDensity, S: Real>(target: &T, n: usize, z: &[S]) -> Result<Vec<Vec<S>>> {
    match n {
        0 => Ok(Vec::new()),
        1 => Ok(vec![z.to_vec()]),
        2 => Ok(vec![z.to_vec(), checked_gradient(target, z, 0)?]),
        _ => Err(Error::invalid(format!("momentum models take 0, 1 or 2 inputs, got {n}"))),
    }
}

/// Evaluates a momentum model at `z`.
pub fn momentum_distribution<T: TargetDensity, S: Real>(
    target: &T,
    model: &ConditionalLinearGaussian<S>,
    z: &[S],
) -> Result<DiagGaussian<S>> {
    let feats = momentum_features(target, model.num_inputs(), z)?;
    let refs: Vec<&[S]> = feats.iter().map(Vec::as_slice).collect();
    model.condition(&refs)
}

#[derive(Debug, Clone)]
pub struct HmcStep<S> {
    pub z: Vec<S>,
    /// Momentum after the dynamics.
    pub v: Vec<S>,
    /// Initial momentum `v'`.
    pub v_init: Vec<S>,
    /// `log q(v' | z_{t-1})`, which is also the log-density of the move in
    /// `(z, v)` because the dynamics preserve volume.
    pub log_q: S,
}

/// Draws `v' ~ q(v' | z_{t-1})` by reparameterization and runs the dynamics.
pub fn hmc_transition<T: TargetDensity, S: Real>(
    target: &T,
    z_prev: &[S],
    momentum_model: &ConditionalLinearGaussian<S>,
    params: &HmcParams<S>,
    u: &[f64],
) -> Result<HmcStep<S>> {
    check_dim("momentum model output", z_prev.len(), momentum_model.out_dim())?;
    let q = momentum_distribution(target, momentum_model, z_prev)?;
    let v_init = q.sample_reparam(u)?;
    let log_q = q.log_pdf_of_noise(u)?;
    let (z, v) = leapfrog(target, z_prev, &v_init, params)?;
    Ok(HmcStep { z, v, v_init, log_q })
}

/// Reverse model for one Metropolis-Hastings step with an explicit accept bit `a`.
///
/// `r(a = 1 | z_t) = sigmoid(w . z_t + b)`; `accepted` predicts `z_{t-1}` from
/// `z_t` after an accept and `rejected` predicts the discarded proposal from
/// `z_t` after a reject.
#[derive(Debug, Clone)]
pub struct MhInverse<S> {
    pub accept_weights: Vec<S>,
    pub accept_bias: S,
    pub accepted: ConditionalLinearGaussian<S>,
    pub rejected: ConditionalLinearGaussian<S>,
}

impl<S: Real> MhInverse<S> {
    fn accept_logit(&self, z: &[S]) -> S {
        crate::autodiff::dot(&self.accept_weights, z) + self.accept_bias
    }

    /// `ln r(a | z_t)`
    pub fn log_accept(&self, accepted: bool, z_t: &[S]) -> S {
        let l = self.accept_logit(z_t);
        if accepted {
            l.ln_sigmoid()
        } else {
            (-l).ln_sigmoid()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhTerm<S> {
    pub proposal: Vec<S>,
    /// Acceptance probability `min(1, p(z') / p(z))`.
    pub rho: S,
    /// `ln alpha` on the accept branch.
    pub log_alpha_accept: S,
    /// `ln alpha` on the reject branch; `None` when `rho = 1`.
    pub log_alpha_reject: Option<S>,
    /// `rho ln alpha(a=1) + (1 - rho) ln alpha(a=0)`.
    pub expected: S,
}

/// Expected `ln alpha_t` of a random-walk Metropolis-Hastings step, with the
/// accept decision summed out analytically.
///
/// The proposal is `z' = z + exp(proposal_log_std) * u`.
pub fn mh_rao_blackwell_term<T: TargetDensity, S: Real>(
    target: &T,
    z_prev: &[S],
    proposal_log_std: &[S],
    inverse: &MhInverse<S>,
    u: &[f64],
) -> Result<MhTerm<S>> {
    let d = target.dim();
    check_dim("mh state", d, z_prev.len())?;
    check_dim("mh accept weights", d, inverse.accept_weights.len())?;
    let phi = DiagGaussian::new(z_prev.to_vec(), proposal_log_std.to_vec())?;
    let proposal = phi.sample_reparam(u)?;
    let log_phi = phi.log_pdf_of_noise(u)?;
    let lp_prev = target.log_joint(z_prev);
    let lp_prop = target.log_joint(&proposal);
    let log_ratio = lp_prop - lp_prev;
    if !log_ratio.value().is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    // symmetric proposal: the phi terms cancel inside rho
    let (rho, ln_rho) = if log_ratio.value() >= 0.0 {
        (S::constant(1.0), S::zero())
    } else {
        (log_ratio.exp(), log_ratio)
    };
    let r_acc = inverse.accepted.condition(&[&proposal])?;
    let log_alpha_accept = log_ratio + inverse.log_accept(true, &proposal) + r_acc.log_pdf(z_prev)?
        - log_phi
        - ln_rho;
    let one_minus = -rho + 1.0;
    let (log_alpha_reject, expected) = if one_minus.value() > 0.0 {
        let r_rej = inverse.rejected.condition(&[z_prev])?;
        let la0 = inverse.log_accept(false, z_prev) + r_rej.log_pdf(&proposal)? - log_phi - one_minus.ln();
        (Some(la0), rho * log_alpha_accept + one_minus * la0)
    } else {
        (None, log_alpha_accept)
    };
    Ok(MhTerm {
        proposal,
        rho,
        log_alpha_accept,
        log_alpha_reject,
        expected,
    })
}

/// Builds a plain `N(0, M)` momentum model of dimension `d`, i.e. no inputs,
/// zero bias and `log_std = 0.5 log M`.
pub fn mass_momentum_model<S: Real>(log_mass: &[S]) -> Result<ConditionalLinearGaussian<S>> {
    ConditionalLinearGaussian::new(
        Vec::new(),
        vec![S::zero(); log_mass.len()],
        log_mass.iter().map(|&m| m * 0.5).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{lift, Tape};
    use crate::distributions::Matrix;
    use crate::targets::{BetaBinomial, BivariateGaussian, FlatTarget, OverdispersionData, StandardGaussian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn bivariate_target() -> BivariateGaussian {
        BivariateGaussian::new(1.0, 10.0).unwrap()
    }

    #[test]
    fn detailed_balance_holds_pointwise() {
        let t = bivariate_target();
        let form = t.quadratic_form();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..1000 {
            let alpha = if k % 2 == 0 { 0.0 } else { rng.random_range(-0.95..0.95) };
            let z = [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)];
            let u = normals(&mut rng, 2);
            let s = overrelax_sweep(&form, &z, alpha, &[0, 1], &u).unwrap();
            let back = overrelax_log_density(&form, &s.z, &z, alpha, &[1, 0]).unwrap();
            let fwd = overrelax_log_density(&form, &z, &s.z, alpha, &[0, 1]).unwrap();
            assert!((fwd - s.log_q).abs() < 1e-10);
            let lhs = t.log_joint(&s.z) + back - t.log_joint(&z) - s.log_q;
            assert!(lhs.abs() < 1e-10, "k={k} residual {lhs}");
        }
    }

    #[test]
    fn alpha_zero_is_gibbs() {
        let t = bivariate_target();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z = normals(&mut rng, 2);
            let u = normals(&mut rng, 2);
            let g = gibbs_step(&t, &z, &[0, 1], &u).unwrap();
            let o = overrelax_step(&t, &z, 0.0, &u).unwrap();
            assert_eq!(g.z, o.z);
            assert_eq!(g.log_q, o.log_q);
        }
    }

    #[test]
    fn sweep_log_q_is_sum_of_conditionals() {
        let t = bivariate_target();
        let z = [0.4, -1.1];
        let u = [0.3, -0.8];
        let s = gibbs_step(&t, &z, &[0, 1], &u).unwrap();
        let c1 = t.gaussian_full_conditional(0, z[1]).unwrap();
        let c2 = t.gaussian_full_conditional(1, s.z[0]).unwrap();
        let want = c1.log_pdf(&[s.z[0]]).unwrap() + c2.log_pdf(&[s.z[1]]).unwrap();
        assert!((s.log_q - want).abs() < 1e-12);
    }

    #[test]
    fn symmetric_gibbs_sweep_has_zero_mean() {
        let t = BivariateGaussian::new(2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let u = normals(&mut rng, 2);
            let s = gibbs_step(&t, &[5.0, -3.0], &[0, 1], &u).unwrap();
            acc[0] += s.z[0];
            acc[1] += s.z[1];
        }
        // each coordinate has variance 2 and is independent of the start
        for a in acc {
            assert!((a / n as f64).abs() < 4.0 * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn long_gibbs_chain_matches_stationary_variance() {
        let t = BivariateGaussian::new(1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = vec![0.0, 0.0];
        let (mut s1, mut n) = (0.0, 0usize);
        for k in 0..200_000 {
            let u = normals(&mut rng, 2);
            z = gibbs_step(&t, &z, &[0, 1], &u).unwrap().z;
            if k > 1000 {
                s1 += z[0] * z[0];
                n += 1;
            }
        }
        let want = (1.0 + 9.0) / 4.0;
        assert!((s1 / n as f64 - want).abs() < 0.05 * want);
    }

    #[test]
    fn overrelaxation_preserves_stationary_moments() {
        let t = bivariate_target();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        // exact draw: z1 - z2 ~ N(0, 1), z1 + z2 ~ N(0, 100)
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * 10.0;
            let z = [(a + b) / 2.0, (b - a) / 2.0];
            let u = normals(&mut rng, 2);
            let s = overrelax_step(&t, &z, -0.76, &u).unwrap();
            for i in 0..2 {
                m[i] += s.z[i];
                v[i] += s.z[i] * s.z[i];
            }
        }
        let var = 101.0 / 4.0;
        for i in 0..2 {
            let se = (var / n as f64).sqrt();
            assert!((m[i] / n as f64).abs() < 4.0 * se);
            assert!((v[i] / n as f64 - var).abs() < 0.02 * var);
        }
    }

    #[test]
    fn sweep_rejects_bad_arguments() {
        let t = bivariate_target();
        assert!(overrelax_step(&t, &[0.0, 0.0], 1.0, &[0.0, 0.0]).is_err());
        assert!(overrelax_step(&t, &[0.0, 0.0], -1.2, &[0.0, 0.0]).is_err());
        assert!(gibbs_step(&t, &[0.0, 0.0], &[0, 0], &[0.0, 0.0]).is_err());
        let bb = BetaBinomial::new(&OverdispersionData::cancer_mortality());
        assert!(matches!(
            gibbs_step(&bb, &[0.0, 0.0], &[0, 1], &[0.0, 0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn free_particle_moves_in_straight_line() {
        let t = FlatTarget { dim: 2 };
        let p = HmcParams::new(0.1f64.ln(), vec![0.0, 2f64.ln()], 5).unwrap();
        let (z, v) = leapfrog(&t, &[1.0, -1.0], &[0.5, 2.0], &p).unwrap();
        assert!((z[0] - (1.0 + 5.0 * 0.1 * 0.5)).abs() < 1e-12);
        assert!((z[1] - (-1.0 + 5.0 * 0.1 * 2.0 / 2.0)).abs() < 1e-12);
        assert_eq!(v, vec![0.5, 2.0]);
    }

    #[test]
    fn leapfrog_is_reversible_and_volume_preserving() {
        let bb = BetaBinomial::new(&OverdispersionData::cancer_mortality());
        let t = bivariate_target();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p = HmcParams::new(rng.random_range(-4.0..-2.5), vec![rng.random_range(-0.5..0.5), 1.0], 4).unwrap();
            let z = [rng.random_range(-7.2..-6.4), rng.random_range(6.5..8.5)];
            let v = normals(&mut rng, 2);
            let (z1, v1) = leapfrog(&bb, &z, &v, &p).unwrap();
            let neg: Vec<f64> = v1.iter().map(|x| -x).collect();
            let (z0, v0) = leapfrog(&bb, &z1, &neg, &p).unwrap();
            for i in 0..2 {
                assert!((z0[i] - z[i]).abs() < 1e-8);
                assert!((v0[i] + v[i]).abs() < 1e-8);
            }
            // finite-difference Jacobian of (z, v) -> (z', v') on the gaussian target
            let p = HmcParams::new(-1.0, vec![0.3, -0.2], 3).unwrap();
            let x = [z[0] + 7.0, z[1] - 7.0, v[0], v[1]];
            let map = |x: &[f64]| {
                let (a, b) = leapfrog(&t, &x[..2], &x[2..], &p).unwrap();
                [a[0], a[1], b[0], b[1]]
            };
            let h = 1e-6;
            let mut jac = nalgebra::Matrix4::<f64>::zeros();
            for c in 0..4 {
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let (fp, fm) = (map(&xp), map(&xm));
                for r in 0..4 {
                    jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            assert!((jac.determinant().abs() - 1.0).abs() < 1e-6, "det {}", jac.determinant());
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let t = StandardGaussian { dim: 2 };
        let z = [1.0, -0.5];
        let v = [0.3, 0.8];
        let energy_error = |eps: f64| {
            let steps = (1.0 / eps).round() as usize;
            let p = HmcParams::new(eps.ln(), vec![0.0, 0.0], steps).unwrap();
            let (z1, v1) = leapfrog(&t, &z, &v, &p).unwrap();
            let h = |z: &[f64], v: &[f64]| p.kinetic(v) - t.log_joint(z);
            (h(&z1, &v1) - h(&z, &v)).abs()
        };
        let ratio = energy_error(0.1) / energy_error(0.05);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn divergence_reports_step() {
        struct Blowup;
        impl TargetDensity for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn log_joint<S: Real>(&self, z: &[S]) -> S {
                z[0].exp().exp()
            }
            fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
                vec![z[0].exp().exp() * z[0].exp()]
            }
        }
        let p = HmcParams::new(0.0, vec![0.0], 10).unwrap();
        let err = leapfrog(&Blowup, &[3.0], &[1.0], &p).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if (1..=10).contains(&step)));
    }

    #[test]
    fn zero_steps_is_identity_transition() {
        let t = bivariate_target();
        let p = HmcParams::new(-1.0, vec![0.0, 0.0], 0).unwrap();
        let model = mass_momentum_model(&[0.0, 0.0]).unwrap();
        let s = hmc_transition(&t, &[1.0, 2.0], &model, &p, &[0.5, -0.5]).unwrap();
        assert_eq!(s.z, vec![1.0, 2.0]);
        assert_eq!(s.v, s.v_init);
    }

    #[test]
    fn hmc_leaves_standard_gaussian_invariant() {
        let t = StandardGaussian { dim: 2 };
        let log_mass = [0.4, -0.3];
        let p = HmcParams::new(-2.0, log_mass.to_vec(), 6).unwrap();
        let model = mass_momentum_model(&log_mass).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            // without an accept step the marginal drifts by the energy error,
            // which is small at this step size
            let z = normals(&mut rng, 2);
            let u = normals(&mut rng, 2);
            let s = hmc_transition(&t, &z, &model, &p, &u).unwrap();
            for i in 0..2 {
                m[i] += s.z[i];
                v[i] += s.z[i] * s.z[i];
            }
        }
        for i in 0..2 {
            assert!((m[i] / n as f64).abs() < 0.02);
            assert!((v[i] / n as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn hmc_log_q_gradient_matches_finite_differences() {
        let bb = BetaBinomial::new(&OverdispersionData::cancer_mortality());
        let u = [0.3, -1.2];
        let z0 = [-6.9, 7.3];
        // theta = (log eps, log m1, log m2, w_z (4), w_g (4), bias (2), log_std (2))
        let f = |theta: &[f64]| -> f64 { alpha_hmc(&bb, &z0, theta, &u) };
        let theta: Vec<f64> = vec![
            -3.0, 0.1, -0.2, 0.01, -0.02, 0.03, 0.0, 0.001, 0.0, 0.0, -0.002, 0.1, -0.1, -0.3, 0.2,
        ];
        let tape = Tape::new();
        let vars = tape.vars(&theta);
        let out = alpha_hmc(&bb, &lift_vars(&z0), &vars, &u);
        let g = tape.gradient(out, &vars).unwrap();
        for i in 0..theta.len() {
            let h = 1e-4;
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "i={i}: {fd} vs {}", g[i]);
        }
    }

    fn lift_vars<S: Real>(x: &[f64]) -> Vec<S> {
        lift(x)
    }

    fn alpha_hmc<S: Real>(bb: &BetaBinomial, z0: &[S], theta: &[S], u: &[f64]) -> S {
        let p = HmcParams::new(theta[0], theta[1..3].to_vec(), 2).unwrap();
        let model = ConditionalLinearGaussian::new(
            vec![
                Matrix::new(2, 2, theta[3..7].to_vec()).unwrap(),
                Matrix::new(2, 2, theta[7..11].to_vec()).unwrap(),
            ],
            theta[11..13].to_vec(),
            theta[13..15].to_vec(),
        )
        .unwrap();
        let s = hmc_transition(bb, z0, &model, &p, u).unwrap();
        let r = DiagGaussian::new(vec![S::zero(); 2], vec![S::constant(0.5); 2]).unwrap();
        bb.log_joint(&s.z) + r.log_pdf(&s.v).unwrap() - bb.log_joint(z0) - s.log_q
    }

    fn test_inverse(scale: f64) -> MhInverse<f64> {
        MhInverse {
            accept_weights: vec![0.1, -0.2],
            accept_bias: 0.3,
            accepted: ConditionalLinearGaussian::new(
                vec![Matrix::new(2, 2, vec![0.9, 0.0, 0.05, 0.8]).unwrap()],
                vec![0.1, -0.1],
                vec![scale.ln(); 2],
            )
            .unwrap(),
            rejected: ConditionalLinearGaussian::new(
                vec![Matrix::identity(2)],
                vec![0.0, 0.0],
                vec![0.0, 0.2],
            )
            .unwrap(),
        }
    }

    #[test]
    fn mh_expectation_matches_enumeration() {
        let t = StandardGaussian { dim: 2 };
        let inv = test_inverse(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut partial = 0;
        for _ in 0..200 {
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let u = normals(&mut rng, 2);
            let ls = [-0.5, 0.2];
            let term = mh_rao_blackwell_term(&t, &z, &ls, &inv, &u).unwrap();
            let zp: Vec<f64> = (0..2).map(|i| z[i] + ls[i].exp() * u[i]).collect();
            let phi = DiagGaussian::new(z.to_vec(), ls.to_vec()).unwrap().log_pdf(&zp).unwrap();
            let rho = (t.log_joint(&zp) - t.log_joint(&z)).exp().min(1.0);
            let mut total = 0.0;
            for a in [true, false] {
                let q_a = if a { rho } else { 1.0 - rho };
                if q_a == 0.0 {
                    continue;
                }
                let z_t: &[f64] = if a { &zp } else { &z };
                let logit = 0.1 * z_t[0] - 0.2 * z_t[1] + 0.3;
                let r_a = if a {
                    crate::special::sigmoid(logit).ln()
                } else {
                    crate::special::sigmoid(-logit).ln()
                };
                let rz = if a {
                    inv.accepted.condition(&[&zp]).unwrap().log_pdf(&z).unwrap()
                } else {
                    inv.rejected.condition(&[&z]).unwrap().log_pdf(&zp).unwrap()
                };
                let la = t.log_joint(z_t) - t.log_joint(&z) + r_a + rz - (phi + q_a.ln());
                total += q_a * la;
            }
            if rho < 1.0 {
                partial += 1;
            }
            assert!((term.expected - total).abs() < 1e-10, "{} vs {total}", term.expected);
        }
        assert!(partial > 20);
    }

    #[test]
    fn mh_accepts_uphill_and_identical_moves() {
        let t = StandardGaussian { dim: 2 };
        let inv = test_inverse(1.0);
        // proposal lands on the mode from off-mode: uphill
        let term = mh_rao_blackwell_term(&t, &[0.5, 0.5], &[0.0, 0.0], &inv, &[-0.5, -0.5]).unwrap();
        assert_eq!(term.rho, 1.0);
        assert!(term.log_alpha_reject.is_none());
        // zero noise: z' = z numerically
        let term = mh_rao_blackwell_term(&t, &[0.3, -0.2], &[-3.0, -3.0], &inv, &[0.0, 0.0]).unwrap();
        assert_eq!(term.rho, 1.0);
        assert_eq!(term.proposal, vec![0.3, -0.2]);
    }
}
