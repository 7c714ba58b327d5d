//! Unnormalized target log-densities `log p(x, z)` with hand-derived gradients.
//!
//! The gradient is returned as an expression in the same scalar type as `z`, so
//! leapfrog dynamics built on it stay differentiable with respect to everything
//! upstream of `z` without second-order tape support.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{dot, lift, sum, Real};
use crate::distributions::{BernoulliVector, DiagGaussian, LN_NORM};
use crate::error::{check_dim, Error, Result};
use crate::special;

pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    fn log_joint<S: Real>(&self, z: &[S]) -> S;

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S>;

    /// `ln ∫ exp(log_joint(z)) dz` when known in closed form.
    fn known_log_normalizer(&self) -> Option<f64> {
        None
    }

    /// Present when `log_joint` is a Gaussian quadratic form, which gives every
    /// coordinate a Gaussian full conditional.
    fn gaussian_form(&self) -> Option<QuadraticForm<f64>> {
        None
    }
}

/// Gaussian log-density up to a constant: `-0.5 z'Pz + b'z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm<S> {
    pub precision: Vec<Vec<S>>,
    pub linear: Vec<S>,
}

impl<S: Real> QuadraticForm<S> {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn eval(&self, z: &[S]) -> S {
        let mut acc = S::zero();
        for (i, row) in self.precision.iter().enumerate() {
            let pz = dot(row, z);
            acc += z[i] * (self.linear[i] - pz * 0.5);
        }
        acc
    }

    /// Mean and variance of coordinate `axis` given the others.
    pub fn conditional(&self, axis: usize, z: &[S]) -> (S, S) {
        let p_ii = self.precision[axis][axis];
        let mut num = self.linear[axis];
        for (j, &zj) in z.iter().enumerate() {
            if j != axis {
                num -= self.precision[axis][j] * zj;
            }
        }
        (num / p_ii, S::constant(1.0) / p_ii)
    }
}

impl QuadraticForm<f64> {
    pub fn lift<S: Real>(&self) -> QuadraticForm<S> {
        QuadraticForm {
            precision: self.precision.iter().map(|r| lift(r)).collect(),
            linear: lift(&self.linear),
        }
    }

    /// Quadratic form of a diagonal Gaussian's log density.
    pub fn from_diag_gaussian<S: Real>(g: &DiagGaussian<S>) -> QuadraticForm<S> {
        let d = g.dim();
        let mut precision = vec![vec![S::zero(); d]; d];
        let mut linear = Vec::with_capacity(d);
        for i in 0..d {
            let inv_var = (g.log_std()[i] * -2.0).exp();
            precision[i][i] = inv_var;
            linear.push(g.mean()[i] * inv_var);
        }
        QuadraticForm { precision, linear }
    }

    /// `(1 - beta) * log q0 + beta * self`, for a diagonal Gaussian `q0`.
    pub fn tempered<S: Real>(&self, q0: &DiagGaussian<S>, beta: f64) -> QuadraticForm<S> {
        let base = QuadraticForm::from_diag_gaussian(q0);
        let d = self.dim();
        let precision = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| base.precision[i][j] * (1.0 - beta) + S::constant(beta * self.precision[i][j]))
                    .collect()
            })
            .collect();
        let linear = (0..d)
            .map(|i| base.linear[i] * (1.0 - beta) + S::constant(beta * self.linear[i]))
            .collect();
        QuadraticForm { precision, linear }
    }
}

/// `p(z1, z2) ∝ exp[-(z1 - z2)^2 / (2 s1^2) - (z1 + z2)^2 / (2 s2^2)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateGaussian {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl BivariateGaussian {
    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0) || !sigma1.is_finite() || !sigma2.is_finite() {
            return Err(Error::invalid(format!(
                "bivariate gaussian scales must be positive, got ({sigma1}, {sigma2})"
            )));
        }
        Ok(Self { sigma1, sigma2 })
    }

    pub fn quadratic_form(&self) -> QuadraticForm<f64> {
        let a = self.sigma1.powi(-2);
        let b = self.sigma2.powi(-2);
        QuadraticForm {
            precision: vec![vec![a + b, b - a], vec![b - a, a + b]],
            linear: vec![0.0, 0.0],
        }
    }

    /// Full conditional of coordinate `axis` (0 or 1) given the other one.
    pub fn gaussian_full_conditional<S: Real>(&self, axis: usize, z_other: S) -> Result<DiagGaussian<S>> {
        if axis > 1 {
            return Err(Error::invalid(format!("axis {axis} out of range for a 2-d target")));
        }
        let a = self.sigma1.powi(-2);
        let b = self.sigma2.powi(-2);
        let precision = a + b;
        let mean = z_other * ((a - b) / precision);
        DiagGaussian::new(vec![mean], vec![S::constant(-0.5 * precision.ln())])
    }
}

impl TargetDensity for BivariateGaussian {
    fn dim(&self) -> usize {
        2
    }

    fn log_joint<S: Real>(&self, z: &[S]) -> S {
        let d = z[0] - z[1];
        let s = z[0] + z[1];
        -(d.square() / (2.0 * self.sigma1 * self.sigma1)) - s.square() / (2.0 * self.sigma2 * self.sigma2)
    }

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
        let d = (z[0] - z[1]) / (self.sigma1 * self.sigma1);
        let s = (z[0] + z[1]) / (self.sigma2 * self.sigma2);
        vec![-d - s, d - s]
    }

    fn known_log_normalizer(&self) -> Option<f64> {
        Some((PI * self.sigma1 * self.sigma2).ln())
    }

    fn gaussian_form(&self) -> Option<QuadraticForm<f64>> {
        Some(self.quadratic_form())
    }
}

/// `exp(-|z|^2 / 2)` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardGaussian {
    pub dim: usize,
}

impl TargetDensity for StandardGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_joint<S: Real>(&self, z: &[S]) -> S {
        -dot(z, z) * 0.5
    }

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
        z.iter().map(|&x| -x).collect()
    }

    fn known_log_normalizer(&self) -> Option<f64> {
        Some(0.5 * self.dim as f64 * (2.0 * PI).ln())
    }

    fn gaussian_form(&self) -> Option<QuadraticForm<f64>> {
        let precision = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Some(QuadraticForm {
            precision,
            linear: vec![0.0; self.dim],
        })
    }
}

/// Constant log-density; useful for checking free-particle dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatTarget {
    pub dim: usize,
}

impl TargetDensity for FlatTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_joint<S: Real>(&self, _z: &[S]) -> S {
        S::zero()
    }

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
        vec![S::zero(); z.len()]
    }
}

/// Twenty `(n_j, x_j)` pairs: number at risk and number of deaths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverdispersionData {
    pairs: Vec<(u64, u64)>,
}

impl OverdispersionData {
    pub const LEN: usize = 20;

    pub fn new(pairs: Vec<(u64, u64)>) -> Result<Self> {
        check_dim("overdispersion data rows", Self::LEN, pairs.len())?;
        if let Some(&(n, x)) = pairs.iter().find(|&&(n, x)| x > n) {
            return Err(Error::invalid(format!("count {x} exceeds trials {n}")));
        }
        Ok(Self { pairs })
    }

    /// Two integer columns per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 2 {
                return Err(err(format!("expected 2 columns, found {}", cols.len())));
            }
            let n = cols[0].parse().map_err(|e| err(format!("{}: {e}", cols[0])))?;
            let x = cols[1].parse().map_err(|e| err(format!("{}: {e}", cols[1])))?;
            pairs.push((n, x));
        }
        Self::new(pairs)
    }

    /// The bundled Missouri stomach-cancer table.
    pub fn cancer_mortality() -> Self {
        Self::parse(include_str!("../data/cancermortality.txt")).expect("bundled data parses")
    }

    pub fn pairs(&self) -> &[(u64, u64)] {
        &self.pairs
    }
}

/// Beta-binomial overdispersion model over `z = (logit eta, log K)`.
///
/// `x_j ~ BetaBinomial(n_j, K eta, K (1 - eta))` with prior
/// `p(eta, K) ∝ 1 / (eta (1 - eta)) * 1 / (1 + K)^2`. After the change of
/// variables the prior and Jacobian contribute `log K - 2 log(1 + K)`.
#[derive(Debug, Clone)]
pub struct BetaBinomial {
    rows: Vec<Row>,
    log_choose: f64,
}

#[derive(Debug, Clone, Copy)]
struct Row {
    n: f64,
    x: f64,
}

impl BetaBinomial {
    pub fn new(data: &OverdispersionData) -> Self {
        let mut log_choose = 0.0;
        let rows = data
            .pairs()
            .iter()
            .map(|&(n, x)| {
                let (n, x) = (n as f64, x as f64);
                log_choose += special::ln_gamma(n + 1.0)
                    - special::ln_gamma(x + 1.0)
                    - special::ln_gamma(n - x + 1.0);
                Row { n, x }
            })
            .collect();
        Self { rows, log_choose }
    }

    /// Sum of beta-binomial log pmfs, without the prior.
    pub fn log_likelihood<S: Real>(&self, z: &[S]) -> S {
        let k = z[1].exp();
        let eta = z[0].sigmoid();
        let a = k * eta;
        let b = k * (-z[0]).sigmoid();
        let lg_a = a.ln_gamma();
        let lg_b = b.ln_gamma();
        let lg_k = k.ln_gamma();
        let terms = self.rows.iter().map(|r| {
            (a + r.x).ln_gamma() + (b + (r.n - r.x)).ln_gamma() - (k + r.n).ln_gamma() - lg_a - lg_b
                + lg_k
        });
        sum(terms) + self.log_choose
    }
}

impl TargetDensity for BetaBinomial {
    fn dim(&self) -> usize {
        2
    }

    fn log_joint<S: Real>(&self, z: &[S]) -> S {
        self.log_likelihood(z) + z[1] - z[1].softplus() * 2.0
    }

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
        let k = z[1].exp();
        let eta = z[0].sigmoid();
        let one_minus = (-z[0]).sigmoid();
        let a = k * eta;
        let b = k * one_minus;
        let (dg_a, dg_b, dg_k) = (a.digamma(), b.digamma(), k.digamma());
        let mut sum_a = S::zero();
        let mut sum_b = S::zero();
        let mut sum_k = S::zero();
        for r in &self.rows {
            sum_a += (a + r.x).digamma() - dg_a;
            sum_b += (b + (r.n - r.x)).digamma() - dg_b;
            sum_k += dg_k - (k + r.n).digamma();
        }
        let g0 = a * one_minus * (sum_a - sum_b);
        let g1 = a * sum_a + b * sum_b + k * sum_k + 1.0 - z[1].sigmoid() * 2.0;
        vec![g0, g1]
    }
}

/// One-hidden-layer decoder mapping `z` to Bernoulli logits over `x`, with
/// softplus hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub latent_dim: usize,
    pub hidden: usize,
    pub data_dim: usize,
    /// hidden x latent, row-major
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// data x hidden, row-major
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ToyDecoder {
    pub fn new(
        latent_dim: usize,
        hidden: usize,
        data_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 || data_dim == 0 {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        check_dim("decoder w1", hidden * latent_dim, w1.len())?;
        check_dim("decoder b1", hidden, b1.len())?;
        check_dim("decoder w2", data_dim * hidden, w2.len())?;
        check_dim("decoder b2", data_dim, b2.len())?;
        if w1.iter().chain(&b1).chain(&w2).chain(&b2).any(|v| !v.is_finite()) {
            return Err(Error::invalid("decoder parameters must be finite"));
        }
        Ok(Self {
            latent_dim,
            hidden,
            data_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(latent_dim: usize, hidden: usize, data_dim: usize) -> Result<Self> {
        Self::new(
            latent_dim,
            hidden,
            data_dim,
            vec![0.0; hidden * latent_dim],
            vec![0.0; hidden],
            vec![0.0; data_dim * hidden],
            vec![0.0; data_dim],
        )
    }

    /// Weights and biases drawn from `N(0, scale^2)`.
    pub fn random(
        latent_dim: usize,
        hidden: usize,
        data_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let w1 = draw(hidden * latent_dim);
        let b1 = draw(hidden);
        let w2 = draw(data_dim * hidden);
        let b2 = draw(data_dim);
        Self::new(latent_dim, hidden, data_dim, w1, b1, w2, b2)
    }

    fn pre_activation<S: Real>(&self, z: &[S]) -> Vec<S> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.latent_dim..(h + 1) * self.latent_dim];
                sum(row.iter().zip(z).map(|(&w, &zi)| zi * w)) + self.b1[h]
            })
            .collect()
    }

    fn output<S: Real>(&self, hidden: &[S]) -> Vec<S> {
        (0..self.data_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                sum(row.iter().zip(hidden).map(|(&w, &h)| h * w)) + self.b2[o]
            })
            .collect()
    }

    pub fn logits<S: Real>(&self, z: &[S]) -> Vec<S> {
        let hidden: Vec<S> = self.pre_activation(z).into_iter().map(Real::softplus).collect();
        self.output(&hidden)
    }

    pub fn sample(&self, z: &[f64], rng: &mut impl Rng) -> Vec<u8> {
        self.logits(z)
            .into_iter()
            .map(|l| u8::from(rng.random::<f64>() < special::sigmoid(l)))
            .collect()
    }
}

/// `log N(z | 0, I) + log Bernoulli(x | decoder(z))` for one observation `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTarget {
    decoder: ToyDecoder,
    x: Vec<u8>,
}

impl DecoderTarget {
    pub fn new(decoder: ToyDecoder, x: Vec<u8>) -> Result<Self> {
        check_dim("decoder observation", decoder.data_dim, x.len())?;
        if x.iter().any(|&v| v > 1) {
            return Err(Error::invalid("decoder observation must be binary"));
        }
        Ok(Self { decoder, x })
    }

    pub fn observation(&self) -> &[u8] {
        &self.x
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }
}

impl TargetDensity for DecoderTarget {
    fn dim(&self) -> usize {
        self.decoder.latent_dim
    }

    fn log_joint<S: Real>(&self, z: &[S]) -> S {
        let prior = -dot(z, z) * 0.5 + LN_NORM * z.len() as f64;
        let lik = BernoulliVector::new(self.decoder.logits(z))
            .log_pmf(&self.x)
            .expect("observation validated at construction");
        prior + lik
    }

    fn grad_log_joint<S: Real>(&self, z: &[S]) -> Vec<S> {
        let d = &self.decoder;
        let pre = d.pre_activation(z);
        let hidden: Vec<S> = pre.iter().map(|&a| a.softplus()).collect();
        let logits = d.output(&hidden);
        // d/dl of the Bernoulli log pmf is x - sigmoid(l)
        let err: Vec<S> = logits
            .iter()
            .zip(&self.x)
            .map(|(&l, &xi)| -l.sigmoid() + f64::from(xi))
            .collect();
        let back_hidden: Vec<S> = (0..d.hidden)
            .map(|h| {
                let g = sum((0..d.data_dim).map(|o| err[o] * d.w2[o * d.hidden + h]));
                g * pre[h].sigmoid()
            })
            .collect();
        (0..d.latent_dim)
            .map(|i| {
                let g = sum((0..d.hidden).map(|h| back_hidden[h] * d.w1[h * d.latent_dim + i]));
                g - z[i]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_gradient<T: TargetDensity>(t: &T, z: &[f64], h: f64) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut zp = z.to_vec();
                zp[i] += h;
                let mut zm = z.to_vec();
                zm[i] -= h;
                (t.log_joint(&zp) - t.log_joint(&zm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: f64, b: f64, rel: f64) {
        assert!(
            (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0),
            "{a} vs {b}"
        );
    }

    #[test]
    fn bivariate_values() {
        let t = BivariateGaussian::new(1.0, 10.0).unwrap();
        assert_eq!(t.log_joint(&[0.0, 0.0]), 0.0);
        assert!((t.known_log_normalizer().unwrap() - 3.447_314_978_843_446).abs() < 1e-12);
        let t = BivariateGaussian::new(1.0, 1.0).unwrap();
        assert_eq!(t.grad_log_joint(&[1.0, 0.0]), vec![-2.0, 0.0]);
        assert!(BivariateGaussian::new(0.0, 1.0).is_err());
        assert!(BivariateGaussian::new(1.0, -2.0).is_err());
    }

    #[test]
    fn bivariate_conditional_values() {
        let t = BivariateGaussian::new(1.0, 10.0).unwrap();
        let c = t.gaussian_full_conditional(0, 1.0).unwrap();
        assert!((c.mean()[0] - 0.980_198_019_8).abs() < 1e-9);
        let var = (2.0 * c.log_std()[0]).exp();
        assert!((var - 0.990_099_009_9).abs() < 1e-9);
        let sym = BivariateGaussian::new(2.0, 2.0).unwrap();
        assert_eq!(sym.gaussian_full_conditional(1, 5.0).unwrap().mean()[0], 0.0);
        assert!(t.gaussian_full_conditional(2, 0.0).is_err());
    }

    #[test]
    fn conditional_is_proportional_to_joint_along_axis() {
        let t = BivariateGaussian::new(1.3, 4.0).unwrap();
        for axis in 0..2 {
            let other = -0.7;
            let c = t.gaussian_full_conditional(axis, other).unwrap();
            let diffs: Vec<f64> = (-20..=20)
                .map(|i| {
                    let zi = 0.25 * i as f64;
                    let z = if axis == 0 { [zi, other] } else { [other, zi] };
                    t.log_joint(&z) - c.log_pdf(&[zi]).unwrap()
                })
                .collect();
            for d in &diffs {
                assert!((d - diffs[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_form_matches_bivariate() {
        let t = BivariateGaussian::new(0.7, 3.0).unwrap();
        let q = t.quadratic_form();
        for z in [[0.3, -1.2], [2.0, 5.0], [-4.0, 0.1]] {
            assert!((q.eval(&z) - t.log_joint(&z)).abs() < 1e-12);
            for axis in 0..2 {
                let (m, v) = q.conditional(axis, &z);
                let c = t.gaussian_full_conditional(axis, z[1 - axis]).unwrap();
                assert!((m - c.mean()[0]).abs() < 1e-12);
                assert!((v - (2.0 * c.log_std()[0]).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tempered_form_endpoints() {
        let t = BivariateGaussian::new(1.0, 10.0).unwrap().quadratic_form();
        let q0 = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, -0.3]).unwrap();
        let at_one = t.tempered(&q0, 1.0);
        assert_eq!(at_one, t);
        let at_zero = t.tempered(&q0, 0.0);
        // log q0 up to a constant
        let c = at_zero.eval(&[0.0, 0.0]) - q0.log_pdf(&[0.0, 0.0]).unwrap();
        for z in [[0.5, 0.5], [-3.0, 2.0]] {
            let d = at_zero.eval(&z) - q0.log_pdf(&z).unwrap();
            assert!((d - c).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let biv = BivariateGaussian::new(1.0, 10.0).unwrap();
        let bb = BetaBinomial::new(&OverdispersionData::cancer_mortality());
        let dec = ToyDecoder::random(2, 6, 10, 1.0, &mut rng).unwrap();
        let x = dec.sample(&[0.3, -0.4], &mut rng);
        let dt = DecoderTarget::new(dec, x).unwrap();
        for _ in 0..20 {
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            for (a, b) in biv.grad_log_joint(&z).iter().zip(fd_gradient(&biv, &z, 1e-5)) {
                assert_close(*a, b, 1e-5);
            }
            for (a, b) in dt.grad_log_joint(&z).iter().zip(fd_gradient(&dt, &z, 1e-5)) {
                assert_close(*a, b, 1e-5);
            }
            let zb = [rng.random_range(-8.0..-5.0), rng.random_range(4.0..12.0)];
            // lnΓ cancellation at large K makes finite differences noisy here
            let tape = Tape::new();
            let vars = tape.vars(&zb);
            let exact = tape.gradient(bb.log_joint(&vars), &vars).unwrap();
            for (a, b) in bb.grad_log_joint(&zb).iter().zip(exact) {
                assert_close(*a, b, 1e-7);
            }
            for (a, b) in bb.grad_log_joint(&zb).iter().zip(fd_gradient(&bb, &zb, 1e-3)) {
                assert_close(*a, b, 1e-3);
            }
        }
    }

    #[test]
    fn tape_gradient_of_log_joint_matches_analytic() {
        let bb = BetaBinomial::new(&OverdispersionData::cancer_mortality());
        let tape = Tape::new();
        let z = tape.vars(&[-6.8, 7.5]);
        let lp = bb.log_joint(&z);
        let g = tape.gradient(lp, &z).unwrap();
        let analytic = bb.grad_log_joint(&[-6.8, 7.5]);
        for (a, b) in g.iter().zip(&analytic) {
            assert_close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn beta_binomial_tends_to_binomial() {
        let data = OverdispersionData::new(vec![(1, 0); 20]).unwrap();
        let bb = BetaBinomial::new(&data);
        // one trial: P(x = 0) = b / (a + b) = 1 - eta for every K
        for log_k in [-2.0, 0.5, 3.0] {
            let ll = bb.log_likelihood(&[0.0, log_k]);
            assert!((ll / 20.0 - 0.5f64.ln()).abs() < 1e-12);
        }
        let data = OverdispersionData::new(vec![(40, 7); 20]).unwrap();
        let bb = BetaBinomial::new(&data);
        // large K tends to Binomial(40, 0.3)
        let eta = 0.3f64;
        let ll = bb.log_likelihood(&[(eta / (1.0 - eta)).ln(), 16.0]) / 20.0;
        let binom = special::ln_gamma(41.0) - special::ln_gamma(8.0) - special::ln_gamma(34.0)
            + 7.0 * eta.ln()
            + 33.0 * (1.0 - eta).ln();
        assert!((ll - binom).abs() < 1e-4, "{ll} vs {binom}");
    }

    #[test]
    fn overdispersion_data_parse() {
        let d = OverdispersionData::cancer_mortality();
        assert_eq!(d.pairs().len(), 20);
        assert!(d.pairs().iter().all(|&(n, x)| x <= n));
        assert!(OverdispersionData::parse("1 2\n").is_err());
        let mut text = String::from("# header\n");
        for _ in 0..20 {
            text.push_str("10 3 # ok\n");
        }
        assert!(OverdispersionData::parse(&text).is_ok());
        text.push_str("5 6\n");
        assert!(OverdispersionData::parse(&text).is_err());
        assert!(matches!(
            OverdispersionData::parse("1 x\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let mut bad = String::new();
        for _ in 0..20 {
            bad.push_str("3 4\n");
        }
        assert!(OverdispersionData::parse(&bad).is_err());
    }

    #[test]
    fn zero_decoder_is_prior_times_coin_flips() {
        let dec = ToyDecoder::zeros(2, 4, 7).unwrap();
        let t = DecoderTarget::new(dec, vec![1, 0, 1, 1, 0, 0, 1]).unwrap();
        for z in [[0.0, 0.0], [1.5, -0.3]] {
            let prior = DiagGaussian::<f64>::standard(2).unwrap().log_pdf(&z).unwrap();
            let want = prior - 7.0 * 2f64.ln();
            assert!((t.log_joint(&z) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_target_validation() {
        let dec = ToyDecoder::zeros(1, 2, 3).unwrap();
        assert!(DecoderTarget::new(dec.clone(), vec![1, 0]).is_err());
        assert!(DecoderTarget::new(dec, vec![1, 0, 2]).is_err());
        assert!(ToyDecoder::new(1, 1, 1, vec![f64::NAN], vec![0.0], vec![0.0], vec![0.0]).is_err());
        assert!(ToyDecoder::new(1, 2, 1, vec![0.0], vec![0.0; 2], vec![0.0; 2], vec![0.0]).is_err());
    }
}
