//! Reparameterizable distributions with differentiable log-densities.

use std::f64::consts::PI;

use crate::autodiff::{sum, Real};
use crate::error::{check_dim, Error, Result};

/// `-0.5 * ln(2 pi)`
pub const LN_NORM: f64 = -0.918_938_533_204_672_7;

/// Gaussian with diagonal covariance, scale stored as `log_std`.
#[derive(Debug, Clone)]
pub struct DiagGaussian<S> {
    mean: Vec<S>,
    log_std: Vec<S>,
}

impl<S: Real> DiagGaussian<S> {
    pub fn new(mean: Vec<S>, log_std: Vec<S>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("gaussian dimension must be at least 1"));
        }
        check_dim("gaussian log_std", mean.len(), log_std.len())?;
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![S::zero(); dim], vec![S::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn log_std(&self) -> &[S] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<S> {
        self.log_std.iter().map(|&l| l.exp()).collect()
    }

    pub fn log_pdf(&self, x: &[S]) -> Result<S> {
        check_dim("gaussian log_pdf", self.dim(), x.len())?;
        Ok(sum(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((&m, &ls), &xi)| {
                let r = (xi - m) * (-ls).exp();
                -ls - r.square() * 0.5 + LN_NORM
            })))
    }

    /// `mean + exp(log_std) * u` for primitive standard-normal noise `u`.
    pub fn sample_reparam(&self, u: &[f64]) -> Result<Vec<S>> {
        check_dim("gaussian noise", self.dim(), u.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(u)
            .map(|((&m, &ls), &ui)| m + ls.exp() * ui)
            .collect())
    }

    /// Log density of a draw made with noise `u`, written in terms of `u`.
    ///
    /// Equal to `log_pdf(sample_reparam(u))` up to round-off.
    pub fn log_pdf_of_noise(&self, u: &[f64]) -> Result<S> {
        check_dim("gaussian noise", self.dim(), u.len())?;
        let quad: f64 = u.iter().map(|x| x * x).sum();
        Ok(S::constant(LN_NORM * self.dim() as f64 - 0.5 * quad) - sum(self.log_std.iter().copied()))
    }
}

/// Dense row-major matrix with `Real` entries.
#[derive(Debug, Clone)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        check_dim("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::constant(1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[S]) -> Result<Vec<S>> {
        check_dim("matrix-vector product", self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| crate::autodiff::dot(self.row(r), x))
            .collect())
    }
}

/// Gaussian whose mean is an affine function of a list of conditioning vectors:
/// `mean = sum_i W_i x_i + b`. The scale does not depend on the conditioning input.
#[derive(Debug, Clone)]
pub struct ConditionalLinearGaussian<S> {
    weights: Vec<Matrix<S>>,
    bias: Vec<S>,
    log_std: Vec<S>,
}

impl<S: Real> ConditionalLinearGaussian<S> {
    pub fn new(weights: Vec<Matrix<S>>, bias: Vec<S>, log_std: Vec<S>) -> Result<Self> {
        if bias.is_empty() {
            return Err(Error::invalid("conditional gaussian output dimension must be at least 1"));
        }
        check_dim("conditional gaussian log_std", bias.len(), log_std.len())?;
        for w in &weights {
            check_dim("conditional gaussian weight rows", bias.len(), w.rows())?;
        }
        Ok(Self {
            weights,
            bias,
            log_std,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    /// Number of conditioning vectors expected by [`condition`](Self::condition).
    pub fn num_inputs(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix<S>] {
        &self.weights
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    pub fn log_std(&self) -> &[S] {
        &self.log_std
    }

    pub fn condition(&self, inputs: &[&[S]]) -> Result<DiagGaussian<S>> {
        check_dim("conditional gaussian inputs", self.weights.len(), inputs.len())?;
        let mut mean = self.bias.clone();
        for (w, x) in self.weights.iter().zip(inputs) {
            for (m, wx) in mean.iter_mut().zip(w.matvec(x)?) {
                *m += wx;
            }
        }
        DiagGaussian::new(mean, self.log_std.clone())
    }
}

/// Independent Bernoulli variables parameterized by logits.
#[derive(Debug, Clone)]
pub struct BernoulliVector<S> {
    logits: Vec<S>,
}

impl<S: Real> BernoulliVector<S> {
    pub fn new(logits: Vec<S>) -> Self {
        Self { logits }
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn probabilities(&self) -> Vec<S> {
        self.logits.iter().map(|&l| l.sigmoid()).collect()
    }

    /// `sum_i x_i ln sigmoid(l_i) + (1 - x_i) ln sigmoid(-l_i)`.
    pub fn log_pmf(&self, x: &[u8]) -> Result<S> {
        check_dim("bernoulli observation", self.logits.len(), x.len())?;
        if let Some(bad) = x.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("bernoulli observation {bad} is not binary")));
        }
        Ok(sum(self.logits.iter().zip(x).map(|(&l, &xi)| {
            if xi == 1 {
                l.ln_sigmoid()
            } else {
                (-l).ln_sigmoid()
            }
        })))
    }
}

/// Uniform categorical over the last `k` iterates `T+1-k ..= T` of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureIndicator {
    first: usize,
    last: usize,
}

impl MixtureIndicator {
    pub fn new(chain_len: usize, k: usize) -> Result<Self> {
        if k == 0 || k > chain_len + 1 {
            return Err(Error::invalid(format!(
                "mixture size {k} must be in 1..={}",
                chain_len + 1
            )));
        }
        Ok(Self {
            first: chain_len + 1 - k,
            last: chain_len,
        })
    }

    pub fn support(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probability(&self, t: usize) -> f64 {
        if self.support().contains(&t) {
            1.0 / self.len() as f64
        } else {
            0.0
        }
    }

    pub fn log_prob(&self, t: usize) -> f64 {
        self.probability(t).ln()
    }
}

/// `ln N(x | mean, var)` for scalars.
pub fn normal_log_pdf<S: Real>(x: S, mean: S, var: S) -> S {
    -(x - mean).square() / (var * 2.0) - (var * (2.0 * PI)).ln() * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn unit_gaussian_log_pdf_at_zero() {
        let g = DiagGaussian::<f64>::standard(1).unwrap();
        assert!((g.log_pdf(&[0.0]).unwrap() + 0.918_938_5).abs() < 1e-7);
        let g = DiagGaussian::<f64>::standard(2).unwrap();
        let want = -2.0 * 0.918_938_533_204_672_7 - 1.0;
        assert!((g.log_pdf(&[1.0, 1.0]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        let g = DiagGaussian::new(vec![0.7], vec![-0.4f64]).unwrap();
        let (lo, hi, n) = (-8.0, 9.0, 20_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * h * g.log_pdf(&[x]).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_errors() {
        assert!(DiagGaussian::<f64>::new(vec![], vec![]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
        let g = DiagGaussian::<f64>::standard(2).unwrap();
        assert!(matches!(
            g.log_pdf(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(g.sample_reparam(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn sample_reparam_basics() {
        let g = DiagGaussian::new(vec![1.0, -2.0], vec![0.3, 0.1]).unwrap();
        assert_eq!(g.sample_reparam(&[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let s = DiagGaussian::<f64>::standard(1).unwrap();
        assert_eq!(s.sample_reparam(&[1.5]).unwrap(), vec![1.5]);
    }

    #[test]
    fn sample_reparam_moments() {
        let (mean, log_std) = (0.8, -0.5f64);
        let g = DiagGaussian::new(vec![mean], vec![log_std]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = StandardNormal.sample(&mut rng);
                g.sample_reparam(&[u]).unwrap()[0]
            })
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = log_std.exp();
        assert!((m - mean).abs() < 3.0 * sd / (n as f64).sqrt());
        // var of sample variance ~ 2 sigma^4 / n
        let se_var = (2.0 * sd.powi(4) / n as f64).sqrt();
        assert!((v - sd * sd).abs() < 3.0 * se_var);
    }

    #[test]
    fn reparam_gradients_flow_to_parameters() {
        let tape = Tape::new();
        let m = tape.var(0.5);
        let ls = tape.var(0.2);
        let g = DiagGaussian::new(vec![m], vec![ls]).unwrap();
        let z = g.sample_reparam(&[1.3]).unwrap()[0];
        let grad = tape.gradient(z, &[m, ls]).unwrap();
        assert_eq!(grad[0], 1.0);
        assert!((grad[1] - 0.2f64.exp() * 1.3).abs() < 1e-15);
    }

    #[test]
    fn log_pdf_of_noise_matches_change_of_variables() {
        let g = DiagGaussian::new(vec![0.3, -1.0], vec![0.4, -2.0]).unwrap();
        let u = [0.7, -1.9];
        let z = g.sample_reparam(&u).unwrap();
        let a = g.log_pdf(&z).unwrap();
        let b = g.log_pdf_of_noise(&u).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn condition_affine_mean() {
        let zero = ConditionalLinearGaussian::new(
            vec![Matrix::zeros(2, 2)],
            vec![0.5, -0.5],
            vec![0.0, 0.0],
        )
        .unwrap();
        let d = zero.condition(&[&[3.0, 4.0]]).unwrap();
        assert_eq!(d.mean(), &[0.5, -0.5]);

        let id = ConditionalLinearGaussian::new(
            vec![Matrix::identity(2)],
            vec![0.0, 0.0],
            vec![0.1, 0.2],
        )
        .unwrap();
        let d = id.condition(&[&[3.0, 4.0]]).unwrap();
        assert_eq!(d.mean(), &[3.0, 4.0]);
        assert_eq!(d.log_std(), &[0.1, 0.2]);
        assert!(id.condition(&[&[1.0]]).is_err());
        assert!(id.condition(&[]).is_err());
    }

    #[test]
    fn condition_weight_gradient_matches_finite_differences() {
        let w0 = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let x = [1.2, -0.7, 0.4];
        let probe = [0.9, 0.2];
        let f = |w: &[f64]| -> f64 {
            let clg = ConditionalLinearGaussian::new(
                vec![Matrix::new(2, 3, w.to_vec()).unwrap()],
                vec![0.1, 0.2],
                vec![0.0, -0.3],
            )
            .unwrap();
            clg.condition(&[&x]).unwrap().log_pdf(&probe).unwrap()
        };
        let tape = Tape::new();
        let wv = tape.vars(&w0);
        let clg = ConditionalLinearGaussian::new(
            vec![Matrix::new(2, 3, wv.clone()).unwrap()],
            crate::autodiff::lift(&[0.1, 0.2]),
            crate::autodiff::lift(&[0.0, -0.3]),
        )
        .unwrap();
        let xs = crate::autodiff::lift(&x);
        let ps = crate::autodiff::lift(&probe);
        let out = clg.condition(&[&xs]).unwrap().log_pdf(&ps).unwrap();
        let grad = tape.gradient(out, &wv).unwrap();
        for i in 0..w0.len() {
            let h = 1e-5;
            let mut wp = w0;
            wp[i] += h;
            let mut wm = w0;
            wm[i] -= h;
            let fd = (f(&wp) - f(&wm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "entry {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn bernoulli_log_pmf_values() {
        let b = BernoulliVector::new(vec![0.0f64; 5]);
        let v = b.log_pmf(&[1, 0, 1, 1, 0]).unwrap();
        assert!((v + 5.0 * 2f64.ln()).abs() < 1e-12);
        let b = BernoulliVector::new(vec![30.0f64]);
        let v = b.log_pmf(&[1]).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
        let b = BernoulliVector::new(vec![1000.0f64]);
        assert!(b.log_pmf(&[0]).unwrap().is_finite());
        assert!(b.log_pmf(&[2]).is_err());
        assert!(b.log_pmf(&[1, 1]).is_err());
    }

    #[test]
    fn bernoulli_gradient_matches_finite_differences() {
        let logits = [0.4, -2.1, 3.3];
        let x = [1u8, 0, 0];
        let tape = Tape::new();
        let lv = tape.vars(&logits);
        let out = BernoulliVector::new(lv.clone()).log_pmf(&x).unwrap();
        let grad = tape.gradient(out, &lv).unwrap();
        for i in 0..3 {
            let h = 1e-5;
            let mut p = logits;
            p[i] += h;
            let mut m = logits;
            m[i] -= h;
            let fp = BernoulliVector::new(p.to_vec()).log_pmf(&x).unwrap();
            let fm = BernoulliVector::new(m.to_vec()).log_pmf(&x).unwrap();
            assert!(((fp - fm) / (2.0 * h) - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mixture_indicator_support() {
        let w = MixtureIndicator::new(9, 4).unwrap();
        assert_eq!(w.support(), 6..=9);
        let total: f64 = (0..=9).map(|t| w.probability(t)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(MixtureIndicator::new(3, 5).is_err());
        assert!(MixtureIndicator::new(3, 0).is_err());
        assert_eq!(MixtureIndicator::new(3, 4).unwrap().support(), 0..=3);
    }
}
