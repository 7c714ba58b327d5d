//! Flat parameter vectors with named groups, and the parameterized model
//! families built from slices of them.
//!
//! All variational parameters of an experiment live in one `Vec<f64>`. Model
//! objects only hold [`Slot`]s into that vector and are evaluated against a slice
//! `theta: &[S]`, so the same model works for plain `f64` evaluation and for
//! recorded [`Var`](crate::autodiff::Var) evaluation.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Real;
use crate::distributions::{ConditionalLinearGaussian, DiagGaussian, Matrix};
use crate::error::{check_dim, Error, Result};

/// Contiguous range inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn get<'a, S>(&self, theta: &'a [S]) -> &'a [S] {
        &theta[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a, S>(&self, theta: &'a mut [S]) -> &'a mut [S] {
        &mut theta[self.offset..self.offset + self.len]
    }

    pub fn scalar<S: Copy>(&self, theta: &[S]) -> S {
        debug_assert_eq!(self.len, 1);
        theta[self.offset]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub slot: Slot,
    pub trainable: bool,
}

/// Named parameter groups over one flat vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a group initialized to `init`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, init: Vec<f64>, trainable: bool) -> Slot {
        let name = name.into();
        assert!(
            self.group(&name).is_none(),
            "duplicate parameter group {name}"
        );
        let slot = Slot {
            offset: self.values.len(),
            len: init.len(),
        };
        self.values.extend(init);
        self.groups.push(ParamGroup {
            name,
            slot,
            trainable,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.group(name).map(|g| g.slot.get(&self.values))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group {name}")))?;
        g.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for g in &mut self.groups {
            g.trainable = false;
        }
    }

    /// Per-entry trainable flags.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for g in &self.groups {
            for m in &mut mask[g.slot.range()] {
                *m = g.trainable;
            }
        }
        mask
    }

    /// One line per group: `name trainable|frozen v0 v1 ...`, values in
    /// shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let flag = if g.trainable { "trainable" } else { "frozen" };
            let _ = write!(out, "{} {}", g.name, flag);
            for v in g.slot.get(&self.values) {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut params = Params::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let name = fields.next().ok_or_else(|| err("missing name".into()))?;
            let trainable = match fields.next() {
                Some("trainable") => true,
                Some("frozen") => false,
                other => return Err(err(format!("expected trainable|frozen, got {other:?}"))),
            };
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if params.group(name).is_some() {
                return Err(err(format!("duplicate group {name}")));
            }
            params.add(name, values, trainable);
        }
        Ok(params)
    }
}

/// Draws `n` initial weights from `N(0, 0.01^2)`.
pub fn small_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Diagonal Gaussian with free mean and log-scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianModel {
    pub mean: Slot,
    pub log_std: Slot,
}

impl GaussianModel {
    pub fn add(
        params: &mut Params,
        name: &str,
        mean: Vec<f64>,
        log_std: Vec<f64>,
        trainable: bool,
    ) -> Self {
        assert_eq!(mean.len(), log_std.len());
        Self {
            mean: params.add(format!("{name}.mean"), mean, trainable),
            log_std: params.add(format!("{name}.log_std"), log_std, trainable),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len
    }

    pub fn build<S: Real>(&self, theta: &[S]) -> Result<DiagGaussian<S>> {
        DiagGaussian::new(self.mean.get(theta).to_vec(), self.log_std.get(theta).to_vec())
    }
}

/// Fixed centering used by a standardized [`LinearGaussianModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    /// Reference location of the output.
    pub center: Vec<f64>,
    /// Reference value of each conditioning input.
    pub feature_centers: Vec<Vec<f64>>,
}

/// Affine-mean Gaussian `N(sum_i W_i x_i + b, diag(exp(2 log_std)))`.
///
/// In the plain form the weight and bias groups are `W_i` and `b` directly. In
/// the standardized form they are measured in units of the model's own scale
/// around fixed anchors:
///
/// `mean = c + s * (beta + sum_i omega_i (x_i - xbar_i))`, `s = exp(log_std)`,
///
/// which is still affine in the inputs. Adam moves every parameter by roughly
/// its step size per iteration, so the standardized form keeps the mean's jitter
/// proportional to the scale even when the scale becomes tiny.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub weights: Vec<Slot>,
    pub input_dims: Vec<usize>,
    pub bias: Slot,
    pub log_std: Slot,
    pub anchors: Option<Anchors>,
}

impl LinearGaussianModel {
    /// Adds a plain model: weights `N(0, 0.01^2)`, bias 0, given initial log-scale.
    pub fn add(
        params: &mut Params,
        name: &str,
        out_dim: usize,
        input_dims: &[usize],
        log_std: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(log_std.len(), out_dim);
        let weights = input_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| params.add(format!("{name}.w{i}"), small_weights(out_dim * d, rng), true))
            .collect();
        Self {
            weights,
            input_dims: input_dims.to_vec(),
            bias: params.add(format!("{name}.bias"), vec![0.0; out_dim], true),
            log_std: params.add(format!("{name}.log_std"), log_std, true),
            anchors: None,
        }
    }

    /// Adds a standardized model centered at `anchors`.
    pub fn add_standardized(
        params: &mut Params,
        name: &str,
        anchors: Anchors,
        log_std: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let out_dim = anchors.center.len();
        let input_dims: Vec<usize> = anchors.feature_centers.iter().map(Vec::len).collect();
        let mut model = Self::add(params, name, out_dim, &input_dims, log_std, rng);
        model.anchors = Some(anchors);
        model
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len
    }

    pub fn set_trainable(&self, params: &mut Params, trainable: bool) {
        let names: Vec<String> = params
            .groups()
            .iter()
            .filter(|g| {
                g.slot == self.bias
                    || g.slot == self.log_std
                    || self.weights.contains(&g.slot)
            })
            .map(|g| g.name.clone())
            .collect();
        for n in names {
            params.set_trainable(&n, trainable).expect("group exists");
        }
    }

    pub fn build<S: Real>(&self, theta: &[S]) -> Result<ConditionalLinearGaussian<S>> {
        let out = self.out_dim();
        let log_std = self.log_std.get(theta).to_vec();
        let raw_bias = self.bias.get(theta);
        let mut mats = Vec::with_capacity(self.weights.len());
        match &self.anchors {
            None => {
                for (slot, &d) in self.weights.iter().zip(&self.input_dims) {
                    mats.push(Matrix::new(out, d, slot.get(theta).to_vec())?);
                }
                ConditionalLinearGaussian::new(mats, raw_bias.to_vec(), log_std)
            }
            Some(anchors) => {
                check_dim("anchor center", out, anchors.center.len())?;
                let scale: Vec<S> = log_std.iter().map(|&l| l.exp()).collect();
                let mut bias: Vec<S> = (0..out)
                    .map(|r| scale[r] * raw_bias[r] + anchors.center[r])
                    .collect();
                for ((slot, &d), xbar) in self
                    .weights
                    .iter()
                    .zip(&self.input_dims)
                    .zip(&anchors.feature_centers)
                {
                    let omega = slot.get(theta);
                    let mut w = Vec::with_capacity(out * d);
                    for r in 0..out {
                        for c in 0..d {
                            w.push(scale[r] * omega[r * d + c]);
                        }
                    }
                    for r in 0..out {
                        for c in 0..d {
                            bias[r] -= w[r * d + c] * xbar[c];
                        }
                    }
                    mats.push(Matrix::new(out, d, w)?);
                }
                ConditionalLinearGaussian::new(mats, bias, log_std)
            }
        }
    }
}
