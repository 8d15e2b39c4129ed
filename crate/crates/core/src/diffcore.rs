//! Dense 64-bit tensors and the small set of differentiable building blocks
//! the model needs: softmax, layer normalisation, dropout, Adam, and a
//! central-difference gradient checker.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Validation(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.values[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let brow = other.row(k);
            for (r, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.values[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            for c in 0..other.rows {
                out.values[r * other.rows + c] = dot(self.row(r), other.row(c));
            }
        }
        out
    }

    /// Adds a `1×cols` bias to every row.
    pub fn add_row_bias(&mut self, bias: &Tensor2) {
        assert_eq!(bias.values.len(), self.cols);
        for r in 0..self.rows {
            for (o, &b) in self.row_mut(r).iter_mut().zip(&bias.values) {
                *o += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Sum over rows, as a `1×cols` tensor.
    pub fn column_sums(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.values.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::Numeric(format!(
                "{context}: non-finite value at row {}, col {}",
                p / self.cols.max(1),
                p % self.cols.max(1)
            ))),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Glorot-uniform initialisation for a `fan_in × fan_out` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor2 {
        rows: fan_in,
        cols: fan_out,
        values,
    }
}

// ---------------------------------------------------------------------------

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Validation("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Per-row layer normalisation cache: normalised values and `1/σ`.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `(x − mean) / √(var + ε) · gain + bias`, with 1/n variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Validation(format!(
            "layer_norm length mismatch: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    Ok(layer_norm_forward(x, gain, bias, eps).0)
}

pub(crate) fn layer_norm_forward(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((xh, g), b)| xh * g + b)
        .collect();
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns the input gradient and accumulates into `dgain` / `dbias`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dout: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dout.len() as f64;
    let mut dxhat = vec![0.0; dout.len()];
    for c in 0..dout.len() {
        dgain[c] += dout[c] * cache.normalized[c];
        dbias[c] += dout[c];
        dxhat[c] = dout[c] * gain[c];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(&cache.normalized).map(|(a, b)| a * b).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, xh)| cache.inv_std * (d - mean_d - xh * mean_dx))
        .collect()
}

/// Inverted dropout. Returns the output and the per-entry multiplier
/// (0 or 1/(1−rate); all ones outside training).
pub fn dropout<R: Rng + ?Sized>(x: &Tensor2, rate: f64, rng: &mut R, training: bool) -> Result<(Tensor2, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), vec![1.0; x.values.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.values.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = x.clone();
    for (o, m) in out.values.iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, mask))
}

// ---------------------------------------------------------------------------

/// Named parameters with a parallel gradient map. Iteration is in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor2>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        let name = name.into();
        self.grads.remove(&name);
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Tensor2 {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor2> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.values.len()).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2> {
        self.grads.get(name)
    }

    /// Sets every gradient to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        self.grads = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor2::zeros(v.rows, v.cols)))
            .collect();
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds `g` into the named gradient, creating it if needed.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor2) {
        let p = self.get(name);
        assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in &mut g.values {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor2>,
    pub second_moment: BTreeMap<String, Tensor2>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor2> = params
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor2::zeros(v.rows, v.cols)))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update over all parameters in name order.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for name in params.params.keys() {
        if !params.grads.contains_key(name) {
            return Err(Error::Validation(format!("missing gradient for parameter {name}")));
        }
        if !state.first_moment.contains_key(name) {
            return Err(Error::Validation(format!("optimizer has no state for parameter {name}")));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as f64;
    let c1 = 1.0 - beta1.powf(t);
    let c2 = 1.0 - beta2.powf(t);
    for (name, p) in params.params.iter_mut() {
        let g = &params.grads[name];
        let m = state.first_moment.get_mut(name).expect("checked above");
        let v = state.second_moment.get_mut(name).expect("checked above");
        for idx in 0..p.values.len() {
            let gi = g.values[idx];
            m.values[idx] = beta1 * m.values[idx] + (1.0 - beta1) * gi;
            v.values[idx] = beta2 * v.values[idx] + (1.0 - beta2) * gi * gi;
            let m_hat = m.values[idx] / c1;
            let v_hat = v.values[idx] / c2;
            p.values[idx] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Compares the analytic gradients stored in `params` against central
/// differences of `loss_fn`. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &ParamStore, delta: f64) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {delta}")));
    }
    let mut probe = params.clone();
    probe.clear_grads();
    let mut worst = 0.0f64;
    for (name, p) in &params.params {
        let analytic = params
            .grads
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing gradient for parameter {name}")))?;
        for idx in 0..p.values.len() {
            let orig = p.values[idx];
            probe.params.get_mut(name).unwrap().values[idx] = orig + delta;
            let plus = loss_fn(&probe)?;
            probe.params.get_mut(name).unwrap().values[idx] = orig - delta;
            let minus = loss_fn(&probe)?;
            probe.params.get_mut(name).unwrap().values[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("loss is not finite while probing {name}[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * delta);
            let err = (analytic.values[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
