//! Small differentiable classifier with hand-written gradients.
//!
//! The network is either multinomial logistic regression (`hidden == 0`) or a
//! single tanh hidden layer followed by a softmax output. Parameters live in a
//! flat [`ParamVector`] laid out as `W1 (h×d) | b1 (h) | W2 (k×h) | b2 (k)`,
//! or `W (k×d) | b (k)` without a hidden layer. Matrices are row-major.

mod optim;
pub(crate) mod train;

pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{local_train_epoch, EpochOutcome, PhaseTimings, Proximal};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Layout {
    pub fn new(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            inputs,
            hidden,
            classes,
        }
    }

    pub fn logistic(inputs: usize, classes: usize) -> Self {
        Self::new(inputs, 0, classes)
    }

    pub fn param_count(&self) -> usize {
        let (d, h, k) = (self.inputs, self.hidden, self.classes);
        if h == 0 {
            d * k + k
        } else {
            d * h + h + h * k + k
        }
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.classes == 0 {
            return Err(Error::config("layout needs at least one input and one class"));
        }
        Ok(())
    }
}

/// Flat model parameters (or a parameter-shaped update) tagged with the
/// layout they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.param_count()],
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "layout expects {} parameters, got {}",
                layout.param_count(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Uniform(-0.05, 0.05) initialization from a seed.
    pub fn init(layout: Layout, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init, 0, 0);
        let values = (0..layout.param_count())
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout || self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vectors differ in shape ({} vs {})",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    /// `self - other`, coordinate-wise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            layout: self.layout,
            values,
        })
    }

    /// `self + other`, coordinate-wise.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector {
            layout: self.layout,
            values,
        })
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector {
            layout: self.layout,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Splits into `(w1, b1, w2, b2)`; for logistic regression `w1`/`b1` are
    /// empty and the output layer reads directly from the inputs.
    fn blocks(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let Layout {
            inputs: d,
            hidden: h,
            classes: k,
        } = self.layout;
        let v = &self.values;
        if h == 0 {
            let (w, b) = v.split_at(d * k);
            (&[], &[], w, b)
        } else {
            let (w1, rest) = v.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * k);
            (w1, b1, w2, b2)
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows == 0 || features.rows != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} feature rows and {} labels",
                features.rows,
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, layout: &Layout) -> Result<()> {
        layout.validate()?;
        if self.features.cols != layout.inputs {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, batch has {}",
                layout.inputs, self.features.cols
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::DimensionMismatch("empty batch".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= layout.classes) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} out of range for {} classes",
                layout.classes
            )));
        }
        Ok(())
    }
}

/// Intermediate values kept between the forward and backward passes.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// tanh activations, n×h (empty without a hidden layer).
    hidden: Matrix,
    /// Softmax outputs, n×k.
    probs: Matrix,
}

pub(crate) fn forward_cached(params: &ParamVector, batch: &Batch) -> Result<ForwardCache> {
    batch.check(&params.layout)?;
    if params.values.len() != params.layout.param_count() {
        return Err(Error::DimensionMismatch(
            "parameter vector length does not match its layout".into(),
        ));
    }
    let Layout {
        inputs: d,
        hidden: h,
        classes: k,
    } = params.layout;
    let n = batch.len();
    let (w1, b1, w2, b2) = params.blocks();

    let mut hidden = Matrix::zeros(if h == 0 { 0 } else { n }, h);
    let mut probs = Matrix::zeros(n, k);
    for i in 0..n {
        let x = batch.features.row(i);
        let input: &[f64] = if h == 0 {
            x
        } else {
            let a = hidden.row_mut(i);
            for (u, a_u) in a.iter_mut().enumerate() {
                let w = &w1[u * d..(u + 1) * d];
                *a_u = (dot(w, x) + b1[u]).tanh();
            }
            hidden.row(i)
        };
        let width = input.len();
        let p = probs.row_mut(i);
        for (c, p_c) in p.iter_mut().enumerate() {
            *p_c = dot(&w2[c * width..(c + 1) * width], input) + b2[c];
        }
        softmax_in_place(p);
    }
    Ok(ForwardCache { hidden, probs })
}

/// Class probabilities, one row per sample.
pub fn forward(params: &ParamVector, batch: &Batch) -> Result<Matrix> {
    Ok(forward_cached(params, batch)?.probs)
}

/// Mean cross-entropy of cached probabilities.
pub(crate) fn cross_entropy(cache: &ForwardCache, labels: &[usize]) -> f64 {
    let n = labels.len();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -cache.probs.row(i)[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / n as f64
}

pub(crate) fn backward(params: &ParamVector, batch: &Batch, cache: &ForwardCache) -> ParamVector {
    let Layout {
        inputs: d,
        hidden: h,
        classes: k,
    } = params.layout;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let (_, _, w2, _) = params.blocks();
    let mut grad = ParamVector::zeros(params.layout);
    let mut dlogits = vec![0.0; k];
    let mut dz = vec![0.0; h];

    for i in 0..n {
        let x = batch.features.row(i);
        let p = cache.probs.row(i);
        for c in 0..k {
            dlogits[c] = p[c] * inv_n;
        }
        dlogits[batch.labels[i]] -= inv_n;

        if h == 0 {
            let (gw, gb) = grad.values.split_at_mut(d * k);
            for c in 0..k {
                axpy(dlogits[c], x, &mut gw[c * d..(c + 1) * d]);
                gb[c] += dlogits[c];
            }
            continue;
        }

        let a = cache.hidden.row(i);
        let (gw1, rest) = grad.values.split_at_mut(d * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h * k);
        dz.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            axpy(dlogits[c], a, &mut gw2[c * h..(c + 1) * h]);
            gb2[c] += dlogits[c];
            axpy(dlogits[c], &w2[c * h..(c + 1) * h], &mut dz);
        }
        for u in 0..h {
            let g = dz[u] * (1.0 - a[u] * a[u]);
            axpy(g, x, &mut gw1[u * d..(u + 1) * d]);
            gb1[u] += g;
        }
    }
    grad
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    let cache = forward_cached(params, batch)?;
    let loss = cross_entropy(&cache, &batch.labels);
    Ok((loss, backward(params, batch, &cache)))
}

/// Mean cross-entropy and accuracy over a batch.
pub fn evaluate(params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
    let cache = forward_cached(params, batch)?;
    let loss = cross_entropy(&cache, &batch.labels);
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(cache.probs.row(*i)) == y)
        .count();
    Ok((loss, correct as f64 / batch.len() as f64))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}
