use rand::Rng;

use super::ensure_finite;
use crate::error::{Result, WishError};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(WishError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, bc) in row.iter_mut().zip(b) {
                *m += ar * bc;
            }
        }
    }
}

/// Weights of a residual two-layer adapter `y = x + w2·relu(w1·x + b1) + b2`.
///
/// The same type doubles as the gradient accumulator for itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(d_v: usize, d_h: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_h, d_v),
            b1: vec![0.0; d_h],
            w2: Matrix::zeros(d_v, d_h),
            b2: vec![0.0; d_v],
        }
    }

    /// Weights uniform in `(-scale, scale)`, biases zero.
    pub fn init_uniform<R: Rng>(d_v: usize, d_h: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_v, d_h);
        for w in p.w1.data.iter_mut().chain(p.w2.data.iter_mut()) {
            *w = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn validate(&self) -> Result<()> {
        let (d_v, d_h) = (self.input_dim(), self.hidden_dim());
        if self.w1.data.len() != d_h * d_v
            || self.b1.len() != d_h
            || self.w2.rows != d_v
            || self.w2.cols != d_h
            || self.w2.data.len() != d_v * d_h
            || self.b2.len() != d_v
        {
            return Err(WishError::Shape("inconsistent adapter tensor shapes".into()));
        }
        for t in self.tensors() {
            ensure_finite(t, "adapter parameters")?;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.w1.rows == other.w1.rows && self.w1.cols == other.w1.cols
    }

    /// Tensors in the fixed order w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| *x == 0.0))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(WishError::Shape(format!(
                "adapter expects dim {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        ensure_finite(x, "adapter input")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &[f64]) -> Result<AdapterTrace> {
        self.check_input(x)?;
        let mut pre = self.w1.matvec(x);
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let mlp = self.w2.matvec(&hidden);
        let output = x
            .iter()
            .zip(&mlp)
            .zip(&self.b2)
            .map(|((xi, mi), bi)| xi + mi + bi)
            .collect();
        Ok(AdapterTrace {
            input: x.to_vec(),
            pre_activation: pre,
            hidden,
            output,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns `∂loss/∂x`.
    pub fn backward_into(
        &self,
        trace: &AdapterTrace,
        upstream: &[f64],
        grads: &mut AdapterParams,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.input_dim() || trace.input.len() != self.input_dim() {
            return Err(WishError::Shape("adapter backward dims".into()));
        }
        if !grads.same_shape(self) {
            return Err(WishError::Shape("gradient buffer shape".into()));
        }
        for (g, u) in grads.b2.iter_mut().zip(upstream) {
            *g += u;
        }
        grads.w2.add_outer(upstream, &trace.hidden);
        let d_hidden = self.w2.matvec_t(upstream);
        // relu'(0) = 0
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.pre_activation)
            .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
            .collect();
        for (g, d) in grads.b1.iter_mut().zip(&d_pre) {
            *g += d;
        }
        grads.w1.add_outer(&d_pre, &trace.input);
        let mut dx = self.w1.matvec_t(&d_pre);
        for (d, u) in dx.iter_mut().zip(upstream) {
            *d += u;
        }
        Ok(dx)
    }
}

pub fn adapter_forward(params: &AdapterParams, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

/// Parameter gradients and input gradient for `∂loss/∂y = upstream`.
pub fn adapter_backward(
    params: &AdapterParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<(AdapterParams, Vec<f64>)> {
    let trace = params.trace(x)?;
    let mut grads = params.zeros_like();
    let dx = params.backward_into(&trace, upstream, &mut grads)?;
    Ok((grads, dx))
}
