//! Parameterless baseline normalisers: BatchNorm, LayerNorm, RMSNorm and
//! plain L2 normalisation, each with a hand-derived backward pass.
//!
//! "Parameterless" means the learned scale/offset pair is deliberately
//! absent; these are the pure reweighting parts, used as ablation baselines
//! against the corrected affine layers.
//!
//! BatchNorm and LayerNorm use population (1/N) variance and ε = 1e-5 inside
//! the square root. RMSNorm and L2 use no ε at all — they are exact, and a
//! vanishing input raises instead of being clamped.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

use super::dense::NORM_EPS;

/// Stabiliser added to the variance inside the square root for the
/// mean-subtracting normalisers.
pub const VAR_EPS: f64 = 1e-5;

fn check_matrix(x: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::domain(op, format!("expected rank-2 input, got {:?}", x.shape())));
    }
    Ok(())
}

// --- LayerNorm ---------------------------------------------------------

/// Per-sample standardisation state for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Output `[B, n]`.
    pub y: Tensor,
    /// Per-sample `√(var + ε)` `[B]`.
    pub s: Tensor,
}

/// Per sample: `y = (x − mean(x)) / √(var(x) + ε)`.
pub fn layernorm_forward(x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    check_matrix(x, "layernorm_forward")?;
    let (bsz, n) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Config("layernorm needs feature dimension >= 2".into()));
    }
    let mut y = Tensor::zeros(&[bsz, n]);
    let mut s = Tensor::zeros(&[bsz]);
    for b in 0..bsz {
        let xr = x.row(b);
        let mu = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let sb = (var + VAR_EPS).sqrt();
        s.data_mut()[b] = sb;
        let yr = &mut y.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            yr[j] = (xr[j] - mu) / sb;
        }
    }
    y.ensure_finite("layernorm_forward")?;
    Ok((y.clone(), LayerNormCache { y, s }))
}

/// `dX = (g − mean(g) − y·mean(g⊙y)) / s` per sample. Exact for the
/// ε-stabilised forward, not an approximation.
pub fn layernorm_backward(cache: &LayerNormCache, g: &Tensor) -> Result<Tensor> {
    if g.shape() != cache.y.shape() {
        return Err(Error::shape("layernorm_backward", g.shape(), cache.y.shape()));
    }
    let (bsz, n) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let gr = g.row(b);
        let yr = cache.y.row(b);
        let sb = cache.s.data()[b];
        let g_mean = gr.iter().sum::<f64>() / n as f64;
        let gy_mean = dot(gr, yr) / n as f64;
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            dxr[j] = (gr[j] - g_mean - yr[j] * gy_mean) / sb;
        }
    }
    dx.ensure_finite("layernorm_backward")?;
    Ok(dx)
}

// --- BatchNorm ---------------------------------------------------------

/// Batch-statistics state for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    /// Output `[B, n]`.
    pub y: Tensor,
    /// Per-feature `√(var + ε)` `[n]`.
    pub s: Tensor,
}

/// Parameterless BatchNorm with running statistics for evaluation.
///
/// Training batches standardise each feature over the batch; an exponential
/// moving average (momentum 0.1, zero-mean/unit-variance start) of the batch
/// statistics is kept for evaluation, where batches of any size — including
/// single samples — must be accepted.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> BatchNorm {
        BatchNorm {
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
            momentum: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Per feature: `y = (x − mean_batch) / √(var_batch + ε)`; updates the
    /// running statistics. Requires B ≥ 2 — a single sample has no batch
    /// statistics to speak of.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        check_matrix(x, "batchnorm_forward")?;
        let (bsz, n) = (x.rows(), x.cols());
        if n != self.dim() {
            return Err(Error::shape("batchnorm_forward", x.shape(), self.running_mean.shape()));
        }
        if bsz < 2 {
            return Err(Error::Config("batchnorm needs batch size >= 2 in training".into()));
        }
        let mut y = Tensor::zeros(&[bsz, n]);
        let mut s = Tensor::zeros(&[n]);
        for j in 0..n {
            let mut mu = 0.0;
            for b in 0..bsz {
                mu += x.at2(b, j);
            }
            mu /= bsz as f64;
            let mut var = 0.0;
            for b in 0..bsz {
                let d = x.at2(b, j) - mu;
                var += d * d;
            }
            var /= bsz as f64;
            let sj = (var + VAR_EPS).sqrt();
            s.data_mut()[j] = sj;
            for b in 0..bsz {
                y.data_mut()[b * n + j] = (x.at2(b, j) - mu) / sj;
            }
            let m = self.momentum;
            self.running_mean.data_mut()[j] = (1.0 - m) * self.running_mean.data()[j] + m * mu;
            self.running_var.data_mut()[j] = (1.0 - m) * self.running_var.data()[j] + m * var;
        }
        y.ensure_finite("batchnorm_forward")?;
        Ok((y.clone(), BatchNormCache { y, s }))
    }

    /// Standardise with the running statistics; no state change.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        check_matrix(x, "batchnorm_eval")?;
        let (bsz, n) = (x.rows(), x.cols());
        if n != self.dim() {
            return Err(Error::shape("batchnorm_eval", x.shape(), self.running_mean.shape()));
        }
        let mut y = Tensor::zeros(&[bsz, n]);
        for j in 0..n {
            let mu = self.running_mean.data()[j];
            let sj = (self.running_var.data()[j] + VAR_EPS).sqrt();
            for b in 0..bsz {
                y.data_mut()[b * n + j] = (x.at2(b, j) - mu) / sj;
            }
        }
        y.ensure_finite("batchnorm_eval")?;
        Ok(y)
    }

    /// Per feature: `dX = (g − mean_b(g) − y·mean_b(g⊙y)) / s`.
    pub fn backward(&self, cache: &BatchNormCache, g: &Tensor) -> Result<Tensor> {
        if g.shape() != cache.y.shape() {
            return Err(Error::shape("batchnorm_backward", g.shape(), cache.y.shape()));
        }
        let (bsz, n) = (g.rows(), g.cols());
        let mut dx = Tensor::zeros(&[bsz, n]);
        for j in 0..n {
            let sj = cache.s.data()[j];
            let mut g_mean = 0.0;
            let mut gy_mean = 0.0;
            for b in 0..bsz {
                g_mean += g.at2(b, j);
                gy_mean += g.at2(b, j) * cache.y.at2(b, j);
            }
            g_mean /= bsz as f64;
            gy_mean /= bsz as f64;
            for b in 0..bsz {
                dx.data_mut()[b * n + j] =
                    (g.at2(b, j) - g_mean - cache.y.at2(b, j) * gy_mean) / sj;
            }
        }
        dx.ensure_finite("batchnorm_backward")?;
        Ok(dx)
    }
}

// --- RMSNorm and plain L2 ----------------------------------------------

/// Radial-scaling state for the backward pass.
#[derive(Debug, Clone)]
pub struct RadialCache {
    /// Input `[B, n]`, retained.
    pub x: Tensor,
    /// Per-sample input norm `[B]`.
    pub r: Tensor,
}

fn radial_forward(x: &Tensor, scale_of_n: f64, op: &'static str) -> Result<(Tensor, RadialCache)> {
    check_matrix(x, op)?;
    let (bsz, n) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[bsz, n]);
    let mut r = Tensor::zeros(&[bsz]);
    for b in 0..bsz {
        let xr = x.row(b);
        let rb = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rb <= NORM_EPS {
            return Err(Error::ZeroInputNorm { norm: rb, eps: NORM_EPS });
        }
        r.data_mut()[b] = rb;
        let yr = &mut y.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            yr[j] = scale_of_n * xr[j] / rb;
        }
    }
    y.ensure_finite(op)?;
    Ok((y, RadialCache { x: x.clone(), r }))
}

fn radial_backward(cache: &RadialCache, g: &Tensor, scale_of_n: f64, op: &'static str) -> Result<Tensor> {
    if g.shape() != cache.x.shape() {
        return Err(Error::shape(op, g.shape(), cache.x.shape()));
    }
    let (bsz, n) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let gr = g.row(b);
        let xr = cache.x.row(b);
        let rb = cache.r.data()[b];
        let gx = dot(gr, xr);
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for j in 0..n {
            dxr[j] = scale_of_n * (gr[j] / rb - gx * xr[j] / (rb * rb * rb));
        }
    }
    dx.ensure_finite(op)?;
    Ok(dx)
}

/// Per sample: `y = √n · x/‖x‖` — every output lands on the radius-√n
/// sphere. Exact (no ε); raises on vanishing input.
pub fn rmsnorm_forward(x: &Tensor) -> Result<(Tensor, RadialCache)> {
    let n = if x.rank() == 2 { x.cols() } else { 0 };
    radial_forward(x, (n as f64).sqrt(), "rmsnorm_forward")
}

pub fn rmsnorm_backward(cache: &RadialCache, g: &Tensor) -> Result<Tensor> {
    let n = cache.x.cols();
    radial_backward(cache, g, (n as f64).sqrt(), "rmsnorm_backward")
}

/// Per sample: `y = x/‖x‖`.
pub fn l2_forward(x: &Tensor) -> Result<(Tensor, RadialCache)> {
    radial_forward(x, 1.0, "l2_forward")
}

pub fn l2_backward(cache: &RadialCache, g: &Tensor) -> Result<Tensor> {
    radial_backward(cache, g, 1.0, "l2_backward")
}
