//! Dense affine-family layers with hand-derived backward passes.
//!
//! Three forward maps share one parameter type:
//!
//! - standard:    `z = Wx + b`
//! - affine-like: `z = (αWx + βb)/s`,  `s = √(α²‖x‖² + β²)`  (base α=β=1)
//! - norm-like:   `z = αW(x/s) + βb`, `s = √(α²‖x‖²/(1−β²))` (base `z = Wx̂ + b`)
//!
//! The corrected forms exist so that stepping (W, b) by their gradients moves
//! the layer output by exactly the ideal step `−ηg` (norm-like: `−2ηg`),
//! instead of the `(‖x‖²+1)`-inflated step of the standard form. The
//! measurement harness in [`crate::divergence`] checks this numerically.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{axpy, dot, Tensor};

/// Inputs whose L2 norm is at or below this raise [`Error::ZeroInputNorm`]
/// in the norm-like forms. The guard raises instead of clamping: a clamp
/// would silently break the exact update alignment this layer exists for.
pub const NORM_EPS: f64 = 1e-12;

/// Which forward map a [`DenseLayer`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseKind {
    /// `z = Wx + b`.
    Standard,
    /// `z = (αWx + βb)/√(α²‖x‖² + β²)`. Bounded denominator (≥ 1 in the
    /// base form), no singularity at `x = 0`, not scale invariant.
    AffineLike,
    /// `z = W(x/‖x‖) + b` (base form). Scale invariant and singular at
    /// `x = 0`; wants half the learning rate for unit-scale ideal steps.
    NormLike,
}

impl DenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DenseKind::Standard => "standard",
            DenseKind::AffineLike => "affine_like",
            DenseKind::NormLike => "norm_like",
        }
    }
}

/// Optional α/β reweighting of the corrected forms. The base corrected forms
/// are the default; the reweighted family keeps the same update-alignment
/// property for any admissible (α, β).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reweighting {
    Base,
    AlphaBeta { alpha: f64, beta: f64 },
}

/// Per-layer correction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionConfig {
    pub reweighting: Reweighting,
    /// Scales this layer's parameter step relative to the run's global
    /// learning rate. 0.5 gives the half-rate norm-like variant whose
    /// effective update lands on `g` instead of `2g`.
    pub lr_multiplier: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig { reweighting: Reweighting::Base, lr_multiplier: 1.0 }
    }
}

impl CorrectionConfig {
    /// Default config with the parameter step halved.
    pub fn half_rate() -> Self {
        CorrectionConfig { lr_multiplier: 0.5, ..Default::default() }
    }

    pub fn validate(&self, kind: DenseKind) -> Result<()> {
        if !(self.lr_multiplier > 0.0 && self.lr_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "lr_multiplier must be positive and finite, got {}",
                self.lr_multiplier
            )));
        }
        if let Reweighting::AlphaBeta { alpha, beta } = self.reweighting {
            if !alpha.is_finite() || !beta.is_finite() {
                return Err(Error::Config("non-finite alpha/beta".into()));
            }
            match kind {
                DenseKind::Standard => {
                    return Err(Error::Config(
                        "alpha/beta reweighting applies only to corrected layer kinds".into(),
                    ));
                }
                DenseKind::AffineLike => {
                    if beta == 0.0 {
                        return Err(Error::Config(
                            "affine-like reweighting needs beta != 0 to keep the denominator positive".into(),
                        ));
                    }
                }
                DenseKind::NormLike => {
                    if beta.abs() >= 1.0 {
                        return Err(Error::Config(format!(
                            "norm-like reweighting needs |beta| < 1, got {beta}"
                        )));
                    }
                    if alpha == 0.0 {
                        return Err(Error::Config(
                            "norm-like reweighting needs alpha != 0".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Weight matrix `[out, in]` and bias `[out]` shared by all dense kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<AffineParams> {
        if w.rank() != 2 || b.rank() != 1 || b.len() != w.shape()[0] {
            return Err(Error::shape("AffineParams::new", w.shape(), b.shape()));
        }
        Ok(AffineParams { w, b })
    }

    /// Fan-in uniform init: `W ~ U[−1/√in, 1/√in]`, `b = 0`.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> AffineParams {
        let bound = 1.0 / (in_dim as f64).sqrt();
        AffineParams {
            w: Tensor::random_uniform(&[out_dim, in_dim], -bound, bound, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Parameter gradients accumulated over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub dw: Tensor,
    pub db: Tensor,
}

impl AffineGrads {
    pub fn zeros_like(p: &AffineParams) -> AffineGrads {
        AffineGrads { dw: Tensor::zeros(p.w.shape()), db: Tensor::zeros(p.b.shape()) }
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input `[B, in]`, retained.
    pub x: Tensor,
    /// Per-sample scale `[B]`: 1 for standard, the denominator `s` for
    /// affine-like, `s` (base form: `‖x‖`) for norm-like.
    pub s: Tensor,
    /// Pre-activation output `[B, out]`.
    pub z: Tensor,
}

fn check_input(p: &AffineParams, x: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != p.in_dim() {
        return Err(Error::shape(op, x.shape(), p.w.shape()));
    }
    Ok(())
}

fn check_grad(cache: &ForwardCache, g: &Tensor, op: &'static str) -> Result<()> {
    if g.shape() != cache.z.shape() {
        return Err(Error::shape(op, g.shape(), cache.z.shape()));
    }
    Ok(())
}

/// `z_bi = W_ij x_bj + b_i`.
pub fn affine_forward(p: &AffineParams, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    check_input(p, x, "affine_forward")?;
    let (bsz, out) = (x.rows(), p.out_dim());
    let mut data = Vec::with_capacity(bsz * out);
    for b in 0..bsz {
        let xr = x.row(b);
        for i in 0..out {
            data.push(dot(p.w.row(i), xr) + p.b.data()[i]);
        }
    }
    let z = Tensor::new(&[bsz, out], data)?;
    let cache = ForwardCache { x: x.clone(), s: Tensor::full(&[bsz], 1.0), z: z.clone() };
    Ok((z, cache))
}

/// `dW = gᵀX`, `db = Σ_b g_b`, `dX = gW`.
pub fn affine_backward(
    p: &AffineParams,
    cache: &ForwardCache,
    g: &Tensor,
) -> Result<(AffineGrads, Tensor)> {
    check_grad(cache, g, "affine_backward")?;
    let (bsz, n) = (cache.x.rows(), p.in_dim());
    let mut grads = AffineGrads::zeros_like(p);
    let mut dx = Tensor::zeros(cache.x.shape());
    for b in 0..bsz {
        let gr = g.row(b);
        let xr = cache.x.row(b);
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for (i, &gi) in gr.iter().enumerate() {
            axpy(&mut grads.dw.data_mut()[i * n..(i + 1) * n], gi, xr);
            grads.db.data_mut()[i] += gi;
            axpy(dxr, gi, p.w.row(i));
        }
    }
    dx.ensure_finite("affine_backward")?;
    grads.dw.ensure_finite("affine_backward")?;
    Ok((grads, dx))
}

fn alpha_beta_affine_like(cfg: &CorrectionConfig) -> (f64, f64) {
    match cfg.reweighting {
        Reweighting::Base => (1.0, 1.0),
        Reweighting::AlphaBeta { alpha, beta } => (alpha, beta),
    }
}

/// `z = (αWx + βb)/s` per sample with `s = √(α²‖x‖² + β²)`.
pub fn affine_like_forward(
    p: &AffineParams,
    x: &Tensor,
    cfg: &CorrectionConfig,
) -> Result<(Tensor, ForwardCache)> {
    cfg.validate(DenseKind::AffineLike)?;
    check_input(p, x, "affine_like_forward")?;
    let (alpha, beta) = alpha_beta_affine_like(cfg);
    let (bsz, out) = (x.rows(), p.out_dim());
    let mut s = Tensor::zeros(&[bsz]);
    let mut data = Vec::with_capacity(bsz * out);
    for b in 0..bsz {
        let xr = x.row(b);
        let r2: f64 = xr.iter().map(|v| v * v).sum();
        let sb = (alpha * alpha * r2 + beta * beta).sqrt();
        s.data_mut()[b] = sb;
        for i in 0..out {
            data.push((alpha * dot(p.w.row(i), xr) + beta * p.b.data()[i]) / sb);
        }
    }
    let z = Tensor::new(&[bsz, out], data)?;
    let cache = ForwardCache { x: x.clone(), s, z: z.clone() };
    Ok((z, cache))
}

/// Per sample: `dW += (α/s) g xᵀ`, `db += (β/s) g`,
/// `dX_n = (α/s)(gW)_n − (g·z) α² x_n / s²`.
pub fn affine_like_backward(
    p: &AffineParams,
    cache: &ForwardCache,
    g: &Tensor,
    cfg: &CorrectionConfig,
) -> Result<(AffineGrads, Tensor)> {
    cfg.validate(DenseKind::AffineLike)?;
    check_grad(cache, g, "affine_like_backward")?;
    let (alpha, beta) = alpha_beta_affine_like(cfg);
    let (bsz, n) = (cache.x.rows(), p.in_dim());
    let mut grads = AffineGrads::zeros_like(p);
    let mut dx = Tensor::zeros(cache.x.shape());
    for b in 0..bsz {
        let gr = g.row(b);
        let xr = cache.x.row(b);
        let zr = cache.z.row(b);
        let sb = cache.s.data()[b];
        let gz = dot(gr, zr);
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for (i, &gi) in gr.iter().enumerate() {
            axpy(&mut grads.dw.data_mut()[i * n..(i + 1) * n], gi * alpha / sb, xr);
            grads.db.data_mut()[i] += gi * beta / sb;
            axpy(dxr, gi * alpha / sb, p.w.row(i));
        }
        axpy(dxr, -gz * alpha * alpha / (sb * sb), xr);
    }
    dx.ensure_finite("affine_like_backward")?;
    grads.dw.ensure_finite("affine_like_backward")?;
    Ok((grads, dx))
}

/// Per-sample scale and output multiplier for the norm-like family:
/// `z = κ·W x̂ + β b` with `κ = sign(α)√(1−β²)` (base form: κ = β = 1).
fn norm_like_factors(cfg: &CorrectionConfig, r: f64) -> (f64, f64, f64) {
    match cfg.reweighting {
        Reweighting::Base => (r, 1.0, 1.0),
        Reweighting::AlphaBeta { alpha, beta } => {
            let s = (alpha * alpha * r * r / (1.0 - beta * beta)).sqrt();
            let kappa = alpha * r / s;
            (s, kappa, beta)
        }
    }
}

/// `z = W(x/‖x‖) + b` (base); reweighted family `z = αW(x/s) + βb`.
pub fn norm_like_forward(
    p: &AffineParams,
    x: &Tensor,
    cfg: &CorrectionConfig,
) -> Result<(Tensor, ForwardCache)> {
    cfg.validate(DenseKind::NormLike)?;
    check_input(p, x, "norm_like_forward")?;
    let (bsz, out) = (x.rows(), p.out_dim());
    let mut s = Tensor::zeros(&[bsz]);
    let mut data = Vec::with_capacity(bsz * out);
    for b in 0..bsz {
        let xr = x.row(b);
        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r <= NORM_EPS {
            return Err(Error::ZeroInputNorm { norm: r, eps: NORM_EPS });
        }
        let (sb, kappa, beta) = norm_like_factors(cfg, r);
        s.data_mut()[b] = sb;
        for i in 0..out {
            data.push(kappa * dot(p.w.row(i), xr) / r + beta * p.b.data()[i]);
        }
    }
    let z = Tensor::new(&[bsz, out], data)?;
    let cache = ForwardCache { x: x.clone(), s, z: z.clone() };
    Ok((z, cache))
}

/// Per sample: `dW += κ g x̂ᵀ`, `db += β g`,
/// `dX_n = κ[(gW)_n/‖x‖ − (g·Wx̂) x_n/‖x‖²]`.
pub fn norm_like_backward(
    p: &AffineParams,
    cache: &ForwardCache,
    g: &Tensor,
    cfg: &CorrectionConfig,
) -> Result<(AffineGrads, Tensor)> {
    cfg.validate(DenseKind::NormLike)?;
    check_grad(cache, g, "norm_like_backward")?;
    let (bsz, n) = (cache.x.rows(), p.in_dim());
    let mut grads = AffineGrads::zeros_like(p);
    let mut dx = Tensor::zeros(cache.x.shape());
    for b in 0..bsz {
        let gr = g.row(b);
        let xr = cache.x.row(b);
        let zr = cache.z.row(b);
        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (_, kappa, beta) = norm_like_factors(cfg, r);
        // g·(Wx̂) recovered from the cached output: Wx̂ = (z − βb)/κ.
        let mut g_dot_wxh = 0.0;
        for (i, &gi) in gr.iter().enumerate() {
            g_dot_wxh += gi * (zr[i] - beta * p.b.data()[i]) / kappa;
        }
        let dxr = &mut dx.data_mut()[b * n..(b + 1) * n];
        for (i, &gi) in gr.iter().enumerate() {
            axpy(&mut grads.dw.data_mut()[i * n..(i + 1) * n], gi * kappa / r, xr);
            grads.db.data_mut()[i] += gi * beta;
            axpy(dxr, gi * kappa / r, p.w.row(i));
        }
        axpy(dxr, -kappa * g_dot_wxh / (r * r), xr);
    }
    dx.ensure_finite("norm_like_backward")?;
    grads.dw.ensure_finite("norm_like_backward")?;
    Ok((grads, dx))
}

/// A dense layer: kind + parameters + correction settings. Forward and
/// backward are pure; parameters change only through [`DenseLayer::apply_update`].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub kind: DenseKind,
    pub params: AffineParams,
    pub cfg: CorrectionConfig,
}

impl DenseLayer {
    pub fn new(
        kind: DenseKind,
        in_dim: usize,
        out_dim: usize,
        cfg: CorrectionConfig,
        rng: &mut Rng,
    ) -> Result<DenseLayer> {
        cfg.validate(kind)?;
        Ok(DenseLayer { kind, params: AffineParams::init(in_dim, out_dim, rng), cfg })
    }

    pub fn with_params(kind: DenseKind, params: AffineParams, cfg: CorrectionConfig) -> Result<DenseLayer> {
        cfg.validate(kind)?;
        Ok(DenseLayer { kind, params, cfg })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        match self.kind {
            DenseKind::Standard => affine_forward(&self.params, x),
            DenseKind::AffineLike => affine_like_forward(&self.params, x, &self.cfg),
            DenseKind::NormLike => norm_like_forward(&self.params, x, &self.cfg),
        }
    }

    pub fn backward(&self, cache: &ForwardCache, g: &Tensor) -> Result<(AffineGrads, Tensor)> {
        match self.kind {
            DenseKind::Standard => affine_backward(&self.params, cache, g),
            DenseKind::AffineLike => affine_like_backward(&self.params, cache, g, &self.cfg),
            DenseKind::NormLike => norm_like_backward(&self.params, cache, g, &self.cfg),
        }
    }

    /// Plain step `θ ← θ − η·∇θ`. Learning-rate policy (the per-layer
    /// multiplier) is the training loop's business, not this primitive's.
    pub fn apply_update(&mut self, grads: &AffineGrads, eta: f64) -> Result<()> {
        self.params.w = self.params.w.sub(&grads.dw.scale(eta)?)?;
        self.params.b = self.params.b.sub(&grads.db.scale(eta)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: &[Vec<f64>], b: &[f64]) -> AffineParams {
        AffineParams::new(Tensor::from_rows(w).unwrap(), Tensor::vector(b)).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_forward_hand_cases() {
        let p = params(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[1.0, 1.0]);
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (z, _) = affine_forward(&p, &x).unwrap();
        assert_eq!(z.data(), &[4.0, 8.0]);

        let id = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let (z, _) = affine_forward(&id, &x).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn affine_forward_matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let p = AffineParams::init(7, 4, &mut rng);
        let x = Tensor::random_normal(&[3, 7], &mut rng);
        let (z, _) = affine_forward(&p, &x).unwrap();
        for b in 0..3 {
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..7 {
                    acc += p.w.at2(i, j) * x.at2(b, j);
                }
                acc += p.b.data()[i];
                let rel = (z.at2(b, i) - acc).abs() / acc.abs().max(1e-300);
                assert!(rel < 1e-12);
            }
        }
    }

    #[test]
    fn affine_backward_hand_cases() {
        // 2 -> 1 layer, g = [1], x = [3, 4]: dW = [3, 4], db = [1], dX = w.
        let p = params(&[vec![0.5, -0.25]], &[0.0]);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (_, cache) = affine_forward(&p, &x).unwrap();
        let g = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let (grads, dx) = affine_backward(&p, &cache, &g).unwrap();
        assert_eq!(grads.dw.data(), &[3.0, 4.0]);
        assert_eq!(grads.db.data(), &[1.0]);
        assert_eq!(dx.data(), &[0.5, -0.25]);

        let zero = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let (grads, dx) = affine_backward(&p, &cache, &zero).unwrap();
        assert_eq!(grads.dw.data(), &[0.0, 0.0]);
        assert_eq!(dx.data(), &[0.0, 0.0]);
    }

    #[test]
    fn affine_like_forward_hand_cases() {
        let id = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let cfg = CorrectionConfig::default();
        let (z, cache) = affine_like_forward(&id, &x, &cfg).unwrap();
        let s = 26.0_f64.sqrt();
        assert!(close(z.data()[0], 3.0 / s, 1e-15));
        assert!(close(z.data()[1], 4.0 / s, 1e-15));
        assert!(close(cache.s.data()[0], s, 1e-15));

        // Zero input: denominator is exactly 1, output is the bias.
        let p = params(&[vec![2.0, -1.0]], &[0.7]);
        let x0 = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (z, _) = affine_like_forward(&p, &x0, &cfg).unwrap();
        assert_eq!(z.data(), &[0.7]);
    }

    #[test]
    fn affine_like_squared_norm_identity() {
        // ‖z‖² = (xᵀWᵀWx + 2bᵀWx + ‖b‖²)/(‖x‖²+1) for the base form.
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let p = AffineParams {
                w: Tensor::random_normal(&[4, 6], &mut rng),
                b: Tensor::random_normal(&[4], &mut rng),
            };
            let x = Tensor::random_normal(&[1, 6], &mut rng);
            let (z, _) = affine_like_forward(&p, &x, &CorrectionConfig::default()).unwrap();
            let wx: Vec<f64> = (0..4).map(|i| dot(p.w.row(i), x.row(0))).collect();
            let want = (dot(&wx, &wx) + 2.0 * dot(p.b.data(), &wx) + p.b.sqnorm())
                / (x.sqnorm() + 1.0);
            let got = z.sqnorm();
            assert!((got - want).abs() / want.abs().max(1e-300) < 1e-10);
        }
    }

    #[test]
    fn affine_like_backward_zero_input() {
        let p = params(&[vec![2.0, -1.0]], &[0.7]);
        let cfg = CorrectionConfig::default();
        let x0 = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (_, cache) = affine_like_forward(&p, &x0, &cfg).unwrap();
        let g = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let (grads, _) = affine_like_backward(&p, &cache, &g, &cfg).unwrap();
        assert_eq!(grads.dw.data(), &[0.0, 0.0]);
        assert_eq!(grads.db.data(), &[3.0]);
    }

    #[test]
    fn affine_like_weight_grad_is_bounded() {
        // Per sample ‖dW‖ = ‖g‖·‖x‖/√(‖x‖²+1) < ‖g‖.
        let mut rng = Rng::new(8);
        let cfg = CorrectionConfig::default();
        for _ in 0..20 {
            let p = AffineParams::init(5, 3, &mut rng);
            let x = Tensor::random_normal(&[1, 5], &mut rng).scale(10.0).unwrap();
            let g = Tensor::random_normal(&[1, 3], &mut rng);
            let (_, cache) = affine_like_forward(&p, &x, &cfg).unwrap();
            let (grads, _) = affine_like_backward(&p, &cache, &g, &cfg).unwrap();
            assert!(grads.dw.norm() < g.norm());
        }
    }

    #[test]
    fn norm_like_forward_hand_cases() {
        let id = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 0.0]);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let cfg = CorrectionConfig::default();
        let (z, _) = norm_like_forward(&id, &x, &cfg).unwrap();
        assert!(close(z.data()[0], 1.6, 1e-15));
        assert!(close(z.data()[1], 0.8, 1e-15));
    }

    #[test]
    fn norm_like_is_scale_invariant() {
        let mut rng = Rng::new(13);
        let p = AffineParams::init(6, 4, &mut rng);
        let cfg = CorrectionConfig::default();
        let x = Tensor::random_normal(&[2, 6], &mut rng);
        let g = Tensor::random_normal(&[2, 4], &mut rng);
        let (z0, c0) = norm_like_forward(&p, &x, &cfg).unwrap();
        let (g0, _) = norm_like_backward(&p, &c0, &g, &cfg).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let xc = x.scale(c).unwrap();
            let (zc, cc) = norm_like_forward(&p, &xc, &cfg).unwrap();
            let (gc, _) = norm_like_backward(&p, &cc, &g, &cfg).unwrap();
            assert!(z0.sub(&zc).unwrap().max_abs() < 1e-12 * z0.max_abs().max(1.0));
            assert!(g0.dw.sub(&gc.dw).unwrap().max_abs() < 1e-12 * g0.dw.max_abs().max(1.0));
            assert!(g0.db.sub(&gc.db).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn affine_like_is_not_scale_invariant_but_injective_radially() {
        let mut rng = Rng::new(14);
        let p = AffineParams::init(4, 4, &mut rng);
        let cfg = CorrectionConfig::default();
        let x = Tensor::random_normal(&[1, 4], &mut rng);
        let x2 = x.scale(2.0).unwrap();
        let (z, _) = affine_like_forward(&p, &x, &cfg).unwrap();
        let (z2, _) = affine_like_forward(&p, &x2, &cfg).unwrap();
        // Scaling the input changes the output: radial information survives.
        assert!(z.sub(&z2).unwrap().max_abs() > 1e-6);
        // The norm-like map collapses the same pair.
        let (n1, _) = norm_like_forward(&p, &x, &cfg).unwrap();
        let (n2, _) = norm_like_forward(&p, &x2, &cfg).unwrap();
        assert!(n1.sub(&n2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn norm_like_rejects_vanishing_input() {
        let p = params(&[vec![1.0, 0.0]], &[0.0]);
        let x = Tensor::from_rows(&[vec![1e-15, 0.0]]).unwrap();
        let err = norm_like_forward(&p, &x, &CorrectionConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ZeroInputNorm { .. }));
    }

    #[test]
    fn reweighting_validation() {
        let bad_beta = CorrectionConfig {
            reweighting: Reweighting::AlphaBeta { alpha: 1.0, beta: 1.0 },
            lr_multiplier: 1.0,
        };
        assert!(bad_beta.validate(DenseKind::NormLike).is_err());
        assert!(bad_beta.validate(DenseKind::AffineLike).is_ok());
        let zero_beta = CorrectionConfig {
            reweighting: Reweighting::AlphaBeta { alpha: 1.0, beta: 0.0 },
            lr_multiplier: 1.0,
        };
        assert!(zero_beta.validate(DenseKind::AffineLike).is_err());
        assert!(CorrectionConfig::default().validate(DenseKind::Standard).is_ok());
    }

    #[test]
    fn apply_update_is_a_plain_step() {
        let mut layer = DenseLayer::with_params(
            DenseKind::Standard,
            params(&[vec![1.0]], &[0.5]),
            CorrectionConfig::default(),
        )
        .unwrap();
        let grads = AffineGrads {
            dw: Tensor::from_rows(&[vec![2.0]]).unwrap(),
            db: Tensor::vector(&[1.0]),
        };
        layer.apply_update(&grads, 0.1).unwrap();
        assert!(close(layer.params.w.data()[0], 0.8, 1e-15));
        assert!(close(layer.params.b.data()[0], 0.4, 1e-15));
    }
}
