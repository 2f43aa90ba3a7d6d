//! Optimizers and learning-rate policies.
//!
//! Plain SGD is the reference optimizer — the update-alignment theory is
//! derived for vanilla gradient descent — with Adam provided for comparison
//! runs. Per-layer learning-rate multipliers carry the half-rate norm-like
//! policy; the gradient-only policies rescale the learning rate from the
//! input norm instead of changing the forward map.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::layers::dense::{AffineGrads, AffineParams};
use crate::tensor::Tensor;

const SNAPSHOT_MAGIC: &[u8; 8] = b"RULSNAP\0";
const SNAPSHOT_VERSION: u32 = 1;

/// SGD settings: one global rate plus optional per-layer multipliers.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub eta: f64,
    pub per_layer_multiplier: HashMap<usize, f64>,
}

impl SgdConfig {
    pub fn new(eta: f64) -> Result<SgdConfig> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {eta}")));
        }
        Ok(SgdConfig { eta, per_layer_multiplier: HashMap::new() })
    }

    pub fn multiplier(&self, layer: usize) -> f64 {
        self.per_layer_multiplier.get(&layer).copied().unwrap_or(1.0)
    }
}

/// `θ ← θ − η·m_layer·∇θ`.
pub fn sgd_step(
    params: &mut AffineParams,
    grads: &AffineGrads,
    cfg: &SgdConfig,
    layer: usize,
) -> Result<()> {
    let step = cfg.eta * cfg.multiplier(layer);
    params.w = params.w.sub(&grads.dw.scale(step)?)?;
    params.b = params.b.sub(&grads.db.scale(step)?)?;
    Ok(())
}

/// Adam settings; defaults are the conventional (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { eta: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.eta > 0.0 && self.eps > 0.0 && betas_ok) {
            return Err(Error::Config(format!("invalid adam config {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment estimates for one layer's (W, b) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m_w: Tensor,
    v_w: Tensor,
    m_b: Tensor,
    v_b: Tensor,
}

impl AdamState {
    pub fn new(params: &AffineParams) -> AdamState {
        AdamState {
            t: 0,
            m_w: Tensor::zeros(params.w.shape()),
            v_w: Tensor::zeros(params.w.shape()),
            m_b: Tensor::zeros(params.b.shape()),
            v_b: Tensor::zeros(params.b.shape()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Versioned binary dump of the full state.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        for tensor in [&self.m_w, &self.v_w, &self.m_b, &self.v_b] {
            tensor.write_binary(w)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<AdamState> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Config("not an optimizer snapshot".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!("unsupported snapshot version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let t = u64::from_le_bytes(u64buf);
        let m_w = Tensor::read_binary(r)?;
        let v_w = Tensor::read_binary(r)?;
        let m_b = Tensor::read_binary(r)?;
        let v_b = Tensor::read_binary(r)?;
        Ok(AdamState { t, m_w, v_w, m_b, v_b })
    }
}

/// Per-step scalars shared by the W and b updates: the (possibly
/// lr-multiplied) step size and the two bias-correction denominators.
struct AdamStepScalars {
    step: f64,
    bc1: f64,
    bc2: f64,
}

fn adam_update(
    theta: &mut Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    grad: &Tensor,
    cfg: &AdamConfig,
    sc: &AdamStepScalars,
) -> Result<()> {
    if grad.shape() != theta.shape() {
        return Err(Error::shape("adam_step", grad.shape(), theta.shape()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for i in 0..theta.len() {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (1.0 - b1) * g;
        let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / sc.bc1;
        let v_hat = vi / sc.bc2;
        theta.data_mut()[i] -= sc.step * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    theta.ensure_finite("adam_step")
}

/// Bias-corrected Adam step on one layer's (W, b) pair;
/// `lr_multiplier` scales the rate exactly as in [`sgd_step`].
pub fn adam_step(
    state: &mut AdamState,
    params: &mut AffineParams,
    grads: &AffineGrads,
    cfg: &AdamConfig,
    lr_multiplier: f64,
) -> Result<()> {
    cfg.validate()?;
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let sc = AdamStepScalars { step: cfg.eta * lr_multiplier, bc1, bc2 };
    adam_update(&mut params.w, &mut state.m_w, &mut state.v_w, &grads.dw, cfg, &sc)?;
    adam_update(&mut params.b, &mut state.m_b, &mut state.v_b, &grads.db, cfg, &sc)?;
    Ok(())
}

/// The two gradient-only learning-rate corrections. Both reproduce the
/// corrected layers' update alignment on a plain affine layer without
/// touching its forward map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientOnlyPolicy {
    /// One multiplier `1/(‖x‖²+1)` for the whole layer. Only defined for
    /// single-sample steps: a batch mixes per-sample factors inseparably.
    Global,
    /// Weights get `1/(2‖x‖²)`, bias gets `1/2`; each parameter group then
    /// contributes half of the ideal step. Singular at `x = 0`.
    Local,
}

/// Per-parameter-group learning-rate multipliers produced by a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyMultipliers {
    pub weight: f64,
    pub bias: f64,
}

/// Compute the multipliers for one input sample (`[n]` or `[1, n]`).
pub fn gradient_only_policy(kind: GradientOnlyPolicy, x: &Tensor) -> Result<PolicyMultipliers> {
    let sample: &[f64] = match x.rank() {
        1 => x.data(),
        2 if x.rows() == 1 => x.row(0),
        2 => {
            return Err(Error::Config(format!(
                "gradient-only policies are per-sample; got a batch of {} \
                 (the global form would need the full batch Jacobian, the local \
                 form a different multiplier per sample)",
                x.rows()
            )));
        }
        _ => return Err(Error::domain("gradient_only_policy", format!("bad input shape {:?}", x.shape()))),
    };
    let r2: f64 = sample.iter().map(|v| v * v).sum();
    match kind {
        GradientOnlyPolicy::Global => {
            let m = 1.0 / (r2 + 1.0);
            Ok(PolicyMultipliers { weight: m, bias: m })
        }
        GradientOnlyPolicy::Local => {
            if r2 <= 0.0 {
                return Err(Error::domain(
                    "gradient_only_policy",
                    "local weight multiplier 1/(2‖x‖²) is singular at x = 0",
                ));
            }
            Ok(PolicyMultipliers { weight: 1.0 / (2.0 * r2), bias: 0.5 })
        }
    }
}
