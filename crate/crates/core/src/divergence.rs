//! Measurement harness for ideal-versus-effective representation updates.
//!
//! The central procedure: take a layer, compute its parameter gradients from
//! an upstream gradient `g`, apply one plain step `θ ← θ − η·∇θ`, re-run the
//! forward pass on the *same* input, and read off the effective update
//! `(z − z′)/η`. For the affine family this quantity has a closed form — a
//! Gram-like mixing matrix applied to `g` — and this module checks the
//! implementation against those closed forms, against independently
//! transcribed backward formulas, and against finite differences.
//!
//! Propagation terminates at the measured layer's pre-activation output, and
//! the input is held fixed across the step; that is the single-layer,
//! same-batch setting in which the closed forms are exact.

use crate::error::{Error, Result};
use crate::layers::dense::{
    AffineParams, CorrectionConfig, DenseKind, DenseLayer, Reweighting,
};
use crate::optim::{gradient_only_policy, GradientOnlyPolicy};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};

/// Step size for effective-update measurements. With 64-bit floats the
/// affine-family propagation is linear in η, so the choice only balances
/// round-off in the difference quotient.
pub const DEFAULT_ETA: f64 = 1e-6;

/// Entries of `ideal` smaller than this are masked (ratio set to 0) rather
/// than divided by.
const RATIO_GUARD: f64 = 1e-12;

/// One effective-update measurement against its closed-form prediction.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    /// The ideal update direction: `g` itself.
    pub ideal: Tensor,
    /// `(z − z′)/η` measured by stepping the parameters.
    pub effective: Tensor,
    /// `effective ⊘ ideal`, masked to 0 where `|ideal|` vanishes.
    pub ratio: Tensor,
    /// Closed-form prediction of the effective update.
    pub predicted: Tensor,
    /// `‖effective − predicted‖∞ / ‖predicted‖∞` (absolute when the
    /// prediction is exactly zero).
    pub residual: f64,
    pub eta_used: f64,
}

fn guarded_ratio(effective: &Tensor, ideal: &Tensor) -> Tensor {
    let mut ratio = Tensor::zeros(ideal.shape());
    for i in 0..ideal.len() {
        let d = ideal.data()[i];
        if d.abs() >= RATIO_GUARD {
            ratio.data_mut()[i] = effective.data()[i] / d;
        }
    }
    ratio
}

fn relative_residual(effective: &Tensor, predicted: &Tensor) -> Result<f64> {
    let diff = effective.sub(predicted)?.max_abs();
    let denom = predicted.max_abs();
    Ok(if denom > 0.0 { diff / denom } else { diff })
}

/// Closed-form effective update for one dense kind: `(M g)_b = Σ_k M_bk g_k`
/// with the kind's mixing matrix, including the α/β reweighted families.
pub fn predicted_effective(
    kind: DenseKind,
    cfg: &CorrectionConfig,
    x: &Tensor,
    g: &Tensor,
) -> Result<Tensor> {
    let bsz = x.rows();
    let m = closed_form_mixing(kind, cfg, x)?;
    let mut out = Tensor::zeros(g.shape());
    let out_dim = g.cols();
    for b in 0..bsz {
        for k in 0..bsz {
            let w = m.at2(b, k);
            let gr = g.row(k);
            let or = &mut out.data_mut()[b * out_dim..(b + 1) * out_dim];
            for i in 0..out_dim {
                or[i] += w * gr[i];
            }
        }
    }
    Ok(out)
}

fn closed_form_mixing(kind: DenseKind, cfg: &CorrectionConfig, x: &Tensor) -> Result<Tensor> {
    let bsz = x.rows();
    let mut m = Tensor::zeros(&[bsz, bsz]);
    match kind {
        DenseKind::Standard => {
            for b in 0..bsz {
                for k in 0..bsz {
                    m.data_mut()[b * bsz + k] = dot(x.row(b), x.row(k)) + 1.0;
                }
            }
        }
        DenseKind::AffineLike => {
            let (alpha, beta) = match cfg.reweighting {
                Reweighting::Base => (1.0, 1.0),
                Reweighting::AlphaBeta { alpha, beta } => (alpha, beta),
            };
            let s: Vec<f64> = (0..bsz)
                .map(|b| {
                    let r2: f64 = x.row(b).iter().map(|v| v * v).sum();
                    (alpha * alpha * r2 + beta * beta).sqrt()
                })
                .collect();
            for b in 0..bsz {
                for k in 0..bsz {
                    m.data_mut()[b * bsz + k] =
                        (alpha * alpha * dot(x.row(b), x.row(k)) + beta * beta) / (s[b] * s[k]);
                }
            }
        }
        DenseKind::NormLike => {
            let norms: Vec<f64> = (0..bsz)
                .map(|b| x.row(b).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            if let Some(b) = norms.iter().position(|&r| r <= crate::layers::NORM_EPS) {
                return Err(Error::ZeroInputNorm { norm: norms[b], eps: crate::layers::NORM_EPS });
            }
            let (unit_w, constant) = match cfg.reweighting {
                Reweighting::Base => (1.0, 1.0),
                Reweighting::AlphaBeta { beta, .. } => (1.0 - beta * beta, beta * beta),
            };
            for b in 0..bsz {
                for k in 0..bsz {
                    m.data_mut()[b * bsz + k] =
                        unit_w * dot(x.row(b), x.row(k)) / (norms[b] * norms[k]) + constant;
                }
            }
        }
    }
    Ok(m)
}

/// Measure the effective update of one gradient step.
///
/// Clones the layer, steps `(W, b)` by the layer's own batch gradients at
/// plain rate `eta`, recomputes the forward pass on the same `x`, and
/// returns `(z − z′)/η` next to the closed-form prediction.
pub fn measure_effective_update(
    layer: &DenseLayer,
    x: &Tensor,
    g: &Tensor,
    eta: f64,
) -> Result<DivergenceReport> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {eta}")));
    }
    let (z, cache) = layer.forward(x)?;
    let (grads, _) = layer.backward(&cache, g)?;
    let mut stepped = layer.clone();
    stepped.apply_update(&grads, eta)?;
    let (z2, _) = stepped.forward(x)?;
    let effective = z.sub(&z2)?.scale(1.0 / eta)?;
    let predicted = predicted_effective(layer.kind, &layer.cfg, x, g)?;
    let residual = relative_residual(&effective, &predicted)?;
    Ok(DivergenceReport {
        ideal: g.clone(),
        ratio: guarded_ratio(&effective, g),
        effective,
        predicted,
        residual,
        eta_used: eta,
    })
}

// --- mixing matrices ----------------------------------------------------

/// Which Gram-like form to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingKind {
    /// `M_bk = x_b·x_k + 1` — the standard affine batched divergence.
    Raw,
    /// `M_bk = (x_b·x_k + 1)/(s_b s_k)`, `s = √(‖x‖²+1)`; unit diagonal.
    AffineLike,
    /// `M_bk = x̂_b·x̂_k + 1`; diagonal exactly 2.
    NormLike,
}

impl MixingKind {
    pub fn name(self) -> &'static str {
        match self {
            MixingKind::Raw => "raw",
            MixingKind::AffineLike => "affine_like",
            MixingKind::NormLike => "norm_like",
        }
    }
}

/// A mixing matrix with its diagonal/off-diagonal split: `m` equals
/// `diagonal` (as a matrix) plus `off_diagonal` exactly.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub m: Tensor,
    pub diagonal: Tensor,
    pub off_diagonal: Tensor,
}

impl MixingMatrix {
    pub fn batch(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diag_mean(&self) -> f64 {
        self.diagonal.mean()
    }

    /// Frobenius norm of the off-diagonal part.
    pub fn offdiag_norm(&self) -> f64 {
        self.off_diagonal.norm()
    }

    pub fn offdiag_max_abs(&self) -> f64 {
        self.off_diagonal.max_abs()
    }
}

/// Build the mixing matrix of a batch `x: [B, n]` for the chosen kind.
pub fn mixing_matrix(x: &Tensor, kind: MixingKind) -> Result<MixingMatrix> {
    if x.rank() != 2 {
        return Err(Error::domain("mixing_matrix", format!("expected [B, n] input, got {:?}", x.shape())));
    }
    let dense_kind = match kind {
        MixingKind::Raw => DenseKind::Standard,
        MixingKind::AffineLike => DenseKind::AffineLike,
        MixingKind::NormLike => DenseKind::NormLike,
    };
    let m = closed_form_mixing(dense_kind, &CorrectionConfig::default(), x)?;
    let bsz = x.rows();
    let mut diagonal = Tensor::zeros(&[bsz]);
    let mut off_diagonal = m.clone();
    for b in 0..bsz {
        diagonal.data_mut()[b] = m.at2(b, b);
        off_diagonal.data_mut()[b * bsz + b] = 0.0;
    }
    Ok(MixingMatrix { m, diagonal, off_diagonal })
}

// --- backward-formula verification --------------------------------------

/// Worst-case gaps found by [`verify_backward_formulas`]. Gaps are measured
/// as `‖a − b‖∞ / max(1, ‖b‖∞)`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardCheckReport {
    pub kind: DenseKind,
    pub trials: usize,
    /// Implementation vs. independently transcribed closed form.
    pub max_analytic_gap: f64,
    /// Implementation vs. central finite differences.
    pub max_fd_gap: f64,
}

const ANALYTIC_TOL: f64 = 1e-8;
const FD_TOL: f64 = 1e-6;
const FD_H: f64 = 1e-5;

fn gap(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.max_abs() / b.max_abs().max(1.0))
}

/// The printed closed forms for `(dW, db, dX)`, written straight from the
/// formulas and sharing no code with the layer implementations.
fn transcribed_backward(
    kind: DenseKind,
    p: &AffineParams,
    x: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bsz, out, n) = (x.rows(), p.out_dim(), p.in_dim());
    let mut dw = Tensor::zeros(&[out, n]);
    let mut db = Tensor::zeros(&[out]);
    let mut dx = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let r2: f64 = x.row(b).iter().map(|v| v * v).sum();
        let r = r2.sqrt();
        let s = (r2 + 1.0).sqrt();
        // Wx and the layer output, recomputed here from scratch.
        let wx: Vec<f64> = (0..out).map(|i| dot(p.w.row(i), x.row(b))).collect();
        match kind {
            DenseKind::Standard => {
                for i in 0..out {
                    for j in 0..n {
                        dw.data_mut()[i * n + j] += g.at2(b, i) * x.at2(b, j);
                    }
                    db.data_mut()[i] += g.at2(b, i);
                }
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..out {
                        acc += g.at2(b, i) * p.w.at2(i, j);
                    }
                    dx.data_mut()[b * n + j] = acc;
                }
            }
            DenseKind::AffineLike => {
                let y: Vec<f64> = (0..out).map(|i| (wx[i] + p.b.data()[i]) / s).collect();
                for i in 0..out {
                    for j in 0..n {
                        dw.data_mut()[i * n + j] += g.at2(b, i) * x.at2(b, j) / s;
                    }
                    db.data_mut()[i] += g.at2(b, i) / s;
                }
                for j in 0..n {
                    let mut acc = 0.0;
                    for (i, &yi) in y.iter().enumerate() {
                        acc += g.at2(b, i) * (p.w.at2(i, j) / s - yi * x.at2(b, j) / (s * s));
                    }
                    dx.data_mut()[b * n + j] = acc;
                }
            }
            DenseKind::NormLike => {
                for i in 0..out {
                    for j in 0..n {
                        dw.data_mut()[i * n + j] += g.at2(b, i) * x.at2(b, j) / r;
                    }
                    db.data_mut()[i] += g.at2(b, i);
                }
                for j in 0..n {
                    let mut acc = 0.0;
                    for (i, &wxi) in wx.iter().enumerate() {
                        acc += g.at2(b, i)
                            * (p.w.at2(i, j) / r - wxi * x.at2(b, j) / (r * r * r));
                    }
                    dx.data_mut()[b * n + j] = acc;
                }
            }
        }
    }
    (dw, db, dx)
}

fn probe_loss(layer: &DenseLayer, x: &Tensor, g: &Tensor) -> Result<f64> {
    let (z, _) = layer.forward(x)?;
    Ok(dot(z.data(), g.data()))
}

/// Central finite differences of the probe loss `Σ g⊙z` over every entry of
/// W, b and X.
fn fd_layer_grads(layer: &DenseLayer, x: &Tensor, g: &Tensor, h: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let mut dw = Tensor::zeros(layer.params.w.shape());
    let mut db = Tensor::zeros(layer.params.b.shape());
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..dw.len() {
        let mut plus = layer.clone();
        plus.params.w.data_mut()[i] += h;
        let mut minus = layer.clone();
        minus.params.w.data_mut()[i] -= h;
        dw.data_mut()[i] = (probe_loss(&plus, x, g)? - probe_loss(&minus, x, g)?) / (2.0 * h);
    }
    for i in 0..db.len() {
        let mut plus = layer.clone();
        plus.params.b.data_mut()[i] += h;
        let mut minus = layer.clone();
        minus.params.b.data_mut()[i] -= h;
        db.data_mut()[i] = (probe_loss(&plus, x, g)? - probe_loss(&minus, x, g)?) / (2.0 * h);
    }
    for i in 0..dx.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        dx.data_mut()[i] = (probe_loss(layer, &plus, g)? - probe_loss(layer, &minus, g)?) / (2.0 * h);
    }
    Ok((dw, db, dx))
}

/// Random input with every sample norm bounded away from zero, so the
/// norm-like forms are well inside their domain.
fn well_conditioned_input(bsz: usize, n: usize, rng: &mut Rng) -> Tensor {
    loop {
        let x = Tensor::random_normal(&[bsz, n], rng);
        let ok = (0..bsz).all(|b| x.row(b).iter().map(|v| v * v).sum::<f64>().sqrt() > 0.3);
        if ok {
            return x;
        }
    }
}

/// Check a dense kind's implemented backward pass against the transcribed
/// closed forms and against finite differences, over random instances.
pub fn verify_backward_formulas(kind: DenseKind, trials: usize, seed: u64) -> Result<BackwardCheckReport> {
    let mut rng = Rng::new(seed).derive(0xBACC);
    let mut report = BackwardCheckReport { kind, trials, max_analytic_gap: 0.0, max_fd_gap: 0.0 };
    for trial in 0..trials {
        let n = [2, 3, 5, 8][trial % 4];
        let out = 1 + trial % 5;
        let bsz = 1 + trial % 3;
        let layer = DenseLayer::new(kind, n, out, CorrectionConfig::default(), &mut rng)?;
        let x = well_conditioned_input(bsz, n, &mut rng);
        let g = Tensor::random_normal(&[bsz, out], &mut rng);

        let (_, cache) = layer.forward(&x)?;
        let (grads, dx) = layer.backward(&cache, &g)?;
        let (t_dw, t_db, t_dx) = transcribed_backward(kind, &layer.params, &x, &g);
        let analytic = gap(&grads.dw, &t_dw)?
            .max(gap(&grads.db, &t_db)?)
            .max(gap(&dx, &t_dx)?);
        report.max_analytic_gap = report.max_analytic_gap.max(analytic);
        if analytic > ANALYTIC_TOL {
            return Err(Error::domain(
                "verify_backward_formulas",
                format!("{} trial {trial}: analytic gap {analytic:.3e} exceeds {ANALYTIC_TOL:.0e}", kind.name()),
            ));
        }

        let (fd_dw, fd_db, fd_dx) = fd_layer_grads(&layer, &x, &g, FD_H)?;
        let fd = gap(&grads.dw, &fd_dw)?.max(gap(&grads.db, &fd_db)?).max(gap(&dx, &fd_dx)?);
        report.max_fd_gap = report.max_fd_gap.max(fd);
        if fd > FD_TOL {
            return Err(Error::domain(
                "verify_backward_formulas",
                format!("{} trial {trial}: finite-difference gap {fd:.3e} exceeds {FD_TOL:.0e}", kind.name()),
            ));
        }
    }
    Ok(report)
}

/// `(‖x‖, ‖dX‖)` pairs along a ray of growing input norm, for studying how
/// each kind's input gradient scales with the input.
pub fn backward_geometry_sweep(kind: DenseKind, norms: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = Rng::new(seed).derive(0x6E0);
    let (n, out) = (6, 4);
    let layer = DenseLayer::new(kind, n, out, CorrectionConfig::default(), &mut rng)?;
    let g = Tensor::random_normal(&[1, out], &mut rng);
    let direction = {
        let v = well_conditioned_input(1, n, &mut rng);
        v.scale(1.0 / v.norm())?
    };
    let mut points = Vec::with_capacity(norms.len());
    for &r in norms {
        let x = direction.scale(r)?;
        let (_, cache) = layer.forward(&x)?;
        let (_, dx) = layer.backward(&cache, &g)?;
        points.push((r, dx.norm()));
    }
    Ok(points)
}

// --- attention ----------------------------------------------------------

/// Results of the attention-step check: the exact decomposition
/// `Y′ − Y = −ηF + η²S` and the η²-scaling of the residual after removing
/// the first-order term.
#[derive(Debug, Clone, Copy)]
pub struct AttentionReport {
    pub trials: usize,
    /// Worst `‖(Y′−Y) + ηF − η²S‖∞` relative to `‖Y‖∞` — pure round-off.
    pub max_identity_gap: f64,
    /// Worst `‖(Y′−Y) + ηF‖∞ / (η‖F‖∞)` — the relative size of the
    /// second-order term, O(η).
    pub max_first_order_rel: f64,
    /// residual(η) / residual(η/2) per trial, ideally 4.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

fn attention_scores(x: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<Tensor> {
    // Y = (X Wqᵀ)(X Wkᵀ)ᵀ.
    let q = x.matmul(&wq.transposed())?;
    let k = x.matmul(&wk.transposed())?;
    q.matmul(&k.transposed())
}

/// Step the bilinear attention-score map `Y = X WqᵀWk Xᵀ` by the gradients
/// of both weight matrices and verify the update decomposition.
pub fn attention_divergence_check(
    t: usize,
    d: usize,
    n: usize,
    eta: f64,
    trials: usize,
    seed: u64,
) -> Result<AttentionReport> {
    if !(1..=4).contains(&t) || !(1..=4).contains(&d) || !(1..=4).contains(&n) {
        return Err(Error::Config(format!(
            "attention check is a toy-size instrument; sizes must be in 1..=4, got ({t}, {d}, {n})"
        )));
    }
    let mut rng = Rng::new(seed).derive(0xA77);
    let mut report = AttentionReport {
        trials,
        max_identity_gap: 0.0,
        max_first_order_rel: 0.0,
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
    };
    for _ in 0..trials {
        let x = Tensor::random_normal(&[t, n], &mut rng);
        let wq = Tensor::random_normal(&[d, n], &mut rng);
        let wk = Tensor::random_normal(&[d, n], &mut rng);
        let g = Tensor::random_normal(&[t, t], &mut rng);

        let q = x.matmul(&wq.transposed())?;
        let k = x.matmul(&wk.transposed())?;
        let y = q.matmul(&k.transposed())?;
        // dWq = Kᵀgᵀ X, dWk = Qᵀg X.
        let dwq = k.transposed().matmul(&g.transposed())?.matmul(&x)?;
        let dwk = q.transposed().matmul(&g)?.matmul(&x)?;
        // First- and second-order terms of the update.
        let f = x
            .matmul(&dwq.transposed())?
            .matmul(&wk.matmul(&x.transposed())?)?
            .add(&x.matmul(&wq.transposed())?.matmul(&dwk.matmul(&x.transposed())?)?)?;
        let s = x.matmul(&dwq.transposed())?.matmul(&dwk.matmul(&x.transposed())?)?;

        let scale = y.max_abs().max(1.0);
        let mut residuals = [0.0; 2];
        for (idx, step) in [eta, eta / 2.0].into_iter().enumerate() {
            let wq2 = wq.sub(&dwq.scale(step)?)?;
            let wk2 = wk.sub(&dwk.scale(step)?)?;
            let y2 = attention_scores(&x, &wq2, &wk2)?;
            let delta = y2.sub(&y)?;
            // ΔY + ηF − η²S vanishes in exact arithmetic.
            let identity_gap = delta
                .add(&f.scale(step)?)?
                .sub(&s.scale(step * step)?)?
                .max_abs()
                / scale;
            report.max_identity_gap = report.max_identity_gap.max(identity_gap);
            let after_first = delta.add(&f.scale(step)?)?.max_abs();
            residuals[idx] = after_first;
            let f_norm = f.max_abs().max(1e-300);
            report.max_first_order_rel = report.max_first_order_rel.max(after_first / (step * f_norm));
        }
        let ratio = residuals[0] / residuals[1].max(1e-300);
        report.min_ratio = report.min_ratio.min(ratio);
        report.max_ratio = report.max_ratio.max(ratio);
    }
    Ok(report)
}

// --- learning-rate policy checks ----------------------------------------

/// Effective updates measured under a gradient-only learning-rate policy:
/// the whole step plus the weight-only and bias-only contributions.
#[derive(Debug, Clone)]
pub struct PolicyCheckReport {
    pub combined: DivergenceReport,
    pub weight_component: Tensor,
    pub bias_component: Tensor,
}

/// Apply a gradient-only policy to one plain affine step and measure what
/// the output actually does. Both policies should land the combined
/// effective update on `g`; the local policy splits it evenly between the
/// weight and bias contributions.
pub fn lr_policy_check(
    policy: GradientOnlyPolicy,
    params: &AffineParams,
    x: &Tensor,
    g: &Tensor,
    eta: f64,
) -> Result<PolicyCheckReport> {
    let mult = gradient_only_policy(policy, x)?;
    let x2 = if x.rank() == 1 { x.reshape(&[1, x.len()])? } else { x.clone() };
    let g2 = if g.rank() == 1 { g.reshape(&[1, g.len()])? } else { g.clone() };
    let layer = DenseLayer::with_params(DenseKind::Standard, params.clone(), CorrectionConfig::default())?;
    let (z, cache) = layer.forward(&x2)?;
    let (grads, _) = layer.backward(&cache, &g2)?;

    let run = |step_w: f64, step_b: f64| -> Result<Tensor> {
        let mut stepped = layer.clone();
        stepped.params.w = stepped.params.w.sub(&grads.dw.scale(eta * step_w)?)?;
        stepped.params.b = stepped.params.b.sub(&grads.db.scale(eta * step_b)?)?;
        let (z2, _) = stepped.forward(&x2)?;
        z.sub(&z2)?.scale(1.0 / eta)
    };

    let effective = run(mult.weight, mult.bias)?;
    let weight_component = run(mult.weight, 0.0)?;
    let bias_component = run(0.0, mult.bias)?;
    // Either policy aligns the combined effective update with g itself.
    let predicted = g2.clone();
    let residual = relative_residual(&effective, &predicted)?;
    Ok(PolicyCheckReport {
        combined: DivergenceReport {
            ideal: g2.clone(),
            ratio: guarded_ratio(&effective, &g2),
            effective,
            predicted,
            residual,
            eta_used: eta,
        },
        weight_component,
        bias_component,
    })
}

// --- verification suites -------------------------------------------------

/// CSV row of one verification trial.
#[derive(Debug, Clone)]
pub struct TrialSummary {
    pub kind: String,
    pub batch: usize,
    pub dim: usize,
    pub eta: f64,
    pub residual: f64,
    pub diag_mean: f64,
    pub offdiag_norm: f64,
}

pub const TRIAL_CSV_HEADER: &str = "kind,B,n,eta,residual,diag_mean,offdiag_norm";

impl TrialSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.kind, self.batch, self.dim, self.eta, self.residual, self.diag_mean, self.offdiag_norm
        )
    }
}

/// Outcome of one named verification suite.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub worst_residual: f64,
    pub rows: Vec<TrialSummary>,
}

impl SuiteOutcome {
    fn new(name: &'static str) -> SuiteOutcome {
        SuiteOutcome { name, trials: 0, failures: 0, worst_residual: 0.0, rows: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, row: TrialSummary, tol: f64) {
        self.trials += 1;
        // A NaN residual is a failure, not a pass.
        if row.residual.is_nan() || row.residual > tol {
            self.failures += 1;
        }
        self.worst_residual = self.worst_residual.max(row.residual);
        self.rows.push(row);
    }
}

fn dense_layer_for(kind: DenseKind, n: usize, out: usize, rng: &mut Rng) -> Result<DenseLayer> {
    DenseLayer::new(kind, n, out, CorrectionConfig::default(), rng)
}

/// Single-sample effective updates for all three dense kinds, against their
/// closed forms, across the η validity window.
pub fn verify_affine_suite(trials: usize, tol: f64, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("affine");
    let mut rng = Rng::new(seed).derive(1);
    let kinds = [DenseKind::Standard, DenseKind::AffineLike, DenseKind::NormLike];
    for trial in 0..trials {
        let kind = kinds[trial % kinds.len()];
        let n = [2, 8, 64][trial % 3];
        let width = 1 + trial % 6;
        let layer = dense_layer_for(kind, n, width, &mut rng)?;
        let x = well_conditioned_input(1, n, &mut rng);
        let g = Tensor::random_normal(&[1, width], &mut rng);
        // The parameter-to-output map is linear in the step, so the residual
        // is round-off-dominated anywhere in the window; every η must pass.
        let mut worst = 0.0_f64;
        for eta in [1e-7, DEFAULT_ETA, 1e-5] {
            let report = measure_effective_update(&layer, &x, &g, eta)?;
            worst = worst.max(report.residual);
        }
        let mix = mixing_matrix(
            &x,
            match kind {
                DenseKind::Standard => MixingKind::Raw,
                DenseKind::AffineLike => MixingKind::AffineLike,
                DenseKind::NormLike => MixingKind::NormLike,
            },
        )?;
        out.record(
            TrialSummary {
                kind: kind.name().into(),
                batch: 1,
                dim: n,
                eta: DEFAULT_ETA,
                residual: worst,
                diag_mean: mix.diag_mean(),
                offdiag_norm: mix.offdiag_norm(),
            },
            tol,
        );
    }
    Ok(out)
}

/// Batched effective updates against the mixing closed forms, plus the
/// diagonal-dominance property of the corrected kinds.
pub fn verify_batched_suite(trials: usize, tol: f64, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("batched");
    let mut rng = Rng::new(seed).derive(2);
    let kinds = [DenseKind::Standard, DenseKind::AffineLike, DenseKind::NormLike];
    for trial in 0..trials {
        let kind = kinds[trial % kinds.len()];
        let bsz = [2, 4, 8][trial % 3];
        let n = [3, 6, 12][(trial / 3) % 3];
        let width = 1 + trial % 4;
        let layer = dense_layer_for(kind, n, width, &mut rng)?;
        let x = well_conditioned_input(bsz, n, &mut rng);
        let g = Tensor::random_normal(&[bsz, width], &mut rng);
        let report = measure_effective_update(&layer, &x, &g, DEFAULT_ETA)?;
        let mix_kind = match kind {
            DenseKind::Standard => MixingKind::Raw,
            DenseKind::AffineLike => MixingKind::AffineLike,
            DenseKind::NormLike => MixingKind::NormLike,
        };
        let mix = mixing_matrix(&x, mix_kind)?;
        let mut residual = report.residual;
        if kind != DenseKind::Standard {
            // Corrected kinds: |off-diagonal| never exceeds the diagonal.
            let diag_min = mix.diagonal.data().iter().cloned().fold(f64::INFINITY, f64::min);
            if mix.offdiag_max_abs() > diag_min + 1e-12 {
                residual = f64::INFINITY;
            }
        }
        out.record(
            TrialSummary {
                kind: kind.name().into(),
                batch: bsz,
                dim: n,
                eta: DEFAULT_ETA,
                residual,
                diag_mean: mix.diag_mean(),
                offdiag_norm: mix.offdiag_norm(),
            },
            tol,
        );
    }
    Ok(out)
}

/// Unrolled-vs-direct convolution agreement and the 1×1 PatchNorm reduction.
pub fn verify_conv_suite(trials: usize, tol: f64, seed: u64) -> Result<SuiteOutcome> {
    use crate::conv::{
        conv_forward, patchnorm_forward, ConvSpec, PatchNormVariant, ZeroPatchPolicy,
    };
    use crate::layers::dense::{affine_like_forward, norm_like_forward};

    let mut out = SuiteOutcome::new("conv");
    let mut rng = Rng::new(seed).derive(3);
    for trial in 0..trials {
        let spec = ConvSpec {
            in_channels: 1 + trial % 3,
            out_channels: 1 + (trial / 2) % 4,
            kernel_h: 1 + trial % 3,
            kernel_w: 1 + (trial / 3) % 3,
            stride: 1 + trial % 2,
            padding: trial % 2,
        };
        let x = Tensor::random_normal(&[spec.in_channels, 7, 6], &mut rng);
        let params = spec.init_params(&mut rng);
        let (y, _) = conv_forward(&spec, &params, &x)?;
        let direct = direct_convolution(&spec, &params, &x)?;
        let residual = y.sub(&direct)?.max_abs() / direct.max_abs().max(1e-300);
        out.record(
            TrialSummary {
                kind: "conv_unroll".into(),
                batch: 1,
                dim: spec.patch_len(),
                eta: 0.0,
                residual,
                diag_mean: 0.0,
                offdiag_norm: 0.0,
            },
            tol,
        );

        // 1×1 PatchNorm must reduce to the dense corrections pixelwise.
        let one = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let params1 = one.init_params(&mut rng);
        let mut img = Tensor::random_normal(&[2, 3, 3], &mut rng);
        for v in img.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        let cfg = CorrectionConfig::default();
        let mut reduction_gap = 0.0_f64;
        for variant in [PatchNormVariant::AffineLike, PatchNormVariant::NormLike] {
            let (py, _) = patchnorm_forward(&one, &params1, &img, variant, ZeroPatchPolicy::Strict)?;
            for pos in 0..9 {
                let pixel: Vec<f64> = (0..2).map(|c| img.data()[c * 9 + pos]).collect();
                let row = Tensor::from_rows(&[pixel])?;
                let (z, _) = match variant {
                    PatchNormVariant::AffineLike => affine_like_forward(&params1, &row, &cfg)?,
                    PatchNormVariant::NormLike => norm_like_forward(&params1, &row, &cfg)?,
                };
                for dch in 0..3 {
                    reduction_gap = reduction_gap.max((py.data()[dch * 9 + pos] - z.data()[dch]).abs());
                }
            }
        }
        out.record(
            TrialSummary {
                kind: "patchnorm_1x1".into(),
                batch: 1,
                dim: 2,
                eta: 0.0,
                residual: reduction_gap,
                diag_mean: 0.0,
                offdiag_norm: 0.0,
            },
            tol,
        );
    }
    Ok(out)
}

/// Independent nested-loop convolution used as the oracle for the unrolled
/// implementation.
pub fn direct_convolution(
    spec: &crate::conv::ConvSpec,
    params: &AffineParams,
    x: &Tensor,
) -> Result<Tensor> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = spec.out_hw(h, w)?;
    let mut y = Tensor::zeros(&[spec.out_channels, oh, ow]);
    for dch in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..spec.in_channels {
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                let e = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
                                acc += params.w.at2(dch, e)
                                    * x.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                y.data_mut()[(dch * oh + oy) * ow + ox] = acc + params.b.data()[dch];
            }
        }
    }
    Ok(y)
}

/// Attention-step decomposition and η²-scaling over random toy instances.
pub fn verify_attention_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("attention");
    let report = attention_divergence_check(3, 2, 4, 0.01, trials.max(1), seed)?;
    let ratio_ok = report.min_ratio > 3.5 && report.max_ratio < 4.5;
    let identity_ok = report.max_identity_gap < 1e-10;
    out.trials = report.trials;
    out.failures = usize::from(!(ratio_ok && identity_ok));
    out.worst_residual = report.max_identity_gap;
    out.rows.push(TrialSummary {
        kind: "attention".into(),
        batch: report.trials,
        dim: 4,
        eta: 0.01,
        residual: report.max_identity_gap,
        diag_mean: report.min_ratio,
        offdiag_norm: report.max_ratio,
    });
    Ok(out)
}

/// Gradient-only learning-rate policies on random single-sample instances.
pub fn verify_lr_policy_suite(trials: usize, tol: f64, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("lr_policy");
    let mut rng = Rng::new(seed).derive(5);
    for trial in 0..trials {
        let n = 2 + trial % 6;
        let width = 1 + trial % 4;
        let params = AffineParams::init(n, width, &mut rng);
        let x = well_conditioned_input(1, n, &mut rng);
        let g = Tensor::random_normal(&[1, width], &mut rng);
        for policy in [GradientOnlyPolicy::Global, GradientOnlyPolicy::Local] {
            let report = lr_policy_check(policy, &params, &x, &g, DEFAULT_ETA)?;
            let mut residual = report.combined.residual;
            if policy == GradientOnlyPolicy::Local {
                // Each parameter group contributes half of the ideal step.
                let half = g.scale(0.5)?;
                let w_gap = relative_residual(&report.weight_component, &half)?;
                let b_gap = relative_residual(&report.bias_component, &half)?;
                residual = residual.max(w_gap).max(b_gap);
            }
            out.record(
                TrialSummary {
                    kind: match policy {
                        GradientOnlyPolicy::Global => "policy_global".into(),
                        GradientOnlyPolicy::Local => "policy_local".into(),
                    },
                    batch: 1,
                    dim: n,
                    eta: DEFAULT_ETA,
                    residual,
                    diag_mean: 0.0,
                    offdiag_norm: 0.0,
                },
                tol,
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_affine_single_sample_divergence() {
        // x = [3, 4], g = [1, −2]: effective = (‖x‖²+1)·g = [26, −52].
        let mut rng = Rng::new(71);
        let layer = dense_layer_for(DenseKind::Standard, 2, 2, &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let report = measure_effective_update(&layer, &x, &g, DEFAULT_ETA).unwrap();
        assert!(report.residual < 1e-4, "residual {}", report.residual);
        assert!((report.effective.data()[0] - 26.0).abs() < 26.0 * 1e-4);
        assert!((report.effective.data()[1] + 52.0).abs() < 52.0 * 1e-4);
        assert!((report.ratio.data()[0] - 26.0).abs() < 26.0 * 1e-4);
    }

    #[test]
    fn corrected_kinds_align_with_ideal() {
        let mut rng = Rng::new(72);
        let x = Tensor::from_rows(&[vec![1.5, -0.4, 2.2]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.3, -1.1]]).unwrap();

        let affine_like = dense_layer_for(DenseKind::AffineLike, 3, 2, &mut rng).unwrap();
        let report = measure_effective_update(&affine_like, &x, &g, DEFAULT_ETA).unwrap();
        assert!(report.residual < 1e-4);
        let gap = report.effective.sub(&g).unwrap().max_abs() / g.max_abs();
        assert!(gap < 1e-4, "affine-like effective should equal g, gap {gap}");

        let norm_like = dense_layer_for(DenseKind::NormLike, 3, 2, &mut rng).unwrap();
        let report = measure_effective_update(&norm_like, &x, &g, DEFAULT_ETA).unwrap();
        assert!(report.residual < 1e-4);
        let gap = report.effective.sub(&g.scale(2.0).unwrap()).unwrap().max_abs() / g.max_abs();
        assert!(gap < 1e-4, "norm-like effective should equal 2g, gap {gap}");
    }

    #[test]
    fn reweighted_families_keep_alignment() {
        let mut rng = Rng::new(73);
        let x = well_conditioned_input(2, 4, &mut rng);
        let g = Tensor::random_normal(&[2, 3], &mut rng);
        for (kind, alpha, beta) in [
            (DenseKind::AffineLike, 0.7, -0.4),
            (DenseKind::NormLike, 1.3, 0.6),
        ] {
            let cfg = CorrectionConfig {
                reweighting: Reweighting::AlphaBeta { alpha, beta },
                lr_multiplier: 1.0,
            };
            let layer = DenseLayer::new(kind, 4, 3, cfg, &mut rng).unwrap();
            let report = measure_effective_update(&layer, &x, &g, DEFAULT_ETA).unwrap();
            assert!(report.residual < 1e-4, "{kind:?} residual {}", report.residual);
            // Unit diagonal in both reweighted families: per-sample
            // self-effect is the ideal step itself.
            let m = closed_form_mixing(kind, &cfg, &x).unwrap();
            for b in 0..2 {
                assert!((m.at2(b, b) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixing_matrix_hand_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let raw = mixing_matrix(&x, MixingKind::Raw).unwrap();
        assert_eq!(raw.m.data(), &[2.0, 1.0, 1.0, 2.0]);
        assert_eq!(raw.diagonal.data(), &[2.0, 2.0]);
        assert_eq!(raw.off_diagonal.data(), &[0.0, 1.0, 1.0, 0.0]);

        let al = mixing_matrix(&x, MixingKind::AffineLike).unwrap();
        assert!((al.m.data()[0] - 1.0).abs() < 1e-15);
        assert!((al.m.data()[1] - 0.5).abs() < 1e-15);

        let nl = mixing_matrix(&x, MixingKind::NormLike).unwrap();
        assert_eq!(nl.diagonal.data(), &[2.0, 2.0]);
        assert!((nl.m.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixing_decomposition_and_symmetry() {
        let mut rng = Rng::new(74);
        let x = well_conditioned_input(5, 7, &mut rng);
        for kind in [MixingKind::Raw, MixingKind::AffineLike, MixingKind::NormLike] {
            let mix = mixing_matrix(&x, kind).unwrap();
            for b in 0..5 {
                for k in 0..5 {
                    let rebuilt = if b == k {
                        mix.diagonal.data()[b]
                    } else {
                        mix.off_diagonal.at2(b, k)
                    };
                    assert_eq!(mix.m.at2(b, k), rebuilt);
                    assert!((mix.m.at2(b, k) - mix.m.at2(k, b)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_formulas_check_all_kinds() {
        for kind in [DenseKind::Standard, DenseKind::AffineLike, DenseKind::NormLike] {
            let report = verify_backward_formulas(kind, 10, 2024).unwrap();
            assert!(report.max_analytic_gap <= ANALYTIC_TOL);
            assert!(report.max_fd_gap <= FD_TOL);
        }
    }

    #[test]
    fn attention_hand_case_scalar() {
        // t=d=n=1, X=q=k=g=1, η=0.01: ΔY = −0.02 + 0.0001.
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let wq = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let wk = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let y = attention_scores(&x, &wq, &wk).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let eta = 0.01;
        // dWq = dWk = 1; both stepped to 0.99.
        let wq2 = Tensor::from_rows(&[vec![1.0 - eta]]).unwrap();
        let wk2 = Tensor::from_rows(&[vec![1.0 - eta]]).unwrap();
        let y2 = attention_scores(&x, &wq2, &wk2).unwrap();
        let delta = y2.data()[0] - y.data()[0];
        assert!((delta - (-0.02 + 0.0001)).abs() < 1e-15);
    }

    #[test]
    fn attention_residual_scales_quadratically() {
        let report = attention_divergence_check(2, 2, 3, 0.01, 20, 90).unwrap();
        assert!(report.max_identity_gap < 1e-10, "identity gap {}", report.max_identity_gap);
        assert!(report.min_ratio > 3.5 && report.max_ratio < 4.5, "{report:?}");
    }

    #[test]
    fn attention_zero_gradient_means_no_update() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let wq = Tensor::from_rows(&[vec![0.5, 0.1]]).unwrap();
        let wk = Tensor::from_rows(&[vec![-0.2, 0.8]]).unwrap();
        let y = attention_scores(&x, &wq, &wk).unwrap();
        // Zero upstream gradient: zero parameter gradients, Y unchanged.
        let q = x.matmul(&wq.transposed()).unwrap();
        let k = x.matmul(&wk.transposed()).unwrap();
        let g = Tensor::zeros(&[1, 1]);
        let dwq = k.transposed().matmul(&g.transposed()).unwrap().matmul(&x).unwrap();
        let dwk = q.transposed().matmul(&g).unwrap().matmul(&x).unwrap();
        assert_eq!(dwq.max_abs(), 0.0);
        assert_eq!(dwk.max_abs(), 0.0);
        let y2 = attention_scores(&x, &wq, &wk).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn lr_policies_align_the_effective_update() {
        let mut rng = Rng::new(75);
        let params = AffineParams::init(2, 2, &mut rng);
        let x = Tensor::vector(&[3.0, 4.0]);
        let g = Tensor::from_rows(&[vec![1.0, -0.5]]).unwrap();

        let global = lr_policy_check(GradientOnlyPolicy::Global, &params, &x, &g, DEFAULT_ETA).unwrap();
        assert!(global.combined.residual < 1e-4);

        let local = lr_policy_check(GradientOnlyPolicy::Local, &params, &x, &g, DEFAULT_ETA).unwrap();
        assert!(local.combined.residual < 1e-4);
        let half = g.scale(0.5).unwrap();
        assert!(relative_residual(&local.weight_component, &half).unwrap() < 1e-4);
        assert!(relative_residual(&local.bias_component, &half).unwrap() < 1e-4);
    }

    #[test]
    fn suites_pass_cleanly() {
        assert!(verify_affine_suite(12, 1e-4, 7).unwrap().passed());
        assert!(verify_batched_suite(12, 1e-4, 7).unwrap().passed());
        assert!(verify_conv_suite(6, 1e-10, 7).unwrap().passed());
        assert!(verify_attention_suite(10, 7).unwrap().passed());
        assert!(verify_lr_policy_suite(6, 1e-4, 7).unwrap().passed());
    }
}
