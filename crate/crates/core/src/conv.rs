//! Convolution by explicit patch unrolling, the two PatchNorm variants,
//! and pooling.
//!
//! A convolution is expressed as: unroll the input into a patch matrix
//! (one row per output position, one column per receptive-field element),
//! apply the kernel as a dense map over patch rows, fold back to spatial
//! layout. The backward pass scatters patch-level input gradients to source
//! pixels through a provenance map, summing where patches overlap.
//!
//! PatchNorm reuses the corrected dense forms per patch row: the affine-like
//! variant scales `(Wx̃_p + b)` by `1/√(‖x̃_p‖²+1)`, the norm-like variant
//! scales only `Wx̃_p` by `1/‖x̃_p‖` and leaves the bias alone.

use crate::error::{Error, Result};
use crate::layers::dense::{
    affine_backward, affine_forward, affine_like_backward, affine_like_forward, AffineGrads,
    AffineParams, CorrectionConfig, ForwardCache, NORM_EPS,
};
use crate::tensor::{axpy, dot, Tensor};

/// Geometry of one convolution layer. Padding is with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Receptive-field length `C·kH·kW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output spatial dims for an `H×W` input: `floor((H+2p−k)/stride)+1`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = (h + 2 * self.padding).checked_sub(self.kernel_h).map(|d| d / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(self.kernel_w).map(|d| d / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::domain(
                "ConvSpec::out_hw",
                format!("kernel {}×{} does not fit {}×{} input", self.kernel_h, self.kernel_w, h, w),
            )),
        }
    }

    /// Kernel parameters as a dense map over patch rows: `W [D, C·kH·kW]`,
    /// `b [D]`, fan-in uniform init.
    pub fn init_params(&self, rng: &mut crate::rng::Rng) -> AffineParams {
        AffineParams::init(self.patch_len(), self.out_channels, rng)
    }
}

/// Unrolled input: row `p` is the flattened receptive field of output
/// position `p`; `provenance[p·E + e]` is the flat source-pixel index, or
/// `None` where the field hangs over the zero padding.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub patches: Tensor,
    pub provenance: Vec<Option<usize>>,
    pub out_h: usize,
    pub out_w: usize,
}

fn check_image(x: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.shape()[0] != channels {
        return Err(Error::domain(
            op,
            format!("expected [{channels}, H, W] input, got {:?}", x.shape()),
        ));
    }
    Ok((x.shape()[1], x.shape()[2]))
}

/// Build the patch matrix of `x: [C, H, W]`. Pixels inside overlapping
/// receptive fields appear in multiple rows.
pub fn unroll(x: &Tensor, spec: &ConvSpec) -> Result<PatchMatrix> {
    let (h, w) = check_image(x, spec.in_channels, "unroll")?;
    let (oh, ow) = spec.out_hw(h, w)?;
    let e_len = spec.patch_len();
    let p_len = oh * ow;
    let mut patches = Tensor::zeros(&[p_len, e_len]);
    let mut provenance = vec![None; p_len * e_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            for c in 0..spec.in_channels {
                for ky in 0..spec.kernel_h {
                    for kx in 0..spec.kernel_w {
                        let e = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            let src = (c * h + iy as usize) * w + ix as usize;
                            patches.data_mut()[p * e_len + e] = x.data()[src];
                            provenance[p * e_len + e] = Some(src);
                        }
                    }
                }
            }
        }
    }
    Ok(PatchMatrix { patches, provenance, out_h: oh, out_w: ow })
}

/// `[P, D]` patch-major output folded to `[D, oh, ow]` spatial layout.
fn fold(z: &Tensor, d: usize, oh: usize, ow: usize) -> Tensor {
    let p_len = oh * ow;
    let mut out = Tensor::zeros(&[d, oh, ow]);
    for p in 0..p_len {
        for di in 0..d {
            out.data_mut()[di * p_len + p] = z.data()[p * d + di];
        }
    }
    out
}

/// Spatial-layout gradient `[D, oh, ow]` unfolded to patch-major `[P, D]`.
fn unfold_grad(g: &Tensor, d: usize, oh: usize, ow: usize, op: &'static str) -> Result<Tensor> {
    if g.shape() != [d, oh, ow] {
        return Err(Error::domain(
            op,
            format!("expected [{d}, {oh}, {ow}] gradient, got {:?}", g.shape()),
        ));
    }
    let p_len = oh * ow;
    let mut out = Tensor::zeros(&[p_len, d]);
    for p in 0..p_len {
        for di in 0..d {
            out.data_mut()[p * d + di] = g.data()[di * p_len + p];
        }
    }
    Ok(out)
}

/// Scatter patch-level input gradients back to source pixels, summing over
/// the repeated appearances of each pixel.
fn scatter(dpatches: &Tensor, provenance: &[Option<usize>], in_shape: &[usize; 3]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (slot, dv) in provenance.iter().zip(dpatches.data()) {
        if let Some(src) = slot {
            dx.data_mut()[*src] += dv;
        }
    }
    dx
}

/// Forward state shared by plain conv and PatchNorm.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// Dense-layer cache over patch rows: `x` is the patch matrix.
    pub fcache: ForwardCache,
    provenance: Vec<Option<usize>>,
    in_shape: [usize; 3],
    out_h: usize,
    out_w: usize,
}

/// `y[d, oy, ox] = Σ_e W_de · x̃_pe + b_d` with `p = oy·ow + ox`.
pub fn conv_forward(spec: &ConvSpec, params: &AffineParams, x: &Tensor) -> Result<(Tensor, ConvCache)> {
    let (h, w) = check_image(x, spec.in_channels, "conv_forward")?;
    check_kernel(spec, params)?;
    let pm = unroll(x, spec)?;
    let (z, fcache) = affine_forward(params, &pm.patches)?;
    let y = fold(&z, spec.out_channels, pm.out_h, pm.out_w);
    let cache = ConvCache {
        fcache,
        provenance: pm.provenance,
        in_shape: [spec.in_channels, h, w],
        out_h: pm.out_h,
        out_w: pm.out_w,
    };
    Ok((y, cache))
}

/// Backward through the unrolled form; identical math to the batched affine
/// backward with patches as the batch, then a provenance scatter for `dX`.
pub fn conv_backward(
    spec: &ConvSpec,
    params: &AffineParams,
    cache: &ConvCache,
    g: &Tensor,
) -> Result<(AffineGrads, Tensor)> {
    let g_pm = unfold_grad(g, spec.out_channels, cache.out_h, cache.out_w, "conv_backward")?;
    let (grads, dpatches) = affine_backward(params, &cache.fcache, &g_pm)?;
    Ok((grads, scatter(&dpatches, &cache.provenance, &cache.in_shape)))
}

fn check_kernel(spec: &ConvSpec, params: &AffineParams) -> Result<()> {
    if params.in_dim() != spec.patch_len() || params.out_dim() != spec.out_channels {
        return Err(Error::shape("conv kernel", params.w.shape(), &[spec.out_channels, spec.patch_len()]));
    }
    Ok(())
}

/// Which per-patch correction PatchNorm applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchNormVariant {
    /// `t_p = 1/√(‖x̃_p‖²+1)` scaling `(Wx̃_p + b)`; never singular.
    AffineLike,
    /// `t_p = 1/‖x̃_p‖` scaling only `Wx̃_p`; bias unscaled.
    NormLike,
}

/// What the norm-like variant does on an all-zero receptive field, which is
/// structurally guaranteed at zero-padded borders of dark images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPatchPolicy {
    /// `t_p = 0`: the patch contributes only its bias, and nothing to the
    /// gradients. This matches the exact-zero-patch limit, where `Wx̃_p = 0`
    /// makes the scaled term vanish for any finite `t_p`.
    #[default]
    Clamp,
    /// Raise [`Error::ZeroPatchNorm`] instead.
    Strict,
}

/// Forward state for PatchNorm.
#[derive(Debug, Clone)]
pub struct PatchNormCache {
    conv: ConvCache,
    variant: PatchNormVariant,
}

/// Convolution with the per-patch correction applied; `t_p` is computed per
/// patch per sample, never pooled over the batch.
pub fn patchnorm_forward(
    spec: &ConvSpec,
    params: &AffineParams,
    x: &Tensor,
    variant: PatchNormVariant,
    policy: ZeroPatchPolicy,
) -> Result<(Tensor, PatchNormCache)> {
    let (h, w) = check_image(x, spec.in_channels, "patchnorm_forward")?;
    check_kernel(spec, params)?;
    let pm = unroll(x, spec)?;
    let fcache = match variant {
        PatchNormVariant::AffineLike => {
            let (_, fcache) = affine_like_forward(params, &pm.patches, &CorrectionConfig::default())?;
            fcache
        }
        PatchNormVariant::NormLike => norm_like_patches_forward(params, &pm.patches, policy)?,
    };
    let y = fold(&fcache.z, spec.out_channels, pm.out_h, pm.out_w);
    let cache = PatchNormCache {
        conv: ConvCache {
            fcache,
            provenance: pm.provenance,
            in_shape: [spec.in_channels, h, w],
            out_h: pm.out_h,
            out_w: pm.out_w,
        },
        variant,
    };
    Ok((y, cache))
}

pub fn patchnorm_backward(
    spec: &ConvSpec,
    params: &AffineParams,
    cache: &PatchNormCache,
    g: &Tensor,
) -> Result<(AffineGrads, Tensor)> {
    let conv = &cache.conv;
    let g_pm = unfold_grad(g, spec.out_channels, conv.out_h, conv.out_w, "patchnorm_backward")?;
    let (grads, dpatches) = match cache.variant {
        PatchNormVariant::AffineLike => {
            affine_like_backward(params, &conv.fcache, &g_pm, &CorrectionConfig::default())?
        }
        PatchNormVariant::NormLike => norm_like_patches_backward(params, &conv.fcache, &g_pm)?,
    };
    Ok((grads, scatter(&dpatches, &conv.provenance, &conv.in_shape)))
}

/// Norm-like map over patch rows with the zero-patch policy. The dense
/// norm-like layer raises on vanishing input; here zero patches are expected
/// and, under [`ZeroPatchPolicy::Clamp`], contribute the bias alone.
/// Cache convention: `s` holds the patch norm, 0 marking a clamped patch.
fn norm_like_patches_forward(
    params: &AffineParams,
    patches: &Tensor,
    policy: ZeroPatchPolicy,
) -> Result<ForwardCache> {
    let (p_len, out) = (patches.rows(), params.out_dim());
    let mut s = Tensor::zeros(&[p_len]);
    let mut data = Vec::with_capacity(p_len * out);
    for p in 0..p_len {
        let xr = patches.row(p);
        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r <= NORM_EPS {
            if policy == ZeroPatchPolicy::Strict {
                return Err(Error::ZeroPatchNorm { patch: p, norm: r });
            }
            for i in 0..out {
                data.push(params.b.data()[i]);
            }
        } else {
            s.data_mut()[p] = r;
            for i in 0..out {
                data.push(dot(params.w.row(i), xr) / r + params.b.data()[i]);
            }
        }
    }
    let z = Tensor::new(&[p_len, out], data)?;
    Ok(ForwardCache { x: patches.clone(), s, z })
}

/// Per live patch: `dW += g x̃̂ᵀ`, `db += g`,
/// `dX̃_n = (gW)_n/r − (g·(Wx̃̂)) x̃_n/r²`; clamped patches contribute only `db`.
fn norm_like_patches_backward(
    params: &AffineParams,
    fcache: &ForwardCache,
    g: &Tensor,
) -> Result<(AffineGrads, Tensor)> {
    if g.shape() != fcache.z.shape() {
        return Err(Error::shape("patchnorm_backward", g.shape(), fcache.z.shape()));
    }
    let (p_len, e_len) = (fcache.x.rows(), params.in_dim());
    let mut grads = AffineGrads::zeros_like(params);
    let mut dpatches = Tensor::zeros(fcache.x.shape());
    for p in 0..p_len {
        let gr = g.row(p);
        let r = fcache.s.data()[p];
        for (dbi, &gi) in grads.db.data_mut().iter_mut().zip(gr) {
            *dbi += gi;
        }
        if r == 0.0 {
            continue;
        }
        let xr = fcache.x.row(p);
        let zr = fcache.z.row(p);
        let mut g_dot_wxh = 0.0;
        for (i, &gi) in gr.iter().enumerate() {
            g_dot_wxh += gi * (zr[i] - params.b.data()[i]);
        }
        let dxr = &mut dpatches.data_mut()[p * e_len..(p + 1) * e_len];
        for (i, &gi) in gr.iter().enumerate() {
            axpy(&mut grads.dw.data_mut()[i * e_len..(i + 1) * e_len], gi / r, xr);
            axpy(dxr, gi / r, params.w.row(i));
        }
        axpy(dxr, -g_dot_wxh / (r * r), xr);
    }
    dpatches.ensure_finite("patchnorm_backward")?;
    grads.dw.ensure_finite("patchnorm_backward")?;
    Ok((grads, dpatches))
}

/// Per-channel spatial mean: `[C, H, W] → [C]`.
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::domain(
            "global_average_pool",
            format!("expected rank-3 input, got {:?}", x.shape()),
        ));
    }
    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut out = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mut acc = 0.0;
        for i in 0..hw {
            acc += x.data()[ci * hw + i];
        }
        out.data_mut()[ci] = acc / hw as f64;
    }
    Ok(out)
}

/// Spread the per-channel gradient evenly over the pooled pixels.
pub fn global_average_pool_backward(in_shape: &[usize; 3], g: &Tensor) -> Result<Tensor> {
    if g.rank() != 1 || g.len() != in_shape[0] {
        return Err(Error::domain(
            "global_average_pool_backward",
            format!("expected [{}] gradient, got {:?}", in_shape[0], g.shape()),
        ));
    }
    let hw = in_shape[1] * in_shape[2];
    let mut dx = Tensor::zeros(in_shape);
    for c in 0..in_shape[0] {
        let gv = g.data()[c] / hw as f64;
        for i in 0..hw {
            dx.data_mut()[c * hw + i] = gv;
        }
    }
    Ok(dx)
}

/// Parameterless BatchNorm for feature maps: each channel is standardised
/// over the joint (batch × spatial) set, with running statistics for
/// evaluation exactly as in [`crate::layers::BatchNorm`].
#[derive(Debug, Clone)]
pub struct ChannelBatchNorm {
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
}

/// Forward state for [`ChannelBatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct ChannelBatchNormCache {
    /// Output `[B, C, H, W]`.
    pub y: Tensor,
    /// Per-channel `√(var + ε)` `[C]`.
    pub s: Tensor,
}

fn check_maps(x: &Tensor, channels: usize, op: &'static str) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != channels {
        return Err(Error::domain(
            op,
            format!("expected [B, {channels}, H, W] input, got {:?}", x.shape()),
        ));
    }
    Ok(())
}

impl ChannelBatchNorm {
    pub fn new(channels: usize) -> ChannelBatchNorm {
        ChannelBatchNorm {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ChannelBatchNormCache)> {
        check_maps(x, self.channels(), "channel_batchnorm_forward")?;
        let (bsz, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let group = bsz * hw;
        if group < 2 {
            return Err(Error::Config("channel batchnorm needs batch×spatial >= 2".into()));
        }
        let mut y = Tensor::zeros(x.shape());
        let mut s = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mut mu = 0.0;
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    mu += x.data()[base + i];
                }
            }
            mu /= group as f64;
            let mut var = 0.0;
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    let d = x.data()[base + i] - mu;
                    var += d * d;
                }
            }
            var /= group as f64;
            let sc = (var + crate::layers::VAR_EPS).sqrt();
            s.data_mut()[ci] = sc;
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    y.data_mut()[base + i] = (x.data()[base + i] - mu) / sc;
                }
            }
            let m = self.momentum;
            self.running_mean.data_mut()[ci] = (1.0 - m) * self.running_mean.data()[ci] + m * mu;
            self.running_var.data_mut()[ci] = (1.0 - m) * self.running_var.data()[ci] + m * var;
        }
        y.ensure_finite("channel_batchnorm_forward")?;
        Ok((y.clone(), ChannelBatchNormCache { y, s }))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        check_maps(x, self.channels(), "channel_batchnorm_eval")?;
        let (bsz, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let mut y = Tensor::zeros(x.shape());
        for ci in 0..c {
            let mu = self.running_mean.data()[ci];
            let sc = (self.running_var.data()[ci] + crate::layers::VAR_EPS).sqrt();
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    y.data_mut()[base + i] = (x.data()[base + i] - mu) / sc;
                }
            }
        }
        y.ensure_finite("channel_batchnorm_eval")?;
        Ok(y)
    }

    /// `dX = (g − mean(g) − y·mean(g⊙y)) / s` per channel, means over the
    /// joint (batch × spatial) set.
    pub fn backward(&self, cache: &ChannelBatchNormCache, g: &Tensor) -> Result<Tensor> {
        if g.shape() != cache.y.shape() {
            return Err(Error::shape("channel_batchnorm_backward", g.shape(), cache.y.shape()));
        }
        let (bsz, c, hw) = (g.shape()[0], g.shape()[1], g.shape()[2] * g.shape()[3]);
        let group = (bsz * hw) as f64;
        let mut dx = Tensor::zeros(g.shape());
        for ci in 0..c {
            let sc = cache.s.data()[ci];
            let mut g_mean = 0.0;
            let mut gy_mean = 0.0;
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    g_mean += g.data()[base + i];
                    gy_mean += g.data()[base + i] * cache.y.data()[base + i];
                }
            }
            g_mean /= group;
            gy_mean /= group;
            for b in 0..bsz {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    dx.data_mut()[base + i] =
                        (g.data()[base + i] - g_mean - cache.y.data()[base + i] * gy_mean) / sc;
                }
            }
        }
        dx.ensure_finite("channel_batchnorm_backward")?;
        Ok(dx)
    }
}
