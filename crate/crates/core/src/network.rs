//! Sequential networks assembled from the layer zoo.
//!
//! All layers exchange flat `[B, dim]` matrices; convolutional layers carry
//! their own `[C, H, W]` input geometry and unflatten rows internally. This
//! keeps one training loop for dense stacks and the convolutional presets
//! alike.
//!
//! Assembly convention for dense stacks: a baseline normaliser, when
//! requested, precomposes every affine layer (including the first); the
//! structural corrections replace the affine layer itself; the activation
//! follows every layer except the last.

use crate::conv::{
    conv_backward, conv_forward, global_average_pool, global_average_pool_backward,
    patchnorm_backward, patchnorm_forward, ChannelBatchNorm, ChannelBatchNormCache, ConvCache,
    ConvSpec, PatchNormCache, PatchNormVariant, ZeroPatchPolicy,
};
use crate::error::{Error, Result};
use crate::layers::{
    l2_backward, l2_forward, layernorm_backward, layernorm_forward, rmsnorm_backward,
    rmsnorm_forward, ActCache, Activation, AffineGrads, AffineParams, BatchNorm, BatchNormCache,
    CorrectionConfig, DenseKind, DenseLayer, ForwardCache, LayerNormCache, RadialCache,
};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A convolution layer in the flat representation.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub params: AffineParams,
    /// Geometry each input row is unflattened to.
    pub in_shape: [usize; 3],
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, in_shape: [usize; 3], rng: &mut Rng) -> Result<ConvLayer> {
        spec.validate()?;
        if in_shape[0] != spec.in_channels {
            return Err(Error::Config(format!(
                "conv layer expects {} input channels, geometry says {}",
                spec.in_channels, in_shape[0]
            )));
        }
        let params = spec.init_params(rng);
        Ok(ConvLayer { spec, params, in_shape })
    }

    fn out_shape(&self) -> Result<[usize; 3]> {
        let (oh, ow) = self.spec.out_hw(self.in_shape[1], self.in_shape[2])?;
        Ok([self.spec.out_channels, oh, ow])
    }
}

/// A patch-normalised convolution layer in the flat representation.
#[derive(Debug, Clone)]
pub struct PatchNormLayer {
    pub spec: ConvSpec,
    pub params: AffineParams,
    pub variant: PatchNormVariant,
    pub policy: ZeroPatchPolicy,
    pub in_shape: [usize; 3],
    /// Per-layer step scaling, as in the dense corrections.
    pub lr_multiplier: f64,
}

impl PatchNormLayer {
    pub fn new(
        spec: ConvSpec,
        in_shape: [usize; 3],
        variant: PatchNormVariant,
        policy: ZeroPatchPolicy,
        rng: &mut Rng,
    ) -> Result<PatchNormLayer> {
        spec.validate()?;
        if in_shape[0] != spec.in_channels {
            return Err(Error::Config(format!(
                "patchnorm layer expects {} input channels, geometry says {}",
                spec.in_channels, in_shape[0]
            )));
        }
        Ok(PatchNormLayer {
            params: spec.init_params(rng),
            spec,
            variant,
            policy,
            in_shape,
            lr_multiplier: 1.0,
        })
    }

    fn out_shape(&self) -> Result<[usize; 3]> {
        let (oh, ow) = self.spec.out_hw(self.in_shape[1], self.in_shape[2])?;
        Ok([self.spec.out_channels, oh, ow])
    }
}

/// One layer of a sequential network.
#[derive(Debug, Clone)]
pub enum NetLayer {
    Dense(DenseLayer),
    BatchNorm(BatchNorm),
    LayerNorm,
    RmsNorm,
    L2Norm,
    Activation(Activation),
    Conv(ConvLayer),
    PatchNorm(PatchNormLayer),
    ChannelBatchNorm { norm: ChannelBatchNorm, in_shape: [usize; 3] },
    GlobalAvgPool { in_shape: [usize; 3] },
}

/// Per-layer forward state retained for the backward pass.
pub enum LayerCache {
    Dense(ForwardCache),
    BatchNorm(BatchNormCache),
    LayerNorm(LayerNormCache),
    Radial(RadialCache),
    Activation(ActCache),
    Conv(Vec<ConvCache>),
    PatchNorm(Vec<PatchNormCache>),
    ChannelBatchNorm(ChannelBatchNormCache),
    Pool,
}

/// Per-layer parameter gradients; parameterless layers carry `None`.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Affine(AffineGrads),
    None,
}

fn rows_to_images(x: &Tensor, shape: &[usize; 3], op: &'static str) -> Result<Vec<Tensor>> {
    let dim = shape[0] * shape[1] * shape[2];
    if x.rank() != 2 || x.cols() != dim {
        return Err(Error::domain(
            op,
            format!("expected [B, {dim}] rows for {shape:?} geometry, got {:?}", x.shape()),
        ));
    }
    (0..x.rows())
        .map(|b| Tensor::new(shape, x.row(b).to_vec()))
        .collect()
}

fn images_to_rows(images: &[Tensor]) -> Result<Tensor> {
    let dim = images[0].len();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), dim], data)
}

fn batched_images(x: &Tensor, shape: &[usize; 3], op: &'static str) -> Result<Tensor> {
    let dim = shape[0] * shape[1] * shape[2];
    if x.rank() != 2 || x.cols() != dim {
        return Err(Error::domain(
            op,
            format!("expected [B, {dim}] rows for {shape:?} geometry, got {:?}", x.shape()),
        ));
    }
    x.reshape(&[x.rows(), shape[0], shape[1], shape[2]])
}

impl NetLayer {
    pub fn name(&self) -> &'static str {
        match self {
            NetLayer::Dense(l) => l.kind.name(),
            NetLayer::BatchNorm(_) => "batchnorm",
            NetLayer::LayerNorm => "layernorm",
            NetLayer::RmsNorm => "rmsnorm",
            NetLayer::L2Norm => "l2norm",
            NetLayer::Activation(a) => a.name(),
            NetLayer::Conv(_) => "conv",
            NetLayer::PatchNorm(_) => "patchnorm",
            NetLayer::ChannelBatchNorm { .. } => "channel_batchnorm",
            NetLayer::GlobalAvgPool { .. } => "global_avg_pool",
        }
    }

    /// Step scaling this layer's parameters want relative to the global rate.
    pub fn lr_multiplier(&self) -> f64 {
        match self {
            NetLayer::Dense(l) => l.cfg.lr_multiplier,
            NetLayer::PatchNorm(l) => l.lr_multiplier,
            _ => 1.0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            NetLayer::Dense(l) => l.params.w.len() + l.params.b.len(),
            NetLayer::Conv(l) => l.params.w.len() + l.params.b.len(),
            NetLayer::PatchNorm(l) => l.params.w.len() + l.params.b.len(),
            _ => 0,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        match self {
            NetLayer::Dense(l) => {
                let (y, c) = l.forward(x)?;
                Ok((y, LayerCache::Dense(c)))
            }
            NetLayer::BatchNorm(n) => {
                let (y, c) = n.forward_train(x)?;
                Ok((y, LayerCache::BatchNorm(c)))
            }
            NetLayer::LayerNorm => {
                let (y, c) = layernorm_forward(x)?;
                Ok((y, LayerCache::LayerNorm(c)))
            }
            NetLayer::RmsNorm => {
                let (y, c) = rmsnorm_forward(x)?;
                Ok((y, LayerCache::Radial(c)))
            }
            NetLayer::L2Norm => {
                let (y, c) = l2_forward(x)?;
                Ok((y, LayerCache::Radial(c)))
            }
            NetLayer::Activation(a) => {
                let (y, c) = a.forward(x)?;
                Ok((y, LayerCache::Activation(c)))
            }
            NetLayer::Conv(l) => {
                let images = rows_to_images(x, &l.in_shape, "conv forward")?;
                let mut outs = Vec::with_capacity(images.len());
                let mut caches = Vec::with_capacity(images.len());
                for img in &images {
                    let (y, c) = conv_forward(&l.spec, &l.params, img)?;
                    outs.push(y);
                    caches.push(c);
                }
                Ok((images_to_rows(&outs)?, LayerCache::Conv(caches)))
            }
            NetLayer::PatchNorm(l) => {
                let images = rows_to_images(x, &l.in_shape, "patchnorm forward")?;
                let mut outs = Vec::with_capacity(images.len());
                let mut caches = Vec::with_capacity(images.len());
                for img in &images {
                    let (y, c) = patchnorm_forward(&l.spec, &l.params, img, l.variant, l.policy)?;
                    outs.push(y);
                    caches.push(c);
                }
                Ok((images_to_rows(&outs)?, LayerCache::PatchNorm(caches)))
            }
            NetLayer::ChannelBatchNorm { norm, in_shape } => {
                let batched = batched_images(x, in_shape, "channel batchnorm forward")?;
                let (y, c) = norm.forward_train(&batched)?;
                Ok((y.reshape(x.shape())?, LayerCache::ChannelBatchNorm(c)))
            }
            NetLayer::GlobalAvgPool { in_shape } => {
                let images = rows_to_images(x, in_shape, "global_avg_pool forward")?;
                let pooled: Vec<Tensor> =
                    images.iter().map(global_average_pool).collect::<Result<_>>()?;
                Ok((images_to_rows(&pooled)?, LayerCache::Pool))
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            NetLayer::Dense(l) => Ok(l.forward(x)?.0),
            NetLayer::BatchNorm(n) => n.forward_eval(x),
            NetLayer::LayerNorm => Ok(layernorm_forward(x)?.0),
            NetLayer::RmsNorm => Ok(rmsnorm_forward(x)?.0),
            NetLayer::L2Norm => Ok(l2_forward(x)?.0),
            NetLayer::Activation(a) => Ok(a.forward(x)?.0),
            NetLayer::Conv(l) => {
                let images = rows_to_images(x, &l.in_shape, "conv forward")?;
                let outs: Vec<Tensor> = images
                    .iter()
                    .map(|img| conv_forward(&l.spec, &l.params, img).map(|(y, _)| y))
                    .collect::<Result<_>>()?;
                images_to_rows(&outs)
            }
            NetLayer::PatchNorm(l) => {
                let images = rows_to_images(x, &l.in_shape, "patchnorm forward")?;
                let outs: Vec<Tensor> = images
                    .iter()
                    .map(|img| {
                        patchnorm_forward(&l.spec, &l.params, img, l.variant, l.policy)
                            .map(|(y, _)| y)
                    })
                    .collect::<Result<_>>()?;
                images_to_rows(&outs)
            }
            NetLayer::ChannelBatchNorm { norm, in_shape } => {
                let batched = batched_images(x, in_shape, "channel batchnorm forward")?;
                norm.forward_eval(&batched)?.reshape(x.shape())
            }
            NetLayer::GlobalAvgPool { in_shape } => {
                let images = rows_to_images(x, in_shape, "global_avg_pool forward")?;
                let pooled: Vec<Tensor> =
                    images.iter().map(global_average_pool).collect::<Result<_>>()?;
                images_to_rows(&pooled)
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache, g: &Tensor) -> Result<(LayerGrads, Tensor)> {
        match (self, cache) {
            (NetLayer::Dense(l), LayerCache::Dense(c)) => {
                let (grads, dx) = l.backward(c, g)?;
                Ok((LayerGrads::Affine(grads), dx))
            }
            (NetLayer::BatchNorm(n), LayerCache::BatchNorm(c)) => {
                Ok((LayerGrads::None, n.backward(c, g)?))
            }
            (NetLayer::LayerNorm, LayerCache::LayerNorm(c)) => {
                Ok((LayerGrads::None, layernorm_backward(c, g)?))
            }
            (NetLayer::RmsNorm, LayerCache::Radial(c)) => {
                Ok((LayerGrads::None, rmsnorm_backward(c, g)?))
            }
            (NetLayer::L2Norm, LayerCache::Radial(c)) => {
                Ok((LayerGrads::None, l2_backward(c, g)?))
            }
            (NetLayer::Activation(a), LayerCache::Activation(c)) => {
                Ok((LayerGrads::None, a.backward(c, g)?))
            }
            (NetLayer::Conv(l), LayerCache::Conv(caches)) => {
                let out_shape = l.out_shape()?;
                let g_images = rows_to_images(g, &out_shape, "conv backward")?;
                let mut grads = AffineGrads::zeros_like(&l.params);
                let mut dxs = Vec::with_capacity(g_images.len());
                for (gi, ci) in g_images.iter().zip(caches) {
                    let (gr, dx) = conv_backward(&l.spec, &l.params, ci, gi)?;
                    grads.dw = grads.dw.add(&gr.dw)?;
                    grads.db = grads.db.add(&gr.db)?;
                    dxs.push(dx);
                }
                Ok((LayerGrads::Affine(grads), images_to_rows(&dxs)?))
            }
            (NetLayer::PatchNorm(l), LayerCache::PatchNorm(caches)) => {
                let out_shape = l.out_shape()?;
                let g_images = rows_to_images(g, &out_shape, "patchnorm backward")?;
                let mut grads = AffineGrads::zeros_like(&l.params);
                let mut dxs = Vec::with_capacity(g_images.len());
                for (gi, ci) in g_images.iter().zip(caches) {
                    let (gr, dx) = patchnorm_backward(&l.spec, &l.params, ci, gi)?;
                    grads.dw = grads.dw.add(&gr.dw)?;
                    grads.db = grads.db.add(&gr.db)?;
                    dxs.push(dx);
                }
                Ok((LayerGrads::Affine(grads), images_to_rows(&dxs)?))
            }
            (NetLayer::ChannelBatchNorm { norm, in_shape }, LayerCache::ChannelBatchNorm(c)) => {
                let batched = batched_images(g, in_shape, "channel batchnorm backward")?;
                Ok((LayerGrads::None, norm.backward(c, &batched)?.reshape(g.shape())?))
            }
            (NetLayer::GlobalAvgPool { in_shape }, LayerCache::Pool) => {
                if g.rank() != 2 || g.cols() != in_shape[0] {
                    return Err(Error::domain(
                        "global_avg_pool backward",
                        format!("expected [B, {}] gradient, got {:?}", in_shape[0], g.shape()),
                    ));
                }
                let mut dxs = Vec::with_capacity(g.rows());
                for b in 0..g.rows() {
                    let gr = Tensor::vector(g.row(b));
                    dxs.push(global_average_pool_backward(in_shape, &gr)?);
                }
                Ok((LayerGrads::None, images_to_rows(&dxs)?))
            }
            _ => Err(Error::domain("NetLayer::backward", "cache does not match layer".to_string())),
        }
    }

    fn params_mut(&mut self) -> Option<&mut AffineParams> {
        match self {
            NetLayer::Dense(l) => Some(&mut l.params),
            NetLayer::Conv(l) => Some(&mut l.params),
            NetLayer::PatchNorm(l) => Some(&mut l.params),
            _ => None,
        }
    }

    fn params_ref(&self) -> Option<&AffineParams> {
        match self {
            NetLayer::Dense(l) => Some(&l.params),
            NetLayer::Conv(l) => Some(&l.params),
            NetLayer::PatchNorm(l) => Some(&l.params),
            _ => None,
        }
    }
}

/// A sequential network.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<NetLayer>,
}

impl Network {
    pub fn new(layers: Vec<NetLayer>) -> Network {
        Network { layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(NetLayer::parameter_count).sum()
    }

    /// Training-mode forward pass; returns the output and per-layer caches.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward_train(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    /// Evaluation-mode forward pass (running statistics, no caches).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_eval(&h)?;
        }
        Ok(h)
    }

    /// Backward pass from the output gradient; returns per-layer gradients
    /// (aligned with `layers`) and the input gradient.
    pub fn backward(&self, caches: &[LayerCache], g: &Tensor) -> Result<(Vec<LayerGrads>, Tensor)> {
        if caches.len() != self.layers.len() {
            return Err(Error::domain(
                "Network::backward",
                format!("{} caches for {} layers", caches.len(), self.layers.len()),
            ));
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut upstream = g.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (lg, dx) = layer.backward(cache, &upstream)?;
            grads[i] = lg;
            upstream = dx;
        }
        Ok((grads, upstream))
    }

    /// SGD settings with every parameterised layer's multiplier filled in.
    pub fn sgd_config(&self, eta: f64) -> Result<SgdConfig> {
        let mut cfg = SgdConfig::new(eta)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let m = layer.lr_multiplier();
            if m != 1.0 {
                cfg.per_layer_multiplier.insert(i, m);
            }
        }
        Ok(cfg)
    }

    /// One SGD step on every parameterised layer.
    pub fn sgd_step(&mut self, grads: &[LayerGrads], cfg: &SgdConfig) -> Result<()> {
        self.check_grads(grads)?;
        for (i, (layer, lg)) in self.layers.iter_mut().zip(grads).enumerate() {
            if let (Some(params), LayerGrads::Affine(g)) = (layer.params_mut(), lg) {
                sgd_step(params, g, cfg, i)?;
            }
        }
        Ok(())
    }

    /// Fresh Adam state per parameterised layer, aligned with `layers`.
    pub fn adam_states(&self) -> Vec<Option<AdamState>> {
        self.layers
            .iter()
            .map(|l| l.params_ref().map(AdamState::new))
            .collect()
    }

    /// One Adam step on every parameterised layer.
    pub fn adam_step(
        &mut self,
        grads: &[LayerGrads],
        states: &mut [Option<AdamState>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.check_grads(grads)?;
        if states.len() != self.layers.len() {
            return Err(Error::domain(
                "Network::adam_step",
                format!("{} states for {} layers", states.len(), self.layers.len()),
            ));
        }
        for (layer, (lg, state)) in self.layers.iter_mut().zip(grads.iter().zip(states)) {
            let mult = layer.lr_multiplier();
            if let (Some(params), LayerGrads::Affine(g), Some(s)) =
                (layer.params_mut(), lg, state.as_mut())
            {
                adam_step(s, params, g, cfg, mult)?;
            }
        }
        Ok(())
    }

    fn check_grads(&self, grads: &[LayerGrads]) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::domain(
                "Network::step",
                format!("{} gradient entries for {} layers", grads.len(), self.layers.len()),
            ));
        }
        Ok(())
    }
}

// --- assembly ------------------------------------------------------------

/// The normalisation/correction choices an experiment can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormaliserKind {
    /// Plain affine layers.
    None,
    /// Parameterless BatchNorm before every affine layer.
    Batchnorm,
    /// Parameterless LayerNorm before every affine layer.
    Layernorm,
    /// Parameterless RMSNorm before every affine layer.
    Rmsnorm,
    /// Norm-like corrected layers at the full rate.
    L2Full,
    /// Norm-like corrected layers at half rate.
    L2Half,
    /// Affine-like corrected layers.
    AffineCorrection,
    /// Patch-normalised convolutions, affine-like per patch (conv presets).
    PatchnormAffine,
    /// Patch-normalised convolutions, norm-like per patch (conv presets).
    PatchnormL2,
}

impl NormaliserKind {
    pub const ALL: [NormaliserKind; 9] = [
        NormaliserKind::None,
        NormaliserKind::Batchnorm,
        NormaliserKind::Layernorm,
        NormaliserKind::Rmsnorm,
        NormaliserKind::L2Full,
        NormaliserKind::L2Half,
        NormaliserKind::AffineCorrection,
        NormaliserKind::PatchnormAffine,
        NormaliserKind::PatchnormL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormaliserKind::None => "none",
            NormaliserKind::Batchnorm => "batchnorm",
            NormaliserKind::Layernorm => "layernorm",
            NormaliserKind::Rmsnorm => "rmsnorm",
            NormaliserKind::L2Full => "l2_full",
            NormaliserKind::L2Half => "l2_half",
            NormaliserKind::AffineCorrection => "affine_correction",
            NormaliserKind::PatchnormAffine => "patchnorm_affine",
            NormaliserKind::PatchnormL2 => "patchnorm_l2",
        }
    }

    pub fn parse(s: &str) -> Result<NormaliserKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown normaliser '{s}'; expected one of {}", names.join(", ")))
            })
    }
}

/// The activation choices an experiment can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Tanh,
    LeakyRelu,
    IsotropicTanh,
    None,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Tanh,
        ActivationKind::LeakyRelu,
        ActivationKind::IsotropicTanh,
        ActivationKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::IsotropicTanh => "isotropic_tanh",
            ActivationKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<ActivationKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown activation '{s}'; expected one of {}", names.join(", ")))
            })
    }

    fn activation(self) -> Activation {
        match self {
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::LeakyRelu => Activation::LeakyRelu,
            ActivationKind::IsotropicTanh => Activation::IsotropicTanh,
            ActivationKind::None => Activation::None,
        }
    }
}

/// Build a fully connected stack from a width list (`[in, hidden…, out]`).
pub fn build_dense_network(
    widths: &[usize],
    normaliser: NormaliserKind,
    activation: ActivationKind,
    rng: &mut Rng,
) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "a dense network needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Config(format!("layer widths must be positive, got {widths:?}")));
    }
    let dense_kind = |cfg| match normaliser {
        NormaliserKind::L2Full | NormaliserKind::L2Half => (DenseKind::NormLike, cfg),
        NormaliserKind::AffineCorrection => (DenseKind::AffineLike, cfg),
        _ => (DenseKind::Standard, cfg),
    };
    if matches!(normaliser, NormaliserKind::PatchnormAffine | NormaliserKind::PatchnormL2) {
        return Err(Error::Config(format!(
            "normaliser '{}' applies to the convolutional presets, not dense stacks",
            normaliser.name()
        )));
    }
    let mut layers = Vec::new();
    let pairs = widths.len() - 1;
    for i in 0..pairs {
        match normaliser {
            NormaliserKind::Batchnorm => layers.push(NetLayer::BatchNorm(BatchNorm::new(widths[i]))),
            NormaliserKind::Layernorm => layers.push(NetLayer::LayerNorm),
            NormaliserKind::Rmsnorm => layers.push(NetLayer::RmsNorm),
            _ => {}
        }
        let cfg = if normaliser == NormaliserKind::L2Half {
            CorrectionConfig::half_rate()
        } else {
            CorrectionConfig::default()
        };
        let (kind, cfg) = dense_kind(cfg);
        layers.push(NetLayer::Dense(DenseLayer::new(kind, widths[i], widths[i + 1], cfg, rng)?));
        if i + 1 < pairs {
            layers.push(NetLayer::Activation(activation.activation()));
        }
    }
    Ok(Network::new(layers))
}

/// The two convolutional presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPreset {
    /// Three stride-2 stages ending in global average pooling and a dense
    /// classifier.
    GapNet,
    /// Three stride-2 stages flattened straight into a dense classifier.
    ReduceNet,
}

impl ConvPreset {
    pub fn name(self) -> &'static str {
        match self {
            ConvPreset::GapNet => "gap-net",
            ConvPreset::ReduceNet => "reduce-net",
        }
    }

    pub fn parse(s: &str) -> Result<ConvPreset> {
        match s {
            "gap-net" => Ok(ConvPreset::GapNet),
            "reduce-net" => Ok(ConvPreset::ReduceNet),
            other => Err(Error::Config(format!(
                "unknown conv preset '{other}'; expected gap-net or reduce-net"
            ))),
        }
    }
}

fn conv_stage(
    layers: &mut Vec<NetLayer>,
    in_shape: [usize; 3],
    out_channels: usize,
    normaliser: NormaliserKind,
    rng: &mut Rng,
) -> Result<[usize; 3]> {
    let spec = ConvSpec {
        in_channels: in_shape[0],
        out_channels,
        kernel_h: 3,
        kernel_w: 3,
        stride: 2,
        padding: 1,
    };
    let out_shape = match normaliser {
        NormaliserKind::PatchnormAffine | NormaliserKind::PatchnormL2 => {
            let variant = if normaliser == NormaliserKind::PatchnormAffine {
                PatchNormVariant::AffineLike
            } else {
                PatchNormVariant::NormLike
            };
            let layer =
                PatchNormLayer::new(spec, in_shape, variant, ZeroPatchPolicy::Clamp, rng)?;
            let s = layer.out_shape()?;
            layers.push(NetLayer::PatchNorm(layer));
            s
        }
        NormaliserKind::None | NormaliserKind::Batchnorm => {
            if normaliser == NormaliserKind::Batchnorm {
                layers.push(NetLayer::ChannelBatchNorm {
                    norm: ChannelBatchNorm::new(in_shape[0]),
                    in_shape,
                });
            }
            let layer = ConvLayer::new(spec, in_shape, rng)?;
            let s = layer.out_shape()?;
            layers.push(NetLayer::Conv(layer));
            s
        }
        other => {
            return Err(Error::Config(format!(
                "normaliser '{}' is not available in the convolutional presets",
                other.name()
            )));
        }
    };
    Ok(out_shape)
}

/// Build a convolutional preset for `[3, 32, 32]` images.
pub fn build_conv_network(
    preset: ConvPreset,
    normaliser: NormaliserKind,
    activation: ActivationKind,
    classes: usize,
    rng: &mut Rng,
) -> Result<Network> {
    if classes == 0 {
        return Err(Error::Config("a classifier needs at least one class".into()));
    }
    let mut layers = Vec::new();
    let mut shape = [3usize, 32, 32];
    let channel_plan: [usize; 3] = match preset {
        ConvPreset::GapNet => [16, 32, 32],
        ConvPreset::ReduceNet => [8, 16, 16],
    };
    for out_channels in channel_plan {
        shape = conv_stage(&mut layers, shape, out_channels, normaliser, rng)?;
        layers.push(NetLayer::Activation(activation.activation()));
    }
    match preset {
        ConvPreset::GapNet => {
            layers.push(NetLayer::GlobalAvgPool { in_shape: shape });
            layers.push(NetLayer::Dense(DenseLayer::new(
                DenseKind::Standard,
                shape[0],
                classes,
                CorrectionConfig::default(),
                rng,
            )?));
        }
        ConvPreset::ReduceNet => {
            let flat = shape[0] * shape[1] * shape[2];
            layers.push(NetLayer::Dense(DenseLayer::new(
                DenseKind::Standard,
                flat,
                classes,
                CorrectionConfig::default(),
                rng,
            )?));
        }
    }
    Ok(Network::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_cross_entropy;

    fn loss_of(net: &mut Network, x: &Tensor, labels: &[usize]) -> f64 {
        let (logits, _) = net.forward_train(x).unwrap();
        softmax_cross_entropy(&logits, labels).unwrap().0
    }

    /// End-to-end finite-difference check of the chained backward pass: for
    /// each parameterised layer, perturb a few entries of W and b and compare
    /// against the analytic gradient of the cross-entropy loss.
    fn check_network_gradients(net: &Network, x: &Tensor, labels: &[usize], tol: f64) {
        let (logits, caches) = net.clone().forward_train(x).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, labels).unwrap();
        let (grads, _) = net.backward(&caches, &g).unwrap();
        let h = 1e-5;
        for (li, lg) in grads.iter().enumerate() {
            let LayerGrads::Affine(lg) = lg else { continue };
            let n_w = lg.dw.len();
            let probes: Vec<usize> = (0..n_w.min(5)).map(|k| k * (n_w / n_w.min(5)).max(1)).collect();
            for &pi in &probes {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.layers[li].params_mut().unwrap().w.data_mut()[pi] += h;
                minus.layers[li].params_mut().unwrap().w.data_mut()[pi] -= h;
                let fd = (loss_of(&mut plus, x, labels) - loss_of(&mut minus, x, labels)) / (2.0 * h);
                let an = lg.dw.data()[pi];
                assert!(
                    (fd - an).abs() / an.abs().max(1.0) < tol,
                    "layer {li} w[{pi}]: fd {fd} vs analytic {an}"
                );
            }
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.layers[li].params_mut().unwrap().b.data_mut()[0] += h;
            minus.layers[li].params_mut().unwrap().b.data_mut()[0] -= h;
            let fd = (loss_of(&mut plus, x, labels) - loss_of(&mut minus, x, labels)) / (2.0 * h);
            let an = lg.db.data()[0];
            assert!(
                (fd - an).abs() / an.abs().max(1.0) < tol,
                "layer {li} b[0]: fd {fd} vs analytic {an}"
            );
        }
    }

    fn batch(rng: &mut Rng, bsz: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::random_normal(&[bsz, dim], rng);
        let labels = (0..bsz).map(|i| i % classes).collect();
        (x, labels)
    }

    #[test]
    fn dense_stacks_have_correct_end_to_end_gradients() {
        let mut rng = Rng::new(41);
        let (x, labels) = batch(&mut rng, 4, 6, 3);
        for normaliser in [
            NormaliserKind::None,
            NormaliserKind::Batchnorm,
            NormaliserKind::Layernorm,
            NormaliserKind::Rmsnorm,
            NormaliserKind::L2Full,
            NormaliserKind::L2Half,
            NormaliserKind::AffineCorrection,
        ] {
            let net =
                build_dense_network(&[6, 5, 3], normaliser, ActivationKind::Tanh, &mut rng).unwrap();
            check_network_gradients(&net, &x, &labels, 1e-6);
        }
    }

    #[test]
    fn activations_chain_correctly() {
        let mut rng = Rng::new(42);
        let (x, labels) = batch(&mut rng, 3, 5, 2);
        for act in [ActivationKind::LeakyRelu, ActivationKind::IsotropicTanh, ActivationKind::None] {
            let net = build_dense_network(&[5, 4, 2], NormaliserKind::None, act, &mut rng).unwrap();
            check_network_gradients(&net, &x, &labels, 1e-5);
        }
    }

    #[test]
    fn conv_presets_have_correct_end_to_end_gradients() {
        let mut rng = Rng::new(43);
        let (x, labels) = batch(&mut rng, 2, 3 * 32 * 32, 4);
        for normaliser in [
            NormaliserKind::None,
            NormaliserKind::Batchnorm,
            NormaliserKind::PatchnormAffine,
            NormaliserKind::PatchnormL2,
        ] {
            let net =
                build_conv_network(ConvPreset::GapNet, normaliser, ActivationKind::Tanh, 4, &mut rng)
                    .unwrap();
            check_network_gradients(&net, &x, &labels, 1e-5);
        }
        let net = build_conv_network(
            ConvPreset::ReduceNet,
            NormaliserKind::None,
            ActivationKind::Tanh,
            4,
            &mut rng,
        )
        .unwrap();
        check_network_gradients(&net, &x, &labels, 1e-5);
    }

    #[test]
    fn assembly_matches_the_precomposition_convention() {
        let mut rng = Rng::new(44);
        let net = build_dense_network(
            &[8, 4, 2],
            NormaliserKind::Layernorm,
            ActivationKind::Tanh,
            &mut rng,
        )
        .unwrap();
        let names: Vec<&str> = net.layers.iter().map(NetLayer::name).collect();
        assert_eq!(names, vec!["layernorm", "standard", "tanh", "layernorm", "standard"]);

        let corrected = build_dense_network(
            &[8, 4, 2],
            NormaliserKind::L2Half,
            ActivationKind::Tanh,
            &mut rng,
        )
        .unwrap();
        let names: Vec<&str> = corrected.layers.iter().map(NetLayer::name).collect();
        assert_eq!(names, vec!["norm_like", "tanh", "norm_like"]);
        assert_eq!(corrected.layers[0].lr_multiplier(), 0.5);
        let cfg = corrected.sgd_config(0.1).unwrap();
        assert_eq!(cfg.multiplier(0), 0.5);
        assert_eq!(cfg.multiplier(1), 1.0);
    }

    #[test]
    fn builder_rejects_bad_configs() {
        let mut rng = Rng::new(45);
        assert!(build_dense_network(&[5], NormaliserKind::None, ActivationKind::Tanh, &mut rng)
            .is_err());
        assert!(build_dense_network(&[5, 0, 2], NormaliserKind::None, ActivationKind::Tanh, &mut rng)
            .is_err());
        assert!(build_dense_network(
            &[5, 4, 2],
            NormaliserKind::PatchnormAffine,
            ActivationKind::Tanh,
            &mut rng
        )
        .is_err());
        assert!(build_conv_network(
            ConvPreset::GapNet,
            NormaliserKind::Layernorm,
            ActivationKind::Tanh,
            10,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in NormaliserKind::ALL {
            assert_eq!(NormaliserKind::parse(k.name()).unwrap(), k);
        }
        for a in ActivationKind::ALL {
            assert_eq!(ActivationKind::parse(a.name()).unwrap(), a);
        }
        for p in [ConvPreset::GapNet, ConvPreset::ReduceNet] {
            assert_eq!(ConvPreset::parse(p.name()).unwrap(), p);
        }
        assert!(NormaliserKind::parse("l2").is_err());
    }

    #[test]
    fn sgd_training_reduces_loss_on_separable_data() {
        let mut rng = Rng::new(46);
        let mut net =
            build_dense_network(&[4, 8, 2], NormaliserKind::AffineCorrection, ActivationKind::Tanh, &mut rng)
                .unwrap();
        let n = 64;
        let mut x = Tensor::random_normal(&[n, 4], &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &lab) in labels.iter().enumerate() {
            let shift = if lab == 0 { 1.5 } else { -1.5 };
            for j in 0..4 {
                x.data_mut()[i * 4 + j] += shift;
            }
        }
        let cfg = net.sgd_config(0.05).unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let (logits, caches) = net.forward_train(&x).unwrap();
            let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
            let (grads, _) = net.backward(&caches, &g).unwrap();
            net.sgd_step(&grads, &cfg).unwrap();
        }
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn adam_training_reduces_loss() {
        let mut rng = Rng::new(47);
        let mut net =
            build_dense_network(&[3, 6, 2], NormaliserKind::None, ActivationKind::Tanh, &mut rng)
                .unwrap();
        let (x, labels) = batch(&mut rng, 32, 3, 2);
        let mut states = net.adam_states();
        let cfg = AdamConfig::default();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..40 {
            let (logits, caches) = net.forward_train(&x).unwrap();
            let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
            let (grads, _) = net.backward(&caches, &g).unwrap();
            net.adam_step(&grads, &mut states, &cfg).unwrap();
        }
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut rng = Rng::new(48);
        let mut net =
            build_dense_network(&[4, 3, 2], NormaliserKind::Batchnorm, ActivationKind::Tanh, &mut rng)
                .unwrap();
        let (x, _) = batch(&mut rng, 16, 4, 2);
        // Train-mode passes shift the running statistics toward the batch.
        for _ in 0..50 {
            net.forward_train(&x).unwrap();
        }
        // Eval accepts a single sample, which train mode must reject.
        let single = Tensor::random_normal(&[1, 4], &mut rng);
        assert!(net.forward_eval(&single).is_ok());
        assert!(net.clone().forward_train(&single).is_err());
    }

    #[test]
    fn identical_seeds_build_identical_networks() {
        let build = || {
            let mut rng = Rng::new(49);
            build_dense_network(&[5, 4, 3], NormaliserKind::None, ActivationKind::Tanh, &mut rng)
                .unwrap()
        };
        let (a, b) = (build(), build());
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            if let (Some(pa), Some(pb)) = (la.params_ref(), lb.params_ref()) {
                assert_eq!(pa.w.data(), pb.w.data());
                assert_eq!(pa.b.data(), pb.b.data());
            }
        }
    }

    #[test]
    fn gap_net_shapes_and_parameter_count() {
        let mut rng = Rng::new(50);
        let mut net = build_conv_network(
            ConvPreset::GapNet,
            NormaliserKind::PatchnormAffine,
            ActivationKind::Tanh,
            10,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::random_normal(&[2, 3 * 32 * 32], &mut rng);
        let (logits, _) = net.forward_train(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert_eq!(net.forward_eval(&x).unwrap().shape(), &[2, 10]);
        assert!(net.parameter_count() > 0);
    }
}
