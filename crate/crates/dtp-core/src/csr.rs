//! Cross-branch recomposition: entry projections into a shared fusion
//! width, channel and spatial attention over the joint features, a learnable
//! scalar gate blending the two attention views, and the rebuild/upsample
//! decoder that produces the final high-resolution image.
//!
//! Attention granularity is the minimal standard realization: channel
//! attention from a global average descriptor through a bottleneck, spatial
//! attention from mean/max channel pooling through one wide conv, and a
//! single sigmoid gate computed from pooled descriptors of both branches.

use rand::Rng;

use crate::error::{DtpError, Result};
use crate::numerics::{Graph, Padding, ParamBinding, ParamStore, Real, Tensor, ValueId};
use crate::sdr::LEAKY_SLOPE;

pub const PROJ_LUM: &str = "csr.proj_lum";
pub const PROJ_TEX: &str = "csr.proj_tex";
pub const SHARED: &str = "csr.shared";
pub const CA_REDUCE: &str = "csr.ca.reduce";
pub const CA_EXPAND: &str = "csr.ca.expand";
pub const SA_CONV: &str = "csr.sa.conv";
pub const GATE_WEIGHT: &str = "csr.gate.weight";
pub const GATE_BIAS: &str = "csr.gate.bias";

pub const DEC_TEX_ENTRY: &str = "dec.tex_entry";
pub const DEC_MIX: &str = "dec.mix";
pub const DEC_REFINE_CONV1: &str = "dec.refine.conv1";
pub const DEC_REFINE_CONV2: &str = "dec.refine.conv2";
pub const DEC_OUT: &str = "dec.out";
pub const DEC_OUT_BIAS: &str = "dec.out_bias";

pub fn dec_up(stage: usize) -> String {
    format!("dec.up.{stage}")
}

/// The attention/gate parameter names — the set frozen at zero when the
/// recomposition stage is ablated (projections stay live so features still
/// flow; zero logits give uniform 0.5 masks and a 0.5 gate).
pub const ATTENTION_PARAMS: [&str; 5] = [CA_REDUCE, CA_EXPAND, SA_CONV, GATE_WEIGHT, GATE_BIAS];

/// Fusion-stage shape configuration.
#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    /// Shared fusion width both branches are projected to.
    pub width: usize,
    /// Channels of the luminance branch input.
    pub lum_channels: usize,
    /// Channels of the texture branch input.
    pub tex_channels: usize,
    /// Channel-attention bottleneck reduction factor.
    pub reduction: usize,
    /// Spatial-attention kernel size (odd).
    pub spatial_kernel: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 32,
            lum_channels: 3,
            tex_channels: 9,
            reduction: 4,
            spatial_kernel: 7,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.lum_channels == 0 || self.tex_channels == 0 {
            return Err(DtpError::InvalidArgument(format!(
                "fusion config requires nonzero widths, got {self:?}"
            )));
        }
        if self.reduction == 0 || self.width % self.reduction != 0 {
            return Err(DtpError::InvalidArgument(format!(
                "fusion width {} must be divisible by reduction {}",
                self.width, self.reduction
            )));
        }
        if self.spatial_kernel % 2 == 0 || self.spatial_kernel == 0 {
            return Err(DtpError::InvalidArgument(format!(
                "spatial attention kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

fn rand_kernel<F: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    let fan_in: usize = shape[..3].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64(rng.gen_range(-bound..bound)))
}

/// Registers the entry projections and the shared mixing conv. These stay
/// learnable in every ablation variant — without them no features flow.
pub fn register_projection_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &FusionConfig,
    rng: &mut impl Rng,
    learnable: bool,
) -> Result<()> {
    cfg.validate()?;
    store.insert(
        PROJ_LUM,
        rand_kernel(rng, &[1, 1, cfg.lum_channels, cfg.width]),
        learnable,
    )?;
    store.insert(
        PROJ_TEX,
        rand_kernel(rng, &[1, 1, cfg.tex_channels, cfg.width]),
        learnable,
    )?;
    store.insert(
        SHARED,
        rand_kernel(rng, &[1, 1, 2 * cfg.width, cfg.width]),
        learnable,
    )?;
    Ok(())
}

/// Registers attention and gate weights. With `zero` they start (and, if
/// frozen, stay) at zero: sigmoid(0) = 0.5 gives uniform masks and an even
/// gate through the exact same code path.
pub fn register_attention_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &FusionConfig,
    rng: &mut impl Rng,
    learnable: bool,
    zero: bool,
) -> Result<()> {
    cfg.validate()?;
    let hidden = cfg.width / cfg.reduction;
    let k = cfg.spatial_kernel;
    let mut make: Box<dyn FnMut(&[usize]) -> Tensor<F> + '_> = if zero {
        Box::new(|shape: &[usize]| Tensor::zeros(shape))
    } else {
        Box::new(move |shape: &[usize]| rand_kernel(rng, shape))
    };
    store.insert(CA_REDUCE, make(&[1, 1, cfg.width, hidden]), learnable)?;
    store.insert(CA_EXPAND, make(&[1, 1, hidden, cfg.width]), learnable)?;
    store.insert(SA_CONV, make(&[k, k, 2, 1]), learnable)?;
    store.insert(GATE_WEIGHT, make(&[1, 1, 2 * cfg.width, 1]), learnable)?;
    store.insert(GATE_BIAS, Tensor::zeros(&[1]), learnable)?;
    Ok(())
}

/// Decoder configuration. `factor` is the decoder's literal spatial
/// expansion, realized as a cascade of x2 channel-to-space stages.
#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub width: usize,
    pub tex_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 32,
            tex_channels: 9,
            out_channels: 3,
            factor: 4,
        }
    }
}

impl DecoderConfig {
    pub fn stages(&self) -> Result<usize> {
        match self.factor {
            2 => Ok(1),
            4 => Ok(2),
            8 => Ok(3),
            other => Err(DtpError::InvalidArgument(format!(
                "unsupported upsampling factor {other} (expected 2, 4, or 8)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.tex_channels == 0 || self.out_channels == 0 {
            return Err(DtpError::InvalidArgument(format!(
                "decoder config requires nonzero widths, got {self:?}"
            )));
        }
        self.stages().map(|_| ())
    }
}

/// Registers decoder weights: texture entry projection, feature mixing,
/// one refinement residual block (exit conv zero, so the block starts as
/// identity), the upsampling cascade, and the output projection with its
/// bias at mid-gray so early outputs sit inside the clamp interval.
pub fn register_decoder_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &DecoderConfig,
    rng: &mut impl Rng,
    learnable: bool,
) -> Result<()> {
    cfg.validate()?;
    let w = cfg.width;
    store.insert(DEC_TEX_ENTRY, rand_kernel(rng, &[1, 1, cfg.tex_channels, w]), learnable)?;
    store.insert(DEC_MIX, rand_kernel(rng, &[3, 3, w, w]), learnable)?;
    store.insert(DEC_REFINE_CONV1, rand_kernel(rng, &[3, 3, w, w]), learnable)?;
    store.insert(DEC_REFINE_CONV2, Tensor::zeros(&[3, 3, w, w]), learnable)?;
    for i in 0..cfg.stages()? {
        store.insert(&dec_up(i), rand_kernel(rng, &[3, 3, w, 4 * w]), learnable)?;
    }
    store.insert(DEC_OUT, rand_kernel(rng, &[3, 3, w, cfg.out_channels]), learnable)?;
    store.insert(
        DEC_OUT_BIAS,
        Tensor::filled(&[cfg.out_channels], F::from_f64(0.5)),
        learnable,
    )?;
    Ok(())
}

/// Both branches projected to the fusion width plus their joint feature.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedPair {
    pub lum: ValueId,
    pub tex: ValueId,
    pub shared: ValueId,
}

/// Projects the enhanced-luminance and denoised-texture branches to the
/// common fusion width and mixes them into one shared feature tensor.
pub fn project_features<F: Real>(
    g: &mut Graph<F>,
    lum: ValueId,
    tex: ValueId,
    binding: &ParamBinding,
) -> Result<ProjectedPair> {
    let (lh, lw) = {
        let (_, h, w, _) = g.value(lum).nhwc()?;
        (h, w)
    };
    let (th, tw) = {
        let (_, h, w, _) = g.value(tex).nhwc()?;
        (h, w)
    };
    if (lh, lw) != (th, tw) {
        return Err(DtpError::shape(
            "fusion branch spatial extents",
            g.shape(lum),
            g.shape(tex),
        ));
    }
    let proj_lum = binding.get(PROJ_LUM)?;
    let proj_tex = binding.get(PROJ_TEX)?;
    let shared_w = binding.get(SHARED)?;
    let lum_p = g.conv2d(lum, proj_lum, 1, Padding::Same)?;
    let tex_p = g.conv2d(tex, proj_tex, 1, Padding::Same)?;
    let cat = g.concat_channels(&[lum_p, tex_p])?;
    let mixed = g.conv2d(cat, shared_w, 1, Padding::Same)?;
    let shared = g.leaky_relu(mixed, LEAKY_SLOPE)?;
    Ok(ProjectedPair {
        lum: lum_p,
        tex: tex_p,
        shared,
    })
}

fn channel_mask<F: Real>(
    g: &mut Graph<F>,
    shared: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let reduce = binding.get(CA_REDUCE)?;
    let expand = binding.get(CA_EXPAND)?;
    let channels = *g.shape(shared).last().unwrap();
    let gap = g.channel_mean(shared)?;
    let gap_map = g.reshape(gap, vec![1, 1, channels])?;
    let hidden = g.conv2d(gap_map, reduce, 1, Padding::Same)?;
    let activated = g.leaky_relu(hidden, LEAKY_SLOPE)?;
    let logits = g.conv2d(activated, expand, 1, Padding::Same)?;
    g.sigmoid(logits)
}

fn spatial_mask<F: Real>(
    g: &mut Graph<F>,
    shared: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let conv = binding.get(SA_CONV)?;
    let mean_map = g.channel_pool_mean(shared)?;
    let max_map = g.channel_pool_max(shared)?;
    let pooled = g.concat_channels(&[mean_map, max_map])?;
    let logits = g.conv2d(pooled, conv, 1, Padding::Same)?;
    g.sigmoid(logits)
}

fn gate_value<F: Real>(
    g: &mut Graph<F>,
    pair: &ProjectedPair,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let weight = binding.get(GATE_WEIGHT)?;
    let bias = binding.get(GATE_BIAS)?;
    let lum_desc = g.channel_mean(pair.lum)?;
    let tex_desc = g.channel_mean(pair.tex)?;
    let desc = g.concat_channels(&[lum_desc, tex_desc])?;
    let len = g.value(desc).len();
    let desc_map = g.reshape(desc, vec![1, 1, len])?;
    let logit = g.conv2d(desc_map, weight, 1, Padding::Same)?;
    let shifted = g.add_b(logit, bias)?;
    g.sigmoid(shifted)
}

/// Channel attention: the shared feature scaled by a per-channel sigmoid
/// mask derived from its global average descriptor.
pub fn channel_attention<F: Real>(
    g: &mut Graph<F>,
    lum: ValueId,
    tex: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let pair = project_features(g, lum, tex, binding)?;
    let mask = channel_mask(g, pair.shared, binding)?;
    g.mul_b(pair.shared, mask)
}

/// Spatial attention: the shared feature scaled by a per-pixel sigmoid mask
/// derived from channel mean/max pooling through one wide conv.
pub fn spatial_attention<F: Real>(
    g: &mut Graph<F>,
    lum: ValueId,
    tex: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let pair = project_features(g, lum, tex, binding)?;
    let mask = spatial_mask(g, pair.shared, binding)?;
    g.mul_b(pair.shared, mask)
}

/// Gated fusion: `F = G * CA + (1 - G) * SA` with a scalar sigmoid gate
/// computed from pooled descriptors of both projected branches. The result
/// is elementwise between the two attention views.
pub fn gated_fuse<F: Real>(
    g: &mut Graph<F>,
    lum: ValueId,
    tex: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let pair = project_features(g, lum, tex, binding)?;
    let ca_mask = channel_mask(g, pair.shared, binding)?;
    let ca = g.mul_b(pair.shared, ca_mask)?;
    let sa_mask = spatial_mask(g, pair.shared, binding)?;
    let sa = g.mul_b(pair.shared, sa_mask)?;
    let gate = gate_value(g, &pair, binding)?;
    let neg_gate = g.neg(gate)?;
    let inv_gate = g.offset(neg_gate, 1.0)?;
    let ca_part = g.mul_b(ca, gate)?;
    let sa_part = g.mul_b(sa, inv_gate)?;
    g.add(ca_part, sa_part)
}

/// Decoder: adds the projected texture residual onto the fused features,
/// mixes, refines through one residual block, expands channels and
/// rearranges them to space (x2 per stage), projects to the output
/// channels, and clamps to the unit interval.
pub fn rebuild_upsample<F: Real>(
    g: &mut Graph<F>,
    fused: ValueId,
    tex: ValueId,
    binding: &ParamBinding,
    cfg: &DecoderConfig,
) -> Result<ValueId> {
    let stages = cfg.stages()?;
    let tex_entry = binding.get(DEC_TEX_ENTRY)?;
    let tex_p = g.conv2d(tex, tex_entry, 1, Padding::Same)?;
    let summed = g.add(fused, tex_p)?;

    let mix_w = binding.get(DEC_MIX)?;
    let mixed = g.conv2d(summed, mix_w, 1, Padding::Same)?;
    let mut x = g.leaky_relu(mixed, LEAKY_SLOPE)?;

    let r1 = binding.get(DEC_REFINE_CONV1)?;
    let r2 = binding.get(DEC_REFINE_CONV2)?;
    let h = g.conv2d(x, r1, 1, Padding::Same)?;
    let ha = g.leaky_relu(h, LEAKY_SLOPE)?;
    let update = g.conv2d(ha, r2, 1, Padding::Same)?;
    x = g.add(x, update)?;

    for i in 0..stages {
        let up = binding.get(&dec_up(i))?;
        let expanded = g.conv2d(x, up, 1, Padding::Same)?;
        let shuffled = g.pixel_shuffle(expanded, 2)?;
        x = g.leaky_relu(shuffled, LEAKY_SLOPE)?;
    }

    let out_w = binding.get(DEC_OUT)?;
    let out_b = binding.get(DEC_OUT_BIAS)?;
    let projected = g.conv2d(x, out_w, 1, Padding::Same)?;
    let biased = g.add_b(projected, out_b)?;
    g.clamp(biased, 0.0, 1.0)
}
