//! End-to-end model assembly: frequency decomposition feeding the
//! luminance and texture branches, gated fusion, and the upsampling
//! decoder, together with parameter registration for every ablation
//! variant, the composite training loss, and checkpoint round-tripping.

use indexmap::IndexMap;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::csr::{self, DecoderConfig, FusionConfig};
use crate::error::{DtpError, Result};
use crate::fsd::{self, BandPrior};
use crate::numerics::{Graph, ParamBinding, ParamStore, Real, Tensor, ValueId};
use crate::sdr::{self, LuminanceInit, StackConfig};

/// Which of the three specialized stages are active. An inactive stage
/// keeps its parameters frozen at neutral values (fixed wavelet taps and
/// uniform band weights; identity luminance curve and zero denoiser;
/// uniform attention masks and an even gate) so every variant still maps
/// dark low-resolution inputs to bright high-resolution outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelVariant {
    pub fsd: bool,
    pub sdr: bool,
    pub csr: bool,
}

impl ModelVariant {
    pub const FULL: ModelVariant = ModelVariant {
        fsd: true,
        sdr: true,
        csr: true,
    };
    pub const BASELINE: ModelVariant = ModelVariant {
        fsd: false,
        sdr: false,
        csr: false,
    };

    /// The eight on/off combinations in report order: baseline, the three
    /// single-stage rows, the three pair rows, then the full model.
    pub fn table_rows() -> [ModelVariant; 8] {
        let v = |fsd, sdr, csr| ModelVariant { fsd, sdr, csr };
        [
            v(false, false, false),
            v(true, false, false),
            v(false, true, false),
            v(false, false, true),
            v(true, true, false),
            v(true, false, true),
            v(false, true, true),
            v(true, true, true),
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.fsd, self.sdr, self.csr) {
            (false, false, false) => "baseline",
            (true, false, false) => "fsd",
            (false, true, false) => "sdr",
            (false, false, true) => "csr",
            (true, true, false) => "fsd+sdr",
            (true, false, true) => "fsd+csr",
            (false, true, true) => "sdr+csr",
            (true, true, true) => "full",
        }
    }

    pub fn from_label(label: &str) -> Result<ModelVariant> {
        Self::table_rows()
            .into_iter()
            .find(|v| v.label() == label)
            .ok_or_else(|| {
                DtpError::InvalidArgument(format!("unknown model variant `{label}`"))
            })
    }
}

/// Channel count of the input image and of the luminance branch.
pub const IMAGE_CHANNELS: usize = 3;
/// The texture branch carries the three detail bands stacked channelwise.
pub const TEXTURE_CHANNELS: usize = 3 * IMAGE_CHANNELS;

/// Fully resolved model shape: every stage's structural configuration
/// plus the super-resolution scale and the active-stage selection.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub scale: usize,
    pub prior: BandPrior,
    pub luminance: LuminanceInit,
    pub stack: StackConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub variant: ModelVariant,
}

impl ModelConfig {
    pub fn from_pipeline(cfg: &PipelineConfig, variant: ModelVariant) -> Result<Self> {
        cfg.validate()?;
        let prior = BandPrior::new(cfg.fsd_mu0, cfg.fsd_sigma0)?;
        let luminance = LuminanceInit {
            gamma: cfg.sdr_gamma_init,
            sigma: cfg.sdr_sigma_init,
            beta: cfg.sdr_beta_init,
        };
        let stack = StackConfig {
            stages: cfg.sdr_stages,
            channels: TEXTURE_CHANNELS,
            width: cfg.sdr_width,
        };
        let fusion = FusionConfig {
            width: cfg.csr_width,
            lum_channels: IMAGE_CHANNELS,
            tex_channels: TEXTURE_CHANNELS,
            reduction: cfg.csr_reduction,
            spatial_kernel: cfg.csr_spatial_kernel,
        };
        // The decomposition halves resolution, so reaching scale x the
        // input size requires the decoder to expand by twice the scale.
        let decoder = DecoderConfig {
            width: cfg.csr_width,
            tex_channels: TEXTURE_CHANNELS,
            out_channels: IMAGE_CHANNELS,
            factor: 2 * cfg.csr_scale,
        };
        let model = ModelConfig {
            scale: cfg.csr_scale,
            prior,
            luminance,
            stack,
            fusion,
            decoder,
            variant,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(DtpError::InvalidArgument(format!(
                "super-resolution scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        self.stack.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.decoder.factor != 2 * self.scale {
            return Err(DtpError::InvalidArgument(format!(
                "decoder factor {} does not match twice the scale {}",
                self.decoder.factor, self.scale
            )));
        }
        Ok(())
    }
}

/// The assembled model: configuration plus the parameter store holding
/// every stage's weights with their learnable flags.
#[derive(Debug)]
pub struct DtpModel<F: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
}

/// Node handles for one forward pass, kept around so callers can extract
/// intermediate images (subbands, branch outputs) as well as the result.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    /// Subbands straight out of the decomposition (prior target).
    pub raw_bands: [ValueId; 4],
    /// Subbands after reweighting, as fed to the branches.
    pub weighted_bands: [ValueId; 4],
    pub luminance: ValueId,
    pub texture: ValueId,
    pub fused: ValueId,
    pub output: ValueId,
}

/// Loss node handles: the weighted total and its two parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: ValueId,
    pub reconstruction: ValueId,
    pub band_prior: ValueId,
    /// The prior weight actually applied (zero when the decomposition
    /// stage is inactive).
    pub applied_prior_weight: f64,
}

impl<F: Real> DtpModel<F> {
    /// Registers all parameters for the variant. Deterministic given the
    /// seed: the same call always produces bit-identical initial weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = cfg.variant;
        fsd::register_params(&mut store, v.fsd)?;
        sdr::register_luminance_params(&mut store, cfg.luminance, v.sdr)?;
        if v.sdr {
            sdr::register_stack_params(&mut store, &cfg.stack, &mut rng, true)?;
        } else {
            sdr::register_stack_params_zero(&mut store, &cfg.stack, false)?;
        }
        csr::register_projection_params(&mut store, &cfg.fusion, &mut rng, true)?;
        csr::register_attention_params(&mut store, &cfg.fusion, &mut rng, v.csr, !v.csr)?;
        csr::register_decoder_params(&mut store, &cfg.decoder, &mut rng, true)?;
        Ok(DtpModel { cfg, store })
    }

    /// Names of the parameters frozen under this variant.
    pub fn frozen_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| !p.learnable)
            .map(|(name, _)| name.to_string())
            .collect()
    }

    /// Builds the full forward pass on `graph`. The input must be an
    /// [H, W, 3] unit-interval image node; odd extents are edge-padded to
    /// even inside the decomposition, so outputs correspond to the padded
    /// size.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        binding: &ParamBinding,
        input: ValueId,
    ) -> Result<ForwardTrace> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != IMAGE_CHANNELS {
            return Err(DtpError::InvalidArgument(format!(
                "model input must be H x W x {IMAGE_CHANNELS}, got shape {shape:?}"
            )));
        }
        let raw = fsd::decompose(g, input, binding)?;
        let weighted = fsd::reweight(g, &raw, binding)?;
        let (lum_in, tex_in) = fsd::split(g, &weighted)?;
        let luminance = if self.cfg.variant.sdr {
            sdr::enhance_luminance(g, lum_in, binding)?
        } else {
            lum_in
        };
        let texture = sdr::denoise(g, tex_in, binding, &self.cfg.stack)?;
        let fused = csr::gated_fuse(g, luminance, texture, binding)?;
        let output = csr::rebuild_upsample(g, fused, texture, binding, &self.cfg.decoder)?;
        Ok(ForwardTrace {
            raw_bands: raw.ids(),
            weighted_bands: weighted.ids(),
            luminance,
            texture,
            fused,
            output,
        })
    }

    /// Composite objective: `lambda_rec * mean|output - target| +
    /// lambda_kl * band_prior(raw low-frequency band)`. The prior weight
    /// drops to zero when the decomposition stage is inactive.
    pub fn training_loss(
        &self,
        g: &mut Graph<F>,
        binding: &ParamBinding,
        input: ValueId,
        target: ValueId,
        lambda_rec: f64,
        lambda_kl: f64,
    ) -> Result<(ForwardTrace, LossTerms)> {
        let trace = self.forward(g, binding, input)?;
        if g.shape(trace.output) != g.shape(target) {
            return Err(DtpError::shape(
                "prediction vs target",
                g.shape(trace.output),
                g.shape(target),
            ));
        }
        let diff = g.sub(trace.output, target)?;
        let abs = g.abs(diff)?;
        let reconstruction = g.mean(abs)?;
        let band_prior = fsd::band_prior_loss(g, trace.raw_bands[0], &self.cfg.prior)?;
        let applied = if self.cfg.variant.fsd { lambda_kl } else { 0.0 };
        let rec_part = g.scale(reconstruction, lambda_rec)?;
        let prior_part = g.scale(band_prior, applied)?;
        let total = g.add(rec_part, prior_part)?;
        Ok((
            trace,
            LossTerms {
                total,
                reconstruction,
                band_prior,
                applied_prior_weight: applied,
            },
        ))
    }

    /// Runs inference on one image and extracts the output plus the
    /// intermediate images useful for inspection.
    pub fn run(&self, input: &Tensor<F>) -> Result<ForwardImages<F>> {
        let mut g = Graph::new();
        let binding = self.store.bind(&mut g)?;
        let id = g.leaf(input.clone())?;
        let trace = self.forward(&mut g, &binding, id)?;
        Ok(ForwardImages {
            output: g.value(trace.output).clone(),
            raw_bands: trace.raw_bands.map(|b| g.value(b).clone()),
            luminance: g.value(trace.luminance).clone(),
            texture: g.value(trace.texture).clone(),
        })
    }

    /// Checkpoint metadata describing this model's shape, sufficient to
    /// rebuild the configuration on load.
    pub fn checkpoint_meta(&self) -> IndexMap<String, String> {
        let mut meta = IndexMap::new();
        let c = &self.cfg;
        meta.insert("variant".into(), c.variant.label().to_string());
        meta.insert("scale".into(), c.scale.to_string());
        meta.insert("fsd.mu0".into(), c.prior.mu0().to_string());
        meta.insert("fsd.sigma0".into(), c.prior.sigma0().to_string());
        meta.insert("sdr.gamma_init".into(), c.luminance.gamma.to_string());
        meta.insert("sdr.sigma_init".into(), c.luminance.sigma.to_string());
        meta.insert("sdr.beta_init".into(), c.luminance.beta.to_string());
        meta.insert("sdr.stages".into(), c.stack.stages.to_string());
        meta.insert("sdr.width".into(), c.stack.width.to_string());
        meta.insert("csr.width".into(), c.fusion.width.to_string());
        meta.insert("csr.reduction".into(), c.fusion.reduction.to_string());
        meta.insert(
            "csr.spatial_kernel".into(),
            c.fusion.spatial_kernel.to_string(),
        );
        meta
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save_checkpoint(path, &self.checkpoint_meta())
    }

    /// Restores a model from a checkpoint, rebuilding the configuration
    /// from the stored metadata and keeping the stored learnable flags.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = ParamStore::<F>::load_checkpoint(path)?;
        let get = |key: &str| -> Result<&String> {
            ckpt.meta.get(key).ok_or_else(|| {
                DtpError::Checkpoint(format!("missing metadata key `{key}`"))
            })
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| {
                DtpError::Checkpoint(format!("metadata key `{key}` is not a number"))
            })
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| {
                DtpError::Checkpoint(format!("metadata key `{key}` is not an integer"))
            })
        };
        let variant = ModelVariant::from_label(get("variant")?)?;
        let scale = int("scale")?;
        let cfg = ModelConfig {
            scale,
            prior: BandPrior::new(num("fsd.mu0")?, num("fsd.sigma0")?)?,
            luminance: LuminanceInit {
                gamma: num("sdr.gamma_init")?,
                sigma: num("sdr.sigma_init")?,
                beta: num("sdr.beta_init")?,
            },
            stack: StackConfig {
                stages: int("sdr.stages")?,
                channels: TEXTURE_CHANNELS,
                width: int("sdr.width")?,
            },
            fusion: FusionConfig {
                width: int("csr.width")?,
                lum_channels: IMAGE_CHANNELS,
                tex_channels: TEXTURE_CHANNELS,
                reduction: int("csr.reduction")?,
                spatial_kernel: int("csr.spatial_kernel")?,
            },
            decoder: DecoderConfig {
                width: int("csr.width")?,
                tex_channels: TEXTURE_CHANNELS,
                out_channels: IMAGE_CHANNELS,
                factor: 2 * scale,
            },
            variant,
        };
        cfg.validate()?;
        Ok(DtpModel {
            cfg,
            store: ckpt.store,
        })
    }
}

/// Concrete tensors extracted from one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardImages<F: Real> {
    pub output: Tensor<F>,
    /// Decomposition subbands in low/low, low/high, high/low, high/high
    /// order, at half the input resolution.
    pub raw_bands: [Tensor<F>; 4],
    /// Luminance branch output (enhanced low-frequency band).
    pub luminance: Tensor<F>,
    /// Texture branch output (denoised detail bands, stacked channelwise).
    pub texture: Tensor<F>,
}
