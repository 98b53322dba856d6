//! Flat key=value configuration covering every tunable of the pipeline:
//! band-prior moments, luminance-curve initialization, residual-stack
//! shape, fusion widths, super-resolution scale, training hyperparameters,
//! and synthetic-data settings. Unknown keys are rejected so typos fail
//! loudly instead of silently training with defaults.

use crate::error::{DtpError, Result};

/// Every tunable, with the repository defaults. Field names mirror the
/// config keys one-to-one (`fsd.mu0` -> `fsd_mu0`, and so on).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // Band prior moments.
    pub fsd_mu0: f64,
    pub fsd_sigma0: f64,
    // Luminance curve initialization and residual stack shape.
    pub sdr_gamma_init: f64,
    pub sdr_sigma_init: f64,
    pub sdr_beta_init: f64,
    pub sdr_stages: usize,
    pub sdr_width: usize,
    // Fusion/decoder widths and the super-resolution scale.
    pub csr_width: usize,
    pub csr_spatial_kernel: usize,
    pub csr_reduction: usize,
    pub csr_scale: usize,
    // Training.
    pub train_lr: f64,
    pub train_steps: usize,
    pub train_lambda_rec: f64,
    pub train_lambda_kl: f64,
    pub train_patch: usize,
    pub train_batch: usize,
    pub train_seed: u64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_eps: f64,
    // Synthetic paired data.
    pub data_pairs: usize,
    pub data_holdout: usize,
    pub data_hr_size: usize,
    pub data_ev: f64,
    pub data_gamma: f64,
    pub data_noise: f64,
    pub data_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fsd_mu0: 0.35,
            fsd_sigma0: 0.25,
            sdr_gamma_init: 1.0,
            sdr_sigma_init: 0.3,
            sdr_beta_init: 0.05,
            sdr_stages: 4,
            sdr_width: 16,
            csr_width: 32,
            csr_spatial_kernel: 7,
            csr_reduction: 4,
            csr_scale: 2,
            train_lr: 1e-3,
            train_steps: 200,
            train_lambda_rec: 1.0,
            train_lambda_kl: 0.01,
            train_patch: 16,
            train_batch: 8,
            train_seed: 7,
            train_beta1: 0.9,
            train_beta2: 0.999,
            train_eps: 1e-8,
            data_pairs: 64,
            data_holdout: 16,
            data_hr_size: 32,
            data_ev: -2.5,
            data_gamma: 1.2,
            data_noise: 0.02,
            data_seed: 11,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        DtpError::Config(format!(
            "key `{key}`: cannot parse value `{raw}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

impl PipelineConfig {
    /// Parses `key = value` lines. Blank lines and lines starting with `#`
    /// are ignored; unknown and duplicate keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DtpError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(DtpError::Config(format!("duplicate key `{key}`")));
            }
            match key {
                "fsd.mu0" => cfg.fsd_mu0 = parse_num(key, value)?,
                "fsd.sigma0" => cfg.fsd_sigma0 = parse_num(key, value)?,
                "sdr.gamma_init" => cfg.sdr_gamma_init = parse_num(key, value)?,
                "sdr.sigma_init" => cfg.sdr_sigma_init = parse_num(key, value)?,
                "sdr.beta_init" => cfg.sdr_beta_init = parse_num(key, value)?,
                "sdr.stages" => cfg.sdr_stages = parse_num(key, value)?,
                "sdr.width" => cfg.sdr_width = parse_num(key, value)?,
                "csr.width" => cfg.csr_width = parse_num(key, value)?,
                "csr.spatial_kernel" => cfg.csr_spatial_kernel = parse_num(key, value)?,
                "csr.reduction" => cfg.csr_reduction = parse_num(key, value)?,
                "csr.scale" => cfg.csr_scale = parse_num(key, value)?,
                "train.lr" => cfg.train_lr = parse_num(key, value)?,
                "train.steps" => cfg.train_steps = parse_num(key, value)?,
                "train.lambda_rec" => cfg.train_lambda_rec = parse_num(key, value)?,
                "train.lambda_kl" => cfg.train_lambda_kl = parse_num(key, value)?,
                "train.patch" => cfg.train_patch = parse_num(key, value)?,
                "train.batch" => cfg.train_batch = parse_num(key, value)?,
                "train.seed" => cfg.train_seed = parse_num(key, value)?,
                "train.beta1" => cfg.train_beta1 = parse_num(key, value)?,
                "train.beta2" => cfg.train_beta2 = parse_num(key, value)?,
                "train.eps" => cfg.train_eps = parse_num(key, value)?,
                "data.pairs" => cfg.data_pairs = parse_num(key, value)?,
                "data.holdout" => cfg.data_holdout = parse_num(key, value)?,
                "data.hr_size" => cfg.data_hr_size = parse_num(key, value)?,
                "data.ev" => cfg.data_ev = parse_num(key, value)?,
                "data.gamma" => cfg.data_gamma = parse_num(key, value)?,
                "data.noise" => cfg.data_noise = parse_num(key, value)?,
                "data.seed" => cfg.data_seed = parse_num(key, value)?,
                other => {
                    return Err(DtpError::Config(format!("unknown config key `{other}`")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DtpError::Config(msg));
        if !(self.fsd_sigma0 > 0.0) || !self.fsd_sigma0.is_finite() || !self.fsd_mu0.is_finite() {
            return fail(format!(
                "band prior needs finite mu0 and positive sigma0, got {} / {}",
                self.fsd_mu0, self.fsd_sigma0
            ));
        }
        for (key, v) in [
            ("sdr.gamma_init", self.sdr_gamma_init),
            ("sdr.sigma_init", self.sdr_sigma_init),
            ("sdr.beta_init", self.sdr_beta_init),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{key} must be positive and finite, got {v}"));
            }
        }
        if self.sdr_stages == 0 || self.sdr_width == 0 {
            return fail("residual stack needs at least one stage and nonzero width".into());
        }
        if self.csr_width == 0
            || self.csr_reduction == 0
            || self.csr_width % self.csr_reduction != 0
        {
            return fail(format!(
                "csr.width {} must be a positive multiple of csr.reduction {}",
                self.csr_width, self.csr_reduction
            ));
        }
        if self.csr_spatial_kernel % 2 == 0 {
            return fail(format!(
                "csr.spatial_kernel must be odd, got {}",
                self.csr_spatial_kernel
            ));
        }
        if !matches!(self.csr_scale, 2 | 4) {
            return fail(format!(
                "csr.scale must be 2 or 4, got {}",
                self.csr_scale
            ));
        }
        if !(self.train_lambda_rec > 0.0) {
            return fail(format!(
                "train.lambda_rec must be positive, got {}",
                self.train_lambda_rec
            ));
        }
        if self.train_lambda_kl < 0.0 {
            return fail(format!(
                "train.lambda_kl must be nonnegative, got {}",
                self.train_lambda_kl
            ));
        }
        if !(self.train_lr >= 0.0) || !self.train_lr.is_finite() {
            return fail(format!("train.lr must be finite and >= 0, got {}", self.train_lr));
        }
        if self.train_batch == 0 {
            return fail("train.batch must be at least 1".into());
        }
        if self.train_patch < 4 || self.train_patch % 2 != 0 {
            return fail(format!(
                "train.patch must be an even size of at least 4, got {}",
                self.train_patch
            ));
        }
        if self.data_hr_size % self.csr_scale != 0 {
            return fail(format!(
                "data.hr_size {} must be divisible by csr.scale {}",
                self.data_hr_size, self.csr_scale
            ));
        }
        if self.train_patch > self.data_hr_size / self.csr_scale {
            return fail(format!(
                "train.patch {} exceeds the low-resolution size {}",
                self.train_patch,
                self.data_hr_size / self.csr_scale
            ));
        }
        if self.data_pairs == 0 || self.data_holdout == 0 {
            return fail("data.pairs and data.holdout must be at least 1".into());
        }
        if self.data_ev > 0.0 {
            return fail(format!(
                "data.ev is a log2 exposure reduction and must be <= 0, got {}",
                self.data_ev
            ));
        }
        if self.data_gamma < 1.0 {
            return fail(format!(
                "data.gamma must be >= 1 (darkening), got {}",
                self.data_gamma
            ));
        }
        if self.data_noise < 0.0 {
            return fail(format!("data.noise must be >= 0, got {}", self.data_noise));
        }
        Ok(())
    }

    /// The exposure multiplier implied by `data.ev` (photographic EV is
    /// log2 exposure, so -2.5 EV maps to 2^-2.5).
    pub fn exposure_factor(&self) -> f64 {
        self.data_ev.exp2()
    }
}
