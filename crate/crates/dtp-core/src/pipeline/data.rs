//! Synthetic paired-data generation: a deterministic high-resolution
//! content generator (smooth fields plus soft-edged shapes, so there is
//! real structure to super-resolve) and the low-light degradation that
//! produces the dark low-resolution counterpart of each image.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DtpError, Result};
use crate::numerics::Tensor;

/// Parameters of the degradation that turns a clean high-resolution image
/// into its dark low-resolution partner:
/// `lr = clamp(box_downsample(hr, scale)^gamma * exposure + noise)`.
/// Deterministic given `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    /// Multiplicative exposure reduction in (0, 1].
    pub exposure: f64,
    /// Darkening exponent applied to unit-interval values, >= 1.
    pub gamma: f64,
    /// Standard deviation of additive Gaussian noise in the darkened
    /// domain, >= 0.
    pub noise: f64,
    /// Box-downsampling factor.
    pub scale: usize,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(DtpError::InvalidArgument(format!(
                "exposure must lie in (0, 1], got {}",
                self.exposure
            )));
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(DtpError::InvalidArgument(format!(
                "darkening exponent must be >= 1, got {}",
                self.gamma
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DtpError::InvalidArgument(format!(
                "noise std must be >= 0, got {}",
                self.noise
            )));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(DtpError::InvalidArgument(format!(
                "downsampling factor must be 2 or 4, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Exact block-mean downsampling. Spatial dims must be divisible by the
/// factor.
pub fn box_downsample(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(DtpError::InvalidArgument(format!(
                "box downsampling expects a rank-3 image, got shape {other:?}"
            )))
        }
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(DtpError::InvalidArgument(format!(
            "image {h}x{w} is not divisible by downsampling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let norm = 1.0 / (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.data()[(((oy * factor + dy) * w) + ox * factor + dx) * c + ch]
                            as f64;
                    }
                }
                out.data_mut()[(oy * ow + ox) * c + ch] = (acc * norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Applies the full degradation. The noise draw is a pure function of the
/// spec's seed.
pub fn degrade(hr: &Tensor<f32>, spec: &DegradationSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let down = box_downsample(hr, spec.scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| DtpError::InvalidArgument(format!("noise distribution: {e}")))?;
    let mut out = down;
    for v in out.data_mut() {
        let mut x = *v as f64;
        if spec.gamma != 1.0 {
            x = x.max(0.0).powf(spec.gamma);
        }
        x *= spec.exposure;
        if spec.noise > 0.0 {
            x += normal.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// One training/evaluation example: the degraded dark input and its clean
/// high-resolution target.
#[derive(Debug, Clone)]
pub struct Pair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

/// Deterministic synthetic high-resolution content: a few low-frequency
/// cosine waves, Gaussian blobs, and one soft-edged rectangle, tinted per
/// channel. Values land in [0, 1] with both smooth regions and edges.
pub fn synthesize_hr(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = size as f64;
    let mut waves = Vec::new();
    for _ in 0..4 {
        waves.push((
            rng.gen_range(0.5..3.5),
            rng.gen_range(0.5..3.5),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.08..0.22),
        ));
    }
    let mut blobs = Vec::new();
    for _ in 0..3 {
        blobs.push((
            rng.gen_range(0.0..n),
            rng.gen_range(0.0..n),
            rng.gen_range(n / 12.0..n / 4.0),
            rng.gen_range(-0.4..0.4),
        ));
    }
    let rect = (
        rng.gen_range(0.1 * n..0.5 * n),
        rng.gen_range(0.1 * n..0.5 * n),
        rng.gen_range(0.2 * n..0.45 * n),
        rng.gen_range(0.2 * n..0.45 * n),
        if rng.gen_bool(0.5) { 0.3 } else { -0.3 },
    );
    let tint: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.75..1.0), rng.gen_range(-0.05..0.05)))
        .collect();

    let soft_step = |d: f64| 1.0 / (1.0 + (-d * 2.0).exp());
    Tensor::from_fn(&[size, size, 3], |i| {
        let ch = i % 3;
        let px = i / 3;
        let (y, x) = ((px / size) as f64, (px % size) as f64);
        let mut v = 0.5;
        for &(fy, fx, phase, amp) in &waves {
            v += amp * (std::f64::consts::TAU * (fy * y + fx * x) / n + phase).cos();
        }
        for &(cy, cx, sigma, amp) in &blobs {
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        let (ry, rx, rh, rw, ramp) = rect;
        let inside = soft_step(y - ry) * soft_step(ry + rh - y) * soft_step(x - rx)
            * soft_step(rx + rw - x);
        v += ramp * inside;
        (v * tint[ch].0 + tint[ch].1).clamp(0.0, 1.0) as f32
    })
}

/// Builds `count` degraded/clean pairs. Content and per-pair noise seeds
/// both derive deterministically from the given seeds, so the same call
/// always yields the same dataset.
pub fn make_pairs(
    count: usize,
    hr_size: usize,
    spec: &DegradationSpec,
    content_seed: u64,
) -> Result<Vec<Pair>> {
    spec.validate()?;
    if hr_size % spec.scale != 0 {
        return Err(DtpError::InvalidArgument(format!(
            "hr size {hr_size} is not divisible by scale {}",
            spec.scale
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(content_seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut content_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let hr = synthesize_hr(hr_size, &mut content_rng);
        let pair_spec = DegradationSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        };
        let lr = degrade(&hr, &pair_spec)?;
        pairs.push(Pair { lr, hr });
    }
    Ok(pairs)
}

/// Copies a spatial window out of an [H, W, C] tensor.
pub fn crop(img: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw, c) = match img.shape() {
        [ih, iw, c] => (*ih, *iw, *c),
        other => {
            return Err(DtpError::InvalidArgument(format!(
                "crop expects a rank-3 image, got shape {other:?}"
            )))
        }
    };
    if y0 + h > ih || x0 + w > iw {
        return Err(DtpError::InvalidArgument(format!(
            "crop {h}x{w} at ({y0}, {x0}) exceeds image {ih}x{iw}"
        )));
    }
    Ok(Tensor::from_fn(&[h, w, c], |i| {
        let ch = i % c;
        let px = i / c;
        let (y, x) = (px / w, px % w);
        img.data()[((y0 + y) * iw + x0 + x) * c + ch]
    }))
}

/// Nearest/box upsampling of an image by an integer factor — the
/// no-learning baseline the trained model is measured against.
pub fn box_upsample(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(DtpError::InvalidArgument(format!(
                "box upsampling expects a rank-3 image, got shape {other:?}"
            )))
        }
    };
    if factor == 0 {
        return Err(DtpError::InvalidArgument("upsampling factor 0".into()));
    }
    Ok(Tensor::from_fn(&[h * factor, w * factor, c], |i| {
        let ch = i % c;
        let px = i / c;
        let (y, x) = (px / (w * factor), px % (w * factor));
        img.data()[((y / factor) * w + x / factor) * c + ch]
    }))
}
