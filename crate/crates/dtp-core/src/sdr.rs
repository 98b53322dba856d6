//! Dual-path branch specialization: a retinal-response luminance enhancer
//! for the low-frequency branch and a hierarchical residual denoising stack
//! for the high-frequency texture branch.
//!
//! The luminance curve is `r(x) = x^g / (x^g + s^g + b)` with learnable
//! exponent `g`, threshold `s`, and suppression `b`, followed by a
//! per-channel mean renormalization that restores the input's brightness
//! scale. Positivity of the learnables is structural: `g = exp(raw)` and
//! `s, b = softplus(raw)`, so no projection step is ever needed.

use rand::Rng;

use crate::error::{DtpError, Result};
use crate::numerics::{Graph, Padding, ParamBinding, ParamStore, Real, Tensor, ValueId};

pub const GAMMA_RAW: &str = "sdr.gamma_raw";
pub const SIGMA_RAW: &str = "sdr.sigma_raw";
pub const BETA_RAW: &str = "sdr.beta_raw";

/// Stability constant added to the output-mean denominator.
pub const MEAN_EPS: f64 = 1e-6;

/// Negative slope of the pointwise nonlinearity used across the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Initial values for the luminance curve, in effective (not raw) units.
#[derive(Debug, Clone, Copy)]
pub struct LuminanceInit {
    pub gamma: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl Default for LuminanceInit {
    fn default() -> Self {
        LuminanceInit {
            gamma: 1.0,
            sigma: 0.3,
            beta: 0.05,
        }
    }
}

/// Inverse of softplus: the raw value whose softplus is `y` (y > 0).
fn inv_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for small y via ln(expm1(y)).
    y.exp_m1().ln()
}

/// Registers the three luminance-curve learnables, mapping the requested
/// effective initial values back through exp/softplus.
pub fn register_luminance_params<F: Real>(
    store: &mut ParamStore<F>,
    init: LuminanceInit,
    learnable: bool,
) -> Result<()> {
    if !(init.gamma > 0.0) || !(init.sigma > 0.0) || !(init.beta > 0.0) {
        return Err(DtpError::InvalidArgument(format!(
            "luminance curve initial values must be positive, got gamma={}, sigma={}, beta={}",
            init.gamma, init.sigma, init.beta
        )));
    }
    let scalar = |v: f64| Tensor::new(vec![1], vec![F::from_f64(v)]);
    store.insert(GAMMA_RAW, scalar(init.gamma.ln())?, learnable)?;
    store.insert(SIGMA_RAW, scalar(inv_softplus(init.sigma))?, learnable)?;
    store.insert(BETA_RAW, scalar(inv_softplus(init.beta))?, learnable)?;
    Ok(())
}

/// Core response curve `r(x) = x^g / (x^g + s^g + b)` on inputs clamped to
/// `[0, 1]` (fractional exponents need a nonnegative base). Strictly
/// increasing in x and bounded in `[0, 1)`.
pub fn core_response<F: Real>(
    g: &mut Graph<F>,
    input: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let x = g.clamp(input, 0.0, 1.0)?;
    let gamma_raw = binding.get(GAMMA_RAW)?;
    let sigma_raw = binding.get(SIGMA_RAW)?;
    let beta_raw = binding.get(BETA_RAW)?;
    let gamma = g.exp(gamma_raw)?;
    let sigma = g.softplus(sigma_raw)?;
    let beta = g.softplus(beta_raw)?;
    let x_pow = g.pow_elem(x, gamma)?;
    let sigma_pow = g.pow_elem(sigma, gamma)?;
    let floor = g.add(sigma_pow, beta)?;
    let denom = g.add_b(x_pow, floor)?;
    g.div(x_pow, denom)
}

/// Luminance enhancement: the core response rescaled so each channel keeps
/// its input mean (`out = r * mean_in / (mean_out + eps)`), then clamped to
/// `[0, 1]`. Means are per channel over everything else (batch included);
/// the rescale factor is one scalar per channel, so pixel ordering within a
/// channel is preserved.
pub fn enhance_luminance<F: Real>(
    g: &mut Graph<F>,
    input: ValueId,
    binding: &ParamBinding,
) -> Result<ValueId> {
    let x = g.clamp(input, 0.0, 1.0)?;
    let r = core_response(g, x, binding)?;
    let mean_in = g.channel_mean(x)?;
    let mean_out = g.channel_mean(r)?;
    let mean_out_safe = g.offset(mean_out, MEAN_EPS)?;
    let ratio = g.div(mean_in, mean_out_safe)?;
    let rescaled = g.mul_b(r, ratio)?;
    g.clamp(rescaled, 0.0, 1.0)
}

/// Residual denoising stack configuration.
#[derive(Debug, Clone, Copy)]
pub struct StackConfig {
    /// Number of residual stages (>= 1).
    pub stages: usize,
    /// Channels of the branch the stack runs on.
    pub channels: usize,
    /// Hidden width inside each residual unit.
    pub width: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 || self.channels < 1 || self.width < 1 {
            return Err(DtpError::InvalidArgument(format!(
                "residual stack needs stages, channels, width >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            stages: 4,
            channels: 9,
            width: 16,
        }
    }
}

fn stage_conv1(i: usize) -> String {
    format!("sdr.stack.{i}.conv1")
}

fn stage_conv2(i: usize) -> String {
    format!("sdr.stack.{i}.conv2")
}

/// Registers stack weights. The entry convolution of each stage starts
/// random (fan-in scaled) and the exit convolution starts at zero, so the
/// stack is the identity at initialization yet immediately trainable.
pub fn register_stack_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &StackConfig,
    rng: &mut impl Rng,
    learnable: bool,
) -> Result<()> {
    cfg.validate()?;
    let bound = 1.0 / ((9 * cfg.channels) as f64).sqrt();
    for i in 0..cfg.stages {
        let conv1 = Tensor::from_fn(&[3, 3, cfg.channels, cfg.width], |_| {
            F::from_f64(rng.gen_range(-bound..bound))
        });
        store.insert(&stage_conv1(i), conv1, learnable)?;
        store.insert(
            &stage_conv2(i),
            Tensor::zeros(&[3, 3, cfg.width, cfg.channels]),
            learnable,
        )?;
    }
    Ok(())
}

/// Registers an all-zero stack: exactly the identity map.
pub fn register_stack_params_zero<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &StackConfig,
    learnable: bool,
) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.stages {
        store.insert(
            &stage_conv1(i),
            Tensor::zeros(&[3, 3, cfg.channels, cfg.width]),
            learnable,
        )?;
        store.insert(
            &stage_conv2(i),
            Tensor::zeros(&[3, 3, cfg.width, cfg.channels]),
            learnable,
        )?;
    }
    Ok(())
}

/// Applies residual stages `start..end`: each stage adds
/// `conv(leaky(conv(x)))` back onto its input.
pub fn denoise_span<F: Real>(
    g: &mut Graph<F>,
    input: ValueId,
    binding: &ParamBinding,
    start: usize,
    end: usize,
) -> Result<ValueId> {
    let channels = *g
        .shape(input)
        .last()
        .ok_or_else(|| DtpError::InvalidArgument("denoise needs a ranked input".to_string()))?;
    let mut current = input;
    for i in start..end {
        let conv1 = binding.get(&stage_conv1(i))?;
        let expected = g.shape(conv1)[2];
        if expected != channels {
            return Err(DtpError::shape(
                &format!("denoise stage {i} channels"),
                g.shape(input),
                g.shape(conv1),
            ));
        }
        let conv2 = binding.get(&stage_conv2(i))?;
        let hidden = g.conv2d(current, conv1, 1, Padding::Same)?;
        let activated = g.leaky_relu(hidden, LEAKY_SLOPE)?;
        let update = g.conv2d(activated, conv2, 1, Padding::Same)?;
        current = g.add(current, update)?;
    }
    Ok(current)
}

/// Runs the full stack (stages `0..cfg.stages`).
pub fn denoise<F: Real>(
    g: &mut Graph<F>,
    input: ValueId,
    binding: &ParamBinding,
    cfg: &StackConfig,
) -> Result<ValueId> {
    denoise_span(g, input, binding, 0, cfg.stages)
}
