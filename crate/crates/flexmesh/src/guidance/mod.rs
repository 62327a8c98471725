//! Score-based guidance: pluggable denoising oracles, the score-distillation
//! gradient, classifier-free guidance, the flow-matching consistency loss,
//! and a probability-flow ODE simulator with its Fokker–Planck check.
//!
//! The guidance side never sees meshes — it works on [`FrameStack`]s
//! (flattened rendered clips) and per-frame Jacobian fields, which keeps the
//! oracle boundary narrow enough to swap in an analytic Gaussian, a teacher
//! clip, or a remote denoiser service without touching the optimizer.

mod oracle;
mod pfode;
mod remote;
mod sds;

pub use oracle::{score_from_oracle, GaussianAnalytic, GaussianCovariance, ScoreOracle, TeacherOracle};
pub use pfode::{
    euler_maruyama_sde, marginal_moments, neighborhood_overlap, pfode_integrate,
    verify_fokker_planck, FokkerPlanckConfig, FokkerPlanckReport, NoiseSchedule, Rescaling,
};
pub use remote::RemoteDenoiser;
pub use sds::{flow_matching_loss, sds_gradient, FlowMatchingResult, SdsResult};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// A rendered clip flattened for the oracle boundary: `frames` images of
/// `height` x `width` RGBA pixels, row major, frame major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack<T> {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FrameStack<T> {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("frame stack dimensions must be positive"));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::invalid(format!(
                "frame stack data has {} values, shape {frames}x{height}x{width}x{channels} needs {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame stack contains non-finite values"));
        }
        Ok(FrameStack { frames, height, width, channels, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        FrameStack {
            frames,
            height,
            width,
            channels,
            data: vec![T::zero(); frames * height * width * channels],
        }
    }

    pub fn from_images(images: &[crate::render::RasterImage<T>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("frame stack needs at least one frame"));
        }
        let (w, h) = (images[0].width(), images[0].height());
        if images.iter().any(|im| im.width() != w || im.height() != h) {
            return Err(Error::invalid("all frames must share one resolution"));
        }
        let mut data = Vec::with_capacity(images.len() * w * h * 4);
        for im in images {
            data.extend_from_slice(im.data());
        }
        FrameStack::new(images.len(), h, w, 4, data)
    }

    /// Shape as `[frames, height, width, channels]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        FrameStack {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: vec![T::zero(); self.data.len()],
        }
    }

    /// Per-frame slice of the flat buffer.
    pub fn frame(&self, index: usize) -> &[T] {
        let stride = self.height * self.width * self.channels;
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn add_scaled(&mut self, other: &Self, factor: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("frame stack shapes differ"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * factor;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Variance-preserving noising convention: a clean stack `X` at noise level
/// `t'` in `(0, T]` becomes `z = sqrt(abar)·X + sigma·eps` with a linear
/// `abar(t') = 1 − t'/T` and `sigma = sqrt(1 − abar)`.
#[derive(Debug, Clone, Copy)]
pub struct VpSchedule<T> {
    horizon: T,
}

impl<T: Real> VpSchedule<T> {
    pub fn new(horizon: T) -> Result<Self> {
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(Error::invalid("diffusion horizon must be positive and finite"));
        }
        Ok(VpSchedule { horizon })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn contains(&self, noise_level: T) -> bool {
        noise_level.is_finite() && noise_level >= T::zero() && noise_level <= self.horizon
    }

    pub fn alpha_bar(&self, noise_level: T) -> T {
        T::one() - noise_level / self.horizon
    }

    pub fn sigma(&self, noise_level: T) -> T {
        (noise_level / self.horizon).sqrt()
    }

    pub fn sqrt_alpha_bar(&self, noise_level: T) -> T {
        self.alpha_bar(noise_level).sqrt()
    }
}

/// Weights and sampling policy for the guidance losses.
#[derive(Debug, Clone)]
pub struct GuidanceConfig<T> {
    /// Classifier-free guidance scale `s`; 0 disables the unconditional call.
    pub guidance_scale: T,
    /// Weight of the flow-matching term in the total loss.
    pub lambda: T,
    /// Constant timestep weight `w(t')` applied to the score-distillation
    /// residual.
    pub timestep_weight: T,
    /// Diffusion horizon `T`; noise levels are drawn from its interior.
    pub horizon: T,
    /// Monte-Carlo samples per gradient estimate.
    pub samples: usize,
}

impl<T: Real> Default for GuidanceConfig<T> {
    fn default() -> Self {
        GuidanceConfig {
            guidance_scale: real(50.0),
            lambda: real(15.0),
            timestep_weight: T::one(),
            horizon: real(1000.0),
            samples: 1,
        }
    }
}

impl<T: Real> GuidanceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= T::zero()) {
            return Err(Error::invalid("guidance scale must be finite and nonnegative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= T::zero()) {
            return Err(Error::invalid("flow-matching weight must be finite and nonnegative"));
        }
        if !(self.timestep_weight.is_finite() && self.timestep_weight >= T::zero()) {
            return Err(Error::invalid("timestep weight must be finite and nonnegative"));
        }
        if !(self.horizon.is_finite() && self.horizon > T::zero()) {
            return Err(Error::invalid("diffusion horizon must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("at least one Monte-Carlo sample is required"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<VpSchedule<T>> {
        VpSchedule::new(self.horizon)
    }
}

/// Classifier-free guidance: `(1 + s)·eps_cond − s·eps_uncond`.
pub fn cfg_combine<T: Real>(
    eps_cond: &FrameStack<T>,
    eps_uncond: &FrameStack<T>,
    scale: T,
) -> Result<FrameStack<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::invalid(format!(
            "CFG shape mismatch: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    let mut out = eps_cond.clone();
    let one = T::one();
    for (o, (&c, &u)) in out
        .data_mut()
        .iter_mut()
        .zip(eps_cond.data().iter().zip(eps_uncond.data()))
    {
        *o = (one + scale) * c - scale * u;
    }
    Ok(out)
}

/// Total optimization objective: `L_SDS + lambda * L_flow`.
pub fn total_loss<T: Real>(sds_term: T, flow_term: T, lambda: T) -> Result<T> {
    if !(lambda.is_finite() && lambda >= T::zero()) {
        return Err(Error::invalid("loss weight must be finite and nonnegative"));
    }
    Ok(sds_term + lambda * flow_term)
}

/// Standard normal draw via Box-Muller, so the crate's only RNG dependency
/// stays the uniform generator.
pub(crate) fn standard_normal<T: Real, R: Rng>(rng: &mut R) -> T {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1], keeps ln finite
    let u2: f64 = rng.gen::<f64>();
    real((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

/// Draws the noise level for a Monte-Carlo sample, avoiding both endpoints
/// where `sigma -> 0` or `abar -> 0` would blow up the score conversion.
pub(crate) fn draw_noise_level<T: Real, R: Rng>(horizon: T, rng: &mut R) -> T {
    let u = rng.gen_range(0.02..0.98);
    horizon * real(u)
}
