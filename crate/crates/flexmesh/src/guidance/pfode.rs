//! Probability-flow ODE and forward-SDE simulators with the covariance
//! consistency check that justifies using the deterministic flow.
//!
//! The noising process is `dx = G dW` with `G Gᵀ = Ċ(t)` diagonal; its
//! marginals evolve as `Σ(t) = Σ₀ + C(t)`. The probability-flow ODE
//! `dx/dt = −½ Ċ(t) · score(x, t)` shares those marginals while moving each
//! particle deterministically. [`verify_fokker_planck`] integrates both from
//! one initial ensemble and checks each terminal covariance against the
//! analytic value; [`neighborhood_overlap`] quantifies the flow's hallmark
//! property that nearby particles stay nearby.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};

use super::standard_normal;

/// Diagonal noise-injection schedule `C_i(t) = rate_i · t^power` on
/// `[0, horizon]`, optionally paired with a rescaling that keeps the
/// integrated state's spread bounded.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    rates: Vec<T>,
    power: T,
    horizon: T,
    rescaling: Rescaling<T>,
    sde_diffusion_scale: T,
}

/// State rescaling `x̃ = A(t)·x` applied inside the pfODE integrator.
#[derive(Debug, Clone)]
pub enum Rescaling<T> {
    /// `A ≡ 1`: integrate the plain flow.
    None,
    /// `A(t) = det(Σ(t))^(-1/(2d))` for `Σ(t) = diag(initial_variances) + C(t)`,
    /// which pins the generalized variance of the rescaled state.
    DetNormalizer { initial_variances: Vec<T> },
}

impl<T: Real> NoiseSchedule<T> {
    /// Plain schedule without rescaling; `power >= 1` keeps the derivative
    /// finite at `t = 0`.
    pub fn new(rates: Vec<T>, power: T, horizon: T) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one dimension"));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= T::zero())) {
            return Err(Error::invalid("noise rates must be finite and nonnegative"));
        }
        if !(power.is_finite() && power >= T::one()) {
            return Err(Error::invalid("schedule power must be >= 1"));
        }
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(Error::invalid("schedule horizon must be positive"));
        }
        Ok(NoiseSchedule {
            rates,
            power,
            horizon,
            rescaling: Rescaling::None,
            sde_diffusion_scale: T::one(),
        })
    }

    pub fn with_rescaling(mut self, rescaling: Rescaling<T>) -> Result<Self> {
        if let Rescaling::DetNormalizer { initial_variances } = &rescaling {
            if initial_variances.len() != self.rates.len() {
                return Err(Error::invalid(
                    "rescaling variance vector length differs from schedule dimension",
                ));
            }
            if initial_variances.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
                return Err(Error::invalid("rescaling variances must be positive"));
            }
        }
        self.rescaling = rescaling;
        Ok(self)
    }

    /// Scales `G Gᵀ` in the forward SDE only. Any value other than 1 breaks
    /// the consistency condition on purpose — it exists as a fault-injection
    /// hook for the verification below.
    pub fn with_sde_diffusion_scale(mut self, scale: T) -> Result<Self> {
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(Error::invalid("diffusion scale must be positive"));
        }
        self.sde_diffusion_scale = scale;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn sde_diffusion_scale(&self) -> T {
        self.sde_diffusion_scale
    }

    /// Accumulated covariance `C_i(t)`.
    pub fn c(&self, t: T) -> Vec<T> {
        self.rates.iter().map(|&r| r * t.powf(self.power)).collect()
    }

    /// Injection rate `Ċ_i(t)`.
    pub fn c_dot(&self, t: T) -> Vec<T> {
        self.rates
            .iter()
            .map(|&r| self.power * r * t.powf(self.power - T::one()))
            .collect()
    }

    /// Rescaling amplitude `A(t)`.
    pub fn amplitude(&self, t: T) -> T {
        match &self.rescaling {
            Rescaling::None => T::one(),
            Rescaling::DetNormalizer { initial_variances } => {
                let d = real::<T>(self.dim() as f64);
                let mut log_det = T::zero();
                for (&v0, c) in initial_variances.iter().zip(self.c(t)) {
                    log_det += (v0 + c).ln();
                }
                (-log_det / (real::<T>(2.0) * d)).exp()
            }
        }
    }

    /// Logarithmic derivative `Ȧ(t)/A(t)`.
    pub fn log_amplitude_dot(&self, t: T) -> T {
        match &self.rescaling {
            Rescaling::None => T::zero(),
            Rescaling::DetNormalizer { initial_variances } => {
                let d = real::<T>(self.dim() as f64);
                let mut acc = T::zero();
                for ((&v0, c), cd) in initial_variances.iter().zip(self.c(t)).zip(self.c_dot(t)) {
                    acc += cd / (v0 + c);
                }
                -acc / (real::<T>(2.0) * d)
            }
        }
    }
}

/// Integrates the probability-flow ODE from `t = 0` to the schedule horizon
/// with forward Euler, returning the transported particles in the original
/// (unrescaled) coordinates. `score_fn(t, x, out)` must write the score of
/// the time-`t` marginal at the unrescaled point `x`.
pub fn pfode_integrate<T: Real>(
    particles: &[Vec<T>],
    schedule: &NoiseSchedule<T>,
    score_fn: impl Fn(T, &[T], &mut [T]),
    steps: usize,
) -> Result<Vec<Vec<T>>> {
    pfode_integrate_span(particles, schedule, score_fn, T::zero(), schedule.horizon(), steps)
}

/// Span variant of [`pfode_integrate`]: transports from `t0` to `t1`.
/// Splitting one integration into consecutive spans composes exactly —
/// the rescaling is applied on entry and undone on exit at matching times.
pub fn pfode_integrate_span<T: Real>(
    particles: &[Vec<T>],
    schedule: &NoiseSchedule<T>,
    score_fn: impl Fn(T, &[T], &mut [T]),
    t0: T,
    t1: T,
    steps: usize,
) -> Result<Vec<Vec<T>>> {
    check_ensemble(particles, schedule.dim())?;
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one step"));
    }
    if !(t0 >= T::zero() && t1 > t0 && t1 <= schedule.horizon()) {
        return Err(Error::invalid("integration span must satisfy 0 <= t0 < t1 <= horizon"));
    }
    let dim = schedule.dim();
    let dt = (t1 - t0) / real(steps as f64);
    let half = real::<T>(0.5);
    // Enter rescaled coordinates.
    let a0 = schedule.amplitude(t0);
    let mut state: Vec<Vec<T>> = particles
        .iter()
        .map(|p| p.iter().map(|&x| x * a0).collect())
        .collect();
    let mut x = vec![T::zero(); dim];
    let mut score = vec![T::zero(); dim];
    for k in 0..steps {
        let t = t0 + dt * real(k as f64);
        let a = schedule.amplitude(t);
        let la_dot = schedule.log_amplitude_dot(t);
        let c_dot = schedule.c_dot(t);
        for p in state.iter_mut() {
            for i in 0..dim {
                x[i] = p[i] / a;
            }
            score_fn(t, &x, &mut score);
            for i in 0..dim {
                let drift = a * (-half * c_dot[i] * score[i]) + la_dot * p[i];
                p[i] += dt * drift;
                if !p[i].is_finite() {
                    return Err(Error::numeric(format!(
                        "probability-flow state became non-finite at step {k} (t = {})",
                        to_f64(t)
                    )));
                }
            }
        }
    }
    // Leave rescaled coordinates.
    let a1 = schedule.amplitude(t1);
    for p in state.iter_mut() {
        for v in p.iter_mut() {
            *v /= a1;
        }
    }
    Ok(state)
}

/// Euler–Maruyama simulation of the forward noising SDE `dx = G dW` with
/// `G Gᵀ = diffusion_scale · Ċ(t)`, from `t = 0` to the horizon.
pub fn euler_maruyama_sde<T: Real, R: Rng>(
    particles: &[Vec<T>],
    schedule: &NoiseSchedule<T>,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    check_ensemble(particles, schedule.dim())?;
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one step"));
    }
    let dim = schedule.dim();
    let dt = schedule.horizon() / real(steps as f64);
    let scale = schedule.sde_diffusion_scale();
    let mut state: Vec<Vec<T>> = particles.to_vec();
    for k in 0..steps {
        let t = dt * real(k as f64);
        let c_dot = schedule.c_dot(t);
        let std: Vec<T> = c_dot.iter().map(|&cd| (scale * cd * dt).sqrt()).collect();
        for p in state.iter_mut() {
            for i in 0..dim {
                p[i] += std[i] * standard_normal(rng);
                if !p[i].is_finite() {
                    return Err(Error::numeric(format!(
                        "SDE state became non-finite at step {k} (t = {})",
                        to_f64(t)
                    )));
                }
            }
        }
    }
    Ok(state)
}

fn check_ensemble<T: Real>(particles: &[Vec<T>], dim: usize) -> Result<()> {
    if particles.is_empty() {
        return Err(Error::invalid("particle ensemble is empty"));
    }
    if particles.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid(format!("every particle must have dimension {dim}")));
    }
    if particles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("particles contain non-finite values"));
    }
    Ok(())
}

/// Empirical covariance matrix in `f64`, population normalization.
pub(crate) fn covariance<T: Real>(particles: &[Vec<T>]) -> Vec<Vec<f64>> {
    let n = particles.len();
    let dim = particles[0].len();
    let mut mean = vec![0.0f64; dim];
    for p in particles {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += to_f64(v);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0f64; dim]; dim];
    for p in particles {
        for i in 0..dim {
            let di = to_f64(p[i]) - mean[i];
            for j in 0..dim {
                cov[i][j] += di * (to_f64(p[j]) - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    cov
}

/// Per-dimension `[mean, variance, skewness, excess kurtosis]` of an
/// ensemble's marginals.
pub fn marginal_moments<T: Real>(particles: &[Vec<T>]) -> Vec<[f64; 4]> {
    let n = particles.len() as f64;
    let dim = particles[0].len();
    (0..dim)
        .map(|i| {
            let mean = particles.iter().map(|p| to_f64(p[i])).sum::<f64>() / n;
            let mut m2 = 0.0;
            let mut m3 = 0.0;
            let mut m4 = 0.0;
            for p in particles {
                let d = to_f64(p[i]) - mean;
                m2 += d * d;
                m3 += d * d * d;
                m4 += d * d * d * d;
            }
            m2 /= n;
            m3 /= n;
            m4 /= n;
            [mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0]
        })
        .collect()
}

/// Mean fraction of shared `k`-nearest-neighbor indices between two
/// ensembles of the same particles, quantifying how well a transport
/// preserves local neighborhoods.
pub fn neighborhood_overlap<T: Real>(
    initial: &[Vec<T>],
    transported: &[Vec<T>],
    k: usize,
) -> Result<f64> {
    if initial.len() != transported.len() {
        return Err(Error::invalid("ensembles must pair up particle by particle"));
    }
    let n = initial.len();
    if k == 0 || k >= n {
        return Err(Error::invalid("neighbor count must satisfy 0 < k < particles"));
    }
    let knn = |cloud: &[Vec<T>], at: usize| -> Vec<usize> {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != at)
            .map(|j| {
                let d: f64 = cloud[at]
                    .iter()
                    .zip(&cloud[j])
                    .map(|(&a, &b)| {
                        let d = to_f64(a) - to_f64(b);
                        d * d
                    })
                    .sum();
                (d, j)
            })
            .collect();
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        dists[..k].iter().map(|&(_, j)| j).collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let before = knn(initial, i);
        let after = knn(transported, i);
        let shared = before.iter().filter(|j| after.contains(j)).count();
        total += shared as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// Ensemble sizes and tolerance for [`verify_fokker_planck`].
#[derive(Debug, Clone)]
pub struct FokkerPlanckConfig {
    pub particles: usize,
    pub steps: usize,
    /// Maximum allowed relative covariance error for either simulator.
    pub tolerance: f64,
}

impl Default for FokkerPlanckConfig {
    fn default() -> Self {
        FokkerPlanckConfig { particles: 50_000, steps: 200, tolerance: 0.05 }
    }
}

/// Outcome of the covariance consistency check. A tolerance breach makes
/// `passed` false; it is a finding, not an exception.
#[derive(Debug, Clone)]
pub struct FokkerPlanckReport {
    pub passed: bool,
    pub sde_error: f64,
    pub pfode_error: f64,
    pub tolerance: f64,
    pub analytic_variances: Vec<f64>,
    pub sde_covariance: Vec<Vec<f64>>,
    pub pfode_covariance: Vec<Vec<f64>>,
}

impl fmt::Display for FokkerPlanckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: max relative covariance error sde={:.4} pfode={:.4} (tolerance {:.4}, analytic diag {:?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.sde_error,
            self.pfode_error,
            self.tolerance,
            self.analytic_variances
        )
    }
}

/// Simulates the forward SDE and the probability-flow ODE from one shared
/// Gaussian ensemble `N(0, diag(initial_variances))` and compares both
/// terminal covariances against the analytic `diag(initial_variances) + C(T)`.
///
/// The pfODE uses the true injection rate and the exact Gaussian score along
/// the path; the SDE uses the schedule's (possibly fault-scaled) diffusion,
/// so a mismatched `G Gᵀ` shows up as an SDE covariance error.
pub fn verify_fokker_planck<T: Real, R: Rng>(
    schedule: &NoiseSchedule<T>,
    initial_variances: &[T],
    config: &FokkerPlanckConfig,
    rng: &mut R,
) -> Result<FokkerPlanckReport> {
    let dim = schedule.dim();
    if initial_variances.len() != dim {
        return Err(Error::invalid("initial variance vector must match schedule dimension"));
    }
    if initial_variances.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
        return Err(Error::invalid("initial variances must be positive"));
    }
    if config.particles < 100 {
        return Err(Error::invalid("need at least 100 particles for a meaningful check"));
    }
    let stds: Vec<T> = initial_variances.iter().map(|&v| v.sqrt()).collect();
    let initial: Vec<Vec<T>> = (0..config.particles)
        .map(|_| stds.iter().map(|&s| s * standard_normal::<T, _>(rng)).collect())
        .collect();

    // Exact score of the time-t marginal: x ~ N(0, diag(v0 + C(t))).
    let v0: Vec<T> = initial_variances.to_vec();
    let score_schedule = schedule.clone();
    let score_fn = move |t: T, x: &[T], out: &mut [T]| {
        let c = score_schedule.c(t);
        for i in 0..x.len() {
            out[i] = -x[i] / (v0[i] + c[i]);
        }
    };

    let sde_final = euler_maruyama_sde(&initial, schedule, config.steps, rng)?;
    let pf_final = pfode_integrate(&initial, schedule, score_fn, config.steps)?;

    let horizon = schedule.horizon();
    let analytic: Vec<f64> = initial_variances
        .iter()
        .zip(schedule.c(horizon))
        .map(|(&v, c)| to_f64(v) + to_f64(c))
        .collect();
    let norm = analytic.iter().cloned().fold(f64::MIN, f64::max);
    let max_err = |cov: &[Vec<f64>]| -> f64 {
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let want = if i == j { analytic[i] } else { 0.0 };
                worst = worst.max((cov[i][j] - want).abs() / norm);
            }
        }
        worst
    };
    let sde_cov = covariance(&sde_final);
    let pf_cov = covariance(&pf_final);
    let sde_error = max_err(&sde_cov);
    let pfode_error = max_err(&pf_cov);
    Ok(FokkerPlanckReport {
        passed: sde_error <= config.tolerance && pfode_error <= config.tolerance,
        sde_error,
        pfode_error,
        tolerance: config.tolerance,
        analytic_variances: analytic,
        sde_covariance: sde_cov,
        pfode_covariance: pf_cov,
    })
}
