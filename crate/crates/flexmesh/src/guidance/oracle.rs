//! Denoising oracles: the pluggable boundary that stands in for a pretrained
//! video model. Every oracle predicts the noise `eps_hat` it believes was
//! mixed into a stack, and the score conversion `-eps_hat / sigma` turns that
//! prediction into a gradient of log-density.

use crate::error::{Error, Result};
use crate::linalg::DenseMat;
use crate::scalar::{to_f64, Real};

use super::{FrameStack, VpSchedule};

/// An `eps`-predictor over frame stacks. Implementations must be
/// deterministic given `(frames, noise_level, condition)` and safe to call
/// from multiple threads (serializing internally if necessary).
pub trait ScoreOracle<T: Real> {
    /// Predicts the noise component of `frames` at noise level `t'` in
    /// `[0, T]`. `condition` is an opaque prompt; `None` asks for the
    /// unconditional prediction.
    fn predict_eps(
        &self,
        frames: &FrameStack<T>,
        noise_level: T,
        condition: Option<&str>,
    ) -> Result<FrameStack<T>>;
}

/// Covariance model for [`GaussianAnalytic`].
#[derive(Debug, Clone)]
pub enum GaussianCovariance<T> {
    /// Independent per-component variances.
    Diagonal(Vec<T>),
    /// Full symmetric positive-definite matrix over the flattened stack.
    Dense(DenseMat<T>),
}

/// Closed-form oracle for a Gaussian over flattened stacks: its score is
/// `-inv(Sigma)·(x − mu)` exactly, so `predict_eps` returns
/// `sigma(t')·inv(Sigma)·(x − mu)` and the score conversion cancels the
/// noise scale with no approximation.
pub struct GaussianAnalytic<T> {
    mean: Vec<T>,
    inverse: CovInverse<T>,
    schedule: VpSchedule<T>,
}

enum CovInverse<T> {
    Diagonal(Vec<T>),
    Dense(DenseMat<T>),
}

impl<T: Real> GaussianAnalytic<T> {
    pub fn new(mean: Vec<T>, covariance: GaussianCovariance<T>, horizon: T) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian mean must be nonempty and finite"));
        }
        let inverse = match covariance {
            GaussianCovariance::Diagonal(vars) => {
                if vars.len() != mean.len() {
                    return Err(Error::invalid("variance vector length differs from mean"));
                }
                if vars.iter().any(|&v| !(v.is_finite() && v > T::zero())) {
                    return Err(Error::invalid("variances must be positive and finite"));
                }
                CovInverse::Diagonal(vars.iter().map(|&v| T::one() / v).collect())
            }
            GaussianCovariance::Dense(cov) => {
                if cov.rows() != mean.len() || cov.cols() != mean.len() {
                    return Err(Error::invalid("covariance shape differs from mean length"));
                }
                let inv = cov
                    .cholesky()
                    .map_err(|e| Error::numeric(format!("covariance is not SPD: {e}")))?
                    .inverse();
                CovInverse::Dense(inv)
            }
        };
        Ok(GaussianAnalytic { mean, inverse, schedule: VpSchedule::new(horizon)? })
    }

    /// Standard Gaussian with the given dimension: score at `x` is `-x`.
    pub fn standard(dim: usize, horizon: T) -> Result<Self> {
        GaussianAnalytic::new(
            vec![T::zero(); dim],
            GaussianCovariance::Diagonal(vec![T::one(); dim]),
            horizon,
        )
    }

    fn apply_inverse(&self, centered: &[T]) -> Vec<T> {
        match &self.inverse {
            CovInverse::Diagonal(inv) => {
                centered.iter().zip(inv).map(|(&c, &i)| c * i).collect()
            }
            CovInverse::Dense(inv) => inv.matvec(centered),
        }
    }
}

impl<T: Real> ScoreOracle<T> for GaussianAnalytic<T> {
    fn predict_eps(
        &self,
        frames: &FrameStack<T>,
        noise_level: T,
        _condition: Option<&str>,
    ) -> Result<FrameStack<T>> {
        if frames.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "stack has {} values, Gaussian is {}-dimensional",
                frames.len(),
                self.mean.len()
            )));
        }
        if !self.schedule.contains(noise_level) {
            return Err(Error::invalid(format!(
                "noise level {noise_level} outside [0, {}]",
                self.schedule.horizon()
            )));
        }
        let centered: Vec<T> = frames
            .data()
            .iter()
            .zip(&self.mean)
            .map(|(&x, &m)| x - m)
            .collect();
        let sigma = self.schedule.sigma(noise_level);
        let mut out = frames.zeros_like();
        for (o, v) in out.data_mut().iter_mut().zip(self.apply_inverse(&centered)) {
            *o = sigma * v;
        }
        Ok(out)
    }
}

/// Test-and-recovery oracle built from a fixed reference clip: it reports
/// exactly the noise that separates the input from the noised teacher,
/// `eps_hat = (z − sqrt(abar)·X_teacher) / sigma`. Optimizing against it
/// pulls the render toward the teacher clip.
pub struct TeacherOracle<T> {
    teacher: FrameStack<T>,
    schedule: VpSchedule<T>,
}

impl<T: Real> TeacherOracle<T> {
    pub fn new(teacher: FrameStack<T>, horizon: T) -> Result<Self> {
        Ok(TeacherOracle { teacher, schedule: VpSchedule::new(horizon)? })
    }

    pub fn teacher(&self) -> &FrameStack<T> {
        &self.teacher
    }
}

impl<T: Real> ScoreOracle<T> for TeacherOracle<T> {
    fn predict_eps(
        &self,
        frames: &FrameStack<T>,
        noise_level: T,
        _condition: Option<&str>,
    ) -> Result<FrameStack<T>> {
        if frames.shape() != self.teacher.shape() {
            return Err(Error::invalid(format!(
                "stack shape {:?} differs from teacher {:?}",
                frames.shape(),
                self.teacher.shape()
            )));
        }
        if !self.schedule.contains(noise_level) || noise_level <= T::zero() {
            return Err(Error::invalid(format!(
                "teacher oracle needs a noise level in (0, {}], got {noise_level}",
                to_f64(self.schedule.horizon())
            )));
        }
        let sa = self.schedule.sqrt_alpha_bar(noise_level);
        let sigma = self.schedule.sigma(noise_level);
        let mut out = frames.zeros_like();
        for (o, (&z, &xt)) in out
            .data_mut()
            .iter_mut()
            .zip(frames.data().iter().zip(self.teacher.data()))
        {
            *o = (z - sa * xt) / sigma;
        }
        Ok(out)
    }
}

/// Converts an oracle's noise prediction at `frames` into a score estimate:
/// `score = -eps_hat / sigma(t')`. Rejects `t' = 0`, where the conversion
/// divides by zero.
pub fn score_from_oracle<T: Real>(
    frames: &FrameStack<T>,
    noise_level: T,
    oracle: &dyn ScoreOracle<T>,
    schedule: &VpSchedule<T>,
    condition: Option<&str>,
) -> Result<FrameStack<T>> {
    if !(noise_level.is_finite() && noise_level > T::zero() && noise_level <= schedule.horizon()) {
        return Err(Error::invalid(format!(
            "score conversion needs a noise level in (0, {}], got {noise_level}",
            to_f64(schedule.horizon())
        )));
    }
    let mut eps = oracle.predict_eps(frames, noise_level, condition)?;
    let inv = -T::one() / schedule.sigma(noise_level);
    eps.scale(inv);
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn stack_of(values: &[f64]) -> FrameStack<f64> {
        FrameStack::new(1, 1, values.len(), 1, values.to_vec()).unwrap()
    }

    /// Oracle returning a constant prediction regardless of input.
    struct FixedEps(Vec<f64>);
    impl ScoreOracle<f64> for FixedEps {
        fn predict_eps(
            &self,
            frames: &FrameStack<f64>,
            _noise_level: f64,
            _condition: Option<&str>,
        ) -> Result<FrameStack<f64>> {
            FrameStack::new(1, 1, frames.len(), 1, self.0.clone())
        }
    }

    #[test]
    fn standard_gaussian_score_is_minus_x() {
        let vp = VpSchedule::new(100.0f64).unwrap();
        let oracle = GaussianAnalytic::standard(4, 100.0).unwrap();
        let x = stack_of(&[0.3, -1.2, 2.0, 0.0]);
        let score = score_from_oracle(&x, 37.0, &oracle, &vp, None).unwrap();
        for (s, v) in score.data().iter().zip(x.data()) {
            assert!((s + v).abs() < 1e-12, "score {s} vs -x {}", -v);
        }
    }

    #[test]
    fn dense_gaussian_score_matches_closed_form() {
        let mut rng = StdRng::seed_from_u64(11);
        let dim = 6;
        // Random SPD covariance: B·Bᵀ + dim·I.
        let mut b = DenseMat::<f64>::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                b[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut cov = DenseMat::<f64>::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                let mut acc = if r == c { dim as f64 } else { 0.0 };
                for k in 0..dim {
                    acc += b[(r, k)] * b[(c, k)];
                }
                cov[(r, c)] = acc;
            }
        }
        let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = GaussianAnalytic::new(
            mean.clone(),
            GaussianCovariance::Dense(cov.clone()),
            50.0,
        )
        .unwrap();
        let vp = VpSchedule::new(50.0f64).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let score = score_from_oracle(&stack_of(&x), 13.0, &oracle, &vp, None).unwrap();
        // Reference: solve Sigma·s = −(x − mu) directly.
        let rhs: Vec<f64> = x.iter().zip(&mean).map(|(&a, &m)| -(a - m)).collect();
        let want = cov.cholesky().unwrap().solve(&rhs);
        for (got, want) in score.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn score_conversion_halves_when_sigma_doubles() {
        // sigma = sqrt(t'/T): quadrupling t' doubles sigma.
        let vp = VpSchedule::new(64.0f64).unwrap();
        let oracle = FixedEps(vec![1.0, -3.0, 0.5]);
        let x = stack_of(&[0.0, 0.0, 0.0]);
        let s1 = score_from_oracle(&x, 4.0, &oracle, &vp, None).unwrap();
        let s2 = score_from_oracle(&x, 16.0, &oracle, &vp, None).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn score_conversion_rejects_zero_noise_level() {
        let vp = VpSchedule::new(10.0f64).unwrap();
        let oracle = GaussianAnalytic::standard(2, 10.0).unwrap();
        let x = stack_of(&[1.0, 1.0]);
        assert!(score_from_oracle(&x, 0.0, &oracle, &vp, None).is_err());
        assert!(score_from_oracle(&x, -1.0, &oracle, &vp, None).is_err());
        assert!(score_from_oracle(&x, 11.0, &oracle, &vp, None).is_err());
    }

    #[test]
    fn teacher_oracle_recovers_injected_noise_exactly() {
        let mut rng = StdRng::seed_from_u64(3);
        let teacher = stack_of(&(0..8).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>());
        let horizon = 1000.0;
        let oracle = TeacherOracle::new(teacher.clone(), horizon).unwrap();
        let vp = VpSchedule::new(horizon).unwrap();
        for &tp in &[1.0, 250.0, 999.0] {
            let eps: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut z = teacher.clone();
            z.scale(vp.sqrt_alpha_bar(tp));
            let noise = stack_of(&eps);
            z.add_scaled(&noise, vp.sigma(tp)).unwrap();
            let got = oracle.predict_eps(&z, tp, None).unwrap();
            for (g, e) in got.data().iter().zip(&eps) {
                assert!((g - e).abs() < 1e-9, "t'={tp}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn teacher_oracle_rejects_shape_mismatch_and_zero_level() {
        let oracle = TeacherOracle::new(stack_of(&[1.0, 2.0]), 10.0).unwrap();
        assert!(oracle.predict_eps(&stack_of(&[1.0]), 5.0, None).is_err());
        assert!(oracle.predict_eps(&stack_of(&[1.0, 2.0]), 0.0, None).is_err());
    }
}
