//! Score-distillation and flow-matching losses over rendered frame stacks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mesh::JacobianField;
use crate::scalar::{real, to_f64, Real};

use super::oracle::{score_from_oracle, ScoreOracle};
use super::{cfg_combine, draw_noise_level, standard_normal, FrameStack, GuidanceConfig};

/// Gradient estimate and logged loss value from [`sds_gradient`].
pub struct SdsResult<T> {
    /// Gradient with respect to the clean frame stack, averaged over samples.
    pub gradient: FrameStack<T>,
    /// Logged value `w(t')·mean(residual²)/2`, averaged over samples. The
    /// gradient is not the derivative of this value — the denoiser Jacobian
    /// is deliberately omitted — but it tracks optimization progress.
    pub loss: T,
}

/// Monte-Carlo score-distillation gradient.
///
/// Each sample draws a noise level `t'` from the interior of the horizon and
/// a Gaussian `eps`, forms `z = sqrt(abar)·X + sigma·eps`, asks the oracle
/// for `eps_hat`, and accumulates `w(t')·sqrt(abar)·(eps_hat − eps)` — the
/// residual mapped back through the noising transform with the denoiser's
/// own Jacobian omitted. With `guidance_scale > 0` the prediction is the
/// classifier-free combination of a conditional and an unconditional call.
pub fn sds_gradient<T: Real, R: Rng>(
    frames: &FrameStack<T>,
    oracle: &dyn ScoreOracle<T>,
    config: &GuidanceConfig<T>,
    condition: Option<&str>,
    rng: &mut R,
) -> Result<SdsResult<T>> {
    config.validate()?;
    if !frames.is_finite() {
        return Err(Error::invalid("frame stack contains non-finite values"));
    }
    let schedule = config.schedule()?;
    let mut gradient = frames.zeros_like();
    let mut loss = T::zero();
    let weight = config.timestep_weight;
    for _ in 0..config.samples {
        let tp = draw_noise_level(config.horizon, rng);
        let sa = schedule.sqrt_alpha_bar(tp);
        let sigma = schedule.sigma(tp);
        let mut noised = frames.clone();
        noised.scale(sa);
        let mut eps = frames.zeros_like();
        for e in eps.data_mut() {
            *e = standard_normal(rng);
        }
        noised.add_scaled(&eps, sigma)?;
        let ctx = |e: Error| Error::numeric(format!("oracle failed at noise level {}: {e}", to_f64(tp)));
        let eps_hat = if config.guidance_scale > T::zero() {
            let cond = oracle.predict_eps(&noised, tp, condition).map_err(ctx)?;
            let uncond = oracle.predict_eps(&noised, tp, None).map_err(ctx)?;
            cfg_combine(&cond, &uncond, config.guidance_scale)?
        } else {
            oracle.predict_eps(&noised, tp, condition).map_err(ctx)?
        };
        if eps_hat.shape() != frames.shape() {
            return Err(Error::Remote(format!(
                "oracle returned shape {:?} for input {:?}",
                eps_hat.shape(),
                frames.shape()
            )));
        }
        // residual = eps_hat − eps, folded straight into the accumulator.
        let mut residual = eps_hat;
        residual.add_scaled(&eps, -T::one())?;
        let half = real::<T>(0.5);
        loss += weight * half * residual.norm_sq() / real(frames.len() as f64);
        gradient.add_scaled(&residual, weight * sa)?;
    }
    let inv = T::one() / real(config.samples as f64);
    gradient.scale(inv);
    loss *= inv;
    if !gradient.is_finite() {
        return Err(Error::numeric("score-distillation gradient is non-finite"));
    }
    Ok(SdsResult { gradient, loss })
}

/// Value and gradients of the flow-matching consistency loss.
pub struct FlowMatchingResult<T> {
    /// `score_term + penalty_term`.
    pub loss: T,
    /// Monte-Carlo average of the squared score gap between the stacks.
    pub score_term: T,
    /// Mean-over-frames squared Frobenius gap between the Jacobian fields.
    pub penalty_term: T,
    pub d_frames_total: FrameStack<T>,
    pub d_frames_spatial: FrameStack<T>,
    pub d_jacobians_total: Vec<JacobianField<T>>,
    pub d_jacobians_spatial: Vec<JacobianField<T>>,
}

/// Flow-matching consistency loss between the temporally corrected animation
/// and its spatial-only counterpart.
///
/// The score term draws noise levels `t'` and averages
/// `‖score(frames_total) − score(frames_spatial)‖²`, pushing the corrected
/// render to sit in the same high-density region as the purely spatial one.
/// The penalty term is the per-frame mean of `‖J_t − J^P_t‖²_F`, keeping the
/// corrections themselves small. Gradients use the same omitted-denoiser-
/// Jacobian convention as [`sds_gradient`]: the score conversion's `-1/sigma`
/// factor is kept, the oracle's internal Jacobian is not.
pub fn flow_matching_loss<T: Real, R: Rng>(
    frames_total: &FrameStack<T>,
    frames_spatial: &FrameStack<T>,
    jacobians_total: &[JacobianField<T>],
    jacobians_spatial: &[JacobianField<T>],
    oracle: &dyn ScoreOracle<T>,
    config: &GuidanceConfig<T>,
    condition: Option<&str>,
    rng: &mut R,
) -> Result<FlowMatchingResult<T>> {
    config.validate()?;
    if frames_total.shape() != frames_spatial.shape() {
        return Err(Error::invalid(format!(
            "frame stacks disagree: {:?} vs {:?}",
            frames_total.shape(),
            frames_spatial.shape()
        )));
    }
    if jacobians_total.len() != jacobians_spatial.len() {
        return Err(Error::invalid(format!(
            "Jacobian sequences disagree: {} vs {} frames",
            jacobians_total.len(),
            jacobians_spatial.len()
        )));
    }
    if jacobians_total.is_empty() {
        return Err(Error::invalid("flow-matching needs at least one frame of Jacobians"));
    }
    for (t, (a, b)) in jacobians_total.iter().zip(jacobians_spatial).enumerate() {
        if a.face_count() != b.face_count() {
            return Err(Error::invalid(format!(
                "frame {t}: Jacobian fields cover {} vs {} faces",
                a.face_count(),
                b.face_count()
            )));
        }
    }
    let schedule = config.schedule()?;

    // Score-consistency term, Monte-Carlo over noise levels.
    let mut score_term = T::zero();
    let mut d_total = frames_total.zeros_like();
    let mut d_spatial = frames_spatial.zeros_like();
    let two = real::<T>(2.0);
    for _ in 0..config.samples {
        let tp = draw_noise_level(config.horizon, rng);
        let s_total = score_from_oracle(frames_total, tp, oracle, &schedule, condition)?;
        let s_spatial = score_from_oracle(frames_spatial, tp, oracle, &schedule, condition)?;
        let mut diff = s_total;
        diff.add_scaled(&s_spatial, -T::one())?;
        score_term += diff.norm_sq();
        // d‖diff‖²/d frames, treating the oracle as frozen: each score came
        // through the -1/sigma conversion, so the chain factor is -2/sigma
        // for the total stack and +2/sigma for the spatial one.
        let sigma = schedule.sigma(tp);
        d_total.add_scaled(&diff, -two / sigma)?;
        d_spatial.add_scaled(&diff, two / sigma)?;
    }
    let inv_samples = T::one() / real(config.samples as f64);
    score_term *= inv_samples;
    d_total.scale(inv_samples);
    d_spatial.scale(inv_samples);

    // Correction-magnitude penalty, averaged over frames.
    let frame_count = jacobians_total.len();
    let inv_frames = T::one() / real(frame_count as f64);
    let mut penalty = T::zero();
    let mut d_jac_total = Vec::with_capacity(frame_count);
    let mut d_jac_spatial = Vec::with_capacity(frame_count);
    for (a, b) in jacobians_total.iter().zip(jacobians_spatial) {
        penalty += a.dist_sq(b) * inv_frames;
        let diff = a.add_scaled(b, -T::one());
        let zero = JacobianField::zeros(a.face_count());
        d_jac_total.push(zero.add_scaled(&diff, two * inv_frames));
        d_jac_spatial.push(zero.add_scaled(&diff, -two * inv_frames));
    }

    let loss = score_term + penalty;
    if !loss.is_finite() {
        return Err(Error::numeric("flow-matching loss is non-finite"));
    }
    Ok(FlowMatchingResult {
        loss,
        score_term,
        penalty_term: penalty,
        d_frames_total: d_total,
        d_frames_spatial: d_spatial,
        d_jacobians_total: d_jac_total,
        d_jacobians_spatial: d_jac_spatial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{GaussianAnalytic, GaussianCovariance, TeacherOracle};
    use crate::linalg::DenseMat;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn stack_of(values: &[f64]) -> FrameStack<f64> {
        FrameStack::new(1, 1, values.len(), 1, values.to_vec()).unwrap()
    }

    fn config(samples: usize) -> GuidanceConfig<f64> {
        GuidanceConfig {
            guidance_scale: 0.0,
            lambda: 15.0,
            timestep_weight: 1.0,
            horizon: 1000.0,
            samples,
        }
    }

    #[test]
    fn teacher_at_its_own_clip_gives_exactly_zero_gradient() {
        let teacher = stack_of(&[0.2, 0.8, 0.5, 0.1]);
        let oracle = TeacherOracle::new(teacher.clone(), 1000.0).unwrap();
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..20 {
            let out = sds_gradient(&teacher, &oracle, &config(1), None, &mut rng).unwrap();
            // eps_hat reproduces the injected eps exactly, so every sample's
            // residual is zero to rounding.
            assert!(out.gradient.norm_sq() < 1e-24, "norm² {}", out.gradient.norm_sq());
            assert!(out.loss < 1e-24);
        }
    }

    #[test]
    fn zero_timestep_weight_kills_the_gradient() {
        let frames = stack_of(&[0.3, 0.6]);
        let oracle = GaussianAnalytic::standard(2, 1000.0).unwrap();
        let mut cfg = config(4);
        cfg.timestep_weight = 0.0;
        let mut rng = StdRng::seed_from_u64(7);
        let out = sds_gradient(&frames, &oracle, &cfg, None, &mut rng).unwrap();
        assert_eq!(out.gradient.norm_sq(), 0.0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn sds_is_deterministic_given_the_seed() {
        let frames = stack_of(&[0.1, 0.9, 0.4]);
        let oracle = GaussianAnalytic::standard(3, 1000.0).unwrap();
        let a = sds_gradient(&frames, &oracle, &config(3), None, &mut StdRng::seed_from_u64(5)).unwrap();
        let b = sds_gradient(&frames, &oracle, &config(3), None, &mut StdRng::seed_from_u64(5)).unwrap();
        assert_eq!(a.gradient.data(), b.gradient.data());
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn sds_mean_vanishes_at_the_gaussian_mode() {
        // At the mean of the oracle's Gaussian the estimator is unbiased
        // zero; over n samples its mean must sit within a few standard
        // errors of the origin.
        let dim = 6;
        let oracle = GaussianAnalytic::standard(dim, 1000.0).unwrap();
        let frames = stack_of(&vec![0.0; dim]);
        let mut rng = StdRng::seed_from_u64(2024);
        let n = 256;
        let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let out = sds_gradient(&frames, &oracle, &config(1), None, &mut rng).unwrap();
            samples.push(out.gradient.data().to_vec());
        }
        let mean: Vec<f64> = (0..dim)
            .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n as f64)
            .collect();
        let se_sq: f64 = (0..dim)
            .map(|i| {
                let var = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>()
                    / (n as f64 - 1.0);
                var / n as f64
            })
            .sum();
        let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        let se_norm = se_sq.sqrt();
        assert!(se_norm > 0.0, "estimator degenerated to a constant");
        assert!(
            mean_norm < 3.0 * se_norm,
            "mean norm {mean_norm} vs 3·SE {}",
            3.0 * se_norm
        );
    }

    #[test]
    fn flow_loss_is_exactly_zero_on_matching_inputs() {
        let frames = stack_of(&[0.4, 0.6, 0.2, 0.9]);
        let jac = vec![JacobianField::<f64>::identity(3), JacobianField::identity(3)];
        let oracle = GaussianAnalytic::standard(4, 1000.0).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let out = flow_matching_loss(
            &frames, &frames, &jac, &jac, &oracle, &config(4), None, &mut rng,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.score_term, 0.0);
        assert_eq!(out.penalty_term, 0.0);
        assert_eq!(out.d_frames_total.norm_sq(), 0.0);
        assert!(out.d_jacobians_total.iter().all(|f| f.to_flat().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn penalty_term_counts_identity_offsets() {
        // J − J^P = identity on every face of every frame: per-frame sum is
        // 2·faces (‖I‖²_F = 2), and the frame mean leaves exactly that.
        let frames = stack_of(&[0.5; 4]);
        let faces = 5;
        let jac_total = vec![JacobianField::<f64>::identity(faces); 3];
        let jac_spatial = vec![JacobianField::<f64>::zeros(faces); 3];
        let oracle = GaussianAnalytic::standard(4, 1000.0).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let out = flow_matching_loss(
            &frames, &frames, &jac_total, &jac_spatial, &oracle, &config(1), None, &mut rng,
        )
        .unwrap();
        assert!((out.penalty_term - 2.0 * faces as f64).abs() < 1e-12);
        assert_eq!(out.score_term, 0.0);
        // Gradient of the penalty: (2/N)·(J − J^P) = (2/3)·I per face.
        let g = &out.d_jacobians_total[0].faces()[0];
        assert!((g[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g[0][1]).abs() < 1e-12);
        let gs = &out.d_jacobians_spatial[1].faces()[2];
        assert!((gs[1][1] + 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_gap_matches_the_gaussian_closed_form() {
        // For a Gaussian oracle the score is -inv(Sigma)(x − mu) at every
        // noise level, so the score term is ‖inv(Sigma)·delta‖² exactly and
        // the Monte-Carlo average over t' adds no variance.
        let mut rng = StdRng::seed_from_u64(42);
        let dim = 5;
        let mut cov = DenseMat::<f64>::zeros(dim, dim);
        for i in 0..dim {
            cov[(i, i)] = 1.0 + 0.3 * i as f64;
        }
        let oracle = GaussianAnalytic::new(
            vec![0.0; dim],
            GaussianCovariance::Dense(cov.clone()),
            1000.0,
        )
        .unwrap();
        let base: Vec<f64> = (0..dim).map(|i| 0.1 * i as f64).collect();
        let delta: Vec<f64> = (0..dim).map(|i| 0.05 * (i as f64 + 1.0)).collect();
        let shifted: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
        let jac = vec![JacobianField::<f64>::identity(2)];
        let out = flow_matching_loss(
            &stack_of(&shifted),
            &stack_of(&base),
            &jac,
            &jac,
            &oracle,
            &config(8),
            None,
            &mut rng,
        )
        .unwrap();
        let want: f64 = delta
            .iter()
            .enumerate()
            .map(|(i, d)| (d / cov[(i, i)]).powi(2))
            .sum();
        assert!(
            (out.score_term - want).abs() < 1e-10 * want.max(1.0),
            "{} vs {want}",
            out.score_term
        );
        assert_eq!(out.penalty_term, 0.0);
    }

    #[test]
    fn flow_loss_rejects_mismatched_sequences() {
        let frames = stack_of(&[0.1, 0.2]);
        let other = FrameStack::new(2, 1, 1, 1, vec![0.1, 0.2]).unwrap();
        let oracle = GaussianAnalytic::standard(2, 1000.0).unwrap();
        let jac2 = vec![JacobianField::<f64>::identity(1); 2];
        let jac3 = vec![JacobianField::<f64>::identity(1); 3];
        let mut rng = StdRng::seed_from_u64(0);
        assert!(flow_matching_loss(
            &frames, &other, &jac2, &jac2, &oracle, &config(1), None, &mut rng
        )
        .is_err());
        assert!(flow_matching_loss(
            &frames, &frames, &jac3, &jac2, &oracle, &config(1), None, &mut rng
        )
        .is_err());
    }
}
