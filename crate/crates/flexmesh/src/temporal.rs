//! Temporal Jacobian corrections driven by a learned ODE.
//!
//! The per-frame spatial Jacobian fields J^P tell each face where the
//! keypoint trajectories want it; they know nothing about temporal
//! coherence. This module adds a correction field J^R per frame, defined as
//! the explicit-Euler integral of a learned rate:
//!
//! ```text
//!   J^R_0 = 0
//!   J^R_{t+1} = J^R_t + h * rate(t),      h = 1 / (N - 1)
//! ```
//!
//! The rate for a face combines the face's rest spatial Jacobian, two
//! attention encodings (one over a sliding window of recent spatial fields,
//! one over past corrections), and sinusoidal time features. Because the
//! correction head is zero-initialized, integration starts as the identity
//! and the optimizer grows corrections only where the guidance losses ask
//! for them.
//!
//! [`integrate_backward`] replays the recursion in reverse (backpropagation
//! through time): gradients flow along the Euler identity path and through
//! every window either into earlier correction frames or out into the
//! spatial fields.

use crate::error::{Error, Result};
use crate::mesh::JacobianField;
use crate::nnkit::{
    attention_backward, attention_forward, init_attention, init_mlp, mlp_backward, mlp_forward,
    AttentionSpec, AttnTape, Grads, MlpSpec, MlpTape, ParamStore,
};
use crate::scalar::{real, Real};
use rand::Rng;

/// Sizes of the temporal network.
#[derive(Debug, Clone)]
pub struct TemporalConfig {
    /// How many recent frames each attention encoder sees.
    pub window: usize,
    /// Dimension of each pooled window encoding.
    pub enc_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Hidden widths of the rate MLP.
    pub hidden: Vec<usize>,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            window: 6,
            enc_dim: 16,
            heads: 2,
            head_dim: 32,
            hidden: vec![32, 32],
        }
    }
}

const SPATIAL_ENCODER: &str = "temporal.enc_p";
const CORRECTION_ENCODER: &str = "temporal.enc_r";
const RATE_MLP: &str = "temporal.rate";

/// A face Jacobian flattens to four scalars; attention tokens are
/// face-averaged flattened fields.
const TOKEN_DIM: usize = 4;
const TIME_FEATURES: usize = 4;

/// Fixed damping applied to the rate head output, mirroring the trajectory
/// offset unit. Corrections are perturbations of unit-scale Jacobians, so
/// the damping is sized to keep one optimizer step's worth of head movement
/// well inside that range; without it a few large steps launch the
/// correction fields far outside the region where the loss is informative.
const RATE_UNIT: f64 = 1.0 / 1024.0;

impl TemporalConfig {
    fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            input_dim: TOKEN_DIM,
            heads: self.heads,
            head_dim: self.head_dim,
            output_dim: self.enc_dim,
        }
    }

    fn rate_spec(&self) -> MlpSpec {
        let mut sizes = vec![TOKEN_DIM + 2 * self.enc_dim + TIME_FEATURES];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(TOKEN_DIM);
        MlpSpec::new(&sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("temporal window must be at least 1"));
        }
        Ok(())
    }
}

/// Registers both window encoders and the rate MLP. The rate head is
/// zero-initialized so corrections start exactly at zero.
pub fn init_temporal<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &TemporalConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    init_attention(store, SPATIAL_ENCODER, &cfg.attention_spec(), rng)?;
    init_attention(store, CORRECTION_ENCODER, &cfg.attention_spec(), rng)?;
    init_mlp(store, RATE_MLP, &cfg.rate_spec(), rng, true)?;
    Ok(())
}

/// Spatial fields plus integrated corrections for one clip.
#[derive(Debug, Clone)]
pub struct TemporalState<T> {
    spatial: Vec<JacobianField<T>>,
    temporal: Vec<JacobianField<T>>,
}

impl<T: Real> TemporalState<T> {
    pub fn frame_count(&self) -> usize {
        self.spatial.len()
    }

    pub fn face_count(&self) -> usize {
        self.spatial[0].face_count()
    }

    pub fn spatial(&self) -> &[JacobianField<T>] {
        &self.spatial
    }

    /// Correction fields; frame 0 is always the zero field.
    pub fn temporal(&self) -> &[JacobianField<T>] {
        &self.temporal
    }

    /// Total field `J_t = J^P_t + J^R_t` handed to the deformation solver.
    pub fn total(&self, t: usize) -> JacobianField<T> {
        self.spatial[t].add_scaled(&self.temporal[t], T::one())
    }
}

/// Mean over faces of the flattened 2x2 entries.
fn mean_token<T: Real>(field: &JacobianField<T>) -> Vec<T> {
    let inv = real::<T>(1.0 / field.face_count() as f64);
    let mut token = vec![T::zero(); TOKEN_DIM];
    for m in field.faces() {
        token[0] += m[0][0];
        token[1] += m[0][1];
        token[2] += m[1][0];
        token[3] += m[1][1];
    }
    for x in &mut token {
        *x *= inv;
    }
    token
}

/// Correction tokens are squashed entrywise so that a growing correction
/// field cannot inflate the rate network's own input scale; that feedback
/// loop otherwise diverges under aggressive optimizer steps.
fn bounded_token<T: Real>(field: &JacobianField<T>) -> Vec<T> {
    mean_token(field).into_iter().map(|x| x.tanh()).collect()
}

/// Adjoint of [`mean_token`]: spreads a token cotangent uniformly over the
/// faces of a field.
fn spread_token<T: Real>(token: &[T], face_count: usize) -> JacobianField<T> {
    let inv = real::<T>(1.0 / face_count as f64);
    let m = [
        [token[0] * inv, token[1] * inv],
        [token[2] * inv, token[3] * inv],
    ];
    JacobianField::new(vec![m; face_count])
}

/// Frames feeding the spatial encoder for the rate at time `t`: the most
/// recent `window` spatial fields up to and including `t`.
fn spatial_window(t: usize, window: usize) -> std::ops::RangeInclusive<usize> {
    t.saturating_sub(window - 1)..=t
}

/// Frames feeding the correction encoder at time `t`: the most recent
/// `window` corrections strictly before `t`. At `t = 0` nothing precedes
/// the step, so the window holds the zero correction frame itself.
fn correction_window(t: usize, window: usize) -> std::ops::RangeInclusive<usize> {
    if t == 0 {
        0..=0
    } else {
        t.saturating_sub(window)..=t - 1
    }
}

/// Per-step byproducts for the backward pass.
struct StepTape<T> {
    spatial_attn: AttnTape<T>,
    correction_attn: AttnTape<T>,
    rate_tapes: Vec<MlpTape<T>>,
}

/// Everything [`integrate_backward`] needs to replay the recursion.
pub struct IntegrationTape<T> {
    steps: Vec<StepTape<T>>,
}

fn time_features<T: Real>(t: usize, frames: usize) -> [T; TIME_FEATURES] {
    let u = t as f64 / (frames - 1) as f64;
    [
        real((std::f64::consts::TAU * u).sin()),
        real((std::f64::consts::TAU * u).cos()),
        real((2.0 * std::f64::consts::TAU * u).sin()),
        real((2.0 * std::f64::consts::TAU * u).cos()),
    ]
}

/// Evaluates the learned rate at time `t` given all frames up to `t`.
fn rate_at<T: Real>(
    store: &ParamStore<T>,
    cfg: &TemporalConfig,
    spatial: &[JacobianField<T>],
    corrections: &[JacobianField<T>],
    t: usize,
) -> Result<(JacobianField<T>, StepTape<T>)> {
    let frames = spatial.len();
    let faces = spatial[0].face_count();
    let attn = cfg.attention_spec();
    let p_tokens: Vec<Vec<T>> = spatial_window(t, cfg.window)
        .map(|k| mean_token(&spatial[k]))
        .collect();
    let (enc_p, spatial_attn) = attention_forward(store, SPATIAL_ENCODER, &attn, &p_tokens)?;
    let r_tokens: Vec<Vec<T>> = correction_window(t, cfg.window)
        .map(|k| bounded_token(&corrections[k]))
        .collect();
    let (enc_r, correction_attn) =
        attention_forward(store, CORRECTION_ENCODER, &attn, &r_tokens)?;
    let feats = time_features::<T>(t, frames);
    let spec = cfg.rate_spec();
    let rest = &spatial[0];
    let mut rate = Vec::with_capacity(faces);
    let mut rate_tapes = Vec::with_capacity(faces);
    for f in 0..faces {
        let j0 = rest.faces()[f];
        let mut input = Vec::with_capacity(spec.sizes[0]);
        input.extend_from_slice(&[j0[0][0], j0[0][1], j0[1][0], j0[1][1]]);
        input.extend_from_slice(&enc_p);
        input.extend_from_slice(&enc_r);
        input.extend_from_slice(&feats);
        let (out, tape) = mlp_forward(store, RATE_MLP, &spec, &input)?;
        let ru = real::<T>(RATE_UNIT);
        rate.push([[out[0] * ru, out[1] * ru], [out[2] * ru, out[3] * ru]]);
        rate_tapes.push(tape);
    }
    Ok((
        JacobianField::new(rate),
        StepTape {
            spatial_attn,
            correction_attn,
            rate_tapes,
        },
    ))
}

/// Integrates the correction fields across the clip with explicit Euler
/// steps of size `1 / (N - 1)`.
pub fn integrate<T: Real>(
    spatial: Vec<JacobianField<T>>,
    store: &ParamStore<T>,
    cfg: &TemporalConfig,
) -> Result<(TemporalState<T>, IntegrationTape<T>)> {
    cfg.validate()?;
    let frames = spatial.len();
    if frames < 2 {
        return Err(Error::invalid("temporal integration needs at least 2 frames"));
    }
    let faces = spatial[0].face_count();
    if spatial.iter().any(|f| f.face_count() != faces) {
        return Err(Error::invalid("spatial fields disagree on face count"));
    }
    let h = real::<T>(1.0 / (frames - 1) as f64);
    let mut corrections = vec![JacobianField::zeros(faces)];
    let mut steps = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let (rate, tape) = rate_at(store, cfg, &spatial, &corrections, t)?;
        corrections.push(corrections[t].add_scaled(&rate, h));
        steps.push(tape);
    }
    Ok((
        TemporalState {
            spatial,
            temporal: corrections,
        },
        IntegrationTape { steps },
    ))
}

/// Backpropagation through time for [`integrate`].
///
/// `d_temporal[t]` is the loss cotangent on correction frame `t`; the
/// return value is the loss cotangent on each spatial field (including the
/// rest-frame contributions that every step's rate input produces).
/// Parameter gradients accumulate into `grads`.
pub fn integrate_backward<T: Real>(
    state: &TemporalState<T>,
    tape: &IntegrationTape<T>,
    store: &ParamStore<T>,
    cfg: &TemporalConfig,
    d_temporal: &[JacobianField<T>],
    grads: &mut Grads<T>,
) -> Result<Vec<JacobianField<T>>> {
    let frames = state.frame_count();
    let faces = state.face_count();
    if d_temporal.len() != frames {
        return Err(Error::invalid(format!(
            "got {} correction cotangents for {frames} frames",
            d_temporal.len()
        )));
    }
    let h = real::<T>(1.0 / (frames - 1) as f64);
    let attn = cfg.attention_spec();
    let spec = cfg.rate_spec();
    let mut acc: Vec<JacobianField<T>> = d_temporal.to_vec();
    let mut d_spatial = vec![JacobianField::zeros(faces); frames];
    for t in (0..frames - 1).rev() {
        let d_next = acc[t + 1].clone();
        // Identity path of the Euler step.
        acc[t] = acc[t].add_scaled(&d_next, T::one());
        // Rate path, scaled by the step size.
        let step = &tape.steps[t];
        let enc = cfg.enc_dim;
        let mut d_enc_p = vec![T::zero(); enc];
        let mut d_enc_r = vec![T::zero(); enc];
        let hu = h * real::<T>(RATE_UNIT);
        for f in 0..faces {
            let dm = d_next.faces()[f];
            let d_out = [
                hu * dm[0][0],
                hu * dm[0][1],
                hu * dm[1][0],
                hu * dm[1][1],
            ];
            let d_input =
                mlp_backward(store, RATE_MLP, &spec, &step.rate_tapes[f], &d_out, grads)?;
            {
                let face = &mut d_spatial[0].faces_mut()[f];
                face[0][0] += d_input[0];
                face[0][1] += d_input[1];
                face[1][0] += d_input[2];
                face[1][1] += d_input[3];
            }
            for i in 0..enc {
                d_enc_p[i] += d_input[TOKEN_DIM + i];
                d_enc_r[i] += d_input[TOKEN_DIM + enc + i];
            }
            // Time features depend on t only; nothing to propagate.
        }
        let d_p_tokens =
            attention_backward(store, SPATIAL_ENCODER, &attn, &step.spatial_attn, &d_enc_p, grads)?;
        for (k, d_tok) in spatial_window(t, cfg.window).zip(&d_p_tokens) {
            let delta = spread_token(d_tok, faces);
            d_spatial[k] = d_spatial[k].add_scaled(&delta, T::one());
        }
        let d_r_tokens = attention_backward(
            store,
            CORRECTION_ENCODER,
            &attn,
            &step.correction_attn,
            &d_enc_r,
            grads,
        )?;
        for (k, d_tok) in correction_window(t, cfg.window).zip(&d_r_tokens) {
            if k == 0 {
                // Correction frame 0 is a constant.
                continue;
            }
            // Chain through the entrywise squashing of the token.
            let mean = mean_token(&state.temporal[k]);
            let d_mean: Vec<T> = d_tok
                .iter()
                .zip(&mean)
                .map(|(&d, &m)| {
                    let th = m.tanh();
                    d * (T::one() - th * th)
                })
                .collect();
            let delta = spread_token(&d_mean, faces);
            acc[k] = acc[k].add_scaled(&delta, T::one());
        }
    }
    Ok(d_spatial)
}
