//! Cubic Bezier keypoint trajectories and their MLP parameterization.
//!
//! Every keypoint moves along one cubic Bezier curve over the clip. The
//! first control point is pinned to the keypoint's rest position, so frame
//! zero always shows the undeformed input. The remaining three control
//! points are predicted as offsets from rest by a small network that eats
//! the rest position and a learned per-keypoint embedding; with a
//! zero-initialized final layer the whole clip starts out stationary.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::nnkit::{init_mlp, mlp_backward, mlp_forward, Grads, MlpSpec, MlpTape, ParamStore, Tensor};
use crate::scalar::{real, to_f64, Real};

/// Control-point offsets are expressed in pixels of a nominal 256-pixel
/// reference frame; this converts them to normalized image units.
pub const OFFSET_UNIT: f64 = 1.0 / 256.0;

/// Bernstein basis of degree 3 at `u`.
pub fn bernstein<T: Real>(u: T) -> Result<[T; 4]> {
    if !(u >= T::zero() && u <= T::one()) {
        return Err(Error::invalid(format!(
            "bezier parameter must lie in [0, 1], got {u}"
        )));
    }
    let v = T::one() - u;
    let three = real::<T>(3.0);
    Ok([
        v * v * v,
        three * v * v * u,
        three * v * u * u,
        u * u * u,
    ])
}

/// One cubic Bezier per keypoint, shared frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet<T> {
    /// `control_points[i][j]` is control point `j` of keypoint `i`.
    control_points: Vec<[Vec2<T>; 4]>,
    frame_count: usize,
}

impl<T: Real> TrajectorySet<T> {
    pub fn new(control_points: Vec<[Vec2<T>; 4]>, frame_count: usize) -> Result<Self> {
        if frame_count < 2 {
            return Err(Error::invalid(format!(
                "a clip needs at least 2 frames, got {frame_count}"
            )));
        }
        if control_points.is_empty() {
            return Err(Error::invalid("trajectory set has no keypoints"));
        }
        for (i, cps) in control_points.iter().enumerate() {
            for (j, c) in cps.iter().enumerate() {
                if !(c[0].is_finite() && c[1].is_finite()) {
                    return Err(Error::invalid(format!(
                        "control point {j} of keypoint {i} is non-finite"
                    )));
                }
            }
        }
        Ok(TrajectorySet {
            control_points,
            frame_count,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.control_points.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn control_points(&self) -> &[[Vec2<T>; 4]] {
        &self.control_points
    }

    /// Confirms that every curve starts at the given rest position.
    pub fn validate_rest(&self, rest: &[Vec2<T>]) -> Result<()> {
        if rest.len() != self.control_points.len() {
            return Err(Error::invalid(format!(
                "trajectory has {} keypoints, mesh has {}",
                self.control_points.len(),
                rest.len()
            )));
        }
        let tol = real::<T>(1e-9);
        for (i, (cps, r)) in self.control_points.iter().zip(rest).enumerate() {
            if (cps[0][0] - r[0]).abs() > tol || (cps[0][1] - r[1]).abs() > tol {
                return Err(Error::invalid(format!(
                    "keypoint {i} trajectory starts at ({}, {}) but rests at ({}, {})",
                    cps[0][0], cps[0][1], r[0], r[1]
                )));
            }
        }
        Ok(())
    }

    fn frame_param(&self, t: usize) -> Result<T> {
        if t >= self.frame_count {
            return Err(Error::invalid(format!(
                "frame {t} out of range for a {}-frame clip",
                self.frame_count
            )));
        }
        Ok(real::<T>(t as f64 / (self.frame_count - 1) as f64))
    }

    /// Keypoint positions at frame `t` (with `u = t / (N-1)`).
    pub fn sample(&self, t: usize) -> Result<Vec<Vec2<T>>> {
        let basis = bernstein(self.frame_param(t)?)?;
        Ok(self
            .control_points
            .iter()
            .map(|cps| {
                let mut p = [T::zero(); 2];
                for (b, c) in basis.iter().zip(cps) {
                    p[0] += *b * c[0];
                    p[1] += *b * c[1];
                }
                p
            })
            .collect())
    }

    /// Adjoint of [`Self::sample`]: distributes position cotangents onto
    /// control points with the Bernstein weights.
    pub fn sample_gradient(&self, t: usize, d_positions: &[Vec2<T>]) -> Result<Vec<[Vec2<T>; 4]>> {
        if d_positions.len() != self.control_points.len() {
            return Err(Error::invalid("sample gradient keypoint count mismatch"));
        }
        let basis = bernstein(self.frame_param(t)?)?;
        Ok(d_positions
            .iter()
            .map(|d| {
                let mut out = [[T::zero(); 2]; 4];
                for (slot, b) in out.iter_mut().zip(basis) {
                    slot[0] = b * d[0];
                    slot[1] = b * d[1];
                }
                out
            })
            .collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let raw = TrajectoryJson {
            frame_count: self.frame_count,
            control_points: self
                .control_points
                .iter()
                .map(|cps| cps.map(|c| [to_f64(c[0]), to_f64(c[1])]))
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&raw)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw: TrajectoryJson = serde_json::from_str(&fs::read_to_string(path)?)?;
        TrajectorySet::new(
            raw.control_points
                .into_iter()
                .map(|cps| cps.map(|c| [real::<T>(c[0]), real::<T>(c[1])]))
                .collect(),
            raw.frame_count,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    frame_count: usize,
    control_points: Vec<[[f64; 2]; 4]>,
}

/// Network layout for the trajectory head.
#[derive(Debug, Clone)]
pub struct TrajectoryMlpConfig<T> {
    /// Width of the learned per-keypoint embedding.
    pub embed_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Scales predicted offsets; smaller values damp motion.
    pub motion_scale: T,
}

impl<T: Real> Default for TrajectoryMlpConfig<T> {
    fn default() -> Self {
        TrajectoryMlpConfig {
            embed_dim: 8,
            hidden: vec![64, 64, 64],
            motion_scale: real(0.5),
        }
    }
}

impl<T: Real> TrajectoryMlpConfig<T> {
    pub fn mlp_spec(&self) -> MlpSpec {
        let mut sizes = vec![2 + self.embed_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(6);
        MlpSpec::new(&sizes)
    }
}

const MLP_PREFIX: &str = "traj.mlp";
const EMBED_NAME: &str = "traj.embed";

/// Registers the trajectory network: a four-layer MLP whose final layer is
/// zero (stationary start) plus one embedding row per keypoint.
pub fn init_trajectory_mlp<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &TrajectoryMlpConfig<T>,
    keypoint_count: usize,
    rng: &mut R,
) -> Result<()> {
    init_mlp(store, MLP_PREFIX, &cfg.mlp_spec(), rng, true)?;
    let bound = (cfg.embed_dim as f64).sqrt().recip();
    let data: Vec<T> = (0..keypoint_count * cfg.embed_dim)
        .map(|_| real::<T>(rng.gen_range(-bound..bound)))
        .collect();
    store.insert(EMBED_NAME, Tensor::new(vec![keypoint_count, cfg.embed_dim], data)?)?;
    Ok(())
}

/// Per-keypoint tapes for [`parameterize_backward`].
#[derive(Debug, Clone)]
pub struct TrajectoryTape<T> {
    tapes: Vec<MlpTape<T>>,
}

/// Builds the trajectory set from the network: control point 0 is the rest
/// position; control points 1..3 are rest plus scaled offsets from the six
/// network outputs.
pub fn parameterize_mlp<T: Real>(
    store: &ParamStore<T>,
    cfg: &TrajectoryMlpConfig<T>,
    rest: &[Vec2<T>],
    frame_count: usize,
) -> Result<(TrajectorySet<T>, TrajectoryTape<T>)> {
    let embed = store.get(EMBED_NAME)?;
    if embed.shape() != [rest.len(), cfg.embed_dim] {
        return Err(Error::invalid(format!(
            "embedding table has shape {:?}, expected [{}, {}]",
            embed.shape(),
            rest.len(),
            cfg.embed_dim
        )));
    }
    let spec = cfg.mlp_spec();
    let unit = cfg.motion_scale * real::<T>(OFFSET_UNIT);
    let mut control_points = Vec::with_capacity(rest.len());
    let mut tapes = Vec::with_capacity(rest.len());
    for (i, r) in rest.iter().enumerate() {
        let mut input = vec![r[0], r[1]];
        input.extend_from_slice(&embed.data()[i * cfg.embed_dim..(i + 1) * cfg.embed_dim]);
        let (out, tape) = mlp_forward(store, MLP_PREFIX, &spec, &input)?;
        let mut cps = [[T::zero(); 2]; 4];
        cps[0] = *r;
        for j in 0..3 {
            cps[j + 1] = [r[0] + unit * out[2 * j], r[1] + unit * out[2 * j + 1]];
        }
        control_points.push(cps);
        tapes.push(tape);
    }
    Ok((
        TrajectorySet::new(control_points, frame_count)?,
        TrajectoryTape { tapes },
    ))
}

/// Backpropagates control-point cotangents into the network parameters and
/// the embedding table. Gradients on control point 0 are ignored: it is
/// pinned to rest and no parameter influences it.
pub fn parameterize_backward<T: Real>(
    store: &ParamStore<T>,
    cfg: &TrajectoryMlpConfig<T>,
    tape: &TrajectoryTape<T>,
    d_control: &[[Vec2<T>; 4]],
    grads: &mut Grads<T>,
) -> Result<()> {
    if d_control.len() != tape.tapes.len() {
        return Err(Error::invalid("control point gradient count mismatch"));
    }
    let spec = cfg.mlp_spec();
    let unit = cfg.motion_scale * real::<T>(OFFSET_UNIT);
    let embed_len = tape.tapes.len() * cfg.embed_dim;
    for (i, (mlp_tape, d_cps)) in tape.tapes.iter().zip(d_control).enumerate() {
        let mut d_out = vec![T::zero(); 6];
        for j in 0..3 {
            d_out[2 * j] = unit * d_cps[j + 1][0];
            d_out[2 * j + 1] = unit * d_cps[j + 1][1];
        }
        let d_input = mlp_backward(store, MLP_PREFIX, &spec, mlp_tape, &d_out, grads)?;
        let ge = grads.entry(EMBED_NAME, embed_len);
        for (slot, d) in ge[i * cfg.embed_dim..(i + 1) * cfg.embed_dim]
            .iter_mut()
            .zip(&d_input[2..])
        {
            *slot += *d;
        }
    }
    Ok(())
}
