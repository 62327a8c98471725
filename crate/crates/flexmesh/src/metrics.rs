//! Animation quality metrics over keypoint motion.
//!
//! Deformation smoothness (DS) averages how much the inter-frame
//! displacement vector changes between consecutive frames — a discrete
//! second difference, lower is smoother. Animation energy (AE) averages the
//! squared excursion from the first frame — higher is more dynamic. Both are
//! computed per keypoint and reported with their mean.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, sub2, Vec2};
use crate::scalar::{real, Real};
use crate::trajectory::TrajectorySet;

/// Per-frame, per-keypoint positions: `positions[t][i]` is keypoint `i` at
/// frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionRecord<T> {
    positions: Vec<Vec<Vec2<T>>>,
}

#[derive(Serialize, Deserialize)]
struct MotionRecordJson {
    positions: Vec<Vec<[f64; 2]>>,
}

impl<T: Real> MotionRecord<T> {
    pub fn new(positions: Vec<Vec<Vec2<T>>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("motion record needs at least one frame"));
        }
        let m = positions[0].len();
        if m == 0 {
            return Err(Error::invalid("motion record needs at least one keypoint"));
        }
        for (t, frame) in positions.iter().enumerate() {
            if frame.len() != m {
                return Err(Error::invalid(format!(
                    "frame {t} tracks {} keypoints, frame 0 tracks {m}",
                    frame.len()
                )));
            }
            if frame.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(Error::invalid(format!("frame {t} contains non-finite positions")));
            }
        }
        Ok(MotionRecord { positions })
    }

    /// Samples every frame of a trajectory set into a record.
    pub fn from_trajectories(trajectories: &TrajectorySet<T>) -> Result<Self> {
        let n = trajectories.frame_count();
        let mut positions = Vec::with_capacity(n);
        for t in 0..n {
            positions.push(trajectories.sample(t)?);
        }
        MotionRecord::new(positions)
    }

    /// Treats each keypoint's four control points as a four-frame record,
    /// for measuring the control polygon instead of the sampled path.
    pub fn from_control_points(trajectories: &TrajectorySet<T>) -> Result<Self> {
        let positions = (0..4)
            .map(|j| {
                trajectories
                    .control_points()
                    .iter()
                    .map(|cps| cps[j])
                    .collect()
            })
            .collect();
        MotionRecord::new(positions)
    }

    pub fn frame_count(&self) -> usize {
        self.positions.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.positions[0].len()
    }

    pub fn positions(&self) -> &[Vec<Vec2<T>>] {
        &self.positions
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw: MotionRecordJson = serde_json::from_reader(std::fs::File::open(path)?)?;
        let positions = raw
            .positions
            .into_iter()
            .map(|frame| frame.into_iter().map(|p| [real(p[0]), real(p[1])]).collect())
            .collect();
        MotionRecord::new(positions)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let raw = MotionRecordJson {
            positions: self
                .positions
                .iter()
                .map(|frame| {
                    frame
                        .iter()
                        .map(|p| [crate::scalar::to_f64(p[0]), crate::scalar::to_f64(p[1])])
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(path)?, &raw)?;
        Ok(())
    }

    /// Inter-frame displacement of keypoint `i` at frame `t`, with the
    /// convention that frame 0 has zero displacement.
    fn displacement(&self, t: usize, i: usize) -> Vec2<T> {
        if t == 0 {
            [T::zero(), T::zero()]
        } else {
            sub2(self.positions[t][i], self.positions[t - 1][i])
        }
    }
}

/// Per-keypoint deformation smoothness:
/// `(1/(N−1)) · Σ_{t=1..N−1} ‖d_t − d_{t−1}‖` with `d_t = p_t − p_{t−1}`
/// and `d_0 = 0`.
pub fn per_keypoint_smoothness<T: Real>(record: &MotionRecord<T>) -> Result<Vec<T>> {
    let n = record.frame_count();
    if n < 3 {
        return Err(Error::invalid(format!(
            "deformation smoothness needs at least 3 frames, got {n}"
        )));
    }
    let denom = real::<T>((n - 1) as f64);
    Ok((0..record.keypoint_count())
        .map(|i| {
            let mut acc = T::zero();
            for t in 1..n {
                let jerk = sub2(record.displacement(t, i), record.displacement(t - 1, i));
                acc += norm2(jerk);
            }
            acc / denom
        })
        .collect())
}

/// Deformation smoothness DS: mean over keypoints of the per-keypoint value.
pub fn deformation_smoothness<T: Real>(record: &MotionRecord<T>) -> Result<T> {
    let per = per_keypoint_smoothness(record)?;
    let m = real::<T>(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / m)
}

/// Per-keypoint animation energy:
/// `(1/N) · Σ_{t=1..N−1} ‖p_t − p_0‖²`.
pub fn per_keypoint_energy<T: Real>(record: &MotionRecord<T>) -> Result<Vec<T>> {
    let n = record.frame_count();
    if n < 2 {
        return Err(Error::invalid(format!(
            "animation energy needs at least 2 frames, got {n}"
        )));
    }
    let denom = real::<T>(n as f64);
    Ok((0..record.keypoint_count())
        .map(|i| {
            let p0 = record.positions[0][i];
            let mut acc = T::zero();
            for frame in &record.positions[1..] {
                let d = sub2(frame[i], p0);
                acc += d[0] * d[0] + d[1] * d[1];
            }
            acc / denom
        })
        .collect())
}

/// Animation energy AE: mean over keypoints of the per-keypoint value.
pub fn animation_energy<T: Real>(record: &MotionRecord<T>) -> Result<T> {
    let per = per_keypoint_energy(record)?;
    let m = real::<T>(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / m)
}

/// CSV report with the overall value and the per-keypoint breakdown:
/// one row per metric, columns `metric,overall,k0,k1,...`.
pub fn csv_report<T: Real>(record: &MotionRecord<T>) -> Result<String> {
    let ds = per_keypoint_smoothness(record)?;
    let ae = per_keypoint_energy(record)?;
    let mut out = String::from("metric,overall");
    for i in 0..record.keypoint_count() {
        out.push_str(&format!(",k{i}"));
    }
    out.push('\n');
    let mut write_row = |name: &str, overall: T, per: &[T]| {
        out.push_str(name);
        out.push_str(&format!(",{}", crate::scalar::to_f64(overall)));
        for v in per {
            out.push_str(&format!(",{}", crate::scalar::to_f64(*v)));
        }
        out.push('\n');
    };
    write_row("deformation_smoothness", deformation_smoothness(record)?, &ds);
    write_row("animation_energy", animation_energy(record)?, &ae);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn single_keypoint(path: &[[f64; 2]]) -> MotionRecord<f64> {
        MotionRecord::new(path.iter().map(|&p| vec![p]).collect()).unwrap()
    }

    fn random_record(seed: u64, n: usize, m: usize) -> MotionRecord<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        MotionRecord::new(
            (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn static_motion_scores_zero_on_both_metrics() {
        let rec = MotionRecord::new(vec![vec![[0.3, 0.7], [0.1, 0.2]]; 6]).unwrap();
        assert_eq!(deformation_smoothness(&rec).unwrap(), 0.0);
        assert_eq!(animation_energy(&rec).unwrap(), 0.0);
    }

    #[test]
    fn constant_velocity_leaves_only_the_boundary_term() {
        // d_t = v for t >= 1 and d_0 = 0, so the only nonzero jerk is at
        // t = 1 and DS = ‖v‖/(N−1).
        let v = [0.03, -0.04]; // ‖v‖ = 0.05
        let n = 6;
        let path: Vec<[f64; 2]> = (0..n)
            .map(|t| [0.1 + v[0] * t as f64, 0.9 + v[1] * t as f64])
            .collect();
        let ds = deformation_smoothness(&single_keypoint(&path)).unwrap();
        assert!((ds - 0.05 / (n - 1) as f64).abs() < 1e-15, "{ds}");
    }

    #[test]
    fn alternating_steps_match_the_hand_evaluated_sum() {
        // Steps +delta, -delta, +delta, ...: jerk is ‖delta‖ at t = 1 and
        // 2‖delta‖ afterwards, so DS = (2‖delta‖(N−2) + ‖delta‖)/(N−1).
        let delta = [0.06, 0.08]; // norm 0.1
        let n = 7;
        let mut pos = [0.5, 0.5];
        let mut path = vec![pos];
        for t in 0..n - 1 {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            pos = [pos[0] + sign * delta[0], pos[1] + sign * delta[1]];
            path.push(pos);
        }
        let ds = deformation_smoothness(&single_keypoint(&path)).unwrap();
        let want = (2.0 * 0.1 * (n as f64 - 2.0) + 0.1) / (n as f64 - 1.0);
        assert!((ds - want).abs() < 1e-15, "{ds} vs {want}");
    }

    #[test]
    fn constant_offset_energy_matches_the_direct_sum() {
        // p_t = p_0 + r for all t >= 1: AE = ‖r‖²·(N−1)/N.
        let r = [0.3, 0.4]; // ‖r‖² = 0.25
        let n = 5;
        let mut path = vec![[0.2, 0.2]];
        path.extend(std::iter::repeat([0.2 + r[0], 0.2 + r[1]]).take(n - 1));
        let ae = animation_energy(&single_keypoint(&path)).unwrap();
        let want = 0.25 * (n as f64 - 1.0) / n as f64;
        assert!((ae - want).abs() < 1e-15, "{ae} vs {want}");
    }

    #[test]
    fn energy_is_homogeneous_of_degree_two() {
        let rec = random_record(9, 8, 3);
        let alpha = 1.7;
        let scaled = MotionRecord::new(
            rec.positions()
                .iter()
                .map(|frame| {
                    frame
                        .iter()
                        .map(|p| {
                            let base = rec.positions()[0][0];
                            // scale displacements about frame-0 keypoint 0
                            [
                                base[0] + alpha * (p[0] - base[0]),
                                base[1] + alpha * (p[1] - base[1]),
                            ]
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let ae = animation_energy(&rec).unwrap();
        let ae_scaled = animation_energy(&scaled).unwrap();
        assert!(
            (ae_scaled - alpha * alpha * ae).abs() < 1e-12 * ae.max(1.0),
            "{ae_scaled} vs {}",
            alpha * alpha * ae
        );
    }

    #[test]
    fn both_metrics_ignore_a_global_translation() {
        let rec = random_record(4, 7, 2);
        let shifted = MotionRecord::new(
            rec.positions()
                .iter()
                .map(|f| f.iter().map(|p| [p[0] + 3.2, p[1] - 1.1]).collect())
                .collect(),
        )
        .unwrap();
        let ds = deformation_smoothness(&rec).unwrap();
        let ae = animation_energy(&rec).unwrap();
        assert!((deformation_smoothness(&shifted).unwrap() - ds).abs() < 1e-12);
        assert!((animation_energy(&shifted).unwrap() - ae).abs() < 1e-12);
    }

    #[test]
    fn nonstatic_motion_has_positive_smoothness() {
        let rec = random_record(12, 6, 4);
        assert!(deformation_smoothness(&rec).unwrap() > 0.0);
    }

    #[test]
    fn overall_values_are_keypoint_means() {
        let rec = random_record(3, 9, 5);
        let ds_per = per_keypoint_smoothness(&rec).unwrap();
        let ae_per = per_keypoint_energy(&rec).unwrap();
        let ds_mean: f64 = ds_per.iter().sum::<f64>() / 5.0;
        let ae_mean: f64 = ae_per.iter().sum::<f64>() / 5.0;
        assert!((deformation_smoothness(&rec).unwrap() - ds_mean).abs() < 1e-15);
        assert!((animation_energy(&rec).unwrap() - ae_mean).abs() < 1e-15);
    }

    #[test]
    fn short_or_ragged_records_are_rejected() {
        let two = MotionRecord::new(vec![vec![[0.0, 0.0]], vec![[1.0, 0.0]]]).unwrap();
        assert!(deformation_smoothness(&two).is_err());
        assert!(animation_energy(&two).is_ok());
        let one = MotionRecord::new(vec![vec![[0.0, 0.0]]]).unwrap();
        assert!(animation_energy(&one).is_err());
        assert!(MotionRecord::new(vec![vec![[0.0, 0.0]], vec![]]).is_err());
        assert!(MotionRecord::<f64>::new(vec![vec![[f64::NAN, 0.0]]]).is_err());
        assert!(MotionRecord::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn csv_report_round_trips_the_values() {
        let rec = random_record(8, 6, 3);
        let csv = csv_report(&rec).unwrap();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "metric,overall,k0,k1,k2");
        let ds_row: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(ds_row[0], "deformation_smoothness");
        let ds: f64 = ds_row[1].parse().unwrap();
        assert!((ds - deformation_smoothness(&rec).unwrap()).abs() < 1e-15);
        let ae_row: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(ae_row[0], "animation_energy");
        let per = per_keypoint_energy(&rec).unwrap();
        for (i, want) in per.iter().enumerate() {
            let got: f64 = ae_row[2 + i].parse().unwrap();
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip_preserves_the_record() {
        let rec = random_record(5, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("motion.json");
        rec.save_json(&path).unwrap();
        let back = MotionRecord::<f64>::load_json(&path).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn records_can_come_from_trajectories() {
        // A linear Bézier (all control points collinear, evenly spaced)
        // traces straight lines; the record must match direct sampling.
        let rest = vec![[0.2, 0.2], [0.8, 0.6]];
        let ends = [[0.5, 0.8], [0.2, 0.1]];
        let cps: Vec<[[f64; 2]; 4]> = rest
            .iter()
            .zip(&ends)
            .map(|(&r, &e)| {
                let lerp = |s: f64| [r[0] + s * (e[0] - r[0]), r[1] + s * (e[1] - r[1])];
                [r, lerp(1.0 / 3.0), lerp(2.0 / 3.0), lerp(1.0)]
            })
            .collect();
        let traj = TrajectorySet::new(cps, 5).unwrap();
        let rec = MotionRecord::from_trajectories(&traj).unwrap();
        assert_eq!(rec.frame_count(), 5);
        assert_eq!(rec.keypoint_count(), 2);
        for t in 0..5 {
            let sampled = traj.sample(t).unwrap();
            assert_eq!(rec.positions()[t], sampled);
        }
        let ctrl = MotionRecord::from_control_points(&traj).unwrap();
        assert_eq!(ctrl.frame_count(), 4);
        assert_eq!(ctrl.positions()[0][1], rest[1]);
        assert_eq!(ctrl.positions()[3][0], ends[0]);
    }
}
