//! End-to-end orchestration: rest-shape fitting, the animation optimization
//! loop, metric reports, and the flow-consistency demo.
//!
//! Everything here is deterministic for a fixed `(config, seed)`: one
//! ChaCha root stream is split into per-subsystem streams in a documented
//! order, parameters live in an ordered store, and all artifact encoders
//! are reproducible byte for byte.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::guidance::{
    flow_matching_loss, sds_gradient, total_loss, verify_fokker_planck, FokkerPlanckConfig,
    FokkerPlanckReport, FrameStack, GaussianAnalytic, GuidanceConfig, NoiseSchedule,
    RemoteDenoiser, ScoreOracle, TeacherOracle,
};
use crate::linalg::Vec2;
use crate::mesh::{build_operators, JacobianField, TriMesh};
use crate::metrics::{csv_report, MotionRecord};
use crate::nnkit::{adam_step, AdamConfig, Grads, ParamStore, Tensor};
use crate::render::{emit_frames, emit_gif, warp, warp_gradient_to, warp_to, RasterImage};
use crate::solver::{assemble, fit_rest_jacobians, FactorizedSystem, FitOptions, KeypointConstraint};
use crate::temporal::{self, TemporalConfig};
use crate::trajectory::{
    init_trajectory_mlp, parameterize_backward, parameterize_mlp, TrajectoryMlpConfig,
    TrajectorySet,
};

/// File name of the rest-Jacobian checkpoint inside the output directory.
pub const REST_CHECKPOINT: &str = "rest_jacobians.ckpt";
const REST_TENSOR: &str = "rest_jacobians";

/// Which denoising oracle drives the optimization.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleChoice {
    /// Analytic standard Gaussian over the flattened clip.
    Gaussian,
    /// Teacher clip rendered from a trajectory file.
    Teacher(PathBuf),
    /// External denoiser service.
    Remote(String),
}

impl OracleChoice {
    /// Parses `gaussian`, `teacher:<path>`, or `remote:<url>`.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "gaussian" {
            return Ok(OracleChoice::Gaussian);
        }
        if let Some(path) = text.strip_prefix("teacher:") {
            if path.is_empty() {
                return Err(Error::config("teacher oracle needs a trajectory path"));
            }
            return Ok(OracleChoice::Teacher(PathBuf::from(path)));
        }
        if let Some(url) = text.strip_prefix("remote:") {
            if url.is_empty() {
                return Err(Error::config("remote oracle needs a URL"));
            }
            return Ok(OracleChoice::Remote(url.to_string()));
        }
        Err(Error::config(format!(
            "unknown oracle {text:?}; expected gaussian, teacher:<path>, or remote:<url>"
        )))
    }
}

impl fmt::Display for OracleChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleChoice::Gaussian => write!(f, "gaussian"),
            OracleChoice::Teacher(p) => write!(f, "teacher:{}", p.display()),
            OracleChoice::Remote(u) => write!(f, "remote:{u}"),
        }
    }
}

/// Everything a run needs. Numeric defaults follow the reference
/// hyperparameters: 24 frames, 700 Adam steps at learning rate 0.5,
/// guidance scale 50, flow weight 15, constraint weight 1000, window 6,
/// 10k rest-fit iterations.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mesh_path: PathBuf,
    pub image_path: PathBuf,
    pub out_dir: PathBuf,
    /// Opaque condition forwarded to the oracle.
    pub prompt: Option<String>,
    pub frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub guidance_scale: f64,
    /// Weight of the flow-matching term in the total loss.
    pub lambda: f64,
    pub constraint_weight: f64,
    /// Temporal attention window.
    pub window: usize,
    pub fit_iterations: usize,
    pub oracle: OracleChoice,
    /// Square resolution at which frames are rendered for the oracle.
    pub oracle_size: usize,
    /// Damping applied to predicted trajectory offsets.
    pub motion_scale: f64,
    /// Monte-Carlo samples per gradient estimate.
    pub samples: usize,
    /// GIF playback rate.
    pub fps: u32,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(mesh_path: PathBuf, image_path: PathBuf, out_dir: PathBuf) -> Self {
        RunConfig {
            mesh_path,
            image_path,
            out_dir,
            prompt: None,
            frames: 24,
            steps: 700,
            learning_rate: 0.5,
            guidance_scale: 50.0,
            lambda: 15.0,
            constraint_weight: 1000.0,
            window: 6,
            fit_iterations: 10_000,
            oracle: OracleChoice::Gaussian,
            oracle_size: 64,
            motion_scale: 0.5,
            samples: 4,
            fps: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("an animation needs at least 2 frames"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::config("guidance scale must be nonnegative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("loss weight must be nonnegative"));
        }
        if !(self.constraint_weight.is_finite() && self.constraint_weight > 0.0) {
            return Err(Error::config("constraint weight must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("temporal window must be at least 1"));
        }
        if self.oracle_size < 8 {
            return Err(Error::config("oracle resolution below 8 px carries no signal"));
        }
        if !(self.motion_scale.is_finite() && self.motion_scale > 0.0) {
            return Err(Error::config("motion scale must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("at least one Monte-Carlo sample is required"));
        }
        if self.fps == 0 {
            return Err(Error::config("frame rate must be positive"));
        }
        Ok(())
    }

    fn trajectory_config(&self) -> TrajectoryMlpConfig<f64> {
        TrajectoryMlpConfig { motion_scale: self.motion_scale, ..TrajectoryMlpConfig::default() }
    }

    fn temporal_config(&self) -> TemporalConfig {
        TemporalConfig { window: self.window, ..TemporalConfig::default() }
    }

    fn guidance_config(&self) -> GuidanceConfig<f64> {
        GuidanceConfig {
            guidance_scale: self.guidance_scale,
            lambda: self.lambda,
            samples: self.samples,
            ..GuidanceConfig::default()
        }
    }
}

/// Outcome of the rest-shape fit.
#[derive(Debug)]
pub struct FitSummary {
    pub objective: f64,
    pub iterations_run: usize,
    pub checkpoint: PathBuf,
}

/// Fits the rest Jacobian field of the mesh (the field the deformation
/// solve treats as "no deformation") and writes it as a checkpoint tensor.
pub fn run_fit_rest(config: &RunConfig) -> Result<FitSummary> {
    config.validate()?;
    let mesh = load_mesh(&config.mesh_path)?;
    let ops = build_operators(&mesh);
    let constraint = KeypointConstraint::new(mesh.keypoint_ids().to_vec(), config.constraint_weight);
    let system = assemble(&ops, &constraint)?;
    let options = FitOptions { iterations: config.fit_iterations, ..FitOptions::default() };
    let fit = fit_rest_jacobians(&system, &mesh.keypoint_positions(), &options)?;

    std::fs::create_dir_all(&config.out_dir)?;
    let mut store = ParamStore::new();
    store.insert(
        REST_TENSOR,
        Tensor::new(vec![mesh.face_count(), 2, 2], fit.jacobians.to_flat())?,
    )?;
    let checkpoint = config.out_dir.join(REST_CHECKPOINT);
    store.save(&checkpoint)?;
    Ok(FitSummary {
        objective: fit.objective,
        iterations_run: fit.iterations_run,
        checkpoint,
    })
}

/// One row of the per-step loss log.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub sds: f64,
    pub flow: f64,
    pub total: f64,
}

/// Artifacts and final state of an animation run.
#[derive(Debug)]
pub struct AnimateSummary {
    pub trajectories: TrajectorySet<f64>,
    pub loss_log: Vec<LossRow>,
    pub frame_paths: Vec<PathBuf>,
    pub gif_path: PathBuf,
    pub trajectory_path: PathBuf,
    pub motion_path: PathBuf,
    pub loss_log_path: PathBuf,
}

/// Runs the animation optimization and emits frames, a GIF, the learned
/// trajectories, the keypoint motion record, and the per-step loss log.
///
/// Per optimizer step: sample keypoint trajectories from the network, pose
/// every frame through the constrained solve, read off spatial Jacobians,
/// integrate temporal corrections, re-solve with the corrected fields,
/// render both the corrected and spatial-only clips at oracle resolution,
/// evaluate the distillation and flow-matching losses, and push their
/// gradients back through the entire chain to every network parameter.
pub fn run_animate(config: &RunConfig) -> Result<AnimateSummary> {
    config.validate()?;
    let mesh = load_mesh(&config.mesh_path)?;
    let image = RasterImage::<f64>::load_png(&config.image_path)?;
    let ops = build_operators(&mesh);
    let constraint = KeypointConstraint::new(mesh.keypoint_ids().to_vec(), config.constraint_weight);
    let system = assemble(&ops, &constraint)?;
    let rest_jacobians = load_rest_checkpoint(&config.out_dir, mesh.face_count())?;
    let rest_keypoints = mesh.keypoint_positions();

    // One root stream, split in a fixed order: parameter init first, then
    // guidance sampling.
    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(root.gen());
    let mut guidance_rng = ChaCha8Rng::seed_from_u64(root.gen());

    let traj_cfg = config.trajectory_config();
    let temporal_cfg = config.temporal_config();
    let guidance_cfg = config.guidance_config();
    let mut store = ParamStore::<f64>::new();
    init_trajectory_mlp(&mut store, &traj_cfg, rest_keypoints.len(), &mut init_rng)?;
    temporal::init_temporal(&mut store, &temporal_cfg, &mut init_rng)?;
    let adam = AdamConfig::with_lr(config.learning_rate);

    let oracle = build_oracle(config, &mesh, &system, &rest_jacobians, &image)?;
    let prompt = config.prompt.as_deref();

    let mut loss_log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let fwd = forward_pass(config, &mesh, &system, &rest_jacobians, &rest_keypoints, &store, &image)?;

        let sds = sds_gradient(&fwd.frames_total, oracle.as_ref(), &guidance_cfg, prompt, &mut guidance_rng)?;
        let flow = flow_matching_loss(
            &fwd.frames_total,
            &fwd.frames_spatial,
            &fwd.total_jacobians,
            fwd.state.spatial(),
            oracle.as_ref(),
            &guidance_cfg,
            prompt,
            &mut guidance_rng,
        )?;
        let total = total_loss(sds.loss, flow.loss, config.lambda)?;
        loss_log.push(LossRow { step, sds: sds.loss, flow: flow.loss, total });

        // Fold the weighted flow cotangents into the distillation ones,
        // then push everything back to the parameters in one pass.
        let lambda = config.lambda;
        let mut d_frames_total = sds.gradient;
        d_frames_total.add_scaled(&flow.d_frames_total, lambda)?;
        let mut d_frames_spatial = fwd.frames_spatial.zeros_like();
        d_frames_spatial.add_scaled(&flow.d_frames_spatial, lambda)?;
        let zero_field = JacobianField::zeros(mesh.face_count());
        let d_jac_total: Vec<JacobianField<f64>> = flow
            .d_jacobians_total
            .iter()
            .map(|d| zero_field.add_scaled(d, lambda))
            .collect();
        let d_jac_spatial: Vec<JacobianField<f64>> = flow
            .d_jacobians_spatial
            .iter()
            .map(|d| zero_field.add_scaled(d, lambda))
            .collect();

        let mut grads = Grads::new();
        backward_pass(
            config,
            &mesh,
            &system,
            &image,
            &store,
            &fwd,
            &d_frames_total,
            &d_frames_spatial,
            &d_jac_total,
            &d_jac_spatial,
            &mut grads,
        )?;
        adam_step(&mut store, &grads, &adam)?;
    }

    // Final state, rendered at full image resolution for the artifacts.
    let fwd = forward_pass(config, &mesh, &system, &rest_jacobians, &rest_keypoints, &store, &image)?;
    let full_frames: Vec<RasterImage<f64>> = fwd
        .total_vertices
        .iter()
        .map(|verts| warp(&image, &mesh, verts))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&config.out_dir)?;
    let frame_paths = emit_frames(&full_frames, &config.out_dir.join("frames"))?;
    let gif_path = config.out_dir.join("animation.gif");
    emit_gif(&full_frames, &gif_path, config.fps)?;
    let trajectory_path = config.out_dir.join("trajectories.json");
    fwd.trajectories.save_json(&trajectory_path)?;
    let motion_path = config.out_dir.join("motion.json");
    MotionRecord::from_trajectories(&fwd.trajectories)?.save_json(&motion_path)?;
    let loss_log_path = config.out_dir.join("loss_log.csv");
    std::fs::write(&loss_log_path, render_loss_log(&loss_log))?;

    Ok(AnimateSummary {
        trajectories: fwd.trajectories,
        loss_log,
        frame_paths,
        gif_path,
        trajectory_path,
        motion_path,
        loss_log_path,
    })
}

/// All per-step intermediate state the backward pass needs.
struct ForwardPass {
    trajectories: TrajectorySet<f64>,
    trajectory_tape: crate::trajectory::TrajectoryTape<f64>,
    state: temporal::TemporalState<f64>,
    integration_tape: temporal::IntegrationTape<f64>,
    total_jacobians: Vec<JacobianField<f64>>,
    total_vertices: Vec<Vec<Vec2<f64>>>,
    spatial_vertices: Vec<Vec<Vec2<f64>>>,
    frames_total: FrameStack<f64>,
    frames_spatial: FrameStack<f64>,
}

fn forward_pass(
    config: &RunConfig,
    mesh: &TriMesh<f64>,
    system: &FactorizedSystem<f64>,
    rest_jacobians: &JacobianField<f64>,
    rest_keypoints: &[Vec2<f64>],
    store: &ParamStore<f64>,
    image: &RasterImage<f64>,
) -> Result<ForwardPass> {
    let frames = config.frames;
    let (trajectories, trajectory_tape) =
        parameterize_mlp(store, &config.trajectory_config(), rest_keypoints, frames)?;

    // Pose every frame against the rest field, then read off its Jacobians.
    let mut targets = Vec::with_capacity(frames);
    let mut spatial = Vec::with_capacity(frames);
    for t in 0..frames {
        let target = trajectories.sample(t)?;
        let pose = system.solve(rest_jacobians, &target)?;
        spatial.push(system.ops().compute_jacobians(&pose));
        targets.push(target);
    }

    let (state, integration_tape) = temporal::integrate(spatial, store, &config.temporal_config())?;

    let size = config.oracle_size;
    let mut total_jacobians = Vec::with_capacity(frames);
    let mut total_vertices = Vec::with_capacity(frames);
    let mut spatial_vertices = Vec::with_capacity(frames);
    let mut images_total = Vec::with_capacity(frames);
    let mut images_spatial = Vec::with_capacity(frames);
    for t in 0..frames {
        let total_field = state.total(t);
        let v_total = system.solve(&total_field, &targets[t])?;
        let v_spatial = system.solve(&state.spatial()[t], &targets[t])?;
        images_total.push(warp_to(image, mesh, &v_total, size, size)?);
        images_spatial.push(warp_to(image, mesh, &v_spatial, size, size)?);
        total_jacobians.push(total_field);
        total_vertices.push(v_total);
        spatial_vertices.push(v_spatial);
    }
    Ok(ForwardPass {
        trajectories,
        trajectory_tape,
        state,
        integration_tape,
        total_jacobians,
        total_vertices,
        spatial_vertices,
        frames_total: FrameStack::from_images(&images_total)?,
        frames_spatial: FrameStack::from_images(&images_spatial)?,
    })
}

/// Pushes cotangents of the forward pass back to every network parameter.
///
/// The outputs being seeded are the two rendered clips (`d_frames_total`,
/// `d_frames_spatial`) and, because the flow penalty reads them without
/// going through a render, the corrected and spatial Jacobian fields
/// (`d_jac_total`, `d_jac_spatial`). The chain runs: render adjoint into
/// deformed vertices, solve adjoint into fields and keypoint targets,
/// temporal integrator adjoint into its parameters and the spatial fields,
/// Jacobian-extraction and posing-solve adjoints into targets again, and
/// the Bézier sampler adjoint into control points and the trajectory
/// network.
#[allow(clippy::too_many_arguments)]
fn backward_pass(
    config: &RunConfig,
    mesh: &TriMesh<f64>,
    system: &FactorizedSystem<f64>,
    image: &RasterImage<f64>,
    store: &ParamStore<f64>,
    fwd: &ForwardPass,
    d_frames_total: &FrameStack<f64>,
    d_frames_spatial: &FrameStack<f64>,
    d_jac_total: &[JacobianField<f64>],
    d_jac_spatial: &[JacobianField<f64>],
    grads: &mut Grads<f64>,
) -> Result<()> {
    let frames = config.frames;
    let size = config.oracle_size;
    if d_jac_total.len() != frames || d_jac_spatial.len() != frames {
        return Err(Error::invalid("field cotangent count does not match the frame count"));
    }
    let kp = fwd.trajectories.keypoint_count();

    let mut d_targets: Vec<Vec<Vec2<f64>>> = vec![vec![[0.0; 2]; kp]; frames];
    let mut d_temporal: Vec<JacobianField<f64>> = Vec::with_capacity(frames);
    let mut d_spatial: Vec<JacobianField<f64>> = Vec::with_capacity(frames);
    for t in 0..frames {
        // Through the renders into the deformed vertices.
        let d_verts_total = warp_gradient_to(
            image,
            mesh,
            &fwd.total_vertices[t],
            &stack_frame_image(d_frames_total, t, size),
            size,
            size,
        )?;
        let d_verts_spatial = warp_gradient_to(
            image,
            mesh,
            &fwd.spatial_vertices[t],
            &stack_frame_image(d_frames_spatial, t, size),
            size,
            size,
        )?;
        // Through the two visible solves into fields and targets.
        let (d_jac_total_solve, d_t1) = system.solve_adjoint(&d_verts_total);
        let (d_jac_spatial_solve, d_t2) = system.solve_adjoint(&d_verts_spatial);
        for (acc, (a, b)) in d_targets[t].iter_mut().zip(d_t1.iter().zip(&d_t2)) {
            acc[0] += a[0] + b[0];
            acc[1] += a[1] + b[1];
        }
        // Total field J_t = J^P_t + J^R_t: its cotangent flows into the
        // correction (BPTT below) and the spatial field alike.
        let d_total_field = d_jac_total_solve.add_scaled(&d_jac_total[t], 1.0);
        let d_spatial_field = d_total_field
            .add_scaled(&d_jac_spatial_solve, 1.0)
            .add_scaled(&d_jac_spatial[t], 1.0);
        d_temporal.push(d_total_field);
        d_spatial.push(d_spatial_field);
    }

    // Through the temporal integrator into its parameters and the spatial
    // fields it consumed.
    let d_spatial_bptt = temporal::integrate_backward(
        &fwd.state,
        &fwd.integration_tape,
        store,
        &config.temporal_config(),
        &d_temporal,
        grads,
    )?;

    // Through Jacobian extraction and the posing solve into targets.
    for t in 0..frames {
        let d_field = d_spatial[t].add_scaled(&d_spatial_bptt[t], 1.0);
        let d_pose_verts = system.ops().compute_jacobians_adjoint(&d_field);
        let (_d_rest, d_t3) = system.solve_adjoint(&d_pose_verts);
        for (acc, g) in d_targets[t].iter_mut().zip(&d_t3) {
            acc[0] += g[0];
            acc[1] += g[1];
        }
    }

    // Through the Bézier sampler into control points, then the network.
    let mut d_control = vec![[[0.0f64; 2]; 4]; kp];
    for (t, d_tgt) in d_targets.iter().enumerate() {
        for (i, d_cps) in fwd.trajectories.sample_gradient(t, d_tgt)?.iter().enumerate() {
            for j in 0..4 {
                d_control[i][j][0] += d_cps[j][0];
                d_control[i][j][1] += d_cps[j][1];
            }
        }
    }
    parameterize_backward(store, &config.trajectory_config(), &fwd.trajectory_tape, &d_control, grads)
}

fn load_mesh(path: &Path) -> Result<TriMesh<f64>> {
    if !path.exists() {
        return Err(Error::config(format!("mesh file not found: {}", path.display())));
    }
    TriMesh::load_json(path)
}

fn load_rest_checkpoint(out_dir: &Path, face_count: usize) -> Result<JacobianField<f64>> {
    let path = out_dir.join(REST_CHECKPOINT);
    if !path.exists() {
        return Err(Error::config(format!(
            "rest checkpoint not found at {}; run fit-rest first",
            path.display()
        )));
    }
    let store = ParamStore::<f64>::load(&path)?;
    let tensor = store.get(REST_TENSOR)?;
    if tensor.shape() != [face_count, 2, 2] {
        return Err(Error::invalid(format!(
            "rest checkpoint covers {:?} but the mesh has {face_count} faces",
            tensor.shape()
        )));
    }
    JacobianField::from_flat(face_count, tensor.data())
}

fn build_oracle(
    config: &RunConfig,
    mesh: &TriMesh<f64>,
    system: &FactorizedSystem<f64>,
    rest_jacobians: &JacobianField<f64>,
    image: &RasterImage<f64>,
) -> Result<Box<dyn ScoreOracle<f64>>> {
    let horizon = config.guidance_config().horizon;
    match &config.oracle {
        OracleChoice::Gaussian => {
            let dim = config.frames * config.oracle_size * config.oracle_size * 4;
            Ok(Box::new(GaussianAnalytic::standard(dim, horizon)?))
        }
        OracleChoice::Teacher(path) => {
            if !path.exists() {
                return Err(Error::config(format!(
                    "teacher trajectory file not found: {}",
                    path.display()
                )));
            }
            let raw = TrajectorySet::<f64>::load_json(path)?;
            if raw.keypoint_count() != mesh.keypoint_ids().len() {
                return Err(Error::invalid(format!(
                    "teacher drives {} keypoints, mesh has {}",
                    raw.keypoint_count(),
                    mesh.keypoint_ids().len()
                )));
            }
            // Re-sample the teacher's control polygon at this run's frame
            // count, then render it exactly the way the optimizer renders.
            let teacher = TrajectorySet::new(raw.control_points().to_vec(), config.frames)?;
            let size = config.oracle_size;
            let mut images = Vec::with_capacity(config.frames);
            for t in 0..config.frames {
                let verts = system.solve(rest_jacobians, &teacher.sample(t)?)?;
                images.push(warp_to(image, mesh, &verts, size, size)?);
            }
            Ok(Box::new(TeacherOracle::new(FrameStack::from_images(&images)?, horizon)?))
        }
        OracleChoice::Remote(url) => Ok(Box::new(RemoteDenoiser::new(
            url,
            Duration::from_secs(30),
            2,
        )?)),
    }
}

/// Copies one frame of a stack back into image form for the warp adjoint.
fn stack_frame_image(stack: &FrameStack<f64>, t: usize, size: usize) -> RasterImage<f64> {
    let mut img = RasterImage::new(size, size);
    img.data_mut().copy_from_slice(stack.frame(t));
    img
}

fn render_loss_log(rows: &[LossRow]) -> String {
    let mut out = String::from("step,sds,flow,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.sds, r.flow, r.total));
    }
    out
}

/// Writes (optionally) and returns the DS/AE report for a motion record.
pub fn run_metrics(record_path: &Path, out_csv: Option<&Path>) -> Result<String> {
    if !record_path.exists() {
        return Err(Error::config(format!(
            "motion record not found: {}",
            record_path.display()
        )));
    }
    let record = MotionRecord::<f64>::load_json(record_path)?;
    let csv = csv_report(&record)?;
    if let Some(path) = out_csv {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &csv)?;
    }
    Ok(csv)
}

/// Settings for the flow-consistency demo.
#[derive(Debug, Clone)]
pub struct PfodeDemoConfig {
    pub particles: usize,
    pub steps: usize,
    pub tolerance: f64,
    /// Scales the SDE diffusion; 1.0 is the physical value, anything else
    /// deliberately breaks the consistency condition.
    pub fault_scale: f64,
    pub seed: u64,
}

impl Default for PfodeDemoConfig {
    fn default() -> Self {
        PfodeDemoConfig {
            particles: 50_000,
            steps: 200,
            tolerance: 0.05,
            fault_scale: 1.0,
            seed: 0,
        }
    }
}

/// Runs the covariance consistency check on the standard 2-D schedule
/// (unit rates, horizon 1). The report says PASS or FAIL; a FAIL is a
/// result, not an error.
pub fn run_pfode_demo(config: &PfodeDemoConfig) -> Result<FokkerPlanckReport> {
    let schedule = NoiseSchedule::new(vec![1.0f64, 1.0], 1.0, 1.0)?
        .with_sde_diffusion_scale(config.fault_scale)?;
    let fp = FokkerPlanckConfig {
        particles: config.particles,
        steps: config.steps,
        tolerance: config.tolerance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    verify_fokker_planck(&schedule, &[1.0, 1.0], &fp, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::grid_mesh;

    fn smooth_image() -> RasterImage<f64> {
        RasterImage::from_fn(24, 24, |x, y| {
            let (xf, yf) = (x as f64 / 23.0, y as f64 / 23.0);
            [
                0.5 + 0.4 * (6.0 * xf).sin() * (5.0 * yf).cos(),
                0.2 + 0.4 * xf + 0.3 * yf,
                0.6 - 0.4 * (4.0 * (xf - yf)).sin(),
                1.0,
            ]
        })
    }

    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::new("mesh.json".into(), "image.png".into(), "out".into());
        config.frames = 3;
        config.oracle_size = 16;
        config.window = 2;
        config.fit_iterations = 200;
        config.fps = 4;
        config
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Central finite difference of `eval` with respect to one stored
    /// parameter entry.
    fn fd_param(
        store: &mut ParamStore<f64>,
        name: &str,
        idx: usize,
        h: f64,
        mut eval: impl FnMut(&ParamStore<f64>) -> f64,
    ) -> f64 {
        let orig = store.get(name).unwrap().data()[idx];
        store.get_mut(name).unwrap().data_mut()[idx] = orig + h;
        let hi = eval(store);
        store.get_mut(name).unwrap().data_mut()[idx] = orig - h;
        let lo = eval(store);
        store.get_mut(name).unwrap().data_mut()[idx] = orig;
        (hi - lo) / (2.0 * h)
    }

    /// End-to-end gradient check of the whole differentiable chain:
    /// network parameters -> control points -> posing solves -> spatial
    /// fields -> temporal integration -> corrected solves -> renders,
    /// probed through a scalar built from fixed random cotangents on both
    /// rendered clips and both field sequences (exactly the outputs the
    /// losses touch).
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let config = tiny_config();
        let mesh = grid_mesh(2, 2, 3);
        let ops = build_operators(&mesh);
        let constraint =
            KeypointConstraint::new(mesh.keypoint_ids().to_vec(), config.constraint_weight);
        let system = assemble(&ops, &constraint).unwrap();
        let rest_jacobians = JacobianField::identity(mesh.face_count());
        let rest_keypoints = mesh.keypoint_positions();
        let image = smooth_image();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        init_trajectory_mlp(&mut store, &config.trajectory_config(), rest_keypoints.len(), &mut rng)
            .unwrap();
        temporal::init_temporal(&mut store, &config.temporal_config(), &mut rng).unwrap();
        // Zero-initialized output heads block gradients into the layers
        // behind them; jitter every parameter so the whole chain is live.
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            for w in store.get_mut(name).unwrap().data_mut() {
                *w += rng.gen_range(-0.05..0.05);
            }
        }

        let frames = config.frames;
        let faces = mesh.face_count();
        let fwd = forward_pass(
            &config, &mesh, &system, &rest_jacobians, &rest_keypoints, &store, &image,
        )
        .unwrap();
        let mut u = fwd.frames_total.zeros_like();
        for x in u.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let mut v = fwd.frames_spatial.zeros_like();
        for x in v.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let random_fields = |rng: &mut ChaCha8Rng| -> Vec<JacobianField<f64>> {
            (0..frames)
                .map(|_| {
                    let flat: Vec<f64> = (0..faces * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    JacobianField::from_flat(faces, &flat).unwrap()
                })
                .collect()
        };
        let w = random_fields(&mut rng);
        let y = random_fields(&mut rng);

        let phi = |store: &ParamStore<f64>| -> f64 {
            let fwd = forward_pass(
                &config, &mesh, &system, &rest_jacobians, &rest_keypoints, store, &image,
            )
            .unwrap();
            let mut acc = dot(fwd.frames_total.data(), u.data());
            acc += dot(fwd.frames_spatial.data(), v.data());
            for t in 0..frames {
                acc += dot(&fwd.total_jacobians[t].to_flat(), &w[t].to_flat());
                acc += dot(&fwd.state.spatial()[t].to_flat(), &y[t].to_flat());
            }
            acc
        };

        let mut grads = Grads::new();
        backward_pass(
            &config, &mesh, &system, &image, &store, &fwd, &u, &v, &w, &y, &mut grads,
        )
        .unwrap();

        let mut scale = 0.0f64;
        for name in &names {
            let g = grads
                .get(name)
                .unwrap_or_else(|| panic!("no gradient reached {name}"));
            for x in g {
                scale = scale.max(x.abs());
            }
        }
        assert!(scale > 1e-8, "gradient chain is dead (max entry {scale})");

        // Probe a strided subset of every tensor. Step-size disagreement
        // flags a rectifier kink or a bilinear cell edge under the probe;
        // those are skipped rather than compared against a one-sided
        // derivative.
        let mut checked = 0usize;
        let mut skipped = 0usize;
        for name in &names {
            let len = store.get(name).unwrap().len();
            let stride = (len / 4).max(1);
            let mut idx = 0;
            while idx < len {
                let fd1 = fd_param(&mut store, name, idx, 1e-4, phi);
                let fd2 = fd_param(&mut store, name, idx, 2e-4, phi);
                let an = grads.get(name).unwrap()[idx];
                if (fd1 - fd2).abs() > 0.01 * fd1.abs().max(fd2.abs()).max(1e-6 * scale) {
                    skipped += 1;
                } else {
                    let rel = (an - fd1).abs() / an.abs().max(fd1.abs()).max(1e-6 * scale);
                    assert!(
                        rel < 5e-2,
                        "{name}[{idx}]: analytic {an} vs finite difference {fd1} (rel {rel:.2e})"
                    );
                    checked += 1;
                }
                idx += stride;
            }
        }
        assert!(checked >= 40, "only {checked} smooth probes");
        assert!(skipped * 3 <= checked, "too many kinked probes: {skipped} of {}", checked + skipped);
    }

    #[test]
    fn animate_emits_deterministic_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mesh_path = dir.path().join("mesh.json");
        grid_mesh(2, 2, 3).save_json(&mesh_path).unwrap();
        let image_path = dir.path().join("image.png");
        smooth_image().save_png(&image_path).unwrap();

        let mut config = tiny_config();
        config.mesh_path = mesh_path;
        config.image_path = image_path;
        config.out_dir = dir.path().join("out");
        config.steps = 2;
        config.seed = 7;

        // Animating before fitting the rest field is a configuration error.
        let err = run_animate(&config).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let fit = run_fit_rest(&config).unwrap();
        assert!(fit.checkpoint.exists());
        assert!(fit.objective.is_finite());

        let first = run_animate(&config).unwrap();
        assert_eq!(first.frame_paths.len(), 3);
        assert_eq!(first.loss_log.len(), 2);
        assert!(first.frame_paths.iter().all(|p| p.exists()));
        assert!(first.loss_log.iter().all(|r| r.total.is_finite()));
        let gif = std::fs::read(&first.gif_path).unwrap();
        let log = std::fs::read(&first.loss_log_path).unwrap();

        let second = run_animate(&config).unwrap();
        assert_eq!(std::fs::read(&second.gif_path).unwrap(), gif);
        assert_eq!(std::fs::read(&second.loss_log_path).unwrap(), log);

        let report_path = dir.path().join("metrics.csv");
        let csv = run_metrics(&first.motion_path, Some(&report_path)).unwrap();
        assert!(csv.starts_with("metric,overall"));
        assert!(csv.contains("deformation_smoothness"));
        assert!(csv.contains("animation_energy"));
        assert_eq!(std::fs::read_to_string(&report_path).unwrap(), csv);
    }

    #[test]
    fn teacher_oracle_checks_keypoint_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = grid_mesh(2, 2, 3);
        let mesh_path = dir.path().join("mesh.json");
        mesh.save_json(&mesh_path).unwrap();
        let image_path = dir.path().join("image.png");
        smooth_image().save_png(&image_path).unwrap();

        let mut config = tiny_config();
        config.mesh_path = mesh_path;
        config.image_path = image_path;
        config.out_dir = dir.path().join("out");
        config.steps = 1;
        run_fit_rest(&config).unwrap();

        // A teacher whose control points all sit at the rest keypoints.
        let rest = mesh.keypoint_positions();
        let cps: Vec<[Vec2<f64>; 4]> = rest.iter().map(|&p| [p, p, p, p]).collect();
        let teacher_path = dir.path().join("teacher.json");
        TrajectorySet::new(cps, 4).unwrap().save_json(&teacher_path).unwrap();
        config.oracle = OracleChoice::Teacher(teacher_path);
        run_animate(&config).unwrap();

        // One with the wrong number of keypoints is rejected up front.
        let bad: Vec<[Vec2<f64>; 4]> = rest.iter().take(2).map(|&p| [p, p, p, p]).collect();
        let bad_path = dir.path().join("bad.json");
        TrajectorySet::new(bad, 4).unwrap().save_json(&bad_path).unwrap();
        config.oracle = OracleChoice::Teacher(bad_path);
        assert!(run_animate(&config).is_err());
    }

    #[test]
    fn oracle_choice_parsing_round_trips() {
        assert_eq!(OracleChoice::parse("gaussian").unwrap(), OracleChoice::Gaussian);
        assert_eq!(
            OracleChoice::parse("teacher:assets/t.json").unwrap(),
            OracleChoice::Teacher(PathBuf::from("assets/t.json"))
        );
        assert_eq!(
            OracleChoice::parse("remote:http://localhost:1").unwrap(),
            OracleChoice::Remote("http://localhost:1".into())
        );
        assert!(OracleChoice::parse("webcam").is_err());
        assert!(OracleChoice::parse("teacher:").is_err());
        for text in ["gaussian", "teacher:x.json", "remote:http://h"] {
            assert_eq!(OracleChoice::parse(text).unwrap().to_string(), text);
        }
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let base = RunConfig::new("m.json".into(), "i.png".into(), "out".into());
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.frames = 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.oracle_size = 4;
        assert!(c.validate().is_err());
        let mut c = base;
        c.samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_log_renders_stable_csv() {
        let rows = vec![
            LossRow { step: 0, sds: 1.5, flow: 2.0, total: 31.5 },
            LossRow { step: 1, sds: 0.25, flow: 1.0, total: 15.25 },
        ];
        let csv = render_loss_log(&rows);
        assert_eq!(csv, "step,sds,flow,total\n0,1.5,2,31.5\n1,0.25,1,15.25\n");
    }
}
