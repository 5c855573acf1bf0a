//! Closed-loop harness: renderer → vision → reference → controller → plant,
//! with a ground-truth perception mode that samples the road analytically.
//! Includes the single-lane-change scenario builder and the trajectory /
//! yaw-rate metrics used to compare the controllers.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{add_pixel_noise, render_road_view, Centerline, CubicSegment, RoadModel};
use crate::config::{AppConfig, PerceptionMode, RoadConfig};
use crate::control::{ControllerKind, MpcController, PidController, StepDiag};
use crate::dynamics::{integrate_rk4, ControlInput, VehicleState};
use crate::lanes::{RefSample, ReferenceTrajectory};
use crate::vision::Pipeline;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("run failed: {flagged} of {steps} control steps were flagged ({fraction:.1}%)")]
    RunFailed {
        flagged: usize,
        steps: usize,
        fraction: f64,
    },
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error(transparent)]
    Vision(#[from] crate::vision::VisionError),
    #[error(transparent)]
    Lane(#[from] crate::lanes::LaneError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Lane-change road: the centerline holds 0 until `start_s`, ramps to
/// `offset` along the smoothstep cubic 3u^2 - 2u^3 over `ramp_len`, and holds
/// `offset` afterwards. C1-continuous by construction.
pub fn make_lane_change_road(
    offset: f64,
    start_s: f64,
    ramp_len: f64,
    road: &RoadConfig,
) -> Result<RoadModel> {
    if ramp_len <= 0.0 {
        return Err(SimError::InvalidArgument(format!(
            "ramp_len must be positive, got {ramp_len}"
        )));
    }
    // constant-zero approach segment covering everything before the ramp
    let mut segments = vec![CubicSegment {
        s_start: start_s.min(0.0) - 1.0,
        coeffs: [0.0; 4],
    }];
    segments.push(CubicSegment {
        s_start: start_s,
        coeffs: [
            0.0,
            0.0,
            3.0 * offset / (ramp_len * ramp_len),
            -2.0 * offset / (ramp_len * ramp_len * ramp_len),
        ],
    });
    segments.push(CubicSegment {
        s_start: start_s + ramp_len,
        coeffs: [offset, 0.0, 0.0, 0.0],
    });
    let centerline = Centerline::new(segments)?;
    Ok(RoadModel::new(
        road.lane_width,
        road.marking_width,
        centerline,
        road.road_color,
        road.marking_color,
    )?)
}

/// Scenario resolved from the configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub road: RoadModel,
    pub target_speed: f64,
    pub duration: f64,
    pub plant_dt: f64,
    pub control_dt: f64,
    pub perception: PerceptionMode,
    pub noise_seed: u64,
    pub lateral_noise_std: f64,
}

impl Scenario {
    pub fn from_config(app: &AppConfig) -> Result<Self> {
        let sc = &app.scenario;
        let ratio = sc.control_dt / sc.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(SimError::InvalidScenario(format!(
                "control_dt {} must be an integer multiple of plant_dt {}",
                sc.control_dt, sc.plant_dt
            )));
        }
        if sc.duration <= 0.0 {
            return Err(SimError::InvalidScenario("duration must be positive".into()));
        }
        Ok(Self {
            name: sc.name.clone(),
            road: make_lane_change_road(sc.offset, sc.start_s, sc.ramp_len, &app.road)?,
            target_speed: sc.target_speed,
            duration: sc.duration,
            plant_dt: sc.plant_dt,
            control_dt: sc.control_dt,
            perception: sc.perception,
            noise_seed: sc.seed,
            lateral_noise_std: sc.lateral_noise_std,
        })
    }

    pub fn substeps(&self) -> usize {
        (self.control_dt / self.plant_dt).round() as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.duration / self.control_dt).round() as usize
    }
}

/// One recorded control step.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    /// vehicle-frame lateral offset of the reference at the vehicle station
    pub y_ref: f64,
    /// |detected - true| centerline offset at the vehicle (vision mode)
    pub detect_err: f64,
    pub qp_iters: usize,
    pub qp_cost: f64,
    pub flagged: bool,
}

/// Full closed-loop record, one row per control step.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub flagged_fraction: f64,
}

fn sig9(v: f64) -> String {
    format!("{:.8e}", v)
}

impl RunTrace {
    pub const CSV_HEADER: &'static str =
        "t,x,y,psi,vx,vy,r,delta,ax,y_ref,detect_err,qp_iters,qp_cost";

    /// Serializes the trace with 9 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 160);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let s = &row.state;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                sig9(row.t),
                sig9(s.x),
                sig9(s.y),
                sig9(s.psi),
                sig9(s.v_x),
                sig9(s.v_y),
                sig9(s.r),
                sig9(row.input.delta),
                sig9(row.input.a_x),
                sig9(row.y_ref),
                sig9(row.detect_err),
                row.qp_iters,
                sig9(row.qp_cost),
            ));
        }
        out
    }
}

/// Samples the true road in the vehicle frame: the analytic stand-in for the
/// vision pipeline's detected reference.
pub fn ground_truth_reference(
    road: &RoadModel,
    state: &VehicleState,
    horizon_m: f64,
    n_samples: usize,
) -> Result<ReferenceTrajectory> {
    if n_samples < 2 || horizon_m <= 0.0 {
        return Err(SimError::InvalidArgument(
            "need n_samples >= 2 and a positive horizon".into(),
        ));
    }
    let (sin_psi, cos_psi) = state.psi.sin_cos();
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let ahead = horizon_m * i as f64 / (n_samples - 1) as f64;
        let x_c = state.x + ahead;
        let g = road.centerline.offset_at(x_c);
        let gp = road.centerline.slope_at(x_c);
        let (dx, dy) = (x_c - state.x, g - state.y);
        let s_v = cos_psi * dx + sin_psi * dy;
        let y_v = -sin_psi * dx + cos_psi * dy;
        // tangent (1, g') rotated into the vehicle frame
        let t_x = cos_psi + sin_psi * gp;
        let t_y = -sin_psi + cos_psi * gp;
        if t_x <= 1e-6 {
            return Err(SimError::InvalidArgument(format!(
                "vehicle heading {} too oblique to parameterize the road",
                state.psi
            )));
        }
        let psi_ref = t_y.atan2(t_x);
        // heading rate per vehicle-frame station
        let kappa = road.centerline.curvature_at(x_c) * (1.0 + gp * gp).sqrt() / t_x;
        samples.push(RefSample {
            s: s_v,
            y_lat: y_v,
            psi_ref,
            kappa,
        });
    }
    Ok(ReferenceTrajectory::new(samples)?)
}

#[allow(clippy::large_enum_variant)] // one instance per run
enum Controller {
    Mpc(MpcController),
    Pid(PidController),
}

impl Controller {
    fn step(
        &mut self,
        s: &VehicleState,
        traj: &ReferenceTrajectory,
        dt: f64,
    ) -> (ControlInput, StepDiag) {
        match self {
            Controller::Mpc(c) => c.step(s, traj),
            Controller::Pid(c) => c.step(s, traj, dt),
        }
    }
}

/// Runs the closed loop for one controller. Missing-lane detections in
/// vision mode hold the previous command and flag the step; a run with more
/// than 20% flagged steps fails.
pub fn run_closed_loop(app: &AppConfig, kind: ControllerKind) -> Result<RunTrace> {
    let scenario = Scenario::from_config(app)?;
    let steps = scenario.control_steps();
    let substeps = scenario.substeps();

    let mut controller = match kind {
        ControllerKind::Mpc => Controller::Mpc(MpcController::new(
            app.mpc.clone(),
            app.vehicle,
            scenario.target_speed,
        )?),
        ControllerKind::Pid => Controller::Pid(PidController::new(
            app.pid,
            app.vehicle,
            scenario.target_speed,
            app.mpc.speed_kp,
        )?),
    };

    let vision = match scenario.perception {
        PerceptionMode::VisionInLoop => Some(Pipeline::new(&app.camera, app.vision)?),
        PerceptionMode::GroundTruth => None,
    };
    let mount = app.camera.mount_camera()?;
    let render_opts = app.camera.render_options();

    // reference must cover the prediction horizon plus slack
    let horizon_m = (app.mpc.n as f64 * app.mpc.ts * scenario.target_speed * 1.3)
        .max(app.vision.bev.far);

    let mut state = VehicleState {
        x: 0.0,
        y: scenario.road.centerline.offset_at(0.0),
        psi: scenario.road.centerline.slope_at(0.0).atan(),
        v_x: scenario.target_speed,
        v_y: 0.0,
        r: 0.0,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(scenario.noise_seed);
    let noise = if scenario.lateral_noise_std > 0.0 {
        Some(Normal::new(0.0, scenario.lateral_noise_std).expect("std > 0"))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(steps);
    let mut prev_input = ControlInput::default();
    let mut flagged_count = 0usize;

    for k in 0..steps {
        let t = k as f64 * scenario.control_dt;
        let truth = ground_truth_reference(
            &scenario.road,
            &state,
            horizon_m,
            app.vision.n_ref_samples,
        )?;

        let (traj, detect_err, detect_flagged) = match &vision {
            None => (truth.clone(), 0.0, false),
            Some(pipeline) => {
                let mut frame =
                    render_road_view(&mount, &scenario.road, (state.x, state.y, state.psi), &render_opts)?;
                if app.camera.noise_std > 0.0 {
                    add_pixel_noise(&mut frame, app.camera.noise_std, &mut rng);
                }
                match pipeline.detect(&frame, state.v_x) {
                    Ok(det) => {
                        // compare at the nearest station the camera actually
                        // observes; below the bird's-eye patch the detected
                        // centerline is an extrapolation
                        let station = app.vision.bev.near;
                        let err = (det.trajectory.sample_at(station).y_lat
                            - truth.sample_at(station).y_lat)
                            .abs();
                        (det.trajectory, err, false)
                    }
                    Err(crate::vision::VisionError::Lane(_)) => (truth.clone(), f64::NAN, true),
                    Err(e) => return Err(e.into()),
                }
            }
        };

        let (input, diag) = if detect_flagged {
            (prev_input, StepDiag::default())
        } else {
            controller.step(&state, &traj, scenario.control_dt)
        };
        let flagged = detect_flagged || diag.flagged;
        if flagged {
            flagged_count += 1;
        }

        rows.push(TraceRow {
            t,
            state,
            input,
            y_ref: truth.sample_at(0.0).y_lat,
            detect_err: if detect_err.is_nan() { 0.0 } else { detect_err },
            qp_iters: diag.qp_iterations,
            qp_cost: diag.qp_cost,
            flagged,
        });

        for _ in 0..substeps {
            state = integrate_rk4(&state, &input, scenario.plant_dt, &app.vehicle)?;
        }
        if let Some(normal) = &noise {
            state.v_y += normal.sample(&mut rng);
        }
        prev_input = input;
    }

    let flagged_fraction = flagged_count as f64 / steps.max(1) as f64;
    if flagged_fraction > 0.20 {
        return Err(SimError::RunFailed {
            flagged: flagged_count,
            steps,
            fraction: flagged_fraction * 100.0,
        });
    }
    Ok(RunTrace {
        rows,
        flagged_fraction,
    })
}

/// Root-mean-square cross-track error against the true road centerline.
pub fn rmse_crosstrack(trace: &RunTrace, road: &RoadModel) -> Result<f64> {
    if trace.rows.is_empty() {
        return Err(SimError::InvalidArgument("empty trace".into()));
    }
    let sum_sq: f64 = trace
        .rows
        .iter()
        .map(|row| {
            let e = row.state.y - road.centerline.offset_at(row.state.x);
            e * e
        })
        .sum();
    Ok((sum_sq / trace.rows.len() as f64).sqrt())
}

/// Yaw-rate smoothness: total variation and population standard deviation.
pub fn yaw_rate_smoothness(trace: &RunTrace) -> Result<(f64, f64)> {
    if trace.rows.len() < 2 {
        return Err(SimError::InvalidArgument(
            "need at least 2 samples for smoothness metrics".into(),
        ));
    }
    let rates: Vec<f64> = trace.rows.iter().map(|r| r.state.r).collect();
    let tv: f64 = rates.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    Ok((tv, var.sqrt()))
}

/// Metrics of one controller's run.
#[derive(Debug, Clone, Copy)]
pub struct ControllerMetrics {
    pub rmse: f64,
    pub yaw_tv: f64,
    pub yaw_std: f64,
}

fn metrics_of(trace: &RunTrace, road: &RoadModel) -> Result<ControllerMetrics> {
    let (yaw_tv, yaw_std) = yaw_rate_smoothness(trace)?;
    Ok(ControllerMetrics {
        rmse: rmse_crosstrack(trace, road)?,
        yaw_tv,
        yaw_std,
    })
}

/// Relative difference (a - b) / |b|, or 0 when both are 0.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b) / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Side-by-side MPC vs PID report on an identical scenario and seed.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub mpc: ControllerMetrics,
    pub pid: ControllerMetrics,
    pub rmse_rel_diff: f64,
    pub yaw_tv_rel_diff: f64,
    pub rmse_max: f64,
    pub mpc_rmse_ok: bool,
    pub pid_rmse_ok: bool,
    /// the headline verdict: MPC's yaw-rate total variation is lower
    pub mpc_smoother_yaw: bool,
}

impl ComparisonReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "rmse_mpc = {:.9}\nrmse_pid = {:.9}\n",
            self.mpc.rmse, self.pid.rmse
        ));
        out.push_str(&format!(
            "yaw_tv_mpc = {:.9}\nyaw_tv_pid = {:.9}\n",
            self.mpc.yaw_tv, self.pid.yaw_tv
        ));
        out.push_str(&format!(
            "yaw_std_mpc = {:.9}\nyaw_std_pid = {:.9}\n",
            self.mpc.yaw_std, self.pid.yaw_std
        ));
        out.push_str(&format!(
            "rmse_rel_diff = {:.9}\nyaw_tv_rel_diff = {:.9}\n",
            self.rmse_rel_diff, self.yaw_tv_rel_diff
        ));
        out.push_str(&format!(
            "rmse_mpc < {lim}: {}\nrmse_pid < {lim}: {}\n",
            self.mpc_rmse_ok,
            self.pid_rmse_ok,
            lim = self.rmse_max
        ));
        out.push_str(&format!("yaw_tv_mpc < yaw_tv_pid: {}\n", self.mpc_smoother_yaw));
        out
    }
}

/// Runs both controllers on the identical scenario and seed and reports both
/// metric sets with pass/fail verdicts.
pub fn compare_controllers(app: &AppConfig) -> Result<ComparisonReport> {
    let scenario = Scenario::from_config(app)?;
    let mpc_trace = run_closed_loop(app, ControllerKind::Mpc).map_err(|e| match e {
        SimError::RunFailed { flagged, steps, fraction } => SimError::InvalidScenario(format!(
            "mpc run failed: {flagged}/{steps} flagged ({fraction:.1}%)"
        )),
        other => other,
    })?;
    let pid_trace = run_closed_loop(app, ControllerKind::Pid).map_err(|e| match e {
        SimError::RunFailed { flagged, steps, fraction } => SimError::InvalidScenario(format!(
            "pid run failed: {flagged}/{steps} flagged ({fraction:.1}%)"
        )),
        other => other,
    })?;
    let mpc = metrics_of(&mpc_trace, &scenario.road)?;
    let pid = metrics_of(&pid_trace, &scenario.road)?;
    Ok(ComparisonReport {
        mpc,
        pid,
        rmse_rel_diff: relative_difference(mpc.rmse, pid.rmse),
        yaw_tv_rel_diff: relative_difference(mpc.yaw_tv, pid.yaw_tv),
        rmse_max: app.scenario.rmse_max,
        mpc_rmse_ok: mpc.rmse < app.scenario.rmse_max,
        pid_rmse_ok: pid.rmse < app.scenario.rmse_max,
        mpc_smoother_yaw: mpc.yaw_tv < pid.yaw_tv,
    })
}
