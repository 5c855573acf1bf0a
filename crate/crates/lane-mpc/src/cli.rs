//! Command implementations behind the `lane-mpc` binary. Each command
//! returns a stable exit code: 0 success, 1 usage/IO error, 2 detection
//! failure, 3 simulation failure.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::{camera_at_pose, estimate_homography, project_point};
use crate::config::{parse_config, AppConfig};
use crate::control::ControllerKind;
use crate::imaging::{load_pnm, save_pnm};
use crate::lanes::LaneError;
use crate::plot::{line_plot, Series};
use crate::sim::{compare_controllers, rmse_crosstrack, run_closed_loop, Scenario, SimError};
use crate::vision::{Pipeline, PipelineStages, VisionError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DETECTION: i32 = 2;
pub const EXIT_SIMULATION: i32 = 3;

/// Checkerboard used by `calibrate-check`: a 9x7 board with 0.05 m squares
/// lying on the ground, 0.55 m ahead of the vehicle, laterally centered.
pub const CHECKERBOARD_COLS: usize = 9;
pub const CHECKERBOARD_ROWS: usize = 7;
pub const CHECKERBOARD_SQUARE_M: f64 = 0.05;
pub const CHECKERBOARD_FORWARD_M: f64 = 0.55;

fn load_app_config(path: Option<&Path>) -> Result<AppConfig, String> {
    let text = match path {
        None => String::new(),
        Some(p) => fs::read_to_string(p)
            .map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
    };
    parse_config(&text).map_err(|e| e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn dump_stages(stages: &PipelineStages, dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    for (name, img) in stages.named() {
        let ext = if img.channels() == 3 { "ppm" } else { "pgm" };
        let path = dir.join(format!("{name}.{ext}"));
        save_pnm(img, &path).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn lanes_csv(fit: &crate::lanes::LaneFit) -> String {
    let mut out = String::from("row,left,right,center\n");
    for row in fit.valid_rows.0..=fit.valid_rows.1 {
        let r = row as f64;
        out.push_str(&format!(
            "{row},{:.3},{:.3},{:.3}\n",
            fit.left_col(r),
            fit.right_col(r),
            fit.center_col(r)
        ));
    }
    out
}

fn fit_txt(fit: &crate::lanes::LaneFit) -> String {
    let mut out = String::new();
    for (side, c) in [("left", &fit.left), ("right", &fit.right)] {
        for (i, v) in c.iter().enumerate() {
            out.push_str(&format!("{side}_c{i} = {:.8e}\n", v));
        }
    }
    out
}

/// Runs the full detection pipeline on one PPM image, writing the 8 per-stage
/// dumps, `lanes.csv` and `fit.txt` into `out_dir`.
pub fn cmd_detect(image: &Path, config: Option<&Path>, out_dir: &Path) -> i32 {
    match run_detect(image, config, out_dir) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}

fn run_detect(image: &Path, config: Option<&Path>, out_dir: &Path) -> Result<i32, String> {
    let app = load_app_config(config)?;
    let frame = load_pnm(image).map_err(|e| e.to_string())?;
    if frame.channels() != 3 {
        return Err(format!(
            "{} is not a 3-channel PPM (P6) image",
            image.display()
        ));
    }
    let pipeline = Pipeline::new(&app.camera, app.vision).map_err(|e| e.to_string())?;
    let stages = pipeline.stages(&frame).map_err(|e| e.to_string())?;
    dump_stages(&stages, out_dir)?;
    // a still image carries no speed; the region of interest uses v = 0
    match pipeline.detect_from_stages(&stages, 0.0) {
        Ok(det) => {
            write_file(&out_dir.join("lanes.csv"), lanes_csv(&det.fit).as_bytes())?;
            write_file(&out_dir.join("fit.txt"), fit_txt(&det.fit).as_bytes())?;
            println!(
                "detected lanes: left base {:.1} px, right base {:.1} px at the bottom row",
                det.fit.left_col(app.vision.bev.bev_height as f64 - 1.0),
                det.fit.right_col(app.vision.bev.bev_height as f64 - 1.0)
            );
            Ok(EXIT_OK)
        }
        Err(VisionError::Lane(e @ (LaneError::MissingLane { .. } | LaneError::Fit { .. }))) => {
            eprintln!("detection failed: {e}");
            Ok(EXIT_DETECTION)
        }
        Err(e) => Err(e.to_string()),
    }
}

fn metrics_txt(rmse: f64, tv: f64, std: f64) -> String {
    format!("rmse_crosstrack = {rmse:.9}\nyaw_rate_tv = {tv:.9}\nyaw_rate_std = {std:.9}\n")
}

/// Runs the closed loop and writes `trace.csv`, `metrics.txt`,
/// `trajectory.svg` and `yawrate.svg` into `out_dir`.
pub fn cmd_simulate(
    config: Option<&Path>,
    controller: ControllerKind,
    out_dir: &Path,
    seed: Option<u64>,
    debug_dumps: bool,
) -> i32 {
    let app = match load_app_config(config) {
        Ok(mut app) => {
            if let Some(seed) = seed {
                app.scenario.seed = seed;
            }
            app
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    match run_simulate(&app, controller, out_dir, debug_dumps) {
        Ok(()) => EXIT_OK,
        Err(SimulateFailure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(SimulateFailure::Run(msg)) => {
            eprintln!("simulation failed: {msg}");
            EXIT_SIMULATION
        }
    }
}

enum SimulateFailure {
    Usage(String),
    Run(String),
}

fn run_simulate(
    app: &AppConfig,
    controller: ControllerKind,
    out_dir: &Path,
    debug_dumps: bool,
) -> Result<(), SimulateFailure> {
    let scenario = Scenario::from_config(app).map_err(|e| SimulateFailure::Usage(e.to_string()))?;
    let trace = run_closed_loop(app, controller).map_err(|e| match e {
        SimError::RunFailed { .. } => SimulateFailure::Run(e.to_string()),
        other => SimulateFailure::Run(other.to_string()),
    })?;

    let rmse = rmse_crosstrack(&trace, &scenario.road)
        .map_err(|e| SimulateFailure::Run(e.to_string()))?;
    let (tv, std) = crate::sim::yaw_rate_smoothness(&trace)
        .map_err(|e| SimulateFailure::Run(e.to_string()))?;

    let wf = |p: &Path, b: &[u8]| write_file(p, b).map_err(SimulateFailure::Usage);
    wf(&out_dir.join("trace.csv"), trace.to_csv().as_bytes())?;
    wf(&out_dir.join("metrics.txt"), metrics_txt(rmse, tv, std).as_bytes())?;

    let lateral: Vec<(f64, f64)> = trace.rows.iter().map(|r| (r.t, r.state.y)).collect();
    let reference: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .map(|r| (r.t, scenario.road.centerline.offset_at(r.state.x)))
        .collect();
    let traj_svg = line_plot(
        &format!("Lateral position vs time ({controller})"),
        "t [s]",
        "y [m]",
        &[
            Series { label: "vehicle", points: &lateral, color: "#1f77b4" },
            Series { label: "reference", points: &reference, color: "#d62728" },
        ],
    );
    wf(&out_dir.join("trajectory.svg"), traj_svg.as_bytes())?;

    let yaw: Vec<(f64, f64)> = trace.rows.iter().map(|r| (r.t, r.state.r)).collect();
    let yaw_svg = line_plot(
        &format!("Yaw rate vs time ({controller})"),
        "t [s]",
        "r [rad/s]",
        &[Series { label: "yaw rate", points: &yaw, color: "#1f77b4" }],
    );
    wf(&out_dir.join("yawrate.svg"), yaw_svg.as_bytes())?;

    if debug_dumps {
        let mount = app
            .camera
            .mount_camera()
            .map_err(|e| SimulateFailure::Usage(e.to_string()))?;
        let pose0 = trace.rows.first().map(|r| (r.state.x, r.state.y, r.state.psi));
        if let Some(pose) = pose0 {
            let frame =
                crate::camera::render_road_view(&mount, &scenario.road, pose, &app.camera.render_options())
                    .map_err(|e| SimulateFailure::Run(e.to_string()))?;
            let pipeline = Pipeline::new(&app.camera, app.vision)
                .map_err(|e| SimulateFailure::Usage(e.to_string()))?;
            let stages = pipeline
                .stages(&frame)
                .map_err(|e| SimulateFailure::Run(e.to_string()))?;
            dump_stages(&stages, &out_dir.join("debug")).map_err(SimulateFailure::Usage)?;
            if let Ok(det) = pipeline.detect_from_stages(&stages, scenario.target_speed) {
                wf(&out_dir.join("debug").join("lanes.csv"), lanes_csv(&det.fit).as_bytes())?;
            }
        }
    }

    println!(
        "{} run complete: rmse = {rmse:.4} m, yaw TV = {tv:.4} rad/s over {} steps",
        controller,
        trace.rows.len()
    );
    Ok(())
}

/// Runs both controllers on the same scenario and writes `report.txt`.
pub fn cmd_compare(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> i32 {
    let app = match load_app_config(config) {
        Ok(mut app) => {
            if let Some(seed) = seed {
                app.scenario.seed = seed;
            }
            app
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    match compare_controllers(&app) {
        Ok(report) => {
            let text = report.render_text();
            if let Err(msg) = write_file(&out_dir.join("report.txt"), text.as_bytes()) {
                eprintln!("error: {msg}");
                return EXIT_USAGE;
            }
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("comparison failed: {e}");
            EXIT_SIMULATION
        }
    }
}

/// Projects a synthetic checkerboard through the configured camera, estimates
/// the ground-plane homography from the projected vertices, and reports the
/// maximum reprojection error. Exits 0 only when the error is below 1e-6 px.
pub fn cmd_calibrate_check(config: Option<&Path>) -> i32 {
    let app = match load_app_config(config) {
        Ok(app) => app,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    match run_calibrate_check(&app) {
        Ok(max_err) => {
            if max_err < 1e-6 {
                EXIT_OK
            } else {
                eprintln!("reprojection error {max_err:.3e} px exceeds 1e-6");
                EXIT_USAGE
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}

fn run_calibrate_check(app: &AppConfig) -> Result<f64, String> {
    if app.camera.mount_height <= 0.0 {
        return Err(format!(
            "camera is at or below the ground plane (mount_height = {})",
            app.camera.mount_height
        ));
    }
    let mount = app.camera.mount_camera().map_err(|e| e.to_string())?;
    let cam = camera_at_pose(&mount, (0.0, 0.0, 0.0)).map_err(|e| e.to_string())?;

    let grid = crate::camera::checkerboard_grid(
        CHECKERBOARD_COLS,
        CHECKERBOARD_ROWS,
        CHECKERBOARD_SQUARE_M,
    )
    .map_err(|e| e.to_string())?;
    println!(
        "checkerboard {CHECKERBOARD_COLS}x{CHECKERBOARD_ROWS}: {} vertices",
        grid.len()
    );

    let lateral_center = CHECKERBOARD_ROWS as f64 * CHECKERBOARD_SQUARE_M / 2.0;
    let mut plane_pts = Vec::with_capacity(grid.len());
    let mut image_pts = Vec::with_capacity(grid.len());
    for p in &grid {
        // board x runs forward, board y runs laterally, centered on the axis
        let world = Vector3::new(
            CHECKERBOARD_FORWARD_M + p.x,
            p.y - lateral_center,
            0.0,
        );
        let (u, v) = project_point(&cam, &world).map_err(|e| e.to_string())?;
        plane_pts.push((p.x, p.y));
        image_pts.push((u, v));
    }

    let h = estimate_homography(&plane_pts, &image_pts).map_err(|e| e.to_string())?;
    let mut max_err = 0.0f64;
    for (src, dst) in plane_pts.iter().zip(&image_pts) {
        let (u, v) = h.apply(src.0, src.1);
        let err = ((u - dst.0).powi(2) + (v - dst.1).powi(2)).sqrt();
        max_err = max_err.max(err);
    }
    println!("max reprojection error = {max_err:.3e} px");
    Ok(max_err)
}
