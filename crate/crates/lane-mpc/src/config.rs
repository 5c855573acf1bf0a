//! INI-style configuration: `[section]` headers, `key = value` pairs, `#`
//! comments. Every key has a documented default; unknown sections or keys are
//! rejected with their line number, as are duplicates. Numbers parse as
//! decimal floats, booleans as true/false, anything else as a string.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::camera::{BevPatch, CameraModel, Distortion, RenderOptions};
use crate::control::{MpcConfig, PidConfig};
use crate::dynamics::VehicleParams;
use crate::lanes::{LaneDetectConfig, RoiLaw, SlidingWindowConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config value for {key}: {message}")]
    Validation { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "camera",
        &[
            "fx", "fy", "cx", "cy", "skew", "k1", "k2", "p1", "p2", "k3", "mount_x",
            "mount_height", "pitch_deg", "image_width", "image_height", "noise_std",
            "draw_distance",
        ],
    ),
    (
        "road",
        &[
            "lane_width", "marking_width", "road_b", "road_g", "road_r", "mark_b", "mark_g",
            "mark_r",
        ],
    ),
    (
        "vehicle",
        &[
            "m", "iz", "a", "b", "wheelbase", "track", "cf", "cr", "delta_max", "v_min_slip",
        ],
    ),
    (
        "mpc",
        &[
            "n", "nu", "nc", "ts", "q_y", "q_psi", "r_delta", "p_y", "p_psi", "delta_min",
            "delta_max", "y_lat_limit", "psi_limit", "y_soft_weight", "qp_tol", "qp_max_iter",
            "speed_kp",
        ],
    ),
    ("pid", &["kp", "ki", "kd", "i_limit"]),
    (
        "vision",
        &[
            "blur_size", "blur_sigma", "threshold", "maxval", "morph_size", "rotate_deg",
            "n_windows", "margin", "minpix", "roi_f0", "roi_kv", "roi_fmin", "roi_fmax",
            "bev_near", "bev_far", "bev_halfwidth", "bev_width", "bev_height", "n_ref_samples",
        ],
    ),
    (
        "scenario",
        &[
            "name", "target_speed", "duration", "plant_dt", "control_dt", "offset", "start_s",
            "ramp_len", "perception", "seed", "lateral_noise_std", "rmse_max",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq)]
enum RawValue {
    Number(f64),
    Bool(bool),
    Text(String),
}

#[derive(Debug, Default)]
struct RawConfig {
    values: HashMap<(String, String), (RawValue, usize)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut out = RawConfig::default();
        let mut section: Option<String> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: format!("malformed section header {line:?}"),
                    });
                }
                let name = line[1..line.len() - 1].trim().to_ascii_lowercase();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name);
                continue;
            }
            let Some((key_raw, value_raw)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            let section_name = section.clone().ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: "key before any [section] header".into(),
            })?;
            let key_display = key_raw.trim().to_string();
            let key = key_display.to_ascii_lowercase();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            let known = SECTIONS
                .iter()
                .find(|(s, _)| *s == section_name)
                .map(|(_, keys)| keys.contains(&key.as_str()))
                .unwrap_or(false);
            if !known {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown key {key_display:?} in section [{section_name}]"),
                });
            }
            let value_str = value_raw.trim();
            if value_str.is_empty() {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("missing value for key {key_display:?}"),
                });
            }
            let value = if let Ok(nv) = value_str.parse::<f64>() {
                RawValue::Number(nv)
            } else {
                match value_str {
                    "true" => RawValue::Bool(true),
                    "false" => RawValue::Bool(false),
                    other => RawValue::Text(other.to_string()),
                }
            };
            let slot = (section_name.clone(), key);
            if out.values.contains_key(&slot) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!(
                        "duplicate key {key_display:?} in section [{section_name}]"
                    ),
                });
            }
            out.values.insert(slot, (value, line_no));
        }
        Ok(out)
    }

    fn num(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.values.get(&(section.to_string(), key.to_string())) {
            None => Ok(default),
            Some((RawValue::Number(v), _)) => Ok(*v),
            Some((other, _)) => Err(ConfigError::Validation {
                key: format!("{section}.{key}"),
                message: format!("expected a number, found {other:?}"),
            }),
        }
    }

    fn text(&self, section: &str, key: &str, default: &str) -> Result<String> {
        match self.values.get(&(section.to_string(), key.to_string())) {
            None => Ok(default.to_string()),
            Some((RawValue::Text(v), _)) => Ok(v.clone()),
            Some((RawValue::Number(v), _)) => Ok(format!("{v}")),
            Some((RawValue::Bool(v), _)) => Ok(format!("{v}")),
        }
    }
}

fn require(cond: bool, key: &str, rule: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::Validation {
            key: key.to_string(),
            message: rule.to_string(),
        })
    }
}

fn as_count(v: f64, key: &str, min: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(ConfigError::Validation {
            key: key.to_string(),
            message: format!("must be a non-negative integer, got {v}"),
        });
    }
    let n = v as usize;
    require(n >= min, key, &format!("must be >= {min}"))?;
    Ok(n)
}

fn as_u8(v: f64, key: &str) -> Result<u8> {
    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
        return Err(ConfigError::Validation {
            key: key.to_string(),
            message: format!("must be an integer in [0, 255], got {v}"),
        });
    }
    Ok(v as u8)
}

/// Camera intrinsics plus the rig geometry and rendering knobs.
#[derive(Debug, Clone)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub dist: Distortion,
    pub mount_x: f64,
    pub mount_height: f64,
    /// downward pitch, radians
    pub pitch: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// per-pixel Gaussian noise in gray levels (0 disables)
    pub noise_std: f64,
    pub draw_distance: f64,
}

impl CameraConfig {
    /// Camera model carrying the vehicle→camera mount extrinsics.
    pub fn mount_camera(&self) -> std::result::Result<CameraModel, crate::camera::CameraError> {
        let (r, t) =
            crate::camera::mount_extrinsics(self.mount_x, self.mount_height, self.pitch);
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.skew, self.dist, r, t)
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            width: self.image_width,
            height: self.image_height,
            draw_distance: self.draw_distance,
            ..RenderOptions::default()
        }
    }
}

/// Road geometry and colors (the centerline comes from the scenario).
#[derive(Debug, Clone, Copy)]
pub struct RoadConfig {
    pub lane_width: f64,
    pub marking_width: f64,
    pub road_color: [u8; 3],
    pub marking_color: [u8; 3],
}

/// Lane-detection pipeline parameters.
#[derive(Debug, Clone, Copy)]
pub struct VisionConfig {
    pub blur_size: usize,
    pub blur_sigma: f64,
    pub threshold: u8,
    pub maxval: u8,
    pub morph_size: usize,
    pub rotate_deg: f64,
    pub lanes: LaneDetectConfig,
    pub bev: BevPatch,
    pub n_ref_samples: usize,
}

/// How the closed loop perceives the road.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptionMode {
    GroundTruth,
    VisionInLoop,
}

/// Scenario shape and run timing.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub target_speed: f64,
    pub duration: f64,
    pub plant_dt: f64,
    pub control_dt: f64,
    /// lane-change lateral offset, meters (positive = toward the right)
    pub offset: f64,
    pub start_s: f64,
    pub ramp_len: f64,
    pub perception: PerceptionMode,
    pub seed: u64,
    pub lateral_noise_std: f64,
    /// RMSE threshold used by comparison verdicts
    pub rmse_max: f64,
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub camera: CameraConfig,
    pub road: RoadConfig,
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub pid: PidConfig,
    pub vision: VisionConfig,
    pub scenario: ScenarioConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        parse_config("").expect("built-in defaults are valid")
    }
}

/// Parses configuration text into a fully validated [`AppConfig`]. Empty
/// input yields the documented defaults.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let raw = RawConfig::parse(text)?;

    // [camera]
    let camera = CameraConfig {
        fx: raw.num("camera", "fx", 320.0)?,
        fy: raw.num("camera", "fy", 320.0)?,
        cx: raw.num("camera", "cx", 319.5)?,
        cy: raw.num("camera", "cy", 239.5)?,
        skew: raw.num("camera", "skew", 0.0)?,
        dist: Distortion {
            k1: raw.num("camera", "k1", 0.0)?,
            k2: raw.num("camera", "k2", 0.0)?,
            p1: raw.num("camera", "p1", 0.0)?,
            p2: raw.num("camera", "p2", 0.0)?,
            k3: raw.num("camera", "k3", 0.0)?,
        },
        mount_x: raw.num("camera", "mount_x", 0.0)?,
        mount_height: raw.num("camera", "mount_height", 0.12)?,
        pitch: raw.num("camera", "pitch_deg", 2.0)?.to_radians(),
        image_width: as_count(raw.num("camera", "image_width", 640.0)?, "camera.image_width", 16)?,
        image_height: as_count(
            raw.num("camera", "image_height", 480.0)?,
            "camera.image_height",
            16,
        )?,
        noise_std: raw.num("camera", "noise_std", 0.0)?,
        draw_distance: raw.num("camera", "draw_distance", 8.0)?,
    };
    require(camera.fx > 0.0, "camera.fx", "must be positive")?;
    require(camera.fy > 0.0, "camera.fy", "must be positive")?;
    require(camera.mount_height > 0.0, "camera.mount_height", "must be positive")?;
    require(camera.draw_distance > 0.0, "camera.draw_distance", "must be positive")?;
    require(camera.noise_std >= 0.0, "camera.noise_std", "must be >= 0")?;

    // [road]
    let road = RoadConfig {
        lane_width: raw.num("road", "lane_width", 0.35)?,
        marking_width: raw.num("road", "marking_width", 0.05)?,
        road_color: [
            as_u8(raw.num("road", "road_b", 60.0)?, "road.road_b")?,
            as_u8(raw.num("road", "road_g", 60.0)?, "road.road_g")?,
            as_u8(raw.num("road", "road_r", 60.0)?, "road.road_r")?,
        ],
        marking_color: [
            as_u8(raw.num("road", "mark_b", 0.0)?, "road.mark_b")?,
            as_u8(raw.num("road", "mark_g", 220.0)?, "road.mark_g")?,
            as_u8(raw.num("road", "mark_r", 255.0)?, "road.mark_r")?,
        ],
    };
    require(
        road.lane_width > road.marking_width && road.marking_width > 0.0,
        "road.lane_width",
        "must satisfy lane_width > marking_width > 0",
    )?;

    // [vehicle]
    let vehicle = VehicleParams {
        m: raw.num("vehicle", "m", 3.2)?,
        i_z: raw.num("vehicle", "iz", 0.05)?,
        a: raw.num("vehicle", "a", 0.15)?,
        b: raw.num("vehicle", "b", 0.15)?,
        c_f: raw.num("vehicle", "cf", 50.0)?,
        c_r: raw.num("vehicle", "cr", 50.0)?,
        wheelbase: raw.num("vehicle", "wheelbase", 0.3)?,
        track: raw.num("vehicle", "track", 0.2)?,
        delta_max: raw.num("vehicle", "delta_max", 0.4)?,
        v_min_slip: raw.num("vehicle", "v_min_slip", 0.3)?,
    };
    vehicle.validate().map_err(|e| ConfigError::Validation {
        key: "vehicle".into(),
        message: e.to_string(),
    })?;

    // [mpc]
    let n = as_count(raw.num("mpc", "n", 20.0)?, "mpc.n", 1)?;
    let q_y = raw.num("mpc", "q_y", 10.0)?;
    let q_psi = raw.num("mpc", "q_psi", 1.0)?;
    let p_y = raw.num("mpc", "p_y", 10.0)?;
    let p_psi = raw.num("mpc", "p_psi", 1.0)?;
    let r_delta = raw.num("mpc", "r_delta", 1.0)?;
    let y_lat_limit = raw.num("mpc", "y_lat_limit", 1e9)?;
    let psi_limit = raw.num("mpc", "psi_limit", 1e9)?;
    let y_soft_weight = raw.num("mpc", "y_soft_weight", 0.0)?;
    let mpc = MpcConfig {
        n,
        n_u: as_count(raw.num("mpc", "nu", 5.0)?, "mpc.nu", 1)?,
        n_c: as_count(raw.num("mpc", "nc", 20.0)?, "mpc.nc", 1)?,
        ts: raw.num("mpc", "ts", 0.05)?,
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![q_y, q_psi])),
        r: DMatrix::from_element(1, 1, r_delta),
        p_term: DMatrix::from_diagonal(&DVector::from_vec(vec![p_y, p_psi])),
        u_min: DVector::from_element(1, raw.num("mpc", "delta_min", -0.4)?),
        u_max: DVector::from_element(1, raw.num("mpc", "delta_max", 0.4)?),
        y_min: Some(DVector::from_vec(vec![-y_lat_limit, -psi_limit])),
        y_max: Some(DVector::from_vec(vec![y_lat_limit, psi_limit])),
        y_soft_weight,
        qp_tol: raw.num("mpc", "qp_tol", 1e-8)?,
        qp_max_iter: as_count(raw.num("mpc", "qp_max_iter", 5000.0)?, "mpc.qp_max_iter", 1)?,
        speed_kp: raw.num("mpc", "speed_kp", 1.0)?,
    };
    mpc.validate().map_err(|e| ConfigError::Validation {
        key: "mpc".into(),
        message: e.to_string(),
    })?;
    require(mpc.qp_tol > 0.0, "mpc.qp_tol", "must be positive")?;

    // [pid]
    let pid = PidConfig {
        kp: raw.num("pid", "kp", 3.5)?,
        ki: raw.num("pid", "ki", 0.4)?,
        kd: raw.num("pid", "kd", 0.5)?,
        i_limit: raw.num("pid", "i_limit", 0.5)?,
    };
    pid.validate().map_err(|e| ConfigError::Validation {
        key: "pid.i_limit".into(),
        message: e.to_string(),
    })?;

    // [vision]
    let vision = VisionConfig {
        blur_size: as_count(raw.num("vision", "blur_size", 5.0)?, "vision.blur_size", 1)?,
        blur_sigma: raw.num("vision", "blur_sigma", 1.5)?,
        threshold: as_u8(raw.num("vision", "threshold", 30.0)?, "vision.threshold")?,
        maxval: as_u8(raw.num("vision", "maxval", 255.0)?, "vision.maxval")?,
        morph_size: as_count(raw.num("vision", "morph_size", 5.0)?, "vision.morph_size", 1)?,
        rotate_deg: raw.num("vision", "rotate_deg", 0.0)?,
        lanes: LaneDetectConfig {
            windows: SlidingWindowConfig {
                n_windows: as_count(raw.num("vision", "n_windows", 9.0)?, "vision.n_windows", 1)?,
                margin: as_count(raw.num("vision", "margin", 60.0)?, "vision.margin", 1)?,
                minpix: as_count(raw.num("vision", "minpix", 40.0)?, "vision.minpix", 1)?,
                roi_top_frac: 0.55, // replaced per frame by the speed law
            },
            roi_law: RoiLaw {
                f0: raw.num("vision", "roi_f0", 0.55)?,
                k_v: raw.num("vision", "roi_kv", 0.05)?,
                f_min: raw.num("vision", "roi_fmin", 0.30)?,
                f_max: raw.num("vision", "roi_fmax", 0.60)?,
            },
        },
        bev: BevPatch {
            near: raw.num("vision", "bev_near", 0.35)?,
            far: raw.num("vision", "bev_far", 2.75)?,
            half_width: raw.num("vision", "bev_halfwidth", 0.6)?,
            bev_width: as_count(raw.num("vision", "bev_width", 640.0)?, "vision.bev_width", 16)?,
            bev_height: as_count(
                raw.num("vision", "bev_height", 480.0)?,
                "vision.bev_height",
                16,
            )?,
        },
        n_ref_samples: as_count(
            raw.num("vision", "n_ref_samples", 40.0)?,
            "vision.n_ref_samples",
            2,
        )?,
    };
    require(vision.blur_size % 2 == 1, "vision.blur_size", "must be odd")?;
    require(vision.blur_sigma > 0.0, "vision.blur_sigma", "must be positive")?;
    require(vision.morph_size % 2 == 1, "vision.morph_size", "must be odd")?;
    require(vision.maxval > 0, "vision.maxval", "must be positive")?;
    vision.bev.validate().map_err(|e| ConfigError::Validation {
        key: "vision.bev_near".into(),
        message: e.to_string(),
    })?;
    let law = &vision.lanes.roi_law;
    require(
        0.0 <= law.f_min && law.f_min <= law.f_max && law.f_max < 1.0,
        "vision.roi_fmin",
        "must satisfy 0 <= roi_fmin <= roi_fmax < 1",
    )?;

    // [scenario]
    let perception_text = raw.text("scenario", "perception", "ground_truth")?;
    let perception = match perception_text.as_str() {
        "ground_truth" => PerceptionMode::GroundTruth,
        "vision_in_loop" => PerceptionMode::VisionInLoop,
        other => {
            return Err(ConfigError::Validation {
                key: "scenario.perception".into(),
                message: format!(
                    "must be ground_truth or vision_in_loop, got {other:?}"
                ),
            })
        }
    };
    let seed_raw = raw.num("scenario", "seed", 42.0)?;
    if seed_raw.fract() != 0.0 || seed_raw < 0.0 {
        return Err(ConfigError::Validation {
            key: "scenario.seed".into(),
            message: format!("must be a non-negative integer, got {seed_raw}"),
        });
    }
    let scenario = ScenarioConfig {
        name: raw.text("scenario", "name", "lane_change")?,
        target_speed: raw.num("scenario", "target_speed", 2.0)?,
        duration: raw.num("scenario", "duration", 8.0)?,
        plant_dt: raw.num("scenario", "plant_dt", 0.002)?,
        control_dt: raw.num("scenario", "control_dt", 0.05)?,
        offset: raw.num("scenario", "offset", 0.35)?,
        start_s: raw.num("scenario", "start_s", 2.0)?,
        ramp_len: raw.num("scenario", "ramp_len", 2.0)?,
        perception,
        seed: seed_raw as u64,
        lateral_noise_std: raw.num("scenario", "lateral_noise_std", 0.0)?,
        rmse_max: raw.num("scenario", "rmse_max", 0.10)?,
    };
    require(scenario.duration > 0.0, "scenario.duration", "must be positive")?;
    require(scenario.plant_dt > 0.0, "scenario.plant_dt", "must be positive")?;
    require(scenario.control_dt > 0.0, "scenario.control_dt", "must be positive")?;
    require(scenario.target_speed > 0.0, "scenario.target_speed", "must be positive")?;
    require(scenario.ramp_len > 0.0, "scenario.ramp_len", "must be positive")?;
    require(
        scenario.lateral_noise_std >= 0.0,
        "scenario.lateral_noise_std",
        "must be >= 0",
    )?;
    let ratio = scenario.control_dt / scenario.plant_dt;
    require(
        (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0,
        "scenario.control_dt",
        "must be an integer multiple of plant_dt",
    )?;

    Ok(AppConfig {
        camera,
        road,
        vehicle,
        mpc,
        pid,
        vision,
        scenario,
    })
}
