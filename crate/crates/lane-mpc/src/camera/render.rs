//! Synthetic road-view renderer: analytic ray/ground intersection against a
//! piecewise-cubic lane centerline. Replaces a physical front camera so the
//! whole perception loop runs deterministically in software.
//!
//! Frames: world and vehicle use x forward, y right, z down; the ground is
//! the z = 0 plane and the camera sits above it at negative z. The camera
//! frame is x right, y down, z forward (optical axis). A vehicle pose is
//! (x, y, yaw) with positive yaw turning toward +y.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{project_point, undistort_point, CameraError, CameraModel, Result};
use crate::imaging::Raster;

/// One cubic piece of the centerline: g(s) = sum c_i (s - s_start)^i.
#[derive(Debug, Clone, Copy)]
pub struct CubicSegment {
    pub s_start: f64,
    pub coeffs: [f64; 4],
}

impl CubicSegment {
    fn eval(&self, s: f64) -> f64 {
        let d = s - self.s_start;
        self.coeffs[0] + d * (self.coeffs[1] + d * (self.coeffs[2] + d * self.coeffs[3]))
    }

    fn slope(&self, s: f64) -> f64 {
        let d = s - self.s_start;
        self.coeffs[1] + d * (2.0 * self.coeffs[2] + d * 3.0 * self.coeffs[3])
    }

    fn second(&self, s: f64) -> f64 {
        let d = s - self.s_start;
        2.0 * self.coeffs[2] + 6.0 * self.coeffs[3] * d
    }
}

/// Piecewise-cubic lateral offset g(s) of the lane centerline, continuous in
/// s. Segments cover [first.s_start, inf); s before the first segment clamps
/// to the first segment's start value.
#[derive(Debug, Clone)]
pub struct Centerline {
    segments: Vec<CubicSegment>,
}

impl Centerline {
    pub fn new(segments: Vec<CubicSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(CameraError::InvalidArgument(
                "centerline needs at least one segment".into(),
            ));
        }
        for w in segments.windows(2) {
            if w[1].s_start <= w[0].s_start {
                return Err(CameraError::InvalidArgument(
                    "centerline segments must have strictly increasing s_start".into(),
                ));
            }
            let left = w[0].eval(w[1].s_start);
            let right = w[1].coeffs[0];
            if (left - right).abs() > 1e-9 {
                return Err(CameraError::InvalidArgument(format!(
                    "centerline discontinuous at s = {}: {} vs {}",
                    w[1].s_start, left, right
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(y: f64) -> Self {
        Self {
            segments: vec![CubicSegment {
                s_start: 0.0,
                coeffs: [y, 0.0, 0.0, 0.0],
            }],
        }
    }

    fn segment_at(&self, s: f64) -> &CubicSegment {
        let mut seg = &self.segments[0];
        for candidate in &self.segments {
            if candidate.s_start <= s {
                seg = candidate;
            } else {
                break;
            }
        }
        seg
    }

    /// Lateral offset of the centerline at station s.
    pub fn offset_at(&self, s: f64) -> f64 {
        let seg = self.segment_at(s);
        seg.eval(s.max(self.segments[0].s_start))
    }

    /// dg/ds at station s (zero before the first segment).
    pub fn slope_at(&self, s: f64) -> f64 {
        if s < self.segments[0].s_start {
            return 0.0;
        }
        self.segment_at(s).slope(s)
    }

    /// Signed curvature of the centerline graph at station s.
    pub fn curvature_at(&self, s: f64) -> f64 {
        if s < self.segments[0].s_start {
            return 0.0;
        }
        let seg = self.segment_at(s);
        let gp = seg.slope(s);
        let gpp = seg.second(s);
        gpp / (1.0 + gp * gp).powf(1.5)
    }
}

/// Single-lane road: a centerline with two marking bands at +/- lane_width/2.
#[derive(Debug, Clone)]
pub struct RoadModel {
    pub lane_width: f64,
    pub marking_width: f64,
    pub centerline: Centerline,
    /// BGR fill for the ground
    pub road_color: [u8; 3],
    /// BGR fill for the marking bands
    pub marking_color: [u8; 3],
}

impl RoadModel {
    pub fn new(
        lane_width: f64,
        marking_width: f64,
        centerline: Centerline,
        road_color: [u8; 3],
        marking_color: [u8; 3],
    ) -> Result<Self> {
        if !(lane_width > marking_width && marking_width > 0.0) {
            return Err(CameraError::InvalidArgument(format!(
                "need lane_width > marking_width > 0, got {lane_width} and {marking_width}"
            )));
        }
        Ok(Self {
            lane_width,
            marking_width,
            centerline,
            road_color,
            marking_color,
        })
    }

    /// BGR color of the ground at world (x, y).
    fn ground_color(&self, x: f64, y: f64) -> [u8; 3] {
        let d = y - self.centerline.offset_at(x);
        let half_lane = self.lane_width / 2.0;
        let half_mark = self.marking_width / 2.0;
        if (d - half_lane).abs() <= half_mark || (d + half_lane).abs() <= half_mark {
            self.marking_color
        } else {
            self.road_color
        }
    }
}

/// Rendering knobs that are not part of the camera or road models.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub width: usize,
    pub height: usize,
    pub sky_color: [u8; 3],
    /// ground hits farther than this from the camera are painted as sky
    pub draw_distance: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            sky_color: [200, 200, 200],
            draw_distance: 8.0,
        }
    }
}

/// Builds the vehicle→camera extrinsics for a camera at forward offset
/// `mount_x`, `height` meters above the ground plane, pitched down by
/// `pitch` radians.
pub fn mount_extrinsics(mount_x: f64, height: f64, pitch: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let (s, c) = pitch.sin_cos();
    // rows are the camera basis vectors expressed in vehicle coordinates
    #[rustfmt::skip]
    let r = Matrix3::new(
        0.0, 1.0, 0.0,   // x_cam = vehicle right
        -s,  0.0, c,     // y_cam = down, tipped forward by pitch
        c,   0.0, s,     // z_cam = forward, tipped toward the ground
    );
    let center = Vector3::new(mount_x, 0.0, -height);
    (r, -r * center)
}

/// Rotation of the (x, y) ground plane by yaw (about +z, i.e. toward +y).
fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Composes the camera's vehicle→camera mount with a vehicle pose, yielding
/// a world→camera model.
pub fn camera_at_pose(mount: &CameraModel, pose: (f64, f64, f64)) -> Result<CameraModel> {
    let (px, py, yaw) = pose;
    let world_to_vehicle = yaw_rotation(-yaw);
    let r = mount.rotation * world_to_vehicle;
    let t = mount.translation - r * Vector3::new(px, py, 0.0);
    mount.with_pose(r, t)
}

/// Camera center in world coordinates for a world→camera model.
fn camera_center(cam: &CameraModel) -> Vector3<f64> {
    -(cam.rotation.transpose() * cam.translation)
}

/// Casts the inverse projection ray of a pixel to the ground plane z = 0.
/// Returns the world hit point, or None for rays at or above the horizon.
/// `cam` must hold world→camera extrinsics (see [`camera_at_pose`]).
pub fn ray_cast_to_ground(cam: &CameraModel, u: f64, v: f64) -> Result<Option<Vector3<f64>>> {
    let center = camera_center(cam);
    if center.z >= 0.0 {
        return Err(CameraError::Configuration(format!(
            "camera center is at or below the ground plane (height {:.4} m)",
            -center.z
        )));
    }
    let (xd, yd) = cam.normalized_of_pixel(u, v);
    let (xn, yn) = undistort_point(&cam.dist, xd, yd)?;
    let dir = cam.rotation.transpose() * Vector3::new(xn, yn, 1.0);
    if dir.z <= 1e-12 {
        return Ok(None); // parallel to or away from the ground
    }
    let t = -center.z / dir.z;
    Ok(Some(center + t * dir))
}

/// Renders the road as seen from the camera mounted on a vehicle at `pose`.
/// `cam` holds the vehicle→camera mount extrinsics.
pub fn render_road_view(
    cam: &CameraModel,
    road: &RoadModel,
    pose: (f64, f64, f64),
    opts: &RenderOptions,
) -> Result<Raster> {
    let world_cam = camera_at_pose(cam, pose)?;
    let center = camera_center(&world_cam);
    if center.z >= 0.0 {
        return Err(CameraError::Configuration(format!(
            "camera center is at or below the ground plane (height {:.4} m)",
            -center.z
        )));
    }
    let mut img = Raster::zeros(opts.width, opts.height, 3)
        .map_err(|e| CameraError::InvalidArgument(e.to_string()))?;
    let max_d2 = opts.draw_distance * opts.draw_distance;
    for v in 0..opts.height {
        for u in 0..opts.width {
            let color = match ray_cast_to_ground(&world_cam, u as f64, v as f64)? {
                Some(hit) => {
                    let dx = hit.x - center.x;
                    let dy = hit.y - center.y;
                    if dx * dx + dy * dy <= max_d2 {
                        road.ground_color(hit.x, hit.y)
                    } else {
                        opts.sky_color
                    }
                }
                None => opts.sky_color,
            };
            for (c, &value) in color.iter().enumerate() {
                img.set(u, v, c, value);
            }
        }
    }
    Ok(img)
}

/// Adds zero-mean Gaussian noise (std in gray levels) to every sample,
/// clamped to [0, 255]. A no-op when std is zero.
pub fn add_pixel_noise(img: &mut Raster, std: f64, rng: &mut impl Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("std > 0");
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = img.get(x, y, c) as f64 + normal.sample(rng);
                img.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Ground patch ahead of the vehicle that the bird's-eye view rectifies:
/// stations [near, far] forward, lateral [-half_width, +half_width], mapped
/// onto a bev_width x bev_height pixel grid.
#[derive(Debug, Clone, Copy)]
pub struct BevPatch {
    pub near: f64,
    pub far: f64,
    pub half_width: f64,
    pub bev_width: usize,
    pub bev_height: usize,
}

impl BevPatch {
    pub fn validate(&self) -> Result<()> {
        if !(self.far > self.near && self.near > 0.0 && self.half_width > 0.0) {
            return Err(CameraError::InvalidArgument(format!(
                "bird's-eye patch needs far > near > 0 and half_width > 0, got near={}, far={}, half_width={}",
                self.near, self.far, self.half_width
            )));
        }
        if self.bev_width == 0 || self.bev_height == 0 {
            return Err(CameraError::InvalidArgument(
                "bird's-eye output dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Meters per bird's-eye pixel, lateral.
    pub fn m_per_px_x(&self) -> f64 {
        2.0 * self.half_width / self.bev_width as f64
    }

    /// Meters per bird's-eye pixel, longitudinal.
    pub fn m_per_px_y(&self) -> f64 {
        (self.far - self.near) / self.bev_height as f64
    }

    /// Bird's-eye pixel column of a vehicle-frame lateral offset.
    pub fn col_of_lateral(&self, y: f64) -> f64 {
        (y + self.half_width) / self.m_per_px_x() - 0.5
    }

    /// Vehicle-frame lateral offset of a bird's-eye column.
    pub fn lateral_of_col(&self, col: f64) -> f64 {
        (col + 0.5) * self.m_per_px_x() - self.half_width
    }

    /// Bird's-eye pixel row of a vehicle-frame forward station.
    pub fn row_of_station(&self, x: f64) -> f64 {
        self.bev_height as f64 - 0.5 - (x - self.near) / self.m_per_px_y()
    }

    /// The (possibly virtual, below-image) bird's-eye row of the vehicle
    /// origin. Together with [`anchor_col`](Self::anchor_col) this anchors
    /// the pixel→vehicle-frame conversion.
    pub fn anchor_row(&self) -> f64 {
        self.row_of_station(0.0)
    }

    pub fn anchor_col(&self) -> f64 {
        self.col_of_lateral(0.0)
    }

    /// Patch corners in the vehicle frame, ordered near-left, near-right,
    /// far-right, far-left.
    fn ground_corners(&self) -> [Vector3<f64>; 4] {
        [
            Vector3::new(self.near, -self.half_width, 0.0),
            Vector3::new(self.near, self.half_width, 0.0),
            Vector3::new(self.far, self.half_width, 0.0),
            Vector3::new(self.far, -self.half_width, 0.0),
        ]
    }

    /// Bird's-eye pixel coordinates of the patch corners, in the same order
    /// as [`ground_corners`](Self::ground_corners).
    fn bev_corners(&self) -> [(f64, f64); 4] {
        let w = self.bev_width as f64;
        let h = self.bev_height as f64;
        [
            (-0.5, h - 0.5),
            (w - 0.5, h - 0.5),
            (w - 0.5, -0.5),
            (-0.5, -0.5),
        ]
    }
}

/// Homography that maps the (undistorted) camera image onto the bird's-eye
/// patch: the four ground corners are projected through the mount camera and
/// paired with the bird's-eye rectangle corners.
pub fn birdseye_from_camera(mount: &CameraModel, patch: &BevPatch) -> Result<super::Homography> {
    patch.validate()?;
    // the pipeline undistorts before warping, so corners project through the
    // ideal pinhole model
    let ideal = mount.without_distortion();
    let mut src = [(0.0, 0.0); 4];
    for (i, corner) in patch.ground_corners().iter().enumerate() {
        src[i] = project_point(&ideal, corner)?;
    }
    super::birdseye_homography(&src, &patch.bev_corners())
}
