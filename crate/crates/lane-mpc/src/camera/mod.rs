//! Pinhole camera model with Brown–Conrady distortion, planar homography
//! estimation and warping, and a synthetic road-view renderer that stands in
//! for a physical front camera.

mod homography;
mod render;

pub use homography::{birdseye_homography, estimate_homography, warp_perspective, Homography};
pub use render::{
    add_pixel_noise, birdseye_from_camera, camera_at_pose, mount_extrinsics, ray_cast_to_ground,
    render_road_view, BevPatch, Centerline, CubicSegment, RenderOptions, RoadModel,
};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid camera model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point is behind the camera (z_c = {z:.6})")]
    BehindCamera { z: f64 },
    #[error("undistortion did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("camera configuration error: {0}")]
    Configuration(String),
}

pub type Result<T> = std::result::Result<T, CameraError>;

/// Brown–Conrady distortion coefficients (radial k1,k2,k3; tangential p1,p2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0 && self.k3 == 0.0
    }
}

/// Pinhole camera: intrinsics, distortion and a world→camera rigid transform.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub dist: Distortion,
    /// world→camera rotation (orthonormal, det +1)
    pub rotation: Matrix3<f64>,
    /// world→camera translation in meters
    pub translation: Vector3<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)] // mirrors the model's field list
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        skew: f64,
        dist: Distortion,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::InvalidModel(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        let rtr = rotation.transpose() * rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev >= 1e-9 {
            return Err(CameraError::InvalidModel(format!(
                "rotation is not orthonormal (max |R^T R - I| = {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= 1e-9 {
            return Err(CameraError::InvalidModel(format!(
                "rotation determinant {det} != 1"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            skew,
            dist,
            rotation,
            translation,
        })
    }

    /// Identity-pose camera, handy for intrinsics-only work.
    pub fn intrinsics_only(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64, dist: Distortion) -> Result<Self> {
        Self::new(fx, fy, cx, cy, skew, dist, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera with the same intrinsics but all distortion coefficients zero.
    pub fn without_distortion(&self) -> Self {
        let mut c = self.clone();
        c.dist = Distortion::default();
        c
    }

    /// Replaces the extrinsic pose, keeping intrinsics and distortion.
    pub fn with_pose(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::new(
            self.fx, self.fy, self.cx, self.cy, self.skew, self.dist, rotation, translation,
        )
    }

    /// Applies intrinsics to distorted normalized coordinates.
    pub fn pixel_of_normalized(&self, xd: f64, yd: f64) -> (f64, f64) {
        (self.fx * xd + self.skew * yd + self.cx, self.fy * yd + self.cy)
    }

    /// Inverts intrinsics: pixel → distorted normalized coordinates.
    pub fn normalized_of_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let yd = (v - self.cy) / self.fy;
        let xd = (u - self.cx - self.skew * yd) / self.fx;
        (xd, yd)
    }
}

/// Projects a world point through the full camera model, returning pixel
/// coordinates. Points with non-positive camera-frame depth are rejected.
pub fn project_point(cam: &CameraModel, p_world: &Vector3<f64>) -> Result<(f64, f64)> {
    let p_c = cam.rotation * p_world + cam.translation;
    if p_c.z <= 0.0 {
        return Err(CameraError::BehindCamera { z: p_c.z });
    }
    let x = p_c.x / p_c.z;
    let y = p_c.y / p_c.z;
    let (xd, yd) = distort_point(&cam.dist, x, y);
    Ok(cam.pixel_of_normalized(xd, yd))
}

/// Forward distortion: radial polynomial factor plus tangential terms applied
/// to normalized coordinates.
pub fn distort_point(dist: &Distortion, x: f64, y: f64) -> (f64, f64) {
    let r2 = x * x + y * y;
    let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2;
    let xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y;
    (xd, yd)
}

/// Jacobian of [`distort_point`] with respect to (x, y).
fn distort_jacobian(dist: &Distortion, x: f64, y: f64) -> [[f64; 2]; 2] {
    let r2 = x * x + y * y;
    let f = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2;
    let fp = dist.k1 + 2.0 * dist.k2 * r2 + 3.0 * dist.k3 * r2 * r2;
    let dxdx = f + 2.0 * x * x * fp + 2.0 * dist.p1 * y + 6.0 * dist.p2 * x;
    let dxdy = 2.0 * x * y * fp + 2.0 * dist.p1 * x + 2.0 * dist.p2 * y;
    let dydx = dxdy;
    let dydy = f + 2.0 * y * y * fp + 6.0 * dist.p1 * y + 2.0 * dist.p2 * x;
    [[dxdx, dxdy], [dydx, dydy]]
}

/// Inverts [`distort_point`] by Newton iteration, starting from the distorted
/// coordinates. Converges to 1e-10 residual within 50 iterations for moderate
/// coefficients.
pub fn undistort_point(dist: &Distortion, xd: f64, yd: f64) -> Result<(f64, f64)> {
    if dist.is_zero() {
        return Ok((xd, yd));
    }
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 50;
    // warm start: invert the scalar radial profile r_d(r) = r (1 + k1 r^2 +
    // k2 r^4 + k3 r^6) by Newton, which lands inside the 2-D basin even for
    // strong wide-angle lenses
    let rd = (xd * xd + yd * yd).sqrt();
    let (mut x, mut y) = (xd, yd);
    if rd > 1e-12 {
        let mut r = rd;
        for _ in 0..30 {
            let r2 = r * r;
            let f = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2;
            let fp = dist.k1 + 2.0 * dist.k2 * r2 + 3.0 * dist.k3 * r2 * r2;
            let g = r * f - rd;
            let gp = f + 2.0 * r2 * fp;
            if gp.abs() < 1e-12 {
                break;
            }
            let next = r - g / gp;
            if !next.is_finite() || next <= 0.0 {
                break;
            }
            if (next - r).abs() < 1e-14 {
                r = next;
                break;
            }
            r = next;
        }
        x = xd * (r / rd);
        y = yd * (r / rd);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let (fx, fy) = distort_point(dist, x, y);
        let (rx, ry) = (fx - xd, fy - yd);
        residual = (rx * rx + ry * ry).sqrt();
        if residual < TOL {
            return Ok((x, y));
        }
        let j = distort_jacobian(dist, x, y);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-15 {
            break;
        }
        let dx = (j[1][1] * rx - j[0][1] * ry) / det;
        let dy = (-j[1][0] * rx + j[0][0] * ry) / det;
        // backtrack the Newton step until the residual actually shrinks;
        // full steps can cycle under strong wide-angle distortion
        let mut scale = 1.0;
        loop {
            let (cx, cy) = (x - scale * dx, y - scale * dy);
            let (gx, gy) = distort_point(dist, cx, cy);
            let r_new = ((gx - xd).powi(2) + (gy - yd).powi(2)).sqrt();
            if r_new < residual || scale < 1.0 / 1024.0 {
                x = cx;
                y = cy;
                break;
            }
            scale *= 0.5;
        }
    }
    // final residual check in case the last step landed inside tolerance
    let (fx, fy) = distort_point(dist, x, y);
    let r = ((fx - xd).powi(2) + (fy - yd).powi(2)).sqrt();
    if r < TOL {
        Ok((x, y))
    } else {
        Err(CameraError::NoConvergence {
            residual: residual.min(r),
            iterations: MAX_ITER,
        })
    }
}

/// Removes lens distortion from an image by inverse mapping: each output
/// pixel is pushed through the forward distortion to find its source sample.
pub fn undistort_image(cam: &CameraModel, img: &crate::imaging::Raster) -> crate::imaging::Raster {
    if cam.dist.is_zero() {
        return img.clone();
    }
    let mut out = crate::imaging::Raster::zeros(img.width(), img.height(), img.channels())
        .expect("same shape");
    for v in 0..img.height() {
        for u in 0..img.width() {
            let (x, y) = cam.normalized_of_pixel(u as f64, v as f64);
            let (xd, yd) = distort_point(&cam.dist, x, y);
            let (su, sv) = cam.pixel_of_normalized(xd, yd);
            for c in 0..img.channels() {
                let val = img.sample_bilinear_zero(su, sv, c);
                out.set(u, v, c, val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Interior-vertex world points of a checkerboard with `cols` x `rows`
/// squares of side `square` meters, on the z = 0 plane. A 9x7 board yields
/// the classic 8x6 = 48 vertex grid. Row-major, first vertex at
/// (square, square, 0).
pub fn checkerboard_grid(cols: usize, rows: usize, square: f64) -> Result<Vec<Vector3<f64>>> {
    if cols < 2 || rows < 2 {
        return Err(CameraError::InvalidArgument(format!(
            "checkerboard needs at least 2x2 squares, got {cols}x{rows}"
        )));
    }
    if square <= 0.0 {
        return Err(CameraError::InvalidArgument(format!(
            "square size must be positive, got {square}"
        )));
    }
    let mut pts = Vec::with_capacity((cols - 1) * (rows - 1));
    for r in 1..rows {
        for c in 1..cols {
            pts.push(Vector3::new(c as f64 * square, r as f64 * square, 0.0));
        }
    }
    Ok(pts)
}
