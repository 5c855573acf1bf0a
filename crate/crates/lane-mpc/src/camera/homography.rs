//! Planar homography estimation (normalized DLT) and perspective warping.
//!
//! The DLT null vector is taken from the eigen-decomposition of the 9x9
//! normal matrix AᵀA, solved by a self-contained cyclic Jacobi iteration.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{CameraError, Result};
use crate::imaging::Raster;

/// Nonsingular 3x3 projective map between planes, normalized so the bottom
/// right entry is 1 whenever it is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let det = h.determinant();
        if det.abs() <= 1e-12 {
            return Err(CameraError::Numerical(format!(
                "homography is singular (det = {det:.3e})"
            )));
        }
        let h = if h[(2, 2)].abs() > 1e-12 { h / h[(2, 2)] } else { h };
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self {
            h: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .h
            .try_inverse()
            .ok_or_else(|| CameraError::Numerical("homography inverse failed".into()))?;
        Homography::new(inv)
    }

    /// Applies the projective map to a point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.h * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Iterates until the off-diagonal mass falls below `tol` relative to the
/// initial Frobenius norm. Returns (eigenvalues, eigenvectors-as-columns),
/// unsorted.
pub(crate) fn jacobi_eigen_symmetric(a: &DMatrix<f64>, tol: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);

    let off_mass = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += m[(p, q)] * m[(p, q)];
            }
        }
        (2.0 * s).sqrt()
    };

    for _sweep in 0..100 {
        if off_mass(&m) <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * scale / (n * n) as f64 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[(i, i)]).collect();
    (eig, v)
}

/// Similarity transform that moves the centroid to the origin and scales the
/// mean radius to sqrt(2) (Hartley normalization).
fn normalizing_transform(points: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &(x, y) in points {
        mx += x;
        my += y;
    }
    mx /= n;
    my /= n;
    let mut mean_r = 0.0;
    for &(x, y) in points {
        mean_r += ((x - mx).powi(2) + (y - my).powi(2)).sqrt();
    }
    mean_r /= n;
    if mean_r < 1e-12 {
        return Err(CameraError::Degenerate(
            "all points coincide; cannot normalize".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn apply3(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Estimates the homography mapping `src` points onto `dst` points by the
/// normalized direct linear transform. Needs at least 4 correspondences in
/// general position; rank-deficient configurations are reported as degenerate.
pub fn estimate_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(CameraError::InvalidArgument(format!(
            "correspondence count mismatch: {} src vs {} dst",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(CameraError::InvalidArgument(format!(
            "need at least 4 correspondences, got {}",
            src.len()
        )));
    }
    let t_src = normalizing_transform(src)?;
    let t_dst = normalizing_transform(dst)?;

    let n = src.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let (x, y) = apply3(&t_src, src[i]);
        let (u, v) = apply3(&t_dst, dst[i]);
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    let m = a.transpose() * &a;
    let (eigvals, eigvecs) = jacobi_eigen_symmetric(&m, 1e-12);

    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eigvals[i].partial_cmp(&eigvals[j]).unwrap());
    let lam_min = eigvals[order[0]].max(0.0);
    let lam_second = eigvals[order[1]].max(0.0);
    let lam_max = eigvals[order[8]].abs().max(1.0);
    // A second near-zero eigenvalue means the null space has dimension >= 2:
    // the correspondences do not pin down a unique homography.
    if lam_second <= 1e-10 * lam_max {
        return Err(CameraError::Degenerate(format!(
            "correspondence matrix rank < 8 (lambda_2 = {lam_second:.3e})"
        )));
    }
    let _ = lam_min;

    let hvec = eigvecs.column(order[0]);
    let h_norm = Matrix3::new(
        hvec[0], hvec[1], hvec[2], hvec[3], hvec[4], hvec[5], hvec[6], hvec[7], hvec[8],
    );
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| CameraError::Numerical("normalization inverse failed".into()))?;
    let h = t_dst_inv * h_norm * t_src;
    Homography::new(h)
}

/// Warps an image through a homography by inverse mapping with bilinear
/// sampling; sources outside the input fill with 0.
pub fn warp_perspective(img: &Raster, h: &Homography, out_w: usize, out_h: usize) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        return Err(CameraError::InvalidArgument(format!(
            "warp target must be >= 1, got {out_w}x{out_h}"
        )));
    }
    let hinv = h.inverse()?;
    let mut out = Raster::zeros(out_w, out_h, img.channels())
        .map_err(|e| CameraError::InvalidArgument(e.to_string()))?;
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = hinv.apply(x as f64, y as f64);
            for c in 0..img.channels() {
                let v = img.sample_bilinear_zero(sx, sy, c);
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Homography from a source quadrilateral to a destination rectangle, for the
/// bird's-eye (inverse perspective) transform. The source quad must be a
/// proper convex quadrilateral.
pub fn birdseye_homography(src_quad: &[(f64, f64); 4], dst_rect: &[(f64, f64); 4]) -> Result<Homography> {
    // cross products of consecutive edges must share a sign
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = src_quad[i];
        let b = src_quad[(i + 1) % 4];
        let c = src_quad[(i + 2) % 4];
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-12 {
            return Err(CameraError::Degenerate(
                "source quadrilateral has collinear corners".into(),
            ));
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return Err(CameraError::Degenerate(
                "source quadrilateral is not convex".into(),
            ));
        }
    }
    estimate_homography(src_quad.as_slice(), dst_rect.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_entry_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let an = a / a[(2, 2)];
        let bn = b / b[(2, 2)];
        (an - bn).abs().max()
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // symmetric with known eigenvalues {1, 2, 3}
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0]);
        let q = {
            // rotate the basis a bit to make it non-trivial
            let c = 0.8f64;
            let s = 0.6f64;
            DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
        };
        let m = &q * &a * q.transpose();
        let (mut eig, vecs) = jacobi_eigen_symmetric(&m, 1e-14);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eig[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(eig[1], 2.0, epsilon = 1e-10);
        assert_relative_eq!(eig[2], 3.0, epsilon = 1e-10);
        // eigenvectors reconstruct the matrix
        let lam = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                let (e, _) = jacobi_eigen_symmetric(&m, 1e-14);
                e[i]
            } else {
                0.0
            }
        });
        let recon = &vecs * lam * vecs.transpose();
        assert!((recon - m).abs().max() < 1e-9);
    }

    #[test]
    fn identity_correspondences_give_identity() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let h = estimate_homography(&pts, &pts).unwrap();
        assert!(max_entry_diff(h.matrix(), &Matrix3::identity()) < 1e-10);
    }

    #[test]
    fn translation_recovered_exactly() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (2.0, 8.0)];
        let dst: Vec<(f64, f64)> = src.iter().map(|&(x, y)| (x + 5.0, y + 7.0)).collect();
        let h = estimate_homography(&src, &dst).unwrap();
        let expect = Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, 7.0, 0.0, 0.0, 1.0);
        assert!(max_entry_diff(h.matrix(), &expect) < 1e-8);
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = h.apply(s.0, s.1);
            assert_relative_eq!(u, d.0, epsilon = 1e-8);
            assert_relative_eq!(v, d.1, epsilon = 1e-8);
        }
    }

    #[test]
    fn synthesize_and_recover_random_homographies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let h0 = Matrix3::new(
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-0.2..0.2),
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                1.0,
            );
            if f64::abs(h0.determinant()) < 1e-3 {
                continue;
            }
            let src: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)))
                .collect();
            let h0h = Homography::new(h0).unwrap();
            let dst: Vec<(f64, f64)> = src.iter().map(|&(x, y)| h0h.apply(x, y)).collect();
            let est = estimate_homography(&src, &dst).unwrap();
            assert!(
                max_entry_diff(est.matrix(), &h0) < 1e-6,
                "recovery error {}",
                max_entry_diff(est.matrix(), &h0)
            );
        }
    }

    #[test]
    fn scale_invariance_conjugation() {
        let src = [(10.0, 20.0), (200.0, 30.0), (220.0, 210.0), (15.0, 190.0), (100.0, 100.0)];
        let h0 = Matrix3::new(0.9, 0.1, 5.0, -0.05, 1.1, -3.0, 1e-4, -2e-4, 1.0);
        let h0h = Homography::new(h0).unwrap();
        let dst: Vec<(f64, f64)> = src.iter().map(|&(x, y)| h0h.apply(x, y)).collect();
        let h1 = estimate_homography(&src, &dst).unwrap();

        let k = 10.0;
        let src_s: Vec<(f64, f64)> = src.iter().map(|&(x, y)| (k * x, k * y)).collect();
        let dst_s: Vec<(f64, f64)> = dst.iter().map(|&(x, y)| (k * x, k * y)).collect();
        let h2 = estimate_homography(&src_s, &dst_s).unwrap();

        // H2 should equal S H1 S^-1 with S = diag(k, k, 1)
        let s = Matrix3::new(k, 0.0, 0.0, 0.0, k, 0.0, 0.0, 0.0, 1.0);
        let conj = s * h1.matrix() * s.try_inverse().unwrap();
        assert!(max_entry_diff(h2.matrix(), &conj) < 1e-6);
    }

    #[test]
    fn collinear_sources_are_degenerate() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        let dst = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(matches!(
            estimate_homography(&src, &dst),
            Err(CameraError::Degenerate(_))
        ));
    }

    #[test]
    fn too_few_points_rejected() {
        let p = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)];
        assert!(matches!(
            estimate_homography(&p, &p),
            Err(CameraError::InvalidArgument(_))
        ));
    }

    #[test]
    fn warp_identity_preserves_image() {
        let mut img = Raster::zeros(16, 12, 1).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                img.set(x, y, 0, ((x * 13 + y * 31) % 256) as u8);
            }
        }
        let out = warp_perspective(&img, &Homography::identity(), 16, 12).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_integer_translation_matches_shift_oracle() {
        let mut img = Raster::zeros(20, 14, 1).unwrap();
        for y in 0..14 {
            for x in 0..20 {
                img.set(x, y, 0, ((x * 7 + y * 11) % 251) as u8);
            }
        }
        let (dx, dy) = (3i64, 5i64);
        let h = Homography::new(Matrix3::new(
            1.0, 0.0, dx as f64, 0.0, 1.0, dy as f64, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let out = warp_perspective(&img, &h, 20, 14).unwrap();
        for y in 0..14i64 {
            for x in 0..20i64 {
                let expect = if x - dx >= 0 && y - dy >= 0 && x - dx < 20 && y - dy < 14 {
                    img.get((x - dx) as usize, (y - dy) as usize, 0)
                } else {
                    0
                };
                assert_eq!(out.get(x as usize, y as usize, 0), expect, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn warp_round_trip_interior_pixels() {
        let mut img = Raster::zeros(64, 48, 1).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                // smooth ramp keeps bilinear interpolation error small
                img.set(x, y, 0, ((x as f64 * 2.5 + y as f64 * 1.5) as u32 % 256) as u8);
            }
        }
        let h = Homography::new(Matrix3::new(
            1.05, 0.02, 2.0, -0.01, 0.97, 1.0, 1e-4, -5e-5, 1.0,
        ))
        .unwrap();
        let fwd = warp_perspective(&img, &h, 64, 48).unwrap();
        let back = warp_perspective(&fwd, &h.inverse().unwrap(), 64, 48).unwrap();
        for y in 5..43 {
            for x in 5..59 {
                // skip pixels whose forward image fell outside the frame
                let (fx, fy) = h.apply(x as f64, y as f64);
                if fx < 1.0 || fy < 1.0 || fx > 62.0 || fy > 46.0 {
                    continue;
                }
                let d = (back.get(x, y, 0) as i32 - img.get(x, y, 0) as i32).abs();
                assert!(d <= 3, "at ({x},{y}): diff {d}");
            }
        }
    }

    #[test]
    fn birdseye_unit_square_identity() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let h = birdseye_homography(&sq, &sq).unwrap();
        assert!(max_entry_diff(h.matrix(), &Matrix3::identity()) < 1e-9);
    }

    #[test]
    fn birdseye_trapezoid_to_rectangle_corners_map_exactly() {
        let src = [(200.0, 480.0), (440.0, 480.0), (360.0, 300.0), (280.0, 300.0)];
        let dst = [(200.0, 480.0), (440.0, 480.0), (440.0, 0.0), (200.0, 0.0)];
        let h = birdseye_homography(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = h.apply(s.0, s.1);
            assert_relative_eq!(u, d.0, epsilon = 1e-9);
            assert_relative_eq!(v, d.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn birdseye_double_width_scale_term() {
        let src = [(0.0, 0.0), (100.0, 0.0), (100.0, 50.0), (0.0, 50.0)];
        let dst = [(0.0, 0.0), (200.0, 0.0), (200.0, 50.0), (0.0, 50.0)];
        let h = birdseye_homography(&src, &dst).unwrap();
        assert_relative_eq!(h.matrix()[(0, 0)], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn birdseye_rejects_nonconvex_quad() {
        // bow-tie ordering
        let src = [(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)];
        let dst = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        assert!(matches!(
            birdseye_homography(&src, &dst),
            Err(CameraError::Degenerate(_))
        ));
    }
}
