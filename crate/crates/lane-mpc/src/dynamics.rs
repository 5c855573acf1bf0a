//! Vehicle models: Ackermann steering geometry, the nonlinear lateral/yaw
//! bicycle model with linear tire forces, RK4 integration of the plant, and
//! analytic linearization producing the discrete prediction model used by
//! the controller.
//!
//! Frames follow the rest of the crate: x forward, y right, z down; yaw is
//! positive toward +y (a right turn), as is a positive steering angle.

use nalgebra::{DMatrix, Matrix2x6, Matrix6, Matrix6x2, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("turn radius is infinite for a zero steering angle")]
    InfiniteRadius,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Physical constants of the bicycle model. `a + b` must equal the wheelbase.
#[derive(Debug, Clone, Copy)]
pub struct VehicleParams {
    /// mass, kg
    pub m: f64,
    /// yaw moment of inertia, kg m^2
    pub i_z: f64,
    /// CG to front axle, m
    pub a: f64,
    /// CG to rear axle, m
    pub b: f64,
    /// front cornering stiffness, N/rad
    pub c_f: f64,
    /// rear cornering stiffness, N/rad
    pub c_r: f64,
    /// wheelbase, m
    pub wheelbase: f64,
    /// track width, m
    pub track: f64,
    /// steering limit, rad
    pub delta_max: f64,
    /// lower bound on the longitudinal speed used in slip-angle formulas
    pub v_min_slip: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m", self.m),
            ("i_z", self.i_z),
            ("c_f", self.c_f),
            ("c_r", self.c_r),
            ("wheelbase", self.wheelbase),
            ("track", self.track),
            ("a", self.a),
            ("b", self.b),
            ("v_min_slip", self.v_min_slip),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if (self.a + self.b - self.wheelbase).abs() > 1e-9 {
            return Err(DynamicsError::InvalidParams(format!(
                "a + b = {} must equal the wheelbase {}",
                self.a + self.b,
                self.wheelbase
            )));
        }
        if !(self.delta_max > 0.0 && self.delta_max < std::f64::consts::FRAC_PI_2) {
            return Err(DynamicsError::InvalidParams(format!(
                "delta_max must be in (0, pi/2), got {}",
                self.delta_max
            )));
        }
        Ok(())
    }
}

impl Default for VehicleParams {
    /// 1:10-scale testbed constants.
    fn default() -> Self {
        Self {
            m: 3.2,
            i_z: 0.05,
            a: 0.15,
            b: 0.15,
            c_f: 50.0,
            c_r: 50.0,
            wheelbase: 0.3,
            track: 0.2,
            delta_max: 0.4,
            v_min_slip: 0.3,
        }
    }
}

/// Planar pose plus body-frame velocities and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// yaw, wrapped to (-pi, pi] by the integrator
    pub psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    /// yaw rate
    pub r: f64,
}

impl VehicleState {
    /// Sideslip angle, derived from the stored velocities.
    pub fn sideslip(&self) -> f64 {
        self.v_y.atan2(self.v_x)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.psi, self.v_x, self.v_y, self.r)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            x: v[0],
            y: v[1],
            psi: v[2],
            v_x: v[3],
            v_y: v[4],
            r: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

/// Front steering angle plus a longitudinal acceleration command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub delta: f64,
    pub a_x: f64,
}

/// Discrete linear model x(k+1) = A_d x(k) + B_d u(k), y = C x + D u,
/// obtained by linearizing the plant at (x_nom, u_nom).
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub ts: f64,
    pub x_nom: VehicleState,
    pub u_nom: ControlInput,
}

impl LinearModel {
    pub fn n_states(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_d.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Restricts the input space to the given columns of B_d / D.
    pub fn select_inputs(&self, cols: &[usize]) -> LinearModel {
        let b_d = DMatrix::from_fn(self.b_d.nrows(), cols.len(), |i, j| self.b_d[(i, cols[j])]);
        let d = DMatrix::from_fn(self.d.nrows(), cols.len(), |i, j| self.d[(i, cols[j])]);
        LinearModel {
            a_d: self.a_d.clone(),
            b_d,
            c: self.c.clone(),
            d,
            ts: self.ts,
            x_nom: self.x_nom,
            u_nom: self.u_nom,
        }
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta % (2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

fn cot(x: f64) -> f64 {
    1.0 / x.tan()
}

/// Splits an ideal central (bicycle) steering angle into the inner/outer
/// wheel pair of Ackermann geometry. The central angle is the cotangent mean
/// of the pair: cot(theta_c) = (cot(theta_in) + cot(theta_out)) / 2, and the
/// pair satisfies cot(theta_in) - cot(theta_out) = track / wheelbase.
/// Both returned angles carry the sign of the input (inner means toward the
/// turn center).
pub fn ackermann_angles(delta_center: f64, p: &VehicleParams) -> Result<(f64, f64)> {
    if delta_center.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(DynamicsError::InvalidArgument(format!(
            "central steering angle {delta_center} outside (-pi/2, pi/2)"
        )));
    }
    if delta_center == 0.0 {
        return Ok((0.0, 0.0));
    }
    let half_ratio = p.track / (2.0 * p.wheelbase);
    let mag = delta_center.abs();
    let cot_c = cot(mag);
    let theta_in = (1.0f64).atan2(cot_c - half_ratio);
    let theta_out = (1.0f64).atan2(cot_c + half_ratio);
    let sign = delta_center.signum();
    Ok((sign * theta_in, sign * theta_out))
}

/// Turn radii of a consistent Ackermann wheel pair: R = L / tan(theta),
/// returned as unsigned distances with R_out = R_in + track.
pub fn turn_radii(theta_in: f64, theta_out: f64, p: &VehicleParams) -> Result<(f64, f64)> {
    if theta_in == 0.0 || theta_out == 0.0 {
        return Err(DynamicsError::InfiniteRadius);
    }
    if theta_in.signum() != theta_out.signum() {
        return Err(DynamicsError::InvalidArgument(
            "wheel angles must share a sign".into(),
        ));
    }
    let r_in = p.wheelbase / theta_in.abs().tan();
    let r_out = p.wheelbase / theta_out.abs().tan();
    let consistency = (r_out - r_in - p.track).abs();
    if consistency > 1e-9 * r_in.abs().max(1.0) {
        return Err(DynamicsError::InvalidArgument(format!(
            "angles violate the Ackermann identity by {consistency:.3e} m"
        )));
    }
    Ok((r_in, r_out))
}

/// Front and rear slip angles. The longitudinal speed is floored at
/// `v_min_slip` to avoid the v_x -> 0 singularity.
pub fn slip_angles(s: &VehicleState, delta: f64, p: &VehicleParams) -> (f64, f64) {
    let v_x_eff = s.v_x.max(p.v_min_slip);
    let alpha_f = delta - (s.v_y + p.a * s.r) / v_x_eff;
    let alpha_r = -(s.v_y - p.b * s.r) / v_x_eff;
    (alpha_f, alpha_r)
}

/// Linear tire law: lateral force proportional to slip angle.
pub fn tire_forces(alpha_f: f64, alpha_r: f64, p: &VehicleParams) -> (f64, f64) {
    (p.c_f * alpha_f, p.c_r * alpha_r)
}

/// Continuous-time state derivative of the bicycle model:
/// lateral   m (v_y' + v_x r) = F_yf + F_yr
/// yaw       I_z r' = a F_yf - b F_yr
/// plus rigid-body pose kinematics and v_x' = a_x.
pub fn derivatives(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> Vector6<f64> {
    let (alpha_f, alpha_r) = slip_angles(s, u.delta, p);
    let (f_yf, f_yr) = tire_forces(alpha_f, alpha_r, p);
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    Vector6::new(
        s.v_x * cos_psi - s.v_y * sin_psi,
        s.v_x * sin_psi + s.v_y * cos_psi,
        s.r,
        u.a_x,
        (f_yf + f_yr) / p.m - s.v_x * s.r,
        (p.a * f_yf - p.b * f_yr) / p.i_z,
    )
}

/// One classical RK4 step of the plant; yaw is wrapped afterwards.
pub fn integrate_rk4(
    s: &VehicleState,
    u: &ControlInput,
    dt: f64,
    p: &VehicleParams,
) -> Result<VehicleState> {
    if dt <= 0.0 {
        return Err(DynamicsError::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let x0 = s.to_vector();
    let k1 = derivatives(s, u, p);
    let k2 = derivatives(&VehicleState::from_vector(&(x0 + 0.5 * dt * k1)), u, p);
    let k3 = derivatives(&VehicleState::from_vector(&(x0 + 0.5 * dt * k2)), u, p);
    let k4 = derivatives(&VehicleState::from_vector(&(x0 + dt * k3)), u, p);
    let x1 = x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let mut out = VehicleState::from_vector(&x1);
    out.psi = wrap_angle(out.psi);
    if !out.is_finite() {
        return Err(DynamicsError::Numerical(
            "non-finite state after integration step".into(),
        ));
    }
    Ok(out)
}

/// Analytic continuous Jacobians of [`derivatives`] at (s, u).
pub fn jacobians(
    s: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
) -> (Matrix6<f64>, Matrix6x2<f64>) {
    let v_x_eff = s.v_x.max(p.v_min_slip);
    // the slip-angle guard is flat below the floor
    let dvxe = if s.v_x > p.v_min_slip { 1.0 } else { 0.0 };
    let (sin_psi, cos_psi) = s.psi.sin_cos();

    let mut a = Matrix6::zeros();
    // position kinematics
    a[(0, 2)] = -s.v_x * sin_psi - s.v_y * cos_psi;
    a[(0, 3)] = cos_psi;
    a[(0, 4)] = -sin_psi;
    a[(1, 2)] = s.v_x * cos_psi - s.v_y * sin_psi;
    a[(1, 3)] = sin_psi;
    a[(1, 4)] = cos_psi;
    a[(2, 5)] = 1.0;

    // v_y' = (C_f (delta - (v_y + a r)/v_e) + C_r (-(v_y - b r)/v_e)) / m - v_x r
    let num_vy = p.c_f * (s.v_y + p.a * s.r) + p.c_r * (s.v_y - p.b * s.r);
    a[(4, 3)] = num_vy / (p.m * v_x_eff * v_x_eff) * dvxe - s.r;
    a[(4, 4)] = -(p.c_f + p.c_r) / (p.m * v_x_eff);
    a[(4, 5)] = (p.b * p.c_r - p.a * p.c_f) / (p.m * v_x_eff) - s.v_x;

    // r' = (a C_f (delta - (v_y + a r)/v_e) - b C_r (-(v_y - b r)/v_e)) / I_z
    let num_r = p.a * p.c_f * (s.v_y + p.a * s.r) - p.b * p.c_r * (s.v_y - p.b * s.r);
    a[(5, 3)] = num_r / (p.i_z * v_x_eff * v_x_eff) * dvxe;
    a[(5, 4)] = -(p.a * p.c_f - p.b * p.c_r) / (p.i_z * v_x_eff);
    a[(5, 5)] = -(p.a * p.a * p.c_f + p.b * p.b * p.c_r) / (p.i_z * v_x_eff);

    let mut b = Matrix6x2::zeros();
    b[(3, 1)] = 1.0; // v_x' = a_x
    b[(4, 0)] = p.c_f / p.m;
    b[(5, 0)] = p.a * p.c_f / p.i_z;

    let _ = u;
    (a, b)
}

/// Output matrix selecting the tracked outputs: lateral position y and
/// heading psi.
pub fn tracking_output_matrix() -> Matrix2x6<f64> {
    let mut c = Matrix2x6::zeros();
    c[(0, 1)] = 1.0;
    c[(1, 2)] = 1.0;
    c
}

/// Linearizes the plant at (s_nom, u_nom) and discretizes by forward Euler:
/// A_d = I + A Ts, B_d = B Ts. The output selects (y, psi); D = 0.
pub fn linearize(
    s_nom: &VehicleState,
    u_nom: &ControlInput,
    p: &VehicleParams,
    ts: f64,
) -> Result<LinearModel> {
    if ts <= 0.0 {
        return Err(DynamicsError::InvalidArgument(format!(
            "Ts must be positive, got {ts}"
        )));
    }
    let (a, b) = jacobians(s_nom, u_nom, p);
    let a_d = DMatrix::identity(6, 6) + DMatrix::from_iterator(6, 6, a.iter().cloned()) * ts;
    let b_d = DMatrix::from_iterator(6, 2, b.iter().cloned()) * ts;
    let c_fixed = tracking_output_matrix();
    let c = DMatrix::from_iterator(2, 6, c_fixed.iter().cloned());
    let d = DMatrix::zeros(2, 2);
    Ok(LinearModel {
        a_d,
        b_d,
        c,
        d,
        ts,
        x_nom: *s_nom,
        u_nom: *u_nom,
    })
}
