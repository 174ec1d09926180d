//! Rotation utilities: symmetric orthogonalization (nearest rotation via
//! SVD), yaw binning, camera-local yaw zeroing, geodesic distance, and the
//! rotation regression loss with its analytic gradient.
//!
//! Conventions fixed here and used everywhere else:
//! - Z is up; yaw is the rotation about Z.
//! - Euler order is ZYX: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
//! - Yaw bins are half-open 5-degree intervals `[5k, 5k+5)`, 72 per turn.

use nalgebra::{Matrix3, Vector3};

/// Orthonormality tolerance used by [`Rotation::try_new`].
pub const ROTATION_TOL: f64 = 1e-6;

/// Tolerance below which an SVD is treated as degenerate.
pub const SVD_DEGENERACY_TOL: f64 = 1e-9;

/// Number of 5-degree yaw bins in a full turn.
pub const YAW_BINS: u32 = 72;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RotError {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// A proper rotation (element of SO(3)), stored as a 3x3 matrix.
///
/// Construction goes through [`Rotation::try_new`] (strict check) or
/// [`symmetric_orthogonalize`] (projection), so a held value always satisfies
/// `R^T R = I` and `det R = +1` within tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Checks orthonormality and determinant within `tol` before wrapping.
    pub fn try_new(m: Matrix3<f64>, tol: f64) -> Result<Self, RotError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(RotError::NonFinite);
        }
        let gram = m.transpose() * m;
        let ortho_err = (gram - Matrix3::identity()).norm();
        if ortho_err > tol {
            return Err(RotError::NotARotation(format!(
                "orthonormality error {ortho_err:.3e} exceeds {tol:.1e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > tol {
            return Err(RotError::NotARotation(format!("determinant {det:.6}")));
        }
        Ok(Rotation(m))
    }

    /// Rotation about the Z (up) axis by `radians`.
    pub fn about_z(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation about the Y axis by `radians`.
    pub fn about_y(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    /// Rotation about the X axis by `radians`.
    pub fn about_x(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    /// Wraps a matrix without checking it. For I/O and test paths only;
    /// [`crate::scene::validate`] is the checker for values built this way.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Row-major flattening, the layout used by rotation slot payloads.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// ZYX Euler angles `(yaw, pitch, roll)` in radians.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        (yaw, pitch, roll)
    }

    /// Yaw about Z in degrees, in `[0, 360)`.
    pub fn yaw_degrees(&self) -> f64 {
        let (yaw, _, _) = self.euler_zyx();
        yaw.to_degrees().rem_euclid(360.0)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// One of 72 five-degree camera-relative yaw increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YawBin(u8);

impl YawBin {
    pub fn new(index: u8) -> Option<Self> {
        (u32::from(index) < YAW_BINS).then_some(YawBin(index))
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    /// The bin's lower edge in degrees.
    pub fn lower_degrees(&self) -> f64 {
        f64::from(self.0) * 5.0
    }

    /// The bin's center in degrees.
    pub fn center_degrees(&self) -> f64 {
        self.lower_degrees() + 2.5
    }
}

/// A 3x3 matrix from its row-major flattening (the slot payload layout).
pub fn matrix_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

/// Bins a yaw angle into its 5-degree increment: `floor((yaw mod 360)/5)`.
pub fn yaw_bin(yaw_deg: f64) -> YawBin {
    let wrapped = yaw_deg.rem_euclid(360.0);
    let idx = (wrapped / 5.0).floor() as u32 % YAW_BINS;
    YawBin(idx as u8)
}

/// Outcome of [`symmetric_orthogonalize_full`].
#[derive(Debug, Clone, Copy)]
pub struct Orthogonalized {
    pub rotation: Rotation,
    /// Set when the nearest-rotation problem is non-unique within
    /// [`SVD_DEGENERACY_TOL`] (relative to the largest singular value); the
    /// returned rotation is still a valid minimizer.
    pub degenerate: bool,
    /// Singular values in descending order.
    pub singular_values: [f64; 3],
}

/// Projects an arbitrary matrix to the Frobenius-nearest proper rotation.
///
/// With `M = U S V^T`, the result is `U diag(1, 1, sign(det(U V^T))) V^T`.
pub fn symmetric_orthogonalize(m: &Matrix3<f64>) -> Rotation {
    symmetric_orthogonalize_full(m).rotation
}

pub fn symmetric_orthogonalize_full(m: &Matrix3<f64>) -> Orthogonalized {
    assert!(m.iter().all(|v| v.is_finite()), "input must be finite");
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let s = svd.singular_values;
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    // Flip the direction of the smallest singular value (nalgebra sorts
    // descending) to land on the nearest proper rotation.
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;

    let scale = s[0].max(1.0);
    // Non-unique when M is rank-deficient below rank 2, or when det < 0 and
    // the two smallest singular values coincide (either may be flipped).
    let degenerate = s[1] <= SVD_DEGENERACY_TOL * scale
        || (sign < 0.0 && (s[1] - s[2]).abs() <= SVD_DEGENERACY_TOL * scale);

    let rotation = Rotation::try_new(r, 1e-9).unwrap_or_else(|_| {
        // SVD round-off can leave us a hair outside the strict tolerance;
        // one more projection of the product cleans it up.
        let svd2 = r.svd(true, true);
        let u2 = svd2.u.expect("svd with u");
        let v2_t = svd2.v_t.expect("svd with v_t");
        let sign2 = if (u2 * v2_t).determinant() < 0.0 { -1.0 } else { 1.0 };
        let d2 = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign2));
        Rotation(u2 * d2 * v2_t)
    });

    Orthogonalized {
        rotation,
        degenerate,
        singular_values: [s[0], s[1], s[2]],
    }
}

/// True when perturbing `m` keeps the orthogonalization differential
/// well-conditioned: all singular-value pair sums stay above `margin`.
///
/// The backward pass divides by `(s_i^2 - s_j^2) = (s_i - s_j)(s_i + s_j)`
/// with the determinant-sign absorbed; the relevant conditioning quantity is
/// `s_i + sign * s_j` for the flipped axis, which this checks directly.
pub fn orthogonalize_grad_well_conditioned(m: &Matrix3<f64>, margin: f64) -> bool {
    let svd = m.svd(false, false);
    let s = svd.singular_values;
    let det = m.determinant();
    let sign = if det < 0.0 { -1.0 } else { 1.0 };
    let d = [1.0, 1.0, sign];
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (d[i] * s[i] + d[j] * s[j]).abs() < margin || (s[i] - s[j]).abs() < margin {
                return false;
            }
        }
    }
    true
}

/// Vector-Jacobian product through [`symmetric_orthogonalize`].
///
/// Given `grad_r = dL/dR` at `R = orth(M)`, returns `dL/dM` using the SVD
/// differential. Near-degenerate singular-value gaps are clamped at
/// [`SVD_DEGENERACY_TOL`] so training never produces non-finite gradients;
/// gradient *checks* should exclude such inputs via
/// [`orthogonalize_grad_well_conditioned`].
pub fn orthogonalize_vjp(m: &Matrix3<f64>, grad_r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let s = svd.singular_values;
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let d = [1.0, 1.0, sign];

    // H = U^T G V; the VJP is U W V^T where W couples off-diagonal pairs of
    // P = U^T dM V through the rotation differential
    //   dR = U (Om_u D - D Om_v) V^T,
    //   Om_u[i][j] * (s_i^2 - s_j^2) terms solved from P.
    let h = u.transpose() * grad_r * v_t.transpose();
    let mut w = Matrix3::zeros();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let alpha = h[(i, j)] * d[j] - h[(j, i)] * d[i];
            let beta = h[(j, i)] * d[j] - h[(i, j)] * d[i];
            let mut denom = s[i] * s[i] - s[j] * s[j];
            if denom.abs() < SVD_DEGENERACY_TOL {
                denom = SVD_DEGENERACY_TOL.copysign(if denom == 0.0 { 1.0 } else { denom });
            }
            // Coefficients of P_ij and P_ji in dL.
            w[(i, j)] = (-s[j] * alpha - s[i] * beta) / denom;
            w[(j, i)] = -(s[i] * alpha + s[j] * beta) / denom;
        }
    }
    u * w * v_t
}

/// Result of [`zero_yaw_camera_local`].
#[derive(Debug, Clone, Copy)]
pub struct ZeroYaw {
    pub rotation: Rotation,
    /// Set when the camera-local pitch is within 1e-6 rad of +-90 degrees,
    /// where the ZYX yaw/roll split is ill-defined.
    pub gimbal_degenerate: bool,
}

/// Removes the yaw component of `r` as seen from the `cam` frame.
///
/// Decomposes `L = cam^T r` as ZYX Euler angles, zeroes the yaw, and maps the
/// result back: `cam * Ry(pitch) * Rx(roll)`.
pub fn zero_yaw_camera_local(r: &Rotation, cam: &Rotation) -> ZeroYaw {
    let local = cam.transpose().compose(r);
    let (_, pitch, roll) = local.euler_zyx();
    let gimbal_degenerate = (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6;
    let zeroed = Rotation::about_y(pitch) * Rotation::about_x(roll);
    ZeroYaw {
        rotation: cam.compose(&zeroed),
        gimbal_degenerate,
    }
}

/// Geodesic distance on SO(3): `arccos((trace(Ra^T Rb) - 1) / 2)`, in `[0, pi]`.
pub fn geodesic_error(ra: &Rotation, rb: &Rotation) -> f64 {
    let rel = ra.transpose().compose(rb);
    let cos = ((rel.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos()
}

/// Mean squared error between `orth(pred9)` and `target`, elementwise over
/// the nine entries. Scale-invariant in `pred9` because the orthogonalization
/// absorbs positive scaling.
pub fn rotation_loss(pred9: &[f64; 9], target: &Rotation) -> f64 {
    let m = matrix_from_row_major(pred9);
    let r = symmetric_orthogonalize(&m);
    let diff = r.matrix() - target.matrix();
    diff.iter().map(|v| v * v).sum::<f64>() / 9.0
}

/// Analytic gradient of [`rotation_loss`] with respect to `pred9`.
pub fn rotation_loss_grad(pred9: &[f64; 9], target: &Rotation) -> [f64; 9] {
    let m = matrix_from_row_major(pred9);
    let r = symmetric_orthogonalize(&m);
    let grad_r = (r.matrix() - target.matrix()) * (2.0 / 9.0);
    let grad_m = orthogonalize_vjp(&m, &grad_r);
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = grad_m[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
        // Uniform-ish: orthogonalize a Gaussian matrix.
        let m = Matrix3::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let mut r = symmetric_orthogonalize_full(&m);
        while r.degenerate {
            let m = Matrix3::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
            r = symmetric_orthogonalize_full(&m);
        }
        r.rotation
    }

    #[test]
    fn orthogonalize_identity_is_identity() {
        let r = symmetric_orthogonalize(&Matrix3::identity());
        assert_relative_eq!(r.matrix(), &Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn orthogonalize_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let scaled = r.matrix() * 1.7;
            let back = symmetric_orthogonalize(&scaled);
            assert!((back.matrix() - r.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn orthogonalize_is_idempotent_on_so3() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let again = symmetric_orthogonalize(r.matrix());
            assert!((again.matrix() - r.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn orthogonalize_beats_random_rotations() {
        // Brute-force nearest-rotation oracle on a reduced sample; the
        // acceptance suite runs the full-size version.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = Matrix3::from_fn(|_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let best = symmetric_orthogonalize(&m);
            let best_dist = (m - best.matrix()).norm();
            for _ in 0..2000 {
                let r = random_rotation(&mut rng);
                assert!((m - r.matrix()).norm() + 1e-12 >= best_dist);
            }
        }
    }

    #[test]
    fn orthogonalize_flags_reflection_degeneracy() {
        // diag(1, 1, -1): det < 0 with tied smallest singular values.
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let out = symmetric_orthogonalize_full(&m);
        assert!(out.degenerate);
        let r = out.rotation;
        assert!((r.matrix().transpose() * r.matrix() - Matrix3::identity()).norm() < 1e-9);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0;
        while checked < 25 {
            let m = Matrix3::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
            if !orthogonalize_grad_well_conditioned(&m, 1e-3) {
                continue;
            }
            checked += 1;
            let target = random_rotation(&mut rng);
            let pred: [f64; 9] = std::array::from_fn(|k| m[(k / 3, k % 3)]);
            let analytic = rotation_loss_grad(&pred, &target);
            let h = 1e-6;
            for k in 0..9 {
                let mut plus = pred;
                plus[k] += h;
                let mut minus = pred;
                minus[k] -= h;
                let fd = (rotation_loss(&plus, &target) - rotation_loss(&minus, &target))
                    / (2.0 * h);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(
                    (fd - analytic[k]).abs() / denom < 1e-4,
                    "element {k}: fd {fd:.3e} vs analytic {:.3e}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn rotation_loss_zero_at_target_and_scaled_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = random_rotation(&mut rng);
        let flat = target.to_row_major();
        assert!(rotation_loss(&flat, &target) < 1e-18);
        let scaled: [f64; 9] = std::array::from_fn(|i| 2.0 * flat[i]);
        assert!(rotation_loss(&scaled, &target) < 1e-18);
    }

    #[test]
    fn yaw_bin_examples_and_periodicity() {
        assert_eq!(yaw_bin(0.0).index(), 0);
        assert_eq!(yaw_bin(359.9).index(), 71);
        assert_eq!(yaw_bin(7.4).index(), 1);
        assert_eq!(yaw_bin(-5.0).index(), 71);
        for k in 0..10 {
            let y = 13.0 + 360.0 * k as f64;
            assert_eq!(yaw_bin(y), yaw_bin(13.0));
        }
        // Piecewise constant on [5k, 5k+5).
        assert_eq!(yaw_bin(10.0).index(), 2);
        assert_eq!(yaw_bin(14.999).index(), 2);
        assert_eq!(yaw_bin(15.0).index(), 3);
    }

    #[test]
    fn zero_yaw_pure_yaw_becomes_camera_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cam = random_rotation(&mut rng);
        let r = cam.compose(&Rotation::about_z(40f64.to_radians()));
        let out = zero_yaw_camera_local(&r, &cam);
        assert!(!out.gimbal_degenerate);
        assert!((out.rotation.matrix() - cam.matrix()).norm() < 1e-12);
    }

    #[test]
    fn zero_yaw_is_idempotent_and_kills_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let cam = random_rotation(&mut rng);
            let r = random_rotation(&mut rng);
            let once = zero_yaw_camera_local(&r, &cam);
            if once.gimbal_degenerate {
                continue;
            }
            let local = cam.transpose().compose(&once.rotation);
            let (yaw, _, _) = local.euler_zyx();
            assert!(yaw.abs() < 1e-9, "yaw after zeroing: {yaw:.3e}");
            let twice = zero_yaw_camera_local(&once.rotation, &cam);
            assert!((twice.rotation.matrix() - once.rotation.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn geodesic_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let r = random_rotation(&mut rng);
        assert!(geodesic_error(&r, &r) < 1e-9);
        let pi_turn = r.compose(&Rotation::about_x(std::f64::consts::PI));
        assert_relative_eq!(
            geodesic_error(&r, &pi_turn),
            std::f64::consts::PI,
            epsilon = 1e-9
        );
    }

    #[test]
    fn geodesic_error_matches_axis_angle_oracle() {
        // Independent route: angle from the skew part of Ra^T Rb.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let ra = random_rotation(&mut rng);
            let rb = random_rotation(&mut rng);
            let rel = ra.transpose().compose(&rb);
            let m = rel.matrix();
            let sx = (m[(2, 1)] - m[(1, 2)]) / 2.0;
            let sy = (m[(0, 2)] - m[(2, 0)]) / 2.0;
            let sz = (m[(1, 0)] - m[(0, 1)]) / 2.0;
            let sin = (sx * sx + sy * sy + sz * sz).sqrt();
            let cos = (m.trace() - 1.0) / 2.0;
            let oracle = sin.atan2(cos);
            assert_relative_eq!(geodesic_error(&ra, &rb), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn geodesic_error_triangle_inequality_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            let ab = geodesic_error(&a, &b);
            let bc = geodesic_error(&b, &c);
            let ac = geodesic_error(&a, &c);
            assert!(ac <= ab + bc + 1e-9);
            assert_relative_eq!(ab, geodesic_error(&b, &a), epsilon = 1e-12);
        }
    }
}
