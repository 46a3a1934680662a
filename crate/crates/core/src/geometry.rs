//! Rotations, orthographic projection, centering and rotation sampling.

use nalgebra::{Matrix2, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector3};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Below this angle `rot_expm` switches to Taylor expansions of
/// `sin(x)/x` and `(1 - cos x)/x²`.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Axis-angle rotation parameters in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationParams(pub Vector3<f64>);

impl RotationParams {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotationParams(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        RotationParams(Vector3::zeros())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

/// Orthographic camera view `Π·R`: the first two rows of a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView(pub Matrix2x3<f64>);

fn ensure_finite3(v: &Vector3<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("rotation parameters"))
    }
}

/// Cross-product matrix `[ω]×`.
pub fn hat(omega: &Vector3<f64>) -> Result<Matrix3<f64>> {
    ensure_finite3(omega)?;
    Ok(hat_unchecked(omega))
}

fn hat_unchecked(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues coefficients `(sin θ / θ, (1 − cos θ) / θ²)`.
fn rodrigues_coefficients(angle: f64) -> (f64, f64) {
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    }
}

/// `expm([θ]×)` as a row-major array.
pub fn rodrigues(theta: [f64; 3]) -> [f64; 9] {
    let w = Vector3::from(theta);
    let (a, b) = rodrigues_coefficients(w.norm());
    let k = hat_unchecked(&w);
    let r = Matrix3::identity() + k * a + k * k * b;
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
    }
    out
}

/// Partial derivatives `∂R/∂θ_i` (row-major) of [`rodrigues`].
///
/// Uses `∂R/∂θ_i = (θ_i [θ]× + [θ × (I − R) e_i]×) R / ‖θ‖²`, which reduces
/// to the generator `[e_i]×` at the origin.
pub fn rodrigues_derivatives(theta: [f64; 3]) -> [[f64; 9]; 3] {
    let w = Vector3::from(theta);
    let angle2 = w.norm_squared();
    let mut out = [[0.0; 9]; 3];
    if angle2.sqrt() < SMALL_ANGLE {
        for (i, o) in out.iter_mut().enumerate() {
            let d = hat_unchecked(&Vector3::ith(i, 1.0));
            for r in 0..3 {
                for c in 0..3 {
                    o[3 * r + c] = d[(r, c)];
                }
            }
        }
        return out;
    }
    let r = Matrix3::from_row_slice(&rodrigues(theta));
    let k = hat_unchecked(&w);
    let i_minus_r = Matrix3::identity() - r;
    for (i, o) in out.iter_mut().enumerate() {
        let e = Vector3::ith(i, 1.0);
        let v = w.cross(&(i_minus_r * e));
        let d = (k * w[i] + hat_unchecked(&v)) * r / angle2;
        for rr in 0..3 {
            for c in 0..3 {
                o[3 * rr + c] = d[(rr, c)];
            }
        }
    }
    out
}

/// Rotation matrix `R(θ) = expm([θ]×)`.
pub fn rot_expm(theta: &RotationParams) -> Result<Matrix3<f64>> {
    ensure_finite3(&theta.0)?;
    Ok(Matrix3::from_row_slice(&rodrigues(theta.as_array())))
}

/// Orthographic projection `Π X`: the first two rows of a `3 × K` structure.
pub fn project(x: &Matrix3xX<f64>) -> Matrix2xX<f64> {
    x.fixed_rows::<2>(0).into_owned()
}

/// Subtracts the mean of the visible columns; invisible columns become zero.
pub fn center_view(y: &Matrix2xX<f64>, visible: &[bool]) -> Result<Matrix2xX<f64>> {
    if visible.len() != y.ncols() {
        return Err(Error::shape("center_view", format!("{} flags for {} keypoints", visible.len(), y.ncols())));
    }
    let mean = visible_mean(y, visible)?;
    let mut out = Matrix2xX::zeros(y.ncols());
    for (k, &vis) in visible.iter().enumerate() {
        if vis {
            out.set_column(k, &(y.column(k) - mean));
        }
    }
    Ok(out)
}

/// Mean of the visible columns of a 2D keypoint matrix.
pub fn visible_mean(y: &Matrix2xX<f64>, visible: &[bool]) -> Result<nalgebra::Vector2<f64>> {
    let count = visible.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::NoVisiblePoints);
    }
    let sum = visible
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .fold(nalgebra::Vector2::zeros(), |acc, (k, _)| acc + y.column(k));
    Ok(sum / count as f64)
}

/// Subtracts the column mean.
pub fn center_structure(x: &Matrix3xX<f64>) -> Matrix3xX<f64> {
    if x.ncols() == 0 {
        return x.clone();
    }
    let mean = x.column_mean();
    let mut out = x.clone();
    for mut c in out.column_iter_mut() {
        c -= mean;
    }
    out
}

/// Haar-uniform rotation from a normalized 4D Gaussian quaternion.
pub fn sample_rotation(rng: &mut Rng) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let [w, x, y, z] = q.map(|v| v / n);
            return quaternion_to_matrix(w, x, y, z);
        }
    }
}

fn quaternion_to_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation about the optical (z) axis, in 2D and 3D form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InPlaneRotation {
    pub angle: f64,
    pub planar: Matrix2<f64>,
    pub spatial: Matrix3<f64>,
}

impl InPlaneRotation {
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        InPlaneRotation {
            angle,
            planar: Matrix2::new(c, -s, s, c),
            spatial: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }
}

/// Angle uniform on `[0, 2π)`.
pub fn sample_inplane_rotation(rng: &mut Rng) -> InPlaneRotation {
    InPlaneRotation::from_angle(rng.random_range(0.0..std::f64::consts::TAU))
}

/// Rotation angle in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
