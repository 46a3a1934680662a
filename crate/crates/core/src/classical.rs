//! Classical factorization solvers used as baselines and test oracles.
//!
//! * [`rigid_factorize`]: orthographic rigid structure from motion by
//!   rank-3 SVD, metric upgrade and gauge fixing of the first camera.
//! * [`monocular_fit`]: single-view shape-and-pose fit against a known
//!   basis by Levenberg–Marquardt with random restarts.
//! * [`feasibility_check`]: equation versus unknown counting.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, rodrigues, rodrigues_derivatives, RotationParams};
use crate::rng::{self, Stream};
use crate::shapemodel::{reconstruct, KeypointView, PoseEstimate, ShapeBasis, Structure};

/// Gauge freedom removed by fixing one camera and the global frame.
pub const GAUGE_CREDIT: usize = 9;

/// Below this ratio `σ₃/σ₁` the measurement matrix is treated as rank ≤ 2.
pub const RANK_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub views: usize,
    pub keypoints: usize,
    /// `None` for a rigid object.
    pub basis_dim: Option<usize>,
    /// `2NK`.
    pub constraints: usize,
    /// `6N + ND + 3DK`, or `6N + 3K` for a rigid object.
    pub unknowns: usize,
    pub gauge_credit: usize,
    /// `constraints ≥ unknowns − gauge_credit`.
    pub joint_feasible: bool,
    /// `2K ≥ 6 + D`: a single view carries enough equations for its own
    /// pose and coefficients. Always true for rigid objects.
    pub single_view_feasible: bool,
    /// The verdict: the single-view bound when a basis dimension is given,
    /// the joint count otherwise.
    pub feasible: bool,
}

/// Counts equations and unknowns of the factorization problem.
pub fn feasibility_check(views: usize, keypoints: usize, basis_dim: Option<usize>) -> Result<Feasibility> {
    if views == 0 || keypoints == 0 || basis_dim == Some(0) {
        return Err(Error::Precondition("view, keypoint and basis counts must be positive".into()));
    }
    let constraints = 2 * views * keypoints;
    let (unknowns, single_view_feasible) = match basis_dim {
        Some(d) => (6 * views + views * d + 3 * d * keypoints, 2 * keypoints >= 6 + d),
        None => (6 * views + 3 * keypoints, true),
    };
    let joint_feasible = constraints + GAUGE_CREDIT >= unknowns;
    Ok(Feasibility {
        views,
        keypoints,
        basis_dim,
        constraints,
        unknowns,
        gauge_credit: GAUGE_CREDIT,
        joint_feasible,
        single_view_feasible,
        feasible: if basis_dim.is_some() { single_view_feasible } else { joint_feasible },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidSfmSolution {
    /// `2N × 3` metric camera stack, first block `[I₂ 0]`.
    pub cameras: DMatrix<f64>,
    /// `3 × K` structure in the frame of the first camera.
    pub structure: Matrix3xX<f64>,
    /// Per-view rotations completed from the (orthonormalized) camera rows.
    pub rotations: Vec<Matrix3<f64>>,
    /// Largest absolute entry of `W − M X` for centered measurements `W`.
    pub max_residual: f64,
    pub rms_residual: f64,
}

/// Completes two camera rows to a rotation: orthonormalize, then take the
/// cross product as the third row.
pub fn complete_rotation(m: &Matrix2x3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let ortho = u * vt;
    let r1 = ortho.row(0).transpose();
    let r2 = ortho.row(1).transpose();
    let r3 = r1.cross(&r2);
    Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()])
}

/// Coefficients of `a G bᵀ` in the six unknowns of symmetric `G`.
fn gram_row(a: &Vector3<f64>, b: &Vector3<f64>) -> [f64; 6] {
    [
        a.x * b.x,
        a.x * b.y + a.y * b.x,
        a.x * b.z + a.z * b.x,
        a.y * b.y,
        a.y * b.z + a.z * b.y,
        a.z * b.z,
    ]
}

/// Rigid orthographic factorization of fully visible views.
///
/// Views are centered first, which removes per-view translation. The
/// recovered structure is unique up to the global reflection inherent to
/// orthographic projection.
pub fn rigid_factorize(views: &[Matrix2xX<f64>]) -> Result<RigidSfmSolution> {
    let n = views.len();
    if n < 2 {
        return Err(Error::Precondition(format!("rigid factorization needs N >= 2 views, got {n}")));
    }
    let k = views[0].ncols();
    if k < 3 {
        return Err(Error::Precondition(format!("rigid factorization needs K >= 3 keypoints, got {k}")));
    }
    if views.iter().any(|v| v.ncols() != k) {
        return Err(Error::shape("rigid_factorize", "views have different keypoint counts"));
    }
    let all = vec![true; k];
    let mut w = DMatrix::zeros(2 * n, k);
    for (i, v) in views.iter().enumerate() {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rigid_factorize input"));
        }
        w.rows_mut(2 * i, 2).copy_from(&geometry::center_view(v, &all)?);
    }
    // nalgebra's SVD loses accuracy on exactly rank-deficient input; the
    // eigendecomposition of the Gram matrix does not
    let eig = (w.transpose() * &w).symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sv: Vec<f64> = order.iter().map(|&i| (&w * eig.eigenvectors.column(i)).norm()).collect();
    let ratio = if sv[0] > 0.0 { sv[2] / sv[0] } else { 0.0 };
    if !(ratio >= RANK_THRESHOLD) {
        return Err(Error::DegenerateStructure {
            ratio,
            threshold: RANK_THRESHOLD,
        });
    }
    let mut m_aff = DMatrix::zeros(2 * n, 3);
    let mut x_aff = Matrix3xX::zeros(k);
    for (j, &idx) in order.iter().take(3).enumerate() {
        let s = sv[j].sqrt();
        let v = eig.eigenvectors.column(idx);
        m_aff.set_column(j, &(&w * v / s));
        x_aff.set_row(j, &(v.transpose() * s));
    }

    // metric upgrade: m G mᵀ = 1, n G nᵀ = 1, m G nᵀ = 0 per view
    let mut a = DMatrix::zeros(3 * n, 6);
    let mut b = DVector::zeros(3 * n);
    for i in 0..n {
        let mi = Vector3::from_fn(|c, _| m_aff[(2 * i, c)]);
        let ni = Vector3::from_fn(|c, _| m_aff[(2 * i + 1, c)]);
        for (r, (p, q, rhs)) in [(mi, mi, 1.0), (ni, ni, 1.0), (mi, ni, 0.0)].into_iter().enumerate() {
            a.row_mut(3 * i + r).copy_from_slice(&gram_row(&p, &q));
            b[3 * i + r] = rhs;
        }
    }
    let g = a.svd(true, true).solve(&b, 1e-14).map_err(|_| Error::MetricUpgrade)?;
    let gram = Matrix3::new(g[0], g[1], g[2], g[1], g[3], g[4], g[2], g[4], g[5]);
    let chol = gram.cholesky().ok_or(Error::MetricUpgrade)?;
    let lower = chol.l();
    let lower_inv = lower.try_inverse().ok_or(Error::MetricUpgrade)?;
    let mut cameras: DMatrix<f64> = &m_aff * DMatrix::from_column_slice(3, 3, lower.as_slice());
    let mut structure = lower_inv * x_aff;

    // gauge: rotate so that the first camera becomes [I₂ 0]
    let block = |m: &DMatrix<f64>, i: usize| Matrix2x3::from_fn(|r, c| m[(2 * i + r, c)]);
    let r1 = complete_rotation(&block(&cameras, 0));
    cameras *= DMatrix::from_column_slice(3, 3, r1.transpose().as_slice());
    structure = r1 * structure;

    let rotations: Vec<Matrix3<f64>> = (0..n)
        .map(|i| complete_rotation(&block(&cameras, i)))
        .collect();
    let mut max_residual: f64 = 0.0;
    let mut sq = 0.0;
    for (i, r) in rotations.iter().enumerate() {
        let proj = geometry::project(&(r * &structure));
        let d = w.rows(2 * i, 2) - proj;
        max_residual = max_residual.max(d.abs().max());
        sq += d.norm_squared();
    }
    Ok(RigidSfmSolution {
        cameras,
        structure,
        rotations,
        max_residual,
        rms_residual: (sq / (2 * n * k) as f64).sqrt(),
    })
}

/// Best rigid alignment of `source` onto `target` (both `3 × K`), optionally
/// allowing a reflection. Returns the aligned copy of `source`.
pub fn procrustes_align(source: &Matrix3xX<f64>, target: &Matrix3xX<f64>, allow_reflection: bool) -> Result<Matrix3xX<f64>> {
    if source.ncols() != target.ncols() || source.ncols() == 0 {
        return Err(Error::shape("procrustes_align", "point counts differ"));
    }
    let mu_t = target.column_mean();
    let s = geometry::center_structure(source);
    let t = geometry::center_structure(target);
    let svd = (&t * s.transpose()).svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if !allow_reflection && (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let mut out = r * s;
    for mut c in out.column_iter_mut() {
        c += mu_t;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonocularConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub seed: u64,
    /// Center the reprojection over visible points, absorbing an unknown
    /// image translation.
    pub translate: bool,
}

impl Default for MonocularConfig {
    fn default() -> Self {
        MonocularConfig {
            restarts: 8,
            max_iterations: 200,
            gradient_tolerance: 1e-12,
            initial_damping: 1e-3,
            seed: 0,
            translate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonocularFit {
    pub pose: PoseEstimate,
    /// Mean Euclidean reprojection error over visible keypoints.
    pub residual: f64,
    /// Sum of squared residuals at the optimum.
    pub cost: f64,
    pub restart: usize,
    pub iterations: usize,
}

struct Problem<'a> {
    y: Vec<f64>,
    cols: Vec<usize>,
    basis: &'a ShapeBasis,
    translate: bool,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Visible projections of `Σ α_d B_d` under `rows`, i.e. `2 × V` values
    /// ordered `[x_1, y_1, x_2, y_2, …]`.
    fn project(&self, rows: &[[f64; 3]; 2], alpha: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.cols.len());
        for &k in &self.cols {
            let mut p = [0.0; 3];
            for (d, a) in alpha.iter().enumerate() {
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc += a * self.basis.get(d, c, k);
                }
            }
            for row in rows {
                out.push(row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
            }
        }
        if self.translate {
            center_pairs(&mut out);
        }
        out
    }

    fn residual(&self, params: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let r = rodrigues([params[d], params[d + 1], params[d + 2]]);
        let rows = [[r[0], r[1], r[2]], [r[3], r[4], r[5]]];
        let pred = self.project(&rows, &params[..d]);
        self.y.iter().zip(pred).map(|(y, p)| y - p).collect()
    }

    /// Jacobian of the residual, `2V × (D + 3)`.
    fn jacobian(&self, params: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let theta = [params[d], params[d + 1], params[d + 2]];
        let r = rodrigues(theta);
        let rows = [[r[0], r[1], r[2]], [r[3], r[4], r[5]]];
        let mut j = DMatrix::zeros(self.y.len(), d + 3);
        for dd in 0..d {
            let mut e = vec![0.0; d];
            e[dd] = 1.0;
            let col = self.project(&rows, &e);
            for (i, v) in col.into_iter().enumerate() {
                j[(i, dd)] = -v;
            }
        }
        for (t, dr) in rodrigues_derivatives(theta).iter().enumerate() {
            let drows = [[dr[0], dr[1], dr[2]], [dr[3], dr[4], dr[5]]];
            let col = self.project(&drows, &params[..d]);
            for (i, v) in col.into_iter().enumerate() {
                j[(i, d + t)] = -v;
            }
        }
        j
    }

    /// Least-squares coefficients for a fixed rotation.
    fn solve_alpha(&self, theta: [f64; 3]) -> Vec<f64> {
        let d = self.dim();
        let r = rodrigues(theta);
        let rows = [[r[0], r[1], r[2]], [r[3], r[4], r[5]]];
        let a = DMatrix::from_fn(self.y.len(), d, |_, _| 0.0);
        let mut a = a;
        for dd in 0..d {
            let mut e = vec![0.0; d];
            e[dd] = 1.0;
            for (i, v) in self.project(&rows, &e).into_iter().enumerate() {
                a[(i, dd)] = v;
            }
        }
        let b = DVector::from_column_slice(&self.y);
        match a.svd(true, true).solve(&b, 1e-12) {
            Ok(x) => x.iter().copied().collect(),
            Err(_) => vec![0.0; d],
        }
    }
}

fn center_pairs(v: &mut [f64]) {
    let n = v.len() / 2;
    if n == 0 {
        return;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for p in v.chunks(2) {
        mx += p[0];
        my += p[1];
    }
    mx /= n as f64;
    my /= n as f64;
    for p in v.chunks_mut(2) {
        p[0] -= mx;
        p[1] -= my;
    }
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Damped Gauss–Newton from `params`; returns `(params, cost, iterations)`
/// or `None` when the iteration produced non-finite values.
fn levenberg_marquardt(problem: &Problem, mut params: Vec<f64>, cfg: &MonocularConfig) -> Option<(Vec<f64>, f64, usize)> {
    let p = params.len();
    let mut r = problem.residual(&params);
    let mut c = cost(&r);
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let j = problem.jacobian(&params);
        let jt_r = j.tr_mul(&DVector::from_column_slice(&r));
        if jt_r.amax() < cfg.gradient_tolerance || c == 0.0 {
            break;
        }
        let jtj = j.tr_mul(&j);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut h = jtj.clone();
            for i in 0..p {
                h[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = h.cholesky().map(|ch| ch.solve(&(-&jt_r))) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = problem.residual(&trial);
            let ct = cost(&rt);
            if !ct.is_finite() {
                return None;
            }
            if ct < c {
                let small = step.amax() < 1e-15 * (1.0 + params.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                params = trial;
                r = rt;
                c = ct;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if small {
                    return Some((params, c, iterations));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    c.is_finite().then_some((params, c, iterations))
}

/// Wraps an axis-angle vector into the ball of radius π.
fn wrap_axis_angle(theta: Vector3<f64>) -> Vector3<f64> {
    let r = Rotation3::from_matrix_unchecked(geometry::rot_expm(&RotationParams(theta)).expect("finite"));
    r.scaled_axis()
}

/// Fits `(α, θ)` to one view with a known basis by minimizing the squared
/// reprojection error, keeping the best of several random restarts.
pub fn monocular_fit(view: &KeypointView, basis: &ShapeBasis, cfg: &MonocularConfig) -> Result<MonocularFit> {
    let k = view.num_keypoints();
    let d = basis.dim();
    if basis.num_keypoints() != k {
        return Err(Error::shape("monocular_fit", format!("basis has {} keypoints, view {k}", basis.num_keypoints())));
    }
    if 2 * k < 6 + d {
        return Err(Error::Precondition(format!("K={k} is too small for D={d} (need K >= 3 + D/2)")));
    }
    if 2 * view.num_visible() < 6 + d {
        return Err(Error::Precondition(format!(
            "{} visible keypoints cannot determine {} unknowns",
            view.num_visible(),
            6 + d
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidConfig("at least one restart is required".into()));
    }
    let cols: Vec<usize> = (0..k).filter(|&i| view.visible[i]).collect();
    let mut y: Vec<f64> = cols.iter().flat_map(|&i| [view.keypoints[(0, i)], view.keypoints[(1, i)]]).collect();
    if cfg.translate {
        center_pairs(&mut y);
    }
    let problem = Problem {
        y,
        cols,
        basis,
        translate: cfg.translate,
    };
    let results: Vec<Option<(usize, Vec<f64>, f64, usize)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = rng::derive(cfg.seed, Stream::Restart, restart as u64);
            let r0 = Rotation3::from_matrix_unchecked(geometry::sample_rotation(&mut rng));
            let theta = r0.scaled_axis();
            let t = [theta.x, theta.y, theta.z];
            let mut params = problem.solve_alpha(t);
            params.extend_from_slice(&t);
            levenberg_marquardt(&problem, params, cfg).map(|(p, c, it)| (restart, p, c, it))
        })
        .collect();
    let best = results
        .into_iter()
        .flatten()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
        .ok_or(Error::AllRestartsDiverged(cfg.restarts))?;
    let (restart, params, c, iterations) = best;
    let pose = PoseEstimate {
        alpha: DVector::from_column_slice(&params[..d]),
        theta: RotationParams(wrap_axis_angle(Vector3::new(params[d], params[d + 1], params[d + 2]))),
    };
    let r = problem.residual(&params);
    let residual = r.chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).sum::<f64>() / (r.len() / 2) as f64;
    Ok(MonocularFit {
        pose,
        residual,
        cost: c,
        restart,
        iterations,
    })
}

/// Structure implied by a pose in the camera frame.
pub fn camera_frame_structure(pose: &PoseEstimate, basis: &ShapeBasis) -> Result<Structure> {
    Ok(geometry::rot_expm(&pose.theta)? * reconstruct(pose.alpha.as_slice(), basis)?)
}
