//! Reconstruction metrics and the evaluation protocol.
//!
//! Predictions are compared in the camera frame without any Procrustes
//! alignment. Depth is recentered (at the mean depth or at a root keypoint)
//! and the depth-flip ambiguity of orthographic projection is resolved by
//! keeping the better of the prediction and its mirror image.

use nalgebra::{Matrix2xX, Vector3};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{self, InPlaneRotation};
use crate::losses::rotate_view;
use crate::networks::ModelWeights;
use crate::shapemodel::{reconstruct, KeypointView, PoseEstimate, Structure};
use crate::synthgen::{generate, SweepCell};
use crate::training::{fit, normalize, FitOutput, NormalizationStats, Silent, TrainConfig, TrainObserver};

/// Neumaier-compensated sum, independent of summation order up to
/// rounding of the compensation term.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// `Σ_k ‖X_k − X*_k‖ / K`.
pub fn mpjpe(pred: &Structure, gt: &Structure) -> Result<f64> {
    let k = gt.ncols();
    if pred.ncols() != k || k == 0 {
        return Err(Error::shape("mpjpe", format!("{} vs {} points", pred.ncols(), k)));
    }
    Ok(compensated_sum((0..k).map(|i| (pred.column(i) - gt.column(i)).norm())) / k as f64)
}

/// `Σ_{i<j} | ‖X_i − X_j‖ − ‖X*_i − X*_j‖ | / (K(K − 1))`.
pub fn stress(pred: &Structure, gt: &Structure) -> Result<f64> {
    let k = gt.ncols();
    if pred.ncols() != k {
        return Err(Error::shape("stress", format!("{} vs {} points", pred.ncols(), k)));
    }
    if k < 2 {
        return Err(Error::Precondition("stress needs at least two points".into()));
    }
    let terms = (0..k).flat_map(|i| {
        (i + 1..k).map(move |j| {
            let a = (pred.column(i) - pred.column(j)).norm();
            let b = (gt.column(i) - gt.column(j)).norm();
            (a - b).abs()
        })
    });
    Ok(compensated_sum(terms) / (k * (k - 1)) as f64)
}

/// Negates the depth (third) coordinate.
pub fn flip_z(x: &Structure) -> Structure {
    let mut out = x.clone();
    out.row_mut(2).neg_mut();
    out
}

/// `min(metric(X), metric(flip_z(X)))`; ties keep the unflipped cloud.
pub fn resolve_depth_flip(
    pred: &Structure,
    gt: &Structure,
    metric: impl Fn(&Structure, &Structure) -> Result<f64>,
) -> Result<(f64, bool)> {
    let plain = metric(pred, gt)?;
    let flipped = metric(&flip_z(pred), gt)?;
    Ok(if flipped < plain { (flipped, true) } else { (plain, false) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthCentering {
    /// Translate so the root keypoint sits at the origin.
    RootJoint,
    /// Zero the mean depth.
    MeanDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub depth_centering: DepthCentering,
    pub allow_depth_flip: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            depth_centering: DepthCentering::MeanDepth,
            allow_depth_flip: true,
        }
    }
}

/// Applies the protocol's centering to a cloud (restricted to `cols`).
pub fn center_for_protocol(x: &Structure, protocol: &EvalProtocol, root: Option<usize>) -> Result<Structure> {
    let mut out = x.clone();
    match protocol.depth_centering {
        DepthCentering::MeanDepth => {
            let m = out.row(2).mean();
            out.row_mut(2).add_scalar_mut(-m);
        }
        DepthCentering::RootJoint => {
            let r = root.ok_or_else(|| Error::Precondition("root-joint centering needs a root keypoint".into()))?;
            if r >= x.ncols() {
                return Err(Error::Precondition(format!("root index {r} out of range")));
            }
            let origin: Vector3<f64> = x.column(r).into_owned();
            for mut c in out.column_iter_mut() {
                c -= origin;
            }
        }
    }
    Ok(out)
}

/// A model's reconstruction of one view, in the units of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pose: PoseEstimate,
    /// Canonical-frame structure.
    pub canonical: Structure,
    /// Camera-frame structure whose projection lines up with the input.
    pub camera: Structure,
    /// Mean Euclidean distance between visible inputs and the projection
    /// of `camera`.
    pub reprojection_error: f64,
}

/// Anything that reconstructs raw views.
pub trait Reconstructor {
    fn predict(&self, views: &[KeypointView]) -> Result<Vec<Prediction>>;
}

/// Mean Euclidean reprojection error over visible keypoints.
pub fn reprojection_error(view: &KeypointView, projected: &Matrix2xX<f64>) -> Result<f64> {
    let vis: Vec<usize> = (0..view.num_keypoints()).filter(|&k| view.visible[k]).collect();
    if vis.is_empty() {
        return Err(Error::NoVisiblePoints);
    }
    Ok(compensated_sum(vis.iter().map(|&k| (view.keypoints.column(k) - projected.column(k)).norm())) / vis.len() as f64)
}

/// Trained weights together with the input normalization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub weights: ModelWeights,
    pub normalization: NormalizationStats,
    /// Estimate a per-view image translation (set for occluded data).
    pub translate: bool,
}

/// Views per forward pass in [`TrainedModel::predict`].
const PREDICT_CHUNK: usize = 512;

impl TrainedModel {
    fn lift(&self, raw: &KeypointView, pose: PoseEstimate) -> Result<Prediction> {
        let s = self.normalization.scale;
        let basis_x = reconstruct(pose.alpha.as_slice(), &self.weights.shape_basis())?;
        let mut camera = geometry::rot_expm(&pose.theta)? * &basis_x;
        let offset = geometry::visible_mean(&raw.keypoints, &raw.visible)?;
        // normalized inputs are visible-centered; optionally move the
        // reprojection's visible mean onto them as well
        let shift = if self.translate {
            -geometry::visible_mean(&geometry::project(&camera), &raw.visible)?
        } else {
            nalgebra::Vector2::zeros()
        };
        for mut c in camera.column_iter_mut() {
            c[0] = (c[0] + shift.x) / s + offset.x;
            c[1] = (c[1] + shift.y) / s + offset.y;
            c[2] /= s;
        }
        let reprojection_error = reprojection_error(raw, &geometry::project(&camera))?;
        Ok(Prediction {
            pose,
            canonical: basis_x / s,
            camera,
            reprojection_error,
        })
    }
}

impl Reconstructor for TrainedModel {
    fn predict(&self, views: &[KeypointView]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(PREDICT_CHUNK) {
            let normalized = chunk.iter().map(|v| normalize(v, &self.normalization)).collect::<Result<Vec<_>>>()?;
            let poses = self.weights.factorize_views(&normalized)?;
            for (raw, pose) in chunk.iter().zip(poses) {
                out.push(self.lift(raw, pose)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub mpjpe: f64,
    pub stress: f64,
    pub flipped: bool,
    pub reprojection_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub per_view: Vec<ViewMetrics>,
    pub mean_mpjpe: f64,
    pub mean_stress: f64,
    pub mean_reprojection_error: f64,
    pub flip_rate: f64,
}

impl EvalReport {
    fn from_views(protocol: EvalProtocol, per_view: Vec<ViewMetrics>) -> Self {
        let col = |f: fn(&ViewMetrics) -> f64| compensated_mean(&per_view.iter().map(f).collect::<Vec<_>>());
        EvalReport {
            protocol,
            mean_mpjpe: col(|m| m.mpjpe),
            mean_stress: col(|m| m.stress),
            mean_reprojection_error: col(|m| m.reprojection_error),
            flip_rate: col(|m| if m.flipped { 1.0 } else { 0.0 }),
            per_view,
        }
    }
}

/// Keypoints over which metrics are taken for view `i`.
fn metric_columns(dataset: &Dataset, i: usize) -> Vec<usize> {
    match (&dataset.layout, &dataset.classes) {
        (Some(layout), Some(classes)) => layout.block(classes[i]).map(|r| r.collect()).unwrap_or_default(),
        _ => (0..dataset.num_keypoints()).collect(),
    }
}

fn select(x: &Structure, cols: &[usize]) -> Structure {
    Structure::from_fn(cols.len(), |r, c| x[(r, cols[c])])
}

/// Scores predictions for the views `indices` of `dataset` against its
/// ground truth.
pub fn evaluate(model: &dyn Reconstructor, dataset: &Dataset, indices: &[usize], protocol: &EvalProtocol) -> Result<EvalReport> {
    let gt = dataset.gt.as_ref().ok_or(Error::MissingGroundTruth("evaluation needs ground-truth structures"))?;
    if protocol.depth_centering == DepthCentering::RootJoint && dataset.root_index.is_none() {
        return Err(Error::Precondition("dataset declares no root keypoint".into()));
    }
    let views: Vec<KeypointView> = indices.iter().map(|&i| dataset.views[i].clone()).collect();
    let preds = model.predict(&views)?;
    if preds.len() != indices.len() {
        return Err(Error::shape("evaluate", "prediction count differs from view count"));
    }
    let mut per_view = Vec::with_capacity(indices.len());
    for (&i, p) in indices.iter().zip(&preds) {
        let cols = metric_columns(dataset, i);
        let root = dataset.root_index.and_then(|r| cols.iter().position(|&c| c == r));
        let pred = center_for_protocol(&select(&p.camera, &cols), protocol, root)?;
        let truth = center_for_protocol(&select(&gt.structures[i], &cols), protocol, root)?;
        let (m, flipped) = if protocol.allow_depth_flip {
            resolve_depth_flip(&pred, &truth, mpjpe)?
        } else {
            (mpjpe(&pred, &truth)?, false)
        };
        let s = if flipped { stress(&flip_z(&pred), &truth)? } else { stress(&pred, &truth)? };
        per_view.push(ViewMetrics {
            index: i,
            mpjpe: m,
            stress: s,
            flipped,
            reprojection_error: p.reprojection_error,
        });
    }
    Ok(EvalReport::from_views(*protocol, per_view))
}

/// Mean over shapes of the mean per-point standard deviation of the
/// canonical reconstructions of that shape's views.
pub fn canonical_dispersion(model: &dyn Reconstructor, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let views: Vec<KeypointView> = indices.iter().map(|&i| dataset.views[i].clone()).collect();
    let preds = model.predict(&views)?;
    let mut groups: std::collections::BTreeMap<usize, Vec<&Structure>> = Default::default();
    for (&i, p) in indices.iter().zip(&preds) {
        groups.entry(dataset.shape_index[i]).or_default().push(&p.canonical);
    }
    let per_shape: Vec<f64> = groups
        .values()
        .filter(|g| g.len() > 1)
        .map(|g| point_dispersion(g))
        .collect();
    if per_shape.is_empty() {
        return Err(Error::Precondition("dispersion needs a shape with at least two views".into()));
    }
    Ok(compensated_mean(&per_shape))
}

/// Mean over points of `sqrt(mean_v ‖X_v,k − mean_v X_v,k‖²)`.
pub fn point_dispersion(clouds: &[&Structure]) -> f64 {
    let k = clouds[0].ncols();
    let n = clouds.len() as f64;
    let per_point: Vec<f64> = (0..k)
        .map(|p| {
            let mean: Vector3<f64> = clouds.iter().map(|x| x.column(p).into_owned()).sum::<Vector3<f64>>() / n;
            (clouds.iter().map(|x| (x.column(p) - mean).norm_squared()).sum::<f64>() / n).sqrt()
        })
        .collect();
    compensated_mean(&per_point)
}

/// MPJPE between the canonical reconstructions of each view and of its
/// in-plane rotated copy, averaged over views (no flip resolution).
pub fn equivariance_gap(model: &dyn Reconstructor, views: &[KeypointView], rotations: &[InPlaneRotation]) -> Result<f64> {
    if views.len() != rotations.len() || views.is_empty() {
        return Err(Error::shape("equivariance_gap", "need one rotation per view"));
    }
    let rotated: Vec<KeypointView> = views.iter().zip(rotations).map(|(v, r)| rotate_view(v, r)).collect();
    let a = model.predict(views)?;
    let b = model.predict(&rotated)?;
    let gaps = a
        .iter()
        .zip(&b)
        .map(|(p, q)| mpjpe(&p.canonical, &q.canonical))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_mean(&gaps))
}

/// Trains on the dataset's train split and scores its test split.
pub fn train_and_evaluate(
    dataset: &Dataset,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    observer: &mut dyn TrainObserver,
) -> Result<(FitOutput, EvalReport)> {
    let train = dataset.views_in(Split::Train);
    let out = fit(&train, dataset.has_occlusions, cfg, observer)?;
    let model = TrainedModel {
        weights: out.state.weights.clone(),
        normalization: out.state.normalization,
        translate: dataset.has_occlusions,
    };
    let report = evaluate(&model, dataset, &dataset.indices(Split::Test), protocol)?;
    Ok((out, report))
}

/// Outcome of one sweep cell; failures are recorded, not propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub row: usize,
    pub col: usize,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub mpjpe: Option<f64>,
    pub stress: Option<f64>,
    pub error: Option<String>,
}

/// Generates, trains and evaluates every cell, in parallel on the current
/// rayon pool.
pub fn run_sweep(cells: &[SweepCell], cfg: &TrainConfig, protocol: &EvalProtocol) -> Vec<SweepResult> {
    cells
        .par_iter()
        .map(|cell| {
            let outcome = generate(&cell.config).and_then(|d| train_and_evaluate(&d, cfg, protocol, &mut Silent));
            let (mpjpe, stress, error) = match outcome {
                Ok((_, r)) => (Some(r.mean_mpjpe), Some(r.mean_stress), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            SweepResult {
                row: cell.row,
                col: cell.col,
                noise_sigma: cell.noise_sigma,
                occlusion_prob: cell.occlusion_prob,
                mpjpe,
                stress,
                error,
            }
        })
        .collect()
}

/// MPJPE laid out as `rows × cols`; failed cells are `None`.
pub fn sweep_matrix(results: &[SweepResult]) -> Vec<Vec<Option<f64>>> {
    let rows = results.iter().map(|r| r.row + 1).max().unwrap_or(0);
    let cols = results.iter().map(|r| r.col + 1).max().unwrap_or(0);
    let mut m = vec![vec![None; cols]; rows];
    for r in results {
        m[r.row][r.col] = r.mpjpe;
    }
    m
}

/// Adjacent decreases of the row means plus those of the column means.
/// Zero means MPJPE is non-decreasing along both corruption axes.
pub fn trend_inversions(matrix: &[Vec<f64>]) -> usize {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, |r| r.len());
    let row_means: Vec<f64> = matrix.iter().map(|r| compensated_mean(r)).collect();
    let col_means: Vec<f64> = (0..cols)
        .map(|c| compensated_mean(&(0..rows).map(|r| matrix[r][c]).collect::<Vec<_>>()))
        .collect();
    let drops = |v: &[f64]| v.windows(2).filter(|w| w[1] < w[0]).count();
    drops(&row_means) + drops(&col_means)
}
