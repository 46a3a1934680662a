//! Training objectives.
//!
//! Two forms of every loss live here: scalar reference implementations
//! working on single views through the [`Factorize`] / [`Canonicalize`]
//! traits, and the batched tape version used by training. Both divide by
//! the total keypoint count `K`, so heavily occluded views weigh less.

use nalgebra::{Matrix2xX, Matrix3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{pseudo_huber_sq, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, InPlaneRotation};
use crate::networks::{pack_views, BoundModel, Canonicalize, Factorize, ForwardCtx};
use crate::rng::Rng;
use crate::shapemodel::{camera_view, reconstruct, KeypointView, PoseEstimate, ShapeBasis, Structure};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Which loss terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Reprojection only.
    Base,
    /// In-plane equivariance only.
    Equiv,
    /// In-plane equivariance plus canonicalization.
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "equiv" => Ok(Variant::Equiv),
            "full" => Ok(Variant::Full),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Equiv => "equiv",
            Variant::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reprojection: f64,
    pub canonicalization: f64,
    pub equivariance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reprojection: 1.0,
            canonicalization: 1.0,
            equivariance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub variant: Variant,
    pub weights: LossWeights,
    /// Stop the canonicalization gradient at the canonicalizer's input, so
    /// that it reaches only the canonicalizer and the basis via `X̂`.
    pub detach_canonicalizer_input: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: DEFAULT_EPSILON,
            variant: Variant::Full,
            weights: LossWeights::default(),
            detach_canonicalizer_input: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        let w = &self.weights;
        for (name, v) in [
            ("reprojection", w.reprojection),
            ("canonicalization", w.canonicalization),
            ("equivariance", w.equivariance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} weight must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn uses_reprojection(&self) -> bool {
        self.variant == Variant::Base
    }

    pub fn uses_equivariance(&self) -> bool {
        self.variant != Variant::Base
    }

    pub fn uses_canonicalization(&self) -> bool {
        self.variant == Variant::Full
    }
}

/// `‖z‖_ε = ε(√(1 + (‖z‖/ε)²) − 1)`.
pub fn pseudo_huber(z: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {eps}")));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("pseudo_huber input"));
    }
    Ok(pseudo_huber_sq(z.iter().map(|v| v * v).sum(), eps))
}

/// `(1/K) Σ_k v_k ‖y_k − ŷ_k‖_ε`, optionally after moving the visible mean
/// of `ŷ` onto that of `y`.
fn masked_reprojection(y: &Matrix2xX<f64>, visible: &[bool], yhat: &Matrix2xX<f64>, translate: bool, eps: f64) -> Result<f64> {
    let k = visible.len();
    if k == 0 {
        return Err(Error::shape("reprojection_loss", "K = 0"));
    }
    if y.ncols() != k || yhat.ncols() != k {
        return Err(Error::shape("reprojection_loss", "keypoint counts differ"));
    }
    if !visible.iter().any(|&v| v) {
        return Ok(0.0);
    }
    let shift = if translate {
        geometry::visible_mean(y, visible)? - geometry::visible_mean(yhat, visible)?
    } else {
        nalgebra::Vector2::zeros()
    };
    let mut acc = 0.0;
    for kk in (0..k).filter(|&kk| visible[kk]) {
        let r = y.column(kk) - yhat.column(kk) - shift;
        acc += pseudo_huber(&[r.x, r.y], eps)?;
    }
    Ok(acc / k as f64)
}

/// Reprojection loss of one view under a pose estimate. With `translate`
/// the estimated translation is removed before taking residuals.
pub fn reprojection_loss_l1(
    view: &KeypointView,
    pose: &PoseEstimate,
    basis: &ShapeBasis,
    cfg: &LossConfig,
    translate: bool,
) -> Result<f64> {
    let x = reconstruct(pose.alpha.as_slice(), basis)?;
    if x.ncols() != view.num_keypoints() {
        return Err(Error::shape("reprojection_loss_l1", "basis and view keypoint counts differ"));
    }
    let yhat = camera_view(&pose.theta)?.0 * x;
    masked_reprojection(&view.keypoints, &view.visible, &yhat, translate, cfg.epsilon)
}

/// Canonicalization loss of structure `x` under rotation `r`.
pub fn canonicalization_loss_l2(
    x: &Structure,
    r: &Matrix3<f64>,
    canonicalizer: &dyn Canonicalize,
    basis: &ShapeBasis,
    cfg: &LossConfig,
) -> Result<f64> {
    let k = x.ncols();
    if k == 0 || k != basis.num_keypoints() {
        return Err(Error::shape("canonicalization_loss_l2", "structure and basis keypoint counts differ"));
    }
    let alpha = canonicalizer
        .canonicalize(&[r * x])?
        .pop()
        .ok_or_else(|| Error::shape("canonicalization_loss_l2", "no output"))?;
    let xhat = reconstruct(alpha.as_slice(), basis)?;
    let mut acc = 0.0;
    for kk in 0..k {
        let d = x.column(kk) - xhat.column(kk);
        acc += pseudo_huber(d.as_slice(), cfg.epsilon)?;
    }
    Ok(acc / k as f64)
}

/// Rotates every keypoint of a view in the image plane.
pub fn rotate_view(view: &KeypointView, rz: &InPlaneRotation) -> KeypointView {
    KeypointView {
        keypoints: rz.planar * &view.keypoints,
        visible: view.visible.clone(),
    }
}

/// Equivariance loss: shape from the original view, camera from the
/// rotated one, residual against the rotated keypoints.
pub fn equivariance_loss_l3(
    view: &KeypointView,
    rz: &InPlaneRotation,
    factorizer: &dyn Factorize,
    basis: &ShapeBasis,
    cfg: &LossConfig,
    translate: bool,
) -> Result<f64> {
    let rotated = rotate_view(view, rz);
    let mut poses = factorizer.factorize(&[view.clone(), rotated.clone()])?;
    if poses.len() != 2 {
        return Err(Error::shape("equivariance_loss_l3", "factorizer output count"));
    }
    let theta_rot = poses.pop().expect("two poses").theta;
    let alpha = poses.pop().expect("two poses").alpha;
    let pose = PoseEstimate { alpha, theta: theta_rot };
    reprojection_loss_l1(&rotated, &pose, basis, cfg, translate)
}

/// Network inputs for one batch.
#[derive(Debug, Clone)]
pub struct LossBatch {
    /// `n × 2K`, x-coordinates then y-coordinates per row.
    pub keypoints: Tensor,
    /// `n × K` visibility.
    pub mask: Tensor,
    /// Remove the estimated 2D translation before residuals.
    pub translate: bool,
}

impl LossBatch {
    pub fn from_views(views: &[KeypointView], k: usize, translate: bool) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let (keypoints, mask) = pack_views(views, k)?;
        Ok(LossBatch { keypoints, mask, translate })
    }

    pub fn len(&self) -> usize {
        self.mask.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-item random rotations consumed by the loss.
#[derive(Debug, Clone, Default)]
pub struct LossDraws {
    pub inplane: Vec<InPlaneRotation>,
    pub rotations: Vec<Matrix3<f64>>,
}

/// Draws, per item, an in-plane rotation (when the equivariance term is
/// active) followed by a Haar rotation (when canonicalization is active).
pub fn draw_loss_randomness(n: usize, cfg: &LossConfig, rng: &mut Rng) -> LossDraws {
    let mut draws = LossDraws::default();
    for _ in 0..n {
        if cfg.uses_equivariance() {
            draws.inplane.push(geometry::sample_inplane_rotation(rng));
        }
        if cfg.uses_canonicalization() {
            draws.rotations.push(geometry::sample_rotation(rng));
        }
    }
    draws
}

/// Batch means of the active terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn rotate_keypoint_rows(y: &Tensor, rz: &[InPlaneRotation]) -> Result<Tensor> {
    let (n, c) = y.dims2().ok_or_else(|| Error::shape("rotate_keypoints", "rank"))?;
    let k = c / 2;
    let mut out = vec![0.0; n * c];
    for (i, r) in rz.iter().enumerate() {
        let row = y.row(i);
        let p = r.planar;
        for kk in 0..k {
            let (x, yv) = (row[kk], row[k + kk]);
            out[i * c + kk] = p[(0, 0)] * x + p[(0, 1)] * yv;
            out[i * c + k + kk] = p[(1, 0)] * x + p[(1, 1)] * yv;
        }
    }
    Tensor::matrix(n, c, out)
}

fn rotation_rows(rs: &[Matrix3<f64>]) -> Result<Tensor> {
    let data = rs
        .iter()
        .flat_map(|r| (0..9).map(move |i| r[(i / 3, i % 3)]))
        .collect();
    Tensor::matrix(rs.len(), 9, data)
}

/// Mean over the batch of the per-item robust reprojection of `x` under
/// the cameras `theta`, against `target`.
fn batched_reprojection(
    tape: &mut Tape,
    model: &BoundModel,
    target: Var,
    alpha: Var,
    theta: Var,
    batch: &LossBatch,
    eps: f64,
) -> Result<Var> {
    let k = model.dims.keypoints;
    let x = model.reconstruct(tape, alpha)?;
    let r = tape.rot_expm(theta)?;
    let m = tape.slice_cols(r, 0, 6)?;
    let mut yhat = tape.batch_matmul(m, x, 2, 3, k)?;
    if batch.translate {
        yhat = tape.center_visible(yhat, &batch.mask, 2)?;
    }
    let resid = tape.sub(target, yhat)?;
    let per_item = tape.pseudo_huber(resid, Some(&batch.mask), 2, eps)?;
    tape.mean(per_item)
}

/// Weighted sum of the variant's loss terms, recorded on `tape`.
///
/// With `translate`, keypoints are assumed visible-centered (as produced by
/// normalization), so subtracting the estimated translation reduces to
/// centering the reprojection over the visible points.
pub fn total_loss_with(
    tape: &mut Tape,
    model: &BoundModel,
    batch: &LossBatch,
    cfg: &LossConfig,
    draws: &LossDraws,
    ctx: &mut ForwardCtx,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let k = model.dims.keypoints;
    let y = tape.constant(batch.keypoints.clone())?;
    let (alpha, theta) = model.factorize(tape, y, &batch.mask, ctx)?;
    let mut terms: Vec<Var> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    if cfg.uses_reprojection() {
        let l1 = batched_reprojection(tape, model, y, alpha, theta, batch, cfg.epsilon)?;
        breakdown.l1 = tape.value(l1).item();
        terms.push(tape.scale(l1, cfg.weights.reprojection)?);
    }

    if cfg.uses_equivariance() {
        if draws.inplane.len() != n {
            return Err(Error::shape("total_loss", "in-plane rotation count"));
        }
        let yr = tape.constant(rotate_keypoint_rows(&batch.keypoints, &draws.inplane)?)?;
        let collect = std::mem::replace(&mut ctx.collect, false);
        let rotated = model.factorize(tape, yr, &batch.mask, ctx);
        ctx.collect = collect;
        let (_, theta_rot) = rotated?;
        let l3 = batched_reprojection(tape, model, yr, alpha, theta_rot, batch, cfg.epsilon)?;
        breakdown.l3 = tape.value(l3).item();
        terms.push(tape.scale(l3, cfg.weights.equivariance)?);
    }

    if cfg.uses_canonicalization() {
        if draws.rotations.len() != n {
            return Err(Error::shape("total_loss", "rotation count"));
        }
        let x = model.reconstruct(tape, alpha)?;
        let rot = tape.constant(rotation_rows(&draws.rotations)?)?;
        let mut rx = tape.batch_matmul(rot, x, 3, 3, k)?;
        if cfg.detach_canonicalizer_input {
            rx = tape.detach(rx);
        }
        let alpha_hat = model.canonicalize(tape, rx, ctx)?;
        let xhat = model.reconstruct(tape, alpha_hat)?;
        let diff = tape.sub(x, xhat)?;
        let per_item = tape.pseudo_huber(diff, None, 3, cfg.epsilon)?;
        let l2 = tape.mean(per_item)?;
        breakdown.l2 = tape.value(l2).item();
        terms.push(tape.scale(l2, cfg.weights.canonicalization)?);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total).item().unwrap_or(f64::NAN);
    Ok(LossOutput { total, breakdown })
}

/// [`total_loss_with`] drawing its rotations from `rng`.
pub fn total_loss(
    tape: &mut Tape,
    model: &BoundModel,
    batch: &LossBatch,
    cfg: &LossConfig,
    rng: &mut Rng,
    ctx: &mut ForwardCtx,
) -> Result<LossOutput> {
    let draws = draw_loss_randomness(batch.len(), cfg, rng);
    total_loss_with(tape, model, batch, cfg, &draws, ctx)
}
