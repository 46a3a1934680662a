//! Input normalization, optimizer, learning-rate schedule and the fit loop.

use std::time::Instant;

use nalgebra::{Matrix2, Matrix2xX, Vector2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry;
use crate::losses::{total_loss, LossBatch, LossBreakdown, LossConfig};
use crate::networks::{ForwardCtx, ModelDims, ModelWeights, Mode, TrunkConfig, NORM_MOMENTUM};
use crate::rng::{self, Stream};
use crate::shapemodel::KeypointView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Epochs without sufficient improvement before a decay.
    pub patience: usize,
    /// Minimum relative decrease of the best objective that counts as
    /// improvement.
    pub rel_improvement: f64,
    pub decay_factor: f64,
    /// Training stops once the rate falls below this.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            rel_improvement: 1e-3,
            decay_factor: 10.0,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub plateau: PlateauConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub basis_dim: usize,
    pub trunk: TrunkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr: 0.001,
            momentum: 0.9,
            plateau: PlateauConfig::default(),
            max_epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            basis_dim: 10,
            trunk: TrunkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.plateau.decay_factor > 1.0) {
            return bad(format!("decay factor must be > 1, got {}", self.plateau.decay_factor));
        }
        if self.plateau.patience == 0 {
            return bad("plateau patience must be >= 1".into());
        }
        if self.basis_dim == 0 {
            return bad("basis dimension must be >= 1".into());
        }
        self.trunk.validate()?;
        self.loss.validate()
    }

    pub fn model_dims(&self, keypoints: usize) -> ModelDims {
        ModelDims {
            keypoints,
            basis_dim: self.basis_dim,
            trunk: self.trunk.clone(),
        }
    }
}

/// Global input scale shared by training and test data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scale: f64,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        NormalizationStats { scale: 1.0 }
    }
}

/// Centers the visible keypoints and multiplies by the global scale.
pub fn normalize(view: &KeypointView, stats: &NormalizationStats) -> Result<KeypointView> {
    let centered = geometry::center_view(&view.keypoints, &view.visible)?;
    KeypointView::new(centered * stats.scale, view.visible.clone())
}

/// Principal direction of all centered visible keypoints pooled together.
fn pooled_axis(centered: &[(Matrix2xX<f64>, &[bool])]) -> Vector2<f64> {
    let mut cov = Matrix2::zeros();
    for (y, vis) in centered {
        for (k, _) in vis.iter().enumerate().filter(|(_, v)| **v) {
            let p = y.column(k);
            cov += p * p.transpose();
        }
    }
    let eig = cov.symmetric_eigen();
    let i = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    eig.eigenvectors.column(i).into_owned()
}

/// `s = 1 / mean_views(half extent along the pooled principal axis)`.
pub fn compute_scale(views: &[KeypointView]) -> Result<NormalizationStats> {
    if views.is_empty() {
        return Err(Error::Precondition("cannot compute a scale from an empty dataset".into()));
    }
    let centered = views
        .iter()
        .map(|v| Ok((geometry::center_view(&v.keypoints, &v.visible)?, v.visible.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    let axis = pooled_axis(&centered);
    let mut total = 0.0;
    for (y, vis) in &centered {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (k, _) in vis.iter().enumerate().filter(|(_, v)| **v) {
            let t = axis.dot(&y.column(k));
            lo = lo.min(t);
            hi = hi.max(t);
        }
        total += (hi - lo) / 2.0;
    }
    let mean = total / views.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Precondition(format!("dataset has no spatial extent (mean half-extent {mean})")));
    }
    Ok(NormalizationStats { scale: 1.0 / mean })
}

/// `T = mean_visible(Y) − mean_visible(reprojection)`.
pub fn estimate_translation(view: &KeypointView, reprojected: &Matrix2xX<f64>) -> Result<Vector2<f64>> {
    if reprojected.ncols() != view.num_keypoints() {
        return Err(Error::shape("estimate_translation", "keypoint counts differ"));
    }
    Ok(geometry::visible_mean(&view.keypoints, &view.visible)? - geometry::visible_mean(reprojected, &view.visible)?)
}

/// `v ← μv + g; w ← w − lr·v` for every tensor. A non-finite gradient
/// leaves weights and velocities untouched.
pub fn sgd_momentum_step(
    weights: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != velocity.len() {
        return Err(Error::shape("sgd_momentum_step", "parameter, gradient and velocity counts differ"));
    }
    for ((w, g), v) in weights.iter().zip(grads).zip(velocity.iter()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::shape("sgd_momentum_step", format!("{:?} / {:?} / {:?}", w.shape(), g.shape(), v.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    for ((w, g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Reduce-on-plateau state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub decays: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            best: None,
            bad_epochs: 0,
            decays: 0,
        }
    }

    /// Feeds one epoch objective; returns true when the rate was decayed.
    pub fn observe(&mut self, objective: f64, cfg: &PlateauConfig) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => objective < best - cfg.rel_improvement * best.abs(),
        };
        if improved {
            self.best = Some(objective);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= cfg.patience {
            self.lr /= cfg.decay_factor;
            self.bad_epochs = 0;
            self.decays += 1;
            return true;
        }
        false
    }
}

/// Learning rate after replaying a history of epoch objectives.
pub fn plateau_schedule(history: &[f64], initial_lr: f64, cfg: &PlateauConfig) -> f64 {
    let mut s = PlateauState::new(initial_lr);
    for &o in history {
        s.observe(o, cfg);
    }
    s.lr
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub velocity: Vec<Tensor>,
    pub schedule: PlateauState,
    pub normalization: NormalizationStats,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
}

impl TrainState {
    /// Fresh state: seeded weights, zero velocity, scale from `train`.
    pub fn init(train: &[KeypointView], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let k = train
            .first()
            .map(|v| v.num_keypoints())
            .ok_or_else(|| Error::Precondition("empty training set".into()))?;
        let weights = ModelWeights::init(cfg.seed, &cfg.model_dims(k))?;
        let velocity = weights.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(TrainState {
            weights,
            velocity,
            schedule: PlateauState::new(cfg.lr),
            normalization: compute_scale(train)?,
            epoch: 0,
            steps: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    /// Item-weighted mean of the batch objectives.
    pub total: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub steps: usize,
    pub decayed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    MinLr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub translate: bool,
    pub num_views: usize,
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
    pub stop_reason: StopReason,
    pub total_steps: usize,
    pub wall_time_secs: f64,
}

/// Hooks called by [`fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _state: &TrainState, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Default)]
struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    fn add(&mut self, v: f64, w: f64) {
        self.sum += v * w;
        self.weight += w;
    }

    fn get(&self) -> Option<f64> {
        (self.weight > 0.0).then(|| self.sum / self.weight)
    }
}

/// One optimizer step on a batch of normalized views.
pub fn train_step(
    state: &mut TrainState,
    batch: &[KeypointView],
    translate: bool,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
) -> Result<LossBreakdown> {
    let k = state.weights.dims.keypoints;
    let batch = LossBatch::from_views(batch, k, translate)?;
    let mut tape = Tape::new();
    let bound = state.weights.bind(&mut tape)?;
    let mut ctx = ForwardCtx::new(Mode::Train);
    let out = total_loss(&mut tape, &bound, &batch, &cfg.loss, rng, &mut ctx)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut grads = tape.backward(out.total)?;
    let grads: Vec<Tensor> = bound.params.iter().map(|&v| grads.take(v)).collect();
    let lr = state.schedule.lr;
    sgd_momentum_step(&mut state.weights.params_mut(), &grads, &mut state.velocity, lr, cfg.momentum)?;
    state.weights.update_running_stats(&ctx.stats, NORM_MOMENTUM);
    state.steps += 1;
    Ok(out.breakdown)
}

/// Continues training `state` on normalized views until `max_epochs` or
/// the rate drops below `min_lr`.
///
/// Each epoch shuffles with an rng derived from `(seed, epoch)`, so a run
/// resumed from a saved state matches an uninterrupted one. On divergence
/// `state` keeps the last completed step and [`Error::Diverged`] is
/// returned.
pub fn fit_state(
    state: &mut TrainState,
    train: &[KeypointView],
    translate: bool,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Vec<EpochRecord>, StopReason)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    loop {
        if state.schedule.lr < cfg.plateau.min_lr {
            return Ok((records, StopReason::MinLr));
        }
        if state.epoch >= cfg.max_epochs {
            return Ok((records, StopReason::MaxEpochs));
        }
        let epoch = state.epoch;
        let mut rng = rng::derive(cfg.seed, Stream::Epoch, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut l1, mut l2, mut l3, mut total) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let lr = state.schedule.lr;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<KeypointView> = chunk.iter().map(|&i| train[i].clone()).collect();
            let step = state.steps;
            let b = match train_step(state, &views, translate, cfg, &mut rng) {
                Ok(b) => b,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step }),
                Err(e) => return Err(e),
            };
            let w = chunk.len() as f64;
            for (term, mean) in [(b.l1, &mut l1), (b.l2, &mut l2), (b.l3, &mut l3)] {
                if let Some(v) = term {
                    mean.add(v, w);
                }
            }
            total.add(b.total, w);
            steps += 1;
            observer.on_step(&StepRecord {
                epoch,
                step,
                l1: b.l1,
                l2: b.l2,
                l3: b.l3,
                total: b.total,
                lr,
            });
        }
        let objective = total.get().expect("nonempty epoch");
        let decayed = state.schedule.observe(objective, &cfg.plateau);
        state.epoch += 1;
        let record = EpochRecord {
            epoch,
            l1: l1.get(),
            l2: l2.get(),
            l3: l3.get(),
            total: objective,
            lr,
            steps,
            decayed,
        };
        observer.on_epoch(state, &record)?;
        records.push(record);
    }
}

/// Trained model plus everything needed to apply it to new views.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState,
    pub report: TrainReport,
}

/// Normalizes raw training views, initializes a model and trains it.
pub fn fit(train: &[KeypointView], translate: bool, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<FitOutput> {
    let mut state = TrainState::init(train, cfg)?;
    resume(&mut state, train, translate, cfg, observer).map(|report| FitOutput { state, report })
}

/// Continues an existing state on raw (unnormalized) training views.
pub fn resume(
    state: &mut TrainState,
    train: &[KeypointView],
    translate: bool,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    let start = Instant::now();
    let normalized = train
        .iter()
        .map(|v| normalize(v, &state.normalization))
        .collect::<Result<Vec<_>>>()?;
    let (epochs, stop_reason) = fit_state(state, &normalized, translate, cfg, observer)?;
    Ok(TrainReport {
        config: cfg.clone(),
        translate,
        num_views: train.len(),
        lr_trace: epochs.iter().map(|e| e.lr).collect(),
        epochs,
        stop_reason,
        total_steps: state.steps,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
