//! Factorization and canonicalization networks.
//!
//! Both networks share the same fully connected residual trunk. The
//! factorizer maps flattened keypoints plus visibility flags to shape
//! coefficients and axis-angle camera parameters; the canonicalizer maps a
//! rotated structure back to shape coefficients of the shared basis.
//!
//! Trunk layout: a stem `linear(in → outer) → norm → relu`, followed by
//! `num_blocks` residual blocks
//! `h + linear(bottleneck → outer)(relu(norm(linear(outer → bottleneck)(relu(norm(linear(outer → outer)(h)))))))`.

use nalgebra::{DVector, Vector3};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::RotationParams;
use crate::rng::{self, Rng, Stream};
use crate::shapemodel::{KeypointView, PoseEstimate, ShapeBasis, Structure};

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the current batch in running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;
/// Scale of the initial shape basis entries.
pub const BASIS_INIT_STD: f64 = 0.01;
/// Gain applied to the fan-in scaled init of the rotation head.
pub const THETA_HEAD_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub num_blocks: usize,
    pub outer_width: usize,
    pub bottleneck_width: usize,
    pub batch_norm: bool,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            num_blocks: 6,
            outer_width: 1024,
            bottleneck_width: 256,
            batch_norm: true,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.outer_width == 0 || self.bottleneck_width == 0 {
            return Err(Error::InvalidConfig(format!("trunk needs positive sizes: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub keypoints: usize,
    pub basis_dim: usize,
    pub trunk: TrunkConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics, which are collected for the
    /// running averages.
    Train,
    /// Normalization uses running statistics; outputs are a pure function
    /// of weights and input.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`.
    pub weight: Tensor,
    /// `1 × out`.
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn he(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self::init(rng, fan_in, fan_out, (2.0 / fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Norm {
    fn new(width: usize) -> Self {
        Norm {
            gamma: Tensor::filled(&[1, width], 1.0),
            beta: Tensor::zeros(&[1, width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub expand: Linear,
    pub norm1: Option<Norm>,
    pub squeeze: Linear,
    pub norm2: Option<Norm>,
    pub restore: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    pub stem: Linear,
    pub stem_norm: Option<Norm>,
    pub blocks: Vec<ResidualBlock>,
}

impl Trunk {
    fn init(rng: &mut Rng, input: usize, cfg: &TrunkConfig) -> Self {
        let norm = |w| cfg.batch_norm.then(|| Norm::new(w));
        let (o, b) = (cfg.outer_width, cfg.bottleneck_width);
        Trunk {
            stem: Linear::he(rng, input, o),
            stem_norm: norm(o),
            blocks: (0..cfg.num_blocks)
                .map(|_| ResidualBlock {
                    expand: Linear::he(rng, o, o),
                    norm1: norm(o),
                    squeeze: Linear::he(rng, o, b),
                    norm2: norm(b),
                    restore: Linear::he(rng, b, o),
                })
                .collect(),
        }
    }
}

/// Maps `(Y, v)` to `(α, θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorizer {
    pub trunk: Trunk,
    pub alpha_head: Linear,
    pub theta_head: Linear,
}

/// Maps a rotated structure to canonical shape coefficients `α̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canonicalizer {
    pub trunk: Trunk,
    pub alpha_head: Linear,
}

/// All trainable state: both networks and the shared basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub dims: ModelDims,
    pub factorizer: Factorizer,
    pub canonicalizer: Canonicalizer,
    /// Row-major `D × 3K` view of the `3D × K` basis.
    pub basis: Tensor,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, n: &'a Option<Norm>) {
    if let Some(n) = n {
        out.push((format!("{name}.gamma"), &n.gamma));
        out.push((format!("{name}.beta"), &n.beta));
    }
}

fn push_trunk<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, t: &'a Trunk) {
    push_linear(out, &format!("{name}.stem"), &t.stem);
    push_norm(out, &format!("{name}.stem_norm"), &t.stem_norm);
    for (i, b) in t.blocks.iter().enumerate() {
        let p = format!("{name}.blocks.{i}");
        push_linear(out, &format!("{p}.expand"), &b.expand);
        push_norm(out, &format!("{p}.norm1"), &b.norm1);
        push_linear(out, &format!("{p}.squeeze"), &b.squeeze);
        push_norm(out, &format!("{p}.norm2"), &b.norm2);
        push_linear(out, &format!("{p}.restore"), &b.restore);
    }
}

fn linear_mut(l: &mut Linear) -> [&mut Tensor; 2] {
    [&mut l.weight, &mut l.bias]
}

fn norm_mut(n: &mut Option<Norm>) -> Vec<&mut Tensor> {
    match n {
        Some(n) => vec![&mut n.gamma, &mut n.beta],
        None => Vec::new(),
    }
}

fn trunk_mut(t: &mut Trunk) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    out.extend(linear_mut(&mut t.stem));
    out.extend(norm_mut(&mut t.stem_norm));
    for b in &mut t.blocks {
        out.extend(linear_mut(&mut b.expand));
        out.extend(norm_mut(&mut b.norm1));
        out.extend(linear_mut(&mut b.squeeze));
        out.extend(norm_mut(&mut b.norm2));
        out.extend(linear_mut(&mut b.restore));
    }
    out
}

fn trunk_norms_mut(t: &mut Trunk) -> Vec<&mut Option<Norm>> {
    let mut out = vec![&mut t.stem_norm];
    for b in &mut t.blocks {
        out.push(&mut b.norm1);
        out.push(&mut b.norm2);
    }
    out
}

impl ModelWeights {
    /// Deterministic initialization from `seed`.
    ///
    /// Trunk layers use He-scaled Gaussians; the coefficient head uses a
    /// `1/fan_in` scale, the rotation head the same scale times
    /// [`THETA_HEAD_GAIN`]; all biases start at zero and the basis entries
    /// are drawn with std [`BASIS_INIT_STD`].
    pub fn init(seed: u64, dims: &ModelDims) -> Result<Self> {
        dims.trunk.validate()?;
        if dims.keypoints == 0 || dims.basis_dim == 0 {
            return Err(Error::InvalidConfig("model needs K >= 1 and D >= 1".into()));
        }
        let mut rng = rng::derive(seed, Stream::Init, 0);
        let (k, d, o) = (dims.keypoints, dims.basis_dim, dims.trunk.outer_width);
        let head = (1.0 / o as f64).sqrt();
        let factorizer = Factorizer {
            trunk: Trunk::init(&mut rng, 3 * k, &dims.trunk),
            alpha_head: Linear::init(&mut rng, o, d, head),
            theta_head: Linear::init(&mut rng, o, 3, head * THETA_HEAD_GAIN),
        };
        let canonicalizer = Canonicalizer {
            trunk: Trunk::init(&mut rng, 3 * k, &dims.trunk),
            alpha_head: Linear::init(&mut rng, o, d, head),
        };
        let basis_data = (0..3 * d * k)
            .map(|_| BASIS_INIT_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(ModelWeights {
            dims: dims.clone(),
            factorizer,
            canonicalizer,
            basis: Tensor::matrix(d, 3 * k, basis_data)?,
        })
    }

    pub fn shape_basis(&self) -> ShapeBasis {
        ShapeBasis::new(self.dims.basis_dim, self.dims.keypoints, self.basis.data().to_vec()).expect("basis is sized by dims")
    }

    /// Named trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_trunk(&mut out, "factorizer.trunk", &self.factorizer.trunk);
        push_linear(&mut out, "factorizer.alpha_head", &self.factorizer.alpha_head);
        push_linear(&mut out, "factorizer.theta_head", &self.factorizer.theta_head);
        push_trunk(&mut out, "canonicalizer.trunk", &self.canonicalizer.trunk);
        push_linear(&mut out, "canonicalizer.alpha_head", &self.canonicalizer.alpha_head);
        out.push(("basis".to_string(), &self.basis));
        out
    }

    /// Same order as [`ModelWeights::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = trunk_mut(&mut self.factorizer.trunk);
        out.extend(linear_mut(&mut self.factorizer.alpha_head));
        out.extend(linear_mut(&mut self.factorizer.theta_head));
        out.extend(trunk_mut(&mut self.canonicalizer.trunk));
        out.extend(linear_mut(&mut self.canonicalizer.alpha_head));
        out.push(&mut self.basis);
        out
    }

    /// Normalization layers in binding order (factorizer first).
    pub fn norms_mut(&mut self) -> Vec<&mut Norm> {
        let mut out = trunk_norms_mut(&mut self.factorizer.trunk);
        out.extend(trunk_norms_mut(&mut self.canonicalizer.trunk));
        out.into_iter().filter_map(|n| n.as_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Folds collected batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)], momentum: f64) {
        let mut norms = self.norms_mut();
        for (id, s) in stats {
            norms[*id].update(s, momentum);
        }
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut it = vars.iter().copied();
        let mut norm_id = 0;
        let factorizer = BoundFactorizer {
            trunk: BoundTrunk::take(&self.factorizer.trunk, &mut it, &mut norm_id),
            alpha_head: BoundLinear::take(&mut it),
            theta_head: BoundLinear::take(&mut it),
        };
        let canonicalizer = BoundCanonicalizer {
            trunk: BoundTrunk::take(&self.canonicalizer.trunk, &mut it, &mut norm_id),
            alpha_head: BoundLinear::take(&mut it),
        };
        let basis = it.next().expect("basis bound last");
        debug_assert!(it.next().is_none());
        Ok(BoundModel {
            factorizer,
            canonicalizer,
            basis,
            params: vars,
            dims: self.dims.clone(),
        })
    }

    /// Eval-mode factorization of already normalized views.
    pub fn factorize_views(&self, views: &[KeypointView]) -> Result<Vec<PoseEstimate>> {
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let (y, mask) = pack_views(views, self.dims.keypoints)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let yv = tape.constant(y)?;
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let (alpha, theta) = bound.factorize(&mut tape, yv, &mask, &mut ctx)?;
        let d = self.dims.basis_dim;
        let (a, t) = (tape.value(alpha), tape.value(theta));
        Ok((0..views.len())
            .map(|i| PoseEstimate {
                alpha: DVector::from_row_slice(&a.data()[i * d..(i + 1) * d]),
                theta: RotationParams(Vector3::from_row_slice(t.row(i))),
            })
            .collect())
    }

    /// Eval-mode canonicalization: coefficients `α̂` for each structure.
    pub fn canonicalize_structures(&self, structures: &[Structure]) -> Result<Vec<DVector<f64>>> {
        if structures.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.dims.keypoints;
        let rows = structures
            .iter()
            .map(|x| {
                if x.ncols() != k {
                    return Err(Error::shape("canonicalize", format!("structure has {} points, model {k}", x.ncols())));
                }
                Ok(flatten_structure(x))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(Tensor::stack_rows(&rows)?)?;
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let alpha = bound.canonicalize(&mut tape, xv, &mut ctx)?;
        let d = self.dims.basis_dim;
        let a = tape.value(alpha);
        Ok((0..structures.len())
            .map(|i| DVector::from_row_slice(&a.data()[i * d..(i + 1) * d]))
            .collect())
    }
}

/// Anything that maps normalized views to pose estimates.
pub trait Factorize {
    fn factorize(&self, views: &[KeypointView]) -> Result<Vec<PoseEstimate>>;
}

/// Anything that maps rotated structures to canonical shape coefficients.
pub trait Canonicalize {
    fn canonicalize(&self, structures: &[Structure]) -> Result<Vec<DVector<f64>>>;
}

impl Factorize for ModelWeights {
    fn factorize(&self, views: &[KeypointView]) -> Result<Vec<PoseEstimate>> {
        self.factorize_views(views)
    }
}

impl Canonicalize for ModelWeights {
    fn canonicalize(&self, structures: &[Structure]) -> Result<Vec<DVector<f64>>> {
        self.canonicalize_structures(structures)
    }
}

/// Coordinate-major flattening `(x_0..x_K-1, y_0.., z_0..)`.
pub fn flatten_structure(x: &Structure) -> Vec<f64> {
    (0..3).flat_map(|r| x.row(r).iter().copied().collect::<Vec<_>>()).collect()
}

pub fn unflatten_structure(row: &[f64], k: usize) -> Structure {
    Structure::from_fn(k, |c, kk| row[c * k + kk])
}

/// Packs views into an `n × 2K` keypoint matrix (x-row then y-row per view)
/// and an `n × K` visibility mask.
pub fn pack_views(views: &[KeypointView], k: usize) -> Result<(Tensor, Tensor)> {
    let mut y = Vec::with_capacity(views.len() * 2 * k);
    let mut m = Vec::with_capacity(views.len() * k);
    for v in views {
        if v.num_keypoints() != k {
            return Err(Error::shape("pack_views", format!("view has {} keypoints, expected {k}", v.num_keypoints())));
        }
        y.extend(v.keypoints.row(0).iter());
        y.extend(v.keypoints.row(1).iter());
        m.extend(v.visible.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok((Tensor::matrix(views.len(), 2 * k, y)?, Tensor::matrix(views.len(), k, m)?))
}

/// Batch statistics gathered during a training-mode forward pass, keyed by
/// normalization-layer index.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub stats: Vec<(usize, BatchStats)>,
    /// When false, training-mode passes do not record statistics.
    pub collect: bool,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            stats: Vec::new(),
            collect: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn take(it: &mut impl Iterator<Item = Var>) -> Self {
        BoundLinear {
            weight: it.next().expect("weight"),
            bias: it.next().expect("bias"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
    pub id: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BoundNorm {
    fn take(norm: &Option<Norm>, it: &mut impl Iterator<Item = Var>, next_id: &mut usize) -> Option<Self> {
        let n = norm.as_ref()?;
        let id = *next_id;
        *next_id += 1;
        Some(BoundNorm {
            gamma: it.next().expect("gamma"),
            beta: it.next().expect("beta"),
            id,
            running_mean: n.running_mean.clone(),
            running_var: n.running_var.clone(),
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, self.gamma, self.beta, None, NORM_EPS)?;
                if ctx.collect {
                    ctx.stats.push((self.id, stats.expect("batch statistics")));
                }
                Ok(y)
            }
            Mode::Eval => {
                let stats = Some((self.running_mean.as_slice(), self.running_var.as_slice()));
                Ok(tape.batch_norm(x, self.gamma, self.beta, stats, NORM_EPS)?.0)
            }
        }
    }
}

fn norm_opt(n: &Option<BoundNorm>, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    match n {
        Some(n) => n.forward(tape, x, ctx),
        None => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    expand: BoundLinear,
    norm1: Option<BoundNorm>,
    squeeze: BoundLinear,
    norm2: Option<BoundNorm>,
    restore: BoundLinear,
}

#[derive(Debug, Clone)]
pub struct BoundTrunk {
    stem: BoundLinear,
    stem_norm: Option<BoundNorm>,
    blocks: Vec<BoundBlock>,
}

impl BoundTrunk {
    fn take(t: &Trunk, it: &mut impl Iterator<Item = Var>, norm_id: &mut usize) -> Self {
        let stem = BoundLinear::take(it);
        let stem_norm = BoundNorm::take(&t.stem_norm, it, norm_id);
        let blocks = t
            .blocks
            .iter()
            .map(|b| {
                let expand = BoundLinear::take(it);
                let norm1 = BoundNorm::take(&b.norm1, it, norm_id);
                let squeeze = BoundLinear::take(it);
                let norm2 = BoundNorm::take(&b.norm2, it, norm_id);
                let restore = BoundLinear::take(it);
                BoundBlock {
                    expand,
                    norm1,
                    squeeze,
                    norm2,
                    restore,
                }
            })
            .collect();
        BoundTrunk { stem, stem_norm, blocks }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.stem.forward(tape, x)?;
        let h = norm_opt(&self.stem_norm, tape, h, ctx)?;
        let mut h = tape.relu(h)?;
        for b in &self.blocks {
            let r = b.expand.forward(tape, h)?;
            let r = norm_opt(&b.norm1, tape, r, ctx)?;
            let r = tape.relu(r)?;
            let r = b.squeeze.forward(tape, r)?;
            let r = norm_opt(&b.norm2, tape, r, ctx)?;
            let r = tape.relu(r)?;
            let r = b.restore.forward(tape, r)?;
            h = tape.add(h, r)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct BoundFactorizer {
    pub trunk: BoundTrunk,
    pub alpha_head: BoundLinear,
    pub theta_head: BoundLinear,
}

#[derive(Debug, Clone)]
pub struct BoundCanonicalizer {
    pub trunk: BoundTrunk,
    pub alpha_head: BoundLinear,
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub factorizer: BoundFactorizer,
    pub canonicalizer: BoundCanonicalizer,
    /// `D × 3K` basis leaf.
    pub basis: Var,
    /// Leaves in [`ModelWeights::params`] order.
    pub params: Vec<Var>,
    pub dims: ModelDims,
}

impl BoundModel {
    /// `(α: n × D, θ: n × 3)` from `keypoints: n × 2K` and `visibility: n × K`.
    pub fn factorize(&self, tape: &mut Tape, keypoints: Var, visibility: &Tensor, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let k = self.dims.keypoints;
        let (n, c) = tape.value(keypoints).dims2().unwrap_or((0, 0));
        if c != 2 * k || visibility.dims2() != Some((n, k)) {
            return Err(Error::shape(
                "factorize",
                format!("keypoints {n}x{c}, visibility {:?}, K={k}", visibility.shape()),
            ));
        }
        let v = tape.constant(visibility.clone())?;
        let input = tape.concat_cols(keypoints, v)?;
        let h = self.factorizer.trunk.forward(tape, input, ctx)?;
        let alpha = self.factorizer.alpha_head.forward(tape, h)?;
        let theta = self.factorizer.theta_head.forward(tape, h)?;
        Ok((alpha, theta))
    }

    /// `α̂: n × D` from rotated structures `n × 3K`.
    pub fn canonicalize(&self, tape: &mut Tape, rotated: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let k = self.dims.keypoints;
        if tape.value(rotated).cols() != 3 * k {
            return Err(Error::shape("canonicalize", format!("expected {} columns", 3 * k)));
        }
        let h = self.canonicalizer.trunk.forward(tape, rotated, ctx)?;
        self.canonicalizer.alpha_head.forward(tape, h)
    }

    /// Structures `n × 3K` from coefficients `n × D`.
    pub fn reconstruct(&self, tape: &mut Tape, alpha: Var) -> Result<Var> {
        tape.matmul(alpha, self.basis)
    }
}
