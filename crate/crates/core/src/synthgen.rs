//! Synthetic benchmarks with known ground truth.
//!
//! Shapes are drawn from a random low-rank basis whose blocks have
//! geometrically decaying scale, so the first block acts as a mean shape
//! with coefficient fixed to one and the remaining blocks deform it. Each
//! shape is seen from `views_per_shape` Haar-random viewpoints under
//! orthographic projection, with optional Gaussian keypoint noise and
//! independent per-keypoint occlusion.

use nalgebra::{DVector, Matrix2xX};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::geometry;
use crate::rng::{self, Rng, Stream};
use crate::shapemodel::{pad_multiclass, reconstruct, KeypointView, MulticlassLayout, ShapeBasis, Structure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub keypoints: usize,
    pub basis_dim: usize,
    pub num_shapes: usize,
    pub views_per_shape: usize,
    /// Std of the deformation coefficients `α_2..α_D`.
    pub alpha_std: f64,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
    /// Fraction of shapes (not views) assigned to the training split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            keypoints: 30,
            basis_dim: 6,
            num_shapes: 100,
            views_per_shape: 30,
            alpha_std: 1.0,
            noise_sigma: 0.0,
            occlusion_prob: 0.0,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.basis_dim == 0 || self.num_shapes == 0 || self.views_per_shape == 0 {
            return bad("basis_dim, num_shapes and views_per_shape must be >= 1".into());
        }
        if 2 * self.keypoints < 6 + self.basis_dim {
            return bad(format!(
                "K={} keypoints cannot determine a rank-{} model from one view (need K >= 3 + D/2)",
                self.keypoints, self.basis_dim
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return bad(format!("occlusion probability must be in [0, 1), got {}", self.occlusion_prob));
        }
        if !(self.alpha_std >= 0.0 && self.alpha_std.is_finite()) {
            return bad(format!("alpha std must be >= 0, got {}", self.alpha_std));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train fraction must be in [0, 1], got {}", self.train_fraction));
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.num_shapes * self.views_per_shape
    }

    /// Shapes with index below this go to the training split.
    pub fn num_train_shapes(&self) -> usize {
        (self.train_fraction * self.num_shapes as f64).round() as usize
    }
}

/// Random basis with block `d` scaled by `0.5^d`; every block is centered.
pub fn generate_basis(dim: usize, keypoints: usize, rng: &mut Rng) -> ShapeBasis {
    let blocks: Vec<Structure> = (0..dim)
        .map(|d| {
            let std = 0.5f64.powi(d as i32);
            let b = Structure::from_fn(keypoints, |_, _| std * rng.sample::<f64, _>(StandardNormal));
            geometry::center_structure(&b)
        })
        .collect();
    ShapeBasis::from_blocks(&blocks).expect("blocks share K")
}

/// Coefficients with the first fixed to one.
fn sample_alpha(dim: usize, std: f64, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(dim, |d, _| if d == 0 { 1.0 } else { std * rng.sample::<f64, _>(StandardNormal) })
}

struct Rendered {
    view: KeypointView,
    structure: Structure,
    rotation: nalgebra::Matrix3<f64>,
}

/// Renders `x` under a Haar rotation, then adds noise and occlusion, each
/// from its own stream so that grids over noise and occlusion share
/// viewpoints.
fn render(x: &Structure, cfg: &SynthConfig, stream_index: u64) -> Result<Rendered> {
    let rotation = geometry::sample_rotation(&mut rng::derive(cfg.seed, Stream::Rotation, stream_index));
    // basis blocks are centered, so x already is
    let structure = rotation * x;
    let mut y: Matrix2xX<f64> = geometry::project(&structure);
    let k = y.ncols();
    if cfg.noise_sigma > 0.0 {
        let mut noise = rng::derive(cfg.seed, Stream::Noise, stream_index);
        for v in y.iter_mut() {
            *v += cfg.noise_sigma * noise.sample::<f64, _>(StandardNormal);
        }
    }
    let mut occ = rng::derive(cfg.seed, Stream::Occlusion, stream_index);
    let visible = loop {
        let vis: Vec<bool> = (0..k).map(|_| !occ.random_bool(cfg.occlusion_prob)).collect();
        if vis.iter().any(|&v| v) {
            break vis;
        }
    };
    Ok(Rendered {
        view: KeypointView::new(y, visible)?,
        structure,
        rotation,
    })
}

fn config_echo<T: Serialize>(kind: &str, cfg: &T) -> serde_json::Value {
    serde_json::json!({ "generator": kind, "config": cfg })
}

/// Draws a benchmark according to `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let basis = generate_basis(cfg.basis_dim, cfg.keypoints, &mut rng::derive(cfg.seed, Stream::Basis, 0));
    let n = cfg.num_views();
    let mut views = Vec::with_capacity(n);
    let mut gt = GroundTruth {
        structures: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        alphas: Vec::with_capacity(n),
        basis: basis.clone(),
    };
    let mut split = Vec::with_capacity(n);
    let mut shape_index = Vec::with_capacity(n);
    let train_shapes = cfg.num_train_shapes();
    for s in 0..cfg.num_shapes {
        let alpha = sample_alpha(cfg.basis_dim, cfg.alpha_std, &mut rng::derive(cfg.seed, Stream::Shape, s as u64));
        let x = reconstruct(alpha.as_slice(), &basis)?;
        for j in 0..cfg.views_per_shape {
            let r = render(&x, cfg, (s * cfg.views_per_shape + j) as u64)?;
            views.push(r.view);
            gt.structures.push(r.structure);
            gt.rotations.push(r.rotation);
            gt.alphas.push(alpha.clone());
            split.push(if s < train_shapes { Split::Train } else { Split::Test });
            shape_index.push(s);
        }
    }
    Ok(Dataset {
        views,
        split,
        shape_index,
        has_occlusions: cfg.occlusion_prob > 0.0,
        root_index: None,
        layout: None,
        classes: None,
        gt: Some(gt),
        config: config_echo("synthetic", cfg),
    })
}

/// A single rigid object seen from many views (`basis_dim` must be 1).
pub fn generate_rigid(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.basis_dim != 1 {
        return Err(Error::InvalidConfig(format!("rigid data needs basis_dim = 1, got {}", cfg.basis_dim)));
    }
    let mut d = generate(cfg)?;
    d.config = config_echo("rigid", cfg);
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassConfig {
    /// Shared settings; `keypoints` is ignored in favour of `class_sizes`.
    pub base: SynthConfig,
    pub class_sizes: Vec<usize>,
}

/// Several object classes with disjoint keypoint sets and bases, padded
/// into one concatenated keypoint layout. The ground-truth basis is the
/// block-diagonal union, so every padded view is still an exact
/// projection of its ground-truth coefficients.
pub fn generate_multiclass(cfg: &MulticlassConfig) -> Result<Dataset> {
    let layout = MulticlassLayout::new(cfg.class_sizes.clone())?;
    let c_count = layout.class_count();
    let d = cfg.base.basis_dim;
    let total_k = layout.total_keypoints();
    let mut basis = ShapeBasis::zeros(c_count * d, total_k);
    let mut class_cfgs = Vec::new();
    for (c, &kc) in cfg.class_sizes.iter().enumerate() {
        let class_cfg = SynthConfig {
            keypoints: kc,
            seed: cfg.base.seed ^ ((c as u64 + 1) << 40),
            ..cfg.base.clone()
        };
        class_cfg.validate()?;
        let b = generate_basis(d, kc, &mut rng::derive(class_cfg.seed, Stream::Basis, 0));
        let range = layout.block(c).expect("class in layout");
        for dd in 0..d {
            for row in 0..3 {
                for (kk, col) in range.clone().enumerate() {
                    basis.data_mut()[((c * d + dd) * 3 + row) * total_k + col] = b.get(dd, row, kk);
                }
            }
        }
        class_cfgs.push(class_cfg);
    }
    let mut out = Dataset {
        views: Vec::new(),
        split: Vec::new(),
        shape_index: Vec::new(),
        has_occlusions: cfg.base.occlusion_prob > 0.0,
        root_index: None,
        layout: Some(layout.clone()),
        classes: Some(Vec::new()),
        gt: None,
        config: config_echo("multiclass", cfg),
    };
    let mut gt = GroundTruth {
        structures: Vec::new(),
        rotations: Vec::new(),
        alphas: Vec::new(),
        basis,
    };
    for (c, class_cfg) in class_cfgs.iter().enumerate() {
        let part = generate(class_cfg)?;
        let part_gt = part.gt.expect("synthetic data has ground truth");
        let range = layout.block(c).expect("class in layout");
        for i in 0..part.views.len() {
            out.views.push(pad_multiclass(&part.views[i], c, &layout)?);
            let mut x = Structure::zeros(total_k);
            x.columns_mut(range.start, range.len()).copy_from(&part_gt.structures[i]);
            gt.structures.push(x);
            gt.rotations.push(part_gt.rotations[i]);
            let mut a = DVector::zeros(c_count * d);
            a.rows_mut(c * d, d).copy_from(&part_gt.alphas[i]);
            gt.alphas.push(a);
            out.split.push(part.split[i]);
            out.shape_index.push(c * cfg.base.num_shapes + part.shape_index[i]);
            out.classes.as_mut().expect("set above").push(c);
        }
    }
    out.gt = Some(gt);
    Ok(out)
}

/// One cell of a noise × occlusion grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: usize,
    pub col: usize,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub config: SynthConfig,
}

/// Row-major grid of configs over `sigmas × p_occs`. All cells keep the
/// base seed, so they share shapes and viewpoints and differ only in
/// corruption.
pub fn sweep_grid(base: &SynthConfig, sigmas: &[f64], p_occs: &[f64]) -> Result<Vec<SweepCell>> {
    if sigmas.is_empty() || p_occs.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(sigmas.len() * p_occs.len());
    for (row, &noise_sigma) in sigmas.iter().enumerate() {
        for (col, &occlusion_prob) in p_occs.iter().enumerate() {
            let config = SynthConfig {
                noise_sigma,
                occlusion_prob,
                ..base.clone()
            };
            config.validate()?;
            cells.push(SweepCell {
                row,
                col,
                noise_sigma,
                occlusion_prob,
                config,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationParams;
    use crate::losses::{reprojection_loss_l1, LossConfig};
    use crate::shapemodel::PoseEstimate;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            keypoints: 8,
            basis_dim: 3,
            num_shapes: 10,
            views_per_shape: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_views_are_exact_projections() {
        let d = generate(&small(1)).unwrap();
        let gt = d.gt.as_ref().unwrap();
        for (i, v) in d.views.iter().enumerate() {
            let x = reconstruct(gt.alphas[i].as_slice(), &gt.basis).unwrap();
            let y = geometry::project(&(gt.rotations[i] * x));
            assert_eq!((&v.keypoints - y).abs().max(), 0.0);
            assert_eq!((&v.keypoints - geometry::project(&gt.structures[i])).abs().max(), 0.0);
        }
    }

    #[test]
    fn ground_truth_has_zero_reprojection_loss() {
        let d = generate(&small(2)).unwrap();
        let gt = d.gt.as_ref().unwrap();
        for (i, v) in d.views.iter().enumerate() {
            let r = gt.rotations[i];
            let q = nalgebra::Rotation3::from_matrix_unchecked(r).scaled_axis();
            let pose = PoseEstimate {
                alpha: gt.alphas[i].clone(),
                theta: RotationParams(q),
            };
            let l1 = reprojection_loss_l1(v, &pose, &gt.basis, &LossConfig::default(), false).unwrap();
            assert!(l1 < 1e-12, "{l1}");
        }
    }

    #[test]
    fn split_is_by_shape() {
        let d = generate(&small(3)).unwrap();
        for s in 0..10 {
            let labels: Vec<Split> = (0..d.len()).filter(|&i| d.shape_index[i] == s).map(|i| d.split[i]).collect();
            assert_eq!(labels.len(), 4);
            assert!(labels.iter().all(|&l| l == labels[0]));
            assert_eq!(labels[0], if s < 8 { Split::Train } else { Split::Test });
        }
        d.validate().unwrap();
    }

    #[test]
    fn seed_determinism() {
        assert_eq!(generate(&small(4)).unwrap(), generate(&small(4)).unwrap());
        assert_ne!(generate(&small(4)).unwrap().views, generate(&small(5)).unwrap().views);
    }

    #[test]
    fn feasibility_is_enforced() {
        let cfg = SynthConfig {
            keypoints: 7,
            basis_dim: 10,
            ..small(0)
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        assert!(generate(&SynthConfig { keypoints: 8, ..cfg }).is_ok());
        assert!(generate(&SynthConfig { occlusion_prob: 1.0, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { noise_sigma: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn every_view_keeps_a_visible_point() {
        let cfg = SynthConfig {
            keypoints: 4,
            basis_dim: 1,
            occlusion_prob: 0.95,
            num_shapes: 50,
            ..small(6)
        };
        let d = generate(&cfg).unwrap();
        assert!(d.views.iter().all(|v| v.num_visible() >= 1));
        assert!(d.has_occlusions);
    }

    #[test]
    fn rigid_views_share_one_structure() {
        let cfg = SynthConfig {
            basis_dim: 1,
            ..small(7)
        };
        let d = generate_rigid(&cfg).unwrap();
        let gt = d.gt.unwrap();
        for (i, a) in gt.alphas.iter().enumerate() {
            assert_eq!(a, &gt.alphas[0]);
            let canonical = gt.rotations[i].transpose() * &gt.structures[i];
            let first = gt.rotations[0].transpose() * &gt.structures[0];
            assert!((canonical - first).abs().max() < 1e-12);
        }
        assert!(generate_rigid(&small(7)).is_err());
    }

    #[test]
    fn multiclass_padding_is_consistent() {
        let cfg = MulticlassConfig {
            base: SynthConfig {
                basis_dim: 2,
                num_shapes: 3,
                views_per_shape: 2,
                ..small(8)
            },
            class_sizes: vec![5, 7],
        };
        let d = generate_multiclass(&cfg).unwrap();
        d.validate().unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d.num_keypoints(), 12);
        let gt = d.gt.as_ref().unwrap();
        for (i, v) in d.views.iter().enumerate() {
            let class = d.classes.as_ref().unwrap()[i];
            let range = d.layout.as_ref().unwrap().block(class).unwrap();
            for k in 0..12 {
                assert_eq!(v.visible[k], range.contains(&k));
            }
            let x = reconstruct(gt.alphas[i].as_slice(), &gt.basis).unwrap();
            let y = geometry::project(&(gt.rotations[i] * x));
            assert!((&v.keypoints - y).abs().max() < 1e-12);
        }
    }

    #[test]
    fn sweep_cells_share_geometry() {
        let base = small(9);
        let cells = sweep_grid(&base, &[0.0, 0.01], &[0.0, 0.3]).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(generate(&cells[0].config).unwrap(), generate(&base).unwrap());
        let a = generate(&cells[0].config).unwrap();
        let b = generate(&cells[3].config).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_ne!(a.views, b.views);
        assert!(sweep_grid(&base, &[], &[0.0]).is_err());
    }
}
