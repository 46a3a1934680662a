//! Linear low-rank shape model, camera views and multiclass keypoint layout.

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CameraView, RotationParams};

/// A `3 × K` point cloud.
pub type Structure = Matrix3xX<f64>;

/// One observation: 2D keypoints and per-keypoint visibility.
///
/// Invisible keypoints carry zero coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointView {
    pub keypoints: Matrix2xX<f64>,
    pub visible: Vec<bool>,
}

impl KeypointView {
    /// Builds a view, zeroing the coordinates of invisible keypoints.
    pub fn new(mut keypoints: Matrix2xX<f64>, visible: Vec<bool>) -> Result<Self> {
        if keypoints.ncols() != visible.len() {
            return Err(Error::shape(
                "KeypointView",
                format!("{} keypoints, {} flags", keypoints.ncols(), visible.len()),
            ));
        }
        for (k, &v) in visible.iter().enumerate() {
            if !v {
                keypoints.column_mut(k).fill(0.0);
            }
        }
        Ok(KeypointView { keypoints, visible })
    }

    pub fn fully_visible(keypoints: Matrix2xX<f64>) -> Self {
        let k = keypoints.ncols();
        KeypointView {
            keypoints,
            visible: vec![true; k],
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.visible.len()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// View-invariant basis: `D` stacked `3 × K` blocks forming a `3D × K`
/// matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeBasis {
    dim: usize,
    keypoints: usize,
    data: Vec<f64>,
}

impl ShapeBasis {
    /// `data` is the row-major `3D × K` matrix.
    pub fn new(dim: usize, keypoints: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * dim * keypoints {
            return Err(Error::shape(
                "ShapeBasis",
                format!("{} values for D={dim}, K={keypoints}", data.len()),
            ));
        }
        Ok(ShapeBasis { dim, keypoints, data })
    }

    pub fn zeros(dim: usize, keypoints: usize) -> Self {
        ShapeBasis {
            dim,
            keypoints,
            data: vec![0.0; 3 * dim * keypoints],
        }
    }

    pub fn from_blocks(blocks: &[Structure]) -> Result<Self> {
        let k = blocks.first().map_or(0, |b| b.ncols());
        let mut data = Vec::with_capacity(3 * k * blocks.len());
        for b in blocks {
            if b.ncols() != k {
                return Err(Error::shape("ShapeBasis::from_blocks", "blocks differ in K"));
            }
            for r in 0..3 {
                data.extend(b.row(r).iter());
            }
        }
        ShapeBasis::new(blocks.len(), k, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints
    }

    /// Row-major `3D × K` data; equivalently, a row-major `D × 3K` matrix
    /// whose row `d` is block `d` flattened coordinate-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Entry `S[3d + c, k]`.
    pub fn get(&self, d: usize, c: usize, k: usize) -> f64 {
        self.data[(3 * d + c) * self.keypoints + k]
    }

    pub fn block(&self, d: usize) -> Structure {
        let k = self.keypoints;
        Structure::from_fn(k, |c, kk| self.get(d, c, kk))
    }

    /// The `3D × K` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(3 * self.dim, self.keypoints, &self.data)
    }
}

/// Network output: shape coefficients and camera rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub alpha: DVector<f64>,
    pub theta: RotationParams,
}

/// `X(α; S) = (α ⊗ I₃) S`.
pub fn reconstruct(alpha: &[f64], basis: &ShapeBasis) -> Result<Structure> {
    if alpha.len() != basis.dim() {
        return Err(Error::shape(
            "reconstruct",
            format!("{} coefficients for basis dimension {}", alpha.len(), basis.dim()),
        ));
    }
    let k = basis.num_keypoints();
    let mut x = Structure::zeros(k);
    for (d, &a) in alpha.iter().enumerate() {
        for c in 0..3 {
            let row = &basis.data()[(3 * d + c) * k..(3 * d + c + 1) * k];
            for (kk, s) in row.iter().enumerate() {
                x[(c, kk)] += a * s;
            }
        }
    }
    Ok(x)
}

/// `M(θ) = Π R(θ)`.
pub fn camera_view(theta: &RotationParams) -> Result<CameraView> {
    let r = geometry::rot_expm(theta)?;
    Ok(CameraView(r.fixed_rows::<2>(0).into_owned()))
}

/// Placement of per-class keypoint blocks in a concatenated keypoint vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulticlassLayout {
    class_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl MulticlassLayout {
    pub fn new(class_sizes: Vec<usize>) -> Result<Self> {
        if class_sizes.is_empty() || class_sizes.contains(&0) {
            return Err(Error::InvalidConfig("every class needs at least one keypoint".into()));
        }
        let offsets = class_sizes
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        Ok(MulticlassLayout { class_sizes, offsets })
    }

    pub fn class_count(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn total_keypoints(&self) -> usize {
        self.class_sizes.iter().sum()
    }

    pub fn class_size(&self, class: usize) -> Option<usize> {
        self.class_sizes.get(class).copied()
    }

    /// Column range of class `class`.
    pub fn block(&self, class: usize) -> Option<std::ops::Range<usize>> {
        Some(self.offsets.get(class).copied()?..self.offsets[class] + self.class_sizes[class])
    }

    /// Per-keypoint mask of the class block.
    pub fn mask(&self, class: usize) -> Option<Vec<bool>> {
        let range = self.block(class)?;
        Some((0..self.total_keypoints()).map(|k| range.contains(&k)).collect())
    }
}

/// Places a class-specific view into its block of the full keypoint vector,
/// padding every other block with invisible zeros.
pub fn pad_multiclass(view: &KeypointView, class: usize, layout: &MulticlassLayout) -> Result<KeypointView> {
    let range = layout
        .block(class)
        .ok_or_else(|| Error::Precondition(format!("class {class} out of range ({} classes)", layout.class_count())))?;
    if view.num_keypoints() != range.len() {
        return Err(Error::shape(
            "pad_multiclass",
            format!("class {class} has {} keypoints, view has {}", range.len(), view.num_keypoints()),
        ));
    }
    let total = layout.total_keypoints();
    let mut keypoints = Matrix2xX::zeros(total);
    let mut visible = vec![false; total];
    for (i, k) in range.enumerate() {
        keypoints.set_column(k, &view.keypoints.column(i));
        visible[k] = view.visible[i];
    }
    Ok(KeypointView { keypoints, visible })
}

/// Inverse of [`pad_multiclass`].
pub fn extract_multiclass(view: &KeypointView, class: usize, layout: &MulticlassLayout) -> Result<KeypointView> {
    let range = layout
        .block(class)
        .ok_or_else(|| Error::Precondition(format!("class {class} out of range")))?;
    if view.num_keypoints() != layout.total_keypoints() {
        return Err(Error::shape("extract_multiclass", "view does not match layout"));
    }
    let keypoints = view.keypoints.columns(range.start, range.len()).into_owned();
    let visible = view.visible[range].to_vec();
    Ok(KeypointView { keypoints, visible })
}
