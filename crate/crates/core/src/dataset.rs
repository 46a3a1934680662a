//! In-memory keypoint datasets with optional ground truth.

use nalgebra::{DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapemodel::{KeypointView, MulticlassLayout, ShapeBasis, Structure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-view ground truth of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Camera-frame structures, centered at the origin.
    pub structures: Vec<Structure>,
    pub rotations: Vec<Matrix3<f64>>,
    pub alphas: Vec<DVector<f64>>,
    pub basis: ShapeBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<KeypointView>,
    pub split: Vec<Split>,
    /// Identifier of the underlying object instance; views of the same
    /// instance share an index.
    pub shape_index: Vec<usize>,
    /// Whether views may miss keypoints, in which case losses estimate a
    /// per-view translation.
    pub has_occlusions: bool,
    /// Keypoint used for root-joint depth centering, if any.
    pub root_index: Option<usize>,
    pub layout: Option<MulticlassLayout>,
    /// Class of each view when `layout` is set.
    pub classes: Option<Vec<usize>>,
    pub gt: Option<GroundTruth>,
    /// Free-form description of how the data was produced.
    pub config: serde_json::Value,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.views.first().map_or(0, |v| v.num_keypoints())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn views_in(&self, split: Split) -> Vec<KeypointView> {
        self.indices(split).into_iter().map(|i| self.views[i].clone()).collect()
    }

    pub fn visible_fraction(&self) -> f64 {
        let total: usize = self.views.iter().map(|v| v.num_keypoints()).sum();
        let vis: usize = self.views.iter().map(|v| v.num_visible()).sum();
        if total == 0 {
            0.0
        } else {
            vis as f64 / total as f64
        }
    }

    /// Checks that every array agrees on view count and keypoint count.
    pub fn validate(&self) -> Result<()> {
        let n = self.views.len();
        let k = self.num_keypoints();
        let bad = |m: String| Err(Error::Schema(m));
        if self.split.len() != n || self.shape_index.len() != n {
            return bad(format!("{n} views but {} split labels and {} shape indices", self.split.len(), self.shape_index.len()));
        }
        if let Some(v) = self.views.iter().position(|v| v.num_keypoints() != k) {
            return bad(format!("view {v} has {} keypoints, expected {k}", self.views[v].num_keypoints()));
        }
        if let Some(r) = self.root_index {
            if r >= k {
                return bad(format!("root index {r} out of range for K={k}"));
            }
        }
        match (&self.layout, &self.classes) {
            (Some(layout), Some(classes)) => {
                if layout.total_keypoints() != k {
                    return bad(format!("layout covers {} keypoints, views have {k}", layout.total_keypoints()));
                }
                if classes.len() != n || classes.iter().any(|&c| c >= layout.class_count()) {
                    return bad("class labels do not match the layout".into());
                }
            }
            (None, None) => {}
            _ => return bad("layout and class labels must be given together".into()),
        }
        if let Some(gt) = &self.gt {
            if gt.structures.len() != n || gt.rotations.len() != n || gt.alphas.len() != n {
                return bad("ground-truth arrays do not match the view count".into());
            }
            if gt.structures.iter().any(|x| x.ncols() != k) || gt.basis.num_keypoints() != k {
                return bad("ground-truth keypoint count mismatch".into());
            }
            if gt.alphas.iter().any(|a| a.len() != gt.basis.dim()) {
                return bad("ground-truth coefficient length mismatch".into());
            }
        }
        Ok(())
    }
}
