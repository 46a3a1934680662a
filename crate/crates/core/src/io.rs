//! File formats: datasets, checkpoints, reports, step logs and PLY clouds.
//!
//! Every JSON document carries `schema_version` and `kind`; loaders reject
//! anything else. Weight arrays are stored as base64 of little-endian f64
//! so checkpoints reproduce weights bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use nalgebra::{Matrix2xX, Matrix3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::networks::{ModelDims, ModelWeights};
use crate::shapemodel::{KeypointView, MulticlassLayout, ShapeBasis, Structure};
use crate::training::{EpochRecord, NormalizationStats, PlateauState, StepRecord, TrainConfig, TrainObserver, TrainState};

pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_DATASET: &str = "dataset";
pub const KIND_CHECKPOINT: &str = "checkpoint";
pub const KIND_VIEW: &str = "view";

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

fn check_header(value: &serde_json::Value, kind: &str) -> Result<()> {
    let h: Header = serde_json::from_value(value.clone()).map_err(|e| Error::Schema(format!("missing header: {e}")))?;
    if h.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema_version {} not supported (expected {SCHEMA_VERSION})",
            h.schema_version
        )));
    }
    if h.kind != kind {
        return Err(Error::Schema(format!("expected a {kind} file, found {}", h.kind)));
    }
    Ok(())
}

/// Parses a versioned document of the given kind.
pub fn from_json_str<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    check_header(&value, kind)?;
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

/// Pretty JSON followed by a newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

fn read_kind<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    from_json_str(&std::fs::read_to_string(path)?, kind)
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// `[x row, y row]`.
    pub keypoints: [Vec<f64>; 2],
    pub visible: Vec<bool>,
    pub split: Split,
    pub shape: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub dim: usize,
    pub keypoints: usize,
    /// Row-major `3D × K`.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub basis: BasisRecord,
    /// `[x row, y row, z row]` per view.
    pub structures: Vec<[Vec<f64>; 3]>,
    /// Row-major 3×3 per view.
    pub rotations: Vec<[f64; 9]>,
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub kind: String,
    pub num_keypoints: usize,
    pub has_occlusions: bool,
    pub root_index: Option<usize>,
    /// Keypoints per class when several classes share one padded layout.
    pub class_sizes: Option<Vec<usize>>,
    pub config: serde_json::Value,
    pub views: Vec<ViewRecord>,
    pub ground_truth: Option<GroundTruthRecord>,
}

fn rows<const R: usize>(m: &nalgebra::Matrix<f64, nalgebra::Const<R>, nalgebra::Dyn, nalgebra::VecStorage<f64, nalgebra::Const<R>, nalgebra::Dyn>>) -> [Vec<f64>; R] {
    std::array::from_fn(|r| m.row(r).iter().copied().collect())
}

fn matrix_from_rows<const R: usize>(
    rows: &[Vec<f64>; R],
    what: &str,
) -> Result<nalgebra::Matrix<f64, nalgebra::Const<R>, nalgebra::Dyn, nalgebra::VecStorage<f64, nalgebra::Const<R>, nalgebra::Dyn>>> {
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Schema(format!("{what}: rows differ in length")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("{what}: non-finite entry")));
    }
    Ok(nalgebra::Matrix::from_fn_generic(nalgebra::Const::<R>, nalgebra::Dyn(k), |r, c| rows[r][c]))
}

impl DatasetFile {
    pub fn from_dataset(d: &Dataset) -> Self {
        let views = d
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| ViewRecord {
                keypoints: rows(&v.keypoints),
                visible: v.visible.clone(),
                split: d.split[i],
                shape: d.shape_index[i],
                class: d.classes.as_ref().map(|c| c[i]),
            })
            .collect();
        let ground_truth = d.gt.as_ref().map(|gt| GroundTruthRecord {
            basis: BasisRecord {
                dim: gt.basis.dim(),
                keypoints: gt.basis.num_keypoints(),
                data: gt.basis.data().to_vec(),
            },
            structures: gt.structures.iter().map(rows).collect(),
            rotations: gt.rotations.iter().map(|r| std::array::from_fn(|i| r[(i / 3, i % 3)])).collect(),
            alphas: gt.alphas.iter().map(|a| a.iter().copied().collect()).collect(),
        });
        DatasetFile {
            schema_version: SCHEMA_VERSION,
            kind: KIND_DATASET.into(),
            num_keypoints: d.num_keypoints(),
            has_occlusions: d.has_occlusions,
            root_index: d.root_index,
            class_sizes: d.layout.as_ref().map(|l| (0..l.class_count()).map(|c| l.class_size(c).unwrap()).collect()),
            config: d.config.clone(),
            views,
            ground_truth,
        }
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        let k = self.num_keypoints;
        let mut views = Vec::with_capacity(self.views.len());
        for (i, r) in self.views.iter().enumerate() {
            let y = matrix_from_rows(&r.keypoints, &format!("view {i}"))?;
            if y.ncols() != k || r.visible.len() != k {
                return Err(Error::Schema(format!("view {i} does not have {k} keypoints")));
            }
            if r.visible.iter().zip(y.column_iter()).any(|(&v, c)| !v && c.norm() != 0.0) {
                return Err(Error::Schema(format!("view {i}: invisible keypoints must be zero")));
            }
            views.push(KeypointView { keypoints: y, visible: r.visible.clone() });
        }
        let layout = self.class_sizes.map(MulticlassLayout::new).transpose().map_err(|e| Error::Schema(e.to_string()))?;
        let classes = if layout.is_some() {
            Some(
                self.views
                    .iter()
                    .map(|r| r.class.ok_or_else(|| Error::Schema("multiclass view without class".into())))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let gt = self
            .ground_truth
            .map(|g| -> Result<GroundTruth> {
                let basis = ShapeBasis::new(g.basis.dim, g.basis.keypoints, g.basis.data).map_err(|e| Error::Schema(e.to_string()))?;
                Ok(GroundTruth {
                    structures: g
                        .structures
                        .iter()
                        .enumerate()
                        .map(|(i, s)| matrix_from_rows(s, &format!("structure {i}")))
                        .collect::<Result<_>>()?,
                    rotations: g.rotations.iter().map(|r| Matrix3::from_row_slice(r)).collect(),
                    alphas: g.alphas.into_iter().map(nalgebra::DVector::from_vec).collect(),
                    basis,
                })
            })
            .transpose()?;
        let d = Dataset {
            split: self.views.iter().map(|r| r.split).collect(),
            shape_index: self.views.iter().map(|r| r.shape).collect(),
            views,
            has_occlusions: self.has_occlusions,
            root_index: self.root_index,
            layout,
            classes,
            gt,
            config: self.config,
        };
        if d.num_keypoints() != k && !d.is_empty() {
            return Err(Error::Schema("keypoint count mismatch".into()));
        }
        d.validate()?;
        Ok(d)
    }
}

pub fn dataset_to_string(d: &Dataset) -> Result<String> {
    to_json_string(&DatasetFile::from_dataset(d))
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    from_json_str::<DatasetFile>(text, KIND_DATASET)?.into_dataset()
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_str(&std::fs::read_to_string(path)?)
}

// ------------------------------------------------------------ single view

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFile {
    pub schema_version: u32,
    pub kind: String,
    pub keypoints: [Vec<f64>; 2],
    pub visible: Vec<bool>,
}

impl ViewFile {
    pub fn new(view: &KeypointView) -> Self {
        ViewFile {
            schema_version: SCHEMA_VERSION,
            kind: KIND_VIEW.into(),
            keypoints: rows(&view.keypoints),
            visible: view.visible.clone(),
        }
    }

    pub fn into_view(self) -> Result<KeypointView> {
        let y: Matrix2xX<f64> = matrix_from_rows(&self.keypoints, "view")?;
        KeypointView::new(y, self.visible).map_err(|e| Error::Schema(e.to_string()))
    }
}

pub fn load_view(path: &Path) -> Result<KeypointView> {
    read_kind::<ViewFile>(path, KIND_VIEW)?.into_view()
}

// ------------------------------------------------------------ checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of little-endian f64.
    pub data: String,
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Schema(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema("array byte length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn record(name: String, shape: &[usize], data: &[f64]) -> ArrayRecord {
    ArrayRecord {
        name,
        shape: shape.to_vec(),
        data: encode_f64(data),
    }
}

fn restore(records: &[ArrayRecord], targets: Vec<(String, &mut Vec<f64>, Vec<usize>)>, what: &str) -> Result<()> {
    if records.len() != targets.len() {
        return Err(Error::Schema(format!("{what}: {} arrays, expected {}", records.len(), targets.len())));
    }
    for (r, (name, slot, shape)) in records.iter().zip(targets) {
        if r.name != name || r.shape != shape {
            return Err(Error::Schema(format!("{what}: found {} {:?}, expected {name} {shape:?}", r.name, r.shape)));
        }
        let data = decode_f64(&r.data)?;
        if data.len() != slot.len() {
            return Err(Error::Schema(format!("{what}: {name} has {} values, expected {}", data.len(), slot.len())));
        }
        *slot = data;
    }
    Ok(())
}

/// Trained (or in-training) model with optimizer state and progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub schema_version: u32,
    pub kind: String,
    pub config: TrainConfig,
    pub translate: bool,
    pub dims: ModelDims,
    pub normalization: NormalizationStats,
    pub schedule: PlateauState,
    pub epoch: usize,
    pub steps: usize,
    pub weights: Vec<ArrayRecord>,
    pub velocity: Vec<ArrayRecord>,
    pub running_stats: Vec<ArrayRecord>,
}

fn running_names(w: &mut ModelWeights) -> Vec<(String, &mut Vec<f64>, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, n) in w.norms_mut().into_iter().enumerate() {
        let len = n.running_mean.len();
        out.push((format!("norm.{i}.running_mean"), &mut n.running_mean, vec![len]));
        out.push((format!("norm.{i}.running_var"), &mut n.running_var, vec![len]));
    }
    out
}

impl CheckpointFile {
    pub fn from_state(state: &TrainState, config: &TrainConfig, translate: bool) -> Self {
        let params = state.weights.params();
        let weights = params.iter().map(|(n, t)| record(n.clone(), t.shape(), t.data())).collect();
        let velocity = params
            .iter()
            .zip(&state.velocity)
            .map(|((n, _), v)| record(n.clone(), v.shape(), v.data()))
            .collect();
        let mut w = state.weights.clone();
        let running_stats = running_names(&mut w)
            .into_iter()
            .map(|(n, v, s)| record(n, &s, v))
            .collect();
        CheckpointFile {
            schema_version: SCHEMA_VERSION,
            kind: KIND_CHECKPOINT.into(),
            config: config.clone(),
            translate,
            dims: state.weights.dims.clone(),
            normalization: state.normalization,
            schedule: state.schedule,
            epoch: state.epoch,
            steps: state.steps,
            weights,
            velocity,
            running_stats,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let mut weights = ModelWeights::init(0, &self.dims).map_err(|e| Error::Schema(e.to_string()))?;
        let names: Vec<(String, Vec<usize>)> = weights.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let mut velocity: Vec<Tensor> = names.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        {
            let mut slots: Vec<Vec<f64>> = names.iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
            let targets = names.iter().zip(slots.iter_mut()).map(|((n, s), v)| (n.clone(), v, s.clone())).collect();
            restore(&self.weights, targets, "weights")?;
            for (t, data) in weights.params_mut().into_iter().zip(slots) {
                *t = Tensor::new(t.shape().to_vec(), data)?;
            }
        }
        {
            let mut slots: Vec<Vec<f64>> = names.iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
            let targets = names.iter().zip(slots.iter_mut()).map(|((n, s), v)| (n.clone(), v, s.clone())).collect();
            restore(&self.velocity, targets, "velocity")?;
            for (t, data) in velocity.iter_mut().zip(slots) {
                *t = Tensor::new(t.shape().to_vec(), data)?;
            }
        }
        restore(&self.running_stats, running_names(&mut weights), "running stats")?;
        if !self.normalization.scale.is_finite() || self.normalization.scale <= 0.0 {
            return Err(Error::Schema("normalization scale must be positive".into()));
        }
        Ok(TrainState {
            weights,
            velocity,
            schedule: self.schedule,
            normalization: self.normalization,
            epoch: self.epoch,
            steps: self.steps,
        })
    }
}

pub fn checkpoint_to_string(state: &TrainState, config: &TrainConfig, translate: bool) -> Result<String> {
    to_json_string(&CheckpointFile::from_state(state, config, translate))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig, translate: bool) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(state, config, translate)?)?;
    Ok(())
}

/// Returns the state together with the config and translation flag it was
/// trained with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig, bool)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<(TrainState, TrainConfig, bool)> {
    let file: CheckpointFile = from_json_str(text, KIND_CHECKPOINT)?;
    let (config, translate) = (file.config.clone(), file.translate);
    Ok((file.into_state()?, config, translate))
}

// ------------------------------------------------------------- step logs

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Writes one JSON object per step and per epoch.
pub struct JsonlLog<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl JsonlLog<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlLog::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        JsonlLog { out, error: None }
    }

    fn line(&mut self, line: &LogLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TrainObserver for JsonlLog<W> {
    fn on_step(&mut self, record: &StepRecord) {
        if self.error.is_none() {
            self.error = self.line(&LogLine::Step(record)).err();
        }
    }

    fn on_epoch(&mut self, _state: &TrainState, record: &EpochRecord) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.line(&LogLine::Epoch(record))?;
        Ok(self.out.flush()?)
    }
}

// ------------------------------------------------------------------- PLY

/// ASCII PLY with one vertex per column and a `visible` property.
pub fn write_ply(out: &mut impl Write, points: &Structure, visible: &[bool], comment: Option<&str>) -> Result<()> {
    if visible.len() != points.ncols() {
        return Err(Error::shape("write_ply", format!("{} points, {} flags", points.ncols(), visible.len())));
    }
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "comment {line}")?;
        }
    }
    writeln!(out, "element vertex {}", points.ncols())?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property double {p}")?;
    }
    writeln!(out, "property uchar visible")?;
    writeln!(out, "end_header")?;
    for (c, &v) in points.column_iter().zip(visible) {
        writeln!(out, "{:?} {:?} {:?} {}", c[0], c[1], c[2], u8::from(v))?;
    }
    Ok(())
}

pub fn save_ply(path: &Path, points: &Structure, visible: &[bool], comment: Option<&str>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_ply(&mut f, points, visible, comment)?;
    f.flush()?;
    Ok(())
}

/// Parses the files written by [`write_ply`]: ASCII, a single vertex
/// element with double x/y/z and a uchar `visible`.
pub fn read_ply(input: impl BufRead) -> Result<(Structure, Vec<bool>)> {
    let bad = |m: &str| Error::Schema(format!("ply: {m}"));
    let mut lines = input.lines();
    let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(Error::from) };
    if next()?.trim_end() != "ply" {
        return Err(bad("missing magic"));
    }
    if next()?.trim_end() != "format ascii 1.0" {
        return Err(bad("only ascii 1.0 is supported"));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = next()?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] if count.is_none() => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", ..] => return Err(bad("unexpected element")),
            ["property", ty, name] if count.is_some() => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => return Err(bad(&format!("unexpected header line {line:?}"))),
        }
    }
    let expected = [("double", "x"), ("double", "y"), ("double", "z"), ("uchar", "visible")];
    if props.len() != 4 || props.iter().zip(expected).any(|((t, n), (et, en))| t != et || n != en) {
        return Err(bad("unexpected vertex properties"));
    }
    let k = count.ok_or_else(|| bad("no vertex element"))?;
    let mut points = Structure::zeros(k);
    let mut visible = Vec::with_capacity(k);
    for i in 0..k {
        let line = next()?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != 4 {
            return Err(bad(&format!("vertex {i} has {} fields", words.len())));
        }
        for r in 0..3 {
            points[(r, i)] = words[r].parse().map_err(|_| bad(&format!("vertex {i}: bad number")))?;
        }
        visible.push(match words[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(&format!("vertex {i}: bad visibility flag"))),
        });
    }
    Ok((points, visible))
}

pub fn load_ply(path: &Path) -> Result<(Structure, Vec<bool>)> {
    read_ply(BufReader::new(File::open(path)?))
}
