use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nrsfm::classical::{self, MonocularConfig};
use nrsfm::dataset::{Dataset, Split};
use nrsfm::evaluation::{self, EvalProtocol, EvalReport, Reconstructor, SweepResult, TrainedModel};
use nrsfm::io::{self, JsonlLog, SCHEMA_VERSION};
use nrsfm::losses::{LossConfig, LossWeights};
use nrsfm::networks::TrunkConfig;
use nrsfm::shapemodel::{KeypointView, Structure};
use nrsfm::synthgen::{self, MulticlassConfig, SynthConfig};
use nrsfm::training::{self, EpochRecord, PlateauConfig, StepRecord, TrainConfig, TrainObserver, TrainState};
use nrsfm::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::{
    BasisSource, EvalArgs, FeasibilityArgs, GenerateArgs, ModelArgs, OracleFitArgs, OracleRigidArgs, Paths, ProtocolArgs,
    ReconstructArgs, SplitArg, SweepArgs, SynthArgs, TrainArgs,
};

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            keypoints: self.keypoints,
            basis_dim: self.basis_dim,
            num_shapes: self.shapes,
            views_per_shape: self.views_per_shape,
            alpha_std: self.alpha_std,
            noise_sigma: self.noise,
            occlusion_prob: self.p_occ,
            seed: self.seed,
            train_fraction: self.train_fraction,
        }
    }
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            plateau: PlateauConfig {
                patience: self.patience,
                decay_factor: self.lr_decay,
                min_lr: self.min_lr,
                ..PlateauConfig::default()
            },
            max_epochs: self.epochs,
            seed: self.train_seed,
            loss: LossConfig {
                epsilon: self.epsilon,
                variant: self.variant.into(),
                weights: LossWeights {
                    reprojection: self.w_reprojection,
                    canonicalization: self.w_canonicalization,
                    equivariance: self.w_equivariance,
                },
                detach_canonicalizer_input: self.detach_canonicalizer_input,
            },
            basis_dim: self.model_basis_dim,
            trunk: TrunkConfig {
                num_blocks: self.blocks,
                outer_width: self.width,
                bottleneck_width: self.bottleneck,
                batch_norm: !self.no_batch_norm,
            },
        }
    }
}

impl ProtocolArgs {
    fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            depth_centering: self.centering.into(),
            allow_depth_flip: !self.no_depth_flip,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = at(path, create(path))?;
    f.write_all(text.as_bytes())?;
    Ok(f.flush()?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &io::to_json_string(value)?)
}

/// Prefixes I/O and schema errors with the offending path.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    at(path, io::load_dataset(path))
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig, bool)> {
    at(path, io::load_checkpoint(path))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn rows(x: &Structure) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

// ---------------------------------------------------------------- generate

pub fn generate(a: GenerateArgs, paths: &Paths) -> Result<()> {
    let mut cfg = a.synth.config();
    let dataset = if a.rigid {
        cfg.basis_dim = 1;
        synthgen::generate_rigid(&cfg)?
    } else if let Some(class_sizes) = a.class_sizes {
        synthgen::generate_multiclass(&MulticlassConfig { base: cfg.clone(), class_sizes })?
    } else {
        synthgen::generate(&cfg)?
    };
    let out = paths.out(&a.output);
    write_text(&out, &io::dataset_to_string(&dataset)?)?;
    let points: usize = dataset.views.iter().map(|v| v.num_keypoints()).sum();
    println!("wrote {}", display(&out));
    println!(
        "views {}  train {}  test {}  K {}  D_true {}  sigma {}  p_occ {}",
        dataset.len(),
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Test).len(),
        dataset.num_keypoints(),
        cfg.basis_dim,
        cfg.noise_sigma,
        cfg.occlusion_prob
    );
    println!("visible fraction {:.4} over {points} points", dataset.visible_fraction());
    Ok(())
}

// ------------------------------------------------------------------- train

/// Epoch lines on stderr, optionally a JSON-lines log.
struct Progress {
    log: Option<JsonlLog<BufWriter<File>>>,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, record: &StepRecord) {
        if let Some(log) = &mut self.log {
            log.on_step(record);
        }
    }

    fn on_epoch(&mut self, state: &TrainState, r: &EpochRecord) -> Result<()> {
        let part = |name: &str, v: Option<f64>| v.map(|v| format!("  {name} {v:.5}")).unwrap_or_default();
        eprintln!(
            "epoch {:>4}  lr {:.1e}  total {:.5}{}{}{}{}",
            r.epoch,
            r.lr,
            r.total,
            part("l1", r.l1),
            part("l2", r.l2),
            part("l3", r.l3),
            if r.decayed { "  (decay)" } else { "" }
        );
        match &mut self.log {
            Some(log) => log.on_epoch(state, r),
            None => Ok(()),
        }
    }
}

fn check_keypoints(expected: usize, dataset: &Dataset, what: &str) -> Result<()> {
    if dataset.num_keypoints() != expected {
        return Err(Error::ShapeMismatch {
            op: "checkpoint",
            detail: format!("{what} expects K={expected}, dataset has K={}", dataset.num_keypoints()),
        });
    }
    Ok(())
}

pub fn train(a: TrainArgs, paths: &Paths) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let views = dataset.views_in(Split::Train);
    if views.is_empty() {
        return Err(Error::Precondition("dataset has no training views".into()));
    }
    let log = a.log.as_ref().map(|p| JsonlLog::create(&paths.out(p))).transpose()?;
    let mut progress = Progress { log };
    let (state, config, translate, report) = match &a.resume {
        Some(ckpt) => {
            let (mut state, mut cfg, translate) = load_checkpoint(ckpt)?;
            check_keypoints(state.weights.dims.keypoints, &dataset, "checkpoint")?;
            cfg.max_epochs = a.model.epochs;
            let report = training::resume(&mut state, &views, translate, &cfg, &mut progress)?;
            (state, cfg, translate, report)
        }
        None => {
            let cfg = a.model.config();
            let translate = dataset.has_occlusions;
            let out = training::fit(&views, translate, &cfg, &mut progress)?;
            (out.state, cfg, translate, out.report)
        }
    };
    if let Some(log) = progress.log {
        log.finish()?;
    }
    let ckpt = paths.out(&a.output);
    write_text(&ckpt, &io::checkpoint_to_string(&state, &config, translate)?)?;
    let report_path = a
        .report
        .map(|p| paths.out(&p))
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", ckpt.display())));
    write_json(
        &report_path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "train_report",
            "dataset": display(&a.dataset),
            "dataset_config": dataset.config,
            "resumed_from": a.resume.as_deref().map(display),
            "checkpoint": display(&ckpt),
            "normalization": state.normalization,
            "num_params": state.weights.num_params(),
            "report": report,
        }),
    )?;
    let last = report.epochs.last();
    println!(
        "trained {} epochs ({} total), {} steps, stop {:?}, final objective {}",
        report.epochs.len(),
        state.epoch,
        state.steps,
        report.stop_reason,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.total))
    );
    println!("checkpoint {}", display(&ckpt));
    println!("report {}", display(&report_path));
    Ok(())
}

// -------------------------------------------------------------------- eval

fn load_model(path: &Path, dataset: Option<&Dataset>) -> Result<(TrainedModel, TrainConfig)> {
    let (state, cfg, translate) = load_checkpoint(path)?;
    if let Some(d) = dataset {
        check_keypoints(state.weights.dims.keypoints, d, &display(path))?;
    }
    let model = TrainedModel {
        weights: state.weights,
        normalization: state.normalization,
        translate: dataset.map_or(translate, |d| d.has_occlusions),
    };
    Ok((model, cfg))
}

#[derive(Serialize)]
struct ModelEval {
    checkpoint: String,
    variant: String,
    metrics: EvalReport,
}

pub fn eval(a: EvalArgs, paths: &Paths) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let indices = match a.split {
        SplitArg::Train => dataset.indices(Split::Train),
        SplitArg::Test => dataset.indices(Split::Test),
        SplitArg::All => (0..dataset.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Precondition("no views in the selected split".into()));
    }
    let protocol = a.protocol.protocol();
    let mut rows = Vec::new();
    for ckpt in &a.checkpoint {
        let (model, cfg) = load_model(ckpt, Some(&dataset))?;
        let metrics = evaluation::evaluate(&model, &dataset, &indices, &protocol)?;
        rows.push(ModelEval {
            checkpoint: display(ckpt),
            variant: cfg.loss.variant.to_string(),
            metrics,
        });
    }
    let width = rows.iter().map(|r| r.checkpoint.len()).max().unwrap_or(0).max(10);
    println!(
        "{:<width$}  {:<7}  {:>10}  {:>10}  {:>12}  {:>9}",
        "checkpoint", "variant", "MPJPE", "stress", "reprojection", "flip-rate"
    );
    for r in &rows {
        let m = &r.metrics;
        println!(
            "{:<width$}  {:<7}  {:>10.5}  {:>10.5}  {:>12.5}  {:>9.3}",
            r.checkpoint, r.variant, m.mean_mpjpe, m.mean_stress, m.mean_reprojection_error, m.flip_rate
        );
    }
    if let Some(p) = a.report {
        write_json(
            &paths.out(&p),
            &json!({
                "schema_version": SCHEMA_VERSION,
                "kind": "eval_report",
                "dataset": display(&a.dataset),
                "split": format!("{:?}", a.split).to_lowercase(),
                "views": indices.len(),
                "protocol": protocol,
                "models": rows,
            }),
        )?;
    }
    Ok(())
}

// ------------------------------------------------------------- reconstruct

pub fn reconstruct(a: ReconstructArgs, paths: &Paths) -> Result<()> {
    let view: KeypointView = match (&a.view, &a.dataset, a.index) {
        (Some(p), _, _) => at(p, io::load_view(p))?,
        (None, Some(d), Some(i)) => {
            let d = load_dataset(d)?;
            d.views
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Precondition(format!("view index {i} out of range ({} views)", d.len())))?
        }
        _ => return Err(Error::InvalidConfig("give --view or --dataset with --index".into())),
    };
    let (mut model, _) = load_model(&a.checkpoint, None)?;
    let k = model.weights.dims.keypoints;
    if view.num_keypoints() != k {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            detail: format!("checkpoint expects K={k}, view has K={}", view.num_keypoints()),
        });
    }
    model.translate |= view.num_visible() < k;
    let p = model.predict(std::slice::from_ref(&view))?.remove(0);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    println!("alpha {}", fmt(p.pose.alpha.as_slice()));
    println!("theta {}", fmt(p.pose.theta.0.as_slice()));
    println!("reprojection error {:.6e}", p.reprojection_error);
    if let Some(path) = &a.ply_canonical {
        let out = paths.out(path);
        let mut f = create(&out)?;
        io::write_ply(&mut f, &p.canonical, &view.visible, Some("canonical frame"))?;
        f.flush()?;
        println!("canonical cloud {}", display(&out));
    }
    if let Some(path) = &a.ply_camera {
        let out = paths.out(path);
        let mut f = create(&out)?;
        io::write_ply(&mut f, &p.camera, &view.visible, Some("camera frame"))?;
        f.flush()?;
        println!("camera cloud {}", display(&out));
    }
    if let Some(path) = &a.json {
        write_json(
            &paths.out(path),
            &json!({
                "schema_version": SCHEMA_VERSION,
                "kind": "reconstruction",
                "checkpoint": display(&a.checkpoint),
                "alpha": p.pose.alpha.as_slice(),
                "theta": p.pose.theta.0.as_slice(),
                "canonical": rows(&p.canonical),
                "camera": rows(&p.camera),
                "visible": view.visible,
                "reprojection_error": p.reprojection_error,
            }),
        )?;
    }
    Ok(())
}

// ------------------------------------------------------------------- sweep

#[derive(Serialize)]
struct SweepSetting {
    keypoints: usize,
    mpjpe: Vec<Vec<Option<f64>>>,
    trend_inversions: Option<usize>,
    cells: Vec<SweepResult>,
}

pub fn sweep(a: SweepArgs, paths: &Paths) -> Result<()> {
    let base = a.synth.config();
    let cfg = a.model.config();
    cfg.validate()?;
    let protocol = a.protocol.protocol();
    let counts = a.keypoint_counts.clone().unwrap_or_else(|| vec![base.keypoints]);
    let mut settings = Vec::new();
    for &k in &counts {
        let cells = synthgen::sweep_grid(&SynthConfig { keypoints: k, ..base.clone() }, &a.sigmas, &a.p_occs)?;
        let results = evaluation::run_sweep(&cells, &cfg, &protocol);
        let matrix = evaluation::sweep_matrix(&results);
        let complete: Option<Vec<Vec<f64>>> = matrix.iter().map(|r| r.iter().copied().collect()).collect();
        println!("K = {k}: MPJPE (rows: sigma, columns: p_occ)");
        print!("{:>10}", "");
        for p in &a.p_occs {
            print!("  {:>10}", format!("p={p}"));
        }
        println!();
        for (s, row) in a.sigmas.iter().zip(&matrix) {
            print!("{:>10}", format!("s={s}"));
            for v in row {
                print!("  {:>10}", v.map_or("failed".into(), |v| format!("{v:.5}")));
            }
            println!();
        }
        for r in results.iter().filter(|r| r.error.is_some()) {
            eprintln!("cell ({}, {}) failed: {}", r.row, r.col, r.error.as_deref().unwrap_or(""));
        }
        settings.push(SweepSetting {
            keypoints: k,
            trend_inversions: complete.as_deref().map(evaluation::trend_inversions),
            mpjpe: matrix,
            cells: results,
        });
    }
    write_json(
        &paths.out(&a.output),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "sweep",
            "synth_config": base,
            "train_config": cfg,
            "protocol": protocol,
            "sigmas": a.sigmas,
            "p_occs": a.p_occs,
            "settings": settings,
        }),
    )?;
    if let Some(p) = a.csv {
        let mut text = String::from("keypoints,noise_sigma,occlusion_prob,mpjpe,stress,error\n");
        for s in &settings {
            for c in &s.cells {
                let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.keypoints,
                    c.noise_sigma,
                    c.occlusion_prob,
                    opt(c.mpjpe),
                    opt(c.stress),
                    c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
                ));
            }
        }
        write_text(&paths.out(&p), &text)?;
    }
    Ok(())
}

// ----------------------------------------------------------------- oracles

pub fn oracle_rigid(a: OracleRigidArgs, paths: &Paths) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.shape_index[i] == a.shape && dataset.views[i].num_visible() == dataset.num_keypoints())
        .collect();
    if idx.len() < 2 {
        return Err(Error::Precondition(format!(
            "shape {} has {} fully visible views, need at least 2",
            a.shape,
            idx.len()
        )));
    }
    let views: Vec<_> = idx.iter().map(|&i| dataset.views[i].keypoints.clone()).collect();
    let sol = classical::rigid_factorize(&views)?;
    println!("views {}  keypoints {}", views.len(), dataset.num_keypoints());
    println!("max residual {:.3e}  rms residual {:.3e}", sol.max_residual, sol.rms_residual);
    if let Some(gt) = &dataset.gt {
        let target = &gt.structures[idx[0]];
        let aligned = classical::procrustes_align(&sol.structure, target, true)?;
        println!("aligned structure error (MPJPE) {:.3e}", evaluation::mpjpe(&aligned, target)?);
    }
    if let Some(p) = &a.ply {
        let out = paths.out(p);
        let mut f = create(&out)?;
        io::write_ply(&mut f, &sol.structure, &vec![true; sol.structure.ncols()], Some("rigid factorization"))?;
        f.flush()?;
        println!("structure {}", display(&out));
    }
    Ok(())
}

fn centered(x: &Structure) -> Structure {
    let m = x.column_mean();
    let mut out = x.clone();
    for mut c in out.column_iter_mut() {
        c -= &m;
    }
    out
}

pub fn oracle_fit(a: OracleFitArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let raw = dataset
        .views
        .get(a.index)
        .cloned()
        .ok_or_else(|| Error::Precondition(format!("view index {} out of range ({} views)", a.index, dataset.len())))?;
    let (view, basis, scale) = match a.basis {
        BasisSource::Gt => {
            let gt = dataset.gt.as_ref().ok_or(Error::MissingGroundTruth("--basis gt needs a ground-truth basis"))?;
            (raw.clone(), gt.basis.clone(), 1.0)
        }
        BasisSource::Checkpoint => {
            let path = a.checkpoint.as_ref().ok_or_else(|| Error::InvalidConfig("--basis checkpoint needs --checkpoint".into()))?;
            let (model, _) = load_model(path, Some(&dataset))?;
            let s = model.normalization.scale;
            (training::normalize(&raw, &model.normalization)?, model.weights.shape_basis(), s)
        }
    };
    let cfg = MonocularConfig {
        restarts: a.restarts,
        max_iterations: a.max_iterations,
        seed: a.seed,
        translate: dataset.has_occlusions || raw.num_visible() < raw.num_keypoints(),
        ..MonocularConfig::default()
    };
    let fit = classical::monocular_fit(&view, &basis, &cfg)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    println!("residual {:.3e}  restart {}  iterations {}", fit.residual / scale, fit.restart, fit.iterations);
    println!("alpha {}", fmt(fit.pose.alpha.as_slice()));
    println!("theta {}", fmt(fit.pose.theta.0.as_slice()));
    if let Some(gt) = &dataset.gt {
        let x = classical::camera_frame_structure(&fit.pose, &basis)? / scale;
        let (err, _) = evaluation::resolve_depth_flip(&centered(&x), &centered(&gt.structures[a.index]), evaluation::mpjpe)?;
        println!("structure error (centered, depth flip resolved) {err:.3e}");
    }
    Ok(())
}

pub fn feasibility(a: FeasibilityArgs) -> Result<()> {
    let f = classical::feasibility_check(a.views, a.keypoints, a.basis_dim)?;
    if a.json {
        print!("{}", io::to_json_string(&f)?);
        return Ok(());
    }
    println!("constraints 2NK = {}", f.constraints);
    println!("unknowns {} (gauge credit {})", f.unknowns, f.gauge_credit);
    println!("joint count {}", if f.joint_feasible { "satisfied" } else { "violated" });
    if let Some(d) = f.basis_dim {
        println!(
            "single view 2K >= 6 + D ({} >= {}): {}",
            2 * f.keypoints,
            6 + d,
            if f.single_view_feasible { "yes" } else { "no" }
        );
    }
    println!("{}", if f.feasible { "feasible" } else { "infeasible" });
    Ok(())
}
