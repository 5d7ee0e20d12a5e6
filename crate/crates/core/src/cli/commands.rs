use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DataPaths, RunConfig, FOLDS};
use super::output::write_predictions;
use super::{CliError, EvalArgs, InspectArgs, ModelsArgs, PredictArgs, SynthArgs, WeightingArg};
use crate::error::Error;
use crate::graphmodel::{
    generate_synthetic_city, load_frames, load_graph, load_manifest, save_frames, save_graph,
    save_manifest, Congestion, CounterFrame, DatasetManifest, LabelKind, RoadGraph, SynthSpec,
};
use crate::model::Model;
use crate::preprocess::fit_stats;
use crate::train::{
    ensemble_weights, evaluate, from_checkpoint, to_checkpoint, train_kfold, train_run, Checkpoint,
    Ensemble, RunRecord, Weighting,
};

type Result<T> = std::result::Result<T, CliError>;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Run(Error::io(path, e)))
}

/// Writes `<dir>/<command>.toml` describing the resolved invocation.
fn write_run_manifest(dir: &Path, command: &str, manifest: &impl Serialize) -> Result<PathBuf> {
    let text = toml::to_string(manifest)
        .map_err(|e| CliError::Usage(format!("cannot record run: {e}")))?;
    let path = dir.join(format!("{command}.toml"));
    write_text(&path, &text)?;
    Ok(path)
}

/// Graph and frames named by a manifest and/or explicit paths. Explicit
/// paths win over the manifest's entries.
pub fn load_data(paths: &DataPaths) -> Result<(RoadGraph, Vec<CounterFrame>)> {
    let (graph, frames) = resolve_data(paths)?;
    let graph_path =
        graph.ok_or_else(|| CliError::Usage("no graph given: use --manifest or --graph".into()))?;
    let frames_path = frames
        .ok_or_else(|| CliError::Usage("no frames given: use --manifest or --frames".into()))?;
    Ok((load_graph(&graph_path)?, load_frames(&frames_path)?))
}

fn resolve_data(paths: &DataPaths) -> Result<(Option<PathBuf>, Option<PathBuf>)> {
    let (mut graph, mut frames) = (None, None);
    if let Some(m) = &paths.manifest {
        let manifest = load_manifest(m)?;
        let (g, f) = manifest.resolve(m.parent().unwrap_or(Path::new("")));
        graph = Some(g);
        frames = Some(f);
    }
    if let Some(g) = &paths.graph {
        graph = Some(g.clone());
    }
    if let Some(f) = &paths.frames {
        frames = Some(f.clone());
    }
    Ok((graph, frames))
}

fn class_counts(frames: &[CounterFrame]) -> [usize; 3] {
    let mut counts = [0; 3];
    for c in frames
        .iter()
        .flat_map(|f| f.classes.iter().flatten().flatten())
    {
        counts[c.index()] += 1;
    }
    counts
}

fn write_class_ratio(out: &mut String, frames: &[CounterFrame]) {
    let counts = class_counts(frames);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return;
    }
    let _ = write!(out, "class_ratio");
    for c in Congestion::ALL {
        let _ = write!(
            out,
            " {} {:.4}",
            c.token(),
            counts[c.index()] as f64 / total as f64
        );
    }
    let _ = writeln!(out);
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    command: &'static str,
    seed: u64,
    city: &'a str,
    nodes: usize,
    edges: usize,
    supersegments: usize,
    frames: usize,
    missing: f64,
    resample_mask: bool,
    per_cell_missing: bool,
    unlabeled: f64,
    output_dir: PathBuf,
}

/// Generates a synthetic city and writes `graph.txt`, `frames.txt` and
/// `dataset.manifest` into the output directory.
pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let spec = SynthSpec {
        nodes: args.nodes,
        edges: args.edges,
        supersegments: args.supersegments,
        frames: args.frames,
        missing: args.missing,
        resample_mask: args.resample_mask,
        per_cell_missing: args.per_cell_missing,
        unlabeled: args.unlabeled,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = args.out.resolve();
    let city = generate_synthetic_city(&spec, args.seed)?;
    create_dir(&dir)?;
    save_graph(dir.join("graph.txt"), &city.graph)?;
    save_frames(dir.join("frames.txt"), &city.frames)?;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("seed".to_string(), args.seed.to_string());
    let manifest = DatasetManifest {
        city: args.city.clone(),
        graph: "graph.txt".into(),
        frames: "frames.txt".into(),
        labels: vec![LabelKind::Congestion, LabelKind::Speed],
        stats: Some(fit_stats(&city.frames)?),
        extra,
    };
    save_manifest(dir.join("dataset.manifest"), &manifest)?;
    write_run_manifest(
        &dir,
        "synth",
        &SynthManifest {
            command: "synth",
            seed: args.seed,
            city: &args.city,
            nodes: spec.nodes,
            edges: spec.edges,
            supersegments: spec.supersegments,
            frames: spec.frames,
            missing: spec.missing,
            resample_mask: spec.resample_mask,
            per_cell_missing: spec.per_cell_missing,
            unlabeled: spec.unlabeled,
            output_dir: absolute(&dir),
        },
    )?;
    let mut out = String::new();
    let _ = writeln!(out, "nodes {}", city.graph.num_nodes());
    let _ = writeln!(out, "edges {}", city.graph.num_edges());
    let _ = writeln!(out, "supersegments {}", city.graph.num_supersegments());
    let _ = writeln!(out, "frames {}", city.frames.len());
    write_class_ratio(&mut out, &city.frames);
    let _ = writeln!(out, "wrote {}", dir.display());
    Ok(out)
}

/// Files produced by [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub manifest: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<RunRecord>,
    /// Fold-averaged predictions, 5-fold runs only.
    pub predictions: Option<PathBuf>,
}

impl TrainSummary {
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (rec, ckpt) in self.records.iter().zip(&self.checkpoints) {
            let name = rec
                .fold
                .map_or_else(|| "model".to_string(), |f| format!("fold {f}"));
            let last = rec.epochs.last().map_or(f64::NAN, |e| e.train);
            let _ = write!(out, "{name} train_loss {last}");
            if let Some(s) = rec.val_score {
                let _ = write!(out, " val_score {s}");
            }
            let _ = writeln!(out, " checkpoint {}", ckpt.display());
        }
        if let Some(p) = &self.predictions {
            let _ = writeln!(out, "predictions {}", p.display());
        }
        let _ = writeln!(out, "manifest {}", self.manifest.display());
        out
    }
}

/// Trains per `cfg`. Single runs write `model.ckpt` and `run.txt`; 5-fold
/// runs write `fold-<i>.ckpt`, `fold-<i>.run.txt` and the fold-averaged
/// `predictions.txt` for the test frames (or the training frames when none
/// are configured). The resolved config goes to `train.toml`, which can be
/// passed back as `--config` to repeat the run exactly.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (graph, frames) = load_data(&cfg.data)?;
    let test = cfg.test_frames.as_ref().map(load_frames).transpose()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;

    let mut recorded = cfg.clone();
    recorded.data = DataPaths {
        manifest: cfg.data.manifest.as_deref().map(absolute),
        graph: cfg.data.graph.as_deref().map(absolute),
        frames: cfg.data.frames.as_deref().map(absolute),
    };
    recorded.test_frames = cfg.test_frames.as_deref().map(absolute);
    recorded.output_dir = absolute(&dir);
    let manifest = dir.join("train.toml");
    write_text(&manifest, &recorded.to_layer().to_toml())?;

    let save = |model: &Model, mut rec: RunRecord, stem: &str| -> Result<(PathBuf, RunRecord)> {
        let name = format!("{stem}.ckpt");
        let path = dir.join(&name);
        to_checkpoint(model).save(&path)?;
        rec.checkpoints = vec![PathBuf::from(name)];
        let rec_name = if stem == "model" {
            "run.txt".to_string()
        } else {
            format!("{stem}.run.txt")
        };
        write_text(&dir.join(rec_name), &rec.to_text())?;
        Ok((path, rec))
    };

    let mut summary = TrainSummary {
        output_dir: dir.clone(),
        manifest,
        checkpoints: Vec::new(),
        records: Vec::new(),
        predictions: None,
    };
    if cfg.five_folds {
        let outcome = train_kfold(&cfg.model, &cfg.train, &graph, &frames, FOLDS, cfg.seed)?;
        for (i, (m, rec)) in outcome
            .models
            .iter()
            .zip(outcome.records.iter().cloned())
            .enumerate()
        {
            let (p, r) = save(m, rec, &format!("fold-{i}"))?;
            summary.checkpoints.push(p);
            summary.records.push(r);
        }
        let target: Vec<&CounterFrame> = match &test {
            Some(t) => t.iter().collect(),
            None => frames.iter().collect(),
        };
        for (i, f) in target.iter().enumerate() {
            f.validate(&graph)
                .map_err(|e| Error::Invalid(format!("test frame {i}: {e}")))?;
        }
        let preds = outcome.ensemble()?.predict(&target)?;
        let path = dir.join("predictions.txt");
        write_text(&path, &write_predictions(cfg.model.task, &target, &preds))?;
        summary.predictions = Some(path);
    } else {
        let outcome = train_run(&cfg.model, &cfg.train, &graph, &frames, cfg.seed)?;
        let (p, r) = save(&outcome.model, outcome.record, "model")?;
        summary.checkpoints.push(p);
        summary.records.push(r);
    }
    Ok(summary)
}

#[derive(Serialize)]
struct ModelsManifest {
    command: &'static str,
    checkpoints: Vec<PathBuf>,
    graph: PathBuf,
    frames: PathBuf,
    ensemble: bool,
    scores: Vec<f64>,
    weighting: &'static str,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
}

struct Loaded {
    ensemble: Ensemble,
    frames: Vec<CounterFrame>,
    manifest: ModelsManifest,
}

fn load_models(args: &ModelsArgs, command: &'static str) -> Result<Loaded> {
    if args.ensemble && args.scores.len() != args.checkpoints.len() {
        return Err(CliError::Usage(format!(
            "--scores has {} values for {} checkpoints",
            args.scores.len(),
            args.checkpoints.len()
        )));
    }
    let (graph_path, frames_path) = match resolve_data(&args.data.paths())? {
        (Some(g), Some(f)) => (g, f),
        _ => {
            return Err(CliError::Usage(
                "need --manifest, or --graph and --frames".into(),
            ))
        }
    };
    let graph = load_graph(&graph_path)?;
    let frames = load_frames(&frames_path)?;
    for (i, f) in frames.iter().enumerate() {
        f.validate(&graph)
            .map_err(|e| Error::Invalid(format!("{}: frame {i}: {e}", frames_path.display())))?;
    }
    let members: Vec<Model> = args
        .checkpoints
        .iter()
        .map(|p| {
            from_checkpoint(&Checkpoint::load(p)?, &graph)
                .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))
        })
        .collect::<std::result::Result<_, Error>>()?;
    let rule = match args.weighting {
        WeightingArg::Inverse => Weighting::Inverse,
        WeightingArg::Softmax => Weighting::Softmax {
            temperature: args.temperature,
        },
    };
    let ensemble = if args.ensemble {
        let w = ensemble_weights(&args.scores, rule, true)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ensemble::new(members, w)?
    } else {
        Ensemble::uniform(members)?
    };
    let manifest = ModelsManifest {
        command,
        checkpoints: args.checkpoints.iter().map(|p| absolute(p)).collect(),
        graph: absolute(&graph_path),
        frames: absolute(&frames_path),
        ensemble: args.ensemble,
        scores: args.scores.clone(),
        weighting: match args.weighting {
            WeightingArg::Inverse => "inverse",
            WeightingArg::Softmax => "softmax",
        },
        temperature: args.temperature,
        output: None,
    };
    Ok(Loaded {
        ensemble,
        frames,
        manifest,
    })
}

/// Writes predictions for every frame. Several checkpoints are averaged,
/// uniformly or by `--scores` with `--ensemble`.
pub fn cmd_predict(args: &PredictArgs) -> Result<String> {
    let mut loaded = load_models(&args.models, "predict")?;
    let dir = args.models.out.resolve();
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| dir.join("predictions.txt"));
    let frames: Vec<&CounterFrame> = loaded.frames.iter().collect();
    let preds = loaded.ensemble.predict(&frames)?;
    let task = loaded.ensemble.members[0].config.task;
    create_dir(&dir)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&output, &write_predictions(task, &frames, &preds))?;
    loaded.manifest.output = Some(absolute(&output));
    write_run_manifest(&dir, "predict", &loaded.manifest)?;
    let rows = preds.first().map_or(0, |p| p.rows());
    Ok(format!(
        "wrote {} frames x {rows} rows to {}\n",
        preds.len(),
        output.display()
    ))
}

/// Prints the headline score (weighted CE or MAE) and diagnostics.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let loaded = load_models(&args.models, "eval")?;
    let frames: Vec<&CounterFrame> = loaded.frames.iter().collect();
    let preds = loaded.ensemble.predict(&frames)?;
    let first = &loaded.ensemble.members[0];
    let metrics = evaluate(&preds, &frames, first.config.task, &first.class_weights)?;
    let dir = args.models.out.resolve();
    create_dir(&dir)?;
    write_run_manifest(&dir, "eval", &loaded.manifest)?;
    Ok(format!("score {}\n{}", metrics.score(), metrics.report()))
}

#[derive(Serialize)]
struct InspectManifest {
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    graph: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
}

/// Graph, frame and checkpoint statistics.
pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    let (graph_path, frames_path) = resolve_data(&args.data.paths())?;
    if graph_path.is_none() && frames_path.is_none() && args.checkpoint.is_none() {
        return Err(CliError::Usage(
            "nothing to inspect: give --manifest, --graph, --frames or --checkpoint".into(),
        ));
    }
    let mut out = String::new();
    if let Some(p) = &graph_path {
        let g = load_graph(p)?;
        let _ = writeln!(out, "nodes {}", g.num_nodes());
        let _ = writeln!(out, "edges {}", g.num_edges());
        let _ = writeln!(out, "supersegments {}", g.num_supersegments());
        let sizes: Vec<usize> = g.supersegments().iter().map(|s| s.edges.len()).collect();
        if let (Some(lo), Some(hi)) = (sizes.iter().min(), sizes.iter().max()) {
            let _ = writeln!(out, "supersegment_edges min {lo} max {hi}");
        }
    }
    if let Some(p) = &frames_path {
        let frames = load_frames(p)?;
        let _ = writeln!(out, "frames {}", frames.len());
        let cells: usize = frames.iter().map(|f| f.mask().len()).sum();
        let missing: f64 = frames
            .iter()
            .map(|f| f.mask().data().iter().filter(|&&m| m == 0.0).count() as f64)
            .sum();
        if cells > 0 {
            let _ = writeln!(out, "missing_cells {:.4}", missing / cells as f64);
        }
        let nodes: usize = frames.iter().map(CounterFrame::num_nodes).sum();
        let dark: usize = frames.iter().map(|f| f.missing_nodes().len()).sum();
        if nodes > 0 {
            let _ = writeln!(out, "missing_nodes {:.4}", dark as f64 / nodes as f64);
        }
        write_class_ratio(&mut out, &frames);
        let speeds: Vec<f64> = frames
            .iter()
            .flat_map(|f| f.speeds.iter().flatten().copied())
            .collect();
        if !speeds.is_empty() {
            let n = speeds.len() as f64;
            let mean = speeds.iter().sum::<f64>() / n;
            let std = (speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            let _ = writeln!(out, "speed mean {mean:.4} std {std:.4}");
        }
    }
    if let Some(p) = &args.checkpoint {
        let ckpt = Checkpoint::load(p)?;
        let params: usize = ckpt.tensors.iter().map(|(_, t)| t.len()).sum();
        let _ = writeln!(out, "checkpoint {}", p.display());
        let _ = writeln!(out, "tensors {} parameters {params}", ckpt.tensors.len());
        for (k, v) in ckpt.meta.iter().filter(|(k, _)| !k.starts_with("edge.")) {
            let _ = writeln!(out, "meta {k} {v}");
        }
    }
    let dir = args.out.resolve();
    create_dir(&dir)?;
    write_run_manifest(
        &dir,
        "inspect",
        &InspectManifest {
            command: "inspect",
            graph: graph_path.as_deref().map(absolute),
            frames: frames_path.as_deref().map(absolute),
            checkpoint: args.checkpoint.as_deref().map(absolute),
        },
    )?;
    Ok(out)
}
