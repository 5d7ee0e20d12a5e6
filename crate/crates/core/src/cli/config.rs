//! Run configuration: a TOML file layered under command-line flags and
//! environment variables, resolved against per-task defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::heads::ClassWeights;
use crate::model::{ModelConfig, Task, Toggles};
use crate::train::TrainConfig;
use crate::tvae::ReconLayout;

/// Fold count used when `five_folds` is on.
pub const FOLDS: usize = 5;
/// Default `k` for last-k parameter averaging.
pub const DEFAULT_AVERAGE_K: usize = 10;
/// Output directory when neither a flag, the environment nor the file names one.
pub const DEFAULT_OUT_DIR: &str = "roadcast-out";

/// Toggle names accepted by `--enable` / `--disable` and the `[toggles]` table.
pub const TOGGLE_NAMES: [&str; 8] = [
    "global_normalization",
    "dropout",
    "noise",
    "week",
    "time",
    "five_folds",
    "average",
    "segment_conv",
];

/// One configuration layer. Every field is optional so layers can be merged;
/// a fully resolved config serializes to the same shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: PathsLayer,
    #[serde(default)]
    pub model: ModelLayer,
    #[serde(default)]
    pub training: TrainingLayer,
    #[serde(default)]
    pub toggles: TogglesLayer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsLayer {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
    /// Frames scored by the fold ensemble after training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_frames: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLayer {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvae_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvae_latent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingLayer {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TogglesLayer {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_normalization: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub week: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub five_folds: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_conv: Option<bool>,
}

impl TogglesLayer {
    fn slot(&mut self, name: &str) -> Option<&mut Option<bool>> {
        Some(match name {
            "global_normalization" => &mut self.global_normalization,
            "dropout" => &mut self.dropout,
            "noise" => &mut self.noise,
            "week" => &mut self.week,
            "time" => &mut self.time,
            "five_folds" => &mut self.five_folds,
            "average" => &mut self.average,
            "segment_conv" => &mut self.segment_conv,
            _ => return None,
        })
    }

    /// Sets a toggle by name.
    pub fn set(&mut self, name: &str, on: bool) -> Result<(), CliError> {
        let slot = self.slot(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown toggle `{name}`; expected one of {}",
                TOGGLE_NAMES.join(", ")
            ))
        })?;
        *slot = Some(on);
        Ok(())
    }
}

/// Later layers win field by field.
fn pick<T: Clone>(layers: &[&Option<T>]) -> Option<T> {
    layers.iter().rev().find_map(|l| (*l).clone())
}

impl RunConfigFile {
    /// Parses TOML, reporting the line of the first problem.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].lines().count().max(1)
            });
            CliError::Usage(format!("{origin}:{line}: {}", e.message()))
        })
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.manifest,
            &mut p.graph,
            &mut p.frames,
            &mut p.test_frames,
            &mut p.output_dir,
        ] {
            if let Some(rel) = slot.as_mut() {
                if rel.is_relative() {
                    *rel = base.join(&*rel);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// `self` overridden by `top` wherever `top` sets a field.
    pub fn merged(&self, top: &RunConfigFile) -> RunConfigFile {
        let (a, b) = (self, top);
        RunConfigFile {
            task: pick(&[&a.task, &b.task]),
            seed: pick(&[&a.seed, &b.seed]),
            paths: PathsLayer {
                manifest: pick(&[&a.paths.manifest, &b.paths.manifest]),
                graph: pick(&[&a.paths.graph, &b.paths.graph]),
                frames: pick(&[&a.paths.frames, &b.paths.frames]),
                test_frames: pick(&[&a.paths.test_frames, &b.paths.test_frames]),
                output_dir: pick(&[&a.paths.output_dir, &b.paths.output_dir]),
            },
            model: ModelLayer {
                dim: pick(&[&a.model.dim, &b.model.dim]),
                heads: pick(&[&a.model.heads, &b.model.heads]),
                tvae_hidden: pick(&[&a.model.tvae_hidden, &b.model.tvae_hidden]),
                tvae_latent: pick(&[&a.model.tvae_latent, &b.model.tvae_latent]),
                hidden: pick(&[&a.model.hidden, &b.model.hidden]),
                beta: pick(&[&a.model.beta, &b.model.beta]),
                layout: pick(&[&a.model.layout, &b.model.layout]),
            },
            training: TrainingLayer {
                lr: pick(&[&a.training.lr, &b.training.lr]),
                weight_decay: pick(&[&a.training.weight_decay, &b.training.weight_decay]),
                epochs: pick(&[&a.training.epochs, &b.training.epochs]),
                batch_size: pick(&[&a.training.batch_size, &b.training.batch_size]),
                val_fraction: pick(&[&a.training.val_fraction, &b.training.val_fraction]),
                class_weights: pick(&[&a.training.class_weights, &b.training.class_weights]),
            },
            toggles: TogglesLayer {
                global_normalization: pick(&[
                    &a.toggles.global_normalization,
                    &b.toggles.global_normalization,
                ]),
                dropout: pick(&[&a.toggles.dropout, &b.toggles.dropout]),
                noise: pick(&[&a.toggles.noise, &b.toggles.noise]),
                week: pick(&[&a.toggles.week, &b.toggles.week]),
                time: pick(&[&a.toggles.time, &b.toggles.time]),
                five_folds: pick(&[&a.toggles.five_folds, &b.toggles.five_folds]),
                average: pick(&[&a.toggles.average, &b.toggles.average]),
                average_k: pick(&[&a.toggles.average_k, &b.toggles.average_k]),
                segment_conv: pick(&[&a.toggles.segment_conv, &b.toggles.segment_conv]),
            },
        }
    }
}

/// Where the training data lives.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub manifest: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub frames: Option<PathBuf>,
}

/// Fully resolved settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub test_frames: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub five_folds: bool,
    /// `k` kept even when averaging is off, so the manifest records it.
    pub average_k: usize,
}

impl RunConfig {
    /// Defaults for `task`: the core recipe for congestion, the extended one
    /// (lower rate, last-10 averaging) for speed.
    pub fn defaults(task: Task) -> Self {
        let train = match task {
            Task::Congestion => TrainConfig::core(),
            Task::Speed => TrainConfig::extended(),
        };
        Self {
            seed: 0,
            data: DataPaths {
                manifest: None,
                graph: None,
                frames: None,
            },
            test_frames: None,
            output_dir: PathBuf::from(DEFAULT_OUT_DIR),
            model: ModelConfig {
                task,
                ..ModelConfig::default()
            },
            average_k: train.average_k.unwrap_or(DEFAULT_AVERAGE_K),
            train,
            five_folds: false,
        }
    }

    /// Applies `layer` over the task defaults and validates the result.
    pub fn resolve(layer: &RunConfigFile) -> Result<Self, CliError> {
        let task: Task = match &layer.task {
            Some(t) => t
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown task `{t}`")))?,
            None => Task::Congestion,
        };
        let mut c = Self::defaults(task);
        if let Some(s) = layer.seed {
            c.seed = s;
        }
        let p = &layer.paths;
        c.data = DataPaths {
            manifest: p.manifest.clone(),
            graph: p.graph.clone(),
            frames: p.frames.clone(),
        };
        c.test_frames = p.test_frames.clone();
        if let Some(o) = &p.output_dir {
            c.output_dir = o.clone();
        }

        let m = &layer.model;
        let mc = &mut c.model;
        mc.dim = m.dim.unwrap_or(mc.dim);
        mc.gat_heads = m.heads.unwrap_or(mc.gat_heads);
        mc.tvae_hidden = m.tvae_hidden.unwrap_or(mc.tvae_hidden);
        mc.tvae_latent = m.tvae_latent.unwrap_or(mc.tvae_latent);
        if let Some([a, b]) = m.hidden {
            mc.hidden = (a, b);
        }
        mc.beta = m.beta.unwrap_or(mc.beta);
        if let Some(l) = &m.layout {
            mc.layout = ReconLayout::parse(l).map_err(|e| CliError::Usage(e.to_string()))?;
        }

        let t = &layer.training;
        let tc = &mut c.train;
        tc.lr = t.lr.unwrap_or(tc.lr);
        tc.weight_decay = t.weight_decay.unwrap_or(tc.weight_decay);
        tc.epochs = t.epochs.unwrap_or(tc.epochs);
        tc.batch_size = t.batch_size.unwrap_or(tc.batch_size);
        tc.val_fraction = t.val_fraction.unwrap_or(tc.val_fraction);
        if let Some(w) = t.class_weights {
            tc.class_weights =
                Some(ClassWeights::new(w).map_err(|e| CliError::Usage(e.to_string()))?);
        }

        let g = &layer.toggles;
        let tg = &mut mc.toggles;
        tg.global_normalization = g.global_normalization.unwrap_or(tg.global_normalization);
        tg.dropout = g.dropout.unwrap_or(tg.dropout);
        tg.noise = g.noise.unwrap_or(tg.noise);
        tg.week = g.week.unwrap_or(tg.week);
        tg.time = g.time.unwrap_or(tg.time);
        tg.segment_conv = g.segment_conv.unwrap_or(tg.segment_conv);
        c.five_folds = g.five_folds.unwrap_or(c.five_folds);
        c.average_k = g.average_k.unwrap_or(c.average_k);
        let average = g.average.unwrap_or(tc.average_k.is_some());
        tc.average_k = average.then_some(c.average_k);

        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!(
                "seed must be at most {}",
                i64::MAX
            )));
        }
        if self.average_k == 0 {
            return Err(CliError::Usage("average_k must be positive".into()));
        }
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// The layer that resolves back to `self`; written as the run manifest.
    pub fn to_layer(&self) -> RunConfigFile {
        let m = &self.model;
        let t = &self.train;
        let g = m.toggles;
        RunConfigFile {
            task: Some(m.task.to_string()),
            seed: Some(self.seed),
            paths: PathsLayer {
                manifest: self.data.manifest.clone(),
                graph: self.data.graph.clone(),
                frames: self.data.frames.clone(),
                test_frames: self.test_frames.clone(),
                output_dir: Some(self.output_dir.clone()),
            },
            model: ModelLayer {
                dim: Some(m.dim),
                heads: Some(m.gat_heads),
                tvae_hidden: Some(m.tvae_hidden),
                tvae_latent: Some(m.tvae_latent),
                hidden: Some([m.hidden.0, m.hidden.1]),
                beta: Some(m.beta),
                layout: Some(m.layout.name().to_string()),
            },
            training: TrainingLayer {
                lr: Some(t.lr),
                weight_decay: Some(t.weight_decay),
                epochs: Some(t.epochs),
                batch_size: Some(t.batch_size),
                val_fraction: Some(t.val_fraction),
                class_weights: t.class_weights.map(|w| w.0),
            },
            toggles: TogglesLayer {
                global_normalization: Some(g.global_normalization),
                dropout: Some(g.dropout),
                noise: Some(g.noise),
                week: Some(g.week),
                time: Some(g.time),
                five_folds: Some(self.five_folds),
                average: Some(t.average_k.is_some()),
                average_k: Some(self.average_k),
                segment_conv: Some(g.segment_conv),
            },
        }
    }

    /// Toggle state in `--enable`/`--disable` naming.
    pub fn toggles(&self) -> Vec<(&'static str, bool)> {
        let Toggles {
            global_normalization,
            dropout,
            noise,
            week,
            time,
            segment_conv,
        } = self.model.toggles;
        vec![
            ("global_normalization", global_normalization),
            ("dropout", dropout),
            ("noise", noise),
            ("week", week),
            ("time", time),
            ("five_folds", self.five_folds),
            ("average", self.train.average_k.is_some()),
            ("segment_conv", segment_conv),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
task = "speed"
seed = 11

[paths]
graph = "g.txt"
frames = "f.txt"

[model]
dim = 8
hidden = [16, 8]

[training]
epochs = 12
lr = 0.0005

[toggles]
five_folds = true
average_k = 4
"#;

    #[test]
    fn file_values_override_task_defaults() {
        let c = RunConfig::resolve(&RunConfigFile::parse(SAMPLE, "sample").unwrap()).unwrap();
        assert_eq!(c.model.task, Task::Speed);
        assert_eq!(c.seed, 11);
        assert_eq!(c.model.dim, 8);
        assert_eq!(c.model.hidden, (16, 8));
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.train.lr, 0.0005);
        // speed defaults to averaging; k comes from the file
        assert_eq!(c.train.average_k, Some(4));
        assert!(c.five_folds);
        assert_eq!(c.train.weight_decay, 1e-3);
    }

    #[test]
    fn defaults_per_task() {
        let c = RunConfig::resolve(&RunConfigFile::default()).unwrap();
        assert_eq!(c.train, TrainConfig::core());
        assert_eq!(c.model, ModelConfig::default());
        assert!(!c.five_folds);
        let s = RunConfig::resolve(&RunConfigFile {
            task: Some("speed".into()),
            ..RunConfigFile::default()
        })
        .unwrap();
        assert_eq!(s.train, TrainConfig::extended());
    }

    #[test]
    fn later_layer_wins() {
        let file = RunConfigFile::parse(SAMPLE, "sample").unwrap();
        let mut flags = RunConfigFile::default();
        flags.training.epochs = Some(30);
        flags.toggles.set("five_folds", false).unwrap();
        let c = RunConfig::resolve(&file.merged(&flags)).unwrap();
        assert_eq!(c.train.epochs, 30);
        assert!(!c.five_folds);
        assert_eq!(c.model.dim, 8);
        assert!(flags.toggles.set("bogus", true).is_err());
    }

    #[test]
    fn rejects_average_longer_than_run() {
        let mut l = RunConfigFile::default();
        l.training.epochs = Some(5);
        l.toggles.average = Some(true);
        l.toggles.average_k = Some(10);
        let err = RunConfig::resolve(&l).unwrap_err();
        assert!(err.to_string().contains("at least 10 epochs"), "{err}");
        assert_eq!(err.exit_code(), 1);
        // the same k is fine with averaging off
        l.toggles.average = Some(false);
        RunConfig::resolve(&l).unwrap();
    }

    #[test]
    fn parse_errors_are_located() {
        let err = RunConfigFile::parse("seed = 1\n[model]\ndim = \"x\"\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().starts_with("cfg.toml:3:"), "{err}");
        let err = RunConfigFile::parse("sed = 1\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("cfg.toml:1:"), "{err}");
        assert!(
            RunConfigFile::parse("[model]\nlayout = \"diagonal\"\n", "c")
                .and_then(|l| RunConfig::resolve(&l))
                .is_err()
        );
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut l = RunConfigFile::parse(SAMPLE, "sample").unwrap();
        l.training.class_weights = Some([2.0, 1.5, 0.25]);
        l.model.beta = Some(0.1 + 0.2);
        let c = RunConfig::resolve(&l).unwrap();
        let text = c.to_layer().to_toml();
        let back = RunConfig::resolve(&RunConfigFile::parse(&text, "manifest").unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.beta.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn oversized_seed_is_rejected() {
        let l = RunConfigFile {
            seed: Some(u64::MAX),
            ..RunConfigFile::default()
        };
        assert!(RunConfig::resolve(&l).is_err());
    }
}
