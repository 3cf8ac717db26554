//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use evtplus::events::SensorGeometry;
use evtplus::model::ModelConfig;
use evtplus::objectives::DepthLossConfig;
use evtplus::tokenizer::TokenizerConfig;
use evtplus::trainer::{AdamWConfig, AugmentConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Clf,
    Depth,
}

#[derive(Clone, Copy)]
enum Kind {
    Int,
    Float,
    Bool,
}

struct Key {
    name: &'static str,
    kind: Kind,
    /// Default, or `None` when it depends on the task.
    default: Option<&'static str>,
    clf: &'static str,
    depth: &'static str,
    help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default: Some(default),
        clf: "",
        depth: "",
        help,
    }
}

const fn per_task(
    name: &'static str,
    kind: Kind,
    clf: &'static str,
    depth: &'static str,
    help: &'static str,
) -> Key {
    Key {
        name,
        kind,
        default: None,
        clf,
        depth,
        help,
    }
}

use Kind::{Bool, Float, Int};

const KEYS: &[Key] = &[
    key(
        "seed",
        Int,
        "0",
        "seed for data generation, initialization, splitting and augmentation",
    ),
    key("classes", Int, "4", "gesture classes (at most 4)"),
    key(
        "height",
        Int,
        "128",
        "sensor height for generated data and data-free profiling",
    ),
    key(
        "width",
        Int,
        "128",
        "sensor width for generated data and data-free profiling",
    ),
    per_task(
        "duration_us",
        Int,
        "300000",
        "4000000",
        "length of each generated recording",
    ),
    key("rate_hz", Float, "2.0", "gesture cycles per second"),
    key(
        "image_rate_hz",
        Float,
        "40.0",
        "grayscale frame rate of depth scenes",
    ),
    key(
        "depth_rate_hz",
        Float,
        "20.0",
        "ground-truth depth rate of depth scenes",
    ),
    key(
        "invalid_fraction",
        Float,
        "0.3",
        "fraction of invalid depth pixels",
    ),
    key(
        "camera_speed",
        Float,
        "4.0",
        "camera speed in depth scenes (m/s)",
    ),
    key(
        "scene_min_depth",
        Float,
        "2.0",
        "nearest plane in depth scenes (m)",
    ),
    key(
        "scene_max_depth",
        Float,
        "20.0",
        "farthest plane in depth scenes (m)",
    ),
    per_task("window_us", Int, "24000", "50000", "time-window length"),
    key(
        "fifo_depth",
        Int,
        "3",
        "timestamps kept per pixel and polarity",
    ),
    key(
        "max_lookback_us",
        Int,
        "256000",
        "age at which a timestamp's recency reaches zero",
    ),
    per_task("patch_size", Int, "10", "12", "patch side in pixels"),
    key(
        "activation_pct",
        Float,
        "7.5",
        "percent of patch pixels with events needed to activate it",
    ),
    key("dim", Int, "160", "token and latent width"),
    key("latents", Int, "32", "latent memory vectors"),
    per_task(
        "n1",
        Int,
        "1",
        "2",
        "pre-processing (and dense decoder) self-attention layers",
    ),
    key("n2", Int, "1", "backbone self-attention layers"),
    key("n3", Int, "1", "classification head self-attention layers"),
    key(
        "heads",
        Int,
        "8",
        "attention heads in backbone and classifier",
    ),
    per_task(
        "heads_pre_dec",
        Int,
        "8",
        "4",
        "attention heads in pre-processing and dense decoder",
    ),
    key("dropout", Float, "0.1", "residual dropout during training"),
    key(
        "use_images",
        Bool,
        "false",
        "add grayscale frames as a second modality (depth)",
    ),
    key("epochs", Int, "10", "training epochs"),
    key(
        "batch_size",
        Int,
        "8",
        "samples per optimizer step (before repetition)",
    ),
    key("lr", Float, "0.0003", "learning rate"),
    key("beta1", Float, "0.9", "first-moment decay"),
    key("beta2", Float, "0.999", "second-moment decay"),
    key("adam_eps", Float, "1e-8", "optimizer epsilon"),
    key("weight_decay", Float, "0.0001", "decoupled weight decay"),
    key("clip_norm", Float, "1.0", "global gradient norm limit"),
    key(
        "label_smoothing",
        Float,
        "0.1",
        "classification label smoothing",
    ),
    key(
        "spatial_crop",
        Float,
        "0.2",
        "largest fraction of each side removed by spatial cropping (clf)",
    ),
    key(
        "temporal_crop",
        Float,
        "0.25",
        "largest fraction of windows removed by temporal cropping (clf)",
    ),
    key(
        "drop_token",
        Float,
        "0.1",
        "probability of dropping each token during training",
    ),
    key(
        "repetitions",
        Int,
        "2",
        "augmented copies of each sample per batch",
    ),
    key(
        "val_fraction",
        Float,
        "0.2",
        "share of the data held out for validation",
    ),
    key(
        "min_depth",
        Float,
        "2.0",
        "smallest depth of the log-depth normalization (m)",
    ),
    key(
        "max_depth",
        Float,
        "80.0",
        "largest depth of the log-depth normalization (m)",
    ),
    key(
        "msi_weight",
        Float,
        "0.25",
        "weight of the multi-scale gradient loss",
    ),
    key(
        "level_weight",
        Float,
        "0.5",
        "weight of the squared mean log-depth residual",
    ),
    key(
        "msi_scales",
        Int,
        "4",
        "scales of the multi-scale gradient loss",
    ),
    key(
        "history_us",
        Int,
        "512000",
        "history before each depth map used as input",
    ),
    key(
        "profile_tokens",
        Float,
        "18",
        "event tokens per window when profiling without data",
    ),
    key(
        "latency_warmup",
        Int,
        "1",
        "untimed passes before latency measurement",
    ),
    key(
        "latency_reps",
        Int,
        "3",
        "timed passes for latency measurement",
    ),
    key(
        "gc_threshold",
        Float,
        "1e-3",
        "largest accepted relative gradient error",
    ),
    key(
        "gc_samples",
        Int,
        "24",
        "entries checked per parameter tensor",
    ),
];

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut s =
        String::from("Configuration keys (`key = value` lines in --config, or --set key=value):\n");
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    for k in KEYS {
        let default = match k.default {
            Some(d) => d.to_string(),
            None => format!("{} (clf) / {} (depth)", k.clf, k.depth),
        };
        let _ = writeln!(s, "  {:<width$}  default {default}: {}", k.name, k.help);
    }
    s
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    task: TaskKind,
    values: BTreeMap<&'static str, String>,
}

fn check(k: &Key, v: &str) -> Result<(), CliError> {
    let ok = match k.kind {
        Int => v.parse::<i64>().is_ok(),
        Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Bool => v.parse::<bool>().is_ok(),
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("bad value `{v}` for `{}`", k.name)))
    }
}

impl RunConfig {
    /// Defaults for `task`, then the file (if any), then `overrides`.
    pub fn load(
        task: TaskKind,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut cfg = Self {
            task,
            values: BTreeMap::new(),
        };
        for k in KEYS {
            let v = k.default.unwrap_or(if task == TaskKind::Clf {
                k.clf
            } else {
                k.depth
            });
            cfg.values.insert(k.name, v.to_string());
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_line(o)?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.apply_line(line)?;
            }
        }
        Ok(())
    }

    fn apply_line(&mut self, line: &str) -> Result<(), CliError> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let def = KEYS
            .iter()
            .find(|d| d.name == k)
            .ok_or_else(|| CliError::Usage(format!("unknown key `{k}`")))?;
        check(def, v)?;
        self.values.insert(def.name, v.to_string());
        Ok(())
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    /// Every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn raw(&self, k: &str) -> &str {
        self.values
            .get(k)
            .unwrap_or_else(|| panic!("unregistered key `{k}`"))
    }

    pub fn int(&self, k: &str) -> i64 {
        self.raw(k).parse().expect("validated on load")
    }

    pub fn usize(&self, k: &str) -> Result<usize, CliError> {
        usize::try_from(self.int(k))
            .map_err(|_| CliError::Usage(format!("`{k}` must be non-negative")))
    }

    pub fn float(&self, k: &str) -> f64 {
        self.raw(k).parse().expect("validated on load")
    }

    pub fn flag(&self, k: &str) -> bool {
        self.raw(k).parse().expect("validated on load")
    }

    pub fn geometry(&self) -> Result<SensorGeometry, CliError> {
        let side = |k: &str| {
            u16::try_from(self.int(k)).map_err(|_| CliError::Usage(format!("`{k}` out of range")))
        };
        Ok(SensorGeometry::new(side("height")?, side("width")?))
    }

    pub fn tokenizer(&self, geometry: SensorGeometry) -> Result<TokenizerConfig, CliError> {
        let t = TokenizerConfig {
            window_us: self.int("window_us"),
            fifo_depth: self.usize("fifo_depth")?,
            max_lookback_us: self.int("max_lookback_us"),
            patch_size: self.usize("patch_size")?,
            activation_pct: self.float("activation_pct"),
            geometry,
        };
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    pub fn model(
        &self,
        tokenizer: &TokenizerConfig,
        classes: usize,
    ) -> Result<ModelConfig, CliError> {
        let base = match self.task {
            TaskKind::Clf => ModelConfig::classification(tokenizer, classes),
            TaskKind::Depth => ModelConfig::depth(tokenizer, self.flag("use_images")),
        };
        let c = ModelConfig {
            dim: self.usize("dim")?,
            latents: self.usize("latents")?,
            n1: self.usize("n1")?,
            n2: self.usize("n2")?,
            n3: self.usize("n3")?,
            heads: self.usize("heads")?,
            heads_pre_dec: self.usize("heads_pre_dec")?,
            dropout: self.float("dropout"),
            ..base
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn depth_loss(&self) -> Result<DepthLossConfig, CliError> {
        let c = DepthLossConfig {
            min_depth: self.float("min_depth"),
            max_depth: self.float("max_depth"),
            lambda: self.float("msi_weight"),
            scales: self.usize("msi_scales")?,
            level_weight: self.float("level_weight"),
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let c = TrainConfig {
            epochs: self.usize("epochs")?,
            batch_size: self.usize("batch_size")?,
            optimizer: AdamWConfig {
                lr: self.float("lr"),
                beta1: self.float("beta1"),
                beta2: self.float("beta2"),
                eps: self.float("adam_eps"),
                weight_decay: self.float("weight_decay"),
            },
            clip_norm: self.float("clip_norm"),
            label_smoothing: self.float("label_smoothing"),
            depth_loss: self.depth_loss()?,
            augment: AugmentConfig {
                spatial_crop: self.float("spatial_crop"),
                temporal_crop: self.float("temporal_crop"),
                dropout: self.float("dropout"),
                drop_token: self.float("drop_token"),
                repetitions: self.usize("repetitions")?,
            },
            seed: self.int("seed") as u64,
            dump_path: None,
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}
