use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::events::{DepthMap, EventStream};
use crate::model::{window_inputs, WindowInputs};
use crate::objectives::{normalize_depth_map, DepthLossConfig};
use crate::tokenizer::TokenizerConfig;

use super::TrainError;

/// A labelled event stream.
#[derive(Debug, Clone)]
pub struct ClfExample {
    pub stream: EventStream,
    pub label: usize,
}

/// Streams tokenized over the same time span `[t_start, t_stop)`.
#[derive(Debug, Clone)]
pub struct ClfDataset {
    pub tokenizer: TokenizerConfig,
    pub t_start: i64,
    pub t_stop: i64,
    pub examples: Vec<ClfExample>,
}

impl ClfDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Unaugmented windows of example `i`.
    pub fn windows(&self, i: usize) -> Result<Vec<WindowInputs>, TrainError> {
        Ok(window_inputs(
            &self.examples[i].stream,
            &self.tokenizer,
            self.t_start,
            self.t_stop,
            false,
        )?)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Self {
        Self {
            tokenizer: self.tokenizer.clone(),
            t_start: self.t_start,
            t_stop: self.t_stop,
            examples: Vec::new(),
        }
    }
}

/// One depth map with the tokenized history that precedes it.
#[derive(Debug, Clone)]
pub struct DepthExample {
    pub windows: Vec<WindowInputs>,
    /// Ground truth in meters; invalid pixels are NaN.
    pub depth: Vec<f32>,
    /// Normalized log depth (NaN where invalid).
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DepthDataset {
    pub height: usize,
    pub width: usize,
    pub examples: Vec<DepthExample>,
}

impl DepthDataset {
    /// One example per depth map with at least `history_us` of stream
    /// before it. The history is cut into whole windows ending exactly at
    /// the map's timestamp and tokenized from an empty FIFO grid.
    pub fn from_streams(
        streams: &[EventStream],
        tokenizer: &TokenizerConfig,
        history_us: i64,
        with_images: bool,
        loss: &DepthLossConfig,
    ) -> Result<Self, TrainError> {
        tokenizer
            .validate()
            .map_err(crate::model::ModelError::from)?;
        let geo = tokenizer.geometry;
        let n_windows = history_us / tokenizer.window_us;
        if n_windows == 0 {
            return Err(TrainError::Config(format!(
                "history {history_us} us is shorter than one {} us window",
                tokenizer.window_us
            )));
        }
        let span = n_windows * tokenizer.window_us;
        let mut examples = Vec::new();
        for s in streams {
            if s.geometry != geo {
                return Err(TrainError::Config(
                    "stream geometry differs from the tokenizer's".into(),
                ));
            }
            for map in s.depth_maps.iter().filter(|m| m.timestamp >= span) {
                let windows = window_inputs(
                    s,
                    tokenizer,
                    map.timestamp - span,
                    map.timestamp,
                    with_images,
                )?;
                let target = normalize_depth_map(&map.values, loss)?;
                let mask = map.valid_mask();
                if !mask.iter().any(|&m| m) {
                    continue;
                }
                examples.push(DepthExample {
                    windows,
                    depth: map.values.clone(),
                    target,
                    mask,
                });
            }
        }
        Ok(Self {
            height: geo.height as usize,
            width: geo.width as usize,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Mean of all valid ground-truth depths, in meters.
    pub fn mean_depth(&self) -> Option<f64> {
        let (sum, n) = self
            .examples
            .iter()
            .flat_map(|e| e.depth.iter())
            .filter(|&&d| DepthMap::is_valid(d))
            .fold((0.0, 0usize), |(s, n), &d| (s + d as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Deterministic shuffle-and-split of `0..n`: the first `round(n ·
/// val_fraction)` shuffled indices form the validation part.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction.clamp(0.0, 1.0)).round() as usize).min(n);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
