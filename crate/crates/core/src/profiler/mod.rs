//! Cost analysis: an analytic FLOP model per pipeline stage, activated
//! patch statistics, dense-versus-sparse cost ratios and wall-clock
//! per-window latency.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs, softmax costs 5
//! FLOPs per element, layer normalization and GELU 8 per element, sigmoid
//! 5 per element, and element-wise additions 1. Biases are not counted.

mod latency;
mod report;

pub use latency::{latency_benchmark, LatencyStats};
pub use report::{report_csv, report_text, ProfileRow};

use crate::events::EventStream;
use crate::model::{ModelConfig, Task};
use crate::nn::FOURIER_BANDS;
use crate::tokenizer::{tokenize_stream, TokenizerConfig, TokenizerError};

/// FLOPs to process one window, split by stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    /// Embedding and self-attention over each modality's tokens.
    pub preprocessing: f64,
    /// Latent cross/self-attention and the memory update.
    pub backbone: f64,
    /// Classification or dense output head.
    pub head: f64,
    pub total: f64,
    /// Token count per modality (events first).
    pub tokens: Vec<f64>,
}

const SOFTMAX: f64 = 5.0;
const NORM: f64 = 8.0;
const GELU: f64 = 8.0;
const SIGMOID: f64 = 5.0;

fn linear(n: f64, din: usize, dout: usize) -> f64 {
    2.0 * n * din as f64 * dout as f64
}

fn attention(nq: f64, nkv: f64, d: usize, heads: usize) -> f64 {
    let d = d as f64;
    let projections = 2.0 * nq * d * d * 2.0 + 2.0 * nkv * d * d * 2.0;
    let scores = 2.0 * nq * nkv * d;
    let weighted = 2.0 * nq * nkv * d;
    projections + scores + weighted + SOFTMAX * heads as f64 * nq * nkv
}

/// Pre-norm attention block with a `D → 2D → D` feed-forward.
fn block(nq: f64, nkv: Option<f64>, d: usize, heads: usize) -> f64 {
    let df = d as f64;
    let norms = NORM * df * (nq + nq + nkv.unwrap_or(0.0));
    let attn = attention(nq, nkv.unwrap_or(nq), d, heads);
    let ff = linear(nq, d, 2 * d) + GELU * nq * 2.0 * df + linear(nq, 2 * d, d);
    norms + attn + ff + 2.0 * nq * df
}

fn encoder(n: f64, in_dim: usize, c: &ModelConfig) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let d = c.dim;
    let pos = 4 * FOURIER_BANDS;
    linear(n, in_dim, d)
        + GELU * n * d as f64
        + linear(n, d + pos, d)
        + c.n1 as f64 * block(n, None, d, c.heads_pre_dec)
}

/// Analytic per-window FLOPs for `tokens[0]` event tokens and, when the
/// model uses images, `tokens[1]` image tokens. A window without tokens
/// costs nothing before the head.
pub fn count_flops(config: &ModelConfig, tokens: &[f64]) -> FlopReport {
    let c = config;
    let (d, m) = (c.dim, c.latents as f64);
    let df = d as f64;
    let events = tokens.first().copied().unwrap_or(0.0);
    let images = if c.use_images {
        tokens.get(1).copied().unwrap_or(0.0)
    } else {
        0.0
    };
    let preprocessing =
        encoder(events, c.event_token_dim(), c) + encoder(images, c.image_token_dim(), c);
    let n = events + images;
    let backbone = if n == 0.0 {
        0.0
    } else {
        block(m, Some(n), d, c.heads)
            + c.n2 as f64 * block(m, None, d, c.heads)
            + m * df
            + NORM * m * df
    };
    let head = match c.task {
        Task::Classification { classes } => {
            c.n3 as f64 * block(m, None, d, c.heads)
                + linear(m, d, d)
                + GELU * m * df
                + linear(m, d, classes)
                + m * classes as f64
        }
        Task::Depth => {
            let cells = c.cells() as f64;
            let p2 = c.patch_size * c.patch_size;
            let fuse = if c.use_images {
                NORM * cells * df + 3.0 * cells * df
            } else {
                0.0
            };
            let scatter_adds = (events + images) * df * c.n1 as f64;
            fuse + linear(cells, 4 * FOURIER_BANDS, d)
                + cells * df
                + block(cells, Some(m), d, c.heads_pre_dec)
                + c.n1 as f64 * block(cells, None, d, c.heads_pre_dec)
                + scatter_adds
                + NORM * cells * df
                + linear(cells, d, p2)
                + SIGMOID * cells * p2 as f64
        }
    };
    FlopReport {
        preprocessing,
        backbone,
        head,
        total: preprocessing + backbone + head,
        tokens: vec![events, images],
    }
}

/// Cost of a dense model that tokenizes every patch over the cost at the
/// given token counts.
pub fn dense_sparse_ratio(config: &ModelConfig, tokens: &[f64]) -> f64 {
    let all = config.cells() as f64;
    let dense: Vec<f64> = tokens.iter().map(|_| all).collect();
    count_flops(config, &dense).total / count_flops(config, tokens).total
}

/// Activated patches per window of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityStats {
    pub per_window: Vec<usize>,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// `|P|`.
    pub total_patches: usize,
    /// `mean / |P|`.
    pub activation_ratio: f64,
}

impl SparsityStats {
    pub fn from_counts(per_window: Vec<usize>, total_patches: usize) -> Self {
        let n = per_window.len();
        let mean = if n == 0 {
            0.0
        } else {
            per_window.iter().sum::<usize>() as f64 / n as f64
        };
        Self {
            min: per_window.iter().copied().min().unwrap_or(0),
            max: per_window.iter().copied().max().unwrap_or(0),
            mean,
            total_patches,
            activation_ratio: if total_patches == 0 {
                0.0
            } else {
                mean / total_patches as f64
            },
            per_window,
        }
    }
}

/// Tokenizes the whole stream (windows from time 0 through the last
/// event) and records `|T|` per window.
pub fn sparsity_stats(
    stream: &EventStream,
    config: &TokenizerConfig,
) -> Result<SparsityStats, TokenizerError> {
    config.validate()?;
    let counts = match stream.last_time() {
        None => Vec::new(),
        Some(last) => {
            let stop = (last / config.window_us + 1) * config.window_us;
            tokenize_stream(stream, config, 0, stop)?
                .iter()
                .map(|t| t.len())
                .collect()
        }
    };
    Ok(SparsityStats::from_counts(counts, config.total_patches()))
}
