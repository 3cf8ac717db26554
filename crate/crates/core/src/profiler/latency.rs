use std::time::{Duration, Instant};

use crate::events::{slice_windows, EventStream};
use crate::model::{Model, ModelError, Task};
use crate::nn::{ForwardCtx, Tape, Tensor};
use crate::tokenizer::{tokenize_window, FifoGrid, TokenizerConfig};

use crate::model::WindowInputs;

/// Per-window wall-clock statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    /// Every timed window, in order of measurement.
    pub samples: Vec<Duration>,
    pub mean: Duration,
    pub median: Duration,
    pub p95: Duration,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<Duration>) -> Self {
        if samples.is_empty() {
            return Self {
                samples,
                mean: Duration::ZERO,
                median: Duration::ZERO,
                p95: Duration::ZERO,
            };
        }
        let mut sorted = samples.clone();
        sorted.sort_unstable();
        let pick =
            |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        let mean = samples.iter().sum::<Duration>() / samples.len() as u32;
        Self {
            mean,
            median: pick(0.5),
            p95: pick(0.95),
            samples,
        }
    }
}

fn run_window(
    model: &Model,
    memory: &mut Tensor,
    grid: &mut FifoGrid,
    window: &crate::events::Window<'_>,
    tokenizer: &TokenizerConfig,
) -> Result<(), ModelError> {
    let inputs = WindowInputs {
        events: tokenize_window(grid, window, tokenizer)?,
        image: None,
    };
    let mut tape = Tape::new(&model.params);
    let mut ctx = ForwardCtx::inference();
    let m = tape.constant(memory.clone());
    let (m, states) = model.step(&mut tape, &mut ctx, m, &inputs)?;
    let out = match model.config.task {
        Task::Classification { .. } => model.classify(&mut tape, &mut ctx, m)?,
        Task::Depth => {
            let (g, _) = model.densify(&mut tape, &states)?;
            model.dense_decode(&mut tape, &mut ctx, g, m, &states)?
        }
    };
    std::hint::black_box(tape.value(out));
    *memory = tape.value(m).clone();
    Ok(())
}

/// Times online inference on the current thread: for every window, event
/// tokenization, the memory update and the output head. The stream is
/// replayed `warmup` times untimed, then `repetitions` times timed.
pub fn latency_benchmark(
    model: &Model,
    stream: &EventStream,
    tokenizer: &TokenizerConfig,
    warmup: usize,
    repetitions: usize,
) -> Result<LatencyStats, ModelError> {
    tokenizer.validate()?;
    let stop = stream
        .last_time()
        .map_or(0, |t| (t / tokenizer.window_us + 1) * tokenizer.window_us);
    let windows = slice_windows(stream, tokenizer.window_us, 0, stop);
    let mut samples = Vec::with_capacity(windows.len() * repetitions);
    for pass in 0..warmup + repetitions {
        let mut grid = FifoGrid::new(tokenizer);
        let mut memory = model.params.get(model.memory_init).clone();
        for w in &windows {
            let start = Instant::now();
            run_window(model, &mut memory, &mut grid, w, tokenizer)?;
            if pass >= warmup {
                samples.push(start.elapsed());
            }
        }
    }
    Ok(LatencyStats::from_samples(samples))
}
