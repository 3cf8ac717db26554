use crate::events::{slice_windows, EventStream, GrayscaleFrame, Window};
use crate::nn::{ForwardCtx, Tape, Tensor};
use crate::tokenizer::{tokenize_image, tokenize_window, FifoGrid, TokenSet, TokenizerConfig};

use super::{Model, ModelError};

/// Tokens available to the model in one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInputs {
    pub events: TokenSet,
    pub image: Option<TokenSet>,
}

/// For each window, the index of the image with the latest timestamp in
/// `[t_i, t_e)`, if any.
pub fn assign_images(images: &[GrayscaleFrame], windows: &[Window<'_>]) -> Vec<Option<usize>> {
    windows
        .iter()
        .map(|w| {
            images
                .iter()
                .enumerate()
                .filter(|(_, f)| f.timestamp >= w.t_i && f.timestamp < w.t_e)
                .max_by_key(|(_, f)| f.timestamp)
                .map(|(i, _)| i)
        })
        .collect()
}

/// Tokenizes the windows of `stream` in `[t_start, t_stop)` with a fresh
/// FIFO grid, attaching image tokens when `with_images` is set.
pub fn window_inputs(
    stream: &EventStream,
    config: &TokenizerConfig,
    t_start: i64,
    t_stop: i64,
    with_images: bool,
) -> Result<Vec<WindowInputs>, ModelError> {
    config.validate()?;
    let windows = slice_windows(stream, config.window_us, t_start, t_stop);
    let assigned = if with_images {
        assign_images(&stream.images, &windows)
    } else {
        vec![None; windows.len()]
    };
    let mut grid = FifoGrid::new(config);
    windows
        .iter()
        .zip(assigned)
        .map(|(w, img)| {
            Ok(WindowInputs {
                events: tokenize_window(&mut grid, w, config)?,
                image: img
                    .map(|i| tokenize_image(&stream.images[i], config))
                    .transpose()?,
            })
        })
        .collect()
}

/// Online classification: feed windows one at a time and read logits after
/// any prefix.
pub struct ClfSession<'m> {
    model: &'m Model,
    memory: Tensor,
}

impl<'m> ClfSession<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            memory: model.params.get(model.memory_init).clone(),
        }
    }

    pub fn reset(&mut self) {
        self.memory = self.model.params.get(self.model.memory_init).clone();
    }

    pub fn memory(&self) -> &Tensor {
        &self.memory
    }

    pub fn push(&mut self, inputs: &WindowInputs) -> Result<(), ModelError> {
        let mut tape = Tape::new(&self.model.params);
        let m = tape.constant(self.memory.clone());
        let (m, _) = self
            .model
            .step(&mut tape, &mut ForwardCtx::inference(), m, inputs)?;
        self.memory = tape.value(m).clone();
        Ok(())
    }

    pub fn logits(&self) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.model.params);
        let m = tape.constant(self.memory.clone());
        let out = self
            .model
            .classify(&mut tape, &mut ForwardCtx::inference(), m)?;
        Ok(tape.value(out).data().to_vec())
    }
}
