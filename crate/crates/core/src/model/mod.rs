//! The latent-memory transformer.
//!
//! Each window's tokens are embedded with their patch position and refined
//! by self-attention ([`Model::preprocess`]). A cross-attention block lets
//! the latent memory read the tokens ([`Model::backbone_step`]) and the
//! result is folded back into the memory with a sum and layer
//! normalization ([`Model::memory_update`]). The classification head reads
//! only the memory; the dense head rebuilds the full patch grid from the
//! current tokens, zero placeholders and the memory.

mod checkpoint;
mod config;
mod session;

pub(crate) use checkpoint::Reader;
pub use checkpoint::{decode_model, encode_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Task};
pub use session::{assign_images, window_inputs, ClfSession, WindowInputs};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    fourier_positions, AttentionBlock, ForwardCtx, LayerNorm, Linear, ParamId, ParamStore,
    ShapeError, Tape, Tensor, Var, FOURIER_BANDS,
};
use crate::tokenizer::TokenSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("token at ({row}, {col}) outside the {rows}x{cols} patch grid")]
    UnknownPosition {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("two tokens at patch ({row}, {col}) in one modality")]
    DuplicatePosition { row: usize, col: usize },
    #[error("token of length {got}, expected {expected}")]
    TokenSize { got: usize, expected: usize },
    #[error("{0} requires a {1} model")]
    WrongTask(&'static str, &'static str),
    #[error("image tokens given to a model without the image modality")]
    NoImageModality,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Events,
    Images,
}

/// Token embedding followed by self-attention, one per modality.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub merge_position: Linear,
    pub blocks: Vec<AttentionBlock>,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub blocks: Vec<AttentionBlock>,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct DenseHead {
    pub position: Linear,
    pub fuse_norm: Option<LayerNorm>,
    pub cross: AttentionBlock,
    pub blocks: Vec<AttentionBlock>,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

/// Processed tokens of one modality in one window.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub modality: Modality,
    /// `|T| × D`.
    pub tokens: Var,
    /// Output of every pre-processing block, first to last.
    pub skips: Vec<Var>,
    /// Row-major patch index of every token.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub positions: ParamId,
    pub memory_init: ParamId,
    pub memory_norm: LayerNorm,
    pub event_encoder: Encoder,
    pub image_encoder: Option<Encoder>,
    pub backbone_cross: AttentionBlock,
    pub backbone_blocks: Vec<AttentionBlock>,
    pub classifier: Option<ClassifierHead>,
    pub dense: Option<DenseHead>,
}

impl Model {
    /// Builds and initializes a model. Parameter registration order (and
    /// therefore the checkpoint layout) depends only on `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let pos_dim = 4 * FOURIER_BANDS;
        let positions = p.add(
            "positions",
            fourier_positions(config.grid_rows, config.grid_cols, FOURIER_BANDS),
        );
        let memory_init = p.add_normal(
            "memory.init",
            &[config.latents, d],
            1.0 / (d as f64).sqrt(),
            &mut rng,
        );
        let memory_norm = LayerNorm::new(&mut p, "memory.norm", d);

        let encoder =
            |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize| Encoder {
                embed: Linear::new(p, &format!("{name}.embed"), in_dim, d, rng),
                merge_position: Linear::new(
                    p,
                    &format!("{name}.merge_position"),
                    d + pos_dim,
                    d,
                    rng,
                ),
                blocks: (0..config.n1)
                    .map(|i| {
                        AttentionBlock::new(
                            p,
                            &format!("{name}.block{i}"),
                            d,
                            config.heads_pre_dec,
                            false,
                            rng,
                        )
                    })
                    .collect(),
            };
        let event_encoder = encoder(&mut p, &mut rng, "events", config.event_token_dim());
        let image_encoder = config
            .use_images
            .then(|| encoder(&mut p, &mut rng, "images", config.image_token_dim()));

        let backbone_cross =
            AttentionBlock::new(&mut p, "backbone.cross", d, config.heads, true, &mut rng);
        let backbone_blocks = (0..config.n2)
            .map(|i| {
                AttentionBlock::new(
                    &mut p,
                    &format!("backbone.block{i}"),
                    d,
                    config.heads,
                    false,
                    &mut rng,
                )
            })
            .collect();

        let (classifier, dense) = match config.task {
            Task::Classification { classes } => (
                Some(ClassifierHead {
                    blocks: (0..config.n3)
                        .map(|i| {
                            AttentionBlock::new(
                                &mut p,
                                &format!("classifier.block{i}"),
                                d,
                                config.heads,
                                false,
                                &mut rng,
                            )
                        })
                        .collect(),
                    hidden: Linear::new(&mut p, "classifier.hidden", d, d, &mut rng),
                    out: Linear::new(&mut p, "classifier.out", d, classes, &mut rng),
                }),
                None,
            ),
            Task::Depth => (
                None,
                Some(DenseHead {
                    position: Linear::new(&mut p, "dense.position", pos_dim, d, &mut rng),
                    fuse_norm: config
                        .use_images
                        .then(|| LayerNorm::new(&mut p, "dense.fuse_norm", d)),
                    cross: AttentionBlock::new(
                        &mut p,
                        "dense.cross",
                        d,
                        config.heads_pre_dec,
                        true,
                        &mut rng,
                    ),
                    blocks: (0..config.n1)
                        .map(|i| {
                            AttentionBlock::new(
                                &mut p,
                                &format!("dense.block{i}"),
                                d,
                                config.heads_pre_dec,
                                false,
                                &mut rng,
                            )
                        })
                        .collect(),
                    out_norm: LayerNorm::new(&mut p, "dense.out_norm", d),
                    out: Linear::new(
                        &mut p,
                        "dense.out",
                        d,
                        config.patch_size * config.patch_size,
                        &mut rng,
                    ),
                }),
            ),
        };

        Ok(Self {
            config,
            params: p,
            positions,
            memory_init,
            memory_norm,
            event_encoder,
            image_encoder,
            backbone_cross,
            backbone_blocks,
            classifier,
            dense,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn token_cells(&self, tokens: &TokenSet) -> Result<Vec<usize>, ModelError> {
        let (rows, cols) = (self.config.grid_rows, self.config.grid_cols);
        let mut seen = vec![false; rows * cols];
        tokens
            .tokens
            .iter()
            .map(|t| {
                if t.row >= rows || t.col >= cols {
                    return Err(ModelError::UnknownPosition {
                        row: t.row,
                        col: t.col,
                        rows,
                        cols,
                    });
                }
                let c = t.row * cols + t.col;
                if std::mem::replace(&mut seen[c], true) {
                    return Err(ModelError::DuplicatePosition {
                        row: t.row,
                        col: t.col,
                    });
                }
                Ok(c)
            })
            .collect()
    }

    /// Embeds one modality's tokens and runs the pre-processing blocks.
    /// Returns `None` for an empty token set.
    pub fn preprocess(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        tokens: &TokenSet,
        modality: Modality,
    ) -> Result<Option<EncoderState>, ModelError> {
        let (encoder, in_dim) = match modality {
            Modality::Events => (&self.event_encoder, self.config.event_token_dim()),
            Modality::Images => (
                self.image_encoder
                    .as_ref()
                    .ok_or(ModelError::NoImageModality)?,
                self.config.image_token_dim(),
            ),
        };
        if tokens.is_empty() {
            return Ok(None);
        }
        let cells = self.token_cells(tokens)?;
        let mut data = Vec::with_capacity(tokens.len() * in_dim);
        for t in &tokens.tokens {
            if t.data.len() != in_dim {
                return Err(ModelError::TokenSize {
                    got: t.data.len(),
                    expected: in_dim,
                });
            }
            data.extend_from_slice(&t.data);
        }
        let x = tape.constant(Tensor::matrix(tokens.len(), in_dim, data));
        let h = encoder.embed.forward(tape, x)?;
        let h = tape.gelu(h);
        let table = tape.param(self.positions);
        let pos = tape.gather_rows(table, &cells)?;
        let h = tape.concat_cols(&[h, pos])?;
        let mut h = encoder.merge_position.forward(tape, h)?;
        let mut skips = Vec::with_capacity(encoder.blocks.len());
        for block in &encoder.blocks {
            h = block.self_attend(tape, ctx, h)?;
            skips.push(h);
        }
        Ok(Some(EncoderState {
            modality,
            tokens: h,
            skips,
            cells,
        }))
    }

    /// Learned initial memory.
    pub fn initial_memory(&self, tape: &mut Tape<'_>) -> Var {
        tape.param(self.memory_init)
    }

    /// Latents (queries) read the concatenated tokens of all modalities
    /// (keys/values), then self-attend. Returns `M'`.
    pub fn backbone_step(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        memory: Var,
        states: &[&EncoderState],
    ) -> Result<Var, ModelError> {
        let toks: Vec<Var> = states.iter().map(|s| s.tokens).collect();
        let kv = if toks.len() == 1 {
            toks[0]
        } else {
            tape.concat_rows(&toks)?
        };
        let mut m = self.backbone_cross.cross_attend(tape, ctx, memory, kv)?;
        for block in &self.backbone_blocks {
            m = block.self_attend(tape, ctx, m)?;
        }
        Ok(m)
    }

    /// `M ← LayerNorm(M + M')`, per latent vector.
    pub fn memory_update(
        &self,
        tape: &mut Tape<'_>,
        memory: Var,
        update: Var,
    ) -> Result<Var, ModelError> {
        let s = tape.add(memory, update)?;
        Ok(self.memory_norm.forward(tape, s)?)
    }

    /// Pre-processes every modality present in `inputs` and, if any
    /// produced tokens, updates the memory. Returns the new memory and the
    /// encoder states.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        memory: Var,
        inputs: &WindowInputs,
    ) -> Result<(Var, Vec<EncoderState>), ModelError> {
        let mut states = Vec::new();
        if let Some(s) = self.preprocess(tape, ctx, &inputs.events, Modality::Events)? {
            states.push(s);
        }
        if let Some(img) = &inputs.image {
            if let Some(s) = self.preprocess(tape, ctx, img, Modality::Images)? {
                states.push(s);
            }
        }
        if states.is_empty() {
            return Ok((memory, states));
        }
        let refs: Vec<&EncoderState> = states.iter().collect();
        let update = self.backbone_step(tape, ctx, memory, &refs)?;
        Ok((self.memory_update(tape, memory, update)?, states))
    }

    /// Self-attention over the latents, two linear layers per latent and
    /// an average over latents. Returns `1 × classes` logits.
    pub fn classify(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        memory: Var,
    ) -> Result<Var, ModelError> {
        let head = self
            .classifier
            .as_ref()
            .ok_or(ModelError::WrongTask("classify", "classification"))?;
        let mut m = memory;
        for block in &head.blocks {
            m = block.self_attend(tape, ctx, m)?;
        }
        let h = head.hidden.forward(tape, m)?;
        let h = tape.gelu(h);
        let out = head.out.forward(tape, h)?;
        Ok(tape.mean_rows(out))
    }

    /// Scatters each modality's tokens onto the patch grid (zeros where no
    /// token exists), merges modalities with add-and-normalize where both
    /// have a token, and adds the projected positional code to every cell.
    /// Returns the `cells × D` grid and the per-cell mask of real tokens.
    pub fn densify(
        &self,
        tape: &mut Tape<'_>,
        states: &[EncoderState],
    ) -> Result<(Var, Vec<bool>), ModelError> {
        let head = self
            .dense
            .as_ref()
            .ok_or(ModelError::WrongTask("densify", "depth"))?;
        let cells = self.config.cells();
        let d = self.config.dim;
        let mut mask = vec![false; cells];
        let mut count = vec![0u8; cells];
        let mut grid: Option<Var> = None;
        for s in states {
            for &c in &s.cells {
                mask[c] = true;
                count[c] += 1;
            }
            let scattered = tape.scatter_rows(s.tokens, &s.cells, cells)?;
            grid = Some(match grid {
                None => scattered,
                Some(g) => tape.add(g, scattered)?,
            });
        }
        let grid = match grid {
            Some(g) => g,
            None => tape.constant(Tensor::zeros(&[cells, d])),
        };
        let grid = match (&head.fuse_norm, count.iter().any(|&c| c > 1)) {
            (Some(norm), true) => {
                let normed = norm.forward(tape, grid)?;
                let both: Vec<f64> = count
                    .iter()
                    .flat_map(|&c| std::iter::repeat_n(if c > 1 { 1.0 } else { 0.0 }, d))
                    .collect();
                let rest: Vec<f64> = both.iter().map(|b| 1.0 - b).collect();
                let a = tape.mul_const(normed, both)?;
                let b = tape.mul_const(grid, rest)?;
                tape.add(a, b)?
            }
            _ => grid,
        };
        let table = tape.param(self.positions);
        let pos = head.position.forward(tape, table)?;
        Ok((tape.add(grid, pos)?, mask))
    }

    /// Decodes the dense grid into an `H × W` map of normalized log depth in
    /// `(0, 1)`. Decoder block `j` adds the skip of pre-processing block
    /// `N1-1-j` at real-token cells.
    pub fn dense_decode(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        grid: Var,
        memory: Var,
        states: &[EncoderState],
    ) -> Result<Var, ModelError> {
        let head = self
            .dense
            .as_ref()
            .ok_or(ModelError::WrongTask("dense_decode", "depth"))?;
        let cells = self.config.cells();
        let mut g = head.cross.cross_attend(tape, ctx, grid, memory)?;
        let n1 = head.blocks.len();
        for (j, block) in head.blocks.iter().enumerate() {
            for s in states {
                let skip = tape.scatter_rows(s.skips[n1 - 1 - j], &s.cells, cells)?;
                g = tape.add(g, skip)?;
            }
            g = block.self_attend(tape, ctx, g)?;
        }
        let g = head.out_norm.forward(tape, g)?;
        let out = head.out.forward(tape, g)?;
        let out = tape.sigmoid(out);
        let (p, cols) = (self.config.patch_size, self.config.grid_cols);
        let (h, w) = (self.config.height(), self.config.width());
        let idx = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                ((y / p) * cols + x / p) * p * p + (y % p) * p + x % p
            })
            .collect();
        Ok(tape.gather(out, idx, &[h, w])?)
    }

    /// Runs every window in order from the learned initial memory and
    /// returns the logits.
    pub fn forward_clf(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        windows: &[WindowInputs],
    ) -> Result<Var, ModelError> {
        let mut memory = self.initial_memory(tape);
        for w in windows {
            memory = self.step(tape, ctx, memory, w)?.0;
        }
        self.classify(tape, ctx, memory)
    }

    /// Runs every window in order and decodes a depth map from the final
    /// memory and the last window's tokens.
    pub fn forward_depth(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        windows: &[WindowInputs],
    ) -> Result<Var, ModelError> {
        let mut memory = self.initial_memory(tape);
        let mut last = Vec::new();
        for w in windows {
            let (m, states) = self.step(tape, ctx, memory, w)?;
            memory = m;
            last = states;
        }
        let (grid, _) = self.densify(tape, &last)?;
        self.dense_decode(tape, ctx, grid, memory, &last)
    }

    /// Like [`Model::forward_clf`] but with the learned initial memory
    /// restored before every window, so no information crosses windows.
    pub fn forward_clf_memoryless(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        windows: &[WindowInputs],
    ) -> Result<Var, ModelError> {
        let mut memory = self.initial_memory(tape);
        for w in windows {
            let fresh = self.initial_memory(tape);
            memory = match self.step(tape, ctx, fresh, w)?.0 {
                m if m == fresh => memory,
                m => m,
            };
        }
        self.classify(tape, ctx, memory)
    }

    /// Inference-mode logits for a sequence of windows.
    pub fn logits(&self, windows: &[WindowInputs]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_clf(&mut tape, &mut ForwardCtx::inference(), windows)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Inference-mode normalized depth map for a sequence of windows.
    pub fn depth_map(&self, windows: &[WindowInputs]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_depth(&mut tape, &mut ForwardCtx::inference(), windows)?;
        Ok(tape.value(out).data().to_vec())
    }
}
