use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ModelError;
use crate::tokenizer::TokenizerConfig;

/// What the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Depth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token and latent width `D`.
    pub dim: usize,
    /// Number of latent memory vectors.
    pub latents: usize,
    /// Self-attention layers in pre-processing (and in the dense decoder).
    pub n1: usize,
    /// Self-attention layers in the backbone.
    pub n2: usize,
    /// Self-attention layers in the classification head.
    pub n3: usize,
    /// Heads in the backbone and classification head.
    pub heads: usize,
    /// Heads in pre-processing and dense decoding.
    pub heads_pre_dec: usize,
    pub patch_size: usize,
    pub fifo_depth: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub task: Task,
    /// Whether grayscale image tokens are a second input modality.
    pub use_images: bool,
    /// Residual-branch dropout during training.
    pub dropout: f64,
}

impl ModelConfig {
    /// `D=160`, 32 latents, one layer per stage, 8 heads everywhere.
    pub fn classification(tokenizer: &TokenizerConfig, classes: usize) -> Self {
        Self {
            dim: 160,
            latents: 32,
            n1: 1,
            n2: 1,
            n3: 1,
            heads: 8,
            heads_pre_dec: 8,
            patch_size: tokenizer.patch_size,
            fifo_depth: tokenizer.fifo_depth,
            grid_rows: tokenizer.grid_rows(),
            grid_cols: tokenizer.grid_cols(),
            task: Task::Classification { classes },
            use_images: false,
            dropout: 0.1,
        }
    }

    /// Dense depth: two pre-processing/decoder layers with 4 heads.
    pub fn depth(tokenizer: &TokenizerConfig, use_images: bool) -> Self {
        Self {
            n1: 2,
            heads_pre_dec: 4,
            task: Task::Depth,
            use_images,
            ..Self::classification(tokenizer, 1)
        }
    }

    /// `P²·K·2`.
    pub fn event_token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.fifo_depth * 2
    }

    /// `P²`.
    pub fn image_token_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.latents == 0 || self.patch_size == 0 || self.fifo_depth == 0 {
            return fail("width, latents, patch size and FIFO depth must be positive".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return fail("patch grid must be non-empty".into());
        }
        for h in [self.heads, self.heads_pre_dec] {
            if h == 0 || self.dim % h != 0 {
                return fail(format!("width {} is not divisible by {h} heads", self.dim));
            }
        }
        if self.n1 == 0 {
            return fail("at least one pre-processing layer is required".into());
        }
        if let Task::Classification { classes } = self.task {
            if classes == 0 {
                return fail("at least one class is required".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (task, classes) = match self.task {
            Task::Classification { classes } => ("classification", classes),
            Task::Depth => ("depth", 0),
        };
        for (k, v) in [
            ("dim", self.dim.to_string()),
            ("latents", self.latents.to_string()),
            ("n1", self.n1.to_string()),
            ("n2", self.n2.to_string()),
            ("n3", self.n3.to_string()),
            ("heads", self.heads.to_string()),
            ("heads_pre_dec", self.heads_pre_dec.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("fifo_depth", self.fifo_depth.to_string()),
            ("grid_rows", self.grid_rows.to_string()),
            ("grid_cols", self.grid_cols.to_string()),
            ("task", task.to_string()),
            ("classes", classes.to_string()),
            ("use_images", self.use_images.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| ModelError::Config(format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("bad value for `{k}`")))
        };
        let task = match get("task")?.as_str() {
            "classification" => Task::Classification {
                classes: num("classes")?,
            },
            "depth" => Task::Depth,
            other => return Err(ModelError::Config(format!("unknown task `{other}`"))),
        };
        let cfg = Self {
            dim: num("dim")?,
            latents: num("latents")?,
            n1: num("n1")?,
            n2: num("n2")?,
            n3: num("n3")?,
            heads: num("heads")?,
            heads_pre_dec: num("heads_pre_dec")?,
            patch_size: num("patch_size")?,
            fifo_depth: num("fifo_depth")?,
            grid_rows: num("grid_rows")?,
            grid_cols: num("grid_cols")?,
            task,
            use_images: get("use_images")?
                .parse()
                .map_err(|_| ModelError::Config("bad value for `use_images`".into()))?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| ModelError::Config("bad value for `dropout`".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::SensorGeometry;

    #[test]
    fn text_round_trip() {
        let t = TokenizerConfig::depth(SensorGeometry::new(48, 60));
        let c = ModelConfig::depth(&t, true);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let c = ModelConfig::classification(
            &TokenizerConfig::classification(SensorGeometry::new(130, 130)),
            4,
        );
        assert_eq!(c.grid_rows * c.grid_cols, 169);
        assert_eq!(c.event_token_dim(), 600);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let t = TokenizerConfig::classification(SensorGeometry::new(20, 20));
        let c = ModelConfig {
            heads: 7,
            ..ModelConfig::classification(&t, 2)
        };
        assert!(c.validate().is_err());
    }
}
