use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, ShapeError, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass mode: training enables dropout drawn from `rng`.
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        use rand::SeedableRng;
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            dropout,
            rng,
        }
    }
}

/// Inverted dropout: in training, zeroes each element with probability
/// `rate` and scales survivors by `1/(1-rate)`. Identity otherwise.
pub fn dropout(tape: &mut Tape<'_>, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Var {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate {rate} outside [0, 1)"
    );
    if !train || rate == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    tape.mul_const(x, mask).expect("mask length matches")
}

/// `y = x·W + b`, `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/in_dim), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut l = Self::without_bias(store, name, in_dim, out_dim, rng);
        l.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        l
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], std, rng);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ShapeError> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn flops_per_row(&self) -> u64 {
        2 * (self.in_dim * self.out_dim) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ShapeError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with the per-head Q/K/V projections packed into
/// `D × D` matrices (head `h` owns columns `h·d_k..(h+1)·d_k`).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "width {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            // a key bias only shifts each score row, which softmax ignores
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, q_in: Var, kv_in: Var) -> Result<Var, ShapeError> {
        let q = self.q.forward(tape, q_in)?;
        let k = self.k.forward(tape, kv_in)?;
        let v = self.v.forward(tape, kv_in)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.out.forward(tape, a)
    }
}

/// Two-layer perceptron `D → 2D → D` with GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, 2 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), 2 * dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ShapeError> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, h)
    }
}

/// Pre-norm transformer block:
/// `x' = q + MHA(LN(q), LN(kv))`, `out = x' + FF(LN(x'))`.
///
/// Self-attention blocks normalize once and attend to themselves; cross
/// blocks carry a separate normalization for the key/value input.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.norm_kv"), dim)),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, rng),
        }
    }

    pub fn self_attend(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        x: Var,
    ) -> Result<Var, ShapeError> {
        let n = self.norm_q.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n)?;
        self.finish(tape, ctx, x, a)
    }

    pub fn cross_attend(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        q: Var,
        kv: Var,
    ) -> Result<Var, ShapeError> {
        let nq = self.norm_q.forward(tape, q)?;
        let nkv = match &self.norm_kv {
            Some(ln) => ln.forward(tape, kv)?,
            None => self.norm_q.forward(tape, kv)?,
        };
        let a = self.attn.forward(tape, nq, nkv)?;
        self.finish(tape, ctx, q, a)
    }

    fn finish(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx,
        x: Var,
        a: Var,
    ) -> Result<Var, ShapeError> {
        let a = dropout(tape, a, ctx.dropout, ctx.train, &mut ctx.rng);
        let x1 = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, x1)?;
        let f = self.ff.forward(tape, n)?;
        let f = dropout(tape, f, ctx.dropout, ctx.train, &mut ctx.rng);
        tape.add(x1, f)
    }

    /// Zeroes both residual-branch output projections, turning the block
    /// into the identity.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ff.out.zero(store);
    }
}
