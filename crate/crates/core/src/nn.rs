//! Transformer building blocks: layer norm, multi-head cross-attention,
//! feed-forward, overlap patch embedding and the pre-norm cross-transformer
//! block `s_i = y_i + FFN(LN(y_i))`, `y_i = s_{i-1} + MCA(LN(s_{i-1}), LN(x))`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gather_zero, Tape, Var};
use crate::error::{BotError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub depth: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(BotError::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(BotError::Config("depth must be at least 1".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(BotError::Config("ffn_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Tokens (`M x D` on the tape) with the grid they were laid out on, if any.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: Option<GridDims>,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = if bias {
            Some(store.register_uniform(format!("{name}.b"), &[fan_out], fan_in, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// `MCA(X, Y) = Attention(W^Q X, W^K Y, W^V Y)` followed by an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadCrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadCrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(BotError::Config(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, false)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, false)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, false)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, t: &mut Tape, q: Var, kv: Var) -> Result<Var> {
        self.forward_with_weights(t, q, kv).map(|(out, _)| out)
    }

    /// Also returns the per-head attention matrices (`Mq x Mkv`, rows sum to 1).
    pub fn forward_with_weights(&self, t: &mut Tape, q: Var, kv: Var) -> Result<(Var, Vec<Var>)> {
        for (what, v) in [("query", q), ("key/value", kv)] {
            if t.value(v).cols() != self.dim {
                return Err(BotError::Shape(format!(
                    "{what} tokens have dim {}, attention expects {}",
                    t.value(v).cols(),
                    self.dim
                )));
            }
        }
        let dh = self.dim / self.heads;
        let qp = self.wq.forward(t, q)?;
        let qp = t.scale(qp, 1.0 / (dh as f64).sqrt());
        let kp = self.wk.forward(t, kv)?;
        let vp = self.wv.forward(t, kv)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    t.slice_cols(qp, h * dh, dh)?,
                    t.slice_cols(kp, h * dh, dh)?,
                    t.slice_cols(vp, h * dh, dh)?,
                )
            };
            let scores = t.matmul_t(qh, false, kh, true)?;
            let probs = t.softmax_rows(scores);
            weights.push(probs);
            outs.push(t.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)?
        };
        Ok((self.wo.forward(t, merged)?, weights))
    }
}

/// Two-layer MLP `D -> rD -> D` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.fc1.fan_out
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        if t.value(x).cols() != self.fc1.fan_in {
            return Err(BotError::Shape(format!(
                "ffn expects dim {}, got {:?}",
                self.fc1.fan_in,
                t.shape(x)
            )));
        }
        let h = self.fc1.forward(t, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

#[derive(Debug, Clone)]
pub struct CrossTransformerBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadCrossAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossTransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d)?,
            attn: MultiHeadCrossAttention::new(store, rng, &format!("{name}.mca"), d, cfg.heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_ratio)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s_prev: Var, x: Var) -> Result<Var> {
        let sq = self.ln_q.forward(t, s_prev)?;
        let xk = self.ln_kv.forward(t, x)?;
        let a = self.attn.forward(t, sq, xk)?;
        let y = t.add(s_prev, a)?;
        let yn = self.ln_ffn.forward(t, y)?;
        let f = self.ffn.forward(t, yn)?;
        t.add(y, f)
    }
}

/// A stack of cross-transformer blocks sharing the same key/value input.
#[derive(Debug, Clone)]
pub struct CrossTransformer {
    pub blocks: Vec<CrossTransformerBlock>,
}

impl CrossTransformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| CrossTransformerBlock::new(store, rng, &format!("{name}.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, t: &mut Tape, s: Var, x: Var) -> Result<Var> {
        let mut s = s;
        for b in &self.blocks {
            s = b.forward(t, s, x)?;
        }
        Ok(s)
    }
}

/// Sliding-window linear embedding with stride smaller than the kernel.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
}

impl OverlapPatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_dim: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 || stride == 0 || stride >= kernel {
            return Err(BotError::Config(format!(
                "overlap patch embedding needs odd kernel and 0 < stride < kernel, got k={kernel} s={stride}"
            )));
        }
        let fan_in = kernel * kernel * in_channels;
        Ok(Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), fan_in, out_dim, true)?,
            kernel,
            stride,
            pad,
            in_channels,
        })
    }

    pub fn output_dims(&self, input: GridDims) -> Result<GridDims> {
        let f = |n: usize| -> Option<usize> {
            (n + 2 * self.pad)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
        };
        match (f(input.rows), f(input.cols)) {
            (Some(r), Some(c)) if r >= 1 && c >= 1 => Ok(GridDims::new(r, c)),
            _ => Err(BotError::Shape(format!(
                "patch embedding of {}x{} with k={} p={} has no output",
                input.rows, input.cols, self.kernel, self.pad
            ))),
        }
    }

    /// im2col gather map: output row = token, columns ordered (ky, kx, channel).
    fn im2col_index(&self, input: GridDims) -> Result<(Arc<[u32]>, GridDims)> {
        let out = self.output_dims(input)?;
        let (k, c) = (self.kernel, self.in_channels);
        let mut idx = Vec::with_capacity(out.cells() * k * k * c);
        for oy in 0..out.rows {
            for ox in 0..out.cols {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < input.rows
                            && (ix as usize) < input.cols;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((iy as usize * input.cols + ix as usize) * c + ch) as u32
                            } else {
                                gather_zero()
                            });
                        }
                    }
                }
            }
        }
        Ok((idx.into(), out))
    }

    /// `grid` is `(rows*cols) x in_channels` on the tape.
    pub fn forward(&self, t: &mut Tape, grid: Var, dims: GridDims) -> Result<TokenSequence> {
        let v = t.value(grid);
        if v.len() != dims.cells() * self.in_channels {
            return Err(BotError::Shape(format!(
                "patch embedding input {:?} does not match {}x{}x{}",
                v.shape(),
                dims.rows,
                dims.cols,
                self.in_channels
            )));
        }
        let (index, out) = self.im2col_index(dims)?;
        let width = self.kernel * self.kernel * self.in_channels;
        let cols = t.gather(grid, index, &[out.cells(), width])?;
        let tokens = self.proj.forward(t, cols)?;
        Ok(TokenSequence {
            tokens,
            grid: Some(out),
        })
    }
}
