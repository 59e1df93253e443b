//! Cross-scale self-attention: each query's per-scale feature rows form a
//! short token sequence (one token per scale) that passes through a single
//! one-head, post-norm transformer encoder layer.

use lazysurf_tape::Var;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct CrossScaleAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub width: usize,
}

/// Attention output plus the `(Q·S) x S` attention probabilities.
pub struct AttentionOut {
    /// `Q x (S·F)`, tokens concatenated back in scale order.
    pub features: Var,
    pub probs: Var,
}

impl CrossScaleAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, ff: usize, ln_eps: f64, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, "attn.q", width, width, rng),
            wk: Linear::new(store, "attn.k", width, width, rng),
            wv: Linear::new(store, "attn.v", width, width, rng),
            wo: Linear::new(store, "attn.o", width, width, rng),
            ln1: LayerNorm::new(store, "attn.ln1", width, ln_eps),
            ff1: Linear::new(store, "attn.ff1", width, ff, rng),
            ff2: Linear::new(store, "attn.ff2", ff, width, rng),
            ln2: LayerNorm::new(store, "attn.ln2", width, ln_eps),
            width,
        }
    }

    /// `per_scale[s]` is the `Q x F` feature matrix at scale `s`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, per_scale: &[Var]) -> Result<AttentionOut> {
        let s = per_scale.len();
        if s == 0 {
            return Err(Error::Config("attention needs at least one scale".into()));
        }
        let f = self.width;
        let q_count = ctx.tape.shape(per_scale[0])[0];
        for v in per_scale {
            let shape = ctx.tape.shape(*v);
            if shape != [q_count, f] {
                return Err(Error::Config(format!(
                    "attention expects {q_count} x {f} per scale, got {shape:?}"
                )));
            }
        }
        let joined = ctx.tape.concat_cols(per_scale)?;
        // Row-major: the S tokens of each query become S consecutive rows.
        let x = ctx.tape.reshape(joined, vec![q_count * s, f])?;

        let q = self.wq.forward(ctx, x)?;
        let k = self.wk.forward(ctx, x)?;
        let v = self.wv.forward(ctx, x)?;
        let scores = ctx.tape.group_scores(q, k, s)?;
        let scores = ctx.tape.scale(scores, 1.0 / (f as f64).sqrt());
        let probs = ctx.tape.softmax_rows(scores)?;
        let mixed = ctx.tape.group_mix(probs, v, s)?;
        let o = self.wo.forward(ctx, mixed)?;

        let r1 = ctx.tape.add(x, o)?;
        let x1 = self.ln1.forward(ctx, r1)?;
        let h = self.ff1.forward(ctx, x1)?;
        let h = ctx.tape.relu(h);
        let h = self.ff2.forward(ctx, h)?;
        let r2 = ctx.tape.add(x1, h)?;
        let x2 = self.ln2.forward(ctx, r2)?;
        let features = ctx.tape.reshape(x2, vec![q_count, s * f])?;
        Ok(AttentionOut { features, probs })
    }
}
