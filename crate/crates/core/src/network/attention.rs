use crate::autograd::{Tensor, Var};

use super::layers::{AffineCondition, Linear};
use super::params::{Ctx, Init};

/// Sinusoidal encoding evaluated at positions `i * multiplier`:
/// column `2k` is `sin(p / 10000^(2k/d))`, column `2k + 1` the matching cosine.
pub fn positional_encode(length: usize, dim: usize, multiplier: f64) -> Tensor {
    Tensor::from_fn(length, dim, |i, c| {
        let pos = i as f64 * multiplier;
        let freq = 10000f64.powf(-((c - c % 2) as f64) / dim as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Multi-head scaled dot-product attention. Positional encodings are added
/// to the query and key inputs only.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[queries x keys]`, averaged over heads.
    pub weights: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        init: &mut Init,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(width % heads == 0, "attention width must divide into heads");
        Self {
            query: Linear::new(init, &format!("{name}.q"), query_dim, width),
            key: Linear::new(init, &format!("{name}.k"), key_dim, width),
            value: Linear::new(init, &format!("{name}.v"), key_dim, width),
            out: Linear::new(init, &format!("{name}.o"), width, width),
            heads,
            width,
        }
    }

    pub fn forward(
        &self,
        ctx: Ctx,
        queries: Var,
        keys: Var,
        query_pos: &Tensor,
        key_pos: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> AttentionOutput {
        let t = ctx.tape;
        let qp = t.constant(query_pos.clone());
        let kp = t.constant(key_pos.clone());
        let q = self.query.forward(ctx, t.add(queries, qp));
        let k = self.key.forward(ctx, t.add(keys, kp));
        let v = self.value.forward(ctx, keys);
        let dk = self.width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut parts = Vec::with_capacity(self.heads);
        let (nq, nk) = (t.shape(q).0, t.shape(k).0);
        let mut weights = Tensor::zeros(nq, nk);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dk, dk);
            let kh = t.slice_cols(k, h * dk, dk);
            let vh = t.slice_cols(v, h * dk, dk);
            let logits = t.scale(t.matmul_t(qh, false, kh, true), scale);
            let w = t.softmax_rows(logits, key_mask);
            weights.add_assign(&t.value(w));
            parts.push(t.matmul(w, vh));
        }
        weights.scale_in_place(1.0 / self.heads as f64);
        let cat = if parts.len() == 1 { parts[0] } else { t.concat_cols(&parts) };
        AttentionOutput {
            out: self.out.forward(ctx, cat),
            weights,
        }
    }
}

/// Cross-attention to the encoder output, then self-attention, then a
/// feed-forward layer. Each sub-layer is residual, followed by layer norm
/// and an affine noise condition.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub cross: MultiHeadAttention,
    pub self_attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub affine: [AffineCondition; 3],
    pub channels: usize,
    pub context_dim: usize,
}

pub struct AttnBlockOutput {
    pub out: Var,
    pub cross_weights: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl AttnBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        channels: usize,
        context_dim: usize,
        embed_dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        Self {
            cross: MultiHeadAttention::new(init, &format!("{name}.cross"), channels, context_dim, channels, heads),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), channels, channels, channels, heads),
            ff1: Linear::new(init, &format!("{name}.ff1"), channels, ff_mult * channels),
            ff2: Linear::new(init, &format!("{name}.ff2"), ff_mult * channels, channels),
            affine: [0, 1, 2].map(|i| AffineCondition::new(init, &format!("{name}.affine{i}"), embed_dim, channels)),
            channels,
            context_dim,
        }
    }

    /// `text_mask` marks real (non-pad) tokens. Text positions are scaled
    /// by `len(x) / len(context)` so the ideal alignment is the diagonal.
    pub fn forward(&self, ctx: Ctx, x: Var, context: Var, text_mask: &[bool], noise_emb: Var) -> AttnBlockOutput {
        let t = ctx.tape;
        let (ls, _) = t.shape(x);
        let (lc, _) = t.shape(context);
        let stroke_pos = positional_encode(ls, self.channels, 1.0);
        let text_pos = positional_encode(lc, self.context_dim, ls as f64 / lc as f64);
        let cross = self.cross.forward(ctx, x, context, &stroke_pos, &text_pos, Some(text_mask));
        let h = t.layer_norm(t.add(x, cross.out), LAYER_NORM_EPS);
        let h = self.affine[0].forward(ctx, h, noise_emb);
        let sa = self.self_attn.forward(ctx, h, h, &stroke_pos, &stroke_pos, None);
        let h2 = t.layer_norm(t.add(h, sa.out), LAYER_NORM_EPS);
        let h2 = self.affine[1].forward(ctx, h2, noise_emb);
        let ff = self.ff2.forward(ctx, t.silu(self.ff1.forward(ctx, h2)));
        let h3 = t.layer_norm(t.add(h2, ff), LAYER_NORM_EPS);
        AttnBlockOutput {
            out: self.affine[2].forward(ctx, h3, noise_emb),
            cross_weights: cross.weights,
        }
    }
}
