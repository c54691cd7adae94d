use crate::autograd::{Tensor, Var};

use super::attention::{positional_encode, MultiHeadAttention, LAYER_NORM_EPS};
use super::layers::{AffineCondition, Conv2d, Linear};
use super::params::{Ctx, Init, ParamId};

/// Extracted style features: a `[(grid_height * grid_width) x channels]`
/// grid stored row-major by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatureMap {
    pub grid_height: usize,
    pub grid_width: usize,
    pub features: Tensor,
}

impl StyleFeatureMap {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// Strided convolutional feature extractor: each stage is a 3x3 stride-2
/// convolution followed by SiLU.
#[derive(Debug, Clone)]
pub struct StyleNet {
    pub stages: Vec<Conv2d>,
    pub out_channels: usize,
}

impl StyleNet {
    pub fn new(init: &mut Init, name: &str, channels: &[usize]) -> Self {
        let mut prev = 1;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(init, &format!("{name}.stage{i}"), prev, c, 3, 2);
                prev = c;
                conv
            })
            .collect();
        Self {
            stages,
            out_channels: prev,
        }
    }

    /// Grid size for an input of `height x width`: `ceil(.. / 2)` per stage.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        self.stages
            .iter()
            .fold((height, width), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }

    /// `image` is `[(height * width) x 1]`.
    pub fn forward(&self, ctx: Ctx, image: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let t = ctx.tape;
        let (mut x, mut h, mut w) = (image, height, width);
        for stage in &self.stages {
            let (y, nh, nw) = stage.forward(ctx, x, h, w);
            x = t.silu(y);
            h = nh;
            w = nw;
        }
        (x, h, w)
    }
}

/// Character embeddings attend over projected style features; the result
/// is added back, passed through a feed-forward layer, and conditioned on
/// the noise level. Pad rows are zeroed.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embedding: ParamId,
    pub style_proj: Linear,
    pub attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub affine: [AffineCondition; 2],
    pub dim: usize,
}

impl Encoder {
    pub fn new(
        init: &mut Init,
        name: &str,
        vocab_size: usize,
        style_channels: usize,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        Self {
            embedding: init.fan_in(format!("{name}.embedding"), vocab_size, dim, 1),
            style_proj: Linear::new(init, &format!("{name}.style_proj"), style_channels, dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, dim, dim, heads),
            ff1: Linear::new(init, &format!("{name}.ff1"), dim, ff_mult * dim),
            ff2: Linear::new(init, &format!("{name}.ff2"), ff_mult * dim, dim),
            affine: [0, 1].map(|i| AffineCondition::new(init, &format!("{name}.affine{i}"), dim, dim)),
            dim,
        }
    }

    /// `style` is `[(grid_height * grid_width) x channels]`; key positions
    /// are the grid column, so position follows the writing direction.
    pub fn forward(
        &self,
        ctx: Ctx,
        tokens: &[usize],
        mask: &[bool],
        style: Var,
        grid_width: usize,
        noise_emb: Var,
    ) -> Var {
        let t = ctx.tape;
        let chars = t.gather_rows(ctx.p(self.embedding), tokens);
        let s = t.layer_norm(self.style_proj.forward(ctx, style), LAYER_NORM_EPS);
        let cells = t.shape(s).0;
        let col_pe = positional_encode(grid_width, self.dim, 1.0);
        let key_pos = Tensor::from_fn(cells, self.dim, |p, c| col_pe.get(p % grid_width, c));
        let query_pos = positional_encode(tokens.len(), self.dim, 1.0);
        let a = self.attn.forward(ctx, chars, s, &query_pos, &key_pos, None);
        let h = t.layer_norm(t.add(chars, a.out), LAYER_NORM_EPS);
        let h = self.affine[0].forward(ctx, h, noise_emb);
        let f = self.ff2.forward(ctx, t.silu(self.ff1.forward(ctx, h)));
        let out = t.layer_norm(t.add(h, f), LAYER_NORM_EPS);
        let out = self.affine[1].forward(ctx, out, noise_emb);
        let keep = Tensor::new(mask.len(), 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        t.mul_col(out, t.constant(keep))
    }
}
