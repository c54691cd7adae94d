use crate::autograd::Var;

use super::layers::{AffineCondition, Conv1d};
use super::params::{Ctx, Init};

/// Three convolutions, each followed by an affine noise condition and SiLU,
/// plus a 1x1 convolution on the skip path. The first convolution and the
/// skip carry the stride.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub convs: [Conv1d; 3],
    pub affine: [AffineCondition; 3],
    pub skip: Conv1d,
}

impl ConvBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        embed_dim: usize,
    ) -> Self {
        let convs = [
            Conv1d::new(init, &format!("{name}.conv0"), inputs, outputs, kernel, stride),
            Conv1d::new(init, &format!("{name}.conv1"), outputs, outputs, kernel, 1),
            Conv1d::new(init, &format!("{name}.conv2"), outputs, outputs, kernel, 1),
        ];
        let affine = [0, 1, 2].map(|i| AffineCondition::new(init, &format!("{name}.affine{i}"), embed_dim, outputs));
        let skip = Conv1d::new(init, &format!("{name}.skip"), inputs, outputs, 1, stride);
        Self { convs, affine, skip }
    }

    pub fn forward(&self, ctx: Ctx, x: Var, noise_emb: Var) -> Var {
        let t = ctx.tape;
        assert!(t.shape(x).0 > 0, "conv block input is empty");
        let mut h = x;
        for (conv, aff) in self.convs.iter().zip(&self.affine) {
            h = t.silu(aff.forward(ctx, conv.forward(ctx, h), noise_emb));
        }
        t.add(h, self.skip.forward(ctx, x))
    }
}
