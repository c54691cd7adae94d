use crate::autograd::{conv1d_out_len, Conv2dGeometry, Tensor, Var};

use super::params::{Ctx, Init, ParamId};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: init.fan_in(format!("{name}.weight"), inputs, outputs, inputs),
            bias: init.zeros(format!("{name}.bias"), 1, outputs),
            inputs,
            outputs,
        }
    }

    /// `[n x inputs] -> [n x outputs]`
    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let t = ctx.tape;
        t.add_row(t.matmul(x, ctx.p(self.weight)), ctx.p(self.bias))
    }
}

/// 1-D convolution with odd kernel and same padding: output length is
/// `ceil(len / stride)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel must be odd");
        let fan = kernel * inputs;
        Self {
            weight: init.fan_in(format!("{name}.weight"), fan, outputs, fan),
            bias: init.zeros(format!("{name}.bias"), 1, outputs),
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        conv1d_out_len(len, self.kernel, self.stride, self.kernel / 2)
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let t = ctx.tape;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            t.im2col_1d(x, self.kernel, self.stride, self.kernel / 2)
        };
        t.add_row(t.matmul(cols, ctx.p(self.weight)), ctx.p(self.bias))
    }
}

/// 2-D convolution over a `[(h * w) x channels]` map, same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan = kernel * kernel * inputs;
        Self {
            weight: init.fan_in(format!("{name}.weight"), fan, outputs, fan),
            bias: init.zeros(format!("{name}.bias"), 1, outputs),
            kernel,
            stride,
        }
    }

    pub fn geometry(&self, height: usize, width: usize) -> Conv2dGeometry {
        Conv2dGeometry {
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        }
    }

    /// Returns the output map and its `(height, width)`.
    pub fn forward(&self, ctx: Ctx, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let g = self.geometry(height, width);
        let t = ctx.tape;
        let cols = t.im2col_2d(x, g);
        let y = t.add_row(t.matmul(cols, ctx.p(self.weight)), ctx.p(self.bias));
        (y, g.out_height(), g.out_width())
    }
}

/// Per-channel `x * scale + bias` where `(scale, bias)` come from a linear
/// map of the noise embedding. Starts as the identity.
#[derive(Debug, Clone)]
pub struct AffineCondition {
    pub proj: Linear,
    pub channels: usize,
}

impl AffineCondition {
    pub fn new(init: &mut Init, name: &str, embed_dim: usize, channels: usize) -> Self {
        let weight = init.zeros(format!("{name}.weight"), embed_dim, 2 * channels);
        let mut b = vec![0.0; 2 * channels];
        b[..channels].iter_mut().for_each(|v| *v = 1.0);
        let bias = init.constant(format!("{name}.bias"), Tensor::row(b));
        Self {
            proj: Linear {
                weight,
                bias,
                inputs: embed_dim,
                outputs: 2 * channels,
            },
            channels,
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var, noise_emb: Var) -> Var {
        let t = ctx.tape;
        assert_eq!(t.shape(x).1, self.channels, "affine channel mismatch");
        let sb = self.proj.forward(ctx, noise_emb);
        let scale = t.slice_cols(sb, 0, self.channels);
        let bias = t.slice_cols(sb, self.channels, self.channels);
        t.add_row(t.mul_row(x, scale), bias)
    }
}

/// Two fully connected layers from the scalar noise level to a
/// `1 x dim` embedding.
#[derive(Debug, Clone)]
pub struct NoiseEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NoiseEmbedding {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), 1, dim),
            fc2: Linear::new(init, &format!("{name}.fc2"), dim, dim),
        }
    }

    pub fn forward(&self, ctx: Ctx, level: f64) -> Var {
        let t = ctx.tape;
        let x = t.constant(Tensor::scalar(level));
        let h = t.silu(self.fc1.forward(ctx, x));
        t.silu(self.fc2.forward(ctx, h))
    }
}
