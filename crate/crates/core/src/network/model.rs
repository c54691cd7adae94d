use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::StyleImage;
use crate::error::{Error, Result};

use super::attention::AttnBlock;
use super::blocks::ConvBlock;
use super::encoder::{Encoder, StyleFeatureMap, StyleNet};
use super::layers::{Conv1d, Linear, NoiseEmbedding};
use super::params::{Ctx, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Number of stride-2 downsampling levels, mirrored on the way up.
    pub levels: usize,
    /// Attention blocks sit at this many of the lowest-resolution levels.
    pub attn_levels: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub kernel: usize,
    pub style_channels: Vec<usize>,
    pub vocab_size: usize,
    pub style_height: usize,
    pub style_width: usize,
}

impl ModelConfig {
    /// Default size for CPU training.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            levels: 3,
            attn_levels: 2,
            heads: 4,
            ff_mult: 2,
            kernel: 3,
            style_channels: vec![16, 32, 64, 128],
            vocab_size,
            style_height: 64,
            style_width: 512,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            style_channels: vec![32, 64, 128, 256],
            ..Self::desk(vocab_size)
        }
    }

    /// Smallest configuration exercising every block type.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            levels: 1,
            attn_levels: 1,
            heads: 4,
            ff_mult: 2,
            kernel: 3,
            style_channels: vec![4, 8],
            vocab_size,
            style_height: 8,
            style_width: 16,
        }
    }

    /// Channel width at down level `i`; the widest level is the lowest.
    pub fn channels(&self, level: usize) -> usize {
        (self.d_model >> (self.levels - 1 - level)).max(self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d_model == 0 || self.levels == 0 || self.heads == 0 {
            return bad("d_model, levels and heads must be positive");
        }
        if self.attn_levels > self.levels {
            return bad("attn_levels cannot exceed levels");
        }
        if self.d_model % self.heads != 0 || (0..self.levels).any(|l| self.channels(l) % self.heads != 0) {
            return bad("every channel width must be divisible by heads");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.style_channels.is_empty() || self.style_height == 0 || self.style_width == 0 {
            return bad("style extractor needs at least one stage and positive image size");
        }
        if self.vocab_size < 3 {
            return bad("vocabulary must hold at least one character");
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(Denoiser::new(self.clone(), 0)?.1.num_scalars())
    }
}

/// Either a raw style image or an already extracted feature map.
#[derive(Debug, Clone, Copy)]
pub enum StyleInput<'a> {
    Image(&'a StyleImage),
    Features(&'a StyleFeatureMap),
    /// Features already on the tape, from [`Denoiser::style_vars`], with
    /// the grid width.
    Traced(Var, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// `[n x 2]` noisy offsets.
    pub y_t: &'a Tensor,
    pub tokens: &'a [u32],
    /// True for real tokens, false for padding.
    pub token_mask: &'a [bool],
    pub style: StyleInput<'a>,
    /// The signal level `sqrt(alpha_bar)`, in `(0, 1]`.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub level: usize,
    /// `[stroke positions at this level x text length]`, head-averaged.
    pub weights: Tensor,
}

pub struct ForwardVars {
    pub eps: Var,
    pub pen: Var,
    pub cross_attention: Vec<CrossAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: Tensor,
    pub pen_prob: Vec<f64>,
    pub cross_attention: Vec<CrossAttention>,
}

/// The conditional noise predictor: a 1-D U-Net over stroke positions with
/// text/style cross-attention at the lowest resolutions and two output
/// heads on a shared trunk.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub noise: NoiseEmbedding,
    pub style: StyleNet,
    pub encoder: Encoder,
    pub input: Linear,
    pub down: Vec<ConvBlock>,
    pub down_attn: Vec<Option<AttnBlock>>,
    pub up: Vec<ConvBlock>,
    pub skips: Vec<Conv1d>,
    pub eps_head: Linear,
    pub pen_head: Linear,
}

impl Denoiser {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.d_model;
        let noise = NoiseEmbedding::new(&mut init, "noise", d);
        let style = StyleNet::new(&mut init, "style", &config.style_channels);
        let encoder = Encoder::new(
            &mut init,
            "encoder",
            config.vocab_size,
            style.out_channels,
            d,
            config.heads,
            config.ff_mult,
        );
        let c0 = config.channels(0);
        let input = Linear::new(&mut init, "input", 2, c0);
        let level_in = |i: usize| if i == 0 { c0 } else { config.channels(i - 1) };
        let mut down = Vec::new();
        let mut down_attn = Vec::new();
        for i in 0..config.levels {
            let c = config.channels(i);
            down.push(ConvBlock::new(&mut init, &format!("down{i}"), level_in(i), c, config.kernel, 2, d));
            down_attn.push((i >= config.levels - config.attn_levels).then(|| {
                AttnBlock::new(&mut init, &format!("attn{i}"), c, d, d, config.heads, config.ff_mult)
            }));
        }
        let mut up = Vec::new();
        let mut skips = Vec::new();
        for i in 0..config.levels {
            up.push(ConvBlock::new(&mut init, &format!("up{i}"), config.channels(i), level_in(i), config.kernel, 1, d));
            skips.push(Conv1d::new(&mut init, &format!("skip{i}"), level_in(i), config.channels(i), 1, 1));
        }
        let eps_head = Linear::new(&mut init, "eps_head", c0, 2);
        let pen_head = Linear::new(&mut init, "pen_head", c0, 1);
        let model = Self {
            config,
            noise,
            style,
            encoder,
            input,
            down,
            down_attn,
            up,
            skips,
            eps_head,
            pen_head,
        };
        Ok((model, store))
    }

    fn check_image(&self, image: &StyleImage) -> Result<()> {
        let c = &self.config;
        if image.height() != c.style_height || image.width() != c.style_width {
            return Err(Error::Shape(format!(
                "style image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                c.style_height,
                c.style_width
            )));
        }
        Ok(())
    }

    /// Style features as a tape variable, so gradients reach the extractor.
    pub fn style_vars(&self, ctx: Ctx, image: &StyleImage) -> Result<(Var, usize, usize)> {
        self.check_image(image)?;
        let img = ctx.tape.constant(Tensor::new(
            image.height() * image.width(),
            1,
            image.pixels().to_vec(),
        ));
        Ok(self.style.forward(ctx, img, image.height(), image.width()))
    }

    pub fn style_features(&self, params: &ParamStore, image: &StyleImage) -> Result<StyleFeatureMap> {
        let tape = Tape::new();
        let vars = params.bind_frozen(&tape);
        let (v, gh, gw) = self.style_vars(Ctx::new(&tape, &vars), image)?;
        Ok(StyleFeatureMap {
            grid_height: gh,
            grid_width: gw,
            features: (*tape.value(v)).clone(),
        })
    }

    fn check_input(&self, input: &DenoiserInput) -> Result<()> {
        if !(input.level > 0.0 && input.level <= 1.0) {
            return Err(Error::LevelOutOfRange(input.level));
        }
        let (n, c) = input.y_t.shape();
        if n == 0 || c != 2 {
            return Err(Error::Shape(format!("y_t must be [n x 2] with n > 0, got {n}x{c}")));
        }
        if input.tokens.is_empty() || input.tokens.len() != input.token_mask.len() {
            return Err(Error::Shape("tokens and mask must be non-empty and equally long".into()));
        }
        if !input.token_mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("every token is masked".into()));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let StyleInput::Features(f) = input.style {
            if f.channels() != self.style.out_channels
                || f.features.rows() != f.grid_height * f.grid_width
            {
                return Err(Error::Shape("style feature map does not match the extractor".into()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: Ctx, input: &DenoiserInput) -> Result<ForwardVars> {
        self.check_input(input)?;
        let t = ctx.tape;
        let emb = self.noise.forward(ctx, input.level);
        let (style, grid_w) = match input.style {
            StyleInput::Image(img) => {
                let (v, _, gw) = self.style_vars(ctx, img)?;
                (v, gw)
            }
            StyleInput::Features(f) => (t.constant(f.features.clone()), f.grid_width),
            StyleInput::Traced(v, gw) => {
                let (rows, cols) = t.shape(v);
                if cols != self.style.out_channels || gw == 0 || rows % gw != 0 {
                    return Err(Error::Shape("style feature map does not match the extractor".into()));
                }
                (v, gw)
            }
        };
        let tokens: Vec<usize> = input.tokens.iter().map(|&x| x as usize).collect();
        let context = self
            .encoder
            .forward(ctx, &tokens, input.token_mask, style, grid_w, emb);

        let mut x = self.input.forward(ctx, t.constant(input.y_t.clone()));
        let mut saved = Vec::with_capacity(self.config.levels);
        let mut cross_attention = Vec::new();
        for (i, (block, attn)) in self.down.iter().zip(&self.down_attn).enumerate() {
            saved.push(x);
            x = block.forward(ctx, x, emb);
            if let Some(a) = attn {
                let o = a.forward(ctx, x, context, input.token_mask, emb);
                x = o.out;
                cross_attention.push(CrossAttention {
                    level: i,
                    weights: o.cross_weights,
                });
            }
        }
        for i in (0..self.config.levels).rev() {
            let target = t.shape(saved[i]).0;
            let h = t.upsample_rows(x, 2, target);
            let h = t.add(h, self.skips[i].forward(ctx, saved[i]));
            x = self.up[i].forward(ctx, h, emb);
        }
        let eps = self.eps_head.forward(ctx, x);
        let pen = t.sigmoid(self.pen_head.forward(ctx, x));
        Ok(ForwardVars {
            eps,
            pen,
            cross_attention,
        })
    }

    /// Forward pass without gradient bookkeeping for the parameters.
    pub fn predict(&self, params: &ParamStore, input: &DenoiserInput) -> Result<Prediction> {
        let tape = Tape::new();
        let vars = params.bind_frozen(&tape);
        let out = self.forward(Ctx::new(&tape, &vars), input)?;
        let eps = (*tape.value(out.eps)).clone();
        let pen_prob = tape.value(out.pen).data().to_vec();
        if !eps.all_finite() || pen_prob.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(Prediction {
            eps,
            pen_prob,
            cross_attention: out.cross_attention,
        })
    }
}
