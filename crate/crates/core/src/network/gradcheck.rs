//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};

use super::params::{Ctx, ParamId, ParamStore};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.samples.len()
    }

    pub fn failures(&self) -> usize {
        self.samples.iter().filter(|s| !(s.rel_error < self.tolerance)).count()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_ABS_FLOOR)
}

/// Compares analytic gradients of `loss` against central differences with
/// step `h` on `count` coordinates drawn without replacement (all of them
/// if there are fewer).
pub fn check_gradients(
    store: &ParamStore,
    count: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
    loss: impl Fn(Ctx) -> Var,
) -> GradCheckReport {
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let l = loss(Ctx::new(&tape, &vars));
    let grads = tape.backward(l);

    let mut offsets = Vec::with_capacity(store.len());
    let mut total = 0;
    for t in store.tensors() {
        offsets.push(total);
        total += t.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total <= count {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, count).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let vars = s.bind_frozen(&tape);
        let l = loss(Ctx::new(&tape, &vars));
        tape.value(l).item()
    };

    let mut work = store.clone();
    let mut samples = Vec::with_capacity(picks.len());
    for flat in picks {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let id = ParamId(p);
        let idx = flat - offsets[p];
        let orig = store.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + h;
        let up = eval(&work);
        work.get_mut(id).data_mut()[idx] = orig - h;
        let down = eval(&work);
        work.get_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(vars[p]).map_or(0.0, |g| g.data()[idx]);
        samples.push(GradSample {
            param: store.name(id).to_string(),
            index: idx,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    GradCheckReport { samples, tolerance }
}

/// `sum(x * R)` for a fixed random `R`: a scalar that depends on every
/// element of `x`.
pub fn projection_loss(tape: &Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = tape.constant(Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)));
    tape.sum_all(tape.mul(x, proj))
}

/// Replaces every parameter with uniform noise in `±scale`, so that no
/// path is switched off by a zero initialization.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// Settings shared by the block and model checks.
#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub samples_per_block: usize,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            samples_per_block: 200,
            h: 1e-5,
            tolerance: 1e-3,
            seed: 7,
        }
    }
}

/// Gradient checks for every block type in isolation and for the tiny
/// assembled denoiser (d_model 16, one level, 16 stroke points, 4 tokens).
pub fn standard_suite(opts: SuiteOptions) -> Vec<(&'static str, GradCheckReport)> {
    use super::{
        AffineCondition, AttnBlock, ConvBlock, Denoiser, DenoiserInput, Encoder, Init,
        ModelConfig, NoiseEmbedding, StyleInput, StyleNet,
    };
    use crate::data::StyleImage;

    let seed = opts.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |r: usize, c: usize| Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let x6 = rand_t(7, 6);
    let x8 = rand_t(9, 8);
    let ctx8 = rand_t(4, 8);
    let emb4 = rand_t(1, 4);
    let image = StyleImage::new(8, 16, rand_t(8, 16).data().iter().map(|v| (v + 1.0) / 2.0).collect())
        .expect("pixels in range");
    let mut out = Vec::new();
    let run = |store: &mut ParamStore, name: &'static str, loss: &dyn Fn(Ctx) -> Var| {
        randomize(store, 0.5, seed ^ 0x5eed);
        (name, check_gradients(store, opts.samples_per_block, opts.h, opts.tolerance, seed, loss))
    };

    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let aff = AffineCondition::new(&mut Init { store: &mut store, rng: &mut r }, "affine", 4, 6);
        out.push(run(&mut store, "affine_condition", &|c: Ctx| {
            let y = aff.forward(c, c.tape.constant(x6.clone()), c.tape.constant(emb4.clone()));
            projection_loss(c.tape, y, 1)
        }));
    }
    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ne = NoiseEmbedding::new(&mut Init { store: &mut store, rng: &mut r }, "noise", 6);
        out.push(run(&mut store, "noise_embedding", &|c: Ctx| {
            projection_loss(c.tape, ne.forward(c, 0.37), 2)
        }));
    }
    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let block = ConvBlock::new(&mut Init { store: &mut store, rng: &mut r }, "conv", 6, 8, 3, 2, 4);
        out.push(run(&mut store, "conv_block", &|c: Ctx| {
            let y = block.forward(c, c.tape.constant(x6.clone()), c.tape.constant(emb4.clone()));
            projection_loss(c.tape, y, 3)
        }));
    }
    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let block = AttnBlock::new(&mut Init { store: &mut store, rng: &mut r }, "attn", 8, 8, 4, 2, 2);
        let mask = [true, true, false, true];
        out.push(run(&mut store, "attn_block", &|c: Ctx| {
            let t = c.tape;
            let y = block.forward(c, t.constant(x8.clone()), t.constant(ctx8.clone()), &mask, t.constant(emb4.clone()));
            projection_loss(t, y.out, 4)
        }));
    }
    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let net = StyleNet::new(&mut Init { store: &mut store, rng: &mut r }, "style", &[3, 4]);
        let img = Tensor::new(8 * 16, 1, image.pixels().to_vec());
        out.push(run(&mut store, "style_features", &|c: Ctx| {
            let (y, _, _) = net.forward(c, c.tape.constant(img.clone()), 8, 16);
            projection_loss(c.tape, y, 5)
        }));
    }
    {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut Init { store: &mut store, rng: &mut r }, "encoder", 6, 8, 8, 2, 2);
        let tokens = [2, 5, 3, 0];
        let mask = [true, true, true, false];
        out.push(run(&mut store, "encoder", &|c: Ctx| {
            let t = c.tape;
            let y = enc.forward(c, &tokens, &mask, t.constant(x8.clone()), 3, t.constant(rand_emb8()));
            projection_loss(t, y, 6)
        }));
    }
    {
        let (model, mut store) = Denoiser::new(ModelConfig::tiny(8), seed).expect("tiny config is valid");
        let y = Tensor::from_fn(16, 2, |r, c| ((r * 2 + c) as f64 * 0.37).sin());
        let tokens = [2, 3, 4, 5];
        let mask = [true; 4];
        let target = std::rc::Rc::new(Tensor::from_fn(16, 1, |r, _| (r % 3 == 2) as u8 as f64));
        out.push(run(&mut store, "denoiser_tiny", &|c: Ctx| {
            let t = c.tape;
            let input = DenoiserInput {
                y_t: &y,
                tokens: &tokens,
                token_mask: &mask,
                style: StyleInput::Image(&image),
                level: 0.6,
            };
            let f = model.forward(c, &input).expect("valid input");
            let eps_loss = projection_loss(t, f.eps, 7);
            let pen_loss = t.bce_sum(f.pen, target.clone(), 1e-7);
            t.add(eps_loss, pen_loss)
        }));
    }
    out
}

fn rand_emb8() -> Tensor {
    Tensor::from_fn(1, 8, |_, c| (c as f64 * 0.7).cos())
}
