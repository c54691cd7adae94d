use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::{make_batches, Batch, StyleImage, TrainingExample};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::network::{Ctx, Denoiser, DenoiserInput, ParamStore, StyleInput};

use super::config::TrainConfig;
use super::loss::{pen_loss, pen_loss_var, stroke_loss, stroke_loss_var};
use super::optim::{clip_global_norm, lr_at, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Batch mean of the per-item stroke losses.
    pub loss_stroke: f64,
    /// Batch mean of the unweighted pen losses.
    pub loss_pen: f64,
    /// Batch mean of `loss_stroke + alpha_bar * loss_pen`, the objective.
    pub loss: f64,
    /// Batch mean of the sampled signal level.
    pub level: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_stroke,loss_pen,level,grad_norm,lr,loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.loss_stroke, self.loss_pen, self.level, self.grad_norm, self.lr, self.loss
        )
    }
}

/// Random stream for optimizer step `step`; a function of the seed only,
/// so a resumed run draws the same numbers.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    r.set_stream(epoch);
    r
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// One noising draw for a training item.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub level: f64,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(schedule: &NoiseSchedule, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let t = rng.gen_range(1..=schedule.steps());
        let level = schedule.sample_noise_level(t, rng)?;
        let eps = standard_normal(rng, n, 2);
        Ok(Self { t, level, eps })
    }

    /// `level * y0 + sqrt(1 - level^2) * eps`
    pub fn noisy(&self, y0: &[f64]) -> Tensor {
        let s = (1.0 - self.level * self.level).max(0.0).sqrt();
        let data = y0
            .iter()
            .zip(self.eps.data())
            .map(|(y, e)| self.level * y + s * e)
            .collect();
        Tensor::new(self.eps.rows(), 2, data)
    }
}

/// Algorithm-1 update on one batch: every item draws its own step, level
/// and noise; the objective is the batch mean of
/// `stroke_loss + alpha_bar * pen_loss`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Denoiser,
    params: &mut ParamStore,
    adam: &mut Adam,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    batch: &Batch,
    step: u64,
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let ctx = Ctx::new(&tape, &vars);
    let mut terms = Vec::with_capacity(batch.size);
    let (mut sum_stroke, mut sum_pen, mut sum_level, mut sum_total) = (0.0, 0.0, 0.0, 0.0);
    let mut draws = Vec::with_capacity(batch.size);
    // Items sharing a style image share one pass through the style extractor.
    let mut styles: Vec<(&[f64], Var, usize)> = Vec::new();
    for i in 0..batch.size {
        let item = batch.item(i);
        let n = item.d0.len();
        let draw = NoiseDraw::sample(schedule, n, rng)?;
        let weight = draw.level * draw.level;
        debug_assert!(weight > 0.0 && weight < 1.0);
        let y_t = draw.noisy(item.y0);
        let mask: Vec<bool> = item.token_mask.iter().map(|&m| m > 0.0).collect();
        let (style, grid_w) = match styles.iter().find(|s| s.0 == item.style) {
            Some(&(_, v, gw)) => (v, gw),
            None => {
                let image = StyleImage::new(batch.image_height, batch.image_width, item.style.to_vec())?;
                let (v, _, gw) = model.style_vars(ctx, &image)?;
                styles.push((item.style, v, gw));
                (v, gw)
            }
        };
        let out = model.forward(
            ctx,
            &DenoiserInput {
                y_t: &y_t,
                tokens: item.tokens,
                token_mask: &mask,
                style: StyleInput::Traced(style, grid_w),
                level: draw.level,
            },
        )?;
        let ls = stroke_loss_var(&tape, &draw.eps, out.eps);
        let lp = pen_loss_var(&tape, item.d0, out.pen);
        let (vs, vp) = (tape.value(ls).item(), tape.value(lp).item());
        sum_stroke += vs;
        sum_pen += vp;
        sum_level += draw.level;
        sum_total += vs + weight * vp;
        terms.push(tape.add(ls, tape.scale(lp, weight)));
        draws.push((batch.source[i], draw.t, draw.level));
    }
    let b = batch.size as f64;
    let total = terms[1..].iter().fold(terms[0], |acc, &v| tape.add(acc, v));
    let loss = tape.scale(total, 1.0 / b);
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {step}; items (source, t, level): {draws:?}"
        )));
    }
    let mut grads_raw = tape.backward(loss);
    let mut grads: Vec<Tensor> = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads_raw.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm at step {step}; items (source, t, level): {draws:?}"
        )));
    }
    let lr = config.lr_scale * lr_at(step, config.lr_d_model, config.warmup_steps);
    adam.update(params.tensors_mut(), &grads, lr)?;
    Ok(StepMetrics {
        step,
        loss_stroke: sum_stroke / b,
        loss_pen: sum_pen / b,
        loss: sum_total / b,
        level: sum_level / b,
        grad_norm,
        lr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub stroke: f64,
    pub pen: f64,
    /// Mean of `stroke + alpha_bar * pen` over all draws.
    pub combined: f64,
}

/// Training objective averaged over `draws` fixed noising draws per
/// example. The draws depend only on `seed`, so two parameter sets are
/// compared on identical noise.
pub fn evaluate_loss(
    model: &Denoiser,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    examples: &[TrainingExample],
    draws: usize,
    seed: u64,
) -> Result<EvalLoss> {
    let (mut s, mut p, mut c, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (e, ex) in examples.iter().enumerate() {
        let y0 = ex.strokes.flat_offsets();
        let d0: Vec<f64> = ex.strokes.pen_lift().iter().map(|&l| l as u8 as f64).collect();
        let mask = vec![true; ex.tokens.len()];
        let all = vec![true; d0.len()];
        for k in 0..draws {
            let mut rng = step_rng(seed, (e * draws + k) as u64);
            let draw = NoiseDraw::sample(schedule, d0.len(), &mut rng)?;
            let pred = model.predict(
                params,
                &DenoiserInput {
                    y_t: &draw.noisy(&y0),
                    tokens: &ex.tokens,
                    token_mask: &mask,
                    style: StyleInput::Image(&ex.style),
                    level: draw.level,
                },
            )?;
            let ls = stroke_loss(&draw.eps, &pred.eps, &all)?;
            let lp = pen_loss(&d0, &pred.pen_prob, &all)?;
            s += ls;
            p += lp;
            c += ls + draw.level * draw.level * lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n = count as f64;
    Ok(EvalLoss {
        stroke: s / n,
        pen: p / n,
        combined: c / n,
    })
}

/// Owns parameters and optimizer state and walks through the data in
/// length-bucketed batches, reshuffled every epoch.
pub struct Trainer {
    pub model: Denoiser,
    pub params: ParamStore,
    pub adam: Adam,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub examples: Vec<TrainingExample>,
    /// Number of updates applied so far.
    pub step: u64,
    epoch: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: Vec<TrainingExample>, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let (model, params) = Denoiser::new(config.model_config(vocab_size), config.seed)?;
        let adam = Adam::new(config.adam, params.tensors());
        Self::resume(config, model, params, adam, 0, examples)
    }

    pub fn resume(
        config: TrainConfig,
        model: Denoiser,
        params: ParamStore,
        adam: Adam,
        step: u64,
        examples: Vec<TrainingExample>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let schedule = config.schedule.build()?;
        Ok(Self {
            model,
            params,
            adam,
            schedule,
            config,
            examples,
            step,
            epoch: None,
        })
    }

    fn batches_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.config.batch_size) as u64
    }

    /// The batch used by the next update.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let per = self.batches_per_epoch();
        let epoch = self.step / per;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng = epoch_rng(self.config.seed, epoch);
            let batches = make_batches(&self.examples, self.config.batch_size, &mut rng)?;
            self.epoch = Some((epoch, batches));
        }
        let batches = &self.epoch.as_ref().expect("epoch filled above").1;
        Ok(batches[(self.step % per) as usize].clone())
    }

    pub fn train_one(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        let next = self.step + 1;
        let mut rng = step_rng(self.config.seed, next);
        let m = train_step(
            &self.model,
            &mut self.params,
            &mut self.adam,
            &self.schedule,
            &self.config,
            &batch,
            next,
            &mut rng,
        )?;
        self.step = next;
        Ok(m)
    }

    /// Runs `steps` updates, passing each step's metrics to `observe`.
    pub fn run(&mut self, steps: u64, mut observe: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.train_one()?;
            observe(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn evaluate(&self, seed: u64) -> Result<EvalLoss> {
        evaluate_loss(
            &self.model,
            &self.params,
            &self.schedule,
            &self.examples,
            self.config.eval_draws,
            seed,
        )
    }
}
