//! Reverse-process sampling, style interpolation, attention-alignment
//! diagnostics and the sampler ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{StrokeSequence, StyleImage, TrainingExample, Vocab, PAD};
use crate::diffusion::{reverse_step_modified, reverse_step_original, NoiseSchedule};
use crate::error::{Error, Result};
use crate::network::{Denoiser, DenoiserInput, ParamStore, StyleFeatureMap, StyleInput};
use crate::training::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Predict the clean sequence, then renoise to the previous level.
    #[default]
    Modified,
    /// Ancestral step with `sqrt(beta_t)` noise.
    Original,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modified" => Ok(Self::Modified),
            "original" => Ok(Self::Original),
            _ => Err(Error::InvalidArgument(format!(
                "sampler must be modified or original, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Modified => "modified",
            Self::Original => "original",
        })
    }
}

/// A noise estimator with its conditioning already fixed.
pub trait NoisePredictor {
    /// Returns `(eps_hat [n x 2], pen probabilities [n])`.
    fn predict(&self, y_t: &Tensor, level: f64) -> Result<(Tensor, Vec<f64>)>;
}

/// The trained model conditioned on a text and a style feature map.
pub struct ConditionedModel<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParamStore,
    pub tokens: Vec<u32>,
    pub token_mask: Vec<bool>,
    pub style: StyleFeatureMap,
}

impl<'a> ConditionedModel<'a> {
    pub fn new(model: &'a Denoiser, params: &'a ParamStore, tokens: Vec<u32>, style: StyleFeatureMap) -> Self {
        let token_mask = tokens.iter().map(|&t| t != PAD).collect();
        Self {
            model,
            params,
            tokens,
            token_mask,
            style,
        }
    }

    pub fn input<'b>(&'b self, y_t: &'b Tensor, level: f64) -> DenoiserInput<'b> {
        DenoiserInput {
            y_t,
            tokens: &self.tokens,
            token_mask: &self.token_mask,
            style: StyleInput::Features(&self.style),
            level,
        }
    }
}

impl NoisePredictor for ConditionedModel<'_> {
    fn predict(&self, y_t: &Tensor, level: f64) -> Result<(Tensor, Vec<f64>)> {
        let p = self.model.predict(self.params, &self.input(y_t, level))?;
        Ok((p.eps, p.pen_prob))
    }
}

/// Result of a reverse-process run in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[n x 2]` offsets.
    pub y0: Tensor,
    /// Lift probabilities from the last model evaluation.
    pub pen_prob: Vec<f64>,
}

impl SampleOutput {
    /// Offsets scaled by `scale`, lifts where the probability exceeds 0.5.
    pub fn to_strokes(&self, scale: f64) -> Result<StrokeSequence> {
        let lifts = self.pen_prob.iter().map(|&p| p > 0.5).collect();
        let flat: Vec<f64> = self.y0.data().iter().map(|v| v * scale).collect();
        StrokeSequence::from_flat(&flat, lifts)
    }
}

/// Runs the reverse chain from `y_start` for steps `num_steps..=1`.
/// `noise(t, n)` supplies `z` for steps `t > 1`; step 1 adds no noise.
pub fn sample_loop(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    y_start: Tensor,
    num_steps: usize,
    noise: &mut dyn FnMut(usize, usize) -> Tensor,
) -> Result<SampleOutput> {
    if num_steps == 0 || num_steps > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t: num_steps,
            steps: schedule.steps(),
        });
    }
    let n = y_start.rows();
    let mut y = y_start;
    let mut pen = Vec::new();
    for t in (1..=num_steps).rev() {
        let (eps, p) = predictor.predict(&y, schedule.level(t))?;
        pen = p;
        let z = if t > 1 { noise(t, n) } else { Tensor::zeros(n, 2) };
        let next = match sampler {
            Sampler::Modified => reverse_step_modified(y.data(), eps.data(), z.data(), schedule, t)?,
            Sampler::Original => reverse_step_original(y.data(), eps.data(), z.data(), schedule, t)?,
        };
        y = Tensor::new(n, 2, next);
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("sample at step {t}")));
        }
    }
    Ok(SampleOutput { y0: y, pen_prob: pen })
}

/// `y_T ~ N(0, I)` and `z ~ N(0, I)` from one seeded stream, so a seed
/// reproduces a sample and both samplers see the same draws.
pub fn sample_seeded(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    length: usize,
    num_steps: usize,
    seed: u64,
) -> Result<SampleOutput> {
    if length == 0 {
        return Err(Error::InvalidArgument("output length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = standard_normal(&mut rng, length, 2);
    sample_loop(predictor, schedule, sampler, start, num_steps, &mut |_, n| {
        standard_normal(&mut rng, n, 2)
    })
}

/// `lambda * s0 + (1 - lambda) * s1`.
pub fn interpolate_styles(s0: &StyleFeatureMap, s1: &StyleFeatureMap, lambda: f64) -> Result<StyleFeatureMap> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if s0.features.shape() != s1.features.shape() || s0.grid_width != s1.grid_width {
        return Err(Error::Shape("style feature maps differ in shape".into()));
    }
    let data = s0
        .features
        .data()
        .iter()
        .zip(s1.features.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(StyleFeatureMap {
        grid_height: s0.grid_height,
        grid_width: s0.grid_width,
        features: Tensor::new(s0.features.rows(), s0.features.cols(), data),
    })
}

/// Output length from text length: `ceil(points_per_char * chars)`.
pub fn default_length(points_per_char: f64, chars: usize) -> usize {
    ((points_per_char * chars as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub text: String,
    pub sampler: Sampler,
    /// Defaults to the schedule length.
    pub num_steps: Option<usize>,
    /// Defaults to [`default_length`].
    pub length: Option<usize>,
    pub seed: u64,
    /// Largest tolerated fraction of out-of-vocabulary characters.
    pub max_unknown_fraction: f64,
}

impl GenerateRequest {
    pub fn new(text: impl Into<String>, seed: u64) -> Self {
        Self {
            text: text.into(),
            sampler: Sampler::Modified,
            num_steps: None,
            length: None,
            seed,
            max_unknown_fraction: 0.5,
        }
    }
}

/// Everything sampling needs from a trained checkpoint.
pub struct Generator<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocab,
    pub schedule: NoiseSchedule,
    pub corpus_scale: f64,
    pub points_per_char: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Denormalized strokes.
    pub strokes: StrokeSequence,
    pub normalized: SampleOutput,
    pub seed: u64,
}

impl Generator<'_> {
    pub fn style_features(&self, image: &StyleImage) -> Result<StyleFeatureMap> {
        self.model.style_features(self.params, image)
    }

    pub fn generate(&self, request: &GenerateRequest, style: &StyleFeatureMap) -> Result<Generated> {
        let tokens = self.vocab.tokenize(&request.text)?;
        let chars = tokens.ids.len();
        if tokens.unknown as f64 > request.max_unknown_fraction * chars as f64 {
            return Err(Error::Data(format!(
                "{} of {chars} characters are outside the vocabulary",
                tokens.unknown
            )));
        }
        let length = request
            .length
            .unwrap_or_else(|| default_length(self.points_per_char, chars));
        let steps = request.num_steps.unwrap_or(self.schedule.steps());
        let cond = ConditionedModel::new(self.model, self.params, tokens.ids, style.clone());
        let out = sample_seeded(&cond, &self.schedule, request.sampler, length, steps, request.seed)?;
        Ok(Generated {
            strokes: out.to_strokes(self.corpus_scale)?,
            normalized: out,
            seed: request.seed,
        })
    }
}

/// Summary of a cross-attention map between stroke positions (rows) and
/// text positions (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub weights: Tensor,
    pub argmax: Vec<usize>,
    /// Among consecutive stroke positions whose argmax changes, the
    /// fraction where it moves forward; 1 when it never changes.
    pub monotonicity: f64,
    /// Mean over stroke positions of `sum_j w_ij |j - floor(i Lc / Ls)| / Lc`.
    pub deviation: f64,
}

impl AlignmentReport {
    pub fn from_weights(weights: Tensor) -> Self {
        let (ls, lc) = weights.shape();
        let argmax: Vec<usize> = (0..ls)
            .map(|i| {
                let row = weights.row_slice(i);
                (0..lc).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect();
        let (mut up, mut changes) = (0usize, 0usize);
        for w in argmax.windows(2) {
            if w[1] != w[0] {
                changes += 1;
                if w[1] > w[0] {
                    up += 1;
                }
            }
        }
        let monotonicity = if changes == 0 { 1.0 } else { up as f64 / changes as f64 };
        let deviation = if ls == 0 || lc == 0 {
            0.0
        } else {
            (0..ls)
                .map(|i| {
                    let ideal = (i * lc / ls) as f64;
                    weights
                        .row_slice(i)
                        .iter()
                        .enumerate()
                        .map(|(j, w)| w * (j as f64 - ideal).abs())
                        .sum::<f64>()
                        / lc as f64
                })
                .sum::<f64>()
                / ls as f64
        };
        Self {
            weights,
            argmax,
            monotonicity,
            deviation,
        }
    }

    /// Weight matrix as CSV, one stroke position per line.
    pub fn weights_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.weights.rows() {
            let row: Vec<String> = self.weights.row_slice(r).iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Alignment of cross-attention block `block` (0 is the highest
/// resolution that has attention) for one forward pass.
pub fn attention_alignment(
    model: &Denoiser,
    params: &ParamStore,
    input: &DenoiserInput,
    block: usize,
) -> Result<AlignmentReport> {
    let p = model.predict(params, input)?;
    let n = p.cross_attention.len();
    let a = p
        .cross_attention
        .into_iter()
        .nth(block)
        .ok_or_else(|| Error::InvalidArgument(format!("attention block {block} of {n}")))?;
    let real = input.token_mask.iter().filter(|&&m| m).count();
    let w = Tensor::from_fn(a.weights.rows(), real, |r, c| a.weights.get(r, c));
    Ok(AlignmentReport::from_weights(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Population std of all offset coordinates.
    pub offset_std: f64,
    /// Mean number of points per pen-down run.
    pub mean_run_length: f64,
    pub pen_lift_rate: f64,
}

impl SampleStats {
    pub fn of(strokes: &StrokeSequence) -> Self {
        let runs = strokes.run_lengths();
        let n = strokes.len().max(1) as f64;
        Self {
            offset_std: strokes.pooled_std(),
            mean_run_length: if runs.is_empty() {
                0.0
            } else {
                runs.iter().sum::<usize>() as f64 / runs.len() as f64
            },
            pen_lift_rate: strokes.pen_lift().iter().filter(|&&l| l).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub id: String,
    pub seed: u64,
    pub modified: StrokeSequence,
    pub original: StrokeSequence,
    pub modified_stats: SampleStats,
    pub original_stats: SampleStats,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn summary(&self) -> (SampleStats, SampleStats) {
        let mean = |f: &dyn Fn(&AblationEntry) -> SampleStats| {
            let n = self.entries.len().max(1) as f64;
            let s = self.entries.iter().map(f).fold((0.0, 0.0, 0.0), |a, s| {
                (a.0 + s.offset_std, a.1 + s.mean_run_length, a.2 + s.pen_lift_rate)
            });
            SampleStats {
                offset_std: s.0 / n,
                mean_run_length: s.1 / n,
                pen_lift_rate: s.2 / n,
            }
        };
        (mean(&|e| e.modified_stats), mean(&|e| e.original_stats))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("id,seed,sampler,offset_std,mean_run_length,pen_lift_rate\n");
        for e in &self.entries {
            for (name, st) in [("modified", e.modified_stats), ("original", e.original_stats)] {
                s.push_str(&format!(
                    "{},{},{name},{:.6},{:.6},{:.6}\n",
                    e.id, e.seed, st.offset_std, st.mean_run_length, st.pen_lift_rate
                ));
            }
        }
        s
    }
}

/// One ablation item: an identifier, a conditioned predictor and the
/// output length.
pub struct AblationItem<'a> {
    pub id: String,
    pub predictor: Box<dyn NoisePredictor + 'a>,
    pub length: usize,
}

/// Samples every item with both samplers at seed `base_seed + index`.
pub fn ablation_run(items: &[AblationItem], schedule: &NoiseSchedule, base_seed: u64, scale: f64) -> Result<AblationReport> {
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let seed = base_seed + i as u64;
        let steps = schedule.steps();
        let m = sample_seeded(item.predictor.as_ref(), schedule, Sampler::Modified, item.length, steps, seed)?
            .to_strokes(scale)?;
        let o = sample_seeded(item.predictor.as_ref(), schedule, Sampler::Original, item.length, steps, seed)?
            .to_strokes(scale)?;
        entries.push(AblationEntry {
            id: item.id.clone(),
            seed,
            modified_stats: SampleStats::of(&m),
            original_stats: SampleStats::of(&o),
            modified: m,
            original: o,
        });
    }
    Ok(AblationReport { entries })
}

/// Ablation over training examples, each conditioned on its own text and
/// style and sampled at its own length.
pub fn ablation_run_model(
    model: &Denoiser,
    params: &ParamStore,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    base_seed: u64,
    scale: f64,
) -> Result<AblationReport> {
    let items = examples
        .iter()
        .map(|e| {
            let style = model.style_features(params, &e.style)?;
            Ok(AblationItem {
                id: e.id.clone(),
                predictor: Box::new(ConditionedModel::new(model, params, e.tokens.clone(), style)),
                length: e.strokes.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ablation_run(&items, schedule, base_seed, scale)
}

/// Predictor that always returns zero noise and a fixed pen probability.
pub struct ZeroPredictor {
    pub pen: f64,
}

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, y_t: &Tensor, _level: f64) -> Result<(Tensor, Vec<f64>)> {
        Ok((Tensor::zeros(y_t.rows(), 2), vec![self.pen; y_t.rows()]))
    }
}
