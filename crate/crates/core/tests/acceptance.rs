//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use strokediff::autograd::Tensor;
use strokediff::data::synthetic::{straight_line_word, synth_corpus, synth_strokes, WriterStyle};
use strokediff::data::{
    filter_outliers, merge_collinear, prepare, DatasetRecord, PrepareOptions, StrokeSequence, StyleDims, StyleImage,
    TrainingExample, Vocab, DEFAULT_ANGLE_TOL, DEFAULT_OUTLIER_K,
};
use strokediff::diffusion::{noise_step, recover_y0, reverse_step_modified, NoiseSchedule, ScheduleConfig};
use strokediff::generation::{
    ablation_run_model, sample_loop, sample_seeded, AlignmentReport, ConditionedModel, Sampler, ZeroPredictor,
};
use strokediff::network::gradcheck::{standard_suite, SuiteOptions};
use strokediff::render::{emit_svg, polylines_to_offsets, svg_string, to_polylines, Polyline};
use strokediff::training::{TrainConfig, Trainer};

const BETA_FIRST: f64 = 0.02001;
const BETA_LAST: f64 = 0.42;
const ALPHA_BAR_REL_TOL: f64 = 1e-10;
const SAMPLER_REL_TOL: f64 = 1e-6;
const SAMPLER_INSTANCES: usize = 10_000;
const FORWARD_TRIALS: usize = 100_000;
const FORWARD_SE: f64 = 3.0;
const GRAD_TOL: f64 = 1e-3;
const GRAD_MIN_COORDS: usize = 200;
const OVERFIT_MAX_STEPS: u64 = 2000;
const OVERFIT_MIN_REDUCTION: f64 = 0.9;
const OVERFIT_GEN_TOL: f64 = 0.1;
const TELESCOPE_TOL: f64 = 1e-6;
const OUTLIER_SIGMA: f64 = 16.0;
const MERGE_RECORDS: usize = 1000;
const ENDPOINT_TOL: f64 = 1e-6;

/// Training settings for the overfit run.
const OVERFIT_LR_SCALE: f64 = 0.5;
const OVERFIT_WARMUP: u64 = 200;
const OVERFIT_COPIES: usize = 4;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget {budget:?}")),
            Err(d) => (false, d),
        };
        if !pass {
            self.failures += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {:.2}s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn paper_schedule() -> NoiseSchedule {
    ScheduleConfig {
        steps: 60,
        base: 0.02,
        lo: 1e-5,
        hi: 0.4,
    }
    .build()
    .unwrap()
}

fn schedule_constants() -> Outcome {
    let s = paper_schedule();
    let (b1, b60) = (s.beta(1), s.beta(60));
    // Independent oracle: geometric terms by direct exponentiation, product
    // accumulated as a compensated sum of logarithms.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in 1..=60 {
        let beta = 0.02 + 1e-5 * (0.4f64 / 1e-5).powf((t - 1) as f64 / 59.0);
        let y = (-beta).ln_1p() - comp;
        let next = sum + y;
        comp = (next - sum) - y;
        sum = next;
    }
    let oracle = sum.exp();
    let rel = (s.alpha_bar(60) - oracle).abs() / oracle;
    let ok = (b1 - BETA_FIRST).abs() <= 1e-15 && (b60 - BETA_LAST).abs() <= 1e-15 && rel < ALPHA_BAR_REL_TOL;
    let d = format!("beta_1={b1:.12} beta_60={b60:.12} alpha_bar_60 rel err {rel:.2e}");
    check(ok, d.clone(), d)
}

fn sampler_identity() -> Outcome {
    let s = paper_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..SAMPLER_INSTANCES {
        let t = rng.gen_range(1..=60);
        let n = rng.gen_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect() };
        let (y, e, z) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let got = reverse_step_modified(&y, &e, &z, &s, t).unwrap();
        let y0 = recover_y0(&y, &e, s.alpha_bar(t)).unwrap();
        let (keep, add) = (s.alpha_bar(t - 1).sqrt(), (1.0 - s.alpha_bar(t - 1)).sqrt());
        for i in 0..n {
            let want = keep * y0[i] + add * z[i];
            worst = worst.max((got[i] - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    let d = format!("{SAMPLER_INSTANCES} instances, max rel err {worst:.2e}");
    check(worst < SAMPLER_REL_TOL, d.clone(), d)
}

fn forward_consistency() -> Outcome {
    let s = paper_schedule();
    let y0 = 1.5;
    let mut lines = Vec::new();
    let mut ok = true;
    for (k, &t) in [1usize, 20, 60].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let mut y = vec![y0; FORWARD_TRIALS];
        for step in 1..=t {
            let eps: Vec<f64> = (0..FORWARD_TRIALS).map(|_| rng.sample(StandardNormal)).collect();
            y = noise_step(&y, s.beta(step), &eps).unwrap();
        }
        let n = FORWARD_TRIALS as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(t);
        let (want_mean, want_var) = (ab.sqrt() * y0, 1.0 - ab);
        let z_mean = (mean - want_mean) / (want_var / n).sqrt();
        let z_var = (var - want_var) / (want_var * (2.0 / (n - 1.0)).sqrt());
        ok &= z_mean.abs() <= FORWARD_SE && z_var.abs() <= FORWARD_SE;
        lines.push(format!("t={t} mean z {z_mean:+.2} var z {z_var:+.2}"));
    }
    let d = lines.join(", ");
    check(ok, d.clone(), d)
}

fn gradient_checks() -> Outcome {
    let opts = SuiteOptions {
        tolerance: GRAD_TOL,
        samples_per_block: GRAD_MIN_COORDS,
        ..SuiteOptions::default()
    };
    let reports = standard_suite(opts);
    let mut ok = !reports.is_empty();
    let mut worst = 0.0f64;
    let mut total = 0;
    let mut bad = Vec::new();
    for (name, r) in &reports {
        worst = worst.max(r.max_rel_error());
        total += r.checked();
        if !r.passed() || r.checked() == 0 {
            ok = false;
            bad.push(format!("{name}: {} of {} failed", r.failures(), r.checked()));
        }
    }
    let d = format!("{} blocks, {total} coordinates, max rel err {worst:.2e}", reports.len());
    check(ok && total >= GRAD_MIN_COORDS, d.clone(), format!("{d}; {}", bad.join("; ")))
}

/// The fixed four-record corpus for the overfit run.
fn overfit_corpus() -> (Vec<TrainingExample>, Vocab) {
    let dims = StyleDims::default();
    let records = synth_corpus(&["hand", "wave", "dot", "ink"], &[WriterStyle { slant: 0.3, scale: 1.0 }], 3, dims);
    let prepared = prepare(&records, &PrepareOptions::default()).unwrap();
    let vocab = Vocab::from_texts(prepared.records.iter().map(|r| r.text.as_str()));
    let examples = prepared
        .records
        .iter()
        .map(|r| TrainingExample::from_record(r, &vocab).unwrap())
        .collect();
    (examples, vocab)
}

fn mean_point_error(y: &Tensor, target: &StrokeSequence) -> f64 {
    let t = target.offsets();
    (0..t.len())
        .map(|i| (y.get(i, 0) - t[i][0]).hypot(y.get(i, 1) - t[i][1]))
        .sum::<f64>()
        / t.len() as f64
}

fn overfit(trained: &mut Option<(Trainer, Vec<TrainingExample>)>) -> Outcome {
    let (examples, vocab) = overfit_corpus();
    let mut copies = Vec::new();
    for k in 0..OVERFIT_COPIES {
        for e in &examples {
            let mut e = e.clone();
            e.id = format!("{}#{k}", e.id);
            copies.push(e);
        }
    }
    let mut config = TrainConfig::default();
    config.batch_size = copies.len();
    config.lr_scale = OVERFIT_LR_SCALE;
    config.warmup_steps = OVERFIT_WARMUP;
    config.total_steps = OVERFIT_MAX_STEPS;
    let mut trainer = Trainer::new(config, copies, vocab.size()).map_err(|e| e.to_string())?;
    let before = trainer.evaluate(99).map_err(|e| e.to_string())?;
    trainer.run(OVERFIT_MAX_STEPS, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let after = trainer.evaluate(99).map_err(|e| e.to_string())?;
    let reduction = 1.0 - after.combined / before.combined;

    let mut errors = Vec::new();
    for e in &examples {
        let style = trainer.model.style_features(&trainer.params, &e.style).map_err(|e| e.to_string())?;
        let cond = ConditionedModel::new(&trainer.model, &trainer.params, e.tokens.clone(), style);
        let out = sample_seeded(&cond, &trainer.schedule, Sampler::Modified, e.strokes.len(), 60, 0)
            .map_err(|e| e.to_string())?;
        errors.push(mean_point_error(&out.y0, &e.strokes));
    }
    let gen_err = errors.iter().sum::<f64>() / errors.len() as f64;
    let d = format!(
        "{OVERFIT_MAX_STEPS} steps, loss {:.4} -> {:.4} ({:.1}% reduction), generation error per text {} mean {gen_err:.4}",
        before.combined,
        after.combined,
        100.0 * reduction,
        errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join("/")
    );
    *trained = Some((trainer, examples));
    check(reduction >= OVERFIT_MIN_REDUCTION && gen_err <= OVERFIT_GEN_TOL, d.clone(), d)
}

fn telescoping() -> Outcome {
    let s = paper_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y_t = Tensor::from_fn(32, 2, |_, _| rng.sample(StandardNormal));
    let out = sample_loop(&ZeroPredictor { pen: 0.0 }, &s, Sampler::Modified, y_t.clone(), 60, &mut |_, n| {
        Tensor::zeros(n, 2)
    })
    .map_err(|e| e.to_string())?;
    let factor = 1.0 / s.alpha_bar(60).sqrt();
    let worst = out
        .y0
        .data()
        .iter()
        .zip(y_t.data())
        .map(|(a, b)| (a - b * factor).abs())
        .fold(0.0, f64::max);
    let d = format!("max abs deviation from y_T/sqrt(alpha_bar_T) {worst:.2e}");
    check(worst <= TELESCOPE_TOL, d.clone(), d)
}

fn ablation(trained: &Option<(Trainer, Vec<TrainingExample>)>) -> Outcome {
    let Some((trainer, examples)) = trained else {
        return Err("no overfit model available".into());
    };
    let run = || ablation_run_model(&trainer.model, &trainer.params, examples, &trainer.schedule, 500, 1.0);
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    let paired = a.entries.len() == examples.len()
        && a.entries.iter().all(|e| e.modified.len() == e.original.len() && e.modified != e.original);
    let finite = a.entries.iter().all(|e| {
        [e.modified_stats, e.original_stats]
            .iter()
            .all(|s| s.offset_std.is_finite() && s.mean_run_length.is_finite() && s.pen_lift_rate.is_finite())
    });
    let (m, o) = a.summary();
    let d = format!(
        "{} paired records, offset std modified {:.3} original {:.3}, run length {:.2}/{:.2}, lift rate {:.3}/{:.3}",
        a.entries.len(),
        m.offset_std,
        o.offset_std,
        m.mean_run_length,
        o.mean_run_length,
        m.pen_lift_rate,
        o.pen_lift_rate
    );
    check(paired && finite && a == b, format!("{d}, re-run identical"), format!("{d}; paired {paired} finite {finite} identical {}", a == b))
}

fn record(id: String, strokes: StrokeSequence) -> DatasetRecord {
    DatasetRecord {
        id,
        strokes,
        text: "x".into(),
        writer_id: "w".into(),
        style_image: StyleImage::blank(1, 1),
        style_path: None,
    }
}

/// Absolute positions at the end of every pen-down run.
fn run_endpoints(s: &StrokeSequence) -> Vec<[f64; 2]> {
    let mut pos = [0.0, 0.0];
    let mut out = Vec::new();
    for (i, (o, lift)) in s.iter().enumerate() {
        pos = [pos[0] + o[0], pos[1] + o[1]];
        if lift || i + 1 == s.len() {
            out.push(pos);
        }
    }
    out
}

fn pipeline_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut records: Vec<DatasetRecord> = (0..200)
        .map(|i| {
            let pts: Vec<(f64, f64, bool)> = (0..20)
                .map(|j| (rng.gen_range(0.5..1.5), rng.gen_range(-0.5..0.5), j % 5 == 4))
                .collect();
            record(format!("r{i}"), StrokeSequence::from_points(&pts).unwrap())
        })
        .collect();
    // Plant one offset at 16 standard deviations of the magnitude
    // distribution that includes it.
    let mags: Vec<f64> = records
        .iter()
        .flat_map(|r| r.strokes.offsets().iter().map(|o| o[0].hypot(o[1])))
        .collect();
    let z_with = |m: f64| {
        let mut all = mags.clone();
        all.push(m);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (m - mean) / std
    };
    let (mut lo, mut hi) = (0.0, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if z_with(mid) < OUTLIER_SIGMA {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let planted = 137;
    let mut pts: Vec<(f64, f64, bool)> = records[planted].strokes.iter().map(|(o, l)| (o[0], o[1], l)).collect();
    pts[7] = (hi, 0.0, false);
    records[planted].strokes = StrokeSequence::from_points(&pts).unwrap();
    let (_, report) = filter_outliers(&records, DEFAULT_OUTLIER_K).map_err(|e| e.to_string())?;
    let dropped: Vec<&str> = report.dropped.iter().map(|d| d.id.as_str()).collect();
    let outlier_ok = dropped == ["r137"];

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut idempotent = true;
    let (mut before, mut after) = (0usize, 0usize);
    for i in 0..MERGE_RECORDS {
        let s = if i % 2 == 0 {
            let words = rng.gen_range(1..6);
            straight_line_word(&mut rng, words)
        } else {
            let style = WriterStyle {
                slant: rng.gen_range(-0.4..0.4),
                scale: rng.gen_range(0.5..2.0),
            };
            let len = rng.gen_range(1..8);
            let text: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            synth_strokes(&text, style, rng.gen_range(1..5))
        };
        let merged = merge_collinear(&s, DEFAULT_ANGLE_TOL);
        idempotent &= merge_collinear(&merged, DEFAULT_ANGLE_TOL) == merged;
        let (ea, eb) = (run_endpoints(&s), run_endpoints(&merged));
        if ea.len() != eb.len() {
            worst = f64::INFINITY;
        } else {
            for (a, b) in ea.iter().zip(&eb) {
                worst = worst.max((a[0] - b[0]).abs().max((a[1] - b[1]).abs()));
            }
        }
        before += s.len();
        after += merged.len();
    }
    let d = format!(
        "planted z={OUTLIER_SIGMA} outlier dropped {dropped:?}; {MERGE_RECORDS} records merged {before} -> {after} points, endpoint err {worst:.1e}, idempotent {idempotent}"
    );
    check(outlier_ok && worst <= ENDPOINT_TOL && idempotent, d.clone(), d)
}

fn render_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = true;
    for _ in 0..200 {
        let n = rng.gen_range(0..60);
        let pts: Vec<(f64, f64, bool)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(-4096i32..4096) as f64 / 64.0,
                    rng.gen_range(-4096i32..4096) as f64 / 64.0,
                    rng.gen_bool(0.2),
                )
            })
            .collect();
        let s = StrokeSequence::from_points(&pts).unwrap();
        exact &= polylines_to_offsets(&to_polylines(&s)) == s.offsets();
    }
    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/hline.svg"))
        .map_err(|e| e.to_string())?;
    let line = [Polyline(vec![[0.0, 0.0], [4.0, 0.0], [10.0, 0.0]])];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    emit_svg(&line, &p1, 0.5).map_err(|e| e.to_string())?;
    emit_svg(&line, &p2, 0.5).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let stable = b1 == b2 && b1 == golden.as_bytes();
    let s = synth_strokes("golden", WriterStyle { slant: 0.2, scale: 1.3 }, 2);
    let repeat = svg_string(&to_polylines(&s), 1.0).unwrap() == svg_string(&to_polylines(&s), 1.0).unwrap();
    let d = format!("200 sequences differenced exactly {exact}, golden bytes stable {stable}, repeat render identical {repeat}");
    check(exact && stable && repeat, d.clone(), d)
}

fn attention_diagnostic() -> Outcome {
    let (ls, lc) = (48usize, 9usize);
    let diagonal = |reversed: bool| {
        Tensor::from_fn(ls, lc, |i, j| {
            let k = i * lc / ls;
            let target = if reversed { lc - 1 - k } else { k };
            if j == target {
                1.0
            } else {
                0.0
            }
        })
    };
    let diag = AlignmentReport::from_weights(diagonal(false));
    let rev = AlignmentReport::from_weights(diagonal(true));
    let d = format!(
        "diagonal monotonicity {} deviation {}, reversed monotonicity {}",
        diag.monotonicity, diag.deviation, rev.monotonicity
    );
    check(diag.monotonicity == 1.0 && diag.deviation == 0.0 && rev.monotonicity == 0.0, d.clone(), d)
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let mut trained = None;
    suite.run(1, "schedule constants", Duration::from_secs(1), schedule_constants);
    suite.run(2, "sampler identity", Duration::from_secs(10), sampler_identity);
    suite.run(3, "forward-process consistency", Duration::from_secs(30), forward_consistency);
    suite.run(4, "gradient correctness", Duration::from_secs(120), gradient_checks);
    suite.run(5, "overfit convergence", Duration::from_secs(15 * 60), || overfit(&mut trained));
    suite.run(6, "algorithm fidelity", Duration::from_secs(1), telescoping);
    suite.run(7, "ablation harness", Duration::from_secs(60), || ablation(&trained));
    suite.run(8, "pipeline integrity", Duration::from_secs(10), pipeline_integrity);
    suite.run(9, "render round trip", Duration::from_secs(1), render_round_trip);
    suite.run(10, "attention diagnostic", Duration::from_secs(1), attention_diagnostic);
    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
