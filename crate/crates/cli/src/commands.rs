use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use strokediff::autograd::Tensor;
use strokediff::checkpoint::Checkpoint;
use strokediff::data::io::{iam_strokes, load_style_image, parse_line, self_style};
use strokediff::data::{
    merge_collinear, normalize, prepare, read_records, write_records, DatasetRecord, NormalizationMode,
    PrepareOptions, StrokeSequence, StyleDims, StyleImage, TrainingExample, Vocab, DEFAULT_ANGLE_TOL,
};
use strokediff::diffusion::{forward_diffuse, NoiseSchedule, ScheduleConfig};
use strokediff::generation::{
    attention_alignment, interpolate_styles, GenerateRequest, Generated, Generator,
};
use strokediff::network::{Denoiser, DenoiserInput, ModelConfig, StyleInput};
use strokediff::render::{emit_svg, rasterize, to_polylines, write_pgm, RasterOptions};
use strokediff::training::{standard_normal, StepMetrics, TrainConfig, Trainer};
use strokediff::{Error, Result};

use crate::manifest::{out_path, thread_cap, RunManifest};
use crate::{
    Command, DiagnoseArgs, GenArgs, InterpolateArgs, ParamsArgs, PrepareArgs, RenderArgs, SampleArgs,
    ScheduleArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    thread_cap()?;
    match command {
        Command::Prepare(a) => prepare_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::DiagnoseAttention(a) => diagnose_cmd(a),
        Command::ScheduleInfo(a) => schedule_cmd(a),
        Command::ParamsCount(a) => params_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `path` with `suffix` appended to its file name.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Shortest decimal form, at most 12 places.
fn fmt_num(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Sidecar written by `prepare` and read by `train --prepared`.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PrepareMeta {
    scale: f64,
    points_per_char: f64,
    records: usize,
}

fn points_per_char(records: &[DatasetRecord]) -> f64 {
    let points: usize = records.iter().map(|r| r.strokes.len()).sum();
    let chars: usize = records.iter().map(|r| r.text.chars().count()).sum();
    if chars == 0 {
        1.0
    } else {
        points as f64 / chars as f64
    }
}

fn prepare_cmd(a: PrepareArgs) -> Result<()> {
    let mut manifest = RunManifest::start("prepare")?;
    let mode = match a.normalization.as_str() {
        "per-example" => NormalizationMode::PerExample,
        "corpus" => NormalizationMode::Corpus,
        m => return Err(Error::InvalidArgument(format!("normalization must be per-example or corpus, got {m:?}"))),
    };
    let opts = PrepareOptions {
        angle_tol: a.angle_tol,
        outlier_k: a.outlier_k,
        mode,
    };
    let dims = StyleDims::default();
    let is_xml = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"));
    let records = if is_xml {
        let text = a
            .text
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--text is required for an XML input".into()))?;
        let xml = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
        let strokes = iam_strokes(&xml)?;
        vec![DatasetRecord {
            id: a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            style_image: self_style(&strokes, dims),
            strokes,
            text,
            writer_id: String::new(),
            style_path: None,
        }]
    } else {
        read_records(&a.input, dims)?
    };
    manifest.input(&a.input);
    let prepared = prepare(&records, &opts)?;

    let out = out_path(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_records(&out, &prepared.records)?;
    let meta = PrepareMeta {
        scale: prepared.scale,
        points_per_char: points_per_char(&prepared.records),
        records: prepared.records.len(),
    };
    let meta_path = sidecar(&out, ".meta.json");
    write_file(&meta_path, &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    let report_path = sidecar(&out, ".drops.txt");
    let mut report = prepared.drop_report.to_text();
    for id in &prepared.rejected {
        report.push_str(&format!("rejected: {id}\n"));
    }
    write_file(&report_path, &report)?;

    println!("records in: {}", records.len());
    println!("records out: {}", prepared.records.len());
    println!("degenerate: {}", prepared.rejected.len());
    println!("points: {} -> {}", prepared.points_before, prepared.points_after);
    println!("scale: {}", fmt_num(prepared.scale));
    print!("{}", prepared.drop_report.to_text());

    manifest.config = serde_json::to_value(opts)?;
    manifest.results = json!({
        "records_in": records.len(),
        "records_out": prepared.records.len(),
        "dropped": prepared.drop_report.dropped.iter().map(|d| d.id.clone()).collect::<Vec<_>>(),
        "degenerate": prepared.rejected,
        "scale": prepared.scale,
    });
    for p in [&out, &meta_path, &report_path] {
        manifest.output(p);
    }
    let run_path = sidecar(&out, ".run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::start("train")?;
    let mut config = match &a.config {
        Some(p) => {
            manifest.input(p);
            TrainConfig::parse_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.steps {
        config.total_steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;

    let dims = StyleDims {
        height: config.style_height,
        width: config.style_width,
    };
    manifest.input(&a.data);
    let raw = read_records(&a.data, dims)?;
    let (records, scale, ppc) = if a.prepared {
        let meta_path = sidecar(&a.data, ".meta.json");
        let (scale, ppc) = if meta_path.exists() {
            manifest.input(&meta_path);
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: PrepareMeta = serde_json::from_str(&text)?;
            (meta.scale, meta.points_per_char)
        } else {
            (1.0, points_per_char(&raw))
        };
        (raw, scale, ppc)
    } else {
        let p = prepare(&raw, &PrepareOptions::default())?;
        let ppc = points_per_char(&p.records);
        (p.records, p.scale, ppc)
    };

    let out = out_path(&a.out);
    create_dir(&out)?;
    let vocab = if a.resume {
        Checkpoint::load(&out)?.1.vocab
    } else {
        Vocab::from_texts(records.iter().map(|r| r.text.as_str()))
    };
    let examples = records
        .iter()
        .map(|r| TrainingExample::from_record(r, &vocab))
        .collect::<Result<Vec<_>>>()?;

    let mut trainer = if a.resume {
        let (model, ckpt) = Checkpoint::load(&out)?;
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
        let mut cfg = ckpt.config;
        cfg.total_steps = config.total_steps;
        Trainer::resume(cfg, model, ckpt.params, adam, ckpt.step, examples)?
    } else {
        Trainer::new(config, examples, vocab.size())?
    };
    let config = trainer.config.clone();

    let metrics_path = out.join("metrics.csv");
    let append = a.resume && metrics_path.exists();
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if !append {
        writeln!(metrics, "{}", StepMetrics::CSV_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let save = |t: &Trainer| -> Result<()> {
        Checkpoint {
            config: t.config.clone(),
            vocab: vocab.clone(),
            params: t.params.clone(),
            adam: Some(t.adam.clone()),
            step: t.step,
            corpus_scale: scale,
            points_per_char: ppc,
        }
        .save(&out)
    };

    let initial = trainer.evaluate(config.seed)?;
    eprintln!(
        "step {} eval loss {:.6} ({} examples, {} parameters)",
        trainer.step,
        initial.combined,
        trainer.examples.len(),
        trainer.params.num_scalars()
    );
    let remaining = config.total_steps.saturating_sub(trainer.step);
    let mut last: Option<StepMetrics> = None;
    trainer.run(remaining, |t, m| {
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        if config.log_every > 0 && m.step % config.log_every == 0 {
            eprintln!(
                "step {} loss {:.6} stroke {:.6} pen {:.6} grad_norm {:.4} lr {:.3e}",
                m.step, m.loss, m.loss_stroke, m.loss_pen, m.grad_norm, m.lr
            );
        }
        if config.checkpoint_every > 0 && m.step % config.checkpoint_every == 0 {
            save(t)?;
        }
        last = Some(m.clone());
        Ok(())
    })?;
    save(&trainer)?;
    let final_eval = trainer.evaluate(config.seed)?;
    eprintln!("step {} eval loss {:.6}", trainer.step, final_eval.combined);
    println!("checkpoint: {}", out.display());

    manifest.config = json!(config.to_config_string());
    manifest.seed = Some(config.seed);
    manifest.output(&out);
    manifest.output(&metrics_path);
    manifest.results = json!({
        "step": trainer.step,
        "initial_eval": initial.combined,
        "final_eval": final_eval.combined,
        "last_loss": last.map(|m| m.loss),
        "corpus_scale": scale,
        "points_per_char": ppc,
    });
    let run_path = out.join("run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

struct Loaded {
    model: Denoiser,
    ckpt: Checkpoint,
    schedule: NoiseSchedule,
}

impl Loaded {
    fn open(dir: &Path) -> Result<Self> {
        let (model, ckpt) = Checkpoint::load(dir)?;
        let schedule = ckpt.config.schedule.build()?;
        Ok(Self { model, ckpt, schedule })
    }

    fn generator(&self) -> Generator<'_> {
        Generator {
            model: &self.model,
            params: &self.ckpt.params,
            vocab: &self.ckpt.vocab,
            schedule: self.schedule.clone(),
            corpus_scale: self.ckpt.corpus_scale,
            points_per_char: self.ckpt.points_per_char,
        }
    }

    fn dims(&self) -> StyleDims {
        StyleDims {
            height: self.ckpt.config.style_height,
            width: self.ckpt.config.style_width,
        }
    }
}

fn request(g: &GenArgs) -> GenerateRequest {
    GenerateRequest {
        sampler: g.sampler,
        num_steps: g.steps,
        length: g.length,
        max_unknown_fraction: g.max_unknown,
        ..GenerateRequest::new(g.text.clone(), g.seed)
    }
}

fn generated_record(id: &str, text: &str, strokes: StrokeSequence) -> DatasetRecord {
    DatasetRecord {
        id: id.to_string(),
        strokes,
        text: text.to_string(),
        writer_id: "generated".into(),
        style_image: StyleImage::blank(1, 1),
        style_path: None,
    }
}

fn emit_generated(dir: &Path, name: &str, g: &Generated, text: &str, manifest: &mut RunManifest) -> Result<DatasetRecord> {
    let rec = generated_record(name, text, g.strokes.clone());
    let svg = dir.join(format!("{name}.svg"));
    emit_svg(&to_polylines(&g.strokes), &svg, 1.0)?;
    manifest.output(&svg);
    Ok(rec)
}

fn gen_manifest(manifest: &mut RunManifest, g: &GenArgs, loaded: &Loaded) {
    manifest.input(&g.ckpt);
    manifest.seed = Some(g.seed);
    manifest.config = json!({
        "text": g.text,
        "sampler": g.sampler.to_string(),
        "steps": g.steps.unwrap_or(loaded.schedule.steps()),
        "length": g.length,
        "max_unknown": g.max_unknown,
        "checkpoint_step": loaded.ckpt.step,
    });
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let mut manifest = RunManifest::start("sample")?;
    let loaded = Loaded::open(&a.gen.ckpt)?;
    gen_manifest(&mut manifest, &a.gen, &loaded);
    manifest.input(&a.style);
    let generator = loaded.generator();
    let style = generator.style_features(&load_style_image(&a.style, loaded.dims())?)?;
    let out = generator.generate(&request(&a.gen), &style)?;

    let dir = out_path(&a.gen.out_dir);
    create_dir(&dir)?;
    let rec = emit_generated(&dir, "sample", &out, &a.gen.text, &mut manifest)?;
    let records = dir.join("sample.jsonl");
    write_records(&records, &[rec])?;
    manifest.output(&records);
    manifest.results = json!({ "points": out.strokes.len() });
    println!("wrote {} points to {}", out.strokes.len(), records.display());
    let run_path = dir.join("run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

fn interpolate_cmd(a: InterpolateArgs) -> Result<()> {
    let mut manifest = RunManifest::start("interpolate")?;
    if a.lambdas.is_empty() {
        return Err(Error::InvalidArgument("--lambdas needs at least one value".into()));
    }
    let loaded = Loaded::open(&a.gen.ckpt)?;
    gen_manifest(&mut manifest, &a.gen, &loaded);
    manifest.input(&a.style0);
    manifest.input(&a.style1);
    let generator = loaded.generator();
    let s0 = generator.style_features(&load_style_image(&a.style0, loaded.dims())?)?;
    let s1 = generator.style_features(&load_style_image(&a.style1, loaded.dims())?)?;
    let blends = a
        .lambdas
        .iter()
        .map(|&l| interpolate_styles(&s0, &s1, l))
        .collect::<Result<Vec<_>>>()?;

    let dir = out_path(&a.gen.out_dir);
    create_dir(&dir)?;
    let req = request(&a.gen);
    let mut records = Vec::new();
    for (i, (lambda, style)) in a.lambdas.iter().zip(&blends).enumerate() {
        let out = generator.generate(&req, style)?;
        let name = format!("lambda-{i:02}-{}", file_stem(&fmt_num(*lambda)));
        records.push(emit_generated(&dir, &name, &out, &a.gen.text, &mut manifest)?);
    }
    let path = dir.join("interpolation.jsonl");
    write_records(&path, &records)?;
    manifest.output(&path);
    manifest.results = json!({ "lambdas": a.lambdas });
    println!("wrote {} samples to {}", records.len(), path.display());
    let run_path = dir.join("run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let mut manifest = RunManifest::start("render")?;
    let pgm = match a.format.as_str() {
        "svg" => false,
        "pgm" => true,
        f => return Err(Error::InvalidArgument(format!("format must be svg or pgm, got {f:?}"))),
    };
    if a.height == 0 || a.width == 0 {
        return Err(Error::InvalidArgument("--height and --width must be positive".into()));
    }
    manifest.input(&a.input);
    let records = read_records(&a.input, StyleDims { height: 1, width: 1 })?;
    let dir = out_path(&a.out_dir);
    create_dir(&dir)?;
    for r in &records {
        let lines = to_polylines(&r.strokes);
        let stem = file_stem(&r.id);
        let path = if pgm {
            let p = dir.join(format!("{stem}.pgm"));
            write_pgm(&rasterize(&lines, a.height, a.width, RasterOptions::default())?, &p)?;
            p
        } else {
            let p = dir.join(format!("{stem}.svg"));
            emit_svg(&lines, &p, a.stroke_width)?;
            p
        };
        manifest.output(&path);
    }
    manifest.config = json!({ "format": a.format, "height": a.height, "width": a.width, "stroke_width": a.stroke_width });
    println!("rendered {} records to {}", records.len(), dir.display());
    let run_path = dir.join("run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<()> {
    let mut manifest = RunManifest::start("diagnose-attention")?;
    let loaded = Loaded::open(&a.ckpt)?;
    manifest.input(&a.ckpt);
    let dims = loaded.dims();
    let record = if a.record.trim_start().starts_with('{') {
        parse_line(&a.record, 0, None, dims)?
    } else {
        let path = PathBuf::from(&a.record);
        manifest.input(&path);
        let mut all = read_records(&path, dims)?;
        if a.index >= all.len() {
            return Err(Error::InvalidArgument(format!("record index {} of {}", a.index, all.len())));
        }
        all.swap_remove(a.index)
    };
    let (mut normalized, _) = normalize(&record)?;
    normalized.strokes = merge_collinear(&normalized.strokes, DEFAULT_ANGLE_TOL);
    let tokens = loaded.ckpt.vocab.tokenize(&record.text)?;
    let mask = vec![true; tokens.ids.len()];

    loaded.schedule.check_step(a.t)?;
    let n = normalized.strokes.len();
    let mut rng = strokediff::training::step_rng(a.seed, 0);
    let eps = standard_normal(&mut rng, n, 2);
    let y0 = normalized.strokes.flat_offsets();
    let y_t = Tensor::new(n, 2, forward_diffuse(&y0, loaded.schedule.alpha_bar(a.t), eps.data())?);
    let input = DenoiserInput {
        y_t: &y_t,
        tokens: &tokens.ids,
        token_mask: &mask,
        style: StyleInput::Image(&record.style_image),
        level: loaded.schedule.level(a.t),
    };
    let report = attention_alignment(&loaded.model, &loaded.ckpt.params, &input, a.block)?;

    let dir = out_path(&a.out_dir);
    create_dir(&dir)?;
    let csv = dir.join("attention.csv");
    write_file(&csv, &report.weights_csv())?;
    let summary = json!({
        "id": record.id,
        "text": record.text,
        "t": a.t,
        "block": a.block,
        "stroke_positions": report.weights.rows(),
        "text_positions": report.weights.cols(),
        "monotonicity": report.monotonicity,
        "deviation": report.deviation,
        "argmax": report.argmax,
    });
    let json_path = dir.join("attention.json");
    write_file(&json_path, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!("monotonicity: {:.6}", report.monotonicity);
    println!("deviation: {:.6}", report.deviation);
    println!("weights: {}", csv.display());

    manifest.seed = Some(a.seed);
    manifest.config = json!({ "t": a.t, "block": a.block });
    manifest.results = summary;
    manifest.output(&csv);
    manifest.output(&json_path);
    let run_path = dir.join("run.json");
    manifest.output(&run_path);
    manifest.write(&run_path)
}

fn schedule_cmd(a: ScheduleArgs) -> Result<()> {
    let mut manifest = RunManifest::start("schedule-info")?;
    let config = ScheduleConfig {
        steps: a.steps,
        base: a.base,
        lo: a.lo,
        hi: a.hi,
    };
    let schedule = config.build()?;
    println!("t\tbeta\talpha\talpha_bar\tsigma\tlevel");
    for r in schedule.table() {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.t,
            fmt_num(r.beta),
            fmt_num(r.alpha),
            fmt_num(r.alpha_bar),
            fmt_num(r.sigma),
            fmt_num(r.level)
        );
    }
    if let Some(p) = &a.manifest {
        manifest.config = serde_json::to_value(config)?;
        manifest.results = json!({
            "beta_first": schedule.beta(1),
            "beta_last": schedule.beta(schedule.steps()),
            "alpha_bar_last": schedule.alpha_bar(schedule.steps()),
        });
        manifest.output(p);
        manifest.write(p)?;
    }
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> Result<()> {
    let mut manifest = RunManifest::start("params-count")?;
    let mut config = match &a.config {
        Some(p) => {
            manifest.input(p);
            TrainConfig::parse_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(p) = &a.preset {
        config.set("preset", p)?;
    }
    let model: ModelConfig = config.model_config(a.vocab_size);
    let (_, params) = Denoiser::new(model.clone(), 0)?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let head = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(head).or_default() += t.len();
    }
    for (k, v) in &groups {
        println!("{k}\t{v}");
    }
    let total = params.num_scalars();
    println!("total\t{total}");
    if let Some(p) = &a.manifest {
        manifest.config = json!(config.to_config_string());
        manifest.results = json!({ "total": total, "groups": groups });
        manifest.output(p);
        manifest.write(p)?;
    }
    Ok(())
}
