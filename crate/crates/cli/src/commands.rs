use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fer_core::checkpoint::{load_params, save_params};
use fer_core::config::RunConfig;
use fer_core::data::{
    class_counts, class_index, FrameSource, Manifest, ManifestEntry, VideoSample, CLASS_NAMES,
    UNLABELLED,
};
use fer_core::geometry::{build_video_stacks, validate_clips, LandmarkStream};
use fer_core::gradcheck::{check_video, generic_point};
use fer_core::selftrain::{self, balance, BalanceSpec, GenerationReport};
use fer_core::synthetic::generate;
use fer_core::training::{self, evaluate, EpochRecord, MetricsReport};
use fer_core::{Components, Error, Model, Rng, Tensor};

use crate::rundir::RunDir;
use crate::{load_config, CliError, CliResult, ConfigArgs, OutArgs};

fn load_samples(path: &Path) -> CliResult<Vec<VideoSample>> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(manifest.samples(base)?)
}

fn load_labelled(path: &Path) -> CliResult<Vec<VideoSample>> {
    let samples = load_samples(path)?;
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(
            Error::Input(format!("{}: video '{}' has no label", path.display(), s.id)).into(),
        );
    }
    Ok(samples)
}

/// Config for commands that read a checkpoint: with no `--config`, the
/// snapshot saved next to the checkpoint is the base.
fn config_for_checkpoint(args: &ConfigArgs, checkpoint: &Path) -> CliResult<RunConfig> {
    let sibling = checkpoint.parent().map(|d| d.join("config.toml"));
    match (&args.config, sibling) {
        (None, Some(s)) if s.is_file() => {
            let a = ConfigArgs {
                config: Some(s),
                set: args.set.clone(),
            };
            load_config(&a, &[])
        }
        _ => load_config(args, &[]),
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> CliResult<Model> {
    let model_cfg = cfg.model_config()?;
    let layout = fer_core::model::ParamLayout::new(&model_cfg)?;
    let params = load_params(path, &layout)?;
    Ok(Model::with_params(model_cfg, params)?)
}

fn print_metrics(name: &str, m: &MetricsReport) {
    println!(
        "{name}: accuracy {:.4}, macro F1 {:.4}",
        m.accuracy, m.macro_f1
    );
    println!(
        "confusion (rows truth, columns predicted, order {})",
        CLASS_NAMES.join(" ")
    );
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
        println!("  {}", cells.join(""));
    }
}

pub fn gen_data(args: &ConfigArgs, out: &OutArgs) -> CliResult<()> {
    let cfg = load_config(args, &[])?;
    let data = generate(&cfg.synthetic_spec(), cfg.seed)?;
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "gen-data")?;
    for (name, samples) in [
        ("labelled", &data.labelled),
        ("validation", &data.validation),
        ("unlabelled", &data.unlabelled),
    ] {
        let mut m = Manifest::from_samples(format!("synthetic-{name}"), samples);
        m.illumination_corrected = cfg.illumination_corrected;
        m.save(&dir.file(&format!("{name}.jsonl")))?;
    }
    dir.write_json(
        "truth.json",
        &serde_json::json!({
            "labelled": data.labelled_truth,
            "unlabelled": data.unlabelled_truth,
        }),
    )?;
    println!(
        "wrote {} labelled, {} validation and {} unlabelled videos to {}",
        data.labelled.len(),
        data.validation.len(),
        data.unlabelled.len(),
        dir.path().display()
    );
    Ok(())
}

fn frame_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "ppm" | "pgm" | "pnm"
                )
            })
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `3 × H × W` in `[0, 1]`.
fn load_frame(path: &Path) -> CliResult<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

pub fn preprocess(
    args: &ConfigArgs,
    out: &OutArgs,
    landmarks: &Path,
    frames_dir: &Path,
    id: &str,
    label: &str,
) -> CliResult<()> {
    let cfg = load_config(args, &[])?;
    let label = if label == UNLABELLED {
        None
    } else {
        Some(
            class_index(label)
                .ok_or_else(|| CliError::Usage(format!("unknown label '{label}'")))?,
        )
    };
    let stream = LandmarkStream::parse(&fs::read_to_string(landmarks)?)?;
    let files = frame_files(frames_dir)?;
    if files.len() != stream.records.len() {
        return Err(Error::Input(format!(
            "{} frame images but {} landmark records",
            files.len(),
            stream.records.len()
        ))
        .into());
    }
    let frames = files
        .iter()
        .map(|f| load_frame(f))
        .collect::<CliResult<Vec<_>>>()?;
    for (f, p) in frames.iter().zip(&files) {
        if f.shape()[1] != stream.height || f.shape()[2] != stream.width {
            return Err(Error::Input(format!(
                "{} is {}×{}, landmark stream says {}×{}",
                p.display(),
                f.shape()[2],
                f.shape()[1],
                stream.width,
                stream.height
            ))
            .into());
        }
    }
    let specs = cfg.crop_specs();
    let first = stream.records.first().map_or(0, |r| r.frame_index);
    let mut manifest = Manifest::new(format!("preprocessed-{id}"));
    manifest.illumination_corrected = cfg.illumination_corrected;
    let mut clips = String::new();
    let mut notes = Vec::new();
    let segments: Vec<(String, usize, usize)> = if label.is_some() {
        vec![(id.to_string(), first, stream.records.len())]
    } else {
        validate_clips(&stream, &cfg.clip_rule())?
            .into_iter()
            .map(|s| (format!("{id}-{:06}", s.start), s.start, s.length))
            .collect()
    };
    for (clip_id, start, length) in segments {
        let lo = start - first;
        let (stacks, skipped) = build_video_stacks(
            &frames[lo..lo + length],
            &stream.records[lo..lo + length],
            &specs,
        )?;
        notes.extend(skipped.into_iter().map(|n| format!("{clip_id}: {n}")));
        if stacks.is_empty() {
            notes.push(format!("{clip_id}: no usable frame, dropped"));
            continue;
        }
        clips.push_str(&format!("{id} {start} {length}\n"));
        manifest.entries.push(ManifestEntry {
            id: clip_id,
            label,
            frames: FrameSource::Inline(stacks),
        });
    }
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "preprocess")?;
    manifest.save(&dir.file("manifest.jsonl"))?;
    dir.write_text("clips.txt", &clips)?;
    dir.write_text(
        "diagnostics.txt",
        &notes.iter().map(|n| format!("{n}\n")).collect::<String>(),
    )?;
    for n in &notes {
        log::warn!("{n}");
    }
    println!(
        "{} videos, {} diagnostics, written to {}",
        manifest.len(),
        notes.len(),
        dir.path().display()
    );
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    extra: &[String],
    out: &OutArgs,
    labelled: &Path,
    val: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(args, extra)?;
    let train_set = load_labelled(labelled)?;
    let val_set = match val {
        Some(v) => load_labelled(v)?,
        None => Vec::new(),
    };
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "train")?;
    let init = Model::new(cfg.model_config()?, cfg.seed)?;
    let outcome = training::train(&init, &train_set, &val_set, &cfg.train_config())?;
    let model = Model::with_params(init.config.clone(), outcome.params)?;
    save_params(&dir.file("model.ckpt"), &model.params)?;
    dir.write_jsonl("metrics.jsonl", &outcome.log)?;
    let eval_set = if val_set.is_empty() {
        &train_set
    } else {
        &val_set
    };
    let metrics = evaluate(&model, eval_set)?;
    dir.write_json("metrics.json", &metrics)?;
    println!(
        "trained {} epochs, best epoch {:?}",
        outcome.log.len(),
        outcome.best_epoch
    );
    print_metrics("validation", &metrics);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Diagnostic {
    id: String,
    truth: Option<String>,
    predicted: String,
    confidence: f64,
    probabilities: Vec<f64>,
    /// Channel-attention gates (face, eyes, mouth) per frame.
    region_weights: Vec<[f64; 3]>,
    frame_weights: Vec<f64>,
    penalty: f64,
}

pub fn eval(args: &ConfigArgs, out: &OutArgs, model_path: &Path, data: &Path) -> CliResult<()> {
    let cfg = config_for_checkpoint(args, model_path)?;
    let model = load_model(&cfg, model_path)?;
    let samples = load_samples(data)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no videos", data.display())).into());
    }
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "eval")?;
    let mut rows = Vec::with_capacity(samples.len());
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for s in &samples {
        let c = model.classify_video(&s.frames)?;
        if let Some(t) = s.label {
            truth.push(t);
            pred.push(c.predicted());
        }
        rows.push(Diagnostic {
            id: s.id.clone(),
            truth: s.label.map(|t| CLASS_NAMES[t].to_string()),
            predicted: CLASS_NAMES[c.predicted()].to_string(),
            confidence: c.confidence(),
            probabilities: c.probabilities(),
            region_weights: c.region_weights.clone(),
            frame_weights: c.frame_weights.clone(),
            penalty: c.penalty,
        });
    }
    dir.write_jsonl("diagnostics.jsonl", &rows)?;
    if truth.is_empty() {
        println!("{} unlabelled videos classified; no metrics", rows.len());
    } else {
        let metrics = MetricsReport::from_predictions(&truth, &pred, model.config.num_classes)?;
        dir.write_json("metrics.json", &metrics)?;
        print_metrics(&data.display().to_string(), &metrics);
    }
    Ok(())
}

pub fn pseudo_label(
    args: &ConfigArgs,
    out: &OutArgs,
    model_path: &Path,
    unlabelled: &Path,
    labelled: &Path,
) -> CliResult<()> {
    let cfg = config_for_checkpoint(args, model_path)?;
    let teacher = load_model(&cfg, model_path)?;
    let unl = load_samples(unlabelled)?;
    let lab = load_labelled(labelled)?;
    let k = teacher.config.num_classes;
    let pseudo = selftrain::pseudo_label(&teacher, &unl)?;
    let spec = BalanceSpec::from_counts(&class_counts(&lab, k), cfg.confidence_threshold)?;
    let balanced = balance(&pseudo, &spec)?;
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "pseudo-label")?;
    dir.write_jsonl("pseudo.jsonl", &pseudo.labels)?;
    dir.write_jsonl("balanced.jsonl", &balanced.entries)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "pseudo_histogram": pseudo.histogram(k),
            "targets": balanced.targets,
            "balanced_histogram": balanced.histogram(k),
            "warnings": balanced.warnings,
        }),
    )?;
    println!("pseudo-labels per class {:?}", pseudo.histogram(k));
    println!("after balancing        {:?}", balanced.histogram(k));
    for w in &balanced.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

pub fn selftrain(
    args: &ConfigArgs,
    extra: &[String],
    out: &OutArgs,
    labelled: &Path,
    unlabelled: &Path,
    val: Option<&Path>,
    teacher: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(args, extra)?;
    let st = cfg.selftrain_config()?;
    let lab = load_labelled(labelled)?;
    let unl = load_samples(unlabelled)?;
    let val_set = match val {
        Some(v) => load_labelled(v)?,
        None => Vec::new(),
    };
    let initial = teacher.map(|t| load_model(&cfg, t)).transpose()?;
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "selftrain")?;
    let mut io_error = None;
    let state = selftrain::iterate(&lab, &unl, &val_set, &st, initial, |report, model| {
        let g = report.generation;
        println!(
            "generation {g}: accuracy {:.4}, macro F1 {:.4}, best {:.4} (generation {})",
            report.validation.accuracy,
            report.validation.macro_f1,
            report.best_accuracy,
            report.best_generation
        );
        save_params(&dir.file(&format!("gen{g}.ckpt")), &model.params)?;
        if let Err(e) = dir.append_jsonl("reports.jsonl", report) {
            io_error = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_params(&dir.file("best.ckpt"), &state.best.params)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "history": state.history,
            "best_so_far": state.best_so_far(),
            "best_generation": state.best_generation,
            "saturated": state.saturated,
            "config_hash": st.hash(),
        }),
    )?;
    if state.saturated {
        println!(
            "stopped at generation {}: accuracy saturated",
            state.generation
        );
    }
    Ok(())
}

pub fn gradcheck(
    args: &ConfigArgs,
    out: Option<&Path>,
    force: bool,
    tolerance: f64,
) -> CliResult<()> {
    let cfg = load_config(args, &[])?;
    let mut model = Model::new(cfg.model_config()?, cfg.seed)?;
    generic_point(&mut model.params, cfg.seed, 0.1);
    let mut rng = Rng::new(cfg.seed).derive(&[fer_core::rng::key_of("gradcheck-video")]);
    let side = cfg.input_side;
    let frames: Vec<Tensor> = (0..cfg.gradcheck_frames)
        .map(|_| {
            Tensor::new(
                vec![9, side, side],
                (0..9 * side * side).map(|_| rng.uniform()).collect(),
            )
        })
        .collect::<Result<_, _>>()?;
    let label = rng.below(model.config.num_classes);
    let report = check_video(
        &model,
        &frames,
        label,
        1.0,
        cfg.lambda_f,
        &cfg.gradcheck_config(),
    )?;
    if let Some(path) = out {
        let dir = RunDir::with_snapshot(path, force, &cfg, "gradcheck")?;
        dir.write_json("gradcheck.json", &report)?;
    }
    let worst = report.worst();
    println!(
        "max relative error {:.3e} over {} coordinates{}",
        report.max_rel_error,
        report.checked.len(),
        worst.map_or(String::new(), |w| format!(
            " (worst: {}[{}])",
            w.param, w.index
        ))
    );
    if !(report.max_rel_error < tolerance) {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} ≥ tolerance {tolerance:.1e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
        })
        .collect()
}

pub fn summarise(run: &Path) -> CliResult<()> {
    let reports = run.join("reports.jsonl");
    let metrics = run.join("metrics.jsonl");
    let ablation = run.join("ablation.json");
    if reports.is_file() {
        let rows: Vec<GenerationReport> = read_jsonl(&reports)?;
        println!(
            "{:>10} {:>9} {:>9} {:>9}  pseudo-labels after balancing",
            "generation", "accuracy", "macro F1", "best"
        );
        for r in &rows {
            println!(
                "{:>10} {:>9.4} {:>9.4} {:>9.4}  {:?}",
                r.generation,
                r.validation.accuracy,
                r.validation.macro_f1,
                r.best_accuracy,
                r.balanced_histogram
            );
        }
    } else if metrics.is_file() {
        let rows: Vec<EpochRecord> = read_jsonl(&metrics)?;
        println!(
            "{:>6} {:>10} {:>11} {:>9} {:>9}",
            "epoch", "lr", "train loss", "val acc", "val F1"
        );
        for r in &rows {
            println!(
                "{:>6} {:>10.3e} {:>11.5} {:>9.4} {:>9.4}",
                r.epoch, r.lr, r.train_loss, r.val_accuracy, r.val_macro_f1
            );
        }
    } else if ablation.is_file() {
        let rows: Vec<AblationRow> = serde_json::from_str(&fs::read_to_string(&ablation)?)
            .map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
        print_ablation(&rows);
    } else {
        return Err(Error::Input(format!(
            "{} holds no reports, metrics or ablation table",
            run.display()
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AblationRow {
    step: String,
    accuracy: f64,
    macro_f1: f64,
}

fn print_ablation(rows: &[AblationRow]) {
    println!("{:<28} {:>9} {:>9}", "component", "accuracy", "macro F1");
    for r in rows {
        println!("{:<28} {:>9.4} {:>9.4}", r.step, r.accuracy, r.macro_f1);
    }
}

/// Trains every rung of the component ladder from the same seed, then
/// optionally runs self-training from the full model.
pub fn ablation_report(
    args: &ConfigArgs,
    out: &OutArgs,
    labelled: &Path,
    val: Option<&Path>,
    unlabelled: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(args, &[])?;
    let lab = load_labelled(labelled)?;
    let val_set = match val {
        Some(v) => load_labelled(v)?,
        None => Vec::new(),
    };
    let eval_set = if val_set.is_empty() { &lab } else { &val_set };
    let dir = RunDir::with_snapshot(&out.out, out.force, &cfg, "report --ablation")?;
    let mut rows = Vec::new();
    let mut full = None;
    for (step, components) in Components::ladder() {
        let mut model_cfg = cfg.model_config()?;
        model_cfg.components = components;
        let init = Model::new(model_cfg.clone(), cfg.seed)?;
        let outcome = training::train(&init, &lab, &val_set, &cfg.train_config())?;
        let model = Model::with_params(model_cfg, outcome.params)?;
        let m = evaluate(&model, eval_set)?;
        println!("{step:<28} {:.4}", m.accuracy);
        rows.push(AblationRow {
            step: step.to_string(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
        });
        full = Some(model);
    }
    if let Some(unl_path) = unlabelled {
        let unl = load_samples(unl_path)?;
        let st = cfg.selftrain_config()?;
        let state = selftrain::iterate(&lab, &unl, &val_set, &st, full, |_, _| Ok(()))?;
        for r in state.reports.iter().skip(1) {
            let step = format!("+ self-training iteration {}", r.generation);
            println!("{step:<28} {:.4}", r.validation.accuracy);
            rows.push(AblationRow {
                step,
                accuracy: r.validation.accuracy,
                macro_f1: r.validation.macro_f1,
            });
        }
    }
    dir.write_json("ablation.json", &rows)?;
    print_ablation(&rows);
    Ok(())
}
