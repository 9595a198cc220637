use std::fs::{File, OpenOptions};
use std::io::LineWriter;
use std::path::Path;

use serde_json::json;
use srcorrnet::mixsim::{make_dataset, Manifest};
use srcorrnet::pipeline::{css_separate, evaluate_outputs, EvalReport, Separator, TrainData, TrainExample, Trainer};
use srcorrnet::signal::Waveform;
use srcorrnet::wav::{read_wav, write_wav, WavEncoding};

use crate::config::RunConfig;
use crate::{Baseline, Cli, Command, Failure};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(cli.seed, cli.out);
    cfg.validate()?;
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Train { checkpoint } => train(&cfg, checkpoint.as_deref()),
        Command::Separate { checkpoint, css, input } => separate(&cfg, &checkpoint, &input, css),
        Command::Eval {
            checkpoint,
            baseline,
            manifest,
        } => eval(&cfg, checkpoint.as_deref(), baseline, &manifest),
    }
}

fn load_corpus(manifest: &Path) -> Result<Vec<TrainExample>, Failure> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let samples = Manifest::load(manifest)?.load_samples(base)?;
    Ok(samples.into_iter().map(TrainExample::from).collect())
}

fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let path = make_dataset(&cfg.dataset, cfg.out_dir()?)?;
    println!("{}", path.display());
    Ok(())
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), Failure> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out)?;
    let data = match &cfg.train_manifest {
        Some(m) => TrainData::Fixed(load_corpus(m)?),
        None => TrainData::Stream {
            spec: cfg.dataset.clone(),
            epoch_size: cfg.dataset.count,
        },
    };
    let monitor = cfg.monitor_manifest.as_deref().map(load_corpus).transpose()?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, cfg.train.clone(), data)?,
        None => Trainer::new(&cfg.model, cfg.train.clone(), data)?,
    };
    let log_path = out.join("train.jsonl");
    // A resumed run continues the existing log.
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    let ckpt = out.join("checkpoint.json");
    let report = trainer.run(LineWriter::new(log), monitor.as_deref(), Some(&ckpt))?;
    println!("{}", ckpt.display());
    if let Some(r) = report {
        println!("monitor SI-SNRi {:.2} dB, SDRi {:.2} dB", r.mean_si_snri, r.mean_sdri);
    }
    Ok(())
}

fn separate(cfg: &RunConfig, checkpoint: &Path, input: &Path, css: bool) -> Result<(), Failure> {
    let out = cfg.out_dir()?;
    let sep = Separator::load(checkpoint)?;
    let wave = read_wav(input)?;
    let streams = if css {
        css_separate(&sep, &wave, &cfg.css)?
    } else {
        sep.separate(&wave)?.streams
    };
    std::fs::create_dir_all(out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    for (k, s) in streams.into_iter().enumerate() {
        let path = out.join(format!("{stem}_s{k}.wav"));
        write_wav(&path, &Waveform::mono(s, wave.sample_rate())?, WavEncoding::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, baseline: Option<Baseline>, manifest: &Path) -> Result<(), Failure> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let samples = Manifest::load(manifest)?.load_samples(base)?;
    let sep = checkpoint.map(Separator::load).transpose()?;
    let clip = cfg.train.loss.clip_db;
    let mut metrics = Vec::with_capacity(samples.len());
    for s in &samples {
        let reference = s.mixture.channel(0);
        let outputs = match (&sep, baseline) {
            (Some(sep), _) => sep.separate(&s.mixture)?.streams,
            (None, Some(Baseline::Oracle)) => s.targets.clone(),
            (None, _) => vec![reference.to_vec(); s.targets.len()],
        };
        metrics.push(evaluate_outputs(reference, &outputs, &s.targets, clip)?);
    }
    let report = EvalReport::from_samples(metrics);
    println!("{:<12} {:>6} {:>6} {:>9} {:>9}", "id", "k_true", "k_est", "SI-SNRi", "SDRi");
    for (s, m) in samples.iter().zip(&report.samples) {
        println!("{:<12} {:>6} {:>6} {:>9.3} {:>9.3}", s.id, m.k_true, m.k_est, m.si_snri, m.sdri);
    }
    println!(
        "{:<12} {:>6} {:>6.3} {:>9.3} {:>9.3}",
        "mean", "", report.count_accuracy, report.mean_si_snri, report.mean_sdri
    );
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        let rows: Vec<_> = samples
            .iter()
            .zip(&report.samples)
            .map(|(s, m)| json!({"id": s.id, "metrics": m}))
            .collect();
        let doc = json!({
            "mean_si_snri": report.mean_si_snri,
            "mean_sdri": report.mean_sdri,
            "count_accuracy": report.count_accuracy,
            "samples": rows,
        });
        let file = File::create(out.join("metrics.json"))?;
        serde_json::to_writer_pretty(file, &doc).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}
