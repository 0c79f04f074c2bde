//! `cantus` — melody modeling pipeline driver.
//!
//! Subcommands: ingest, lexicon, pretrain, finetune, generate, inpaint,
//! evaluate. Every command writes a manifest with its effective config,
//! seed and input hashes; reruns over identical inputs produce identical
//! outputs. Log verbosity comes from the `CANTUS_LOG` env var only.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cantus_core::corpus::{self, MelodySequence};
use cantus_core::evaluate::{metric_row, task_scores, DiversityGroup, MetricRow};
use cantus_core::generate::{
    continuation_sample, continue_melody, inpaint, inpaint_sample, Model, SamplerConfig,
};
use cantus_core::infill::{BatchMode, InfillConfig, MaskedSample, Objective};
use cantus_core::lexicon::{build_lexicon, load_lexicon, save_lexicon, Lexicon};
use cantus_core::midi::write_midi;
use cantus_core::model::{
    checkpoint_hash, load_checkpoint, Layout, ModelConfig, TrainConfig, Trainer,
};
use cantus_core::seeding::derive_rng;
use cantus_core::tokens::{decode, encode, to_text, TokenSequence};

use config::{hash_path, KeyValues, Manifest};

/// Argument/input errors exit with status 2; runtime failures with 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "cantus", version, about = "Symbolic melody modeling pipeline")]
struct Cli {
    /// Key=value config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Continuation,
    Inpaint,
}

#[derive(Subcommand)]
enum Command {
    /// Build a clean corpus from a directory of MIDI files.
    Ingest { input_dir: PathBuf, out_dir: PathBuf },
    /// Mine the melodic n-gram lexicon from a corpus of note files.
    Lexicon {
        corpus_dir: PathBuf,
        out_file: PathBuf,
        #[arg(long)]
        n_max: Option<u8>,
        #[arg(long)]
        top_ratio: Option<f64>,
    },
    /// Pre-train on blank-infilling objectives.
    Pretrain {
        corpus_dir: PathBuf,
        lexicon: PathBuf,
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// multi-task | slm | span | bar | long | pitch-ngram | rhythm-ngram | combined-ngram
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        warmup: Option<u64>,
    },
    /// Fine-tune a checkpoint for a downstream task.
    Finetune {
        corpus_dir: PathBuf,
        checkpoint: PathBuf,
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
    },
    /// Generate melodies (continuation, or from scratch without a prompt).
    Generate {
        checkpoint: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Prompt as a note file; omit to generate from scratch.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        bars: Option<u8>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Fill the middle 4 bars of a 16-bar piece (6 bars context each side).
    Inpaint {
        checkpoint: PathBuf,
        piece: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Compute objective metrics and rank settings against a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        /// One or more `name=dir` pairs; a dir of run subdirectories
        /// aggregates mean and std across runs.
        #[arg(long = "setting")]
        settings: Vec<String>,
        out_file: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CANTUS_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let kv = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("config file {} does not exist", path.display())));
            }
            KeyValues::load(path)?
        }
        None => KeyValues::default(),
    };
    let seed = kv.resolve("seed", cli.seed, 0)?;

    match cli.command {
        Command::Ingest { input_dir, out_dir } => cmd_ingest(&input_dir, &out_dir, seed),
        Command::Lexicon { corpus_dir, out_file, n_max, top_ratio } => {
            let n_max = kv.resolve("n_max", n_max, 12)?;
            let top_ratio = kv.resolve("top_ratio", top_ratio, 0.25)?;
            cmd_lexicon(&corpus_dir, &out_file, n_max, top_ratio)
        }
        Command::Pretrain { corpus_dir, lexicon, out_dir, preset, mode, steps, batch_size, peak_lr, warmup } => {
            let preset = preset_config(&kv, preset, seed)?;
            let mode = parse_mode(&kv.resolve("mode", mode, "multi-task".to_string())?)?;
            let steps = kv.resolve("steps", steps, 1000)?;
            let train = TrainConfig {
                steps,
                peak_lr: kv.resolve("peak_lr", peak_lr, 5e-4)?,
                warmup: kv.resolve("warmup", warmup, steps / 10)?,
                checkpoint_every: kv.resolve("checkpoint_every", None, (steps / 2).max(1))?,
                ..TrainConfig::default()
            };
            let batch_size = kv.resolve("batch_size", batch_size, 8)?;
            cmd_pretrain(&corpus_dir, &lexicon, &out_dir, preset, mode, &train, batch_size, seed)
        }
        Command::Finetune { corpus_dir, checkpoint, out_dir, task, steps, batch_size, peak_lr } => {
            let steps = kv.resolve("steps", steps, 500)?;
            let train = TrainConfig {
                steps,
                peak_lr: kv.resolve("peak_lr", peak_lr, 5e-5)?,
                warmup: kv.resolve("warmup", None, steps / 10)?,
                checkpoint_every: kv.resolve("checkpoint_every", None, (steps / 2).max(1))?,
                ..TrainConfig::default()
            };
            let batch_size = kv.resolve("batch_size", batch_size, 8)?;
            cmd_finetune(&corpus_dir, &checkpoint, &out_dir, task, &train, batch_size, seed)
        }
        Command::Generate { checkpoint, out_dir, count, prompt, bars, temperature, top_k } => {
            let sampler = SamplerConfig {
                temperature: kv.resolve("temperature", temperature, 0.9)?,
                top_k: kv.resolve("top_k", top_k, 10)?,
                max_new_tokens: kv.resolve("max_new_tokens", None, 512)?,
                bar_limit: kv.resolve("bars", bars, 32)?,
            };
            let count = kv.resolve("count", count, 1)?;
            cmd_generate(&checkpoint, &out_dir, count, prompt.as_deref(), &sampler, seed)
        }
        Command::Inpaint { checkpoint, piece, out_dir, temperature, top_k } => {
            let sampler = SamplerConfig {
                temperature: kv.resolve("temperature", temperature, 0.9)?,
                top_k: kv.resolve("top_k", top_k, 10)?,
                max_new_tokens: kv.resolve("max_new_tokens", None, 256)?,
                bar_limit: 128,
            };
            cmd_inpaint(&checkpoint, &piece, &out_dir, &sampler, seed)
        }
        Command::Evaluate { reference, settings, out_file } => {
            cmd_evaluate(&reference, &settings, &out_file)
        }
    }
}

fn preset_config(kv: &KeyValues, flag: Option<Preset>, seed: u64) -> Result<ModelConfig> {
    let name = match flag {
        Some(Preset::Desk) => "desk".to_string(),
        Some(Preset::Paper) => "paper".to_string(),
        None => kv.resolve("preset", None, "desk".to_string())?,
    };
    let mut cfg = match name.as_str() {
        "desk" => ModelConfig::desk(),
        "paper" => ModelConfig::paper(),
        other => return Err(usage(format!("unknown preset `{other}`"))),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn parse_mode(name: &str) -> Result<BatchMode> {
    Ok(match name {
        "multi-task" => BatchMode::MultiTask,
        "slm" => BatchMode::Single(Objective::Slm),
        "span" => BatchMode::Single(Objective::RandomSpan),
        "bar" => BatchMode::Single(Objective::BarSpan),
        "long" => BatchMode::Single(Objective::LongSpan),
        "pitch-ngram" => BatchMode::Single(Objective::PitchNgram),
        "rhythm-ngram" => BatchMode::Single(Objective::RhythmNgram),
        "combined-ngram" => BatchMode::Single(Objective::CombinedNgram),
        other => return Err(usage(format!("unknown mode `{other}`"))),
    })
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn load_encoded_corpus(dir: &Path) -> Result<(Vec<MelodySequence>, Vec<TokenSequence>)> {
    require_dir(dir, "corpus directory")?;
    let melodies = corpus::load_corpus(dir)?;
    let mut pieces = Vec::with_capacity(melodies.len());
    for m in &melodies {
        match encode(m) {
            Ok(t) => pieces.push(t),
            Err(e) => log::warn!("skipping unencodable piece: {e}"),
        }
    }
    Ok((melodies, pieces))
}

fn cmd_ingest(input_dir: &Path, out_dir: &Path, seed: u64) -> Result<ExitCode> {
    require_dir(input_dir, "input directory")?;
    let stats = corpus::build_corpus(input_dir, out_dir)?;
    let mut manifest = Manifest::new("ingest");
    manifest.set("seed", seed);
    manifest.input("midi_dir", input_dir)?;
    manifest.set("inputs", stats.inputs);
    manifest.set("accepted", stats.accepted);
    manifest.set("duplicates", stats.duplicates);
    manifest.set("no_melody", stats.no_melody);
    manifest.set("errors", stats.errors);
    manifest.set("rejected", stats.rejected);
    for (rule, count) in &stats.rejected_by_rule {
        manifest.set(&format!("rejected.{rule}"), count);
    }
    manifest.write(&out_dir.join("run_manifest.txt"))?;
    println!(
        "ingested {} files: {} accepted, {} rejected, {} duplicates, {} without a melody",
        stats.inputs, stats.accepted, stats.rejected, stats.duplicates, stats.no_melody,
    );
    Ok(if stats.accepted > 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_lexicon(corpus_dir: &Path, out_file: &Path, n_max: u8, top_ratio: f64) -> Result<ExitCode> {
    if !(0.0..=1.0).contains(&top_ratio) || top_ratio == 0.0 {
        return Err(usage(format!("top_ratio must lie in (0, 1], got {top_ratio}")));
    }
    if n_max < 2 {
        return Err(usage(format!("n_max must be at least 2, got {n_max}")));
    }
    let (melodies, _) = load_encoded_corpus(corpus_dir)?;
    let lexicon = build_lexicon(&melodies, n_max, top_ratio);
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_lexicon(&lexicon, out_file)?;
    let mut manifest = Manifest::new("lexicon");
    manifest.input("corpus", corpus_dir)?;
    manifest.set("n_max", n_max);
    manifest.set("top_ratio", top_ratio);
    manifest.set("corpus_hash", format!("{:016x}", lexicon.meta.corpus_hash));
    manifest.set("entries", lexicon.all_entries().count());
    manifest.write(&manifest_path(out_file))?;
    println!("lexicon with {} entries written to {}", lexicon.all_entries().count(), out_file.display());
    Ok(ExitCode::SUCCESS)
}

fn manifest_path(out_file: &Path) -> PathBuf {
    let mut name = out_file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out_file.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    corpus_dir: &Path,
    lexicon_path: &Path,
    out_dir: &Path,
    model_cfg: ModelConfig,
    mode: BatchMode,
    train: &TrainConfig,
    batch_size: usize,
    seed: u64,
) -> Result<ExitCode> {
    require_file(lexicon_path, "lexicon file")?;
    let (_, pieces) = load_encoded_corpus(corpus_dir)?;
    if pieces.is_empty() {
        return Err(usage(format!("corpus {} holds no pieces", corpus_dir.display())));
    }
    let lexicon = load_lexicon(lexicon_path)?;

    let infill_cfg = InfillConfig { max_seq: model_cfg.max_seq, ..InfillConfig::default() };
    let provider = batch_provider(pieces, mode, lexicon, infill_cfg, batch_size, seed);

    let mut trainer = Trainer::new(model_cfg.clone(), train);
    let final_loss = trainer.run(train.steps, provider, train, out_dir)?;

    let mut manifest = Manifest::new("pretrain");
    manifest.set("seed", seed);
    manifest.input("corpus", corpus_dir)?;
    manifest.input("lexicon", lexicon_path)?;
    write_train_manifest(&mut manifest, &model_cfg, train, batch_size, mode, out_dir, final_loss)?;
    println!("pre-training finished at step {} (loss {final_loss:.4})", trainer.step);
    Ok(ExitCode::SUCCESS)
}

fn batch_provider(
    pieces: Vec<TokenSequence>,
    mode: BatchMode,
    lexicon: Lexicon,
    cfg: InfillConfig,
    batch_size: usize,
    seed: u64,
) -> impl FnMut(u64) -> Vec<MaskedSample> {
    move |step| {
        use rand::Rng;
        let mut rng = derive_rng(seed, "pretrain-batch", step);
        let chosen: Vec<TokenSequence> = (0..batch_size)
            .map(|_| pieces[rng.random_range(0..pieces.len())].clone())
            .collect();
        cantus_core::infill::make_training_batch(&chosen, mode, Some(&lexicon), &cfg, &mut rng)
    }
}

fn write_train_manifest(
    manifest: &mut Manifest,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    batch_size: usize,
    mode: BatchMode,
    out_dir: &Path,
    final_loss: f64,
) -> Result<()> {
    manifest.set("model.layers", model_cfg.layers);
    manifest.set("model.heads", model_cfg.heads);
    manifest.set("model.d_model", model_cfg.d_model);
    manifest.set("model.d_ff", model_cfg.d_ff);
    manifest.set("model.dropout", model_cfg.dropout);
    manifest.set("model.max_seq", model_cfg.max_seq);
    manifest.set("train.steps", train.steps);
    manifest.set("train.peak_lr", train.peak_lr);
    manifest.set("train.warmup", train.warmup);
    manifest.set("train.weight_decay", train.weight_decay);
    manifest.set("train.batch_size", batch_size);
    manifest.set("mode", format!("{mode:?}"));
    manifest.set("final_loss", final_loss);
    let final_ckpt = out_dir.join("checkpoint_final.ckpt");
    manifest.set("checkpoint", final_ckpt.display());
    manifest.set("checkpoint.hash", format!("{:016x}", checkpoint_hash(&final_ckpt)?));
    manifest.write(&out_dir.join("run_manifest.txt"))
}

fn cmd_finetune(
    corpus_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    task: Task,
    train: &TrainConfig,
    batch_size: usize,
    seed: u64,
) -> Result<ExitCode> {
    require_file(checkpoint, "checkpoint")?;
    let (_, pieces) = load_encoded_corpus(corpus_dir)?;
    if pieces.is_empty() {
        return Err(usage(format!("corpus {} holds no pieces", corpus_dir.display())));
    }
    if matches!(task, Task::Inpaint) && !pieces.iter().any(|p| p.max_bar().unwrap_or(0) >= 15) {
        return Err(usage("inpainting fine-tuning needs pieces of at least 16 bars".to_string()));
    }

    let ck = load_checkpoint(checkpoint)?;
    let mut trainer = Trainer::from_checkpoint(ck, train);
    trainer.schedule = cantus_core::model::OneCycle {
        peak: train.peak_lr,
        warmup: train.warmup,
        total: train.steps,
        start: trainer.step,
    };
    let target = trainer.step + train.steps;

    let provider = move |step: u64| {
        use rand::Rng;
        let mut rng = derive_rng(seed, "finetune-batch", step);
        let mut batch = Vec::with_capacity(batch_size);
        let mut attempts = 0;
        while batch.len() < batch_size && attempts < batch_size * 20 {
            attempts += 1;
            let piece = &pieces[rng.random_range(0..pieces.len())];
            let sample = match task {
                Task::Continuation => continuation_sample(piece, &mut rng),
                Task::Inpaint => inpaint_sample(piece, &mut rng),
            };
            if let Some(s) = sample {
                batch.push(s);
            }
        }
        batch
    };

    let final_loss = trainer.run(target, provider, train, out_dir)?;
    let mut manifest = Manifest::new("finetune");
    manifest.set("seed", seed);
    manifest.set("task", format!("{task:?}"));
    manifest.input("corpus", corpus_dir)?;
    manifest.input("base_checkpoint", checkpoint)?;
    let model_cfg = trainer.model.clone();
    write_train_manifest(
        &mut manifest,
        &model_cfg,
        train,
        batch_size,
        BatchMode::Single(Objective::LongSpan),
        out_dir,
        final_loss,
    )?;
    println!("fine-tuning ({task:?}) finished at step {} (loss {final_loss:.4})", trainer.step);
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(
    checkpoint: &Path,
    out_dir: &Path,
    count: usize,
    prompt: Option<&Path>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ExitCode> {
    require_file(checkpoint, "checkpoint")?;
    let ck = load_checkpoint(checkpoint)?;
    let layout = Layout::new(&ck.config);
    let model = Model { cfg: &ck.config, layout: &layout, params: &ck.params };

    let prompt_tokens = match prompt {
        Some(path) => {
            require_file(path, "prompt")?;
            let melody = corpus::read_note_file(path)?;
            encode(&corpus::quantize(&melody)).context("prompt does not encode")?
        }
        None => TokenSequence::default(),
    };
    if prompt_tokens.max_bar().unwrap_or(0) >= sampler.bar_limit {
        return Err(usage("prompt already reaches the bar limit".to_string()));
    }

    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("generate");
    manifest.set("seed", seed);
    manifest.input("checkpoint", checkpoint)?;
    manifest.set("checkpoint.hash", format!("{:016x}", checkpoint_hash(checkpoint)?));
    if let Some(p) = prompt {
        manifest.input("prompt", p)?;
    }
    manifest.set("temperature", sampler.temperature);
    manifest.set("top_k", sampler.top_k);
    manifest.set("bars", sampler.bar_limit);
    manifest.set("count", count);

    for i in 0..count {
        let mut rng = derive_rng(seed, "generate", i as u64);
        let (tokens, report) = continue_melody(&model, &prompt_tokens, sampler, &mut rng);
        let stem = format!("gen_{i:03}");
        fs::write(out_dir.join(format!("{stem}.tokens")), to_text(&tokens))?;
        let melody = decode(&tokens);
        fs::write(out_dir.join(format!("{stem}.mid")), write_midi(melody.tempo_bpm, &melody.notes))?;
        corpus::write_note_file(&out_dir.join(format!("{stem}.notes")), &melody)?;
        manifest.set(&format!("output.{stem}.notes"), report.generated_notes);
        manifest.set(&format!("output.{stem}.forced_stop"), report.forced_stop);
    }
    manifest.write(&out_dir.join("run_manifest.txt"))?;
    println!("wrote {count} generations to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_inpaint(
    checkpoint: &Path,
    piece: &Path,
    out_dir: &Path,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ExitCode> {
    require_file(checkpoint, "checkpoint")?;
    require_file(piece, "piece")?;
    let ck = load_checkpoint(checkpoint)?;
    let layout = Layout::new(&ck.config);
    let model = Model { cfg: &ck.config, layout: &layout, params: &ck.params };

    let melody = corpus::read_note_file(piece)?;
    let tokens = encode(&corpus::quantize(&melody)).context("piece does not encode")?;
    if tokens.max_bar().unwrap_or(0) < 15 {
        return Err(usage("inpainting needs a piece of at least 16 bars".to_string()));
    }
    let pre = TokenSequence(
        tokens.tokens().iter().filter(|t| t.as_note().is_some_and(|n| n.bar < 6)).copied().collect(),
    );
    let post = TokenSequence(
        tokens
            .tokens()
            .iter()
            .filter(|t| t.as_note().is_some_and(|n| (10..16).contains(&n.bar)))
            .copied()
            .collect(),
    );

    let mut rng = derive_rng(seed, "inpaint", 0);
    let (out_tokens, report) = inpaint(&model, &pre, &post, sampler, &mut rng);

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("inpaint.tokens"), to_text(&out_tokens))?;
    let out_melody = decode(&out_tokens);
    fs::write(out_dir.join("inpaint.mid"), write_midi(out_melody.tempo_bpm, &out_melody.notes))?;
    corpus::write_note_file(&out_dir.join("inpaint.notes"), &out_melody)?;

    let mut manifest = Manifest::new("inpaint");
    manifest.set("seed", seed);
    manifest.input("checkpoint", checkpoint)?;
    manifest.set("checkpoint.hash", format!("{:016x}", checkpoint_hash(checkpoint)?));
    manifest.input("piece", piece)?;
    manifest.set("temperature", sampler.temperature);
    manifest.set("top_k", sampler.top_k);
    manifest.set("filled_notes", report.generated_notes);
    manifest.set("empty_fill", report.empty_fill);
    manifest.write(&out_dir.join("run_manifest.txt"))?;
    println!("inpainted {} notes into {}", report.generated_notes, out_dir.display());
    Ok(ExitCode::SUCCESS)
}

/// A setting directory either holds note files directly (one run) or
/// run subdirectories, each with note files (mean and std across runs).
fn setting_runs(dir: &Path) -> Result<Vec<Vec<MelodySequence>>> {
    require_dir(dir, "setting directory")?;
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut runs = Vec::new();
    for sub in &subdirs {
        let melodies = corpus::load_corpus(sub)?;
        if !melodies.is_empty() {
            runs.push(melodies);
        }
    }
    if runs.is_empty() {
        let melodies = corpus::load_corpus(dir)?;
        if !melodies.is_empty() {
            runs.push(melodies);
        }
    }
    if runs.is_empty() {
        return Err(usage(format!("setting {} holds no note files", dir.display())));
    }
    Ok(runs)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_evaluate(reference: &Path, settings: &[String], out_file: &Path) -> Result<ExitCode> {
    require_dir(reference, "reference directory")?;
    if settings.is_empty() {
        return Err(usage("pass at least one --setting name=dir".to_string()));
    }
    let reference_corpus = corpus::load_corpus(reference)?;
    if reference_corpus.is_empty() {
        return Err(usage(format!("reference {} holds no note files", reference.display())));
    }
    let ref_div = [
        cantus_core::evaluate::diversity(&reference_corpus, DiversityGroup::Short),
        cantus_core::evaluate::diversity(&reference_corpus, DiversityGroup::Mid),
        cantus_core::evaluate::diversity(&reference_corpus, DiversityGroup::Long),
    ];

    let mut records = String::new();
    let mut mean_rows: Vec<MetricRow> = Vec::new();
    let mut std_rows: Vec<[f64; 6]> = Vec::new();
    for spec in settings {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--setting must be name=dir, got `{spec}`")))?;
        let runs = setting_runs(Path::new(dir))?;
        let rows: Vec<MetricRow> =
            runs.iter().map(|corpus| metric_row(name, corpus, &reference_corpus)).collect();
        for (i, r) in rows.iter().enumerate() {
            records.push_str(&format!(
                "record setting={name} run={i} d_p={} d_r={} d_s={} d_ds={} d_dm={} d_dl={}\n",
                r.d_p, r.d_r, r.d_s, r.d_ds, r.d_dm, r.d_dl
            ));
        }
        let columns: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                rows.iter()
                    .map(|r| [r.d_p, r.d_r, r.d_s, r.d_ds, r.d_dm, r.d_dl][k])
                    .collect()
            })
            .collect();
        let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_std(c)).collect();
        mean_rows.push(MetricRow {
            setting: name.to_string(),
            d_p: stats[0].0,
            d_r: stats[1].0,
            d_s: stats[2].0,
            d_ds: stats[3].0,
            d_dm: stats[4].0,
            d_dl: stats[5].0,
        });
        std_rows.push([stats[0].1, stats[1].1, stats[2].1, stats[3].1, stats[4].1, stats[5].1]);
    }

    let scores = if mean_rows.len() >= 2 { Some(task_scores(&mean_rows, ref_div)?) } else { None };

    let mut out = String::new();
    out.push_str("# objective evaluation report\n");
    out.push_str(&format!("# reference {} hash {:016x}\n", reference.display(), hash_path(reference)?));
    out.push_str(&format!(
        "# reference diversity short {} mid {} long {}\n",
        ref_div[0], ref_div[1], ref_div[2]
    ));
    out.push_str("# bar-pair similarity: shared (position,pitch,duration) triples over the larger bar, distances 1..16\n");
    out.push_str("setting\tD_P\tD_R\tD_S\tD_Ds\tD_Dm\tD_Dl\tTS\trank\n");
    let score_of = |name: &str| -> (String, String) {
        match &scores {
            Some(s) => {
                let t: Vec<(f64, f64)> = {
                    let totals: Vec<(String, f64)> =
                        s.iter().map(|x| (x.setting.clone(), x.total)).collect();
                    let ranked = cantus_core::evaluate::overall_rank(&totals);
                    s.iter()
                        .map(|x| {
                            let rank = ranked.iter().find(|(n, _, _)| n == &x.setting).unwrap().2;
                            (x.total, rank)
                        })
                        .collect()
                };
                let idx = s.iter().position(|x| x.setting == name).unwrap();
                (format!("{}", t[idx].0), format!("{}", t[idx].1))
            }
            None => ("-".into(), "-".into()),
        }
    };
    for (row, std) in mean_rows.iter().zip(&std_rows) {
        let (ts, rank) = score_of(&row.setting);
        out.push_str(&format!(
            "{}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{ts}\t{rank}\n",
            row.setting,
            row.d_p, std[0],
            row.d_r, std[1],
            row.d_s, std[2],
            row.d_ds, std[3],
            row.d_dm, std[4],
            row.d_dl, std[5],
        ));
    }
    out.push('\n');
    out.push_str(&records);
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_file, &out)?;

    let mut manifest = Manifest::new("evaluate");
    manifest.input("reference", reference)?;
    for spec in settings {
        if let Some((name, dir)) = spec.split_once('=') {
            manifest.input(&format!("setting.{name}"), Path::new(dir))?;
        }
    }
    manifest.write(&manifest_path(out_file))?;
    println!("evaluation report written to {}", out_file.display());
    Ok(ExitCode::SUCCESS)
}
