//! Command-line entry points: data generation, training, evaluation,
//! embedding export, and ablation sweeps. Every command snapshots its run
//! into a `run_manifest.json` with config, seeds, corpus checksum, artifact
//! digests, and metric summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{Config, KnowledgeKind};
use crate::error::{DiscoverError, Result};
use crate::gadm::TransitionMetric;
use crate::retrieval::{evaluate, MetricsReport, SplitPart};
use crate::synthcover::{self, hex_digest, io as corpus_io, split_scenarios, Corpus, CorpusSplit};
use crate::training::{train, TrainState};

#[derive(Parser)]
#[command(
    name = "discover",
    version,
    about = "Disentangled music representation learning lab for cover song identification"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cover-song corpus into a directory.
    GenData(GenDataArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Export embeddings of corpus recordings to CSV.
    Embed(EmbedArgs),
    /// Run a one-axis configuration sweep (train + eval per value).
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing corpus directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, history, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Disable a module: may be given twice (kdm, gadm).
    #[arg(long, value_parser = ["kdm", "gadm"])]
    ablate: Vec<String>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: train | valid | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Override the split scenario (1 or 2).
    #[arg(long)]
    scenario: Option<u8>,
    /// Report file (structured text).
    #[arg(long, default_value = "report.toml")]
    out: PathBuf,
    /// Optional per-query CSV table.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Which recordings to export: train | valid | test | all.
    #[arg(long, default_value = "all")]
    split: String,
    /// CSV output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Flat key = value base config file.
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for per-run artifacts and the sweep table.
    #[arg(long)]
    out: PathBuf,
    /// Sweep axis: metric | clusters | knowledge.
    #[arg(long, value_parser = ["metric", "clusters", "knowledge"])]
    axis: String,
    /// Comma-separated axis values; defaults depend on the axis.
    #[arg(long)]
    values: Option<String>,
}

/// Reproducibility record written by every command.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    timestamp_utc: String,
    config: BTreeMap<String, String>,
    data_seed: u64,
    train_seed: u64,
    corpus_checksum: Option<String>,
    artifacts: BTreeMap<String, String>,
    metrics: Option<MetricsReport>,
    note: Option<String>,
}

impl RunManifest {
    fn new(command: &str, config: &Config) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            timestamp_utc: chrono::Utc::now().to_rfc3339(),
            config: config.snapshot(),
            data_seed: config.data.seed,
            train_seed: config.train.seed,
            corpus_checksum: None,
            artifacts: BTreeMap::new(),
            metrics: None,
            note: None,
        }
    }

    fn add_artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        self.artifacts.insert(name, hex_digest(&hasher.finalize()));
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DiscoverError::Format(format!("run manifest serialization: {e}")))?;
        std::fs::write(dir.join("run_manifest.json"), text)?;
        Ok(())
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn load_corpus_and_split(data_dir: &Path, scenario: Option<u8>) -> Result<(Corpus, CorpusSplit)> {
    let corpus = corpus_io::load_corpus(data_dir)?;
    let d = &corpus.config;
    let scenario = scenario.unwrap_or(d.scenario);
    let split = split_scenarios(&corpus, d.ratios(), scenario, d.seen_fraction, d.seed)?;
    Ok((corpus, split))
}

/// The data section of a train/sweep config must match the corpus it runs on.
fn check_data_section(config: &Config, corpus: &Corpus) -> Result<()> {
    let want = Config {
        data: corpus.config.clone(),
        ..config.clone()
    };
    let a = config.snapshot();
    let b = want.snapshot();
    for (key, value) in &a {
        if key.starts_with("data.") && b.get(key) != Some(value) {
            return Err(DiscoverError::Config(format!(
                "config key {key} = {value} does not match the corpus manifest \
                 ({}); regenerate the corpus or align the config",
                b.get(key).cloned().unwrap_or_default()
            )));
        }
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let config = Config::from_file(&args.config)?;
    if args.out.join(corpus_io::MANIFEST_FILE).exists() && !args.force {
        return Err(DiscoverError::Config(format!(
            "{} already holds a corpus; pass --force to overwrite",
            args.out.display()
        )));
    }
    let corpus = synthcover::generate_corpus(&config.data)?;
    corpus_io::save_corpus(&corpus, &args.out)?;

    let mut manifest = RunManifest::new("gen-data", &config);
    manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.out)?);
    for name in [
        corpus_io::MANIFEST_FILE,
        corpus_io::FEATURES_FILE,
        corpus_io::F0_FILE,
        corpus_io::TIMBRE_FILE,
    ] {
        manifest.add_artifact(&args.out.join(name))?;
    }
    manifest.write(&args.out)?;
    println!(
        "wrote corpus: {} songs, {} recordings -> {}",
        corpus.songs.len(),
        corpus.n_recordings(),
        args.out.display()
    );
    Ok(())
}

fn apply_ablations(config: &mut Config, ablate: &[String]) {
    for a in ablate {
        match a.as_str() {
            "kdm" => config.kdm.enabled = false,
            "gadm" => config.gadm.enabled = false,
            _ => unreachable!("clap restricts the value set"),
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = Config::from_file(&args.config)?;
    apply_ablations(&mut config, &args.ablate);
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }

    let (corpus, split) = load_corpus_and_split(&args.data, None)?;
    check_data_section(&config, &corpus)?;
    std::fs::create_dir_all(&args.out)?;

    let outcome = train(&config, &corpus, &split)?;

    let ckpt_path = args.out.join("checkpoint.bin");
    let saved_state = if outcome.diverged.is_some() {
        // divergence: persist the last good state
        &outcome.state
    } else {
        &outcome.best_state
    };
    checkpoint::save(saved_state, &ckpt_path)?;

    let history_path = args.out.join("history.jsonl");
    let mut lines = String::new();
    for record in &outcome.history {
        lines.push_str(&serde_json::to_string(record).map_err(|e| {
            DiscoverError::Format(format!("history serialization: {e}"))
        })?);
        lines.push('\n');
    }
    std::fs::write(&history_path, lines)?;

    let mut manifest = RunManifest::new("train", &config);
    manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.data)?);
    manifest.add_artifact(&ckpt_path)?;
    manifest.add_artifact(&history_path)?;
    manifest.note = outcome.diverged.clone();
    manifest.write(&args.out)?;

    if let Some(msg) = outcome.diverged {
        return Err(DiscoverError::Training(format!(
            "training aborted ({msg}); last good checkpoint written to {}",
            ckpt_path.display()
        )));
    }
    println!(
        "trained {} epochs, best validation MAP {:.4} -> {}",
        outcome.history.len(),
        outcome.best_val_map,
        ckpt_path.display()
    );
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(DiscoverError::Input(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let state = load_state(&args.checkpoint)?;
    let part: SplitPart = args.split.parse()?;
    if let Some(s) = args.scenario {
        if s != 1 && s != 2 {
            return Err(DiscoverError::Config(format!(
                "scenario must be 1 or 2, got {s}"
            )));
        }
    }
    let (corpus, split) = load_corpus_and_split(&args.data, args.scenario)?;

    let (report, outcomes) = evaluate(&state.encoder, &corpus, &split, part)?;
    let text = toml::to_string_pretty(&report)
        .map_err(|e| DiscoverError::Format(format!("report serialization: {e}")))?;
    std::fs::write(&args.out, &text)?;

    if let Some(per_query) = &args.per_query {
        let mut csv = String::from(
            "query_id,song_id,n_relevant,average_precision,precision_at_10,first_relevant_rank\n",
        );
        for o in &outcomes {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                o.query_id,
                o.song_id,
                o.n_relevant,
                o.average_precision,
                o.precision_at_10,
                o.first_relevant_rank
            ));
        }
        std::fs::write(per_query, csv)?;
    }

    let report_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut manifest = RunManifest::new("eval", &state.config);
    manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.data)?);
    manifest.add_artifact(&args.out)?;
    manifest.metrics = Some(report.clone());
    manifest.write(&report_dir)?;

    println!(
        "split={} scenario={} MAP={:.4} P@10={:.4} MR1={:.2} queries={} -> {}",
        args.split,
        report.scenario,
        report.map,
        report.p_at_10,
        report.mr1,
        report.n_queries,
        args.out.display()
    );
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let state = load_state(&args.checkpoint)?;
    let (corpus, split) = load_corpus_and_split(&args.data, None)?;
    let ids: Vec<u32> = match args.split.as_str() {
        "all" => corpus.recordings.iter().map(|r| r.recording_id).collect(),
        other => {
            let part: SplitPart = other.parse()?;
            match part {
                SplitPart::Train => split.train.clone(),
                SplitPart::Valid => split.valid.clone(),
                SplitPart::Test => split.test.clone(),
            }
        }
    };

    let dim = state.config.encoder.dim;
    let mut csv = String::from("recording_id");
    for k in 0..dim {
        csv.push_str(&format!(",e{k}"));
    }
    csv.push('\n');
    for id in &ids {
        let rep = state.encode_plain(&corpus, std::slice::from_ref(id))?;
        csv.push_str(&id.to_string());
        for v in &rep[0] {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(&args.out, csv)?;

    let out_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut manifest = RunManifest::new("embed", &state.config);
    manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.data)?);
    manifest.add_artifact(&args.out)?;
    manifest.write(&out_dir)?;

    println!("exported {} embeddings -> {}", ids.len(), args.out.display());
    Ok(())
}

fn sweep_values(axis: &str, values: &Option<String>) -> Vec<String> {
    if let Some(v) = values {
        return v.split(',').map(|s| s.trim().to_string()).collect();
    }
    match axis {
        "metric" => vec!["manhattan".into(), "euclidean".into(), "cosine".into()],
        "clusters" => vec!["100".into(), "1000".into(), "5000".into(), "10000".into()],
        "knowledge" => vec![
            "f0".into(),
            "f0+tradeoff".into(),
            "timbre".into(),
            "timbre+tradeoff".into(),
            "both".into(),
            "both+tradeoff".into(),
        ],
        _ => unreachable!(),
    }
}

fn apply_axis_value(config: &mut Config, axis: &str, value: &str) -> Result<()> {
    match axis {
        "metric" => {
            config.gadm.metric = match value {
                "manhattan" => TransitionMetric::Manhattan,
                "euclidean" => TransitionMetric::Euclidean,
                "cosine" => TransitionMetric::Cosine,
                _ => {
                    return Err(DiscoverError::Config(format!(
                        "unknown metric sweep value {value:?}"
                    )))
                }
            };
        }
        "clusters" => {
            config.kdm.clusters = value.parse().map_err(|_| {
                DiscoverError::Config(format!("invalid cluster count {value:?}"))
            })?;
        }
        "knowledge" => {
            let (kind, tradeoff) = match value.strip_suffix("+tradeoff") {
                Some(base) => (base, true),
                None => (value, false),
            };
            config.kdm.knowledge = match kind {
                "f0" => KnowledgeKind::F0,
                "timbre" => KnowledgeKind::Timbre,
                "both" => KnowledgeKind::Both,
                _ => {
                    return Err(DiscoverError::Config(format!(
                        "unknown knowledge sweep value {value:?}"
                    )))
                }
            };
            config.kdm.tradeoff = tradeoff;
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = Config::from_file(&args.config)?;
    let (corpus, split) = load_corpus_and_split(&args.data, None)?;
    check_data_section(&base, &corpus)?;
    std::fs::create_dir_all(&args.out)?;

    let values = sweep_values(&args.axis, &args.values);
    let mut table = String::from("axis,value,map,p_at_10,mr1,run_dir\n");
    println!("{:<10} {:<16} {:>8} {:>8} {:>8}", "axis", "value", "MAP", "P@10", "MR1");
    for value in &values {
        let mut config = base.clone();
        apply_axis_value(&mut config, &args.axis, value)?;
        let run_dir = args
            .out
            .join(format!("{}_{}", args.axis, value.replace('+', "_")));
        std::fs::create_dir_all(&run_dir)?;

        let outcome = train(&config, &corpus, &split)?;
        if let Some(msg) = &outcome.diverged {
            return Err(DiscoverError::Training(format!(
                "sweep run {value} diverged: {msg}"
            )));
        }
        let ckpt_path = run_dir.join("checkpoint.bin");
        checkpoint::save(&outcome.best_state, &ckpt_path)?;
        let (report, _) = evaluate(&outcome.best_state.encoder, &corpus, &split, SplitPart::Test)?;

        let mut manifest = RunManifest::new(&format!("sweep:{}={}", args.axis, value), &config);
        manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.data)?);
        manifest.add_artifact(&ckpt_path)?;
        manifest.metrics = Some(report.clone());
        manifest.write(&run_dir)?;

        println!(
            "{:<10} {:<16} {:>8.4} {:>8.4} {:>8.2}",
            args.axis, value, report.map, report.p_at_10, report.mr1
        );
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            args.axis,
            value,
            report.map,
            report.p_at_10,
            report.mr1,
            run_dir.display()
        ));
    }
    let table_path = args.out.join("sweep.csv");
    std::fs::write(&table_path, table)?;

    let mut manifest = RunManifest::new(&format!("sweep:{}", args.axis), &base);
    manifest.corpus_checksum = Some(corpus_io::corpus_dir_checksum(&args.data)?);
    manifest.add_artifact(&table_path)?;
    manifest.write(&args.out)?;
    println!("sweep table -> {}", table_path.display());
    Ok(())
}
