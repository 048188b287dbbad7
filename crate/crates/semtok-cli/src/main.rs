//! One binary for the whole pipeline: sample a synthetic catalog, train,
//! assign identifiers, and score retrieval.
//!
//! Every subcommand writes `resolved-config.json` into its output
//! directory, so any run can be reproduced from its artifacts alone.
//! Exit codes: 0 success, 2 usage error, 3 data/validation error,
//! 4 numerical failure during training.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use semtok::data::{self, FilterConfig, SyntheticSpec};
use semtok::loss::NegativePolicy;
use semtok::quantizer::CodebookSharing;
use semtok::retrieval::{self, EvalPart, EvalReport, MarkovTokenModel, TokenTrie};
use semtok::tokens::{self, TokenTable};
use semtok::trainer::{self, AlphaMode, TrainConfig};
use semtok::{checkpoint, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "semtok", version, about = "Discrete semantic identifiers for catalog items")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a hierarchical synthetic catalog plus user sequences.
    GenSynthetic(GenArgs),
    /// Train encoders, fusion, and codebooks on a dataset directory.
    Train(TrainArgs),
    /// Assign an identifier to every item using a trained checkpoint.
    Tokenize(TokenizeArgs),
    /// Score next-item retrieval with beam search over the token trie.
    EvalRetrieval(EvalArgs),
    /// Summarize the artifacts found in a run directory.
    Report(ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Tokenize(args) => run_tokenize(args),
        Command::EvalRetrieval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

// ── shared plumbing ──────────────────────────────────────────────────────

/// Rejects a non-empty output directory unless `--force` was given, then
/// makes sure it exists.
fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied {
            return Err(Error::InvalidInput(format!(
                "output directory `{}` is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn echo_config<T: Serialize>(dir: &Path, resolved: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(resolved)?;
    std::fs::write(dir.join("resolved-config.json"), text + "\n")?;
    Ok(())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ── gen-synthetic ────────────────────────────────────────────────────────

#[derive(Parser)]
struct GenArgs {
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full generator configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Children per hierarchy level, e.g. `8,8,8`.
    #[arg(long, value_delimiter = ',')]
    branching: Option<Vec<usize>>,
    #[arg(long)]
    items_per_leaf: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    /// Interactions sampled per user.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Probability of staying inside the current top-level branch.
    #[arg(long)]
    branch_affinity: Option<f64>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(path) => load_json(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.branching {
        spec.branching = v;
    }
    if let Some(v) = args.items_per_leaf {
        spec.items_per_leaf = v;
    }
    if let Some(v) = args.users {
        spec.users = v;
    }
    if let Some(v) = args.seq_len {
        spec.seq_len = v;
    }
    if let Some(v) = args.branch_affinity {
        spec.branch_affinity = v;
    }

    let synth = data::generate_synthetic(&spec)?;
    ensure_out_dir(&args.out, args.force)?;
    data::write_dataset_dir(&args.out, &synth)?;
    echo_config(&args.out, &spec)?;
    println!(
        "wrote {} items across {} leaves, {} user sequences → {}",
        synth.dataset.len(),
        spec.leaf_count(),
        synth.sequences.len(),
        args.out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, ValueEnum)]
enum NegativesArg {
    /// Other reconstructions and same-modality views.
    Both,
    /// Other reconstructions only.
    Recon,
    /// Same-modality views only.
    Modal,
}

#[derive(Parser)]
struct TrainArgs {
    /// Dataset directory (manifest.json, embeddings.jsonl, ...).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Items per optimization batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Initial assignment temperature of the annealing schedule.
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    /// `true` shares one codebook across levels, `false` trains one per level.
    #[arg(long)]
    shared_codebook: Option<bool>,
    /// Which negatives enter the contrastive denominator.
    #[arg(long, value_enum)]
    negatives: Option<NegativesArg>,
    #[arg(long)]
    force: bool,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.tau {
        config.tau = v;
    }
    if let Some(v) = args.alpha0 {
        config.alpha = match config.alpha {
            AlphaMode::Annealed { floor, decay_rate, .. } => {
                AlphaMode::Annealed { initial: v, floor, decay_rate }
            }
            AlphaMode::Constant { .. } => AlphaMode::Constant { value: v },
        };
    }
    if let Some(v) = args.codebook_size {
        config.codebook_size = v;
    }
    if let Some(v) = args.levels {
        config.levels = v;
    }
    if let Some(v) = args.shared_codebook {
        config.sharing = if v { CodebookSharing::Shared } else { CodebookSharing::PerLevel };
    }
    if let Some(v) = args.negatives {
        config.negatives = match v {
            NegativesArg::Both => NegativePolicy::default(),
            NegativesArg::Recon => NegativePolicy::recon_only(),
            NegativesArg::Modal => NegativePolicy::modal_only(),
        };
    }

    let dataset = data::load_dataset(&args.data)?;
    config.validate()?;
    ensure_out_dir(&args.out, args.force)?;
    echo_config(&args.out, &config)?;

    let write_outputs = |out: &trainer::TrainOutput| -> Result<()> {
        checkpoint::save(&args.out.join("checkpoint.ckpt"), &config, &out.artifacts)?;
        std::fs::write(args.out.join("report.csv"), out.report.to_csv())?;
        Ok(())
    };

    match trainer::train(&config, &dataset) {
        Ok(output) => {
            write_outputs(&output)?;
            match output.report.epochs.last() {
                Some(last) => println!(
                    "trained {} epochs: loss {:.4}, perplexity {:.2}, collision {:.4} → {}",
                    output.report.epochs.len(),
                    last.loss,
                    last.perplexity,
                    last.collision_rate,
                    args.out.display()
                ),
                None => println!("wrote initialization checkpoint → {}", args.out.display()),
            }
            Ok(())
        }
        Err(failure) => {
            if let Some(last) = &failure.last_good {
                write_outputs(last)?;
                eprintln!(
                    "checkpoint and report reflect the {} epochs completed before the failure",
                    last.report.epochs.len()
                );
            }
            Err(failure.error)
        }
    }
}

// ── tokenize ─────────────────────────────────────────────────────────────

#[derive(Parser)]
struct TokenizeArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to assign identifiers for.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing table, even one assigned by different codebooks.
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct TokenizeEcho {
    checkpoint: PathBuf,
    data: PathBuf,
    codebook_checksum: String,
    items: usize,
}

fn run_tokenize(args: TokenizeArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let dataset = data::load_dataset(&args.data)?;
    if ck.modalities != dataset.manifest.modalities {
        return Err(Error::InvalidInput(format!(
            "checkpoint was trained on modalities {:?}, dataset declares {:?}",
            ck.modalities, dataset.manifest.modalities
        )));
    }

    let table_path = args.out.join("tokens.jsonl");
    if table_path.exists() && !args.force {
        // An existing table from other codebooks is stale; name both hashes.
        if let Ok(old) = TokenTable::import_from(&table_path) {
            if let Err(e) = old.verify_checksum(&ck.artifacts.codebooks) {
                return Err(Error::InvalidInput(format!(
                    "`{}` exists and {e}; pass --force to regenerate",
                    table_path.display()
                )));
            }
        }
        return Err(Error::InvalidInput(format!(
            "`{}` exists (pass --force to overwrite)",
            table_path.display()
        )));
    }
    std::fs::create_dir_all(&args.out)?;

    let table = tokens::assign_all(&dataset, &ck.artifacts)?;
    table.export_to(&table_path)?;
    let raw = tokens::raw_codes(&dataset, &ck.artifacts)?;
    std::fs::write(args.out.join("metrics.csv"), tokens::metrics_csv(&raw)?)?;

    if let Some(labels) = &dataset.labels {
        let depth = labels.iter().map(Vec::len).min().unwrap_or(0);
        let mut csv = String::from("level,purity\n");
        for l in 0..ck.config.levels.min(depth) {
            let codes: Vec<usize> = raw.iter().map(|t| t[l]).collect();
            let truth: Vec<usize> = labels.iter().map(|p| p[l]).collect();
            csv.push_str(&format!("{},{:.6}\n", l + 1, tokens::cluster_purity(&codes, &truth)?));
        }
        std::fs::write(args.out.join("purity.csv"), csv)?;
    }

    echo_config(
        &args.out,
        &TokenizeEcho {
            checkpoint: args.checkpoint.clone(),
            data: args.data.clone(),
            codebook_checksum: ck.artifacts.codebooks.checksum(),
            items: table.len(),
        },
    )?;
    println!(
        "assigned {} identifiers (raw collision {:.4}) → {}",
        table.len(),
        tokens::collision_rate(&raw),
        args.out.display()
    );
    Ok(())
}

// ── eval-retrieval ───────────────────────────────────────────────────────

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Val,
    Test,
}

impl From<PartArg> for EvalPart {
    fn from(p: PartArg) -> EvalPart {
        match p {
            PartArg::Val => EvalPart::Val,
            PartArg::Test => EvalPart::Test,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    k: Vec<usize>,
    beam: usize,
    order: usize,
    smoothing: f64,
    part: EvalPart,
    threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: vec![5, 10],
            beam: 50,
            order: retrieval::DEFAULT_ORDER,
            smoothing: retrieval::DEFAULT_SMOOTHING,
            part: EvalPart::Test,
            threads: 1,
        }
    }
}

#[derive(Serialize)]
struct EvalEcho {
    table: PathBuf,
    sequences: PathBuf,
    #[serde(flatten)]
    settings: EvalSettings,
}

#[derive(Parser)]
struct EvalArgs {
    /// Token table (JSONL) produced by `tokenize`.
    #[arg(long)]
    table: PathBuf,
    /// User sequences (JSONL).
    #[arg(long)]
    sequences: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding full evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recall cutoffs, e.g. `5,10`.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Beam width; must cover the largest cutoff.
    #[arg(long)]
    beam: Option<usize>,
    /// History length (in items) conditioning each prediction.
    #[arg(long)]
    order: Option<usize>,
    /// Additive smoothing for token conditionals.
    #[arg(long)]
    smoothing: Option<f64>,
    /// Which held-out slice to score.
    #[arg(long, value_enum)]
    part: Option<PartArg>,
    /// Worker threads; any count reproduces the single-threaded result.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    force: bool,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut settings: EvalSettings = match &args.config {
        Some(path) => load_json(path)?,
        None => EvalSettings::default(),
    };
    if let Some(v) = args.k {
        settings.k = v;
    }
    if let Some(v) = args.beam {
        settings.beam = v;
    }
    if let Some(v) = args.order {
        settings.order = v;
    }
    if let Some(v) = args.smoothing {
        settings.smoothing = v;
    }
    if let Some(v) = args.part {
        settings.part = v.into();
    }
    if let Some(v) = args.threads {
        settings.threads = v;
    }

    let Some(&max_k) = settings.k.iter().max() else {
        return Err(Error::InvalidConfig("at least one recall cutoff is required".into()));
    };
    if settings.beam < max_k {
        return Err(Error::InvalidConfig(format!(
            "beam width {} cannot rank the top {max_k}",
            settings.beam
        )));
    }

    let table = TokenTable::import_from(&args.table)?;
    let sequences = data::load_sequences(&args.sequences)?;
    let known: BTreeSet<&str> = table.iter().map(|(id, _)| id).collect();
    let splits = data::filter_and_split(&sequences, &known, FilterConfig::default())?;
    let trie = TokenTrie::build(&table)?;
    let train_seqs: Vec<Vec<String>> = splits.users.iter().map(|u| u.train.clone()).collect();
    let model = MarkovTokenModel::fit(&table, &train_seqs, settings.order, settings.smoothing)?;

    let reports = settings
        .k
        .iter()
        .map(|&k| {
            retrieval::evaluate(
                &model,
                &trie,
                &splits,
                settings.part,
                k,
                settings.beam,
                settings.threads,
            )
        })
        .collect::<Result<Vec<EvalReport>>>()?;

    let eval_path = args.out.join("eval.json");
    if eval_path.exists() && !args.force {
        return Err(Error::InvalidInput(format!(
            "`{}` exists (pass --force to overwrite)",
            eval_path.display()
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(&eval_path, serde_json::to_string_pretty(&reports)? + "\n")?;
    echo_config(
        &args.out,
        &EvalEcho { table: args.table.clone(), sequences: args.sequences.clone(), settings },
    )?;
    for r in &reports {
        println!("Recall@{} = {:.4} over {} events (beam {})", r.k, r.recall, r.n_events, r.beam_width);
    }
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────────

#[derive(Parser)]
struct ReportArgs {
    /// Run directory holding artifacts from previous subcommands.
    #[arg(long)]
    run: PathBuf,
}

fn run_report(args: ReportArgs) -> Result<()> {
    let mut found = false;

    let report_csv = args.run.join("report.csv");
    if report_csv.exists() {
        found = true;
        let text = std::fs::read_to_string(&report_csv)?;
        let rows: Vec<&str> = text.lines().skip(1).collect();
        match (rows.first(), rows.last()) {
            (Some(first), Some(last)) => {
                let f: Vec<&str> = first.split(',').collect();
                let l: Vec<&str> = last.split(',').collect();
                println!("training: {} epochs", rows.len());
                println!("  loss       {} → {}", f[1], l[1]);
                println!("  perplexity {} → {}", f[2], l[2]);
                println!("  collision  {} → {}", f[3], l[3]);
            }
            _ => println!("training: initialization only (no epochs)"),
        }
    }

    for name in ["metrics.csv", "purity.csv"] {
        let path = args.run.join(name);
        if path.exists() {
            found = true;
            println!("{}:", name.trim_end_matches(".csv"));
            for line in std::fs::read_to_string(&path)?.lines() {
                println!("  {line}");
            }
        }
    }

    let eval_json = args.run.join("eval.json");
    if eval_json.exists() {
        found = true;
        let reports: Vec<EvalReport> = load_json(&eval_json)?;
        println!("retrieval:");
        for r in &reports {
            println!("  Recall@{} = {:.4} over {} events (beam {})", r.k, r.recall, r.n_events, r.beam_width);
        }
    }

    if !found {
        return Err(Error::InvalidInput(format!(
            "no artifacts found under `{}`",
            args.run.display()
        )));
    }
    Ok(())
}
