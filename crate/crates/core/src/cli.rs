//! Command-line pipeline: synth, centroids, targets, train, eval,
//! check-alignment.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::binio;
use crate::centroids::{estimate_centroids, load_centroids, save_centroids, PseudoPairScores};
use crate::cftrain::{
    full_loss, load_weight_table, save_weight_table, train_with_callback, weights_from_pairs, TrainConfig,
};
use crate::curves::{export_curve_csv, EvaluationCurves};
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::fairmodule::{forward, init_from_pretrained, load_checkpoint, save_checkpoint, save_checkpoint_named};
use crate::synth::{generate_to_dir, parse_groups, SynthConfig};
use crate::transform::{
    alignment_report, load_target_table, resolve_reference, save_target_table, target_table_from_pairs,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const RUN_JSON: &str = "run.json";
pub const REPORT_JSON: &str = "report.json";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const ALIGNMENT_JSON: &str = "alignment.json";

#[derive(Debug, Parser)]
#[command(name = "cfair", version, about = "Centroid-based fairness post-processing for face embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic biased embedding dataset.
    Synth(SynthArgs),
    /// Estimate per-identity centroids.
    Centroids(CentroidsArgs),
    /// Build regression targets and loss weights for a reference group.
    Targets(TargetsArgs),
    /// Train the Fairness Module.
    Train(TrainArgs),
    /// Report ROC, BFAR and BFRR on real image-pair scores.
    Eval(EvalArgs),
    /// Verify the alignment bound of the pseudo-score transforms.
    CheckAlignment(CheckAlignmentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: usize,
    /// name:identities:images:sigma[,...]
    #[arg(long)]
    pub groups: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CentroidsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    /// Attribute name of the reference group.
    #[arg(long)]
    pub reference: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `checkpoint_epoch<N>.*` every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory; without it the raw embeddings are evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "1e-1,1e-2,1e-3")]
    pub alphas: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckAlignmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub reference: String,
    /// Optional directory for `alignment.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance record written next to every subcommand's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub wallclock_seconds: f64,
}

impl RunManifest {
    fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            wallclock_seconds: 0.0,
        }
    }

    fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    fn write(mut self, dir: &Path, outputs: &[&str], started: Instant) -> Result<()> {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.wallclock_seconds = started.elapsed().as_secs_f64();
        binio::write_json(&dir.join(RUN_JSON), &self)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Invalid(_) => EXIT_VALIDATION,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("CF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if a pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(&a).map(|_| EXIT_OK),
        Command::Centroids(a) => cmd_centroids(&a).map(|_| EXIT_OK),
        Command::Targets(a) => cmd_targets(&a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a).map(|_| EXIT_OK),
        Command::CheckAlignment(a) => cmd_check_alignment(&a),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = SynthConfig {
        d: args.dim,
        groups: parse_groups(&args.groups)?,
        seed: args.seed,
    };
    let ds = generate_to_dir(&cfg, &args.out)?;
    eprintln!(
        "wrote {} images, {} identities, {} groups to {}",
        ds.n(),
        ds.k(),
        ds.num_attributes(),
        args.out.display()
    );
    RunManifest::new("synth", serde_json::to_value(&cfg).expect("serializable"), Some(args.seed)).write(
        &args.out,
        &["embeddings.bin", "manifest.json", "synth.json"],
        started,
    )
}

pub fn cmd_centroids(args: &CentroidsArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let cs = estimate_centroids(&ds)?;
    save_centroids(&cs, &args.out)?;
    eprintln!("wrote {} centroids to {}", cs.k(), args.out.display());
    RunManifest::new("centroids", serde_json::json!({}), None)
        .input("data", &args.data)
        .write(&args.out, &["centroids.bin", "centroids.json"], started)
}

pub fn cmd_targets(args: &TargetsArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let cs = load_centroids(&args.centroids)?;
    let r = resolve_reference(&ds, &args.reference)?;
    let pairs = PseudoPairScores::compute(&ds, &cs)?;
    let table = target_table_from_pairs(&ds, &pairs, r)?;
    let weights = weights_from_pairs(&ds, &pairs)?;
    save_target_table(&table, &args.out)?;
    save_weight_table(&weights, &args.out)?;
    eprintln!("wrote {} target records (reference {}) to {}", table.len(), args.reference, args.out.display());
    RunManifest::new("targets", serde_json::json!({ "reference": args.reference }), None)
        .input("data", &args.data)
        .input("centroids", &args.centroids)
        .write(&args.out, &["targets.bin", "targets.json", "weights.bin", "weights.json"], started)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let cs = load_centroids(&args.centroids)?;
    let targets = load_target_table(&args.targets)?;
    let weights = load_weight_table(&args.targets, &targets)?;
    let cfg = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        epochs: args.epochs,
        reference: targets.reference(),
        seed: args.seed,
    };
    cfg.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let initial_loss = full_loss(&init_from_pretrained(&cs), &targets, &weights, &ds)?;
    eprintln!("initial full-batch loss {initial_loss:.6e}");

    let mut log_csv = String::from("epoch,mean_loss,wallclock_seconds\n");
    let outcome = train_with_callback(&ds, &cs, &targets, &weights, &cfg, |entry, params| {
        eprintln!("epoch {:>3}  mean batch loss {:.6e}", entry.epoch, entry.mean_loss);
        log_csv.push_str(&format!("{},{},{}\n", entry.epoch, entry.mean_loss, entry.wallclock_seconds));
        if args.checkpoint_every > 0 && entry.epoch % args.checkpoint_every == 0 {
            save_checkpoint_named(
                params,
                entry.epoch,
                entry.mean_loss,
                &args.out,
                &format!("checkpoint_epoch{}.bin", entry.epoch),
                &format!("checkpoint_epoch{}.json", entry.epoch),
            )?;
        }
        Ok(())
    })?;
    let final_loss = full_loss(&outcome.params, &targets, &weights, &ds)?;
    save_checkpoint(&outcome.params, cfg.epochs, final_loss, &args.out)?;
    binio::write_atomic(&args.out.join(TRAIN_LOG_CSV), log_csv.as_bytes())?;
    eprintln!("final full-batch loss {final_loss:.6e}");
    RunManifest::new("train", serde_json::to_value(&cfg).expect("serializable"), Some(args.seed))
        .input("data", &args.data)
        .input("centroids", &args.centroids)
        .input("targets", &args.targets)
        .write(&args.out, &["checkpoint.bin", "checkpoint.json", TRAIN_LOG_CSV], started)
}

pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|a| {
            let v: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse FAR level {a:?}")))?;
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("FAR level {v} outside [0, 1)")));
            }
            Ok(v)
        })
        .collect()
}

/// Rows to evaluate: raw embeddings, or module outputs when a checkpoint is
/// given.
pub fn evaluation_rows(ds: &crate::dataset::EmbeddingDataset, checkpoint: Option<&Path>) -> Result<Vec<f64>> {
    let raw = ds.rows_f64();
    let Some(dir) = checkpoint else {
        return Ok(raw);
    };
    let (params, _) = load_checkpoint(dir)?;
    if params.d() != ds.d() || params.k() != ds.k() {
        return Err(Error::invalid(format!(
            "checkpoint (d = {}, k = {}) does not match dataset (d = {}, k = {})",
            params.d(),
            params.k(),
            ds.d(),
            ds.k()
        )));
    }
    let d = ds.d();
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..ds.n() {
        out.extend(forward(&params, &raw[i * d..(i + 1) * d])?);
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let alphas = parse_alphas(&args.alphas)?;
    let ds = load_dataset(&args.data)?;
    let rows = evaluation_rows(&ds, args.checkpoint.as_deref())?;
    let curves = EvaluationCurves::compute(&rows, ds.d(), &ds)?;
    let reports = alphas
        .iter()
        .map(|&alpha| curves.report(&ds, alpha))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        println!(
            "alpha {:<8} threshold {:.6}  ROC {:.6}  BFAR {}  BFRR {}",
            r.alpha,
            r.threshold,
            r.roc,
            r.bfar.map_or("undefined".into(), |v| format!("{v:.6}")),
            r.bfrr.map_or("undefined".into(), |v| format!("{v:.6}")),
        );
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    binio::write_json(&args.out.join(REPORT_JSON), &reports)?;
    let mut outputs = vec![REPORT_JSON.to_string(), "frr_global.csv".into(), "far_global.csv".into()];
    export_curve_csv(&curves.global_genuine, &args.out.join("frr_global.csv"))?;
    export_curve_csv(&curves.global_impostor, &args.out.join("far_global.csv"))?;
    for (a, name) in ds.attribute_names().iter().enumerate() {
        if let Some(c) = curves.group_frr.get(&(a as u32)) {
            let file = format!("frr_{name}.csv");
            export_curve_csv(c, &args.out.join(&file))?;
            outputs.push(file);
        }
        if let Some(c) = curves.group_far.get(&(a as u32)) {
            let file = format!("far_{name}.csv");
            export_curve_csv(c, &args.out.join(&file))?;
            outputs.push(file);
        }
    }
    let mut manifest = RunManifest::new("eval", serde_json::json!({ "alphas": alphas }), None).input("data", &args.data);
    if let Some(c) = &args.checkpoint {
        manifest = manifest.input("checkpoint", c);
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    manifest.write(&args.out, &outputs, started)
}

pub fn cmd_check_alignment(args: &CheckAlignmentArgs) -> Result<i32> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let cs = load_centroids(&args.centroids)?;
    let r = resolve_reference(&ds, &args.reference)?;
    let report = alignment_report(&ds, &cs, r)?;
    println!("group          FRR gap     bound       FAR gap     bound       status");
    for g in &report {
        println!(
            "{:<14} {:<11.6e} {:<11.6e} {:<11.6e} {:<11.6e} {}",
            g.attribute,
            g.genuine_gap,
            g.genuine_bound,
            g.impostor_gap,
            g.impostor_bound,
            if g.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        binio::write_json(&out.join(ALIGNMENT_JSON), &report)?;
        RunManifest::new("check-alignment", serde_json::json!({ "reference": args.reference }), None)
            .input("data", &args.data)
            .input("centroids", &args.centroids)
            .write(out, &[ALIGNMENT_JSON], started)?;
    }
    Ok(if report.iter().all(|g| g.pass) {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    })
}
