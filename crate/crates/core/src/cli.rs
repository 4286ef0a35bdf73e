//! `fedrec` command line: subcommands, run manifests and exit codes
//! (0 success, 1 runtime failure, 2 invalid configuration).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{activity_stats, source_files, synthetic, DatasetKind};
use crate::error::{Error, Result};
use crate::federation::{write_loss_trace, Checkpointing};
use crate::model::ParamSet;
use crate::pipeline;
use crate::privacy::{accountant_table, write_accountant_csv};

#[derive(Debug, Parser)]
#[command(name = "fedrec", version, about = "Federated recommendation simulator with user-level differential privacy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// `key=value` configuration override (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
pub enum Command {
    /// Parse a dataset, report its statistics and fill the corpus cache.
    Ingest,
    /// Write a synthetic MovieLens-format dataset into the output directory.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 400)]
        items: usize,
    },
    /// Federated meta-learning without privacy noise.
    TrainPrivrec,
    /// Federated self-supervised pretraining of the item and session parameters.
    PretrainSsl,
    /// Private federated training (stage and mechanism from the configuration).
    TrainDp,
    /// Personalize and rank on the test users.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "model")]
        model: String,
    },
    /// Privacy-loss table for the accountant settings.
    Accountant,
    /// Membership-inference attack against plain and private targets.
    Attack,
    /// Merge CSV outputs of earlier runs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Repeat the run recorded in a `manifest.json`, refusing if any input changed.
    Rerun { manifest: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth { .. } => "synth",
            Command::TrainPrivrec => "train-privrec",
            Command::PretrainSsl => "pretrain-ssl",
            Command::TrainDp => "train-dp",
            Command::Evaluate { .. } => "evaluate",
            Command::Accountant => "accountant",
            Command::Attack => "attack",
            Command::Report { .. } => "report",
            Command::Rerun { .. } => "rerun",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run an invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fedrec_version: String,
    pub command: Command,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// SHA-256 over `blob <len>\0<content>`, the git object framing.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: content_hash(&bytes),
    })
}

struct Run<'a> {
    out: &'a Path,
    written: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    log::info!("{} -> {}", cli.command.name(), cli.out.display());
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut run = Run {
        out: &cli.out,
        written: Vec::new(),
        inputs: Vec::new(),
    };
    let uses_data = !matches!(
        cli.command,
        Command::Synth { .. } | Command::Accountant | Command::Report { .. } | Command::Rerun { .. }
    );
    if uses_data {
        cfg.require_data()?;
        run.inputs.extend(source_files(&cfg.data_path, cfg.dataset));
    }
    let checkpoints = Checkpointing {
        dir: Some(cli.out.join("checkpoints")),
        every: cfg.checkpoint_every,
    };

    match &cli.command {
        Command::Ingest => {
            let corpus = pipeline::load_corpus(cfg)?;
            let (median, mean) = activity_stats(&corpus);
            run.write(
                "ingest.csv",
                &format!(
                    "users,items,interactions,median_interactions,mean_interactions\n{},{},{},{median},{mean:.4}\n",
                    corpus.clients.len(),
                    corpus.n_items(),
                    corpus.n_interactions()
                ),
            )?;
        }
        Command::Synth { users, items } => {
            let scfg = synthetic::SyntheticConfig {
                users: *users,
                items: *items,
                seed: cfg.seed,
                ..Default::default()
            };
            synthetic::write(&cli.out, &scfg)?;
            for f in source_files(&cli.out, DatasetKind::Movielens) {
                run.record(f);
            }
        }
        Command::TrainPrivrec => {
            let corpus = pipeline::load_corpus(cfg)?;
            let plan = pipeline::make_split(&corpus, cfg.seed)?;
            let out = pipeline::train_privrec(cfg, &corpus, &pipeline::clients_of(&corpus, &plan.train_users), &checkpoints)?;
            save_model(&mut run, "privrec.ckpt", &out.theta)?;
            write_trace(&mut run, "loss_privrec.csv", &out.trace)?;
        }
        Command::PretrainSsl => {
            let corpus = pipeline::load_corpus(cfg)?;
            let plan = pipeline::make_split(&corpus, cfg.seed)?;
            let out = pipeline::pretrain_ssl(cfg, &corpus, &pipeline::clients_of(&corpus, &plan.train_users), &checkpoints)?;
            save_model(&mut run, "ssl.ckpt", &out.theta)?;
            write_trace(&mut run, "loss_ssl.csv", &out.trace)?;
        }
        Command::TrainDp => {
            let corpus = pipeline::load_corpus(cfg)?;
            let plan = pipeline::make_split(&corpus, cfg.seed)?;
            let clients = pipeline::clients_of(&corpus, &plan.train_users);
            let out = pipeline::train_private(cfg, &corpus, &clients, &checkpoints)?;
            save_model(&mut run, "dp.ckpt", &out.theta)?;
            write_trace(&mut run, "loss_dp.csv", &out.trace)?;
            let acc = &out.accountant;
            let eps = acc.epsilon(cfg.dp_delta)?;
            run.write(
                "privacy.csv",
                &format!(
                    "clients,clients_per_round,noise_multiplier,compositions,delta,epsilon,max_upload_norm\n{},{},{},{},{:e},{:.6},{:.6}\n",
                    clients.len(),
                    cfg.clients_per_round,
                    acc.z,
                    acc.compositions,
                    cfg.dp_delta,
                    eps,
                    out.max_upload_norm
                ),
            )?;
        }
        Command::Evaluate { checkpoint, model } => {
            run.inputs.push(checkpoint.clone());
            let corpus = pipeline::load_corpus(cfg)?;
            let plan = pipeline::make_split(&corpus, cfg.seed)?;
            let theta = ParamSet::read_checkpoint(checkpoint)?;
            let report = pipeline::evaluate_model(cfg, &theta, &corpus, &plan, model)?;
            print!("{}", report.summary());
            run.write("metrics.csv", &report.to_csv())?;
            run.write("metrics_per_user.csv", &report.per_user_csv())?;
        }
        Command::Accountant => {
            let rows = accountant_table(
                cfg.accountant_n,
                &cfg.accountant_m,
                cfg.accountant_z,
                cfg.accountant_rounds,
                &cfg.accountant_deltas,
            )?;
            let path = cli.out.join("accountant.csv");
            write_accountant_csv(&path, cfg.accountant_n, &rows, &cfg.accountant_deltas)?;
            run.record(path);
        }
        Command::Attack => {
            let corpus = pipeline::load_corpus(cfg)?;
            let records = pipeline::run_attack(cfg, &corpus)?;
            run.write("attack.csv", &crate::attack::attack_csv(&records))?;
        }
        Command::Report { inputs } => {
            let merged = merge_csvs(inputs, &mut run.inputs)?;
            for (name, body) in merged {
                run.write(&name, &body)?;
            }
        }
        Command::Rerun { .. } => return Err(Error::Config("a rerun must be resolved before execution".into())),
    }

    let manifest = Manifest {
        fedrec_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: run.inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        outputs: run.written.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
    };
    let cfg_path = cli.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let path = cli.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn save_model(run: &mut Run, name: &str, theta: &ParamSet) -> Result<()> {
    let path = run.out.join(name);
    theta.write_checkpoint(&path)?;
    run.record(path);
    Ok(())
}

fn write_trace(run: &mut Run, name: &str, trace: &[crate::federation::RoundLoss]) -> Result<()> {
    let path = run.out.join(name);
    write_loss_trace(&path, trace)?;
    run.record(path);
    Ok(())
}

/// Concatenates same-named CSVs found in `inputs` (files or directories),
/// keeping one header, into `report_<name>` bodies.
fn merge_csvs(inputs: &[PathBuf], seen_inputs: &mut Vec<PathBuf>) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            return Err(Error::Config(format!("report input {} does not exist", input.display())));
        }
    }
    let mut merged: Vec<(String, String)> = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with("report_") {
            continue;
        }
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let mut lines = text.lines();
        let Some(header) = lines.next() else { continue };
        let key = format!("report_{name}");
        let slot = match merged.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                merged.push((key, format!("{header}\n")));
                merged.len() - 1
            }
        };
        if !merged[slot].1.starts_with(header) {
            return Err(Error::InvalidArgument(format!("{} has a different header than earlier {name} files", f.display())));
        }
        for l in lines {
            merged[slot].1.push_str(l);
            merged[slot].1.push('\n');
        }
        seen_inputs.push(f);
    }
    Ok(merged)
}

/// Reads a manifest and checks that its recorded inputs are unchanged on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if matches!(manifest.command, Command::Rerun { .. }) {
        return Err(Error::Config(format!("{} records a rerun, not an experiment", path.display())));
    }
    for input in &manifest.inputs {
        let now = hash_file(Path::new(&input.path)).map_err(|e| Error::Config(e.to_string()))?;
        if now.sha256 != input.sha256 {
            return Err(Error::Config(format!("input {} changed since the manifest was written", input.path)));
        }
    }
    manifest.config.validate()?;
    Ok(manifest)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let loaded = match &cli.command {
        Command::Rerun { manifest } => load_manifest(manifest).map(|m| {
            cli.command = m.command;
            m.config
        }),
        _ => ExperimentConfig::load(cli.config.as_deref(), &overrides),
    };
    let cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli, &cfg)) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
