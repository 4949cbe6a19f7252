//! Command-line front end. Every command writes a `manifest.json` next to its
//! outputs, including on failure.

mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, Image, SplitName};
use crate::error::{Error, Result};
use crate::training::{self, Checkpoint, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "brightvae", version, about = "Train, evaluate and apply the BrightVAE low-light enhancer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Components,
    Losses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset (a quarter of the pairs go to the test split).
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints plus the loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Enhance a single image.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component or loss ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        grid: GridArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render triptychs and bar charts from eval and ablation runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeSynth { .. } => "make-synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Enhance { .. } => "enhance",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }

    fn manifest_path(&self) -> PathBuf {
        match self {
            Command::Enhance { out, .. } => {
                let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
                name.push(".manifest.json");
                out.with_file_name(name)
            }
            Command::MakeSynth { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::Ablate { out, .. }
            | Command::Report { out, .. } => out.join(MANIFEST_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub success: bool,
    pub error: Option<String>,
    pub config: Option<RunConfig>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    /// Dataset split scored by `eval`.
    #[serde(default)]
    pub split: Option<SplitName>,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            success: false,
            error: None,
            config: None,
            config_hash: None,
            seed: None,
            split: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started: now,
            finished: now,
        }
    }

    fn set_config(&mut self, cfg: &RunConfig) -> Result<()> {
        self.config_hash = Some(cfg.hash()?);
        self.seed = Some(cfg.train.seed);
        self.config = Some(cfg.clone());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    manifest.artifacts.push(path.display().to_string());
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn dir_is_nonempty(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    if !path.is_dir() {
        return Err(Error::Precondition(format!("{} exists and is not a directory", path.display())));
    }
    Ok(fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_some())
}

fn make_synth(out: &Path, pairs: usize, size: usize, seed: u64, force: bool, m: &mut RunManifest) -> Result<()> {
    if dir_is_nonempty(out)? && !force {
        return Err(Error::Precondition(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    m.seed = Some(seed);
    let all = data::make_synth_dataset(pairs, size, seed)?;
    let (train, test) = all.split_off_test(pairs / 4)?;
    create_dir(out)?;
    data::write_dataset(out, &train, &test)?;
    for split in [&train, &test] {
        for p in &split.pairs {
            for sub in ["low", "gt"] {
                let path = out.join(split.name.as_str()).join(sub).join(format!("{}.png", p.id));
                m.artifacts.push(path.display().to_string());
            }
        }
    }
    log::info!("wrote {} train / {} test pairs to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path, data_dir: &Path, out: &Path, resume: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    let run = RunConfig::load(config)?;
    m.set_config(&run)?;
    m.inputs.push(config.display().to_string());
    m.inputs.push(data_dir.display().to_string());
    let resume = match resume {
        Some(p) => {
            m.inputs.push(p.display().to_string());
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let ds = data::load_paired_dataset(data_dir)?;
    if ds.train.is_empty() {
        return Err(Error::Dataset(format!("{} has no training pairs", data_dir.display())));
    }
    create_dir(out)?;
    write_text(&out.join("config.toml"), &run.to_toml_string()?, m)?;
    let eval = (!ds.test.is_empty()).then_some(&ds.test);
    let outcome = training::train(
        &run,
        &ds.train,
        TrainOptions {
            checkpoint_dir: Some(out.to_path_buf()),
            resume,
            eval_data: eval,
        },
    )?;
    if run.train.checkpoint_every > 0 {
        for e in (1..=run.train.epochs).filter(|e| e % run.train.checkpoint_every == 0) {
            let p = out.join(format!("epoch_{e:04}.ckpt"));
            if p.exists() {
                m.artifacts.push(p.display().to_string());
            }
        }
    }
    let final_path = training::checkpoint_path(out, "final");
    outcome.checkpoint.save(&final_path)?;
    m.artifacts.push(final_path.display().to_string());
    write_text(&out.join("history.csv"), &training::history_csv(&outcome.history), m)?;
    if let Some(last) = outcome.history.last() {
        log::info!("finished {} epochs in {:.1}s, final total loss {:.6}", last.epoch, outcome.seconds, last.total);
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, data_dir: &Path, out: &Path, split: SplitArg, m: &mut RunManifest) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    m.set_config(&ck.config)?;
    m.inputs.push(ckpt.display().to_string());
    m.inputs.push(data_dir.display().to_string());
    let ds = data::load_paired_dataset(data_dir)?;
    let (name, split) = match split {
        SplitArg::Train => (SplitName::Train, ds.train),
        SplitArg::Test => (SplitName::Test, ds.test),
    };
    m.split = Some(name);
    if split.is_empty() {
        return Err(Error::Dataset(format!("{} split of {} is empty", name.as_str(), data_dir.display())));
    }
    let report = training::evaluate(&ck, &split)?;
    create_dir(out)?;
    let enhanced_dir = out.join("enhanced");
    create_dir(&enhanced_dir)?;
    let model = training::inference_model(&ck)?;
    for pair in &split.pairs {
        let img = training::enhance_image(&model, &pair.low, ck.params.dtype())?;
        let p = enhanced_dir.join(format!("{}.png", pair.id));
        img.save(&p)?;
        m.artifacts.push(p.display().to_string());
    }
    write_text(&out.join("metrics.csv"), &report.to_csv(), m)?;
    write_text(&out.join("metrics.json"), &report.to_json()?, m)?;
    write_text(&out.join("aggregate.json"), &report.aggregate_json()?, m)?;
    let lp = report.aggregate.lpips.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    log::info!(
        "{} images: PSNR {:.3} dB, SSIM {:.4}, LPIPS {lp}",
        report.aggregate.count,
        report.aggregate.psnr,
        report.aggregate.ssim
    );
    Ok(())
}

fn enhance_cmd(ckpt: &Path, input: &Path, out: &Path, m: &mut RunManifest) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    m.set_config(&ck.config)?;
    m.inputs.push(ckpt.display().to_string());
    m.inputs.push(input.display().to_string());
    let low = Image::load(input)?;
    let model = training::inference_model(&ck)?;
    let img = training::enhance_image(&model, &low, ck.params.dtype())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    img.save(out)?;
    m.artifacts.push(out.display().to_string());
    Ok(())
}

fn ablate_cmd(config: &Path, data_dir: &Path, grid: GridArg, out: &Path, m: &mut RunManifest) -> Result<()> {
    let run = RunConfig::load(config)?;
    m.set_config(&run)?;
    m.inputs.push(config.display().to_string());
    m.inputs.push(data_dir.display().to_string());
    let ds = data::load_paired_dataset(data_dir)?;
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::Dataset(format!(
            "ablation needs both train and test pairs under {}",
            data_dir.display()
        )));
    }
    let table = match grid {
        GridArg::Components => training::ablate_components(&run, &ds.train, &ds.test)?,
        GridArg::Losses => training::ablate_losses(&run, &ds.train, &ds.test)?,
    };
    create_dir(out)?;
    let stem = format!("ablation_{}", table.grid.as_str());
    write_text(&out.join(format!("{stem}.csv")), &table.to_csv(), m)?;
    write_text(&out.join(format!("{stem}.json")), &table.sidecar_json(&run)?, m)?;
    Ok(())
}

fn execute(cmd: &Command, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::MakeSynth {
            out,
            pairs,
            size,
            seed,
            force,
        } => make_synth(out, *pairs, *size, *seed, *force, m),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train_cmd(config, data, out, resume.as_deref(), m),
        Command::Eval { ckpt, data, out, split } => eval_cmd(ckpt, data, out, *split, m),
        Command::Enhance { ckpt, input, out } => enhance_cmd(ckpt, input, out, m),
        Command::Ablate { config, data, grid, out } => ablate_cmd(config, data, *grid, out, m),
        Command::Report { runs, out } => {
            create_dir(out)?;
            report::render(runs, out, m)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn write_manifest(cmd: &Command, m: &RunManifest) -> Result<()> {
    let path = cmd.manifest_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&path, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&path, e))
}

/// Runs one parsed command and returns its exit code.
pub fn run_command(cmd: &Command) -> i32 {
    let mut m = RunManifest::new(cmd.name());
    let result = execute(cmd, &mut m);
    m.finished = Utc::now();
    let code = match &result {
        Ok(()) => {
            m.success = true;
            EXIT_OK
        }
        Err(e) => {
            m.error = Some(e.to_string());
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(e)
        }
    };
    let refused = matches!(cmd, Command::MakeSynth { force: false, .. }) && code == EXIT_USAGE;
    if !refused {
        if let Err(e) = write_manifest(cmd, &m) {
            eprintln!("error: could not write manifest: {e}");
            return EXIT_RUNTIME;
        }
    }
    code
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_command(&cli.command),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
