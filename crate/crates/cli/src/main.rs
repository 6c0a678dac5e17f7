use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mgsl_core::config::RunConfig;
use mgsl_core::eval::{memory_projection, write_predictions, write_projection_csv};
use mgsl_core::fusion::FusionMode;
use mgsl_core::membank::{read_snapshot, write_snapshot, MemoryBank};
use mgsl_core::synthdata::{read_corpus, write_corpus, Corpus, Split};
use mgsl_core::train::{ablate, evaluate, standard_variants, write_ablation_csv, write_loss_csv, Checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "mgsl", version, about = "Memory-guided temporal sentence grounding on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus file from the config's corpus section.
    GenCorpus(RunArgs),
    /// Train a model and write checkpoints, the loss curve and test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train every ablation variant under several seeds and tabulate test recall.
    Ablate(AblateArgs),
    /// Write the memory banks of a checkpoint as binary snapshots.
    ExportMemory(CheckpointArgs),
    /// Project memory slots to 2-D (CSV, one row per slot).
    ProjectMemory(ProjectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    memory: Option<Switch>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Output directory (file path for gen-corpus).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file to use instead of generating one.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 5)]
    topn: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds per variant.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// A checkpoint (projects its video bank) ...
    #[arg(long, conflicts_with = "snapshot", required_unless_present = "snapshot")]
    checkpoint: Option<PathBuf>,
    /// ... or a memory snapshot written by export-memory.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.optim.epochs = e;
        }
        if let Some(m) = self.memory {
            cfg.model.memory = matches!(m, Switch::On);
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(c) = &self.corpus {
            cfg.corpus_path = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    Ok(read_corpus(BufReader::new(f))?)
}

fn corpus_for(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus_path {
        Some(p) => load_corpus(p),
        None => Ok(Corpus::generate(&cfg.corpus)?),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen_corpus(args: &RunArgs) -> Result<()> {
    let mut cfg = args.config()?;
    if let Some(s) = args.seed {
        cfg.corpus.seed = s;
    }
    let path = args.out.clone().unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
    let corpus = Corpus::generate(&cfg.corpus)?;
    write_corpus(&corpus, create(&path)?)?;
    info!("wrote {} samples to {}", corpus.samples.len(), path.display());
    Ok(())
}

fn write_report(dir: &Path, report: &mgsl_core::eval::MetricsReport) -> Result<()> {
    fs::write(dir.join("metrics.toml"), report.to_toml()?)?;
    report.write_csv(create(&dir.join("metrics.csv"))?)?;
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let corpus = corpus_for(&cfg)?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = Trainer::new(&cfg, &corpus)?;
    trainer.run(&corpus, cfg.optim.epochs, Some(&dir))?;
    trainer.checkpoint().save(&dir.join("final.json"))?;
    write_loss_csv(&trainer.history, create(&dir.join("loss.csv"))?)?;
    let (mut report, records) = evaluate(&trainer.model, &trainer.memory, &corpus, Split::Test, 5)?;
    report.loss_curve = trainer.loss_curve();
    write_report(&dir, &report)?;
    write_predictions(&records, create(&dir.join("predictions.jsonl"))?)?;
    if let Some(r) = report.get(1, 0.5) {
        println!("test R@1,IoU=0.5: {:.2}", r.overall);
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus = match &args.corpus {
        Some(p) => load_corpus(p)?,
        None => corpus_for(&ckpt.config)?,
    };
    let (model, memory) = ckpt.model(&corpus)?;
    let (report, records) = evaluate(&model, &memory, &corpus, args.split, args.topn)?;
    fs::create_dir_all(&args.out)?;
    write_report(&args.out, &report)?;
    write_predictions(&records, create(&args.out.join("predictions.jsonl"))?)?;
    print!("{}", report.to_toml()?);
    Ok(())
}

fn run_ablation(args: &AblateArgs) -> Result<()> {
    if args.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let cfg = args.run.config()?;
    let corpus = corpus_for(&cfg)?;
    let rows = ablate(&cfg, &corpus, &standard_variants(), &args.seeds, args.split)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, create(&path)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn banks(ckpt: &Checkpoint) -> Vec<(String, &MemoryBank)> {
    let mut out = Vec::new();
    for (name, d) in [("video", &ckpt.memory.video), ("query", &ckpt.memory.query)] {
        out.push((name.to_string(), &d.native));
        if let Some(p) = &d.partner {
            out.push((format!("{name}-partner"), p));
        }
    }
    out
}

fn export_memory(args: &CheckpointArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    for (name, bank) in banks(&ckpt) {
        let path = args.out.join(format!("{name}.mem"));
        write_snapshot(bank, create(&path)?)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn project_memory(args: &ProjectArgs) -> Result<()> {
    let bank = match (&args.checkpoint, &args.snapshot) {
        (Some(c), _) => Checkpoint::load(c)?.memory.video.native,
        (None, Some(s)) => read_snapshot(BufReader::new(File::open(s)?))?,
        (None, None) => bail!("either --checkpoint or --snapshot is required"),
    };
    let proj = memory_projection(bank.slots())?;
    write_projection_csv(&proj, create(&args.out)?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
        Command::ExportMemory(a) => export_memory(a),
        Command::ProjectMemory(a) => project_memory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
