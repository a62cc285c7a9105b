use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use muralera_core::corpus::load_manifest;
use muralera_core::harness::pipeline::{self, dating_row, Workspace};
use muralera_core::harness::protocol::{parse_features, table_rows};
use muralera_core::harness::{gen_synthetic_corpus, gen_synthetic_paintings, ExperimentSpec, ExperimentTask, PipelineConfig, Row, Task};
use muralera_core::{EraLabel, Feature, Manifest, VoteMode};

#[derive(Parser)]
#[command(name = "muralera", version, about = "Era classification and dating of mural paintings")]
struct Cli {
    /// Manifest CSV with `path,label,split` rows.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory holding pools, models, features and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML file of `key = value` overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings: `reference` or `desk`. Overrides the config file's own `profile`.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FeatureArgs {
    /// Comma-separated subset of ifv_sift,cn11,dd25,dd50,rcc,dunnet.
    #[arg(long, default_value = "ifv_sift,rcc,dunnet")]
    features: String,
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Add the five neighboring-era pairs to the six-class task.
    #[arg(long)]
    pairs: bool,
    /// A single task instead: `six-class` or `EraA-EraB`.
    #[arg(long, conflicts_with = "pairs")]
    task: Option<String>,
}

impl TaskArgs {
    fn tasks(&self) -> Result<Vec<Task>> {
        Ok(match (&self.task, self.pairs) {
            (Some(t), _) => vec![t.parse()?],
            (None, true) => Task::table_columns(),
            (None, false) => vec![Task::SixClass],
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic six-style corpus and, optionally, dating paintings.
    GenCorpus {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        paintings: usize,
    },
    /// Pool local descriptors of the training split.
    Extract(FeatureArgs),
    /// Fit the GMM for SIFT Fisher vectors.
    TrainGmm,
    /// Fit color-name and DD codebooks, DD partitions and the RCC codebook.
    TrainCodebook(FeatureArgs),
    /// Train the network on the augmented training split.
    TrainCnn,
    /// Encode every labelled train, test and validation image.
    Encode(FeatureArgs),
    /// Train one-vs-all SVMs for every row and task.
    TrainSvm {
        #[command(flatten)]
        features: FeatureArgs,
        #[command(flatten)]
        tasks: TaskArgs,
    },
    /// Test-split accuracy table.
    Evaluate {
        #[command(flatten)]
        features: FeatureArgs,
        #[command(flatten)]
        tasks: TaskArgs,
    },
    /// Accuracy against training fraction on the pooled train and test rows.
    LearningCurve {
        /// Row such as `rcc` or `ifv_sift+rcc`.
        #[arg(long)]
        row: String,
        #[arg(long, default_value = "six-class")]
        task: String,
        /// Comma-separated fractions; defaults to the config value.
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Vote an era for every predict row of the manifest.
    Date {
        /// Row to classify crops with; defaults to the config `date_row`.
        #[arg(long)]
        row: Option<String>,
        /// Binary vote between two eras, e.g. `PeakTang,MiddleTang`.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Every stage in sequence.
    Run {
        #[command(flatten)]
        features: FeatureArgs,
        /// `multiclass`, `table`, `learning-curve`, `date` or `EraA-EraB`.
        #[arg(long, default_value = "table")]
        task: String,
        /// Predict-row manifest for `--task date`.
        #[arg(long)]
        paintings: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path, cli.profile.as_deref())?,
        None => PipelineConfig::from_table(Default::default(), cli.profile.as_deref())?,
    };
    Ok(cfg)
}

fn manifest(cli: &Cli) -> Result<Manifest> {
    let path = cli.manifest.as_deref().context("--manifest is required for this command")?;
    Ok(load_manifest(path)?)
}

fn rows(features: &[Feature], cfg: &PipelineConfig) -> Result<Vec<Row>> {
    Ok(table_rows(features, &cfg.combinations)?)
}

fn parse_pair(s: &str) -> Result<(EraLabel, EraLabel)> {
    let Some((a, b)) = s.split_once(',') else {
        bail!("expected `EraA,EraB`, got `{s}`");
    };
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn experiment_task(s: &str) -> Result<ExperimentTask> {
    Ok(match s {
        "multiclass" | "six-class" => ExperimentTask::Multiclass,
        "table" => ExperimentTask::Table,
        "learning-curve" => ExperimentTask::LearningCurve,
        "date" => ExperimentTask::Date,
        other => match other.parse::<Task>()? {
            Task::Pair(a, b) => ExperimentTask::Pair(a, b),
            Task::SixClass => ExperimentTask::Multiclass,
        },
    })
}

fn print_table(path: &Path) -> Result<()> {
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = config(&cli)?;
    let ws = Workspace::new(&cli.out);
    let seed = cli.seed;
    match &cli.command {
        Command::GenCorpus { per_class, paintings } => {
            let m = gen_synthetic_corpus(&cli.out, *per_class, seed)?;
            println!("wrote {} images and {}", m.entries.len(), cli.out.join("manifest.csv").display());
            if *paintings > 0 {
                gen_synthetic_paintings(&cli.out, *paintings, seed)?;
                println!("wrote {paintings} paintings and {}", cli.out.join("paintings.csv").display());
            }
        }
        Command::Extract(f) => pipeline::extract(&ws, &manifest(&cli)?, &cfg, &parse_features(&f.features)?, seed)?,
        Command::TrainGmm => drop(pipeline::train_gmm(&ws, &cfg, seed)?),
        Command::TrainCodebook(f) => pipeline::train_codebooks(&ws, &manifest(&cli)?, &cfg, &parse_features(&f.features)?, seed)?,
        Command::TrainCnn => drop(pipeline::train_cnn(&ws, &manifest(&cli)?, &cfg, seed)?),
        Command::Encode(f) => {
            let table = pipeline::encode(&ws, &manifest(&cli)?, &cfg, &parse_features(&f.features)?)?;
            println!("encoded {} images", table.len());
        }
        Command::TrainSvm { features, tasks } => {
            let rows = rows(&parse_features(&features.features)?, &cfg)?;
            pipeline::train_svm(&ws, &cfg, &rows, &tasks.tasks()?)?;
        }
        Command::Evaluate { features, tasks } => {
            let rows = rows(&parse_features(&features.features)?, &cfg)?;
            pipeline::evaluate(&ws, &cfg, &rows, &tasks.tasks()?, seed)?;
            print_table(&ws.reports().join("table1.csv"))?;
        }
        Command::LearningCurve {
            row,
            task,
            fractions,
            repetitions,
        } => {
            let fractions = match fractions {
                Some(s) => s.split(',').map(|f| f.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?,
                None => cfg.lc_fractions.clone(),
            };
            let report = pipeline::learning_curve(
                &ws,
                &cfg,
                &row.parse()?,
                &task.parse()?,
                &fractions,
                repetitions.unwrap_or(cfg.lc_repetitions),
                seed,
            )?;
            for p in &report.points {
                println!("{:.2} {:.4} {:.4}", p.fraction, p.mean, p.stddev);
            }
        }
        Command::Date { row, pair } => {
            let row: Row = match row {
                Some(r) => r.parse()?,
                None => dating_row(&cfg, &Feature::ALL)?,
            };
            let mode = match pair {
                Some(p) => {
                    let (a, b) = parse_pair(p)?;
                    VoteMode::Binary(a.min(b), a.max(b))
                }
                None => VoteMode::Multiclass,
            };
            for o in pipeline::date(&ws, &manifest(&cli)?, &cfg, &row, mode, seed)? {
                let truth = o.truth.map_or("?".to_string(), |t| t.to_string());
                println!("{} {} {}/{} (label {truth})", o.id, o.winner, o.winner_votes, o.total);
            }
        }
        Command::Run { features, task, paintings } => {
            let spec = ExperimentSpec {
                manifest: cli.manifest.clone().context("--manifest is required for run")?,
                features: parse_features(&features.features)?,
                task: experiment_task(task)?,
                seed,
                out: cli.out.clone(),
                adjacent_pairs_only: false,
                paintings: paintings.clone(),
            };
            let report = pipeline::run_experiment(&spec, &cfg)?;
            for c in &report.cells {
                println!("{} {} {}/{} {:.4}", c.row, c.task, c.correct, c.total, c.accuracy);
            }
        }
    }
    Ok(())
}
