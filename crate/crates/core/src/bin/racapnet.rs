use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use racapnet::data::{generate, load_nyt, Corpus, Split, SynthSpec};
use racapnet::eval::{gold_facts, score_bags, summarize, write_pr_csv, write_summary, Aggregation};
use racapnet::harness::{gradcheck_model, inspect, load_checkpoint, train, Model, TrainConfig};

#[derive(Parser)]
#[command(name = "racapnet", version, about = "Capsule-network relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Max,
    Mean,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (train.txt, test.txt, relations.txt).
    Generate {
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on <data>/train.txt, scoring <data>/test.txt after every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a split with a checkpoint and write the PR curve and a summary.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "max")]
        aggregation: AggArg,
        /// Comma-separated cut-offs for precision at N.
        #[arg(long, value_delimiter = ',', default_value = "100,200,300")]
        p_at: Vec<usize>,
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Dump attention weights and routing coefficients per sentence.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backprop gradients with central differences; exits non-zero on failure.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check at most this many random entries per parameter.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(TrainConfig::tiny()),
    }
}

/// Reads one split of `dir` against the checkpoint's vocabulary and relations.
fn load_split(model: &Model, dir: &Path, split: SplitArg) -> anyhow::Result<Vec<racapnet::features::Instance>> {
    let file = match split {
        SplitArg::Train => "train.txt",
        SplitArg::Test => "test.txt",
    };
    let mut vocab = model.vocab.clone();
    let mut relations = model.relations.clone();
    // Read as a test split so unseen relations map to NA instead of growing the inventory.
    let (instances, report) = load_nyt(&dir.join(file), Split::Test, &mut vocab, &mut relations, model.config.max_len)
        .with_context(|| format!("loading {}", dir.join(file).display()))?;
    log::info!("{file}: {report:?}");
    Ok(instances)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let mut s: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let corpus = generate(&s)?;
            corpus.write_dir(&out)?;
            println!(
                "wrote {} train and {} test sentences over {} relations to {}",
                corpus.train.len(),
                corpus.test.len(),
                corpus.relations.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (corpus, train_report, test_report) = Corpus::load_dir(&data, cfg.model.max_len)?;
            log::info!("train: {train_report:?}");
            log::info!("test: {test_report:?}");
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            let outcome = train(&corpus, &cfg, Some(&out))?;
            if let Some(last) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            if let Some((epoch, auc, _)) = &outcome.best {
                println!("best held-out area {auc:.6} at epoch {epoch}");
            }
        }
        Command::Eval {
            model,
            data,
            split,
            aggregation,
            p_at,
            pr,
            summary,
        } => {
            let m = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            let instances = load_split(&m, &data, split)?;
            let agg = match aggregation {
                AggArg::Max => Aggregation::Max,
                AggArg::Mean => Aggregation::Mean,
            };
            let preds = score_bags(&m, &instances, agg)?;
            let gold = gold_facts(&instances);
            let (curve, s) = summarize(&preds, &gold, &p_at, agg)?;
            if let Some(p) = pr {
                write_pr_csv(&p, &curve)?;
            }
            if let Some(p) = summary {
                write_summary(&p, &s)?;
            }
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Inspect {
            model,
            data,
            split,
            limit,
            out,
        } => {
            let m = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            let mut instances = load_split(&m, &data, split)?;
            if let Some(n) = limit {
                instances.truncate(n);
            }
            let n = inspect(&m, &instances, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Gradcheck {
            config,
            seed,
            max_entries,
            report,
        } => {
            let cfg = read_config(config.as_deref())?;
            if max_entries == Some(0) {
                bail!("--max-entries must be positive");
            }
            let r = gradcheck_model(&cfg, seed, max_entries)?;
            for p in &r.params {
                println!(
                    "{:<4} {:<16} entries={:<6} max_rel_error={:.3e}",
                    if p.passed { "ok" } else { "FAIL" },
                    p.name,
                    p.entries,
                    p.max_rel_error
                );
            }
            if let Some(path) = report {
                fs::write(path, serde_json::to_string_pretty(&r)? + "\n")?;
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", r.max_rel_error(), r.tolerance);
            if !r.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
