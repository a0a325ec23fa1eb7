use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use memfuse::datagen::{corpus_stats, generate_corpus, Corpus};
use memfuse::harness::{
    ablate, checkpoint, evaluate, gradcheck, sweep, sweep_table, train, FileConfig, Model, SweepGrid,
};
use memfuse::numerics::Real;
use memfuse::text::{read_dataset, write_dataset, Sample, Vocabulary};
use memfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "memfuse", version, about = "Train and evaluate knowledge-fused, safety-aware answer generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML file with model fields and an optional [generator] table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model seed (and the generator seed for `datagen`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (train/val/test JSONL, vocabulary, stats).
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, streaming one JSON loss record per step.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file, or corpus directory combined with --split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Answer one sample, or an ad-hoc query over documents.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample id within the dataset.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        query: Option<String>,
        #[arg(long = "doc")]
        docs: Vec<String>,
    },
    /// Finite-difference check of every parameter on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        eps: Real,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: Real,
    },
    /// Train and evaluate the four ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Grid search over beta, gamma and lambda_safe, ranked on validation data.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        beta: Vec<Real>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        gamma: Vec<Real>,
        #[arg(long, value_delimiter = ',', default_values_t = [5.0])]
        lambda: Vec<Real>,
    },
}

fn load_config(common: &Common) -> Result<FileConfig> {
    let mut cfg = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn corpus(cfg: &FileConfig, data: Option<&Path>) -> Result<Corpus> {
    match data {
        Some(dir) => Ok(Corpus {
            train: read_dataset(&dir.join("train.jsonl"))?,
            val: read_dataset(&dir.join("val.jsonl"))?,
            test: read_dataset(&dir.join("test.jsonl"))?,
        }),
        None => generate_corpus(&cfg.generator.clone().unwrap_or_default()),
    }
}

fn split<'a>(c: &'a Corpus, name: &str) -> Result<&'a [Sample]> {
    match name {
        "train" => Ok(&c.train),
        "val" => Ok(&c.val),
        "test" => Ok(&c.test),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn eval_samples(cfg: &FileConfig, data: Option<&Path>, name: &str) -> Result<Vec<Sample>> {
    match data {
        Some(p) if p.is_file() => read_dataset(p),
        _ => Ok(split(&corpus(cfg, data)?, name)?.to_vec()),
    }
}

fn out_dir(common: &Common) -> Result<Option<PathBuf>> {
    if let Some(d) = &common.out {
        fs::create_dir_all(d)?;
    }
    Ok(common.out.clone())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Datagen { common } => {
            let cfg = load_config(&common)?;
            let mut gen = cfg.generator.unwrap_or_default();
            if let Some(s) = common.seed {
                gen.seed = s;
            }
            let dir = out_dir(&common)?.ok_or_else(|| Error::Config("datagen needs --out".into()))?;
            let c = generate_corpus(&gen)?;
            write_dataset(&c.train, &dir.join("train.jsonl"))?;
            write_dataset(&c.val, &dir.join("val.jsonl"))?;
            write_dataset(&c.test, &dir.join("test.jsonl"))?;
            Vocabulary::standard().write(&dir.join("vocab.txt"))?;
            let stats = [("train", corpus_stats(&c.train)), ("val", corpus_stats(&c.val)), ("test", corpus_stats(&c.test))];
            fs::write(dir.join("stats.json"), pretty(&stats))?;
            fs::write(dir.join("generator.toml"), toml::to_string(&gen).expect("serializable"))?;
            for (name, s) in &stats {
                println!("{name}: {}", json(s));
            }
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let c = corpus(&cfg, data.as_deref())?;
            let dir = out_dir(&common)?;
            let mut log = match &dir {
                Some(d) => Some(fs::File::create(d.join("loss.jsonl"))?),
                None => None,
            };
            let every = cfg.model.checkpoint_every;
            let stdout = std::io::stdout();
            let (model, _) = train(&cfg.model, &c.train, |rec, model| {
                let line = json(rec);
                writeln!(stdout.lock(), "{line}")?;
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{line}")?;
                }
                if let (Some(d), true) = (&dir, every > 0 && (rec.step + 1) % every == 0) {
                    checkpoint::save_checkpoint(model, &d.join(format!("step-{:06}.ckpt", rec.step + 1)))?;
                }
                Ok(())
            })?;
            if let Some(d) = &dir {
                checkpoint::save_checkpoint(&model, &d.join("model.ckpt"))?;
                fs::write(d.join("config.toml"), FileConfig { model: model.config().clone(), generator: cfg.generator }.to_toml())?;
            }
        }
        Command::Eval { common, checkpoint: path, data, split: name } => {
            let cfg = load_config(&common)?;
            let model = checkpoint::load_checkpoint(&path)?;
            let samples = eval_samples(&cfg, data.as_deref(), &name)?;
            let report = evaluate(&model, &samples)?;
            if let Some(d) = out_dir(&common)? {
                fs::write(d.join("report.json"), pretty(&report))?;
            }
            println!("{}", pretty(&report));
            println!("{}", report.metrics_line());
        }
        Command::Generate { common, checkpoint: path, data, split: name, id, query, docs } => {
            let cfg = load_config(&common)?;
            let model = checkpoint::load_checkpoint(&path)?;
            let sample = match (query, id) {
                (Some(q), _) => Sample {
                    id: "adhoc".into(),
                    query: q,
                    documents: docs,
                    positive_index: 0,
                    answer: "?".into(),
                    y_safe: 0,
                    turns: Vec::new(),
                },
                (None, Some(id)) => eval_samples(&cfg, data.as_deref(), &name)?
                    .into_iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::Validation(format!("no sample with id `{id}`")))?,
                (None, None) => return Err(Error::Config("generate needs --id or --query".into())),
            };
            let p = model.answer(&sample)?;
            println!("{}", pretty(&p));
            println!("{}", p.text);
        }
        Command::Gradcheck { common, eps, tolerance } => {
            let cfg = gradcheck::toy_config(common.seed.unwrap_or(0));
            let model = Model::new(cfg)?;
            let reports = gradcheck::check_gradients(&model, &gradcheck::toy_batch(), eps)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_error < tolerance;
                ok &= pass;
                println!(
                    "{:<18} {:>7} scalars  max rel error {:.3e} at {}  {}",
                    r.group,
                    r.checked,
                    r.max_rel_error,
                    r.worst,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
        Command::Ablate { common, data, seeds } => {
            let cfg = load_config(&common)?;
            let c = corpus(&cfg, data.as_deref())?;
            let result = ablate(&cfg.model, &c.train, &c.test, &seeds)?;
            if let Some(d) = out_dir(&common)? {
                fs::write(d.join("ablation.json"), pretty(&result))?;
                fs::write(d.join("ablation.txt"), result.table())?;
            }
            print!("{}", result.table());
        }
        Command::Sweep { common, data, beta, gamma, lambda } => {
            let cfg = load_config(&common)?;
            let c = corpus(&cfg, data.as_deref())?;
            let grid = SweepGrid { beta, gamma, lambda_safe: lambda };
            let cells = sweep(&cfg.model, &c.train, &c.val, &grid)?;
            if let Some(d) = out_dir(&common)? {
                fs::write(d.join("sweep.json"), pretty(&cells))?;
            }
            print!("{}", sweep_table(&cells));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
