use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sticker_rank::config::{Ablation, Config, MemoryVariant, ModelConfig};
use sticker_rank::data::{dataset_stats, Dataset};
use sticker_rank::error::{Error, Result};
use sticker_rank::eval::{attention_report, write_jsonl, write_sweep_csv, EvalOptions, EvalReport, MostSelected, SweepKind};
use sticker_rank::model::Model;
use sticker_rank::pipeline::{self, MODEL_FILE};

/// Sticker response selection: generate data, train, evaluate, predict.
#[derive(Parser, Debug)]
#[command(name = "sticker-rank", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config with [model], [train] and [synthetic] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Components to remove, comma separated: classify,din,fr,fr2t,upm,tar.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Preference memory variant: full, average-mem, weighted-mem, most-selected.
    #[arg(long, global = true)]
    memory_variant: Option<String>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest, vocabulary, images).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics and the final model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset scored after every epoch.
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Ranking metrics of a model on a dataset.
    Eval(EvalArgs),
    /// Rank the candidates of one record.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest line of the record (1-based).
        #[arg(long, default_value_t = 1)]
        record: usize,
    },
    /// Similarity buckets, dataset statistics, sweeps and attention dumps.
    Analyze(EvalArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint, or a training output directory. Optional with the
    /// most-selected memory variant.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the report is printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-evaluate with contexts or histories cut to each length.
    #[arg(long)]
    sweep: Vec<SweepKind>,
    /// Write per-candidate attention weights to attention.jsonl.
    #[arg(long)]
    dump_attention: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve(g: &Global) -> Result<Config> {
    let mut cfg = Config::load(g.config.as_deref(), &g.overrides)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    apply_model_flags(g, &mut cfg.model)?;
    cfg.model.ablation.validate()?;
    cfg.train.validate()?;
    cfg.synthetic.validate()?;
    Ok(cfg)
}

fn apply_model_flags(g: &Global, m: &mut ModelConfig) -> Result<()> {
    if let Some(a) = &g.ablation {
        m.ablation = Ablation::parse_list(a)?;
    }
    if let Some(v) = &g.memory_variant {
        m.memory_variant = v.parse()?;
    }
    Ok(())
}

fn log_config(cfg: &Config) {
    eprintln!("resolved config:\n{}", cfg.to_toml());
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = resolve(g)?;
    match cli.command {
        Command::GenData { out } => {
            log_config(&cfg);
            let corpus = pipeline::generate_data(&cfg.synthetic, cfg.train.seed, &out)?;
            println!("wrote {} records to {}", corpus.records.len(), out.display());
        }
        Command::Train { data, out, valid } => {
            let mc = pipeline::fit_model_to_data(&cfg.model, &data)?;
            log_config(&Config { model: mc.clone(), ..cfg.clone() });
            let ds = pipeline::load_data(&mc, &data)?;
            let valid = valid.map(|v| pipeline::load_data(&mc, &v)).transpose()?;
            let run = pipeline::train(&cfg, &mc, &ds.samples, valid.as_ref().map(|d| &d.samples[..]), Some(&out), g.threads)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
        }
        Command::Eval(args) => evaluate(g, &cfg, &args, false)?,
        Command::Analyze(args) => evaluate(g, &cfg, &args, true)?,
        Command::Predict { model, data, record } => {
            let model = load_model(g, &model)?;
            log_config(&Config { model: model.config.clone(), ..cfg.clone() });
            if model.config.memory_variant == MemoryVariant::MostSelected {
                return Err(Error::Config("predict needs a network, not the most-selected heuristic".into()));
            }
            let ds = pipeline::load_data(&model.config, &data)?;
            let sample = ds
                .samples
                .iter()
                .find(|s| s.id == record)
                .ok_or_else(|| Error::Data { line: None, msg: format!("no record on manifest line {record}") })?;
            let p = model.predict(sample)?;
            println!("record {record}: {} candidates, {} history pairs", p.scores.len(), sample.history.len());
            if p.no_history {
                println!("gate path: no-history");
            }
            let mut order: Vec<usize> = (0..p.scores.len()).collect();
            order.sort_by(|&a, &b| p.scores[b].total_cmp(&p.scores[a]).then(a.cmp(&b)));
            println!("{:>4}  {:>12}  {:>12}  candidate", "rank", "score", "gate");
            for (rank, &i) in order.iter().enumerate() {
                let mark = if i == sample.truth_index { "  (truth)" } else { "" };
                println!("{:>4}  {:>12.9}  {:>12.9}  {}{mark}", rank + 1, p.scores[i], p.gates[i], sample.candidates[i].id);
            }
        }
    }
    Ok(())
}

/// Loads a checkpoint (or `model.ckpt` inside a run directory), applying
/// the ablation and memory-variant flags to its configuration.
fn load_model(g: &Global, path: &Path) -> Result<Model<f64>> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let model = Model::<f64>::load(&file)?;
    let mut mc = model.config.clone();
    apply_model_flags(g, &mut mc)?;
    if mc == model.config {
        return Ok(model);
    }
    mc.validate()?;
    Model::from_params(mc, model.params)
}

fn evaluate(g: &Global, cfg: &Config, args: &EvalArgs, analyze: bool) -> Result<()> {
    if args.dump_attention && args.out.is_none() {
        return Err(Error::Config("--dump-attention needs --out".into()));
    }
    let model = args.model.as_deref().map(|p| load_model(g, p)).transpose()?;
    let (mc, ds) = match &model {
        Some(m) => (m.config.clone(), pipeline::load_data(&m.config, &args.data)?),
        None if cfg.model.memory_variant == MemoryVariant::MostSelected => {
            let mc = pipeline::fit_model_to_data(&cfg.model, &args.data)?;
            let ds = pipeline::load_data(&mc, &args.data)?;
            (mc, ds)
        }
        None => return Err(Error::Config("--model is required unless --memory-variant most-selected".into())),
    };
    log_config(&Config { model: mc.clone(), ..cfg.clone() });
    let opts = EvalOptions { buckets: analyze, sweeps: args.sweep.clone(), threads: g.threads };
    let report = match &model {
        Some(m) => pipeline::evaluate_model(m, &ds.samples, &opts)?,
        None => sticker_rank::eval::evaluate(&MostSelected, &ds.samples, mc.n_candidates, &opts)?,
    };
    let Some(out) = &args.out else {
        println!("{}", report.to_json());
        return Ok(());
    };
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_outputs(out, &report, &ds, analyze)?;
    if args.dump_attention {
        let m = model.as_ref().ok_or_else(|| Error::Config("--dump-attention needs a network".into()))?;
        if m.config.memory_variant == MemoryVariant::MostSelected {
            return Err(Error::Config("--dump-attention needs a network, not the most-selected heuristic".into()));
        }
        let records = attention_report(m, &ds.samples, Some(&ds.vocab), g.threads)?;
        write_jsonl(&out.join("attention.jsonl"), &records)?;
    }
    println!(
        "MAP {:.4}  R@1 {:.4}  ({} samples) -> {}",
        report.map,
        report.recall(1).unwrap_or(0.0),
        report.n_samples,
        out.display()
    );
    Ok(())
}

fn write_outputs(out: &Path, report: &EvalReport, ds: &Dataset, analyze: bool) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
    };
    write("report.json", report.to_json())?;
    if let Some(points) = &report.utterance_sweep {
        write_sweep_csv(&out.join("sweep-utterances.csv"), points)?;
    }
    if let Some(points) = &report.history_sweep {
        write_sweep_csv(&out.join("sweep-history.csv"), points)?;
    }
    if analyze {
        write("stats.json", serde_json::to_string_pretty(&dataset_stats(&ds.samples)?)?)?;
    }
    Ok(())
}
