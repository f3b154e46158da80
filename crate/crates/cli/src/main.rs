use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use sinklab::case_study::{embedding_correlations, interference_sweep, SweepConfig};
use sinklab::cl::{make_synthetic_sequence, run_experiment, sink_masking_experiment, train_model, Strategy};
use sinklab::io;
use sinklab::prescale::class_attention_heatmap;
use sinklab::verify::{run_all, VerifyConfig};

#[derive(Parser)]
#[command(name = "sinklab", version)]
#[command(about = "Attention-sink metrics, interference analysis and continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer sink metrics and smoothing bounds for one dump or a directory of dumps.
    Analyze {
        /// Trace dump (.json) or a directory of them.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-task interference model.
    #[command(name = "case-study", subcommand)]
    CaseStudy(CaseStudyCommand),
    /// Continual-learning experiments on the synthetic task sequence.
    #[command(subcommand)]
    Cl(ClCommand),
    /// Run the randomized self-check suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fewer cases per suite.
        #[arg(long)]
        quick: bool,
        /// Also write the suite results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Class-to-token attention of a trained model on one input.
    ExportHeatmap {
        /// Checkpoint written by `cl train`.
        #[arg(long)]
        model: PathBuf,
        /// Comma- or space-separated token ids, or a file containing them.
        #[arg(long)]
        input: String,
        /// Task blocks to score (default: all).
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CaseStudyCommand {
    /// Interference over a sink degree × deviation grid.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation histograms of an embedding table.
    Correlations {
        #[arg(long)]
        embeddings: PathBuf,
        /// Rows to analyze (default: the dump's special tokens).
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClCommand {
    /// Every configured strategy over every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "cl-out")]
        out: PathBuf,
    },
    /// Train one strategy on one seed and save the final model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// In-task accuracy with attention to the shared prefix kept and dropped.
    Mask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ft")]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            let kind = err
                .downcast_ref::<sinklab::Error>()
                .map_or("other", sinklab::Error::kind);
            let chain: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
            let body = json!({ "error": { "kind": kind, "message": err.to_string(), "causes": chain } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze { input, out } => analyze(&input, &out)?,
        Command::CaseStudy(CaseStudyCommand::Sweep { config, out }) => sweep(config.as_deref(), &out)?,
        Command::CaseStudy(CaseStudyCommand::Correlations {
            embeddings,
            tokens,
            bins,
            out,
        }) => correlations(&embeddings, tokens, bins, &out)?,
        Command::Cl(ClCommand::Run { config, out }) => cl_run(&config, &out)?,
        Command::Cl(ClCommand::Train {
            config,
            strategy,
            seed,
            out,
        }) => cl_train(&config, strategy, seed, &out)?,
        Command::Cl(ClCommand::Mask { config, strategy, out }) => cl_mask(&config, strategy, &out)?,
        Command::Verify { seed, quick, json } => return verify(seed, quick, json.as_deref()),
        Command::ExportHeatmap {
            model,
            input,
            blocks,
            out,
        } => export_heatmap(&model, &input, blocks, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze(input: &Path, out: &Path) -> Result<()> {
    let traces = io::load_traces(input)?
        .into_iter()
        .map(|(path, t)| (path.display().to_string(), t))
        .collect::<Vec<_>>();
    let analysis = io::analyze(&traces)?;
    io::write_analysis(out, &analysis)?;
    eprintln!("analyzed {} dump(s), {} layer(s) -> {}", traces.len(), analysis.layers.len(), out.display());
    Ok(())
}

fn sweep(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: SweepConfig = match config {
        Some(p) => io::load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => SweepConfig::default(),
    };
    let (rows, summary) = interference_sweep(&cfg)?;
    io::write_atomic(out.join("sweep.csv"), &io::sweep_csv(&rows)?)?;
    io::write_atomic(out.join("sweep_summary.csv"), &io::sweep_summary_csv(&summary)?)?;
    io::write_json(out.join("sweep_summary.json"), &json!({ "config": cfg, "summary": summary }))?;
    eprintln!("{} sweep rows -> {}", rows.len(), out.display());
    Ok(())
}

fn correlations(path: &Path, tokens: Vec<usize>, bins: usize, out: &Path) -> Result<()> {
    let dump = io::load_embeddings(path)?;
    let ids = if tokens.is_empty() { dump.special_token_ids.clone() } else { tokens };
    if ids.is_empty() {
        bail!("no token ids given and the dump lists no special tokens");
    }
    let result = embedding_correlations(&dump.matrix()?, &ids, bins)?;
    io::write_json(out, &json!({ "model_name": dump.model_name, "correlations": result }))?;
    Ok(())
}

fn cl_run(config: &Path, out: &Path) -> Result<()> {
    let cfg = io::load_experiment_config(config).with_context(|| format!("loading {}", config.display()))?;
    let start = Instant::now();
    let report = run_experiment(&cfg)?;
    io::write_experiment(out, &report)?;
    for r in &report.reports {
        for m in &r.modes {
            let fgt = m.fgt.map_or_else(|| "n/a".to_string(), |f| format!("{f:.4}"));
            eprintln!("{:<10} {:<14} ACC {:.4}  FGT {fgt}", r.strategy.name(), m.mode.name(), m.acc);
        }
    }
    for alert in &report.sanity_alerts {
        eprintln!("sanity: {}", serde_json::to_string(alert)?);
    }
    eprintln!("done in {:.1}s -> {}", start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn cl_train(config: &Path, strategy: Strategy, seed: u64, out: &Path) -> Result<()> {
    let cfg = io::load_experiment_config(config).with_context(|| format!("loading {}", config.display()))?;
    let sequence = make_synthetic_sequence(&cfg.sequence, cfg.encoder.vocab_size, cfg.encoder.model_dim)?;
    let (run, model) = train_model(&cfg, &sequence, strategy, seed)?;
    io::save_checkpoint(out, &model)?;
    eprintln!("{}", serde_json::to_string(&run.task_aware)?);
    Ok(())
}

fn cl_mask(config: &Path, strategy: Strategy, out: &Path) -> Result<()> {
    let cfg = io::load_experiment_config(config).with_context(|| format!("loading {}", config.display()))?;
    let report = sink_masking_experiment(&cfg, strategy)?;
    io::write_json(out, &report)?;
    eprintln!(
        "{}: keep {:.4}  drop {:.4}  ({} seeds)",
        strategy.name(),
        report.mean_keep,
        report.mean_drop,
        report.runs.len()
    );
    Ok(())
}

fn verify(seed: u64, quick: bool, json_out: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = VerifyConfig {
        seed,
        ..VerifyConfig::default()
    };
    if quick {
        cfg.matrix_cases = 100;
        cfg.equivalence_cases = 20;
        cfg.gradient_cases = 1;
    }
    let start = Instant::now();
    let suites = run_all(&cfg);
    let mut ok = true;
    for s in &suites {
        let status = if s.all_passed() { "PASS" } else { "FAIL" };
        ok &= s.all_passed();
        println!(
            "{status} {:<26} {:>5}/{:<5} worst {:.3e} (tolerance {:.0e})",
            s.name, s.passed, s.cases, s.worst, s.tolerance
        );
        for f in &s.failures {
            println!("     {f}");
        }
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if let Some(path) = json_out {
        io::write_json(path, &suites)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn parse_tokens(input: &str) -> Result<Vec<usize>> {
    let text = if Path::new(input).is_file() {
        std::fs::read_to_string(input).with_context(|| format!("reading {input}"))?
    } else {
        input.to_string()
    };
    let tokens = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().with_context(|| format!("bad token id {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() {
        bail!("empty token input");
    }
    Ok(tokens)
}

fn export_heatmap(model: &Path, input: &str, blocks: Vec<usize>, out: Option<&Path>) -> Result<()> {
    let model = io::load_checkpoint(model)?;
    let tokens = parse_tokens(input)?;
    let blocks = if blocks.is_empty() {
        (0..model.head.task_count()).collect()
    } else {
        blocks
    };
    let entries = class_attention_heatmap(&model, &tokens, &blocks)?;
    let body = json!({ "variant": model.head.variant(), "blocks": blocks, "classes": entries });
    match out {
        Some(p) => io::write_json(p, &body)?,
        None => println!("{}", serde_json::to_string_pretty(&body)?),
    }
    Ok(())
}
