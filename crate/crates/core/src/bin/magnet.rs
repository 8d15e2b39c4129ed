use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use magnet_core::connectome::{load_cohort, Target};
use magnet_core::hybrid_graph::{GraphAblation, GraphParams};
use magnet_core::objectives::{render_table, MeanStd};
use magnet_core::pipeline::{
    self, build_graphs, evaluate_checkpoint, explain, load_or_build_graphs, loss_curves_csv, metrics_csv,
    run_cv_with_graphs, train_full, write_graphs, Ablation, Checkpoint, GraphAudit, RunReport, TrainConfig,
};
use magnet_core::synth::{generate_cohort, SynthConfig};
use magnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "magnet", version, about = "Hybrid brain-graph attention network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted signal.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build per-subject hybrid graphs.
    BuildGraph {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate, then fit a model on the whole cohort.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank connections by attention and keep the top fraction.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Graph directory from `build-graph`; rebuilt when it does not match.
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    target: Option<Target>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Repeat the whole cross validation with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long)]
    no_mdc: bool,
    #[arg(long)]
    no_cmc: bool,
    #[arg(long)]
    no_sf_loss: bool,
    #[arg(long, conflicts_with = "sbm_fnc_only")]
    fnc_only: bool,
    #[arg(long)]
    sbm_fnc_only: bool,
    /// Skip fitting the final whole-cohort model.
    #[arg(long)]
    no_final_model: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GraphConfigFile {
    graph: GraphParams,
    ablation: GraphAblation,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(t) = args.target {
        config.target = t;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if args.fnc_only {
        config.ablation = Ablation {
            use_sf_loss: config.ablation.use_sf_loss,
            ..Ablation::fnc_only()
        };
    }
    if args.sbm_fnc_only {
        config.ablation = Ablation {
            use_sf_loss: config.ablation.use_sf_loss,
            ..Ablation::sbm_fnc_only()
        };
    }
    config.ablation.use_mdc &= !args.no_mdc;
    config.ablation.use_cmc &= !args.no_cmc;
    config.ablation.use_sf_loss &= !args.no_sf_loss;
    config.validate()?;
    if args.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }

    let records = load_cohort(&args.cohort)?;
    let graph_dir = args.graphs.clone().unwrap_or_else(|| args.out.join("graphs"));
    let graphs = load_or_build_graphs(&graph_dir, &records, &config.graph, config.ablation.graph())?;
    GraphAudit::from_entries(&graphs, config.effective_loss().sf > 0.0).check(&config.ablation)?;

    let started = Instant::now();
    let mut reports: Vec<RunReport> = Vec::new();
    for r in 0..args.repeats {
        let cfg = TrainConfig {
            seed: config.seed + r,
            ..config.clone()
        };
        let report = run_cv_with_graphs(&records, &graphs, &cfg)?;
        let dir = if args.repeats == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("repeat-{r}"))
        };
        pipeline::write_report_json(&dir.join("run_report.json"), &report)?;
        write_text(&dir.join("loss_curves.csv"), &loss_curves_csv(&report))?;
        write_text(&dir.join("metrics.csv"), &metrics_csv(&report))?;
        let table = render_table(&[
            report.metrics.clone(),
            report.constant_baseline.clone(),
            report.ridge_baseline.clone(),
        ]);
        write_text(&dir.join("metrics.txt"), &table)?;
        print!("{table}");
        reports.push(report);
    }
    if args.repeats > 1 {
        let corr: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.metrics.aggregate.correlation.map(|c| c.mean))
            .collect();
        let mse: Vec<f64> = reports.iter().map(|r| r.metrics.aggregate.mse.mean).collect();
        let summary = serde_json::json!({
            "repeats": args.repeats,
            "mse": MeanStd::of(&mse),
            "correlation": MeanStd::of(&corr),
        });
        write_text(
            &args.out.join("repeats_summary.json"),
            &serde_json::to_string_pretty(&summary).expect("serializes"),
        )?;
    }
    if !args.no_final_model {
        let checkpoint = train_full(&records, &graphs, &config)?;
        checkpoint.save(&args.out.join("model.json"))?;
    }
    let timing = serde_json::json!({ "wall_clock_secs": started.elapsed().as_secs_f64() });
    write_text(&args.out.join("timing.json"), &timing.to_string())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: SynthConfig = read_config(config.as_deref())?;
            let cohort = generate_cohort(&cfg)?;
            cohort.write(&out)?;
            println!("wrote {} subjects to {}", cohort.records.len(), out.display());
        }
        Command::BuildGraph { cohort, config, out } => {
            let cfg: GraphConfigFile = read_config(config.as_deref())?;
            let records = load_cohort(&cohort)?;
            let entries = build_graphs(&records, &cfg.graph, cfg.ablation)?;
            write_graphs(&out, &records, &cfg.graph, cfg.ablation, &entries)?;
            let audit = GraphAudit::from_entries(&entries, false);
            println!("{}", serde_json::to_string_pretty(&audit).expect("serializes"));
        }
        Command::Train(args) => train(args)?,
        Command::Eval { checkpoint, cohort, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let records = load_cohort(&cohort)?;
            let report = evaluate_checkpoint(&ckpt, &records)?;
            let text = serde_json::to_string_pretty(&report).expect("serializes");
            match out {
                Some(p) => write_text(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Explain {
            checkpoint,
            cohort,
            fraction,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let records = load_cohort(&cohort)?;
            let explanation = explain(&ckpt, &records, fraction)?;
            pipeline::write_report_json(&out, &explanation)?;
            println!(
                "wrote {} of {} connections to {}",
                explanation.connections.len(),
                explanation.total_connections,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
