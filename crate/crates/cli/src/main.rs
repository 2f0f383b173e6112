use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fncode::config::PipelineConfig;
use fncode::pipeline;
use fncode::refnet::ProbeLayer;
use fncode::Result;

#[derive(Parser, Debug)]
#[command(
    name = "fncode",
    version,
    about = "SOM analysis of hidden-layer functional codes"
)]
struct Cli {
    /// TOML config document; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct LayerArgs {
    /// Restrict to these probe layers (comma separated, e.g. L1,L2).
    #[arg(long, value_delimiter = ',')]
    layer: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference network.
    RefnetTrain,
    /// Write pooled, normalized activations of the analysis images.
    Extract(LayerArgs),
    /// Train one SOM per layer.
    TrainSom {
        #[command(flatten)]
        layers: LayerArgs,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
    },
    /// BMU density maps, attractors and dead-unit fractions.
    Density(LayerArgs),
    /// Per-class BMU density maps.
    ClassDensity(LayerArgs),
    /// k-means V-scores of BMU coordinates.
    ClusterScore {
        #[command(flatten)]
        layers: LayerArgs,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// PGD attacks and BMU displacement.
    Attack {
        #[command(flatten)]
        layers: LayerArgs,
        /// Comma separated budgets.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
        #[arg(long)]
        n_pairs: Option<usize>,
    },
    /// Invert the densest SOM codes.
    Invert {
        #[command(flatten)]
        layers: LayerArgs,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Every command in order.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn apply_layers(cfg: &mut PipelineConfig, args: &LayerArgs) -> Result<()> {
    if !args.layer.is_empty() {
        cfg.layers = args
            .layer
            .iter()
            .map(|t| ProbeLayer::from_tag(t.trim()))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    let manifests = match cli.command {
        Command::RefnetTrain => vec![pipeline::cmd_refnet_train(&cfg)?],
        Command::Extract(l) => {
            apply_layers(&mut cfg, &l)?;
            vec![pipeline::cmd_extract(&cfg)?]
        }
        Command::TrainSom { layers, rows, cols } => {
            apply_layers(&mut cfg, &layers)?;
            cfg.som.rows = rows.unwrap_or(cfg.som.rows);
            cfg.som.cols = cols.unwrap_or(cfg.som.cols);
            vec![pipeline::cmd_train_som(&cfg)?]
        }
        Command::Density(l) => {
            apply_layers(&mut cfg, &l)?;
            vec![pipeline::cmd_density(&cfg)?]
        }
        Command::ClassDensity(l) => {
            apply_layers(&mut cfg, &l)?;
            vec![pipeline::cmd_class_density(&cfg)?]
        }
        Command::ClusterScore { layers, n_seeds } => {
            apply_layers(&mut cfg, &layers)?;
            cfg.cluster.n_seeds = n_seeds.unwrap_or(cfg.cluster.n_seeds);
            vec![pipeline::cmd_cluster_score(&cfg)?]
        }
        Command::Attack {
            layers,
            eps,
            n_pairs,
        } => {
            apply_layers(&mut cfg, &layers)?;
            if !eps.is_empty() {
                cfg.attack.eps_list = eps;
            }
            cfg.attack.n_pairs = n_pairs.unwrap_or(cfg.attack.n_pairs);
            vec![pipeline::cmd_attack(&cfg)?]
        }
        Command::Invert { layers, top_k } => {
            apply_layers(&mut cfg, &layers)?;
            cfg.density.top_k = top_k.unwrap_or(cfg.density.top_k);
            vec![pipeline::cmd_invert(&cfg)?]
        }
        Command::RunAll => pipeline::run_all(&cfg)?,
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            Vec::new()
        }
    };
    for m in manifests {
        println!(
            "{}: {} outputs in {}",
            m.command,
            m.outputs.len(),
            cfg.out_dir.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
