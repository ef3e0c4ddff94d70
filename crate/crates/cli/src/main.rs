use std::path::PathBuf;
use std::process::ExitCode;

use adhoc_se::asynchrony::SweepAxis;
use adhoc_se::runner::{self, ExperimentConfig, System};
use adhoc_se::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Distributed speech enhancement experiments on simulated asynchronous
/// ad-hoc microphone arrays.
#[derive(Debug, Parser)]
#[command(name = "adhoc-se", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Sweep SRO over these maxima (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    sro_max_ppm: Option<Vec<f64>>,
    /// Sweep STO over these maxima (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    sto_max_ms: Option<Vec<f64>>,
    /// Node whose clock the others are offset from (1-based).
    #[arg(long, global = true)]
    reference_node: Option<usize>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the scenes.
    Generate,
    /// Train the learned systems.
    TrainAttn,
    /// Run every sweep condition on every scene and system.
    Run,
    /// Estimate per-channel offsets from a head's similarity matrices.
    EstimateSto {
        /// Defaults to the attention system's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene directory; defaults to the first generated scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Analyzed node (1-based).
        #[arg(long, default_value_t = 1)]
        node: usize,
        /// Start offset of every node in ms (comma separated); zeros by default.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        inject_sto_ms: Option<Vec<f64>>,
    },
    /// Summarize the results per condition and system.
    Report,
}

fn resolve(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = g.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &g.output_dir {
        cfg.output_dir = dir.clone();
    }
    match (&g.sro_max_ppm, &g.sto_max_ms) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--sro-max-ppm and --sto-max-ms are swept separately; give one".into(),
            ))
        }
        (Some(v), None) => {
            cfg.sweep.axis = SweepAxis::Sro;
            cfg.sweep.max_values = v.clone();
        }
        (None, Some(v)) => {
            cfg.sweep.axis = SweepAxis::Sto;
            cfg.sweep.max_values = v.clone();
        }
        (None, None) => {}
    }
    if let Some(k) = g.reference_node {
        if k == 0 {
            return Err(Error::Config("--reference-node is 1-based".into()));
        }
        cfg.reference_node = k - 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.global)?;
    log::debug!("config hash {}", cfg.hash());
    match &cli.command {
        Command::Generate => {
            let dirs = runner::cmd_generate(&cfg)?;
            println!("{} scenes in {}", dirs.len(), cfg.output_dir.join("scenes").display());
        }
        Command::TrainAttn => {
            for path in runner::cmd_train_attn(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Run => {
            println!("{}", runner::cmd_run(&cfg)?.display());
        }
        Command::EstimateSto {
            checkpoint,
            scene,
            node,
            inject_sto_ms,
        } => {
            if *node == 0 {
                return Err(Error::Config("--node is 1-based".into()));
            }
            let checkpoint = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.checkpoint_path(System::Attention));
            let scene = scene.clone().unwrap_or_else(|| cfg.scene_dir(0));
            let inject = inject_sto_ms
                .clone()
                .unwrap_or_else(|| vec![0.0; cfg.scene.config.n_nodes]);
            let report = runner::cmd_estimate_sto(&cfg, &checkpoint, &scene, node - 1, &inject)?;
            println!("node {}, similarity window at frame {}", node, report.center_frame);
            for e in &report.estimates {
                println!(
                    "  sender {}: true {} ms, estimated {} ms",
                    e.sender + 1,
                    fmt_num(Some(e.sto_true_ms)),
                    fmt_num(e.sto_est_ms)
                );
            }
        }
        Command::Report => {
            println!(
                "{:<5} {:>8} {:<14} {:>4} {:>9} {:>9} {:>9} {:>9}",
                "axis", "max", "system", "n", "si_sdr", "drop", "sir_drop", "sar_drop"
            );
            for r in runner::cmd_report(&cfg)? {
                println!(
                    "{:<5} {:>8} {:<14} {:>4} {:>9.2} {:>9} {:>9} {:>9}",
                    r.axis.to_string(),
                    r.max_value,
                    r.system.to_string(),
                    r.n,
                    r.si_sdr_out,
                    fmt_num(r.si_sdr_degradation),
                    fmt_num(r.sir_degradation),
                    fmt_num(r.sar_degradation),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
