use std::path::PathBuf;
use std::process::ExitCode;

use cetx::commands::{cmd_eval, cmd_gradcheck, cmd_synth_data, cmd_train, EvalArgs};
use cetx::config::{default_phi_grid, parse_grid_spec, parse_phi_list, RunConfig};
use cetx::error::config_err;
use cetx::Result;
use cetx_core::gradcheck::Fault;
use cetx_core::tape::OpKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cetx", version, about = "Consistent exit training and early-exit evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-exit network from a run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Thresholds used for φ selection, e.g. `0,0.5,1`.
        #[arg(long)]
        phi: Option<String>,
    },
    /// Evaluate a checkpoint under a list of entropy thresholds.
    Eval {
        #[command(flatten)]
        common: EvalFlags,
        /// Comma-separated thresholds in [0, 1].
        #[arg(long)]
        phi: Option<String>,
    },
    /// Evaluate a checkpoint over a dense threshold grid.
    Sweep {
        #[command(flatten)]
        common: EvalFlags,
        /// `start:end:count`.
        #[arg(long, default_value = "0:1:101", conflicts_with = "phi")]
        grid: String,
        #[arg(long)]
        phi: Option<String>,
    },
    /// Check every backward rule against central differences.
    Gradcheck {
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic windows file.
    SynthData {
        /// Reads `seed` and `synthetic.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Windows file, or csv with the checkpoint's window shape.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reads `seed` and `eval.test_noise`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Additive noise applied to normalized test inputs.
    #[arg(long)]
    test_noise: Option<f64>,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    path.as_deref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn eval_args(f: EvalFlags, grid: Vec<f64>) -> Result<EvalArgs> {
    let cfg = load_config(&f.config)?;
    let test_noise = f.test_noise.unwrap_or(cfg.eval.test_noise);
    if !(test_noise >= 0.0) || !test_noise.is_finite() {
        return Err(config_err("test-noise", format!("{test_noise} must be >= 0")));
    }
    Ok(EvalArgs {
        checkpoint: f.checkpoint,
        data: f.data,
        grid,
        out: f.out,
        test_noise,
        seed: f.seed.unwrap_or(cfg.seed),
    })
}

fn parse_fault(name: &str) -> Result<Fault> {
    let kind = match name {
        "conv1d" => OpKind::Conv1d,
        "max_pool1d" => OpKind::MaxPool1d,
        "global_avg_pool" => OpKind::GlobalAvgPool,
        "dense" => OpKind::Dense,
        "prelu" => OpKind::Prelu,
        "normalize" => OpKind::Normalize,
        "dropout" => OpKind::Dropout,
        "softmax" => OpKind::Softmax,
        "cross_entropy" => OpKind::CrossEntropy,
        other => return Err(config_err("inject-fault", format!("unknown op `{other}`"))),
    };
    Ok(Fault { kind, factor: 1.01 })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed, phi } => {
            let mut cfg = load_config(&config)?;
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = phi {
                cfg.eval.phi_grid = parse_phi_list(&p)?;
            }
            let r = cmd_train(&cfg)?;
            let last = r.report.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs, final loss {:.6}, wrote {}",
                last.epoch,
                last.loss.total,
                cfg.output.dir.display()
            );
            if let Some(phi) = r.selected_phi {
                println!("selected phi {phi}");
            }
        }
        Command::Eval { common, phi } => {
            let grid = match phi {
                Some(p) => parse_phi_list(&p)?,
                None => default_phi_grid(),
            };
            let args = eval_args(common, grid)?;
            let e = cmd_eval(&args)?;
            println!("evaluated {} thresholds, wrote {}", e.curve.len(), args.out.display());
        }
        Command::Sweep { common, grid, phi } => {
            let grid = match phi {
                Some(p) => parse_phi_list(&p)?,
                None => parse_grid_spec(&grid)?,
            };
            let args = eval_args(common, grid)?;
            let e = cmd_eval(&args)?;
            println!("swept {} thresholds, wrote {}", e.curve.len(), args.out.display());
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            cmd_gradcheck(fault, &mut std::io::stdout().lock())?;
        }
        Command::SynthData {
            config,
            out,
            seed,
            classes,
            channels,
            length,
            per_class,
            groups,
            noise_std,
        } => {
            let cfg = load_config(&config)?;
            let mut spec = cfg.synthetic_spec();
            spec.seed = seed.unwrap_or(spec.seed);
            spec.num_classes = classes.unwrap_or(spec.num_classes);
            spec.channels = channels.unwrap_or(spec.channels);
            spec.length = length.unwrap_or(spec.length);
            spec.per_class = per_class.unwrap_or(spec.per_class);
            spec.groups = groups.unwrap_or(spec.groups);
            spec.noise_std = noise_std.unwrap_or(spec.noise_std);
            let ds = cmd_synth_data(&spec, &out)?;
            println!("wrote {} windows to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: args: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
