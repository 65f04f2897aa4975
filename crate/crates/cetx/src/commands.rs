//! The `train`, `eval`, `sweep`, `gradcheck` and `synth-data` commands.

use std::io::Write;
use std::path::{Path, PathBuf};

use cetx_core::data::{corrupt_additive, group_split, ChannelStats, DatasetMeta, SplitSpec, SyntheticSpec, WindowedDataset};
use cetx_core::early_exit::{per_exit_metrics, sweep_profiles, CurvePoint, ExitProfile};
use cetx_core::gradcheck::{run_suite, Fault};
use cetx_core::model::MultiExitNet;
use cetx_core::trainer::{train, Evaluation, TrainReport};
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{DataSource, RunConfig};
use crate::csv_input::load_csv;
use crate::error::{config_err, format_err, io_err, Error, Result};
use crate::reports::{emit_reports, write_train_report, EvalTables, TRAIN_REPORT};
use crate::windows_file::{load_windows_file, save_windows_file};

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT: &str = "model.cetm";
pub const TEST_WINDOWS: &str = "test_windows.cetd";
pub const PHI_SELECTION: &str = "phi_selection.csv";

/// Worker count from `CETX_THREADS`; 1 when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var("CETX_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(config_err("CETX_THREADS", format!("`{s}` is not a positive integer"))),
        },
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| config_err("CETX_THREADS", e.to_string()))
}

/// Readouts of every exit for every example, in example order.
pub fn profiles(net: &MultiExitNet<f32>, ds: &WindowedDataset) -> Result<Vec<ExitProfile>> {
    let out = pool()?.install(|| {
        (0..ds.len())
            .into_par_iter()
            .map(|i| ExitProfile::compute(net, &ds.example(i)))
            .collect::<cetx_core::Result<Vec<_>>>()
    })?;
    Ok(out)
}

pub fn load_source(src: &DataSource) -> Result<WindowedDataset> {
    Ok(match src {
        DataSource::Synthetic(spec) => cetx_core::data::generate_synthetic(spec)?,
        DataSource::Windows(path) => load_windows_file(path)?,
        DataSource::Csv {
            path,
            channels,
            length,
            num_classes,
        } => load_csv(path, &DatasetMeta::new(*num_classes, *channels, *length))?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Largest φ whose macro-F1 is within `tolerance` of the best on the curve.
pub fn select_phi(curve: &[CurvePoint], tolerance: f64) -> f64 {
    let best = curve.iter().map(|c| c.metrics.macro_f1).fold(f64::NEG_INFINITY, f64::max);
    curve
        .iter()
        .filter(|c| c.metrics.macro_f1 >= best - tolerance)
        .map(|c| c.phi)
        .fold(0.0, f64::max)
}

pub struct TrainOutcome {
    pub net: MultiExitNet<f32>,
    pub report: TrainReport,
    pub selected_phi: Option<f64>,
}

/// Split, normalize, train and write the run directory `cfg.output.dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut ds = load_source(&cfg.data_source()?)?;
    if !cfg.data.class_names.is_empty() {
        ds.meta_mut().class_names = cfg.data.class_names.clone();
        ds.meta().validate().map_err(|e| config_err("data.class_names", e.to_string()))?;
    }
    let split = SplitSpec {
        train_fraction: cfg.split.train_fraction,
        seed: cfg.seed,
    };
    let (train_raw, test_raw) = group_split(&ds, &split)?;
    let stats = if cfg.data.normalize {
        ChannelStats::from_dataset(&train_raw)
    } else {
        ChannelStats::identity(ds.channels())
    };
    let model = cfg.model_config(ds.channels(), ds.window_length(), ds.num_classes())?;
    let tcfg = cfg.train_config(ds.window_length())?;

    let (fit_raw, val_raw) = if cfg.eval.select_phi {
        let spec = SplitSpec {
            train_fraction: 1.0 - cfg.eval.validation_fraction,
            seed: cfg.seed,
        };
        let (a, b) = group_split(&train_raw, &spec)?;
        (a, Some(b))
    } else {
        (train_raw, None)
    };
    let fit = stats.apply(&fit_raw)?;
    let val = val_raw.as_ref().map(|v| stats.apply(v)).transpose()?;
    let (net, report) = train(&fit, val.as_ref(), &model, &tcfg)?;

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let echo = cfg.echo();
    write_text(&dir.join(CONFIG_ECHO), &echo)?;
    let meta = CheckpointMeta {
        class_names: ds.meta().class_names.clone(),
        seed: cfg.seed,
        normalization: stats,
        config_echo: echo,
    };
    save_checkpoint(&net, &meta, &dir.join(CHECKPOINT))?;
    write_train_report(&report, net.num_exits(), &dir.join(TRAIN_REPORT))?;
    save_windows_file(&test_raw, &dir.join(TEST_WINDOWS))?;

    let mut selected_phi = None;
    if let Some(val) = &val {
        let p = profiles(&net, val)?;
        let curve = sweep_profiles(&p, &val.label_indices(), val.num_classes(), &cfg.eval.phi_grid)?;
        let phi = select_phi(&curve, cfg.eval.phi_tolerance);
        let mut text = String::from("phi_normalized,validation_macro_f1,selected\n");
        for c in &curve {
            text.push_str(&format!("{},{},{}\n", c.phi, c.metrics.macro_f1, c.phi == phi));
        }
        write_text(&dir.join(PHI_SELECTION), &text)?;
        selected_phi = Some(phi);
    }
    Ok(TrainOutcome {
        net,
        report,
        selected_phi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub grid: Vec<f64>,
    pub out: PathBuf,
    /// Additive noise on the normalized test inputs.
    pub test_noise: f64,
    pub seed: u64,
}

impl EvalArgs {
    fn echo(&self) -> String {
        let grid: Vec<String> = self.grid.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "checkpoint = {:?}\ndata = {:?}\nphi_grid = [{}]\ntest_noise = {:?}\nseed = {}\n",
            self.checkpoint.display().to_string(),
            self.data.display().to_string(),
            grid.join(", "),
            self.test_noise,
            self.seed
        )
    }
}

/// Load windows for a checkpoint; csv files take their shape from the model.
fn load_eval_data(path: &Path, net: &MultiExitNet<f32>, class_names: &[String]) -> Result<WindowedDataset> {
    let c = net.config();
    let mut ds = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path, &DatasetMeta::new(c.num_classes, c.channels_in, c.length_in))?
    } else {
        load_windows_file(path)?
    };
    if ds.channels() != c.channels_in || ds.window_length() != c.length_in || ds.num_classes() != c.num_classes {
        return Err(format_err(
            path,
            format!(
                "shape mismatch: data has {} channels x {} samples and {} classes, model expects {} x {} and {}",
                ds.channels(),
                ds.window_length(),
                ds.num_classes(),
                c.channels_in,
                c.length_in,
                c.num_classes
            ),
        ));
    }
    if ds.meta().class_names.is_empty() {
        ds.meta_mut().class_names = class_names.to_vec();
    }
    Ok(ds)
}

/// Early-exit evaluation of a checkpoint on a dataset; writes every report
/// table and an echo of the arguments into `args.out`.
pub fn cmd_eval(args: &EvalArgs) -> Result<Evaluation> {
    let (net, meta) = load_checkpoint(&args.checkpoint)?;
    let raw = load_eval_data(&args.data, &net, &meta.class_names)?;
    let mut ds = meta.normalization.apply(&raw)?;
    if args.test_noise > 0.0 {
        ds = corrupt_additive(&ds, args.test_noise, args.seed)?;
    }
    let p = profiles(&net, &ds)?;
    let labels = ds.label_indices();
    let eval = Evaluation {
        per_exit: per_exit_metrics(&p, &labels, ds.num_classes())?,
        curve: sweep_profiles(&p, &labels, ds.num_classes(), &args.grid)?,
    };
    let names: Vec<String> = if meta.class_names.is_empty() {
        (0..ds.num_classes()).map(|k| format!("class{k}")).collect()
    } else {
        meta.class_names.clone()
    };
    emit_reports(
        &EvalTables {
            curve: &eval.curve,
            per_exit: &eval.per_exit,
            model: net.config(),
            class_names: &names,
        },
        &args.out,
    )?;
    write_text(&args.out.join(CONFIG_ECHO), &args.echo())?;
    Ok(eval)
}

/// Run the gradient-check suite and print one line per parameter group.
pub fn cmd_gradcheck(fault: Option<Fault>, out: &mut dyn Write) -> Result<()> {
    let reports = run_suite(fault)?;
    let io = |e: std::io::Error| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(out, "check,group,max_rel_error,status").map_err(io)?;
    let mut failed = Vec::new();
    for r in &reports {
        for g in &r.groups {
            let ok = g.max_rel_error < r.tolerance;
            writeln!(
                out,
                "{},{},{:.3e},{}",
                r.name,
                g.name,
                g.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            )
            .map_err(io)?;
        }
        if !r.passed() {
            failed.push(format!("{} ({:.3e})", r.name, r.max_rel_error()));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "{} of {} checks exceed {:e}: {}",
            failed.len(),
            reports.len(),
            cetx_core::gradcheck::DEFAULT_TOLERANCE,
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth_data(spec: &SyntheticSpec, out: &Path) -> Result<WindowedDataset> {
    let ds = cetx_core::data::generate_synthetic(spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_windows_file(&ds, out)?;
    Ok(ds)
}
