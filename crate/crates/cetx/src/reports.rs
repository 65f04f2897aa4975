//! Comma-separated report tables. Floats are written in their shortest
//! round-trip form, so identical inputs give byte-identical files.

use std::path::Path;

use cetx_core::early_exit::CurvePoint;
use cetx_core::metrics::Metrics;
use cetx_core::model::ModelConfig;
use cetx_core::trainer::TrainReport;

use crate::error::{format_err, io_err, Result};

pub const FSCORE_VS_ENTROPY: &str = "fscore_vs_entropy.csv";
pub const AVGEXIT_TRADEOFF: &str = "avgexit_tradeoff.csv";
pub const EXIT_FRACTIONS: &str = "exit_fractions.csv";
pub const PER_CLASS_CONFIDENCE: &str = "per_class_confidence.csv";
pub const PER_EXIT_METRICS: &str = "per_exit_metrics.csv";
pub const TRAIN_REPORT: &str = "train_report.csv";

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut put = |rec: &[String]| w.write_record(rec).map_err(|e| format_err(path, e.to_string()));
    put(header)?;
    for r in rows {
        put(r)?;
    }
    w.flush().map_err(io_err(path))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn exit_columns(prefix: &str, exits: usize) -> Vec<String> {
    (1..=exits).map(|e| format!("{prefix}exit{e}")).collect()
}

fn header(fixed: &[&str]) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).collect()
}

/// Everything an evaluation run emits.
pub struct EvalTables<'a> {
    pub curve: &'a [CurvePoint],
    pub per_exit: &'a [Metrics],
    pub model: &'a ModelConfig,
    pub class_names: &'a [String],
}

/// Write the four trade-off tables plus per-exit metrics into `dir`.
pub fn emit_reports(t: &EvalTables<'_>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let exits = t.model.num_exits();
    let macs: Vec<u64> = (1..=exits)
        .map(|e| t.model.macs_until_exit(e).expect("exit in range"))
        .collect();
    let full = macs[exits - 1] as f64;

    let rows = t
        .curve
        .iter()
        .map(|c| {
            vec![
                num(c.phi),
                num(c.metrics.macro_f1),
                num(c.metrics.accuracy),
                num(c.metrics.kappa),
                num(c.average_exit),
            ]
        })
        .collect::<Vec<_>>();
    write_table(
        &dir.join(FSCORE_VS_ENTROPY),
        &header(&["phi_normalized", "macro_f1", "accuracy", "kappa", "average_exit"]),
        &rows,
    )?;

    let rows = t
        .curve
        .iter()
        .map(|c| {
            let cost: f64 = c.fractions.iter().zip(&macs).map(|(f, &m)| f * m as f64).sum();
            vec![
                num(c.phi),
                num(c.average_exit),
                num(cost / full),
                num(c.metrics.macro_f1),
            ]
        })
        .collect::<Vec<_>>();
    write_table(
        &dir.join(AVGEXIT_TRADEOFF),
        &header(&["phi_normalized", "average_exit", "relative_macs", "macro_f1"]),
        &rows,
    )?;

    let mut h = header(&["phi_normalized"]);
    h.extend(exit_columns("", exits));
    let rows = t
        .curve
        .iter()
        .map(|c| std::iter::once(num(c.phi)).chain(c.fractions.iter().map(|&f| num(f))).collect())
        .collect::<Vec<_>>();
    write_table(&dir.join(EXIT_FRACTIONS), &h, &rows)?;

    let mut h = header(&["phi_normalized", "class"]);
    h.extend(exit_columns("", exits));
    let mut rows = Vec::new();
    for c in t.curve {
        for (k, per_exit) in c.class_confidence.iter().enumerate() {
            let name = t.class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            let mut row = vec![num(c.phi), name];
            row.extend(per_exit.iter().map(|v| v.map(num).unwrap_or_default()));
            rows.push(row);
        }
    }
    write_table(&dir.join(PER_CLASS_CONFIDENCE), &h, &rows)?;

    let rows = t
        .per_exit
        .iter()
        .enumerate()
        .map(|(e, m)| {
            vec![
                (e + 1).to_string(),
                macs[e].to_string(),
                num(m.accuracy),
                num(m.macro_f1),
                num(m.kappa),
            ]
        })
        .collect::<Vec<_>>();
    write_table(
        &dir.join(PER_EXIT_METRICS),
        &header(&["exit", "macs", "accuracy", "macro_f1", "kappa"]),
        &rows,
    )
}

/// One row per epoch. Validation columns are empty on epochs without a
/// validation pass.
pub fn write_train_report(report: &TrainReport, exits: usize, path: &Path) -> Result<()> {
    let mut h = header(&["epoch", "kappa", "total_loss", "l2"]);
    for prefix in ["task_", "consistency_", "retained_", "train_acc_", "val_acc_", "val_f1_"] {
        h.extend(exit_columns(prefix, exits));
    }
    let rows = report
        .epochs
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string(), num(r.kappa), num(r.loss.total), num(r.loss.l2)];
            for col in [
                &r.loss.per_exit_task,
                &r.loss.per_exit_consistency,
                &r.loss.retained_fraction,
                &r.train_accuracy,
            ] {
                row.extend(col.iter().map(|&v| num(v)));
            }
            match &r.validation {
                Some(v) => {
                    row.extend(v.accuracy.iter().map(|&x| num(x)));
                    row.extend(v.macro_f1.iter().map(|&x| num(x)));
                }
                None => row.extend(std::iter::repeat_n(String::new(), 2 * exits)),
            }
            row
        })
        .collect::<Vec<_>>();
    write_table(path, &h, &rows)
}
