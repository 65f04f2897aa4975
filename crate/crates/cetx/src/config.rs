//! Run configuration: a flat file of dotted `section.key = value` lines.
//!
//! Any key left out takes its default. The effective configuration is echoed
//! back in the same flat form into every output directory.

use std::path::{Path, PathBuf};

use cetx_core::data::SyntheticSpec;
use cetx_core::model::{BlockSpec, ModelConfig};
use cetx_core::objectives::{LabelSource, LossConfig, LossMode};
use cetx_core::perturb::{PerturbKind, PerturbationConfig};
use cetx_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub perturb: PerturbSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `synthetic`, `windows` or `csv`.
    pub source: String,
    pub path: Option<PathBuf>,
    /// Window shape and class count of a csv source.
    pub channels: Option<usize>,
    pub length: Option<usize>,
    pub num_classes: Option<usize>,
    pub class_names: Vec<String>,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub per_class: usize,
    pub groups: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// One rate per block.
    pub dropout: Vec<f64>,
    pub hidden_units: usize,
    pub l2_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mode: String,
    pub lambda: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub label_source: String,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSection {
    pub additive_sigma: f64,
    pub multiplicative_sigma: f64,
    pub warp_sigma: f64,
    pub warp_knots: usize,
    pub mask_length: usize,
    pub enabled: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub phi_grid: Vec<f64>,
    /// Additive noise applied to test inputs after normalization.
    pub test_noise: f64,
    /// Pick φ on held-out training groups.
    pub select_phi: bool,
    pub validation_fraction: f64,
    /// Largest φ whose validation macro-F1 is within this of the best.
    pub phi_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

pub fn default_phi_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            perturb: PerturbSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: None,
            channels: None,
            length: None,
            num_classes: None,
            class_names: Vec::new(),
            normalize: true,
        }
    }
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            num_classes: s.num_classes,
            channels: s.channels,
            length: s.length,
            per_class: s.per_class,
            groups: s.groups,
            noise_std: s.noise_std,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.7 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::standard(1, 400, 2);
        Self {
            filters: m.blocks.iter().map(|b| b.filters).collect(),
            kernel: m.blocks[0].kernel,
            pool: m.blocks[0].pool,
            dropout: m.blocks.iter().map(|b| b.dropout_rate).collect(),
            hidden_units: m.hidden_units,
            l2_rate: m.l2_rate,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            mode: l.mode.name().into(),
            lambda: l.lambda,
            kappa_min: l.kappa_min,
            kappa_max: l.kappa_max,
            label_source: l.label_source.name().into(),
            tau: l.tau,
        }
    }
}

impl Default for PerturbSection {
    fn default() -> Self {
        let p = PerturbationConfig::default();
        Self {
            additive_sigma: p.additive_sigma,
            multiplicative_sigma: p.multiplicative_sigma,
            warp_sigma: p.warp_sigma,
            warp_knots: p.warp_knots,
            mask_length: p.mask_length,
            enabled: p.enabled.iter().map(|k| k.name().into()).collect(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            phi_grid: default_phi_grid(),
            test_noise: 0.0,
            select_phi: false,
            validation_fraction: 0.1,
            phi_tolerance: 0.01,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/cetx"),
        }
    }
}

/// Where training windows come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Windows(PathBuf),
    Csv {
        path: PathBuf,
        channels: usize,
        length: usize,
        num_classes: usize,
    },
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            match line {
                Some(l) => config_err("config", format!("line {l}: {msg}")),
                None => config_err("config", msg),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// One `dotted.key = value` line per setting, in declaration order.
    pub fn echo(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let need_path = || {
            self.data
                .path
                .clone()
                .ok_or_else(|| config_err("data.path", format!("required when data.source = \"{}\"", self.data.source)))
        };
        match self.data.source.as_str() {
            "synthetic" => Ok(DataSource::Synthetic(self.synthetic_spec())),
            "windows" => Ok(DataSource::Windows(need_path()?)),
            "csv" => {
                let path = need_path()?;
                let get = |v: Option<usize>, field: &str| {
                    v.ok_or_else(|| config_err(field, "required when data.source = \"csv\""))
                };
                Ok(DataSource::Csv {
                    path,
                    channels: get(self.data.channels, "data.channels")?,
                    length: get(self.data.length, "data.length")?,
                    num_classes: get(self.data.num_classes, "data.num_classes")?,
                })
            }
            other => Err(config_err(
                "data.source",
                format!("unknown source `{other}` (expected synthetic, windows or csv)"),
            )),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.synthetic;
        SyntheticSpec {
            num_classes: s.num_classes,
            channels: s.channels,
            length: s.length,
            per_class: s.per_class,
            groups: s.groups,
            seed: self.seed,
            noise_std: s.noise_std,
        }
    }

    pub fn model_config(&self, channels: usize, length: usize, num_classes: usize) -> Result<ModelConfig> {
        let m = &self.model;
        if m.dropout.len() != m.filters.len() {
            return Err(config_err(
                "model.dropout",
                format!("{} rates for {} blocks", m.dropout.len(), m.filters.len()),
            ));
        }
        let config = ModelConfig {
            channels_in: channels,
            length_in: length,
            num_classes,
            blocks: m
                .filters
                .iter()
                .zip(&m.dropout)
                .map(|(&filters, &dropout_rate)| BlockSpec {
                    filters,
                    kernel: m.kernel,
                    pool: m.pool,
                    dropout_rate,
                })
                .collect(),
            hidden_units: m.hidden_units,
            l2_rate: m.l2_rate,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let l = &self.loss;
        let mode = LossMode::parse(&l.mode)?;
        let label_source = LabelSource::parse(&l.label_source)?;
        let c = LossConfig {
            lambda: l.lambda,
            kappa_min: l.kappa_min,
            kappa_max: l.kappa_max,
            label_source,
            tau: l.tau,
            mode,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn perturb_config(&self) -> Result<PerturbationConfig> {
        let p = &self.perturb;
        let enabled = p
            .enabled
            .iter()
            .map(|n| {
                PerturbKind::parse(n).ok_or_else(|| {
                    config_err(
                        "perturb.enabled",
                        format!("unknown perturbation `{n}` (expected additive, multiplicative, warp or mask)"),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationConfig {
            additive_sigma: p.additive_sigma,
            multiplicative_sigma: p.multiplicative_sigma,
            warp_sigma: p.warp_sigma,
            warp_knots: p.warp_knots,
            mask_length: p.mask_length,
            enabled,
        })
    }

    pub fn train_config(&self, window_length: usize) -> Result<TrainConfig> {
        let t = &self.train;
        let c = TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            loss: self.loss_config()?,
            perturb: self.perturb_config()?,
            eval_every: t.eval_every,
        };
        c.validate(window_length)?;
        Ok(c)
    }

    /// Checks that need no data: everything except window-dependent limits.
    pub fn validate(&self) -> Result<()> {
        self.data_source()?;
        let loss = self.loss_config()?;
        if self.perturb_config()?.enabled.is_empty() && loss.mode.uses_perturbed() {
            return Err(config_err(
                "perturb.enabled",
                format!("loss.mode = \"{}\" needs at least one perturbation", loss.mode.name()),
            ));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(config_err(
                "split.train_fraction",
                format!("{} must lie strictly between 0 and 1", self.split.train_fraction),
            ));
        }
        if !(self.eval.validation_fraction > 0.0 && self.eval.validation_fraction < 1.0) {
            return Err(config_err(
                "eval.validation_fraction",
                format!("{} must lie strictly between 0 and 1", self.eval.validation_fraction),
            ));
        }
        if !(self.eval.test_noise >= 0.0) || !self.eval.test_noise.is_finite() {
            return Err(config_err("eval.test_noise", format!("{} must be >= 0", self.eval.test_noise)));
        }
        if !(self.eval.phi_tolerance >= 0.0) {
            return Err(config_err("eval.phi_tolerance", "must be >= 0"));
        }
        cetx_core::early_exit::normalize_grid(&self.eval.phi_grid)
            .map_err(|e| config_err("eval.phi_grid", strip_field(&e.to_string())))?;
        Ok(())
    }
}

fn strip_field(msg: &str) -> String {
    msg.split_once(": ").map_or(msg, |(_, r)| r).to_string()
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&other.to_string());
            out.push('\n');
        }
    }
}

/// Parse `0.1,0.5,0.9`.
pub fn parse_phi_list(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| config_err("phi", format!("`{}` is not a number", t.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    cetx_core::early_exit::normalize_grid(&grid).map_err(|e| config_err("phi", strip_field(&e.to_string())))
}

/// Parse `start:end:count`, e.g. `0:1:101`, into evenly spaced thresholds
/// with exact endpoints.
pub fn parse_grid_spec(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || config_err("grid", format!("`{s}` is not start:end:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count < 2 || !(end > start) {
        return Err(config_err("grid", format!("`{s}` needs count >= 2 and end > start")));
    }
    let grid: Vec<f64> = (0..count)
        .map(|i| {
            if i + 1 == count {
                end
            } else {
                start + (end - start) * i as f64 / (count - 1) as f64
            }
        })
        .collect();
    cetx_core::early_exit::normalize_grid(&grid).map_err(|e| config_err("grid", strip_field(&e.to_string())))
}
