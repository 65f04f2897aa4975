//! Adam and the consistent-exit training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::WindowedDataset;
use crate::early_exit::{per_exit_metrics, profile_dataset, sweep_profiles, CurvePoint};
use crate::error::{invalid, Error, Result};
use crate::kernels::argmax;
use crate::metrics::Metrics;
use crate::model::{ModelConfig, MultiExitNet, Parameter};
use crate::objectives::{kappa_schedule, total_loss, ExitLossBreakdown, LossConfig, LossInputs};
use crate::perturb::{perturb_example, PerturbationConfig};
use crate::rng::{stream, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub perturb: PerturbationConfig,
    /// Validate every this many epochs; 0 only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            loss: LossConfig::default(),
            perturb: PerturbationConfig::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, window_length: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("train.learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        self.loss.validate()?;
        if self.loss.mode.uses_perturbed() {
            self.perturb.validate(window_length)?;
        }
        Ok(())
    }
}

/// Bias-corrected Adam with zero-initialized moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients and zero them. A
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut [Parameter<T>], learning_rate: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                epoch: 0,
                step: self.step as usize,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.widen();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = learning_rate * (m[i] / c1) / (libm::sqrt(v[i] / c2) + self.eps);
                *w -= T::lit(update);
            }
            p.grad.fill(T::zero());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub accuracy: Vec<f64>,
    pub macro_f1: Vec<f64>,
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub kappa: f64,
    pub loss: ExitLossBreakdown,
    /// Per-exit accuracy of the clean training-mode forward passes.
    pub train_accuracy: Vec<f64>,
    pub validation: Option<ValidationRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: ExitLossBreakdown,
    /// `[example][exit]` argmax of the clean logits.
    pub predictions: Vec<Vec<usize>>,
}

pub struct Trainer {
    net: MultiExitNet<f32>,
    adam: AdamState,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(net: MultiExitNet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate(net.config().length_in)?;
        let adam = AdamState::new(net.params());
        Ok(Self { net, adam, config })
    }

    pub fn net(&self) -> &MultiExitNet<f32> {
        &self.net
    }

    pub fn into_net(self) -> MultiExitNet<f32> {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Forward, loss, backward and Adam update on the examples `indices` of
    /// `data`, with the consistency gate at `kappa`. Every random draw is
    /// keyed by `(seed, epoch, example index)`.
    pub fn step(&mut self, data: &WindowedDataset, indices: &[usize], epoch: usize, kappa: f64) -> Result<StepOutcome> {
        let cfg = &self.config;
        let (seed, ep) = (cfg.seed, epoch as u64);
        let net = &self.net;
        let mut tape: Tape<f32> = Tape::new();

        let mut clean: Vec<Vec<Var>> = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut r = stream(seed, ep, i as u64, Purpose::DropoutClean);
            clean.push(net.forward_all_exits(&mut tape, &data.example(i), true, &mut r)?);
        }
        let perturbed = if cfg.loss.mode.uses_perturbed() {
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                let mut pr = stream(seed, ep, i as u64, Purpose::Perturb);
                let (_, x) = perturb_example(&data.example(i), &cfg.perturb, &mut pr)?;
                let mut r = stream(seed, ep, i as u64, Purpose::DropoutPerturbed);
                out.push(net.forward_all_exits(&mut tape, &x, true, &mut r)?);
            }
            Some(out)
        } else {
            None
        };
        let l2 = net.l2_penalty(&mut tape)?;
        let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
        let inputs = LossInputs {
            clean: &clean,
            perturbed: perturbed.as_deref(),
            labels: &labels,
            kappa,
            l2,
        };
        let (total, breakdown) = total_loss(&mut tape, &inputs, &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                location: format!("loss at epoch {}", epoch + 1),
            });
        }
        let predictions = clean
            .iter()
            .map(|ex| ex.iter().map(|&v| argmax(tape.value(v))).collect())
            .collect();
        let grads = tape.backward(total)?;
        self.net.accumulate_grads(&grads);
        let lr = self.config.learning_rate;
        self.adam.step(self.net.params_mut(), lr).map_err(|e| match e {
            Error::NonFiniteGradient { param, step, .. } => Error::NonFiniteGradient {
                param,
                epoch: epoch + 1,
                step,
            },
            other => other,
        })?;
        Ok(StepOutcome {
            loss: breakdown,
            predictions,
        })
    }

    /// Shuffled order of the training examples for `epoch` (0-based).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, epoch as u64, 0, Purpose::Shuffle));
        order
    }

    /// One pass over `data`; loss components are averaged with batch-size
    /// weights.
    pub fn run_epoch(&mut self, data: &WindowedDataset, epoch: usize) -> Result<EpochRecord> {
        let cfg = &self.config;
        let kappa = kappa_schedule(epoch, cfg.epochs, cfg.loss.kappa_min, cfg.loss.kappa_max);
        let order = self.epoch_order(data.len(), epoch);
        let exits = self.net.num_exits();
        let n = data.len() as f64;
        let mut acc = ExitLossBreakdown {
            per_exit_task: vec![0.0; exits],
            per_exit_consistency: vec![0.0; exits],
            l2: 0.0,
            total: 0.0,
            retained_fraction: vec![0.0; exits],
        };
        let mut correct = vec![0usize; exits];
        let batch = self.config.batch_size;
        for chunk in order.chunks(batch) {
            let out = self.step(data, chunk, epoch, kappa)?;
            let w = chunk.len() as f64 / n;
            let b = &out.loss;
            for e in 0..exits {
                acc.per_exit_task[e] += w * b.per_exit_task[e];
                acc.per_exit_consistency[e] += w * b.per_exit_consistency[e];
                acc.retained_fraction[e] += w * b.retained_fraction.get(e).copied().unwrap_or(0.0);
            }
            acc.l2 += w * b.l2;
            for (p, &i) in out.predictions.iter().zip(chunk) {
                for e in 0..exits {
                    correct[e] += usize::from(p[e] == data.label(i));
                }
            }
        }
        acc.total = acc.recompute_total(self.config.loss.lambda);
        Ok(EpochRecord {
            epoch: epoch + 1,
            kappa,
            loss: acc,
            train_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            validation: None,
        })
    }
}

fn check_dataset(data: &WindowedDataset, model: &ModelConfig) -> Result<()> {
    if data.channels() != model.channels_in || data.window_length() != model.length_in {
        return Err(invalid(
            "data",
            format!(
                "windows are ({}, {}) but the model expects ({}, {})",
                data.channels(),
                data.window_length(),
                model.channels_in,
                model.length_in
            ),
        ));
    }
    if data.num_classes() != model.num_classes {
        return Err(invalid(
            "data",
            format!("{} classes but the model has {}", data.num_classes(), model.num_classes),
        ));
    }
    Ok(())
}

pub fn validation_record(net: &MultiExitNet<f32>, data: &WindowedDataset) -> Result<ValidationRecord> {
    let profiles = profile_dataset(net, data)?;
    let m = per_exit_metrics(&profiles, &data.label_indices(), data.num_classes())?;
    Ok(ValidationRecord {
        accuracy: m.iter().map(|m| m.accuracy).collect(),
        macro_f1: m.iter().map(|m| m.macro_f1).collect(),
    })
}

/// Train a fresh network for `config.epochs` epochs and return the final
/// model with one report row per epoch.
pub fn train(
    train_set: &WindowedDataset,
    validation: Option<&WindowedDataset>,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(MultiExitNet<f32>, TrainReport)> {
    train_with(train_set, validation, model, config, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    train_set: &WindowedDataset,
    validation: Option<&WindowedDataset>,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MultiExitNet<f32>, TrainReport)> {
    check_dataset(train_set, model)?;
    if let Some(v) = validation {
        check_dataset(v, model)?;
    }
    let mut trainer = Trainer::new(MultiExitNet::new(model.clone())?, config.clone())?;
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut rec = trainer.run_epoch(train_set, epoch)?;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if let Some(v) = validation {
            if due || epoch + 1 == config.epochs {
                rec.validation = Some(validation_record(trainer.net(), v)?);
            }
        }
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    Ok((trainer.into_net(), report))
}

/// Per-exit metrics plus one early-exit row per threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_exit: Vec<Metrics>,
    pub curve: Vec<CurvePoint>,
}

pub fn evaluate(net: &MultiExitNet<f32>, data: &WindowedDataset, phi_grid: &[f64]) -> Result<Evaluation> {
    check_dataset(data, net.config())?;
    let profiles = profile_dataset(net, data)?;
    let labels = data.label_indices();
    Ok(Evaluation {
        per_exit: per_exit_metrics(&profiles, &labels, data.num_classes())?,
        curve: sweep_profiles(&profiles, &labels, data.num_classes(), phi_grid)?,
    })
}
