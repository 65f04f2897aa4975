//! Training objectives for multi-exit networks.
//!
//! All losses take batch-major logits: `clean[m][e]` is the logit node of
//! exit `e` for example `m`. Per-exit results are scalar tape nodes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{argmax, softmax};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Where consistency targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSource {
    /// Argmax of the same exit on the clean input, gated by confidence.
    Pseudo,
    /// Argmax of the last exit on the clean input, gated by its confidence.
    Teacher,
    /// The true label, never gated.
    Original,
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Pseudo => "pseudo",
            LabelSource::Teacher => "teacher",
            LabelSource::Original => "original",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(Self::Pseudo),
            "teacher" => Ok(Self::Teacher),
            "original" => Ok(Self::Original),
            other => Err(invalid("loss.label_source", format!("unknown label source `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Task loss plus weighted consistency loss.
    Cet,
    /// Task loss only.
    ExitWise,
    /// Task loss over clean and perturbed copies with true labels.
    AugmentOnly,
    /// Task loss plus distillation from the last exit into earlier exits.
    Distill,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Cet => "cet",
            LossMode::ExitWise => "exit_wise",
            LossMode::AugmentOnly => "augment_only",
            LossMode::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cet" => Ok(Self::Cet),
            "exit_wise" => Ok(Self::ExitWise),
            "augment_only" => Ok(Self::AugmentOnly),
            "distill" => Ok(Self::Distill),
            other => Err(invalid("loss.mode", format!("unknown mode `{other}`"))),
        }
    }

    /// Whether the mode needs a forward pass over perturbed inputs.
    pub fn uses_perturbed(self) -> bool {
        matches!(self, LossMode::Cet | LossMode::AugmentOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub label_source: LabelSource,
    pub tau: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            kappa_min: 0.5,
            kappa_max: 0.9,
            label_source: LabelSource::Pseudo,
            tau: 2.0,
            mode: LossMode::Cet,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("loss.lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !(self.kappa_min > 0.0 && self.kappa_min <= self.kappa_max && self.kappa_max < 1.0) {
            return Err(invalid(
                "loss.kappa",
                format!(
                    "need 0 < kappa_min <= kappa_max < 1, got {} and {}",
                    self.kappa_min, self.kappa_max
                ),
            ));
        }
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(invalid("loss.tau", format!("{} must be >= 1", self.tau)));
        }
        Ok(())
    }
}

/// Cosine ramp of the confidence gate from `kappa_min` at `step = 0` to
/// `kappa_max` at `step = total_steps`.
pub fn kappa_schedule(step: usize, total_steps: usize, kappa_min: f64, kappa_max: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return kappa_max;
    }
    if step == 0 {
        return kappa_min;
    }
    let t = step as f64 / total_steps as f64;
    kappa_max - (kappa_max - kappa_min) * (1.0 + libm::cos(core::f64::consts::PI * t)) / 2.0
}

fn num_exits(clean: &[Vec<Var>]) -> Result<usize> {
    let e = clean.first().map_or(0, |v| v.len());
    if e == 0 || clean.iter().any(|v| v.len() != e) {
        return Err(shape_err("loss", "every example needs the same non-zero number of exits"));
    }
    Ok(e)
}

fn batch_mean<T: Scalar>(tape: &mut Tape<T>, terms: Vec<Var>, denom: usize) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant_scalar(T::zero()));
    }
    let c = T::lit(1.0 / denom as f64);
    let weighted: Vec<(Var, T)> = terms.into_iter().map(|v| (v, c)).collect();
    tape.lin_comb(&weighted)
}

/// Per-exit mean cross-entropy of clean logits against true labels.
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, clean: &[Vec<Var>], labels: &[usize]) -> Result<Vec<Var>> {
    let exits = num_exits(clean)?;
    if labels.len() != clean.len() {
        return Err(shape_err("task_loss", "one label per example"));
    }
    (0..exits)
        .map(|e| {
            let terms = clean
                .iter()
                .zip(labels)
                .map(|(ex, &y)| tape.cross_entropy_class(ex[e], y))
                .collect::<Result<Vec<_>>>()?;
            batch_mean(tape, terms, clean.len())
        })
        .collect()
}

pub struct ConsistencyOutput {
    pub losses: Vec<Var>,
    /// Fraction of the batch passing the gate, per exit.
    pub retained_fraction: Vec<f64>,
}

/// Gated cross-entropy between targets derived from the clean outputs and the
/// perturbed outputs. Clean outputs are read as constants, so gradients flow
/// only through `perturbed`. The batch size `M` is the denominator whatever
/// the number of retained examples.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    clean: &[Vec<Var>],
    perturbed: &[Vec<Var>],
    kappa: f64,
    source: LabelSource,
    labels: &[usize],
) -> Result<ConsistencyOutput> {
    let exits = num_exits(clean)?;
    if perturbed.len() != clean.len() || num_exits(perturbed)? != exits {
        return Err(shape_err("consistency_loss", "clean and perturbed batches must pair up"));
    }
    if source == LabelSource::Original && labels.len() != clean.len() {
        return Err(shape_err("consistency_loss", "one label per example"));
    }
    let m = clean.len();
    let mut losses = Vec::with_capacity(exits);
    let mut retained_fraction = Vec::with_capacity(exits);
    for e in 0..exits {
        let mut terms = Vec::new();
        for i in 0..m {
            let target = match source {
                LabelSource::Original => Some(labels[i]),
                LabelSource::Pseudo | LabelSource::Teacher => {
                    let src = if source == LabelSource::Pseudo { e } else { exits - 1 };
                    let p = softmax(tape.value(clean[i][src]));
                    let top = argmax(&p);
                    (p[top].widen() >= kappa).then_some(top)
                }
            };
            if let Some(y) = target {
                terms.push(tape.cross_entropy_class(perturbed[i][e], y)?);
            }
        }
        retained_fraction.push(terms.len() as f64 / m as f64);
        losses.push(batch_mean(tape, terms, m)?);
    }
    Ok(ConsistencyOutput {
        losses,
        retained_fraction,
    })
}

/// `-τ² Σ_k softmax(teacher/τ)_k · log softmax(student/τ)_k`, with the
/// teacher treated as a constant.
pub fn distillation_loss<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var, tau: f64) -> Result<Var> {
    let inv = T::lit(1.0 / tau);
    let soft: Vec<T> = tape.value(teacher).iter().map(|&z| z * inv).collect();
    let target = softmax(&soft);
    let s = tape.scale(student, inv);
    let ce = tape.cross_entropy(s, &target)?;
    Ok(tape.scale(ce, T::lit(tau * tau)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitLossBreakdown {
    pub per_exit_task: Vec<f64>,
    pub per_exit_consistency: Vec<f64>,
    pub l2: f64,
    pub total: f64,
    pub retained_fraction: Vec<f64>,
}

impl ExitLossBreakdown {
    /// `mean_e(task_e + λ·consistency_e) + l2`.
    pub fn recompute_total(&self, lambda: f64) -> f64 {
        let e = self.per_exit_task.len() as f64;
        self.per_exit_task
            .iter()
            .zip(&self.per_exit_consistency)
            .map(|(t, c)| t + lambda * c)
            .sum::<f64>()
            / e
            + self.l2
    }
}

pub struct LossInputs<'a> {
    pub clean: &'a [Vec<Var>],
    /// Required by modes that use perturbed inputs.
    pub perturbed: Option<&'a [Vec<Var>]>,
    pub labels: &'a [usize],
    pub kappa: f64,
    /// Scalar L2 penalty node.
    pub l2: Var,
}

/// Assemble the training objective selected by `config.mode`:
/// `(1/E) Σ_e (task_e + λ·aux_e) + l2`, where `aux` is the consistency loss
/// (cet), the distillation loss (distill, earlier exits only) or zero.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &LossInputs<'_>,
    config: &LossConfig,
) -> Result<(Var, ExitLossBreakdown)> {
    let exits = num_exits(inputs.clean)?;
    let need_perturbed = || {
        inputs
            .perturbed
            .ok_or_else(|| invalid("loss.mode", format!("`{}` needs perturbed inputs", config.mode.name())))
    };
    let m = inputs.clean.len();
    let mut retained = vec![0.0; exits];
    let (task, aux): (Vec<Var>, Option<Vec<Var>>) = match config.mode {
        LossMode::ExitWise => (task_loss(tape, inputs.clean, inputs.labels)?, None),
        LossMode::Cet => {
            let task = task_loss(tape, inputs.clean, inputs.labels)?;
            let c = consistency_loss(
                tape,
                inputs.clean,
                need_perturbed()?,
                inputs.kappa,
                config.label_source,
                inputs.labels,
            )?;
            retained = c.retained_fraction;
            (task, Some(c.losses))
        }
        LossMode::AugmentOnly => {
            let perturbed = need_perturbed()?;
            if perturbed.len() != m || num_exits(perturbed)? != exits {
                return Err(shape_err("total_loss", "clean and perturbed batches must pair up"));
            }
            let task = (0..exits)
                .map(|e| {
                    let mut terms = Vec::with_capacity(2 * m);
                    for (i, &y) in inputs.labels.iter().enumerate() {
                        terms.push(tape.cross_entropy_class(inputs.clean[i][e], y)?);
                        terms.push(tape.cross_entropy_class(perturbed[i][e], y)?);
                    }
                    batch_mean(tape, terms, 2 * m)
                })
                .collect::<Result<Vec<_>>>()?;
            (task, None)
        }
        LossMode::Distill => {
            let task = task_loss(tape, inputs.clean, inputs.labels)?;
            let mut aux = Vec::with_capacity(exits);
            for e in 0..exits {
                let mut terms = Vec::new();
                if e + 1 < exits {
                    for ex in inputs.clean {
                        terms.push(distillation_loss(tape, ex[e], ex[exits - 1], config.tau)?);
                    }
                }
                aux.push(batch_mean(tape, terms, m)?);
            }
            (task, Some(aux))
        }
    };

    let inv_e = T::lit(1.0 / exits as f64);
    let lam_e = T::lit(config.lambda / exits as f64);
    let mut terms = Vec::with_capacity(2 * exits + 1);
    for e in 0..exits {
        terms.push((task[e], inv_e));
        if let Some(aux) = &aux {
            terms.push((aux[e], lam_e));
        }
    }
    terms.push((inputs.l2, T::one()));
    let total = tape.lin_comb(&terms)?;

    let mut breakdown = ExitLossBreakdown {
        per_exit_task: task.iter().map(|&v| tape.item(v).widen()).collect(),
        per_exit_consistency: match &aux {
            Some(a) => a.iter().map(|&v| tape.item(v).widen()).collect(),
            None => vec![0.0; exits],
        },
        l2: tape.item(inputs.l2).widen(),
        total: 0.0,
        retained_fraction: retained,
    };
    breakdown.total = breakdown.recompute_total(config.lambda);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(&Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn kappa_endpoints_and_midpoint() {
        assert_eq!(kappa_schedule(0, 100, 0.5, 0.9), 0.5);
        assert_eq!(kappa_schedule(100, 100, 0.5, 0.9), 0.9);
        assert!((kappa_schedule(50, 100, 0.5, 0.9) - 0.7).abs() < 1e-9);
        assert_eq!(kappa_schedule(3, 0, 0.5, 0.9), 0.9);
        let ks: Vec<f64> = (0..=100).map(|t| kappa_schedule(t, 100, 0.5, 0.9)).collect();
        assert!(ks.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn task_loss_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let u = logits(&mut tape, &[0.0; 6]);
        let clean = vec![vec![u, u], vec![u, u]];
        let t = task_loss(&mut tape, &clean, &[1, 4]).unwrap();
        for v in t {
            assert!((tape.item(v) - 6f64.ln()).abs() < 1e-12);
        }
        let sharp = logits(&mut tape, &[50.0, 0.0, 0.0]);
        let t = task_loss(&mut tape, &[vec![sharp]], &[0]).unwrap();
        assert!(tape.item(t[0]) < 1e-12);
    }

    #[test]
    fn gate_closed_gives_zero() {
        let mut tape = Tape::<f64>::new();
        let c = logits(&mut tape, &[0.1, 0.0, -0.1]);
        let p = logits(&mut tape, &[1.0, 2.0, 3.0]);
        let out = consistency_loss(&mut tape, &[vec![c]], &[vec![p]], 0.9, LabelSource::Pseudo, &[0]).unwrap();
        assert_eq!(tape.item(out.losses[0]), 0.0);
        assert_eq!(out.retained_fraction, [0.0]);
    }

    #[test]
    fn denominator_is_batch_size() {
        let mut tape = Tape::<f64>::new();
        let confident = logits(&mut tape, &[5.0, 0.0]);
        let unsure = logits(&mut tape, &[0.0, 0.0]);
        let p1 = logits(&mut tape, &[0.3, 0.7]);
        let p2 = logits(&mut tape, &[1.0, -1.0]);
        let out = consistency_loss(
            &mut tape,
            &[vec![confident], vec![unsure]],
            &[vec![p1], vec![p2]],
            0.6,
            LabelSource::Pseudo,
            &[0, 0],
        )
        .unwrap();
        let c = -crate::kernels::log_softmax(&[0.3, 0.7])[0];
        assert!((tape.item(out.losses[0]) - c / 2.0).abs() < 1e-12);
        assert_eq!(out.retained_fraction, [0.5]);
    }

    #[test]
    fn saturated_perturbed_prediction_gives_near_zero() {
        let mut tape = Tape::<f64>::new();
        let c = logits(&mut tape, &[0.0, 8.0]);
        let p = logits(&mut tape, &[-30.0, 30.0]);
        let out = consistency_loss(&mut tape, &[vec![c]], &[vec![p]], 0.5, LabelSource::Pseudo, &[0]).unwrap();
        assert!(tape.item(out.losses[0]) < 1e-12);
    }

    #[test]
    fn original_mode_with_identity_perturbation_equals_task_loss() {
        let mut tape = Tape::<f64>::new();
        let a = logits(&mut tape, &[0.2, -0.4, 1.0]);
        let b = logits(&mut tape, &[-1.0, 0.5, 0.1]);
        let clean = vec![vec![a, b]];
        let t = task_loss(&mut tape, &clean, &[1]).unwrap();
        let c = consistency_loss(&mut tape, &clean, &clean, 0.9, LabelSource::Original, &[1]).unwrap();
        for e in 0..2 {
            assert_eq!(tape.item(t[e]), tape.item(c.losses[e]));
        }
    }

    #[test]
    fn teacher_mode_takes_targets_from_last_exit() {
        let mut tape = Tape::<f64>::new();
        let early = logits(&mut tape, &[9.0, 0.0]);
        let last = logits(&mut tape, &[0.0, 9.0]);
        let p = logits(&mut tape, &[0.2, 0.1]);
        let out = consistency_loss(
            &mut tape,
            &[vec![early, last]],
            &[vec![p, p]],
            0.5,
            LabelSource::Teacher,
            &[0],
        )
        .unwrap();
        let want = -crate::kernels::log_softmax(&[0.2, 0.1])[1];
        assert!((tape.item(out.losses[0]) - want).abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_skips_clean_branch() {
        let mut tape = Tape::<f64>::new();
        let c = logits(&mut tape, &[3.0, 0.0, 0.0]);
        let p = logits(&mut tape, &[0.0, 1.0, 0.0]);
        let out = consistency_loss(&mut tape, &[vec![c]], &[vec![p]], 0.5, LabelSource::Pseudo, &[0]).unwrap();
        let g = tape.backward(out.losses[0]).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(p).is_some());
    }

    #[test]
    fn distillation_identities() {
        let z = [0.5, -1.0, 2.0];
        let mut tape = Tape::<f64>::new();
        let s = logits(&mut tape, &z);
        let t = logits(&mut tape, &z);
        let l = distillation_loss(&mut tape, s, t, 1.0).unwrap();
        let p = softmax(&z);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((tape.item(l) - entropy).abs() < 1e-12);

        // exact τ² factor
        let tau = 3.0;
        let t3 = logits(&mut tape, &[0.0, 1.0, 0.5]);
        let l3 = distillation_loss(&mut tape, s, t3, tau).unwrap();
        let zs: Vec<f64> = z.iter().map(|v| v / tau).collect();
        let pt = softmax(&[0.0, 1.0 / tau, 0.5 / tau]);
        let ls = crate::kernels::log_softmax(&zs);
        let raw: f64 = -pt.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
        assert!((tape.item(l3) - tau * tau * raw).abs() < 1e-12);

        // uniform teacher
        let u = logits(&mut tape, &[0.0, 0.0, 0.0]);
        let lu = distillation_loss(&mut tape, s, u, tau).unwrap();
        let mean_nll = -ls.iter().sum::<f64>() / 3.0;
        assert!((tape.item(lu) - tau * tau * mean_nll).abs() < 1e-12);

        let g = tape.backward(lu).unwrap();
        assert!(g.wrt(u).is_none());
    }

    #[test]
    fn total_loss_arithmetic() {
        // E=2, task=(1.0, 0.6), consistency=(0.4, 0.2), λ=0.5, l2=0
        let b = ExitLossBreakdown {
            per_exit_task: vec![1.0, 0.6],
            per_exit_consistency: vec![0.4, 0.2],
            l2: 0.0,
            total: 0.0,
            retained_fraction: vec![1.0, 1.0],
        };
        assert!((b.recompute_total(0.5) - 0.95).abs() < 1e-15);
    }

    fn batch(tape: &mut Tape<f64>) -> (Vec<Vec<Var>>, Vec<Vec<Var>>) {
        let rows = [[2.0, 0.1, -1.0], [0.3, 1.5, 0.2], [-0.5, 0.0, 2.2]];
        let clean = (0..2)
            .map(|m| (0..3).map(|e| logits(tape, &rows[(m + e) % 3])).collect())
            .collect();
        let pert = (0..2)
            .map(|m| (0..3).map(|e| logits(tape, &rows[(m + 2 * e + 1) % 3])).collect())
            .collect();
        (clean, pert)
    }

    #[test]
    fn total_loss_modes() {
        for mode in [LossMode::Cet, LossMode::ExitWise, LossMode::AugmentOnly, LossMode::Distill] {
            let mut tape = Tape::<f64>::new();
            let (clean, pert) = batch(&mut tape);
            let l2 = tape.constant_scalar(0.125);
            let cfg = LossConfig {
                mode,
                lambda: 0.7,
                ..Default::default()
            };
            let inputs = LossInputs {
                clean: &clean,
                perturbed: Some(&pert),
                labels: &[0, 2],
                kappa: 0.5,
                l2,
            };
            let (total, b) = total_loss(&mut tape, &inputs, &cfg).unwrap();
            assert!((tape.item(total) - b.total).abs() < 1e-12, "{mode:?}");
            assert!((b.recompute_total(0.7) - b.total).abs() < 1e-15);
            match mode {
                LossMode::ExitWise | LossMode::AugmentOnly => {
                    assert!(b.per_exit_consistency.iter().all(|&c| c == 0.0))
                }
                LossMode::Distill => {
                    assert_eq!(b.per_exit_consistency[2], 0.0);
                    assert!(b.per_exit_consistency[0] > 0.0);
                }
                LossMode::Cet => {}
            }
        }
    }

    #[test]
    fn exit_wise_total_is_mean_task_plus_l2() {
        let mut tape = Tape::<f64>::new();
        let (clean, _) = batch(&mut tape);
        let l2 = tape.constant_scalar(0.25);
        let cfg = LossConfig {
            mode: LossMode::ExitWise,
            lambda: 123.0,
            ..Default::default()
        };
        let inputs = LossInputs {
            clean: &clean,
            perturbed: None,
            labels: &[1, 1],
            kappa: 0.5,
            l2,
        };
        let (_, b) = total_loss(&mut tape, &inputs, &cfg).unwrap();
        let mean_task = b.per_exit_task.iter().sum::<f64>() / 3.0;
        assert!((b.total - (mean_task + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn cet_without_perturbed_inputs_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let (clean, _) = batch(&mut tape);
        let l2 = tape.constant_scalar(0.0);
        let inputs = LossInputs {
            clean: &clean,
            perturbed: None,
            labels: &[0, 1],
            kappa: 0.5,
            l2,
        };
        assert!(total_loss(&mut tape, &inputs, &LossConfig::default()).is_err());
    }

    #[test]
    fn parse_rejects_unknown_names() {
        assert!(LossMode::parse("cet").is_ok());
        assert!(LossMode::parse("fixmatch").is_err());
        assert!(LabelSource::parse("teacher").is_ok());
        assert!(LabelSource::parse("oracle").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            kappa_max: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            tau: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
