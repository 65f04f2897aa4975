//! Central-difference gradient checking in f64.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::softmax;
use crate::model::{BlockSpec, ModelConfig, MultiExitNet};
use crate::objectives::{distillation_loss, total_loss, LossConfig, LossInputs};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tape::{NormMode, OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

/// Compare the tape gradient of `f` with central differences, for every
/// element of every named input.
///
/// `f` must build a scalar from the given input nodes; it is called once for
/// the analytic pass and twice per input element for the numeric pass.
/// `prepare` runs on each fresh tape before `f` (used to inject faults).
pub fn check_fn<F>(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    prepare: &dyn Fn(&mut Tape<f64>),
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        prepare(&mut tape);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(inputs.len());
    for (gi, (gname, t)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[gi]) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; t.len()],
        };
        let mut worst = (0.0f64, 0usize);
        for i in 0..t.len() {
            let orig = values[gi].data()[i];
            values[gi].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[gi].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(Error::NonFinite {
                    location: format!("{name}/{gname}[{i}]"),
                });
            }
            let e = relative_error(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        groups.push(GroupError {
            name: String::from(*gname),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        name: String::from(name),
        tolerance,
        groups,
    })
}

/// Check every parameter group of `net` against central differences of `loss`.
pub fn check_network<F>(
    name: &str,
    net: &MultiExitNet<f64>,
    step: f64,
    tolerance: f64,
    prepare: &dyn Fn(&mut Tape<f64>),
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&MultiExitNet<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut work = net.clone();
    let mut tape = Tape::new();
    prepare(&mut tape);
    let out = loss(&work, &mut tape)?;
    let grads = tape.backward(out)?;

    let eval = |n: &MultiExitNet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        prepare(&mut tape);
        let out = loss(n, &mut tape)?;
        Ok(tape.item(out))
    };

    let mut groups = Vec::with_capacity(net.params().len());
    for id in 0..net.params().len() {
        let n = net.params()[id].value.len();
        let pname = net.params()[id].name.clone();
        let mut worst = (0.0f64, 0usize);
        for i in 0..n {
            let orig = work.params()[id].value.data()[i];
            work.params_mut()[id].value.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.params_mut()[id].value.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.params_mut()[id].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.param(id).map_or(0.0, |g| g[i]);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("{name}/{pname}[{i}]"),
                });
            }
            let e = relative_error(analytic, numeric);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        groups.push(GroupError {
            name: pname,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        name: String::from(name),
        tolerance,
        groups,
    })
}

/// A negative control: scale the backward rule of one op kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub factor: f64,
}

fn uniform(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Scalarize `v` with fixed pseudo-random weights so that no direction of the
/// output is left unchecked.
fn project(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let mut r = stream(0x9e37, 0, tape.value(v).len() as u64, Purpose::Init);
    let w: Vec<f64> = (0..tape.value(v).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    tape.dot(v, &w)
}

/// Small three-block network used by the suite.
pub fn suite_model() -> ModelConfig {
    let block = |filters, dropout_rate| BlockSpec {
        filters,
        kernel: 4,
        pool: 4,
        dropout_rate,
    };
    ModelConfig {
        channels_in: 2,
        length_in: 40,
        num_classes: 3,
        blocks: vec![block(4, 0.0), block(6, 0.1), block(8, 0.0)],
        hidden_units: 8,
        l2_rate: 1e-4,
        seed: 11,
    }
}

/// Gradient checks for every differentiable op and a three-block network
/// trained with the full consistency objective.
pub fn run_suite(fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut r = stream(5, 0, 0, Purpose::Init);
    let (h, tol) = (DEFAULT_STEP, DEFAULT_TOLERANCE);
    let prepare = move |t: &mut Tape<f64>| {
        if let Some(f) = fault {
            t.inject_backward_fault(f.kind, f.factor);
        }
    };
    let mut reports = Vec::new();
    let x = uniform(&[3, 11], &mut r);
    let v = uniform(&[7], &mut r);

    reports.push(check_fn(
        "conv1d",
        &[("input", x.clone()), ("weight", uniform(&[4, 3, 4], &mut r)), ("bias", uniform(&[4], &mut r))],
        h,
        tol,
        &prepare,
        |t, a| {
            let y = t.conv1d(a[0], a[1], a[2])?;
            project(t, y)
        },
    )?);
    reports.push(check_fn("max_pool1d", &[("input", x.clone())], h, tol, &prepare, |t, a| {
        let y = t.max_pool1d(a[0], 4, 4)?;
        project(t, y)
    })?);
    reports.push(check_fn("global_avg_pool", &[("input", x.clone())], h, tol, &prepare, |t, a| {
        let y = t.global_avg_pool(a[0])?;
        project(t, y)
    })?);
    reports.push(check_fn(
        "dense",
        &[("input", v.clone()), ("weight", uniform(&[5, 7], &mut r)), ("bias", uniform(&[5], &mut r))],
        h,
        tol,
        &prepare,
        |t, a| {
            let y = t.dense(a[0], a[1], a[2])?;
            project(t, y)
        },
    )?);
    reports.push(check_fn(
        "prelu",
        &[("input", x.clone()), ("slope", uniform(&[3], &mut r))],
        h,
        tol,
        &prepare,
        |t, a| {
            let y = t.prelu(a[0], a[1])?;
            project(t, y)
        },
    )?);
    for (name, mode, channels) in [
        ("normalize_instance", NormMode::Instance, 3),
        ("normalize_layer", NormMode::Layer, 3),
    ] {
        reports.push(check_fn(
            name,
            &[
                ("input", x.clone()),
                ("gain", uniform(&[channels], &mut r)),
                ("shift", uniform(&[channels], &mut r)),
            ],
            h,
            tol,
            &prepare,
            |t, a| {
                let y = t.normalize(a[0], mode, a[1], a[2])?;
                project(t, y)
            },
        )?);
    }
    reports.push(check_fn("dropout", &[("input", x.clone())], h, tol, &prepare, |t, a| {
        let mut dr = stream(3, 0, 0, Purpose::DropoutClean);
        let y = t.dropout(a[0], 0.3, true, &mut dr)?;
        project(t, y)
    })?);
    reports.push(check_fn("softmax", &[("logits", v.clone())], h, tol, &prepare, |t, a| {
        let y = t.softmax(a[0])?;
        project(t, y)
    })?);
    let target = softmax(uniform(&[7], &mut r).data());
    reports.push(check_fn("cross_entropy", &[("logits", v.clone())], h, tol, &prepare, |t, a| {
        t.cross_entropy(a[0], &target)
    })?);
    // The teacher is a constant of the loss, so only the student is checked.
    let teacher = uniform(&[7], &mut r);
    reports.push(check_fn("distillation", &[("student", v.clone())], h, tol, &prepare, |t, a| {
        let z = t.leaf(&teacher);
        distillation_loss(t, a[0], z, 2.0)
    })?);
    reports.push(check_fn(
        "arithmetic",
        &[("a", v.clone()), ("b", uniform(&[7], &mut r))],
        h,
        tol,
        &prepare,
        |t, a| {
            let s = t.scale(a[0], 0.7);
            let c = t.lin_comb(&[(s, 1.5), (a[1], -0.25)])?;
            let d = t.add(c, a[1])?;
            let m = t.mean(&[d, a[0]])?;
            let q = t.sum_squares(m);
            let p = project(t, m)?;
            t.add(q, p)
        },
    )?);

    let net = MultiExitNet::<f64>::new(suite_model())?;
    let batch: Vec<(Tensor<f64>, Tensor<f64>, usize)> = (0..2)
        .map(|i| (uniform(&[2, 40], &mut r), uniform(&[2, 40], &mut r), i % 3))
        .collect();
    let loss_cfg = LossConfig::default();
    reports.push(check_network("network_3_block", &net, h, tol, &prepare, |n, t| {
        let mut clean = Vec::new();
        let mut perturbed = Vec::new();
        for (i, (x, xp, _)) in batch.iter().enumerate() {
            let mut dc = stream(1, 0, i as u64, Purpose::DropoutClean);
            clean.push(n.forward_all_exits(t, x, true, &mut dc)?);
            let mut dp = stream(1, 0, i as u64, Purpose::DropoutPerturbed);
            perturbed.push(n.forward_all_exits(t, xp, true, &mut dp)?);
        }
        let labels: Vec<usize> = batch.iter().map(|b| b.2).collect();
        let l2 = n.l2_penalty(t)?;
        let inputs = LossInputs {
            clean: &clean,
            perturbed: Some(&perturbed),
            labels: &labels,
            kappa: 0.0,
            l2,
        };
        Ok(total_loss(t, &inputs, &loss_cfg)?.0)
    })?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(None).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.groups);
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let fault = Fault {
            kind: OpKind::Conv1d,
            factor: 1.01,
        };
        let reports = run_suite(Some(fault)).unwrap();
        let conv = reports.iter().find(|r| r.name == "conv1d").unwrap();
        assert!(!conv.passed());
        assert!(reports.iter().find(|r| r.name == "dense").unwrap().passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
