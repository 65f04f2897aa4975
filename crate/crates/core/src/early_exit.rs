//! Entropy-gated early-exit inference and threshold sweeps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::WindowedDataset;
use crate::error::{invalid, Result};
use crate::kernels::{argmax, softmax};
use crate::metrics::Metrics;
use crate::model::{MultiExitNet, NoRng};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// `H(p) / ln K` with `0·ln 0 = 0`.
pub fn normalized_entropy(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(invalid("probs", format!("entropy needs K >= 2, got {}", probs.len())));
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * libm::log(p))
        .sum();
    Ok(h / libm::log(probs.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitPolicy {
    phi: f64,
}

impl ExitPolicy {
    pub fn new(phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(invalid("phi", format!("{phi} outside [0, 1]")));
        }
        Ok(Self { phi })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Strict test: leave when the entropy is below the threshold.
    pub fn fires(&self, entropy: f64) -> bool {
        entropy < self.phi
    }
}

/// What one exit head says about one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitReadout {
    pub entropy: f64,
    pub predicted: usize,
    /// Max softmax probability.
    pub confidence: f64,
}

impl ExitReadout {
    pub fn from_logits<T: Scalar>(logits: &[T]) -> Result<Self> {
        let wide: Vec<f64> = logits.iter().map(|v| v.widen()).collect();
        let p = softmax(&wide);
        let predicted = argmax(&p);
        Ok(Self {
            entropy: normalized_entropy(&p)?,
            predicted,
            confidence: p[predicted],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    /// Entropies of exits `1..=chosen_exit`.
    pub entropies: Vec<f64>,
    /// 1-based.
    pub chosen_exit: usize,
    pub predicted_label: usize,
    pub confidence: f64,
}

/// Walk the exits in order on one tape, computing each block once, and stop
/// at the first exit whose entropy is below `phi`.
pub fn infer_early_exit<T: Scalar>(net: &MultiExitNet<T>, x: &Tensor<T>, policy: ExitPolicy) -> Result<InferenceTrace> {
    infer_early_exit_on(net, &mut Tape::new(), x, policy)
}

/// As [`infer_early_exit`], recording onto a caller-supplied tape.
pub fn infer_early_exit_on<T: Scalar>(
    net: &MultiExitNet<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    policy: ExitPolicy,
) -> Result<InferenceTrace> {
    let exits = net.num_exits();
    let mut h = net.input_stage(tape, x)?;
    let mut entropies = Vec::with_capacity(exits);
    for i in 0..exits {
        h = net.block(tape, i, h, false, &mut NoRng)?;
        let logits = net.head(tape, i, h)?;
        let r = ExitReadout::from_logits(tape.value(logits))?;
        entropies.push(r.entropy);
        if policy.fires(r.entropy) || i + 1 == exits {
            return Ok(InferenceTrace {
                entropies,
                chosen_exit: i + 1,
                predicted_label: r.predicted,
                confidence: r.confidence,
            });
        }
    }
    unreachable!("a validated network has at least one exit")
}

/// Readouts of every exit for one input, so that many thresholds can be
/// applied without re-running the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitProfile {
    pub exits: Vec<ExitReadout>,
}

impl ExitProfile {
    pub fn compute<T: Scalar>(net: &MultiExitNet<T>, x: &Tensor<T>) -> Result<Self> {
        let mut tape = Tape::new();
        let outs = net.forward_all_exits(&mut tape, x, false, &mut NoRng)?;
        let exits = outs
            .iter()
            .map(|&v| ExitReadout::from_logits(tape.value(v)))
            .collect::<Result<_>>()?;
        Ok(Self { exits })
    }

    /// The trace `infer_early_exit` would produce under `policy`.
    pub fn decide(&self, policy: ExitPolicy) -> InferenceTrace {
        let last = self.exits.len() - 1;
        let stop = self.exits[..last]
            .iter()
            .position(|r| policy.fires(r.entropy))
            .unwrap_or(last);
        let r = self.exits[stop];
        InferenceTrace {
            entropies: self.exits[..=stop].iter().map(|r| r.entropy).collect(),
            chosen_exit: stop + 1,
            predicted_label: r.predicted,
            confidence: r.confidence,
        }
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }
}

pub fn profile_dataset<T: Scalar>(net: &MultiExitNet<T>, ds: &WindowedDataset) -> Result<Vec<ExitProfile>> {
    (0..ds.len())
        .map(|i| ExitProfile::compute(net, &ds.example(i).cast()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitStats {
    /// Share of examples leaving at each exit.
    pub fractions: Vec<f64>,
    /// Mean 1-based chosen exit.
    pub average_exit: f64,
    /// `[class][exit]` mean confidence of the examples of that true class
    /// that left at that exit; `None` when there were none.
    pub class_confidence: Vec<Vec<Option<f64>>>,
}

impl ExitStats {
    pub fn from_traces(traces: &[InferenceTrace], labels: &[usize], num_exits: usize, num_classes: usize) -> Result<Self> {
        if traces.is_empty() || traces.len() != labels.len() {
            return Err(invalid(
                "traces",
                format!("{} traces for {} labels", traces.len(), labels.len()),
            ));
        }
        let n = traces.len() as f64;
        let mut counts = vec![0usize; num_exits];
        let mut conf_sum = vec![vec![0.0f64; num_exits]; num_classes];
        let mut conf_n = vec![vec![0usize; num_exits]; num_classes];
        let mut exit_sum = 0usize;
        for (t, &y) in traces.iter().zip(labels) {
            let e = t.chosen_exit - 1;
            counts[e] += 1;
            exit_sum += t.chosen_exit;
            conf_sum[y][e] += t.confidence;
            conf_n[y][e] += 1;
        }
        let class_confidence = conf_sum
            .iter()
            .zip(&conf_n)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                    .collect()
            })
            .collect();
        Ok(Self {
            fractions: counts.iter().map(|&c| c as f64 / n).collect(),
            average_exit: exit_sum as f64 / n,
            class_confidence,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub stats: ExitStats,
    pub traces: Vec<InferenceTrace>,
    pub predictions: Vec<usize>,
    pub metrics: Metrics,
}

/// Early-exit inference over a dataset under one threshold.
pub fn batch_stats<T: Scalar>(net: &MultiExitNet<T>, ds: &WindowedDataset, policy: ExitPolicy) -> Result<BatchResult> {
    let traces = (0..ds.len())
        .map(|i| infer_early_exit(net, &ds.example(i).cast(), policy))
        .collect::<Result<Vec<_>>>()?;
    summarize(traces, &ds.label_indices(), net.num_exits(), ds.num_classes())
}

/// Statistics and metrics of a set of traces against true labels.
pub fn summarize(traces: Vec<InferenceTrace>, labels: &[usize], num_exits: usize, num_classes: usize) -> Result<BatchResult> {
    let stats = ExitStats::from_traces(&traces, labels, num_exits, num_classes)?;
    let predictions: Vec<usize> = traces.iter().map(|t| t.predicted_label).collect();
    let metrics = Metrics::from_predictions(num_classes, labels, &predictions)?;
    Ok(BatchResult {
        stats,
        traces,
        predictions,
        metrics,
    })
}

/// One row of a threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub phi: f64,
    pub metrics: Metrics,
    pub average_exit: f64,
    pub fractions: Vec<f64>,
    pub class_confidence: Vec<Vec<Option<f64>>>,
}

/// Sorted, de-duplicated copy of a threshold grid, validated to `[0, 1]`.
pub fn normalize_grid(grid: &[f64]) -> Result<Vec<f64>> {
    for &phi in grid {
        ExitPolicy::new(phi)?;
    }
    if grid.is_empty() {
        return Err(invalid("phi", "the threshold grid is empty"));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// Apply every threshold of `grid` to precomputed profiles. Rows come back in
/// ascending φ.
pub fn sweep_profiles(
    profiles: &[ExitProfile],
    labels: &[usize],
    num_classes: usize,
    grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    let exits = profiles.first().map_or(0, ExitProfile::num_exits);
    normalize_grid(grid)?
        .into_iter()
        .map(|phi| {
            let policy = ExitPolicy::new(phi)?;
            let traces = profiles.iter().map(|p| p.decide(policy)).collect();
            let r = summarize(traces, labels, exits, num_classes)?;
            Ok(CurvePoint {
                phi,
                metrics: r.metrics,
                average_exit: r.stats.average_exit,
                fractions: r.stats.fractions,
                class_confidence: r.stats.class_confidence,
            })
        })
        .collect()
}

pub fn sweep_thresholds<T: Scalar>(net: &MultiExitNet<T>, ds: &WindowedDataset, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    let profiles = profile_dataset(net, ds)?;
    sweep_profiles(&profiles, &ds.label_indices(), ds.num_classes(), grid)
}

/// Plain metrics of each exit taken on its own.
pub fn per_exit_metrics(profiles: &[ExitProfile], labels: &[usize], num_classes: usize) -> Result<Vec<Metrics>> {
    let exits = profiles.first().map_or(0, ExitProfile::num_exits);
    (0..exits)
        .map(|e| {
            let pred: Vec<usize> = profiles.iter().map(|p| p.exits[e].predicted).collect();
            Metrics::from_predictions(num_classes, labels, &pred)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tape::OpKind;

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((normalized_entropy(&[0.25; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(normalized_entropy(&[1.0]).is_err());
    }

    #[test]
    fn policy_range() {
        assert!(ExitPolicy::new(-0.1).is_err());
        assert!(ExitPolicy::new(1.1).is_err());
        assert!(ExitPolicy::new(f64::NAN).is_err());
        assert!(ExitPolicy::new(1.0).unwrap().fires(0.999));
        assert!(!ExitPolicy::new(1.0).unwrap().fires(1.0));
        assert!(!ExitPolicy::new(0.0).unwrap().fires(0.0));
    }

    fn net() -> MultiExitNet<f32> {
        MultiExitNet::new(ModelConfig::standard(2, 32, 3)).unwrap()
    }

    fn input(seed: f32) -> Tensor<f32> {
        let data = (0..64).map(|i| libm::sinf(i as f32 * 0.37 + seed) * (1.0 + seed)).collect();
        Tensor::new(vec![2, 32], data).unwrap()
    }

    #[test]
    fn zero_threshold_uses_last_exit() {
        let n = net();
        let t = infer_early_exit(&n, &input(0.3), ExitPolicy::new(0.0).unwrap()).unwrap();
        assert_eq!(t.chosen_exit, 5);
        assert_eq!(t.entropies.len(), 5);
    }

    #[test]
    fn unit_threshold_leaves_at_first_exit() {
        let n = net();
        let t = infer_early_exit(&n, &input(0.3), ExitPolicy::new(1.0).unwrap()).unwrap();
        assert!(t.entropies[0] < 1.0);
        assert_eq!(t.chosen_exit, 1);
    }

    #[test]
    fn incremental_matches_profile() {
        let n = net();
        for s in 0..5 {
            let x = input(s as f32 * 0.7);
            let p = ExitProfile::compute(&n, &x).unwrap();
            for phi in [0.0, 0.5, 0.9, 0.95, 0.99, 1.0] {
                let pol = ExitPolicy::new(phi).unwrap();
                assert_eq!(infer_early_exit(&n, &x, pol).unwrap(), p.decide(pol));
            }
        }
    }

    #[test]
    fn trunk_is_not_repeated() {
        let n = net();
        let x = input(1.0);
        let p = ExitProfile::compute(&n, &x).unwrap();
        let phi = (p.exits[2].entropy + 1e-9).min(1.0);
        let mut tape = Tape::new();
        let t = infer_early_exit_on(&n, &mut tape, &x, ExitPolicy::new(phi).unwrap()).unwrap();
        let mut reference = Tape::new();
        n.forward_until_exit(&mut reference, &x, t.chosen_exit).unwrap();
        assert_eq!(tape.op_count(OpKind::Conv1d), reference.op_count(OpKind::Conv1d));
    }

    #[test]
    fn stats_arithmetic() {
        let tr = |e: usize| InferenceTrace {
            entropies: vec![0.0; e],
            chosen_exit: e,
            predicted_label: 0,
            confidence: 0.5,
        };
        let s = ExitStats::from_traces(&[tr(1), tr(3), tr(1), tr(3)], &[0, 0, 1, 1], 5, 2).unwrap();
        assert_eq!(s.average_exit, 2.0);
        assert_eq!(s.fractions, vec![0.5, 0.0, 0.5, 0.0, 0.0]);
        assert_eq!(s.class_confidence[0][0], Some(0.5));
        assert_eq!(s.class_confidence[0][1], None);
    }

    #[test]
    fn grid_sorted_and_checked() {
        assert_eq!(normalize_grid(&[0.5, 0.0, 0.5, 1.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(normalize_grid(&[]).is_err());
        assert!(normalize_grid(&[2.0]).is_err());
    }
}
