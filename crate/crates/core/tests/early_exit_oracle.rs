use cetx_core::data::{generate_synthetic, SyntheticSpec};
use cetx_core::early_exit::{
    infer_early_exit, per_exit_metrics, profile_dataset, sweep_profiles, ExitPolicy, ExitProfile,
};
use cetx_core::metrics::Metrics;
use cetx_core::model::{ModelConfig, MultiExitNet};
use cetx_core::perturb::PerturbationConfig;
use cetx_core::tensor::Tensor;
use cetx_core::trainer::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained network whose exit heads are sharpened by different amounts, so
/// exit entropies spread over most of [0, 1].
fn sharpened_net(seed: u64) -> MultiExitNet<f32> {
    let mut cfg = ModelConfig::standard(2, 96, 4);
    cfg.seed = seed;
    let mut net = MultiExitNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        if p.name.ends_with(".out.weight") {
            let s: f32 = rng.random_range(1.0..40.0);
            p.value.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    net
}

/// Entropy in nats of a softmax, divided by ln K.
fn oracle_entropy(logits: &[f32]) -> (f64, usize) {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let h: f64 = e.iter().map(|v| v / s).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    (h / (z.len() as f64).ln(), best)
}

/// Exhaustive rule: run every exit, stop at the first whose entropy is below φ.
fn oracle_exit(all: &[Vec<f32>], phi: f64) -> (usize, usize, Vec<f64>) {
    let readouts: Vec<(f64, usize)> = all.iter().map(|l| oracle_entropy(l)).collect();
    let e = all.len();
    let chosen = (0..e - 1).find(|&i| readouts[i].0 < phi).unwrap_or(e - 1);
    (chosen + 1, readouts[chosen].1, readouts.iter().map(|r| r.0).collect())
}

#[test]
fn incremental_inference_matches_exhaustive_oracle_on_1000_inputs() {
    let nets: Vec<MultiExitNet<f32>> = (0..4).map(sharpened_net).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut exits_seen = [0usize; 5];
    let mut cases = 0;
    while cases < 1000 {
        let net = &nets[cases % nets.len()];
        let scale: f32 = rng.random_range(0.1..5.0);
        let x = Tensor::new(vec![2, 96], (0..192).map(|_| rng.random_range(-1.0..1.0f32) * scale).collect()).unwrap();
        let all = net.predict_logits(&x).unwrap();
        let entropies: Vec<f64> = all.iter().map(|l| oracle_entropy(l).0).collect();
        // Half the thresholds fall between two observed entropies.
        let phi = if rng.random_bool(0.5) {
            rng.random_range(0.0..=1.0)
        } else {
            let (a, b) = (entropies[rng.random_range(0..5)], entropies[rng.random_range(0..5)]);
            (a + b) / 2.0
        };
        if entropies.iter().any(|h| (h - phi).abs() < 1e-9) {
            continue;
        }
        let (want_exit, want_label, want_h) = oracle_exit(&all, phi);
        let got = infer_early_exit(net, &x, ExitPolicy::new(phi).unwrap()).unwrap();
        assert_eq!(got.chosen_exit, want_exit, "case {cases} phi {phi} entropies {entropies:?}");
        assert_eq!(got.predicted_label, want_label);
        assert_eq!(got.entropies.len(), want_exit);
        for (a, b) in got.entropies.iter().zip(&want_h) {
            assert!((a - b).abs() < 1e-9);
        }
        exits_seen[want_exit - 1] += 1;
        cases += 1;
    }
    assert!(exits_seen.iter().all(|&n| n > 0), "every exit should be exercised: {exits_seen:?}");
}

fn trained_case() -> (MultiExitNet<f32>, cetx_core::data::WindowedDataset) {
    let ds = generate_synthetic(&SyntheticSpec {
        length: 96,
        channels: 2,
        num_classes: 4,
        per_class: 30,
        groups: 3,
        noise_std: 0.3,
        seed: 5,
    })
    .unwrap();
    let model = ModelConfig::standard(2, 96, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        learning_rate: 3e-3,
        perturb: PerturbationConfig {
            mask_length: 24,
            ..Default::default()
        },
        ..Default::default()
    };
    let (net, _) = train(&ds, None, &model, &cfg).unwrap();
    (net, ds)
}

#[test]
fn zero_threshold_equals_last_exit_evaluation() {
    let (net, ds) = trained_case();
    let profiles = profile_dataset(&net, &ds).unwrap();
    let labels = ds.label_indices();
    let curve = sweep_profiles(&profiles, &labels, 4, &[0.0]).unwrap();
    let row = &curve[0];
    assert_eq!(row.fractions, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(row.average_exit, 5.0);
    let last: Vec<usize> = (0..ds.len())
        .map(|i| {
            let logits = net.predict_logits(&ds.example(i)).unwrap();
            oracle_entropy(&logits[4]).1
        })
        .collect();
    let plain = Metrics::from_predictions(4, &labels, &last).unwrap();
    assert_eq!(row.metrics.accuracy.to_bits(), plain.accuracy.to_bits());
    assert_eq!(row.metrics.macro_f1.to_bits(), plain.macro_f1.to_bits());
    assert_eq!(row.metrics.kappa.to_bits(), plain.kappa.to_bits());
    assert_eq!(per_exit_metrics(&profiles, &labels, 4).unwrap()[4], plain);
}

#[test]
fn exits_move_earlier_as_threshold_rises() {
    let (net, ds) = trained_case();
    let profiles = profile_dataset(&net, &ds).unwrap();
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for p in &profiles {
        let chosen: Vec<usize> = grid.iter().map(|&phi| p.decide(ExitPolicy::new(phi).unwrap()).chosen_exit).collect();
        assert!(chosen.windows(2).all(|w| w[0] >= w[1]), "{chosen:?}");
        assert_eq!(chosen[0], 5);
    }
    let curve = sweep_profiles(&profiles, &ds.label_indices(), 4, &grid).unwrap();
    assert!(curve.windows(2).all(|w| w[0].average_exit >= w[1].average_exit));
    for c in &curve {
        assert!((c.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn profile_decision_agrees_with_incremental_run() {
    let (net, ds) = trained_case();
    for i in (0..ds.len()).step_by(7) {
        let x = ds.example(i);
        let p = ExitProfile::compute(&net, &x).unwrap();
        for phi in [0.05, 0.3, 0.6, 0.9, 1.0] {
            let policy = ExitPolicy::new(phi).unwrap();
            assert_eq!(p.decide(policy), infer_early_exit(&net, &x, policy).unwrap());
        }
    }
}
