//! Windowed datasets, group splits, synthetic generation and channel
//! normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    /// Empty when the source carries no names.
    pub class_names: Vec<String>,
    pub channels: usize,
    pub window_length: usize,
    pub sample_rate: Option<f64>,
}

impl DatasetMeta {
    pub fn new(num_classes: usize, channels: usize, window_length: usize) -> Self {
        Self {
            num_classes,
            class_names: Vec::new(),
            channels,
            window_length,
            sample_rate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("num_classes", format!("{} must be at least 2", self.num_classes)));
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(invalid("num_classes", format!("{} exceeds the u16 label range", self.num_classes)));
        }
        if self.channels == 0 || self.window_length == 0 {
            return Err(invalid(
                "window",
                format!("shape ({}, {}) has a zero extent", self.channels, self.window_length),
            ));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(invalid(
                "class_names",
                format!("{} names for {} classes", self.class_names.len(), self.num_classes),
            ));
        }
        Ok(())
    }

    fn window_size(&self) -> usize {
        self.channels * self.window_length
    }
}

/// `N` windows of shape `(C, L)` stored contiguously, with a label and a
/// group id per window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    windows: Vec<f32>,
    labels: Vec<u16>,
    groups: Vec<u16>,
    meta: DatasetMeta,
}

impl WindowedDataset {
    pub fn new(windows: Vec<f32>, labels: Vec<u16>, groups: Vec<u16>, meta: DatasetMeta) -> Result<Self> {
        meta.validate()?;
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if groups.len() != n {
            return Err(invalid("groups", format!("{} groups for {n} labels", groups.len())));
        }
        if windows.len() != n * meta.window_size() {
            return Err(invalid(
                "windows",
                format!(
                    "{} values, expected {n} x {} x {}",
                    windows.len(),
                    meta.channels,
                    meta.window_length
                ),
            ));
        }
        if let Some(i) = labels.iter().position(|&y| y as usize >= meta.num_classes) {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: labels[i] as usize,
                num_classes: meta.num_classes,
            });
        }
        Ok(Self {
            windows,
            labels,
            groups,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn channels(&self) -> usize {
        self.meta.channels
    }

    pub fn window_length(&self) -> usize {
        self.meta.window_length
    }

    pub fn windows(&self) -> &[f32] {
        &self.windows
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn groups(&self) -> &[u16] {
        &self.groups
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let s = self.meta.window_size();
        &self.windows[i * s..(i + 1) * s]
    }

    /// Window `i` as a `[C, L]` tensor.
    pub fn example(&self, i: usize) -> Tensor<f32> {
        Tensor::new(
            vec![self.meta.channels, self.meta.window_length],
            self.window(i).to_vec(),
        )
        .expect("window size matches meta")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize).collect()
    }

    /// Sorted distinct group ids.
    pub fn distinct_groups(&self) -> Vec<u16> {
        let mut g = self.groups.clone();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut windows = Vec::with_capacity(indices.len() * self.meta.window_size());
        for &i in indices {
            windows.extend_from_slice(self.window(i));
        }
        Self::new(
            windows,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.groups[i]).collect(),
            self.meta.clone(),
        )
    }

    /// Same labels and groups with every window passed through `f`.
    pub fn map_windows(&self, mut f: impl FnMut(usize, &mut [f32])) -> Self {
        let mut out = self.clone();
        let s = self.meta.window_size();
        for (i, w) in out.windows.chunks_mut(s).enumerate() {
            f(i, w);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Partition by group id: `round(fraction · G)` shuffled groups (at least one
/// on each side) go to the training side. Example order is preserved.
pub fn group_split(ds: &WindowedDataset, spec: &SplitSpec) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(invalid(
            "split.train_fraction",
            format!("{} must lie strictly between 0 and 1", spec.train_fraction),
        ));
    }
    let mut groups = ds.distinct_groups();
    if groups.len() < 2 {
        return Err(invalid("groups", "a split needs at least two distinct groups"));
    }
    let g = groups.len();
    let n_train = libm::round(spec.train_fraction * g as f64).clamp(1.0, (g - 1) as f64) as usize;
    groups.shuffle(&mut stream(spec.seed, 0, 0, Purpose::Split));
    let mut is_train = vec![false; u16::MAX as usize + 1];
    for &id in &groups[..n_train] {
        is_train[id as usize] = true;
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_train[ds.groups[i] as usize]);
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub per_class: usize,
    pub groups: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            channels: 3,
            length: 400,
            per_class: 100,
            groups: 10,
            seed: 0,
            noise_std: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        DatasetMeta::new(self.num_classes, self.channels, self.length).validate()?;
        if self.per_class == 0 {
            return Err(invalid("synthetic.per_class", "must be at least 1"));
        }
        if self.groups == 0 || self.groups > u16::MAX as usize + 1 {
            return Err(invalid("synthetic.groups", format!("{} outside 1..=65536", self.groups)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(invalid("synthetic.noise_std", format!("{} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Class fundamentals are spaced geometrically over this band, in cycles per
/// sample. The band is narrow next to the per-group cadence spread, so the
/// fundamental alone is a weak cue and the waveform shape carries the class.
const LOW_FREQ: f64 = 0.035;
const HIGH_FREQ: f64 = 0.05;
const HARMONICS: usize = 4;
const CADENCE: core::ops::Range<f64> = 0.8..1.2;

/// Sum-of-harmonics classes. Each class owns a fundamental and, per channel,
/// harmonic amplitudes and phases; each group applies its own cadence (a
/// frequency factor), per-channel gain, offset and time shift; examples of
/// one class and group differ only by noise. Examples are interleaved by
/// class and groups are assigned round-robin within each class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<WindowedDataset> {
    spec.validate()?;
    let (k, c, l) = (spec.num_classes, spec.channels, spec.length);
    let tau = core::f64::consts::TAU;

    let mut trng = stream(spec.seed, 1, 0, Purpose::Synthetic);
    // (amplitude, phase) of harmonics 1..=HARMONICS, per class and channel
    let templates: Vec<[(f64, f64); HARMONICS]> = (0..k * c)
        .map(|_| {
            core::array::from_fn(|h| {
                let amp = if h == 0 { 1.0 } else { trng.random_range(0.0..0.8) };
                (amp, trng.random_range(0.0..tau))
            })
        })
        .collect();
    let offset_dist = Normal::new(0.0, 0.3).expect("valid");
    // (gain, offset, time shift in radians of the fundamental) per channel
    let group_fx: Vec<(Vec<(f64, f64, f64)>, f64)> = (0..spec.groups)
        .map(|g| {
            let mut r = stream(spec.seed, 2, g as u64, Purpose::Synthetic);
            let per_channel = (0..c)
                .map(|_| {
                    (
                        r.random_range(0.7..1.3),
                        offset_dist.sample(&mut r),
                        r.random_range(-0.5..0.5),
                    )
                })
                .collect();
            (per_channel, r.random_range(CADENCE))
        })
        .collect();

    let n = k * spec.per_class;
    let noise = Normal::new(0.0, spec.noise_std).expect("validated");
    let mut windows = Vec::with_capacity(n * c * l);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let (class, j) = (i % k, i / k);
        let g = j % spec.groups;
        let (fx, cadence) = &group_fx[g];
        let mut r = stream(spec.seed, 0, i as u64, Purpose::Synthetic);
        let ratio = libm::pow(HIGH_FREQ / LOW_FREQ, class as f64 / (k - 1) as f64);
        let freq = LOW_FREQ * ratio * cadence;
        for ch in 0..c {
            let harmonics = &templates[class * c + ch];
            let (gain, offset, shift) = fx[ch];
            for t in 0..l {
                let u = tau * freq * t as f64 + shift;
                let v: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, &(a, p))| a * libm::sin((h + 1) as f64 * u + p))
                    .sum();
                let e = if spec.noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                windows.push((gain * v + offset + e) as f32);
            }
        }
        labels.push(class as u16);
        groups.push(g as u16);
    }
    WindowedDataset::new(windows, labels, groups, DatasetMeta::new(k, c, l))
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels with a smaller spread are only centred.
const MIN_STD: f64 = 1e-12;

impl ChannelStats {
    pub fn from_dataset(ds: &WindowedDataset) -> Self {
        let (c, l) = (ds.channels(), ds.window_length());
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..ds.len() {
            for (ch, row) in ds.window(i).chunks(l).enumerate() {
                sum[ch] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (ds.len() * l) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for i in 0..ds.len() {
            for (ch, row) in ds.window(i).chunks(l).enumerate() {
                sq[ch] += row.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| libm::sqrt(s / count)).collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// z-score every channel of `ds` with these statistics.
    pub fn apply(&self, ds: &WindowedDataset) -> Result<WindowedDataset> {
        if self.mean.len() != ds.channels() || self.std.len() != ds.channels() {
            return Err(invalid(
                "normalization",
                format!("statistics for {} channels, data has {}", self.mean.len(), ds.channels()),
            ));
        }
        let l = ds.window_length();
        Ok(ds.map_windows(|_, w| {
            for (ch, row) in w.chunks_mut(l).enumerate() {
                let s = if self.std[ch] > MIN_STD { self.std[ch] } else { 1.0 };
                for v in row {
                    *v = ((*v as f64 - self.mean[ch]) / s) as f32;
                }
            }
        }))
    }
}

/// Normalize both splits with statistics taken from `train` alone.
pub fn channel_normalize(
    train: &WindowedDataset,
    test: &WindowedDataset,
) -> Result<(WindowedDataset, WindowedDataset, ChannelStats)> {
    let stats = ChannelStats::from_dataset(train);
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Additive Gaussian corruption, example `i` drawing from its own stream.
pub fn corrupt_additive(ds: &WindowedDataset, sigma: f64, seed: u64) -> Result<WindowedDataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("test_noise", format!("{sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let dist = Normal::new(0.0, sigma).expect("validated");
    Ok(ds.map_windows(|i, w| {
        let mut r = stream(seed, 0, i as u64, Purpose::Corruption);
        for v in w {
            *v += dist.sample(&mut r) as f32;
        }
    }))
}
