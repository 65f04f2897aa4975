//! Label-preserving input perturbations for consistency training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to warp speeds so the warped time axis stays strictly increasing.
const MIN_SPEED: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbKind {
    Additive,
    Multiplicative,
    Warp,
    Mask,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::Additive,
        PerturbKind::Multiplicative,
        PerturbKind::Warp,
        PerturbKind::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Additive => "additive",
            PerturbKind::Multiplicative => "multiplicative",
            PerturbKind::Warp => "warp",
            PerturbKind::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub additive_sigma: f64,
    pub multiplicative_sigma: f64,
    pub warp_sigma: f64,
    pub warp_knots: usize,
    pub mask_length: usize,
    pub enabled: Vec<PerturbKind>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            additive_sigma: 0.2,
            multiplicative_sigma: 0.2,
            warp_sigma: 0.3,
            warp_knots: 4,
            mask_length: 100,
            enabled: PerturbKind::ALL.to_vec(),
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self, window_length: usize) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(invalid("perturb.enabled", "at least one perturbation is required"));
        }
        for (field, v) in [
            ("perturb.additive_sigma", self.additive_sigma),
            ("perturb.multiplicative_sigma", self.multiplicative_sigma),
            ("perturb.warp_sigma", self.warp_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(field, format!("{v} is not a non-negative number")));
            }
        }
        if self.warp_knots < 2 {
            return Err(invalid("perturb.warp_knots", "need at least 2 knots"));
        }
        if self.enabled.contains(&PerturbKind::Mask)
            && (self.mask_length == 0 || self.mask_length >= window_length)
        {
            return Err(invalid(
                "perturb.mask_length",
                format!("{} must be in 1..{window_length}", self.mask_length),
            ));
        }
        Ok(())
    }
}

fn normal(mean: f64, sigma: f64) -> Normal<f64> {
    Normal::new(mean, sigma).expect("sigma is finite and non-negative")
}

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    (x.shape()[0], x.shape()[1])
}

/// `x + N(0, sigma)` element-wise.
pub fn additive_noise<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, sigma: f64, rng: &mut R) -> Tensor<T> {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let d = normal(0.0, sigma);
    for v in out.data_mut() {
        *v += T::lit(d.sample(rng));
    }
    out
}

/// Scale each channel by its own draw from `N(1, sigma)`.
pub fn multiplicative_scale<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    sigma: f64,
    rng: &mut R,
) -> Tensor<T> {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let d = normal(1.0, sigma);
    let (c, _) = dims(x);
    for ch in 0..c {
        let s = T::lit(d.sample(rng));
        out.row_mut(ch).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Natural cubic spline through `(knot_x[j], knot_y[j])`, evaluated at `0..len`.
fn natural_spline(knot_x: &[f64], knot_y: &[f64], len: usize) -> Vec<f64> {
    let n = knot_x.len();
    let h: Vec<f64> = knot_x.windows(2).map(|w| w[1] - w[0]).collect();
    // second derivatives; zero at both ends
    let mut m = vec![0.0; n];
    if n > 2 {
        let inner = n - 2;
        let mut diag = vec![0.0; inner];
        let mut rhs = vec![0.0; inner];
        for i in 0..inner {
            let j = i + 1;
            diag[i] = 2.0 * (h[j - 1] + h[j]);
            rhs[i] = 6.0 * ((knot_y[j + 1] - knot_y[j]) / h[j] - (knot_y[j] - knot_y[j - 1]) / h[j - 1]);
        }
        // Thomas algorithm; off-diagonals are h[1..n-2]
        for i in 1..inner {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (0..inner).rev() {
            let upper = if i + 1 < inner { h[i + 1] * m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
    }
    let mut seg = 0;
    (0..len)
        .map(|t| {
            let t = t as f64;
            while seg + 2 < n && t > knot_x[seg + 1] {
                seg += 1;
            }
            let (x0, x1) = (knot_x[seg], knot_x[seg + 1]);
            let hh = x1 - x0;
            let a = (x1 - t) / hh;
            let b = (t - x0) / hh;
            let (y0, y1) = (knot_y[seg], knot_y[seg + 1]);
            let linear = y0 + (y1 - y0) * b;
            if m[seg] == 0.0 && m[seg + 1] == 0.0 {
                linear
            } else {
                linear + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hh * hh / 6.0
            }
        })
        .collect()
}

/// Warped sample positions for a length-`len` channel: strictly increasing,
/// starting at 0 and ending at `len - 1`.
pub fn warp_positions<R: Rng + ?Sized>(len: usize, sigma: f64, knots: usize, rng: &mut R) -> Vec<f64> {
    if len < 2 {
        return vec![0.0; len];
    }
    let knots = knots.max(2);
    let span = (len - 1) as f64;
    let knot_x: Vec<f64> = (0..knots).map(|j| span * j as f64 / (knots - 1) as f64).collect();
    let knot_y: Vec<f64> = if sigma == 0.0 {
        vec![1.0; knots]
    } else {
        let d = normal(1.0, sigma);
        (0..knots).map(|_| d.sample(rng).max(MIN_SPEED)).collect()
    };
    let speed = natural_spline(&knot_x, &knot_y, len);
    let mut cum = Vec::with_capacity(len);
    let mut acc = 0.0;
    for (i, s) in speed.iter().enumerate() {
        if i > 0 {
            acc += s.max(MIN_SPEED);
        }
        cum.push(acc);
    }
    let scale = span / acc;
    let mut pos: Vec<f64> = cum.into_iter().map(|c| c * scale).collect();
    pos[len - 1] = span;
    pos
}

fn resample<T: Scalar>(row: &[T], pos: &[f64]) -> Vec<T> {
    let last = row.len() - 1;
    pos.iter()
        .map(|&p| {
            let i = (libm::floor(p) as usize).min(last);
            let j = (i + 1).min(last);
            let f = p - i as f64;
            let (a, b) = (row[i].widen(), row[j].widen());
            T::lit(a + (b - a) * f)
        })
        .collect()
}

/// Smooth random time warp, drawn independently per channel.
pub fn time_warp<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    sigma: f64,
    knots: usize,
    rng: &mut R,
) -> Tensor<T> {
    let mut out = x.clone();
    let (c, l) = dims(x);
    for ch in 0..c {
        let pos = warp_positions(l, sigma, knots, rng);
        let warped = resample(x.row(ch), &pos);
        out.row_mut(ch).copy_from_slice(&warped);
    }
    out
}

/// Zero one contiguous segment of `mask_length` steps, shared by all channels.
pub fn mask_segment<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    mask_length: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (c, l) = dims(x);
    if mask_length == 0 || mask_length >= l {
        return Err(invalid(
            "mask_length",
            format!("{mask_length} must be in 1..{l}"),
        ));
    }
    let start = rng.random_range(0..=l - mask_length);
    let mut out = x.clone();
    for ch in 0..c {
        out.row_mut(ch)[start..start + mask_length].fill(T::zero());
    }
    Ok(out)
}

pub fn apply<T: Scalar, R: Rng + ?Sized>(
    kind: PerturbKind,
    x: &Tensor<T>,
    config: &PerturbationConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    Ok(match kind {
        PerturbKind::Additive => additive_noise(x, config.additive_sigma, rng),
        PerturbKind::Multiplicative => multiplicative_scale(x, config.multiplicative_sigma, rng),
        PerturbKind::Warp => time_warp(x, config.warp_sigma, config.warp_knots, rng),
        PerturbKind::Mask => mask_segment(x, config.mask_length, rng)?,
    })
}

/// Pick one enabled perturbation uniformly and apply it.
pub fn perturb_example<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    config: &PerturbationConfig,
    rng: &mut R,
) -> Result<(PerturbKind, Tensor<T>)> {
    if config.enabled.is_empty() {
        return Err(invalid("perturb.enabled", "at least one perturbation is required"));
    }
    let kind = config.enabled[rng.random_range(0..config.enabled.len())];
    Ok((kind, apply(kind, x, config, rng)?))
}

/// Perturbed partner for each example; example `indices[i]` draws from its
/// own `(seed, epoch, index)` stream.
pub fn random_perturb<T: Scalar>(
    batch: &[Tensor<T>],
    indices: &[usize],
    config: &PerturbationConfig,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Tensor<T>>> {
    batch
        .iter()
        .zip(indices)
        .map(|(x, &i)| {
            let mut r = rng::stream(seed, epoch, i as u64, Purpose::Perturb);
            perturb_example(x, config, &mut r).map(|(_, t)| t)
        })
        .collect()
}
