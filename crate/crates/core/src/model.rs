//! The multi-exit 1-D CNN: an instance-normalized input followed by
//! conv blocks, with a classification exit after every block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{self, Purpose};
use crate::tape::{Grads, NormMode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dropout_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExitHeadSpec {
    pub hidden_units: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels_in: usize,
    pub length_in: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub hidden_units: usize,
    pub l2_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Five blocks of 8/16/24/32/64 filters, kernel 4, pool 4, dropout 0.1
    /// after blocks 2 and 4, 32 hidden units per exit, L2 rate 1e-4.
    pub fn standard(channels_in: usize, length_in: usize, num_classes: usize) -> Self {
        let blocks = [8, 16, 24, 32, 64]
            .iter()
            .enumerate()
            .map(|(i, &filters)| BlockSpec {
                filters,
                kernel: 4,
                pool: 4,
                dropout_rate: if i == 1 || i == 3 { 0.1 } else { 0.0 },
            })
            .collect();
        Self {
            channels_in,
            length_in,
            num_classes,
            blocks,
            hidden_units: 32,
            l2_rate: 1e-4,
            seed: 0,
        }
    }

    pub fn head(&self) -> ExitHeadSpec {
        ExitHeadSpec {
            hidden_units: self.hidden_units,
            num_classes: self.num_classes,
        }
    }

    pub fn num_exits(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("model.num_classes", format!("{} < 2", self.num_classes)));
        }
        if self.channels_in == 0 {
            return Err(invalid("model.channels_in", "must be positive"));
        }
        if self.length_in == 0 {
            return Err(invalid("model.length_in", "must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(invalid("model.blocks", "need at least one block"));
        }
        if self.hidden_units == 0 {
            return Err(invalid("model.hidden_units", "must be positive"));
        }
        if !(self.l2_rate >= 0.0) {
            return Err(invalid("model.l2_rate", "must be non-negative"));
        }
        for b in &self.blocks {
            if b.filters == 0 || b.kernel == 0 || b.pool == 0 {
                return Err(invalid("model.blocks", format!("degenerate block {b:?}")));
            }
            if !(0.0..1.0).contains(&b.dropout_rate) {
                return Err(invalid("model.dropout", format!("{} not in [0, 1)", b.dropout_rate)));
            }
        }
        Ok(())
    }

    /// Time length entering each block, plus the final pooled length.
    pub fn lengths(&self) -> Vec<usize> {
        let mut out = vec![self.length_in];
        for b in &self.blocks {
            let l = *out.last().unwrap();
            out.push(l.div_ceil(b.pool));
        }
        out
    }

    /// Multiply-accumulates needed to produce exit `exit` (1-based):
    /// convolutions of blocks `1..=exit` plus the two dense layers of that exit.
    pub fn macs_until_exit(&self, exit: usize) -> Result<u64> {
        check_exit(exit, self.num_exits())?;
        let lengths = self.lengths();
        let mut cin = self.channels_in;
        let mut total = 0u64;
        for (i, b) in self.blocks.iter().take(exit).enumerate() {
            total += (b.filters * cin * b.kernel * lengths[i]) as u64;
            cin = b.filters;
        }
        total += (cin * self.hidden_units + self.hidden_units * self.num_classes) as u64;
        Ok(total)
    }
}

fn check_exit(exit: usize, exits: usize) -> Result<()> {
    if exit == 0 || exit > exits {
        Err(Error::ExitOutOfRange { index: exit, exits })
    } else {
        Ok(())
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Conv and dense weights take part in the L2 penalty; nothing else does.
    pub weight_decay_eligible: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockParams {
    conv_w: usize,
    conv_b: usize,
    norm_gain: usize,
    norm_shift: usize,
    slope: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadParams {
    hidden_w: usize,
    hidden_b: usize,
    slope: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitNet<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    input_gain: usize,
    input_shift: usize,
    blocks: Vec<BlockParams>,
    heads: Vec<HeadParams>,
}

struct Registry<T: Scalar> {
    params: Vec<Parameter<T>>,
    rng: rng::StreamRng,
}

impl<T: Scalar> Registry<T> {
    fn add(&mut self, name: String, value: Tensor<T>, decay: bool) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            weight_decay_eligible: decay,
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, t, true)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.add(name, Tensor::full(shape, T::lit(v)), false)
    }
}

impl<T: Scalar> MultiExitNet<T> {
    /// Build and initialize a network. Initialization is a pure function of
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry {
            params: Vec::new(),
            rng: rng::stream(config.seed, 0, 0, Purpose::Init),
        };
        let c0 = config.channels_in;
        let input_gain = reg.fill("input_norm.gain".into(), &[c0], 1.0);
        let input_shift = reg.fill("input_norm.shift".into(), &[c0], 0.0);

        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = c0;
        for (i, b) in config.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            let f = b.filters;
            blocks.push(BlockParams {
                conv_w: reg.uniform(format!("{p}.conv.weight"), &[f, cin, b.kernel], cin * b.kernel),
                conv_b: reg.fill(format!("{p}.conv.bias"), &[f], 0.0),
                norm_gain: reg.fill(format!("{p}.norm.gain"), &[f], 1.0),
                norm_shift: reg.fill(format!("{p}.norm.shift"), &[f], 0.0),
                slope: reg.fill(format!("{p}.prelu.slope"), &[f], PRELU_INIT),
            });
            cin = f;
        }

        let (h, k) = (config.hidden_units, config.num_classes);
        let mut heads = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            let p = format!("exit{}", i + 1);
            let f = b.filters;
            heads.push(HeadParams {
                hidden_w: reg.uniform(format!("{p}.hidden.weight"), &[h, f], f),
                hidden_b: reg.fill(format!("{p}.hidden.bias"), &[h], 0.0),
                slope: reg.fill(format!("{p}.prelu.slope"), &[h], PRELU_INIT),
                out_w: reg.uniform(format!("{p}.out.weight"), &[k, h], h),
                out_b: reg.fill(format!("{p}.out.bias"), &[k], 0.0),
            });
        }

        Ok(Self {
            config,
            params: reg.params,
            input_gain,
            input_shift,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_exits(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Replace parameter values, checking names and shapes against the registry.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(shape_err(
                "load_values",
                format!("expected {} parameters, got {}", self.params.len(), values.len()),
            ));
        }
        for (p, (name, v)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(shape_err(
                    "load_values",
                    format!(
                        "parameter `{}` {:?} does not match `{}` {:?}",
                        p.name,
                        p.value.shape(),
                        name,
                        v.shape()
                    ),
                ));
            }
        }
        for (p, (_, v)) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> MultiExitNet<U> {
        MultiExitNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    weight_decay_eligible: p.weight_decay_eligible,
                })
                .collect(),
            input_gain: self.input_gain,
            input_shift: self.input_shift,
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Add tape gradients into the parameter accumulators.
    pub fn accumulate_grads(&mut self, grads: &Grads<T>) {
        for (id, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.param(id) {
                for (a, &d) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += d;
                }
            }
        }
    }

    fn bind(&self, tape: &mut Tape<T>, id: usize) -> Var {
        tape.param(id, &self.params[id].value)
    }

    /// Record `x` and apply the input instance normalization.
    pub fn input_stage(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[0] != self.config.channels_in || s[1] == 0 {
            return Err(shape_err(
                "forward",
                format!(
                    "input {:?} does not match {} channels",
                    s, self.config.channels_in
                ),
            ));
        }
        let xv = tape.leaf(x);
        let g = self.bind(tape, self.input_gain);
        let b = self.bind(tape, self.input_shift);
        tape.normalize(xv, NormMode::Instance, g, b)
    }

    /// Block `index` (0-based): conv, layer norm, PReLU, max pool, dropout.
    pub fn block<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        h: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let spec = &self.config.blocks[index];
        let p = &self.blocks[index];
        let w = self.bind(tape, p.conv_w);
        let b = self.bind(tape, p.conv_b);
        let h = tape.conv1d(h, w, b)?;
        let g = self.bind(tape, p.norm_gain);
        let s = self.bind(tape, p.norm_shift);
        let h = tape.normalize(h, NormMode::Layer, g, s)?;
        let a = self.bind(tape, p.slope);
        let h = tape.prelu(h, a)?;
        let h = tape.max_pool1d(h, spec.pool, spec.pool)?;
        tape.dropout(h, spec.dropout_rate, training, rng)
    }

    /// Exit head `index` (0-based): global average pool, dense, PReLU, dense.
    pub fn head(&self, tape: &mut Tape<T>, index: usize, h: Var) -> Result<Var> {
        let p = &self.heads[index];
        let z = tape.global_avg_pool(h)?;
        let w = self.bind(tape, p.hidden_w);
        let b = self.bind(tape, p.hidden_b);
        let z = tape.dense(z, w, b)?;
        let a = self.bind(tape, p.slope);
        let z = tape.prelu(z, a)?;
        let w = self.bind(tape, p.out_w);
        let b = self.bind(tape, p.out_b);
        tape.dense(z, w, b)
    }

    /// Logits of exits `1..=up_to`, computing the shared trunk once.
    pub fn forward_prefix<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        up_to: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        check_exit(up_to, self.num_exits())?;
        let mut h = self.input_stage(tape, x)?;
        let mut out = Vec::with_capacity(up_to);
        for i in 0..up_to {
            h = self.block(tape, i, h, training, rng)?;
            out.push(self.head(tape, i, h)?);
        }
        Ok(out)
    }

    /// One logit vector per exit.
    pub fn forward_all_exits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        self.forward_prefix(tape, x, self.num_exits(), training, rng)
    }

    /// Inference-mode logits of exit `exit` (1-based), computing only the
    /// blocks it depends on.
    pub fn forward_until_exit(&self, tape: &mut Tape<T>, x: &Tensor<T>, exit: usize) -> Result<Var> {
        check_exit(exit, self.num_exits())?;
        let mut h = self.input_stage(tape, x)?;
        for i in 0..exit {
            h = self.block(tape, i, h, false, &mut NoRng)?;
        }
        self.head(tape, exit - 1, h)
    }

    /// Inference-mode logits of every exit, without keeping the tape.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let outs = self.forward_all_exits(&mut tape, x, false, &mut NoRng)?;
        Ok(outs.iter().map(|&v| tape.value(v).to_vec()).collect())
    }

    /// `l2_rate · Σ w²` over conv and dense weights, recorded on the tape.
    pub fn l2_penalty(&self, tape: &mut Tape<T>) -> Result<Var> {
        let mut terms = Vec::new();
        for (id, p) in self.params.iter().enumerate() {
            if p.weight_decay_eligible {
                let v = self.bind(tape, id);
                terms.push((tape.sum_squares(v), T::lit(self.config.l2_rate)));
            }
        }
        if terms.is_empty() {
            return Ok(tape.constant_scalar(T::zero()));
        }
        tape.lin_comb(&terms)
    }

    /// Value of the L2 penalty, accumulated in f64.
    pub fn l2_value(&self) -> f64 {
        let s: f64 = self
            .params
            .iter()
            .filter(|p| p.weight_decay_eligible)
            .flat_map(|p| p.value.data().iter().map(|v| v.widen() * v.widen()))
            .sum();
        self.config.l2_rate * s
    }
}

/// Random source for inference paths, which never draw. Panics if used.
pub struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference does not draw random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference does not draw random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference does not draw random numbers")
    }
}
