//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its value and whatever it needs
//! for the backward pass. Node inputs always precede the node, so a reverse
//! sweep over insertion order is a valid topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Scalar, Tensor};

/// Epsilon used by both normalization modes.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Conv1d,
    MaxPool1d,
    GlobalAvgPool,
    Dense,
    Prelu,
    Normalize,
    Dropout,
    Softmax,
    CrossEntropy,
    Scale,
    LinComb,
    SumSquares,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Per channel, over time.
    Instance,
    /// Over every feature of the example.
    Layer,
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Prelu {
        x: Var,
        a: Var,
    },
    Normalize {
        x: Var,
        gain: Var,
        shift: Var,
        group_len: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    Scale {
        x: Var,
        factor: T,
    },
    LinComb {
        terms: Vec<(Var, T)>,
    },
    SumSquares {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Scale { .. } => OpKind::Scale,
            Op::LinComb { .. } => OpKind::LinComb,
            Op::SumSquares { .. } => OpKind::SumSquares,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`] for leaves and parameters.
pub struct Grads<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf or parameter node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for registry parameter `id`.
    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params.get(id).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
    fault: Option<(OpKind, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scale the gradient flowing into every `kind` node by `factor` during
    /// backward. Only used to build negative controls for gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    /// Number of recorded nodes of the given kind.
    pub fn op_count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a scalar node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (or a differentiable input, for gradient checks).
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: T) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    /// Bind registry parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(Some(v)) = self.params.get(id) {
            return *v;
        }
        let v = self.push(value.shape().to_vec(), value.data().to_vec(), Op::Param(id));
        if self.params.len() <= id {
            self.params.resize(id + 1, None);
        }
        self.params[id] = Some(v);
        v
    }

    /// Same-padded, stride-1 convolution: `x[C_in, L]`, `w[C_out, C_in, K]`, `b[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 {
            return Err(shape_err(
                "conv1d",
                format!("expected x[C,L], w[O,C,K], b[O]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        if xs[0] != ws[1] || ws[0] != bs[0] || ws[2] == 0 {
            return Err(shape_err(
                "conv1d",
                format!("input {xs:?} incompatible with weights {ws:?} and bias {bs:?}"),
            ));
        }
        let d = ConvDims {
            cin: xs[0],
            cout: ws[0],
            k: ws[2],
            len: xs[1],
        };
        let y = kernels::conv1d_forward(self.value(x), self.value(w), self.value(b), &d);
        Ok(self.push(vec![d.cout, d.len], y, Op::Conv1d { x, w, b }))
    }

    /// Ceil-mode max pooling along time of a `[C, L]` input.
    pub fn max_pool1d(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(shape_err("max_pool1d", format!("need non-empty [C, L], got {xs:?}")));
        }
        if pool == 0 || stride == 0 {
            return Err(shape_err("max_pool1d", "pool and stride must be positive"));
        }
        let (c, l) = (xs[0], xs[1]);
        let (y, argmax) = kernels::max_pool1d_forward(self.value(x), c, l, pool, stride);
        Ok(self.push(vec![c, l.div_ceil(stride)], y, Op::MaxPool1d { x, argmax }))
    }

    /// Mean over time: `[C, L] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(shape_err(
                "global_avg_pool",
                format!("need non-empty [C, L], got {xs:?}"),
            ));
        }
        let (c, l) = (xs[0], xs[1]);
        let inv = T::lit(1.0 / l as f64);
        let xv = self.value(x);
        let y = (0..c)
            .map(|ch| xv[ch * l..(ch + 1) * l].iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![c], y, Op::GlobalAvgPool { x }))
    }

    /// Affine map `w[D_out, D_in] · x[D_in] + b[D_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(shape_err(
                "dense",
                format!("x {xs:?}, w {ws:?}, b {bs:?} do not compose"),
            ));
        }
        let (dout, din) = (ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let y = (0..dout)
            .map(|o| {
                let row = &wv[o * din..(o + 1) * din];
                bv[o] + row.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect();
        Ok(self.push(vec![dout], y, Op::Dense { x, w, b }))
    }

    /// Parametric ReLU with one slope per channel (leading axis).
    pub fn prelu(&mut self, x: Var, slopes: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(slopes));
        if xs.is_empty() || ss != [xs[0]] {
            return Err(shape_err(
                "prelu",
                format!("slopes {ss:?} must have one entry per channel of {xs:?}"),
            ));
        }
        let shape = xs.to_vec();
        let per = self.value(x).len() / shape[0];
        let av = self.value(slopes);
        let y = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= T::zero() { v } else { av[i / per] * v })
            .collect();
        Ok(self.push(shape, y, Op::Prelu { x, a: slopes }))
    }

    /// Instance or layer normalization of a `[C, L]` input with per-channel gain and shift.
    pub fn normalize(&mut self, x: Var, mode: NormMode, gain: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(shape_err("normalize", format!("need non-empty [C, L], got {xs:?}")));
        }
        let (c, l) = (xs[0], xs[1]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("normalize", "gain and shift need one entry per channel"));
        }
        let group_len = match mode {
            NormMode::Instance => l,
            NormMode::Layer => c * l,
        };
        let out = kernels::normalize_forward(
            self.value(x),
            c,
            group_len,
            self.value(gain),
            self.value(shift),
            NORM_EPS,
        );
        Ok(self.push(
            vec![c, l],
            out.y,
            Op::Normalize {
                x,
                gain,
                shift,
                group_len,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(crate::error::invalid("dropout rate", format!("{rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let y = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::Dropout { x, mask }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 1 || xs[0] < 2 {
            return Err(shape_err("softmax", format!("need [K] with K >= 2, got {xs:?}")));
        }
        let shape = xs.to_vec();
        let y = kernels::softmax(self.value(x));
        Ok(self.push(shape, y, Op::Softmax { x }))
    }

    /// `-Σ target · log softmax(logits)`; `target` is treated as a constant.
    pub fn cross_entropy(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 1 || ls[0] != target.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {ls:?} vs target of length {}", target.len()),
            ));
        }
        let logp = kernels::log_softmax(self.value(logits));
        let loss = -logp.iter().zip(target).map(|(&lp, &t)| t * lp).sum::<T>();
        let probs = logp.iter().map(|lp| lp.exp()).collect();
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
        ))
    }

    /// Cross-entropy against a one-hot class.
    pub fn cross_entropy_class(&mut self, logits: Var, class: usize) -> Result<Var> {
        let k = self.value(logits).len();
        if class >= k {
            return Err(shape_err(
                "cross_entropy",
                format!("class {class} out of range for {k} logits"),
            ));
        }
        let mut target = vec![T::zero(); k];
        target[class] = T::one();
        self.cross_entropy(logits, &target)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let shape = self.shape(x).to_vec();
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(shape, y, Op::Scale { x, factor })
    }

    /// `Σ coeff_i · x_i` over inputs of equal size, accumulated left to right.
    /// The result takes the shape of the first term.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(shape_err("lin_comb", "no terms"));
        };
        let shape = self.shape(first).to_vec();
        let mut y = vec![T::zero(); self.value(first).len()];
        for &(v, c) in terms {
            if self.value(v).len() != y.len() {
                return Err(shape_err(
                    "lin_comb",
                    format!("term shape {:?} differs from {shape:?}", self.shape(v)),
                ));
            }
            for (o, &x) in y.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
        }
        Ok(self.push(shape, y, Op::LinComb { terms: terms.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, T::one()), (b, T::one())])
    }

    /// Unweighted mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let c = T::lit(1.0 / xs.len().max(1) as f64);
        let terms: Vec<(Var, T)> = xs.iter().map(|&v| (v, c)).collect();
        self.lin_comb(&terms)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v * v).sum::<T>();
        self.push(Vec::new(), vec![s], Op::SumSquares { x })
    }

    /// `Σ weights_i · x_i` over every element of `x`; `weights` are constants.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(shape_err(
                "dot",
                format!("{} weights for {} values", weights.len(), self.value(x).len()),
            ));
        }
        let s = self.value(x).iter().zip(weights).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Vec::new(), vec![s], Op::Dot { x, weights: weights.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut params: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(mut gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    gy.iter_mut().for_each(|v| *v *= factor);
                }
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(gy),
                Op::Param(id) => {
                    params[*id] = Some(gy.clone());
                    leaves[i] = Some(gy);
                }
                Op::Conv1d { x, w, b } => {
                    let d = ConvDims {
                        cin: self.nodes[x.0].shape[0],
                        cout: node.shape[0],
                        k: self.nodes[w.0].shape[2],
                        len: node.shape[1],
                    };
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    let mut dw = vec![T::zero(); self.nodes[w.0].value.len()];
                    let mut db = vec![T::zero(); d.cout];
                    kernels::conv1d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        &d,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    add_into(&mut g, *x, dx);
                    add_into(&mut g, *w, dw);
                    add_into(&mut g, *b, db);
                }
                Op::MaxPool1d { x, argmax } => {
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    for (&src, &gv) in argmax.iter().zip(&gy) {
                        dx[src] += gv;
                    }
                    add_into(&mut g, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = &self.nodes[x.0].shape;
                    let l = xs[1];
                    let inv = T::lit(1.0 / l as f64);
                    let dx = (0..xs[0] * l).map(|j| gy[j / l] * inv).collect();
                    add_into(&mut g, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let din = xv.len();
                    let mut dx = vec![T::zero(); din];
                    let mut dw = vec![T::zero(); wv.len()];
                    for (o, &go) in gy.iter().enumerate() {
                        let row = &wv[o * din..(o + 1) * din];
                        for j in 0..din {
                            dx[j] += row[j] * go;
                            dw[o * din + j] = go * xv[j];
                        }
                    }
                    add_into(&mut g, *x, dx);
                    add_into(&mut g, *w, dw);
                    add_into(&mut g, *b, gy);
                }
                Op::Prelu { x, a } => {
                    let (xv, av) = (&self.nodes[x.0].value, &self.nodes[a.0].value);
                    let per = xv.len() / av.len();
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut da = vec![T::zero(); av.len()];
                    for (j, (&v, &gv)) in xv.iter().zip(&gy).enumerate() {
                        if v >= T::zero() {
                            dx[j] = gv;
                        } else {
                            dx[j] = av[j / per] * gv;
                            da[j / per] += v * gv;
                        }
                    }
                    add_into(&mut g, *x, dx);
                    add_into(&mut g, *a, da);
                }
                Op::Normalize {
                    x,
                    gain,
                    shift,
                    group_len,
                    xhat,
                    inv_std,
                } => {
                    let c = node.shape[0];
                    let mut dx = vec![T::zero(); xhat.len()];
                    let mut dgain = vec![T::zero(); c];
                    let mut dshift = vec![T::zero(); c];
                    kernels::normalize_backward(
                        &gy,
                        xhat,
                        inv_std,
                        &self.nodes[gain.0].value,
                        c,
                        *group_len,
                        &mut dx,
                        &mut dgain,
                        &mut dshift,
                    );
                    add_into(&mut g, *x, dx);
                    add_into(&mut g, *gain, dgain);
                    add_into(&mut g, *shift, dshift);
                }
                Op::Dropout { x, mask } => {
                    let dx = gy.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    add_into(&mut g, *x, dx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    let dx = y.iter().zip(&gy).map(|(&p, &gv)| p * (gv - dot)).collect();
                    add_into(&mut g, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mass = target.iter().copied().sum::<T>();
                    let dx = probs
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| gy[0] * (p * mass - t))
                        .collect();
                    add_into(&mut g, *logits, dx);
                }
                Op::Scale { x, factor } => {
                    let dx = gy.iter().map(|&v| v * *factor).collect();
                    add_into(&mut g, *x, dx);
                }
                Op::LinComb { terms } => {
                    for &(v, c) in terms {
                        let dx = gy.iter().map(|&a| a * c).collect();
                        add_into(&mut g, v, dx);
                    }
                }
                Op::SumSquares { x } => {
                    let two = T::lit(2.0) * gy[0];
                    let dx = self.nodes[x.0].value.iter().map(|&v| two * v).collect();
                    add_into(&mut g, *x, dx);
                }
                Op::Dot { x, weights } => {
                    let dx = weights.iter().map(|&w| w * gy[0]).collect();
                    add_into(&mut g, *x, dx);
                }
            }
        }
        Ok(Grads { leaves, params })
    }
}

fn add_into<T: Scalar>(g: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut g[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}
