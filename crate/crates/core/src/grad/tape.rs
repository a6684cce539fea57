use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::array::{axis_view, gemm};
use super::conv::{conv_forward, conv_input_adjoint, conv_weight_adjoint, ConvGeometry};
use super::{Array, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How a batch normalization node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reverse(Var),
    Reshape(Var),
    SwapLeading(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Custom {
        input: Var,
        grad: Array,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => Vec::new(),
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | Abs(a) | Tanh(a) | Sigmoid(a) | Softmax(a) | Sum(a) | Reverse(a)
            | Reshape(a) | SwapLeading(a) => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            Slice { input, .. } | Dropout { input, .. } | Custom { input, .. } => vec![*input],
            Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Every operator produces a fresh node; nothing is mutated in place, so a
/// node's value stays valid for the adjoint computation.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. Constants never receive gradients.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        Ok(self.push_with(value, Op::Leaf, false))
    }

    /// Records a parameter read. Frozen parameters behave like constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        if !p.value().is_finite() {
            return Err(Error::NonFinite("parameter"));
        }
        Ok(self.push_with(p.value().clone(), Op::Param(id), p.trainable))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::from_parts(va.shape().to_vec(), data);
        self.push(value, op)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Adds a `[n]` bias to every row of an `[.., n]` array.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Array::from_parts(sx.to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return Err(shape_err("softmax", "scalar input".into()));
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Array::from_parts(shape, data), Op::Softmax(x)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = axis_view(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Array::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_view(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) of extent {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Array::from_parts(out_shape, data),
            Op::Slice {
                input: x,
                axis,
                start,
            },
        ))
    }

    /// Reverses the order along axis 0 (time, for `[T, D]` sequences).
    pub fn reverse(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, n, inner) = axis_view(&shape, 0)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for t in (0..n).rev() {
            data.extend_from_slice(&src[t * inner..(t + 1) * inner]);
        }
        Ok(self.push(Array::from_parts(shape, data), Op::Reverse(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Swaps the first two axes: `[a, b, ..] -> [b, a, ..]`.
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("swap_leading", format!("{shape:?}")));
        }
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let data = swap_leading_data(src, a, b, inner);
        let mut out = shape;
        out.swap(0, 1);
        Ok(self.push(Array::from_parts(out, data), Op::SwapLeading(x)))
    }

    /// 'same'-padded 2-D convolution of a `[Cin, T, F]` map with a
    /// `[Cout, Cin, kt, kf]` kernel; output is `[Cout, ceil(T/st), ceil(F/sf)]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", format!("input {si:?}, kernel {sw:?}")));
        }
        let cout = sw[0];
        self.check_bias("conv2d", bias, cout)?;
        let geom = ConvGeometry::same(si[0], si[1], si[2], (sw[2], sw[3]), stride);
        let mut out = conv_forward(&geom, self.value(input).data(), self.value(weight).data(), cout);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), geom.positions());
        }
        let value = Array::from_parts(vec![cout, geom.out_t, geom.out_f], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Transposed convolution: the exact adjoint of a 'same'-padded [`Tape::conv2d`]
    /// whose input had extent `out_extent`. `input` is `[Cin, T', F']`,
    /// `weight` is `[Cin, Cout, kt, kf]`; output is `[Cout, out_extent.0, out_extent.1]`.
    ///
    /// Requires `ceil(out_extent / stride) == (T', F')`, which pins the output to
    /// within `stride - 1` of `stride * T'`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        out_extent: (usize, usize),
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {si:?}, kernel {sw:?}"),
            ));
        }
        let (cin, cout) = (sw[0], sw[1]);
        let geom = ConvGeometry::same(cout, out_extent.0, out_extent.1, (sw[2], sw[3]), stride);
        if out_extent.0 == 0 || out_extent.1 == 0 || geom.out_t != si[1] || geom.out_f != si[2] {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "output extent {out_extent:?} incompatible with input {si:?} at stride {stride:?}"
                ),
            ));
        }
        self.check_bias("conv_transpose2d", bias, cout)?;
        let mut out = vec![0.0; cout * out_extent.0 * out_extent.1];
        conv_input_adjoint(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            cin,
            &mut out,
        );
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), out_extent.0 * out_extent.1);
        }
        let value = Array::from_parts(vec![cout, out_extent.0, out_extent.1], out);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(shape_err(
                    op,
                    format!("bias {:?} for {channels} channels", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// Per-channel batch normalization, channels on `axis`.
    ///
    /// In [`NormMode::Batch`] the returned statistics are the biased batch
    /// mean and variance, for the caller to fold into running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        let (outer, c, inner) = axis_view(&shape, axis)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("{shape:?} with {c} channels on axis {axis}"),
            ));
        }
        let x = self.value(input).data();
        let count = (outer * inner) as f64;
        let (mean, var, batch) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += x[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += x[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let stats = batch.then_some(BatchStats { mean, var });
        let v = self.push(
            Array::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                axis,
                normalized,
                inv_std,
                batch,
            },
        );
        Ok((v, stats))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Array::from_parts(src.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { input: x, mask }))
    }

    /// Records an externally computed scalar function of `input` together
    /// with its gradient (used for the CTC loss).
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Array) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(shape_err(
                "custom_scalar",
                format!("grad {:?} for input {:?}", grad.shape(), self.shape(input)),
            ));
        }
        Ok(self.push(Array::scalar(value), Op::Custom { input, grad }))
    }

    /// Reverse pass from a scalar `loss`, accumulating d(loss)/d(param) into
    /// every trainable parameter reached. Frozen parameters are untouched.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let seed = Array::full(lv.shape(), 1.0);
        self.consumed = true;
        let mut grads: Vec<Option<Array>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                if !g.is_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
                let p = store.get_mut(id);
                if p.trainable {
                    p.grad_mut().add_assign(&g);
                }
                continue;
            }
            if let Op::Slice { input, axis, start } = node.op {
                // Scatter straight into the input's accumulator.
                if self.nodes[input.0].requires_grad {
                    let in_shape = self.nodes[input.0].value.shape();
                    let (outer, n, inner) = axis_view(in_shape, axis)?;
                    let len = node.value.shape()[axis];
                    let acc = grads[input.0].get_or_insert_with(|| Array::zeros(in_shape));
                    let d = acc.data_mut();
                    let gd = g.data();
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (a, b) in d[dst..dst + len * inner].iter_mut().zip(&gd[src..src + len * inner]) {
                            *a += b;
                        }
                    }
                }
                continue;
            }
            for (input, contribution) in self.adjoint(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn adjoint(&self, idx: usize, g: &Array) -> Result<Vec<(Var, Array)>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Array::from_parts(val(v).shape().to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, 0.0);
                    out.push((*a, like(*a, da)));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, 0.0);
                    out.push((*b, like(*b, db)));
                }
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if wants(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    out.push((*a, like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())));
                }
                if wants(*b) {
                    out.push((*b, like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect())));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * f))),
            Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, x)| g * sign(*x))
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                out.push((*x, like(*x, d)));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                out.push((*x, like(*x, d)));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                out.push((*x, like(*x, d)));
            }
            Op::Sum(x) => out.push((*x, Array::full(val(*x).shape(), gd[0]))),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_view(node.value.shape(), *axis)?;
                let mut offset = 0;
                for &v in inputs {
                    let n = val(v).shape()[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        out.push((v, like(v, d)));
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = axis_view(val(*input).shape(), *axis)?;
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; val(*input).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((*input, like(*input, d)));
            }
            Op::Reverse(x) => {
                let (_, n, inner) = axis_view(g.shape(), 0)?;
                let mut d = Vec::with_capacity(gd.len());
                for t in (0..n).rev() {
                    d.extend_from_slice(&gd[t * inner..(t + 1) * inner]);
                }
                out.push((*x, like(*x, d)));
            }
            Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec()))),
            Op::SwapLeading(x) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                out.push((*x, like(*x, swap_leading_data(gd, s[0], s[1], inner))));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cout = val(*weight).shape()[0];
                if wants(*input) {
                    let mut dx = vec![0.0; val(*input).len()];
                    conv_input_adjoint(geom, gd, val(*weight).data(), cout, &mut dx);
                    out.push((*input, like(*input, dx)));
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; val(*weight).len()];
                    conv_weight_adjoint(geom, gd, val(*input).data(), cout, &mut dw);
                    out.push((*weight, like(*weight, dw)));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    out.push((b, like(b, channel_sums(gd, cout))));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                // forward was conv_input_adjoint(geom, input, weight); its
                // adjoint in the input is the plain convolution.
                let cin = val(*weight).shape()[0];
                let cout = val(*weight).shape()[1];
                if wants(*input) {
                    let dy = conv_forward(geom, gd, val(*weight).data(), cin);
                    out.push((*input, like(*input, dy)));
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; val(*weight).len()];
                    conv_weight_adjoint(geom, val(*input).data(), gd, cin, &mut dw);
                    out.push((*weight, like(*weight, dw)));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    out.push((b, like(b, channel_sums(gd, cout))));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                axis,
                normalized,
                inv_std,
                batch,
            } => {
                let (outer, c, inner) = axis_view(node.value.shape(), *axis)?;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += gd[i] * normalized[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    let count = (outer * inner) as f64;
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                dx[i] = if *batch {
                                    // dgamma / dbeta double as the reductions of dy.xhat and dy.
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gd[i]
                                            - dbeta[ch]
                                            - normalized[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*input, like(*input, dx)));
                }
                if wants(*gamma) {
                    out.push((*gamma, like(*gamma, dgamma)));
                }
                if wants(*beta) {
                    out.push((*beta, like(*beta, dbeta)));
                }
            }
            Op::Dropout { input, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                out.push((*input, like(*input, d)));
            }
            Op::Custom { input, grad } => {
                out.push((*input, grad.map(|v| v * gd[0])));
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn swap_leading_data(src: &[f64], a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut data = Vec::with_capacity(src.len());
    for j in 0..b {
        for i in 0..a {
            let base = (i * b + j) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
    }
    data
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], channels: usize) -> Vec<f64> {
    let plane = g.len() / channels;
    g.chunks(plane).map(|c| c.iter().sum()).collect()
}
