use std::collections::BTreeMap;

use super::kernels::{self, ConvDims, DeformDims};
use super::{Gradients, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        d_in: usize,
        d_out: usize,
    },
    Softmax {
        input: Var,
        k: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        offset: usize,
    },
    MulCells {
        feature: Var,
        weight: Var,
        cells: usize,
    },
    SumChannels {
        input: Var,
        cells: usize,
    },
    MeanCells {
        input: Var,
        cells: usize,
    },
    BroadcastCells {
        input: Var,
        cells: usize,
    },
    BilinearSample {
        feature: Var,
        loc: Var,
        h: usize,
        w: usize,
    },
    DeformSample {
        value: Var,
        locs: Var,
        weights: Var,
        dims: DeformDims,
    },
    Entropy {
        input: Var,
        k: usize,
    },
    Focal {
        logits: Var,
        target: Vec<T>,
        scale: T,
        alpha: i32,
        beta: i32,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        scale: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::MulCells { .. } => "mul_cells",
            Op::SumChannels { .. } => "sum_channels",
            Op::MeanCells { .. } => "mean_cells",
            Op::BroadcastCells { .. } => "broadcast_cells",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::DeformSample { .. } => "deform_sample",
            Op::Entropy { .. } => "entropy",
            Op::Focal { .. } => "focal_loss",
            Op::MaskedL1 { .. } => "masked_l1",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation tape. Operations are recorded in topological
/// order as they are called; [`Graph::backward`] replays them in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<usize, Var>,
    param_names: Vec<String>,
    backward_done: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            param_names: Vec::new(),
            backward_done: false,
            non_finite: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Errors with the first node whose output was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (inputs for probes and checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls for the same name return the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        self.param_names.push(name.to_string());
        Ok(v)
    }

    /// Names of every parameter bound on this graph, in binding order.
    pub fn bound_params(&self) -> &[String] {
        &self.param_names
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(data, self.shape(a)).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(data, self.shape(a)).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// Same-size 2-D cross-correlation of a `[c_in, h, w]` input with a
    /// `[c_out, c_in, k, k]` kernel (odd `k`, zero padding `(k-1)/2`).
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 3 || ks.len() != 4 || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: input {is:?}, kernel {ks:?} (need [c,h,w] and odd square kernel)"
            )));
        }
        if ks[1] != is[0] || bs != [ks[0]] {
            return Err(Error::Config(format!(
                "conv2d: input {is:?}, kernel {ks:?}, bias {bs:?}"
            )));
        }
        let dims = ConvDims {
            c_in: is[0],
            c_out: ks[0],
            h: is[1],
            w: is[2],
            k: ks[2],
        };
        let mut out = vec![T::zero(); dims.c_out * dims.h * dims.w];
        kernels::conv2d_forward(self.data(input), self.data(kernel), self.data(bias), dims, &mut out);
        let t = Tensor::new(out, &[dims.c_out, dims.h, dims.w])?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// Affine map over the trailing dimension with a `[d_out, d_in]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if ws.len() != 2 || is.last() != Some(&ws[1]) || bs != [ws[0]] {
            return Err(Error::Config(format!(
                "linear: input {is:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let mut shape = is.to_vec();
        *shape.last_mut().expect("rank >= 1") = d_out;
        let rows = self.data(input).len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        kernels::linear_forward(self.data(input), self.data(weight), self.data(bias), d_in, d_out, &mut out);
        let t = Tensor::new(out, &shape)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            t,
            Op::Linear {
                input,
                weight,
                bias,
                d_in,
                d_out,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let k = *self.shape(input).last().expect("rank >= 1");
        if k == 0 {
            return Err(Error::Config("softmax over empty axis".into()));
        }
        let mut out = self.data(input).to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let t = Tensor::new(out, self.shape(input))?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Softmax { input, k }, rg))
    }

    fn transpose(&mut self, input: Var, rows: usize, out_shape: &[usize]) -> Result<Var> {
        let n = self.data(input).len();
        let cols = n / rows;
        let src = self.data(input);
        let mut out = vec![T::zero(); n];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let t = Tensor::new(out, out_shape)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Transpose { input, rows, cols }, rg))
    }

    /// Channel-first `[c, x, y]` to cell-major `[x*y, c]`.
    pub fn to_cells(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(Error::Config(format!("to_cells: expected [c,x,y], got {s:?}")));
        }
        self.transpose(input, s[0], &[s[1] * s[2], s[0]])
    }

    /// Cell-major `[x*y, c]` back to channel-first `[c, x, y]`.
    pub fn from_cells(&mut self, input: Var, x: usize, y: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] != x * y {
            return Err(Error::Config(format!("from_cells: {s:?} is not [{x}*{y}, c]")));
        }
        self.transpose(input, s[0], &[s[1], x, y])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            if self.shape(v)[1..] != tail[..] {
                return Err(Error::Config(format!(
                    "concat: trailing shape {:?} vs {:?}",
                    &self.shape(v)[1..],
                    tail
                )));
            }
            lead += self.shape(v)[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(data, &shape)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(inputs.to_vec()), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(Error::Config(format!("slice {start}+{len} out of {s:?}")));
        }
        let block: usize = s[1..].iter().product();
        let data = self.data(input)[start * block..(start + len) * block].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let t = Tensor::new(data, &shape)?;
        let rg = self.rg(input);
        Ok(self.push(
            t,
            Op::Slice {
                input,
                offset: start * block,
            },
            rg,
        ))
    }

    /// Multiplies every channel of `[c, x, y]` by a per-cell `[1, x, y]` map.
    pub fn mul_cells(&mut self, feature: Var, weight: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let ws = self.shape(weight);
        if fs.len() != 3 || ws != [1, fs[1], fs[2]] {
            return Err(Error::Config(format!("mul_cells: {fs:?} by {ws:?}")));
        }
        let cells = fs[1] * fs[2];
        let w = self.data(weight);
        let data = self
            .data(feature)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * w[i % cells])
            .collect();
        let t = Tensor::new(data, &fs)?;
        let rg = self.rg(feature) || self.rg(weight);
        Ok(self.push(
            t,
            Op::MulCells {
                feature,
                weight,
                cells,
            },
            rg,
        ))
    }

    /// Sum over the channel axis: `[c, x, y] -> [1, x, y]`.
    pub fn sum_channels(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(Error::Config(format!("sum_channels: {s:?}")));
        }
        let cells = s[1] * s[2];
        let mut out = vec![T::zero(); cells];
        for ch in self.data(input).chunks_exact(cells) {
            for (o, &v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        let t = Tensor::new(out, &[1, s[1], s[2]])?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::SumChannels { input, cells }, rg))
    }

    /// Spatial mean: `[c, x, y] -> [c]`.
    pub fn mean_cells(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(Error::Config(format!("mean_cells: {s:?}")));
        }
        let cells = s[1] * s[2];
        let n = T::of(cells as f64);
        let out = self
            .data(input)
            .chunks_exact(cells)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        let t = Tensor::new(out, &[s[0]])?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MeanCells { input, cells }, rg))
    }

    /// `[c] -> [c, x, y]` by repetition.
    pub fn broadcast_cells(&mut self, input: Var, x: usize, y: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 1 {
            return Err(Error::Config(format!("broadcast_cells: {s:?}")));
        }
        let cells = x * y;
        let out = self
            .data(input)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cells))
            .collect();
        let t = Tensor::new(out, &[s[0], x, y])?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::BroadcastCells { input, cells }, rg))
    }

    /// Bilinear sample of a `[c, h, w]` feature at a `[2]` location given in
    /// lattice units; out-of-range cells read as zero.
    pub fn bilinear_sample(&mut self, feature: Var, loc: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        if fs.len() != 3 || self.shape(loc) != [2] {
            return Err(Error::Config(format!(
                "bilinear_sample: feature {fs:?}, location {:?}",
                self.shape(loc)
            )));
        }
        let (x, y) = (self.data(loc)[0], self.data(loc)[1]);
        let out = kernels::bilinear_sample(self.data(feature), fs[0], fs[1], fs[2], x, y);
        let t = Tensor::new(out, &[fs[0]])?;
        let rg = self.rg(feature) || self.rg(loc);
        Ok(self.push(
            t,
            Op::BilinearSample {
                feature,
                loc,
                h: fs[1],
                w: fs[2],
            },
            rg,
        ))
    }

    /// Fused deformable aggregation; see [`kernels::deform_sample_forward`].
    /// `value` is cell-major over an `h x w` lattice.
    pub fn deform_sample(
        &mut self,
        value: Var,
        locs: Var,
        weights: Var,
        h: usize,
        w: usize,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let (vs, ls, ws) = (self.shape(value), self.shape(locs), self.shape(weights));
        let bad = vs.len() != 2
            || vs[0] != h * w
            || heads == 0
            || points == 0
            || vs[1] % heads != 0
            || ls.len() != 2
            || ws.len() != 2
            || ls[0] != ws[0]
            || ls[1] != heads * points * 2
            || ws[1] != heads * points;
        if bad {
            return Err(Error::Config(format!(
                "deform_sample: value {vs:?} on {h}x{w}, locations {ls:?}, weights {ws:?}, heads {heads}, points {points}"
            )));
        }
        let dims = DeformDims {
            queries: ls[0],
            h,
            w,
            heads,
            points,
            head_dim: vs[1] / heads,
        };
        let mut out = vec![T::zero(); dims.queries * vs[1]];
        kernels::deform_sample_forward(self.data(value), self.data(locs), self.data(weights), dims, &mut out);
        let t = Tensor::new(out, &[dims.queries, vs[1]])?;
        let rg = self.rg(value) || self.rg(locs) || self.rg(weights);
        Ok(self.push(
            t,
            Op::DeformSample {
                value,
                locs,
                weights,
                dims,
            },
            rg,
        ))
    }

    /// Mean over rows of the Shannon entropy along the last axis, with the
    /// convention `0 ln 0 = 0`. Inputs must be probabilities.
    pub fn entropy(&mut self, input: Var) -> Result<Var> {
        let k = *self.shape(input).last().expect("rank >= 1");
        let data = self.data(input);
        let rows = data.len() / k;
        let mut total = T::zero();
        for &p in data {
            if p < T::zero() {
                return Err(Error::Config("entropy of a negative weight".into()));
            }
            if p > T::zero() {
                total -= p * p.ln();
            }
        }
        let t = Tensor::scalar(total / T::of(rows as f64));
        let rg = self.rg(input);
        Ok(self.push(t, Op::Entropy { input, k }, rg))
    }

    /// Penalty-reduced focal loss of heatmap logits against a same-shape
    /// target, summed and multiplied by `scale`.
    pub fn focal_loss(&mut self, logits: Var, target: &[T], scale: T, alpha: i32, beta: i32) -> Result<Var> {
        if self.data(logits).len() != target.len() {
            return Err(Error::Config("focal_loss: target size mismatch".into()));
        }
        let total: T = self
            .data(logits)
            .iter()
            .zip(target)
            .map(|(&z, &t)| kernels::focal_term(z, t, alpha, beta).0)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Focal {
                logits,
                target: target.to_vec(),
                scale,
                alpha,
                beta,
            },
            rg,
        ))
    }

    /// `scale * sum(mask * |pred - target|)` for a `[c, x, y]` prediction and
    /// a per-cell `[x*y]` mask.
    pub fn masked_l1(&mut self, pred: Var, target: &[T], mask: &[T], scale: T) -> Result<Var> {
        let n = self.data(pred).len();
        if target.len() != n || mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(Error::Config("masked_l1: size mismatch".into()));
        }
        let cells = mask.len();
        let total: T = self
            .data(pred)
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (&p, &t))| mask[i % cells] * (p - t).abs())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::MaskedL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients gathered into store order (zeros for parameters
    /// that were not bound).
    pub fn param_grads(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.get_mut(id).copy_from_slice(g);
            }
        }
        out
    }

    /// Clears gradients so backward may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice without reset".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.check_finite()?;
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        let mut grads = std::mem::take(&mut self.grads);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let mut sink = Sink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                };
                sink.propagate(i, &g);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

}

/// Gradient writer used during the reverse sweep; node values are read-only.
struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Sink<'_, T> {
    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.acc(v) {
            for (i, x) in g.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_with(*a, |k| g[k]);
                self.acc_with(*b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, |k| g[k]);
                self.acc_with(*b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.acc_with(*a, |k| g[k] * db[k]);
                self.acc_with(*b, |k| g[k] * da[k]);
            }
            Op::Scale(a, s) => self.acc_with(*a, |k| g[k] * *s),
            Op::Relu(a) => {
                let x = val(*a);
                self.acc_with(*a, |k| if x[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Square(a) => {
                let x = val(*a);
                self.acc_with(*a, |k| T::of(2.0) * x[k] * g[k]);
            }
            Op::Sum(a) => self.acc_with(*a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                self.acc_with(*a, |_| g[0] / n);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let (xi, xk) = (val(*input), val(*kernel));
                let mut gi = Self::rg_buf(nodes, *input);
                let mut gk = Self::rg_buf(nodes, *kernel);
                let mut gb = Self::rg_buf(nodes, *bias);
                kernels::conv2d_backward(xi, xk, g, *dims, gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                self.merge(*input, gi);
                self.merge(*kernel, gk);
                self.merge(*bias, gb);
            }
            Op::Linear {
                input,
                weight,
                bias,
                d_in,
                d_out,
            } => {
                let (xi, xw) = (val(*input), val(*weight));
                let mut gi = Self::rg_buf(nodes, *input);
                let mut gw = Self::rg_buf(nodes, *weight);
                let mut gb = Self::rg_buf(nodes, *bias);
                kernels::linear_backward(
                    xi,
                    xw,
                    g,
                    *d_in,
                    *d_out,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.merge(*input, gi);
                self.merge(*weight, gw);
                self.merge(*bias, gb);
            }
            Op::Softmax { input, k } => {
                let y = node.value.data();
                let mut gi = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks_exact(*k).zip(g.chunks_exact(*k)).zip(gi.chunks_exact_mut(*k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                self.merge(*input, Some(gi));
            }
            Op::Transpose { input, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.acc_with(*input, |k| {
                    let (r, c) = (k / cols, k % cols);
                    g[c * rows + r]
                });
            }
            Op::Reshape(a) => self.acc_with(*a, |k| g[k]),
            Op::Concat(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.numel();
                    let o = off;
                    self.acc_with(v, |k| g[o + k]);
                    off += n;
                }
            }
            Op::Slice { input, offset } => {
                let off = *offset;
                if let Some(gi) = self.acc(*input) {
                    for (x, &y) in gi[off..off + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::MulCells {
                feature,
                weight,
                cells,
            } => {
                let (f, w) = (val(*feature), val(*weight));
                let cells = *cells;
                self.acc_with(*feature, |k| g[k] * w[k % cells]);
                if let Some(gw) = self.acc(*weight) {
                    for (k, (&gg, &ff)) in g.iter().zip(f).enumerate() {
                        gw[k % cells] += gg * ff;
                    }
                }
            }
            Op::SumChannels { input, cells } => {
                let cells = *cells;
                self.acc_with(*input, |k| g[k % cells]);
            }
            Op::MeanCells { input, cells } => {
                let cells = *cells;
                let n = T::of(cells as f64);
                self.acc_with(*input, |k| g[k / cells] / n);
            }
            Op::BroadcastCells { input, cells } => {
                let cells = *cells;
                if let Some(gi) = self.acc(*input) {
                    for (c, x) in gi.iter_mut().enumerate() {
                        *x += g[c * cells..(c + 1) * cells].iter().copied().sum::<T>();
                    }
                }
            }
            Op::BilinearSample { feature, loc, h, w } => {
                let (h, w) = (*h, *w);
                let f = val(*feature);
                let l = val(*loc);
                let hw = h * w;
                let (taps, n) = kernels::bilinear_taps(h, w, l[0], l[1]);
                let taps: Vec<_> = taps[..n].iter().flatten().copied().collect();
                if let Some(gf) = self.acc(*feature) {
                    for tap in &taps {
                        for (c, &gg) in g.iter().enumerate() {
                            gf[c * hw + tap.cell] += tap.weight * gg;
                        }
                    }
                }
                if let Some(gl) = self.acc(*loc) {
                    for tap in &taps {
                        for (c, &gg) in g.iter().enumerate() {
                            let v = f[c * hw + tap.cell];
                            gl[0] += tap.d_x * v * gg;
                            gl[1] += tap.d_y * v * gg;
                        }
                    }
                }
            }
            Op::DeformSample {
                value,
                locs,
                weights,
                dims,
            } => {
                let (xv, xl, xw) = (val(*value), val(*locs), val(*weights));
                let mut gv = Self::rg_buf(nodes, *value);
                let mut gl = Self::rg_buf(nodes, *locs);
                let mut gw = Self::rg_buf(nodes, *weights);
                kernels::deform_sample_backward(
                    xv,
                    xl,
                    xw,
                    g,
                    *dims,
                    gv.as_deref_mut(),
                    gl.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                self.merge(*value, gv);
                self.merge(*locs, gl);
                self.merge(*weights, gw);
            }
            Op::Entropy { input, k } => {
                let x = val(*input);
                let rows = T::of((x.len() / *k) as f64);
                self.acc_with(*input, |i| {
                    if x[i] > T::zero() {
                        -(x[i].ln() + T::one()) * g[0] / rows
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Focal {
                logits,
                target,
                scale,
                alpha,
                beta,
            } => {
                let z = val(*logits);
                self.acc_with(*logits, |k| {
                    kernels::focal_term(z[k], target[k], *alpha, *beta).1 * *scale * g[0]
                });
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                scale,
            } => {
                let p = val(*pred);
                let cells = mask.len();
                self.acc_with(*pred, |k| {
                    let d = p[k] - target[k];
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    mask[k % cells] * s * *scale * g[0]
                });
            }
        }
    }

    fn rg_buf(nodes: &[Node<T>], v: Var) -> Option<Vec<T>> {
        nodes[v.0]
            .requires_grad
            .then(|| vec![T::zero(); nodes[v.0].value.numel()])
    }

    fn merge(&mut self, v: Var, buf: Option<Vec<T>>) {
        let Some(buf) = buf else { return };
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (x, y) in existing.iter_mut().zip(buf) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(buf),
        }
    }
}
