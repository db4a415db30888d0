//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Var`] is an
//! index into the tape. [`Tape::backward`] walks the nodes in exact reverse
//! recording order and accumulates into the `grad` slot of every reachable
//! node that requires a gradient. Grads persist across calls until
//! [`Tape::zero_grad`].

mod conv;
mod spatial;

use crate::error::{Error, Result};
use crate::tensor::{chw, Element, Tensor};

use conv::ConvGeometry;

/// Lower/upper clamp applied to sigmoid outputs so `log` stays finite.
pub const SIGMOID_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Log(Var),
    SoftmaxChannels(Var),
    Upsample { input: Var, out_hw: (usize, usize) },
    MaxPool { input: Var, argmax: Vec<usize> },
    BlockSum { input: Var, block: usize },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    BroadcastChannels(Var),
    Gather { input: Var, indices: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- conv

    /// Cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (c_in, h, w) = chw(self.shape(input))?;
        let &[c_out, kc, k, k2] = self.shape(kernel) else {
            return Err(Error::shape(format!("kernel must be rank 4, got {:?}", self.shape(kernel))));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square with odd extent, got {k}x{k2}")));
        }
        if kc != c_in {
            return Err(Error::shape(format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(format!("bias must be [{c_out}], got {:?}", self.shape(bias))));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(format!("{h}x{w} input too small for {k}x{k} kernel with padding {padding}")));
        }
        let geom = ConvGeometry { c_in, h, w, c_out, k, pad: padding };
        let out = conv::forward(geom, self.data(input), self.data(kernel), self.data(bias));
        let t = Tensor::new(&[c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, &[input, kernel, bias], Op::Conv2d { input, kernel, bias, geom }))
    }

    // --------------------------------------------------------- elementwise

    fn broadcast_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(format!("cannot broadcast {sa:?} with {sb:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        self.push(t, &[a], op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.unary(a, |x| x * f, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// Logistic sigmoid clamped to `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (lo, hi) = (T::of(SIGMOID_EPS), T::one() - T::of(SIGMOID_EPS));
        self.unary(a, |x| (T::one() / (T::one() + (-x).exp())).max(lo).min(hi), Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// Softmax across the channel axis of `[N,H,W]`, independently per pixel.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let (n, h, w) = chw(self.shape(a))?;
        let plane = h * w;
        let x = self.data(a);
        let mut out = vec![T::zero(); n * plane];
        for p in 0..plane {
            let m = (0..n).map(|c| x[c * plane + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..n {
                let e = (x[c * plane + p] - m).exp();
                out[c * plane + p] = e;
                z = z + e;
            }
            for c in 0..n {
                out[c * plane + p] = out[c * plane + p] / z;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, &[a], Op::SoftmaxChannels(a)))
    }

    /// Per-pixel softmax across a list of equally shaped maps.
    pub fn softmax_group(&mut self, maps: &[Var]) -> Result<Vec<Var>> {
        if maps.is_empty() {
            return Err(Error::arg("softmax over an empty group"));
        }
        let first = self.shape(maps[0]).to_vec();
        if maps.iter().any(|&m| self.shape(m) != first.as_slice()) {
            return Err(Error::shape("softmax group maps must share a shape"));
        }
        let (_, h, w) = chw(&first)?;
        let planes = maps
            .iter()
            .map(|&m| self.reshape(m, &[self.value(m).numel() / (h * w), h, w]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = self.concat(&planes)?;
        let soft = self.softmax_channels(stacked)?;
        let per = self.value(planes[0]).shape()[0];
        (0..maps.len())
            .map(|i| {
                let s = self.slice_channels(soft, i * per, per)?;
                self.reshape(s, &first)
            })
            .collect()
    }

    // ------------------------------------------------------------- spatial

    /// Bilinear resize (align-corners false) of `[C,H,W]` to `[C,H2,W2]`.
    pub fn upsample_bilinear(&mut self, a: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a))?;
        let (oh, ow) = target;
        if oh == 0 || ow == 0 {
            return Err(Error::arg("upsample target extent must be positive"));
        }
        if oh < h || ow < w {
            return Err(Error::arg(format!("cannot upsample {h}x{w} down to {oh}x{ow}")));
        }
        let out = spatial::upsample_forward(self.data(a), (c, h, w), (oh, ow));
        let shape = if self.shape(a).len() == 2 { vec![oh, ow] } else { vec![c, oh, ow] };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, &[a], Op::Upsample { input: a, out_hw: (oh, ow) }))
    }

    pub fn max_pool2x2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max pool needs even extents, got {h}x{w}")));
        }
        let (out, argmax) = spatial::max_pool2x2(self.data(a), (c, h, w));
        let t = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(t, &[a], Op::MaxPool { input: a, argmax }))
    }

    /// Sum over non-overlapping `block x block` tiles.
    pub fn block_sum(&mut self, a: Var, block: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a))?;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::shape(format!("{h}x{w} is not divisible into {block}x{block} blocks")));
        }
        let out = spatial::block_sum(self.data(a), (c, h, w), block);
        let shape = if self.shape(a).len() == 2 {
            vec![h / block, w / block]
        } else {
            vec![c, h / block, w / block]
        };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, &[a], Op::BlockSum { input: a, block }))
    }

    // ---------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(m), &[a], Op::Mean(a))
    }

    /// Sum of a non-empty list of same-shape values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::arg("cannot add an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    // ---------------------------------------------------------- structural

    /// Concatenate `[C_i,H,W]` inputs along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of an empty list"));
        }
        let (_, h, w) = chw(self.shape(parts[0]))?;
        let mut channels = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = chw(self.shape(p))?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!("concat spatial mismatch {h}x{w} vs {ph}x{pw}")));
            }
            channels += c;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(&[channels, h, w], out)?;
        Ok(self.push(t, parts, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a))?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("channel slice {start}..{} out of {c}", start + len)));
        }
        let out = self.data(a)[start * h * w..(start + len) * h * w].to_vec();
        let t = Tensor::new(&[len, h, w], out)?;
        Ok(self.push(t, &[a], Op::SliceChannels { input: a, start }))
    }

    /// Repeat a single-channel map `channels` times.
    pub fn broadcast_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a))?;
        if c != 1 || channels == 0 {
            return Err(Error::shape(format!("broadcast needs one channel, got {c}")));
        }
        let src = self.data(a);
        let out = (0..channels).flat_map(|_| src.iter().copied()).collect();
        let t = Tensor::new(&[channels, h, w], out)?;
        Ok(self.push(t, &[a], Op::BroadcastChannels(a)))
    }

    /// Pick flat-indexed entries into a rank-1 value.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.data(a);
        if indices.is_empty() {
            return Err(Error::arg("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", src.len())));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(&[indices.len()], out)?;
        Ok(self.push(t, &[a], Op::Gather { input: a, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, &[a], Op::Reshape(a)))
    }

    // ------------------------------------------------------------ backward

    /// Accumulate d(root)/d(node) into every reachable node requiring grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::arg(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &c)| *a = *a + c),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Reduce a broadcast gradient back to an operand's shape.
    fn unbroadcast(&self, operand: Var, g: Vec<T>) -> Vec<T> {
        if self.value(operand).numel() == 1 && g.len() != 1 {
            vec![g.into_iter().sum()]
        } else {
            g
        }
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let bcast = |d: &[T], k: usize| if d.len() == 1 { d[0] } else { d[k] };
        let n = g.len();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, geom } => {
                let mut v = Vec::with_capacity(3);
                if self.nodes[input.0].requires_grad {
                    v.push((*input, conv::backward_input(*geom, self.data(*kernel), g)));
                }
                if self.nodes[kernel.0].requires_grad {
                    v.push((*kernel, conv::backward_kernel(*geom, self.data(*input), g)));
                }
                if self.nodes[bias.0].requires_grad {
                    v.push((*bias, conv::backward_bias(*geom, g)));
                }
                v
            }
            Op::Add(a, b) => vec![
                (*a, self.unbroadcast(*a, g.to_vec())),
                (*b, self.unbroadcast(*b, g.to_vec())),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.unbroadcast(*a, g.to_vec())),
                (*b, self.unbroadcast(*b, g.iter().map(|&x| -x).collect())),
            ],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ga = (0..n).map(|k| g[k] * bcast(db, k)).collect();
                let gb = (0..n).map(|k| g[k] * bcast(da, k)).collect();
                vec![(*a, self.unbroadcast(*a, ga)), (*b, self.unbroadcast(*b, gb))]
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ga = (0..n).map(|k| g[k] / bcast(db, k)).collect();
                let gb = (0..n)
                    .map(|k| {
                        let y = bcast(db, k);
                        -g[k] * bcast(da, k) / (y * y)
                    })
                    .collect();
                vec![(*a, self.unbroadcast(*a, ga)), (*b, self.unbroadcast(*b, gb))]
            }
            Op::Scale(a, f) => {
                let f = T::of(*f);
                vec![(*a, g.iter().map(|&x| x * f).collect())]
            }
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = self.data(*a);
                vec![(*a, (0..n).map(|k| if x[k] > T::zero() { g[k] } else { T::zero() }).collect())]
            }
            Op::Sigmoid(a) => {
                let (lo, hi) = (T::of(SIGMOID_EPS), T::one() - T::of(SIGMOID_EPS));
                let gx = (0..n)
                    .map(|k| {
                        let s = out[k];
                        if s <= lo || s >= hi {
                            T::zero()
                        } else {
                            g[k] * s * (T::one() - s)
                        }
                    })
                    .collect();
                vec![(*a, gx)]
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                let (lo, hi) = (T::of(*lo), T::of(*hi));
                vec![(*a, (0..n).map(|k| if x[k] < lo || x[k] > hi { T::zero() } else { g[k] }).collect())]
            }
            Op::Square(a) => {
                let x = self.data(*a);
                vec![(*a, (0..n).map(|k| g[k] * (x[k] + x[k])).collect())]
            }
            Op::Log(a) => {
                let x = self.data(*a);
                vec![(*a, (0..n).map(|k| g[k] / x[k]).collect())]
            }
            Op::SoftmaxChannels(a) => {
                let (c, h, w) = chw(node.value.shape()).expect("recorded shape");
                let plane = h * w;
                let mut gx = vec![T::zero(); n];
                for p in 0..plane {
                    let dot = (0..c).fold(T::zero(), |s, ch| s + g[ch * plane + p] * out[ch * plane + p]);
                    for ch in 0..c {
                        let k = ch * plane + p;
                        gx[k] = out[k] * (g[k] - dot);
                    }
                }
                vec![(*a, gx)]
            }
            Op::Upsample { input, out_hw } => {
                let dims = chw(self.shape(*input)).expect("recorded shape");
                vec![(*input, spatial::upsample_backward(g, dims, *out_hw))]
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[k];
                }
                vec![(*input, gx)]
            }
            Op::BlockSum { input, block } => {
                let dims = chw(self.shape(*input)).expect("recorded shape");
                vec![(*input, spatial::block_sum_backward(g, dims, *block))]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let m = self.value(*a).numel();
                vec![(*a, vec![g[0] / T::of(m as f64); m])]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).numel();
                        let slice = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, slice)
                    })
                    .collect()
            }
            Op::SliceChannels { input, start } => {
                let (_, h, w) = chw(self.shape(*input)).expect("recorded shape");
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                gx[start * h * w..start * h * w + n].copy_from_slice(g);
                vec![(*input, gx)]
            }
            Op::BroadcastChannels(a) => {
                let plane = self.value(*a).numel();
                let mut gx = vec![T::zero(); plane];
                for chunk in g.chunks(plane) {
                    gx.iter_mut().zip(chunk).for_each(|(d, &s)| *d = *d + s);
                }
                vec![(*a, gx)]
            }
            Op::Gather { input, indices } => {
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                for (k, &src) in indices.iter().enumerate() {
                    gx[src] = gx[src] + g[k];
                }
                vec![(*input, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        }
    }
}

#[cfg(test)]
mod tests;
