//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] owns every intermediate value created during a forward pass.
//! Handles ([`Var`]) index into that arena. Calling [`Graph::backward`] walks
//! the tape in reverse and returns one gradient buffer per reachable node.
//! A graph is confined to one thread; independent graphs are independent.

use std::collections::HashMap;

use super::kernels::{col2im, gemm_acc, im2col, transpose, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Neg,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Sigmoid,
    LeakyRelu(T),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind<T>, x: Var },
    Scale { x: Var, factor: T },
    Offset { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Sum { x: Var },
    SumChannels { x: Var },
    Concat { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Deconv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    StraightThrough { surrogate: Var },
    NormalBinMass { d: Var, sigma: Var, delta: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` is not on a
    /// differentiable path to the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Adds parameter gradients into the store. Parameters that appear in the
    /// graph but are not on a path to the loss receive explicit zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            match &self.grads[node] {
                Some(g) => store.accumulate_grad(id, g),
                None => store.touch_grad(id),
            }
        }
    }

    /// Drops everything except the parameter gradients.
    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let entries = self
            .params
            .iter()
            .map(|&(id, node)| (id, self.grads[node].take()))
            .collect();
        ParamGrads { entries }
    }
}

/// Parameter gradients of one backward pass, detached from the graph.
pub struct ParamGrads<T> {
    entries: Vec<(ParamId, Option<Vec<T>>)>,
}

impl<T: Scalar> ParamGrads<T> {
    /// Same contract as [`Gradients::accumulate_into`].
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.entries {
            match g {
                Some(g) => store.accumulate_grad(*id, g),
                None => store.touch_grad(*id),
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of all nodes recorded at or after `mark` (a previous `len()`).
    pub fn shapes_since(&self, mark: usize) -> impl Iterator<Item = &[usize]> {
        self.nodes[mark.min(self.nodes.len())..]
            .iter()
            .map(|n| n.value.shape())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (used for gradient checks and inputs).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let trainable = p.trainable;
        let v = self.push(p.value.clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary { kind, a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Sigmoid => {
                // split by sign so exp never overflows
                if v >= T::ZERO {
                    T::ONE / (T::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::ONE + e)
                }
            }
            UnaryKind::LeakyRelu(slope) => {
                if v > T::ZERO {
                    v
                } else {
                    v * slope
                }
            }
        };
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, Op::Unary { kind, x }, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let value = self.value(x).map(|v| v + offset);
        let needs = self.needs(x);
        self.push(value, Op::Offset { x }, needs)
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, needs)
    }

    // ---- reductions and layout --------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    /// `[n, c, h, w] -> [n, 1, h, w]`
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n * h * w];
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (o, &v) in out[b * h * w..(b + 1) * h * w].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::SumChannels { x },
            needs,
        ))
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match batch/spatial extents of {:?}",
                    self.shape(p),
                    self.shape(parts[0])
                )));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                let src = self.value(p).data();
                out.extend_from_slice(&src[b * pc * h * w..(b + 1) * pc * h * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![n, total_c, h, w], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Channels `start..start+len` of a 4-d tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "slice {start}..{} out of {c} channels",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for b in 0..n {
            let off = (b * c + start) * h * w;
            out.extend_from_slice(&src[off..off + len * h * w]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, len, h, w], out),
            Op::SliceChannels { x, start },
            needs,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let srow = &s[(y / factor) * w..(y / factor + 1) * w];
                for (x, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = srow[x / factor];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample { x, factor },
            needs,
        ))
    }

    // ---- convolution -------------------------------------------------------

    /// 2-d convolution. `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let g = ConvGeom::conv(cin, h, wd, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit input {h}x{wd}"
            ))
        })?;
        let (rows, cols) = (g.rows(), g.cols());
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::ZERO; n * cout * cols];
        let mut col = vec![T::ZERO; rows * cols];
        for img in 0..n {
            im2col(&xs[img * cin * h * wd..(img + 1) * cin * h * wd], &g, &mut col);
            let o = &mut out[img * cout * cols..(img + 1) * cout * cols];
            if let Some(b) = b {
                let bs = self.value(b).data();
                for (co, chunk) in o.chunks_exact_mut(cols).enumerate() {
                    chunk.fill(bs[co]);
                }
            }
            gemm_acc(ws, &col, o, cout, rows, cols);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, g.out_h, g.out_w], out),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] with the same
    /// weight tensor). `w` is `[c_in, c_out, k, k]`, `b` is `[c_out]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "deconv2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("deconv2d: stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "deconv2d: bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let span_h = (h.max(1) - 1) * stride + k;
        let span_w = (wd.max(1) - 1) * stride + k;
        if h == 0 || wd == 0 || span_h <= 2 * pad || span_w <= 2 * pad {
            return Err(Error::shape(format!(
                "deconv2d: padding {pad} consumes the whole {span_h}x{span_w} output"
            )));
        }
        let (oh, ow) = (span_h - 2 * pad, span_w - 2 * pad);
        let g = ConvGeom::conv(cout, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::shape("deconv2d: inconsistent geometry"))?;
        let (rows, cols) = (g.rows(), g.cols());
        let wt = transpose(self.value(w).data(), cin, rows);
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; n * cout * oh * ow];
        let mut col = vec![T::ZERO; rows * cols];
        for img in 0..n {
            col.fill(T::ZERO);
            gemm_acc(&wt, &xs[img * cin * cols..(img + 1) * cin * cols], &mut col, rows, cin, cols);
            let o = &mut out[img * cout * oh * ow..(img + 1) * cout * oh * ow];
            col2im(&col, &g, o);
            if let Some(b) = b {
                let bs = self.value(b).data();
                for (co, chunk) in o.chunks_exact_mut(oh * ow).enumerate() {
                    for v in chunk {
                        *v += bs[co];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, oh, ow], out),
            Op::Deconv {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    // ---- special -----------------------------------------------------------

    /// Forward value of `forward`, gradient routed unchanged to `surrogate`.
    pub fn straight_through(&mut self, forward: Var, surrogate: Var) -> Result<Var> {
        if self.shape(forward) != self.shape(surrogate) {
            return Err(Error::shape(format!(
                "straight_through: forward {:?} vs surrogate {:?}",
                self.shape(forward),
                self.shape(surrogate)
            )));
        }
        let value = self.value(forward).clone();
        let needs = self.needs(surrogate);
        Ok(self.push(value, Op::StraightThrough { surrogate }, needs))
    }

    /// Probability mass of the bin `[d - delta/2, d + delta/2]` under `N(0, sigma)`.
    ///
    /// Evaluated on the lower tail (`-|d|`) so that far-from-mean bins keep
    /// full relative precision.
    pub fn normal_bin_mass(&mut self, d: Var, sigma: Var, delta: Var) -> Result<Var> {
        let s = self.shape(d).to_vec();
        if self.shape(sigma) != s.as_slice() || self.shape(delta) != s.as_slice() {
            return Err(Error::shape(format!(
                "normal_bin_mass: offsets {:?}, sigma {:?}, delta {:?}",
                s,
                self.shape(sigma),
                self.shape(delta)
            )));
        }
        let half = T::from_f64(0.5);
        let dv = self.value(d).data();
        let sv = self.value(sigma).data();
        let qv = self.value(delta).data();
        let data: Vec<T> = (0..dv.len())
            .map(|i| {
                let (u, l) = bin_edges(dv[i], sv[i], qv[i], half);
                normal_cdf(u) - normal_cdf(l)
            })
            .collect();
        let needs = self.needs(d) || self.needs(sigma) || self.needs(delta);
        Ok(self.push(
            Tensor::from_parts(s, data),
            Op::NormalBinMass { d, sigma, delta },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients {
            grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`Graph::backward`] and adds the parameter gradients into `store`.
    /// Repeated calls accumulate until the store's gradients are reset.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let sa = self.shape(a);
                let sb = self.shape(b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let same = sa == sb;
                let ia = if same { Vec::new() } else { broadcast_index(out_shape, sa) };
                let ib = if same { Vec::new() } else { broadcast_index(out_shape, sb) };
                let at = |k: usize| if same { k } else { ia[k] };
                let bt = |k: usize| if same { k } else { ib[k] };
                if self.needs(a) {
                    let mut ga = vec![T::ZERO; av.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * bv[bt(k)],
                            BinaryKind::Div => gk / bv[bt(k)],
                        };
                        ga[at(k)] += d;
                    }
                    self.add_grad(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![T::ZERO; bv.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * av[at(k)],
                            BinaryKind::Div => {
                                let y = bv[bt(k)];
                                -gk * av[at(k)] / (y * y)
                            }
                        };
                        gb[bt(k)] += d;
                    }
                    self.add_grad(grads, b, gb);
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let half = T::from_f64(0.5);
                let gx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| match *kind {
                        UnaryKind::Neg => -gk,
                        UnaryKind::Exp => gk * yv[k],
                        UnaryKind::Ln => gk / xv[k],
                        UnaryKind::Abs => {
                            if xv[k] > T::ZERO {
                                gk
                            } else if xv[k] < T::ZERO {
                                -gk
                            } else {
                                T::ZERO
                            }
                        }
                        UnaryKind::Sqrt => gk * half / yv[k],
                        UnaryKind::Sigmoid => gk * yv[k] * (T::ONE - yv[k]),
                        UnaryKind::LeakyRelu(slope) => {
                            if xv[k] > T::ZERO {
                                gk
                            } else {
                                gk * slope
                            }
                        }
                    })
                    .collect();
                self.add_grad(grads, *x, gx);
            }
            Op::Scale { x, factor } => {
                let gx = g.iter().map(|&v| v * *factor).collect();
                self.add_grad(grads, *x, gx);
            }
            Op::Offset { x } => self.add_grad(grads, *x, g.to_vec()),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gk, &v)| if v >= *lo && v <= *hi { gk } else { T::ZERO })
                    .collect();
                self.add_grad(grads, *x, gx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.add_grad(grads, *x, vec![g[0]; n]);
            }
            Op::SumChannels { x } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![T::ZERO; n * c * hw];
                for b in 0..n {
                    let src = &g[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        gx[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let (n, total_c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            gp.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        self.add_grad(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let len = node.value.shape()[1];
                let mut gx = vec![T::ZERO; n * c * hw];
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    gx[dst..dst + len * hw].copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                self.add_grad(grads, *x, gx);
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![T::ZERO; planes * h * w];
                for plane in 0..planes {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(g, *x, *w, *b, *stride, *pad, grads),
            Op::Deconv {
                x,
                w,
                b,
                stride,
                pad,
            } => self.deconv_backward(g, node.value.shape(), *x, *w, *b, *stride, *pad, grads),
            Op::StraightThrough { surrogate } => self.add_grad(grads, *surrogate, g.to_vec()),
            Op::NormalBinMass { d, sigma, delta } => {
                let half = T::from_f64(0.5);
                let dv = self.value(*d).data();
                let sv = self.value(*sigma).data();
                let qv = self.value(*delta).data();
                let n = dv.len();
                let (mut gd, mut gs, mut gq) = (vec![T::ZERO; n], vec![T::ZERO; n], vec![T::ZERO; n]);
                for k in 0..n {
                    let (u, l) = bin_edges(dv[k], sv[k], qv[k], half);
                    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
                    let sign = if dv[k] > T::ZERO {
                        T::ONE
                    } else if dv[k] < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    };
                    gd[k] = -g[k] * sign * (pu - pl) / sv[k];
                    gq[k] = g[k] * (pu + pl) * half / sv[k];
                    gs[k] = -g[k] * (u * pu - l * pl) / sv[k];
                }
                self.add_grad(grads, *d, gd);
                self.add_grad(grads, *sigma, gs);
                self.add_grad(grads, *delta, gq);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.value(x);
        let ws = self.value(w);
        let s = xs.shape();
        let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let cout = ws.shape()[0];
        let k = ws.shape()[2];
        let geo = ConvGeom::conv(cin, h, wd, k, stride, pad).expect("validated in forward");
        let (rows, cols) = (geo.rows(), geo.cols());
        if let Some(b) = b {
            if self.needs(b) {
                let mut gb = vec![T::ZERO; cout];
                for img in 0..n {
                    for (co, chunk) in g[img * cout * cols..(img + 1) * cout * cols]
                        .chunks_exact(cols)
                        .enumerate()
                    {
                        for &v in chunk {
                            gb[co] += v;
                        }
                    }
                }
                self.add_grad(grads, b, gb);
            }
        }
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gw = vec![T::ZERO; if need_w { cout * rows } else { 0 }];
        let mut gx = vec![T::ZERO; if need_x { xs.len() } else { 0 }];
        let wt = if need_x { transpose(ws.data(), cout, rows) } else { Vec::new() };
        let mut col = vec![T::ZERO; rows * cols];
        for img in 0..n {
            let gout = &g[img * cout * cols..(img + 1) * cout * cols];
            if need_w {
                im2col(&xs.data()[img * cin * h * wd..(img + 1) * cin * h * wd], &geo, &mut col);
                let col_t = transpose(&col, rows, cols);
                gemm_acc(gout, &col_t, &mut gw, cout, cols, rows);
            }
            if need_x {
                col.fill(T::ZERO);
                gemm_acc(&wt, gout, &mut col, rows, cout, cols);
                col2im(&col, &geo, &mut gx[img * cin * h * wd..(img + 1) * cin * h * wd]);
            }
        }
        if need_w {
            self.add_grad(grads, w, gw);
        }
        if need_x {
            self.add_grad(grads, x, gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deconv_backward(
        &self,
        g: &[T],
        out_shape: &[usize],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.value(x);
        let ws = self.value(w);
        let s = xs.shape();
        let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
        let k = ws.shape()[2];
        let geo = ConvGeom::conv(cout, oh, ow, k, stride, pad).expect("validated in forward");
        let (rows, cols) = (geo.rows(), geo.cols());
        debug_assert_eq!(cols, h * wd);
        if let Some(b) = b {
            if self.needs(b) {
                let mut gb = vec![T::ZERO; cout];
                for img in 0..n {
                    for (co, chunk) in g[img * cout * oh * ow..(img + 1) * cout * oh * ow]
                        .chunks_exact(oh * ow)
                        .enumerate()
                    {
                        for &v in chunk {
                            gb[co] += v;
                        }
                    }
                }
                self.add_grad(grads, b, gb);
            }
        }
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gw = vec![T::ZERO; if need_w { cin * rows } else { 0 }];
        let mut gx = vec![T::ZERO; if need_x { xs.len() } else { 0 }];
        let mut col = vec![T::ZERO; rows * cols];
        for img in 0..n {
            im2col(&g[img * cout * oh * ow..(img + 1) * cout * oh * ow], &geo, &mut col);
            if need_x {
                gemm_acc(ws.data(), &col, &mut gx[img * cin * cols..(img + 1) * cin * cols], cin, rows, cols);
            }
            if need_w {
                let col_t = transpose(&col, rows, cols);
                gemm_acc(&xs.data()[img * cin * cols..(img + 1) * cin * cols], &col_t, &mut gw, cin, cols, rows);
            }
        }
        if need_w {
            self.add_grad(grads, w, gw);
        }
        if need_x {
            self.add_grad(grads, x, gx);
        }
    }
}

fn bin_edges<T: Scalar>(d: T, sigma: T, delta: T, half: T) -> (T, T) {
    let c = -d.abs();
    ((c + delta * half) / sigma, (c - delta * half) / sigma)
}

/// Standard normal CDF.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (-x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erfc()
}

/// Standard normal density.
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.398_942_280_401_432_7) * (-(x * x) * T::from_f64(0.5)).exp()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For every flat index of `out`, the flat index into a broadcast operand.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unrelated_leaf_has_no_gradient_path() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let p = g.leaf(Tensor::new(&[2], vec![5.0, 6.0]).unwrap());
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(p).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let mask = g.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let z = g.leaf(Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.mul(mask, z).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 4.0, 3.0, 8.0]);
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(mask).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(grads.wrt(z).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn bin_mass_of_unit_gaussian_center() {
        let mut g = Graph::<f64>::new();
        let d = g.constant(Tensor::scalar(0.0));
        let s = g.constant(Tensor::scalar(1.0));
        let q = g.constant(Tensor::scalar(1.0));
        let p = g.normal_bin_mass(d, s, q).unwrap();
        assert!((g.value(p).data()[0] - 0.382_924_922_548_026).abs() < 1e-12);
    }
}
