//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert tape: every op appends a node whose inputs were
//! created earlier, so reverse node order is a valid topological order for
//! the backward sweep.

pub(crate) mod kernels;

use std::collections::BTreeMap;

use kernels::{AttnGeom, ConvGeom, NormGeom, TemporalGeom};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    AddChannel { x: Var, e: Var, groups: usize },
    AddBias { x: Var, b: Var },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    TemporalConv { x: Var, w: Var, b: Option<Var>, geom: TemporalGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, geom: NormGeom, stats: Vec<(f64, f64)> },
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Permute { x: Var, map: Vec<usize> },
    Reshape(Var),
    ConcatChannels { a: Var, b: Var, n: usize, ca: usize, cb: usize, plane: usize },
    Upsample2x { x: Var, h: usize, w: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations plus the values they produced.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records every op for backward.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: BTreeMap::new(),
        }
    }

    /// A graph that only evaluates; nothing is tracked.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: requires_grad && self.record,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.leaf(t, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes bound so far, sorted by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::silu);
        self.push(v, &[a], Op::Silu(a))
    }

    /// `x[n, c, ..] + e[n / (N / G), c]` for `x: [N, C, ..]`, `e: [G, C]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xs, es) = (self.shape(x).to_vec(), self.shape(e).to_vec());
        if xs.len() < 2 || es.len() != 2 || es[1] != xs[1] || xs[0] % es[0] != 0 {
            return Err(Error::shape("add_channel", format!("x {xs:?}, e {es:?}")));
        }
        let groups = es[0];
        let per = xs[0] / groups;
        let c = xs[1];
        let plane: usize = xs[2..].iter().product();
        let ev = self.value(e).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (n, ch) = (i / c, i % c);
            let add = ev[(n / per) * c + ch];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push(out, &[x, e], Op::AddChannel { x, e, groups })
    }

    /// Broadcast-adds `b: [C]` over the last axis of `x: [.., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::shape("add_bias", format!("x {xs:?}, b {bs:?}")));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(bs[0]) {
            row.iter_mut().zip(&bv).for_each(|(v, &bb)| *v += bb);
        }
        self.push(out, &[x, b], Op::AddBias { x, b })
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        let t = Tensor::new([m, n], out)?;
        self.push(t, &[a, b], Op::MatMul(a, b))
    }

    /// Square odd-sized 2D convolution over `[N, Cin, H, W]` with zero padding
    /// `k / 2`; weight `[Cout, Cin, k, k]`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        if stride == 0 || stride > 2 {
            return Err(Error::shape("conv2d", format!("stride {stride} not in {{1, 2}}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
        };
        let mut out = vec![T::zero(); geom.n * geom.cout * geom.out_h() * geom.out_w()];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new([geom.n, geom.cout, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, &inputs, Op::Conv2d { x, w, b, geom })
    }

    /// Convolution along the frame axis. `x: [clips·frames, Cin, ..]`,
    /// weight `[Cout, Cin, k]` (odd `k`), zero padded at clip boundaries.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, frames: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() < 2 || ws.len() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 || frames == 0 || xs[0] % frames != 0 {
            return Err(Error::shape(
                "temporal_conv",
                format!("x {xs:?}, w {ws:?}, frames {frames}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("temporal_conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = TemporalGeom {
            clips: xs[0] / frames,
            frames,
            cin: xs[1],
            cout: ws[0],
            k: ws[2],
            plane: xs[2..].iter().product(),
        };
        let mut out = vec![T::zero(); xs[0] * geom.cout * geom.plane];
        kernels::temporal_conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut shape = xs.clone();
        shape[1] = geom.cout;
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, &inputs, Op::TemporalConv { x, w, b, geom })
    }

    /// Group normalization over `[N, C, ..]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::shape("group_norm", format!("x {xs:?}, groups {groups}")));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "group_norm",
                format!("affine {:?}/{:?} for {} channels", self.shape(gamma), self.shape(beta), xs[1]),
            ));
        }
        let geom = NormGeom {
            n: xs[0],
            c: xs[1],
            groups,
            spatial: xs[2..].iter().product(),
        };
        let mut out = vec![T::zero(); self.value(x).numel()];
        let stats = kernels::group_norm_forward(
            &geom,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            GROUP_NORM_EPS,
            &mut out,
        );
        let t = Tensor::new(xs, out)?;
        self.push(t, &[x, gamma, beta], Op::GroupNorm { x, gamma, beta, geom, stats })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::softmax_forward(self.value(x).data(), outer, xs[axis], inner, &mut out);
        let t = Tensor::new(xs.clone(), out)?;
        self.push(t, &[x], Op::Softmax { x, outer, axis: xs[axis], inner })
    }

    /// Exact scaled dot-product attention over `q: [B, Lq, d]`,
    /// `k: [B, Lk, d]`, `v: [B, Lk, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let geom = AttnGeom {
            batch: qs[0],
            lq: qs[1],
            lk: ks[1],
            d: qs[2],
            dv: vs[2],
        };
        let mut out = vec![T::zero(); geom.batch * geom.lq * geom.dv];
        let probs = kernels::attention_forward(
            &geom,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
        );
        let t = Tensor::new([geom.batch, geom.lq, geom.dv], out)?;
        let probs = if self.record { probs } else { Vec::new() };
        self.push(t, &[q, k, v], Op::Attention { q, k, v, geom, probs })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for {xs:?}")));
        }
        let map = kernels::permute_index_map(&xs, perm);
        let src = self.value(x).data();
        let data: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(t, &[x], Op::Permute { x, map })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, &[x], Op::Reshape(x))
    }

    /// Concatenates `[N, Ca, ..]` and `[N, Cb, ..]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::shape("concat_channels", format!("{as_:?} ++ {bs:?}")));
        }
        let (n, ca, cb) = (as_[0], as_[1], bs[1]);
        let plane: usize = as_[2..].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        let mut shape = as_.clone();
        shape[1] = ca + cb;
        let t = Tensor::new(shape, data)?;
        self.push(t, &[a, b], Op::ConcatChannels { a, b, n, ca, cb, plane })
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new([xs[0], xs[1], 2 * h, 2 * w], data)?;
        self.push(t, &[x], Op::Upsample2x { x, h, w })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64_lossy(s)), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, T::from_f64_lossy(1.0 / n))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x · w + b` on the last axis of a 2D input.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            // Interior gradients are not kept; leaves keep theirs.
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot!(v) {
                        s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = slot!(*a) {
                    for ((d, &gg), &o) in s.iter_mut().zip(g).zip(bv) {
                        *d += gg * o;
                    }
                }
                if let Some(s) = slot!(*b) {
                    for ((d, &gg), &o) in s.iter_mut().zip(g).zip(av) {
                        *d += gg * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *k);
                }
            }
            Op::Silu(a) => {
                let av = val(*a);
                if let Some(s) = slot!(*a) {
                    for ((d, &gg), &x) in s.iter_mut().zip(g).zip(av) {
                        *d += gg * kernels::silu_grad(x);
                    }
                }
            }
            Op::AddChannel { x, e, groups } => {
                let xs = nodes[x.0].value.shape();
                let (c, per) = (xs[1], xs[0] / groups);
                let plane: usize = xs[2..].iter().product();
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
                if let Some(s) = slot!(*e) {
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        let (n, ch) = (i / c, i % c);
                        let acc: f64 = chunk.iter().map(|v| v.to_f64_lossy()).sum();
                        s[(n / per) * c + ch] += T::from_f64_lossy(acc);
                    }
                }
            }
            Op::AddBias { x, b } => {
                let c = nodes[b.0].value.numel();
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
                if let Some(s) = slot!(*b) {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (as_, bs) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (as_[0], as_[1], bs[1]);
                if tracked(*a) {
                    let bv = val(*b);
                    let s = slot!(*a).expect("tracked");
                    gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), T::one(), s);
                }
                if tracked(*b) {
                    let av = val(*a);
                    let s = slot!(*b).expect("tracked");
                    gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), T::one(), s);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = tracked(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = tracked(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| tracked(*b)).map(|b| vec![T::zero(); nodes[b.0].value.numel()]);
                kernels::conv2d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                accumulate(nodes, grads, *x, dx);
                accumulate(nodes, grads, *w, dw);
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, db);
                }
            }
            Op::TemporalConv { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = tracked(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = tracked(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| tracked(*b)).map(|b| vec![T::zero(); nodes[b.0].value.numel()]);
                kernels::temporal_conv_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                accumulate(nodes, grads, *x, dx);
                accumulate(nodes, grads, *w, dw);
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, geom, stats } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let mut dx = tracked(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = tracked(*gamma).then(|| vec![T::zero(); gv.len()]);
                let mut dbeta = tracked(*beta).then(|| vec![T::zero(); gv.len()]);
                kernels::group_norm_backward(geom, xv, gv, stats, g, dx.as_deref_mut(), dg.as_deref_mut(), dbeta.as_deref_mut());
                accumulate(nodes, grads, *x, dx);
                accumulate(nodes, grads, *gamma, dg);
                accumulate(nodes, grads, *beta, dbeta);
            }
            Op::Softmax { x, outer, axis, inner } => {
                let y = node.value.data();
                if let Some(s) = slot!(*x) {
                    kernels::softmax_backward(y, g, *outer, *axis, *inner, s);
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = tracked(*q).then(|| vec![T::zero(); qv.len()]);
                let mut dk = tracked(*k).then(|| vec![T::zero(); kv.len()]);
                let mut dv = tracked(*v).then(|| vec![T::zero(); vv.len()]);
                kernels::attention_backward(geom, qv, kv, vv, probs, g, dq.as_deref_mut(), dk.as_deref_mut(), dv.as_deref_mut());
                accumulate(nodes, grads, *q, dq);
                accumulate(nodes, grads, *k, dk);
                accumulate(nodes, grads, *v, dv);
            }
            Op::Permute { x, map } => {
                if let Some(s) = slot!(*x) {
                    for (&src, &gg) in map.iter().zip(g) {
                        s[src] += gg;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
            }
            Op::ConcatChannels { a, b, n, ca, cb, plane } => {
                let (la, lb) = (ca * plane, cb * plane);
                if let Some(s) = slot!(*a) {
                    for i in 0..*n {
                        let src = &g[i * (la + lb)..i * (la + lb) + la];
                        s[i * la..(i + 1) * la].iter_mut().zip(src).for_each(|(d, &gg)| *d += gg);
                    }
                }
                if let Some(s) = slot!(*b) {
                    for i in 0..*n {
                        let src = &g[i * (la + lb) + la..(i + 1) * (la + lb)];
                        s[i * lb..(i + 1) * lb].iter_mut().zip(src).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Upsample2x { x, h, w } => {
                let (h, w) = (*h, *w);
                if let Some(s) = slot!(*x) {
                    for (p, plane) in g.chunks(4 * h * w).enumerate() {
                        let dst = &mut s[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn grad_slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    delta: Option<Vec<T>>,
) {
    if let (Some(delta), Some(s)) = (delta, grad_slot(nodes, grads, v)) {
        s.iter_mut().zip(&delta).for_each(|(d, &x)| *d += x);
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Silu(..) => "silu",
        Op::AddChannel { .. } => "add_channel",
        Op::AddBias { .. } => "add_bias",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::TemporalConv { .. } => "temporal_conv",
        Op::GroupNorm { .. } => "group_norm",
        Op::Softmax { .. } => "softmax",
        Op::Attention { .. } => "attention",
        Op::Permute { .. } => "permute",
        Op::Reshape(..) => "reshape",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Upsample2x { .. } => "upsample2x",
        Op::Sum(..) => "sum",
    }
}

/// Sinusoidal embedding of a (time step or frame rate) position.
pub fn sinusoidal_embedding<T: Scalar>(position: f64, dim: usize) -> Tensor<T> {
    Tensor::new([dim], kernels::sinusoidal(position, dim)).expect("embedding shape")
}

#[cfg(test)]
mod tests;
