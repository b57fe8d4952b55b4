use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::tensor::{broadcast_shapes, Tensor};
use super::AutodiffError;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    BroadcastTo(usize),
    SumTo(usize),
    Narrow { src: usize, axis: usize, start: usize },
    Embed { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    MaxAxis { src: usize, axis: usize },
    Gather { src: usize, perm: Arc<Vec<usize>> },
    Im2Col { src: usize, geom: ConvGeometry },
    Col2Im { src: usize, geom: ConvGeometry },
    AvgPool { src: usize, geom: PoolGeometry },
    AvgPoolAdjoint { src: usize, geom: PoolGeometry },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Shift(a) | Reshape(a) | Permute(a, _) | BroadcastTo(a)
            | SumTo(a) | Exp(a) | Log(a) | Sqrt(a) | Abs(a) | Relu(a) => vec![*a],
            Narrow { src, .. }
            | Embed { src, .. }
            | MaxAxis { src, .. }
            | Gather { src, .. }
            | Im2Col { src, .. }
            | Col2Im { src, .. }
            | AvgPool { src, .. }
            | AvgPoolAdjoint { src, .. } => vec![*src],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

/// Append-only computation graph. Every operation evaluates eagerly and
/// caches its output; [`Graph::grad`] appends the derivative computation as
/// further nodes so it can itself be differentiated.
pub struct Graph {
    id: u32,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.graph != self.id || v.index() >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index())
    }

    pub(crate) fn var_at(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index: index as u32,
        }
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.var_at(self.nodes.len() - 1)
    }

    /// Registers a tensor as an input node (differentiable when passed to
    /// [`Graph::grad`]; a constant otherwise).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// A new leaf holding a copy of `v`'s value; no gradient flows through it.
    pub fn detach(&mut self, v: Var) -> Result<Var, AutodiffError> {
        let t = self.value(v)?.clone();
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], AutodiffError> {
        Ok(self.value(v)?.shape())
    }

    pub fn item(&self, v: Var) -> Result<f64, AutodiffError> {
        let t = self.value(v)?;
        if t.numel() != 1 {
            return Err(AutodiffError::NotScalar(t.shape().to_vec()));
        }
        Ok(t.item())
    }

    pub(crate) fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn unary(&mut self, a: Var, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(f);
        Ok(self.push(op(ia), out))
    }

    /// Broadcasts both operands to their common shape, inserting
    /// `broadcast_to` nodes where needed.
    fn conform(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape().to_vec(), self.val(ib).shape().to_vec());
        if sa == sb {
            return Ok((ia, ib));
        }
        let target = broadcast_shapes(&sa, &sb)
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a.index(), b.index()))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = self.conform(name, a, b)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op(ia, ib), out))
    }

    /// Elementwise sum with NumPy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Neg, |x| -x)
    }

    /// `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary(a, |i| Op::Scale(i, c), |x| c * x)
    }

    /// `a + c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Shift, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Abs, f64::abs)
    }

    /// `max(a, 0)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.val(ia).data(), self.val(ib).data(), n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::MatMul(ia, ib), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(ia), out))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of the axes of {shape:?}")));
        }
        let data = kernels::permute(self.val(ia).data(), &shape, perm);
        let out = Tensor::new(perm.iter().map(|&p| shape[p]).collect(), data)?;
        Ok(self.push(Op::Permute(ia, perm.to_vec()), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.permute(a, &[1, 0])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let src = self.val(ia).shape().to_vec();
        if broadcast_shapes(&src, shape).as_deref() != Some(shape) {
            return Err(shape_err("broadcast_to", format!("{src:?} -> {shape:?}")));
        }
        let data = kernels::broadcast_to(self.val(ia).data(), &src, shape);
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::BroadcastTo(ia), out))
    }

    /// Sums `a` down to `shape`, which must broadcast back to `a`'s shape.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let src = self.val(ia).shape().to_vec();
        if shape.len() > src.len() || broadcast_shapes(shape, &src).as_deref() != Some(&src[..]) {
            return Err(shape_err("sum_to", format!("{src:?} -> {shape:?}")));
        }
        let data = kernels::sum_to(self.val(ia).data(), &src, shape);
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::SumTo(ia), out))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("axis {axis} range {start}..{} of {shape:?}", start + len)));
        }
        let data = kernels::narrow(self.val(ia).data(), &shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Narrow { src: ia, axis, start }, out))
    }

    /// Zero-pads `a` along `axis` to extent `full`, placing it at `start`.
    /// Adjoint of [`Graph::narrow`].
    pub fn embed(&mut self, a: Var, axis: usize, start: usize, full: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(shape_err("embed", format!("{shape:?} at {start} along axis {axis} into {full}")));
        }
        let data = kernels::embed(self.val(ia).data(), &shape, axis, start, full);
        let mut out_shape = shape;
        out_shape[axis] = full;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Embed { src: ia, axis, start }, out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let first = idxs
            .first()
            .map(|&i| self.val(i).shape().to_vec())
            .ok_or_else(|| shape_err("concat", "no operands".into()))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.val(i).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let t = self.val(i);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat { parts: idxs, axis }, out))
    }

    /// Maximum along `axis` (the axis is removed). Gradient flows to the first
    /// maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("max_axis", format!("axis {axis} of {shape:?}")));
        }
        let (values, _) = kernels::max_axis(self.val(ia).data(), &shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, values)?;
        Ok(self.push(Op::MaxAxis { src: ia, axis }, out))
    }

    /// Rearranges elements: `out[i] = a[perm[i]]` over the flat data, where
    /// `perm` is a permutation of `0..numel`. The shape is kept.
    pub fn gather(&mut self, a: Var, perm: Arc<Vec<usize>>) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let src = self.val(ia);
        let n = src.numel();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("gather", format!("index list of length {} is not a permutation of {n}", perm.len())));
        }
        let data = perm.iter().map(|&p| src.data()[p]).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(Op::Gather { src: ia, perm }, out))
    }

    /// Sorts each position independently along the leading axis (ascending,
    /// stable). The result no longer depends on the order of the leading
    /// entries, bit for bit.
    pub fn sort_leading(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a)?.to_vec();
        let Some(&n) = shape.first() else {
            return Err(shape_err("sort_leading", "rank-0 input".into()));
        };
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a)?.data();
        let mut perm = vec![0; n * inner];
        let mut column: Vec<usize> = Vec::with_capacity(n);
        for p in 0..inner {
            column.clear();
            column.extend(0..n);
            column.sort_by(|&x, &y| data[x * inner + p].total_cmp(&data[y * inner + p]));
            for (i, &src) in column.iter().enumerate() {
                perm[i * inner + p] = src * inner + p;
            }
        }
        self.gather(a, Arc::new(perm))
    }

    /// Unfolds `[N, C, H, W]` into `[N*OH*OW, C*kh*kw]` patch rows.
    pub fn im2col(&mut self, a: Var, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        let geom = ConvGeometry::new(&shape, kernel_h, kernel_w, stride, padding).ok_or_else(|| {
            shape_err("im2col", format!("input {shape:?}, kernel {kernel_h}x{kernel_w}, stride {stride}, padding {padding}"))
        })?;
        self.im2col_geom(ia, geom)
    }

    pub(crate) fn im2col_geom(&mut self, ia: usize, geom: ConvGeometry) -> Result<Var, AutodiffError> {
        if self.val(ia).shape() != geom.image_shape() {
            return Err(shape_err("im2col", format!("{:?} vs {:?}", self.val(ia).shape(), geom.image_shape())));
        }
        let out = Tensor::new(geom.cols_shape(), kernels::im2col(&geom, self.val(ia).data()))?;
        Ok(self.push(Op::Im2Col { src: ia, geom }, out))
    }

    pub(crate) fn col2im_geom(&mut self, ia: usize, geom: ConvGeometry) -> Result<Var, AutodiffError> {
        if self.val(ia).shape() != geom.cols_shape() {
            return Err(shape_err("col2im", format!("{:?} vs {:?}", self.val(ia).shape(), geom.cols_shape())));
        }
        let out = Tensor::new(geom.image_shape(), kernels::col2im(&geom, self.val(ia).data()))?;
        Ok(self.push(Op::Col2Im { src: ia, geom }, out))
    }

    /// Average pooling over `[N, C, H, W]` with square windows; output extent
    /// is `floor((H - kernel) / stride) + 1`.
    pub fn avg_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let shape = self.val(ia).shape().to_vec();
        let geom = PoolGeometry::new(&shape, kernel, stride)
            .ok_or_else(|| shape_err("avg_pool2d", format!("input {shape:?}, kernel {kernel}, stride {stride}")))?;
        self.avg_pool_geom(ia, geom)
    }

    pub(crate) fn avg_pool_geom(&mut self, ia: usize, geom: PoolGeometry) -> Result<Var, AutodiffError> {
        if self.val(ia).shape() != geom.image_shape() {
            return Err(shape_err("avg_pool2d", format!("{:?} vs {:?}", self.val(ia).shape(), geom.image_shape())));
        }
        let out = Tensor::new(geom.pooled_shape(), kernels::avg_pool(&geom, self.val(ia).data()))?;
        Ok(self.push(Op::AvgPool { src: ia, geom }, out))
    }

    pub(crate) fn avg_pool_adjoint_geom(&mut self, ia: usize, geom: PoolGeometry) -> Result<Var, AutodiffError> {
        if self.val(ia).shape() != geom.pooled_shape() {
            return Err(shape_err("avg_pool2d_adjoint", format!("{:?} vs {:?}", self.val(ia).shape(), geom.pooled_shape())));
        }
        let out = Tensor::new(geom.image_shape(), kernels::avg_pool_adjoint(&geom, self.val(ia).data()))?;
        Ok(self.push(Op::AvgPoolAdjoint { src: ia, geom }, out))
    }
}
