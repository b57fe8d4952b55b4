//! Reverse sweep. Each derivative rule emits ordinary graph operations, so the
//! returned gradients can be differentiated again.

use super::graph::{Graph, Op, Var};
use super::kernels;
use super::tensor::Tensor;
use super::AutodiffError;

impl Graph {
    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// A `wrt` node that `output` does not depend on gets a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let out = self.idx(output)?;
        let out_value = self.val(out);
        if out_value.numel() != 1 {
            return Err(AutodiffError::NotScalar(out_value.shape().to_vec()));
        }
        if !out_value.is_finite() {
            return Err(AutodiffError::NonFinite { context: "grad output" });
        }
        let targets = wrt.iter().map(|&w| self.idx(w)).collect::<Result<Vec<_>, _>>()?;

        // Nodes whose value depends on at least one requested input.
        let mut live = vec![false; out + 1];
        for &t in &targets {
            if t <= out {
                live[t] = true;
            }
        }
        for i in 0..=out {
            if !live[i] && self.nodes[i].op.parents().iter().any(|&p| live[p]) {
                live[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; out + 1];
        if live[out] {
            let seed = Tensor::full(out_value.shape(), 1.0);
            adjoint[out] = Some(self.leaf(seed));
        }

        for i in (0..=out).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !live[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contribution) in self.vjp(i, &op, g, &live)? {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        targets
            .iter()
            .map(|&t| match adjoint.get(t).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.val(t).shape());
                    Ok(self.leaf(zeros))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of node `i` for each live parent.
    fn vjp(&mut self, i: usize, op: &Op, g: Var, live: &[bool]) -> Result<Vec<(usize, Var)>, AutodiffError> {
        let mut out = Vec::with_capacity(2);
        let me = self.var_at(i);
        let v = |g: &Graph, j: usize| g.var_at(j);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if live[a] {
                    out.push((a, g));
                }
                if live[b] {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if live[a] {
                    out.push((a, g));
                }
                if live[b] {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if live[a] {
                    let vb = v(self, b);
                    out.push((a, self.mul(g, vb)?));
                }
                if live[b] {
                    let va = v(self, a);
                    out.push((b, self.mul(g, va)?));
                }
            }
            Op::Div(a, b) => {
                let vb = v(self, b);
                if live[a] {
                    out.push((a, self.div(g, vb)?));
                }
                if live[b] {
                    let t = self.mul(g, me)?;
                    let t = self.div(t, vb)?;
                    out.push((b, self.neg(t)?));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(g)?)),
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::Shift(a) => out.push((a, g)),
            Op::MatMul(a, b) => {
                if live[a] {
                    let vb = v(self, b);
                    let bt = self.transpose(vb)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if live[b] {
                    let va = v(self, a);
                    let at = self.transpose(va)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::Permute(a, ref perm) => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                out.push((a, self.permute(g, &inverse)?));
            }
            Op::BroadcastTo(a) => {
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.sum_to(g, &shape)?));
            }
            Op::SumTo(a) => {
                let shape = self.val(a).shape().to_vec();
                // Restore reduced axes before broadcasting back.
                let g = self.align_rank(g, shape.len())?;
                out.push((a, self.broadcast_to(g, &shape)?));
            }
            Op::Narrow { src, axis, start } => {
                let full = self.val(src).shape()[axis];
                out.push((src, self.embed(g, axis, start, full)?));
            }
            Op::Embed { src, axis, start } => {
                let len = self.val(src).shape()[axis];
                out.push((src, self.narrow(g, axis, start, len)?));
            }
            Op::Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).shape()[axis];
                    if live[p] {
                        out.push((p, self.narrow(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Exp(a) => out.push((a, self.mul(g, me)?)),
            Op::Log(a) => {
                let va = v(self, a);
                out.push((a, self.div(g, va)?));
            }
            Op::Sqrt(a) => {
                let twice = self.scale(me, 2.0)?;
                out.push((a, self.div(g, twice)?));
            }
            Op::Abs(a) => {
                let sign = self.val(a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                let sign = self.leaf(sign);
                out.push((a, self.mul(g, sign)?));
            }
            Op::Relu(a) => {
                let mask = self.val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::MaxAxis { src, axis } => {
                let shape = self.val(src).shape().to_vec();
                let (_, args) = kernels::max_axis(self.val(src).data(), &shape, axis);
                let (outer, extent, inner) = kernels::split_axis(&shape, axis);
                let mut mask = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for k in 0..inner {
                        mask[(o * extent + args[o * inner + k]) * inner + k] = 1.0;
                    }
                }
                let mask = self.leaf(Tensor::new(shape.clone(), mask)?);
                let mut keep = shape.clone();
                keep[axis] = 1;
                let g = self.reshape(g, &keep)?;
                let g = self.broadcast_to(g, &shape)?;
                out.push((src, self.mul(g, mask)?));
            }
            Op::Gather { src, ref perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((src, self.gather(g, std::sync::Arc::new(inverse))?));
            }
            Op::Im2Col { src, geom } => out.push((src, self.col2im_geom(g.index(), geom)?)),
            Op::Col2Im { src, geom } => out.push((src, self.im2col_geom(g.index(), geom)?)),
            Op::AvgPool { src, geom } => out.push((src, self.avg_pool_adjoint_geom(g.index(), geom)?)),
            Op::AvgPoolAdjoint { src, geom } => out.push((src, self.avg_pool_geom(g.index(), geom)?)),
        }
        Ok(out)
    }

    /// Left-pads `g`'s shape with unit axes up to `rank`.
    fn align_rank(&mut self, g: Var, rank: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(g)?.to_vec();
        if shape.len() == rank {
            return Ok(g);
        }
        let mut padded = vec![1; rank - shape.len()];
        padded.extend(shape);
        self.reshape(g, &padded)
    }
}
