//! Composite operations built from the differentiable primitives.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;

impl Graph {
    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.sum_to(a, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a)?.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keep_dim`.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keep_dim: bool) -> Result<Var, AutodiffError> {
        let shape = self.shape(a)?.to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Shape {
                op: "sum_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let mut target = shape.clone();
        target[axis] = 1;
        let s = self.sum_to(a, &target)?;
        if keep_dim {
            return Ok(s);
        }
        let mut squeezed = shape;
        squeezed.remove(axis);
        self.reshape(s, &squeezed)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep_dim: bool) -> Result<Var, AutodiffError> {
        let n = self.shape(a)?.get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis, keep_dim)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum over every element (rank-0 result).
    pub fn max_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a)?.numel();
        let flat = self.reshape(a, &[n])?;
        self.max_axis(flat, 0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.mul(a, a)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a)? != self.shape(b)? {
            return Err(AutodiffError::Shape {
                op: "dot",
                detail: format!("{:?} vs {:?}", self.shape(a)?, self.shape(b)?),
            });
        }
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.dot(a, a)?;
        self.sqrt(s)
    }

    /// `<a, b> / (|a| |b|)`. Both operands must have nonzero norm for the
    /// result (and its derivative) to be finite.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let d = self.dot(a, b)?;
        let na = self.l2_norm(a)?;
        let nb = self.l2_norm(b)?;
        let denom = self.mul(na, nb)?;
        self.div(d, denom)
    }

    /// Row-wise log-softmax over the last axis of a `[N, K]` tensor.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(logits)?.to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::Shape {
                op: "log_softmax",
                detail: format!("expected [N, K], got {shape:?}"),
            });
        }
        // The row maximum only stabilizes the exponent; the result does not
        // depend on it, so it enters as a constant.
        let row_max = self.max_axis(logits, 1)?;
        let row_max = self.detach(row_max)?;
        let row_max = self.reshape(row_max, &[shape[0], 1])?;
        let shifted = self.sub(logits, row_max)?;
        let e = self.exp(shifted)?;
        let s = self.sum_axis(e, 1, true)?;
        let lse = self.log(s)?;
        self.sub(shifted, lse)
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var, AutodiffError> {
        let ls = self.log_softmax(logits)?;
        self.exp(ls)
    }

    /// Mean cross-entropy of softmax(`logits`) against integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(logits)?.to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                detail: format!("logits {shape:?} with {} labels", labels.len()),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        let mut onehot = vec![0.0; n * k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(AutodiffError::Label { label: y, classes: k });
            }
            onehot[i * k + y] = 1.0;
        }
        let onehot = self.leaf(Tensor::new(vec![n, k], onehot)?);
        let ls = self.log_softmax(logits)?;
        let picked = self.mul(ls, onehot)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / n as f64)
    }

    /// 2-D convolution (cross-correlation) of `[N, C, H, W]` input with
    /// `[O, C, kh, kw]` weights and optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        let ws = self.shape(weight)?.to_vec();
        let xs = self.shape(x)?.to_vec();
        if ws.len() != 4 || xs.len() != 4 || ws[1] != xs[1] {
            return Err(AutodiffError::Shape {
                op: "conv2d",
                detail: format!("input {xs:?} with weight {ws:?}"),
            });
        }
        let cols = self.im2col(x, ws[2], ws[3], stride, padding)?;
        let rows = self.shape(cols)?[0];
        let (n, oh) = (xs[0], rows / xs[0]);
        let flat_w = self.reshape(weight, &[ws[0], ws[1] * ws[2] * ws[3]])?;
        let wt = self.transpose(flat_w)?;
        let y = self.matmul(cols, wt)?;
        let y = match bias {
            Some(b) => self.add(y, b)?,
            None => y,
        };
        // Recover (OH, OW) from the column count via the padded geometry.
        let out_w = (xs[3] + 2 * padding - ws[3]) / stride + 1;
        let out_h = oh / out_w;
        let y = self.reshape(y, &[n, out_h, out_w, ws[0]])?;
        self.permute(y, &[0, 3, 1, 2])
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Flattens everything after the leading axis.
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x)?.to_vec();
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    /// Concatenates every tensor, flattened, into one vector.
    pub fn flatten_all(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let flat = parts
            .iter()
            .map(|&p| {
                let n = self.value(p)?.numel();
                self.reshape(p, &[n])
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.concat(&flat, 0)
    }
}
