//! Raw forward kernels over row-major buffers. Shapes are validated by the
//! caller in `graph.rs`.

use super::tensor::strides;

/// Window geometry shared by `im2col` and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if input.len() != 4 || stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return None;
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if h < kernel_h || w < kernel_w {
            return None;
        }
        Some(ConvGeometry {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (h - kernel_h) / stride + 1,
            out_w: (w - kernel_w) / stride + 1,
        })
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    pub fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.batch * self.out_h * self.out_w,
            self.channels * self.kernel_h * self.kernel_w,
        ]
    }

    /// Visits every (column-matrix offset, image offset) pair that falls inside
    /// the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.channels * self.kernel_h * self.kernel_w;
        for n in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (n * self.out_h + oy) * self.out_w + ox;
                    for c in 0..self.channels {
                        for ky in 0..self.kernel_h {
                            let y = (oy * self.stride + ky) as isize - self.padding as isize;
                            if y < 0 || y >= self.height as isize {
                                continue;
                            }
                            for kx in 0..self.kernel_w {
                                let x = (ox * self.stride + kx) as isize - self.padding as isize;
                                if x < 0 || x >= self.width as isize {
                                    continue;
                                }
                                let col = (c * self.kernel_h + ky) * self.kernel_w + kx;
                                let img = ((n * self.channels + c) * self.height + y as usize)
                                    * self.width
                                    + x as usize;
                                f(row * patch + col, img);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Average-pooling geometry. Output extent is `floor((H - k) / s) + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], kernel: usize, stride: usize) -> Option<Self> {
        if input.len() != 4 || kernel == 0 || stride == 0 || input[2] < kernel || input[3] < kernel
        {
            return None;
        }
        Some(PoolGeometry {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            kernel,
            stride,
            out_h: (input[2] - kernel) / stride + 1,
            out_w: (input[3] - kernel) / stride + 1,
        })
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    pub fn pooled_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        for plane in 0..self.batch * self.channels {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let out = (plane * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let y = oy * self.stride + ky;
                            let x = ox * self.stride + kx;
                            f(out, (plane * self.height + y) * self.width + x);
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col(geom: &ConvGeometry, image: &[f64]) -> Vec<f64> {
    let shape = geom.cols_shape();
    let mut cols = vec![0.0; shape[0] * shape[1]];
    geom.for_each_tap(|c, i| cols[c] = image[i]);
    cols
}

pub fn col2im(geom: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let mut image = vec![0.0; geom.batch * geom.channels * geom.height * geom.width];
    geom.for_each_tap(|c, i| image[i] += cols[c]);
    image
}

pub fn avg_pool(geom: &PoolGeometry, image: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (geom.kernel * geom.kernel) as f64;
    let mut out = vec![0.0; geom.batch * geom.channels * geom.out_h * geom.out_w];
    geom.for_each_tap(|o, i| out[o] += image[i]);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn avg_pool_adjoint(geom: &PoolGeometry, pooled: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (geom.kernel * geom.kernel) as f64;
    let mut image = vec![0.0; geom.batch * geom.channels * geom.height * geom.width];
    geom.for_each_tap(|o, i| image[i] += pooled[o] * scale);
    image
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// For each element of an `out_shape` tensor (row-major), the offset of the
/// element it reads in a source whose per-axis strides are `src_strides`
/// (already aligned to `out_shape`, zero on broadcast axes).
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    offsets
}

fn aligned_strides(src_shape: &[usize], target_shape: &[usize]) -> Vec<usize> {
    let lead = target_shape.len() - src_shape.len();
    let s = strides(src_shape);
    (0..target_shape.len())
        .map(|ax| {
            if ax < lead || src_shape[ax - lead] == 1 {
                0
            } else {
                s[ax - lead]
            }
        })
        .collect()
}

pub fn broadcast_to(src: &[f64], src_shape: &[usize], target: &[usize]) -> Vec<f64> {
    gather_offsets(target, &aligned_strides(src_shape, target))
        .into_iter()
        .map(|o| src[o])
        .collect()
}

pub fn sum_to(src: &[f64], src_shape: &[usize], target: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; target.iter().product()];
    let offsets = gather_offsets(src_shape, &aligned_strides(target, src_shape));
    for (v, o) in src.iter().zip(offsets) {
        out[o] += v;
    }
    out
}

pub fn permute(src: &[f64], src_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let s = strides(src_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    gather_offsets(&out_shape, &out_strides)
        .into_iter()
        .map(|o| src[o])
        .collect()
}

/// (outer, axis extent, inner) block decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn narrow(src: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    out
}

pub fn embed(src: &[f64], shape: &[usize], axis: usize, start: usize, full: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Maximum along `axis` and, for every output element, the position of the
/// first maximal entry.
pub fn max_axis(src: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut values = Vec::with_capacity(outer * inner);
    let mut args = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..extent {
                let v = src[(o * extent + a) * inner + i];
                if v > best || (a == 0 && v.is_nan()) {
                    best = v;
                    arg = a;
                }
            }
            values.push(best);
            args.push(arg);
        }
    }
    (values, args)
}
