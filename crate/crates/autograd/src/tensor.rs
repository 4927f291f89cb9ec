//! Dense row-major `f64` tensors and the numeric kernels behind graph ops.

use std::fmt;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `target` (right-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order and yields the flat
/// offsets into two strided operands.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        f(oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {:?}", self.shape, shape);
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor {
                shape: self.shape.clone(),
                data,
            };
        }
        let shape = broadcast_shape(&self.shape, &other.shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape));
        if other.data.len() == 1 {
            let b = other.data[0];
            let data = self.data.iter().map(|&a| f(a, b)).collect();
            return Tensor { shape, data };
        }
        if self.data.len() == 1 {
            let a = self.data[0];
            let data = other.data.iter().map(|&b| f(a, b)).collect();
            return Tensor { shape, data };
        }
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for_each_offset2(&shape, &sa, &sb, |oa, ob| data.push(f(self.data[oa], other.data[ob])));
        Tensor { shape, data }
    }

    /// Sums broadcast axes away so the result has shape `target`.
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            broadcast_shape(target, &self.shape).as_deref() == Some(&self.shape[..]),
            "cannot sum {:?} down to {:?}",
            self.shape,
            target
        );
        let mut out = vec![0.0; numel(target)];
        if out.len() == 1 {
            out[0] = self.data.iter().sum();
        } else {
            let st = broadcast_strides(target, &self.shape);
            let own = strides(&self.shape);
            for_each_offset2(&self.shape, &own, &st, |oi, ot| out[ot] += self.data[oi]);
        }
        Tensor {
            shape: target.to_vec(),
            data: out,
        }
    }

    /// Expands size-1 (or missing leading) axes to `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            broadcast_shape(&self.shape, target).as_deref() == Some(target),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            target
        );
        let ss = broadcast_strides(&self.shape, target);
        let zero = vec![0; target.len()];
        let mut data = Vec::with_capacity(numel(target));
        for_each_offset2(target, &ss, &zero, |o, _| data.push(self.data[o]));
        Tensor {
            shape: target.to_vec(),
            data,
        }
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 needs a matrix, got {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::narrow`]: embeds into zeros of size `full` along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let len = self.shape[axis];
        assert!(start + len <= full, "pad out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor { shape, data }
    }
}

/// `c = alpha_prev * c + a @ b` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index addressed by the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(input + 2 * self.padding >= kernel, "kernel larger than padded input");
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], d: &ConvDims, g: ConvGeometry, cols: &mut [f64]) {
    let ohw = d.ohw();
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..d.ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * d.ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < d.h && (jj as usize) < d.w {
                            x[(c * d.h + ii as usize) * d.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, g: ConvGeometry, x: &mut [f64]) {
    let ohw = d.ohw();
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii as usize >= d.h {
                        continue;
                    }
                    for oj in 0..d.ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < d.w {
                            x[(c * d.h + ii as usize) * d.w + jj as usize] += src[oi * d.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(c: usize, h: usize, w: usize, kh: usize, kw: usize, g: ConvGeometry) -> ConvDims {
    ConvDims {
        c,
        h,
        w,
        kh,
        kw,
        oh: g.output_size(h, kh),
        ow: g.output_size(w, kw),
    }
}

/// Cross-correlation of `x` `[N,C,H,W]` with `w` `[O,C,KH,KW]` → `[N,O,OH,OW]`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d shape mismatch {:?} * {:?}", xs, ws);
    let (n, o) = (xs[0], ws[0]);
    let d = conv_dims(xs[1], xs[2], xs[3], ws[2], ws[3], g);
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let mut cols = vec![0.0; ckk * ohw];
    let mut out = vec![0.0; n * o * ohw];
    let in_len = d.c * d.h * d.w;
    for s in 0..n {
        im2col(&x.data[s * in_len..(s + 1) * in_len], &d, g, &mut cols);
        gemm(o, ckk, ohw, &w.data, (ckk, 1), &cols, (ohw, 1), &mut out[s * o * ohw..(s + 1) * o * ohw], 0.0);
    }
    Tensor::new(vec![n, o, d.oh, d.ow], out)
}

/// Gradient of [`conv2d`] with respect to its input, given the output gradient `gy`.
pub fn conv2d_grad_input(gy: &Tensor, w: &Tensor, input_hw: (usize, usize), g: ConvGeometry) -> Tensor {
    let (gs, ws) = (gy.shape(), w.shape());
    assert!(gs.len() == 4 && ws.len() == 4 && gs[1] == ws[0], "conv2d_grad_input shape mismatch");
    let (n, o) = (gs[0], ws[0]);
    let d = conv_dims(ws[1], input_hw.0, input_hw.1, ws[2], ws[3], g);
    assert_eq!((d.oh, d.ow), (gs[2], gs[3]), "output gradient has wrong spatial size");
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let in_len = d.c * d.h * d.w;
    let mut cols = vec![0.0; ckk * ohw];
    let mut out = vec![0.0; n * in_len];
    for s in 0..n {
        // cols = W^T @ gy_s
        gemm(ckk, o, ohw, &w.data, (1, ckk), &gy.data[s * o * ohw..(s + 1) * o * ohw], (ohw, 1), &mut cols, 0.0);
        col2im(&cols, &d, g, &mut out[s * in_len..(s + 1) * in_len]);
    }
    Tensor::new(vec![n, d.c, d.h, d.w], out)
}

/// Gradient of [`conv2d`] with respect to its weight, given input `x` and output gradient `gy`.
pub fn conv2d_grad_weight(x: &Tensor, gy: &Tensor, kernel_hw: (usize, usize), g: ConvGeometry) -> Tensor {
    let (xs, gs) = (x.shape(), gy.shape());
    assert!(xs.len() == 4 && gs.len() == 4 && xs[0] == gs[0], "conv2d_grad_weight shape mismatch");
    let (n, o) = (xs[0], gs[1]);
    let d = conv_dims(xs[1], xs[2], xs[3], kernel_hw.0, kernel_hw.1, g);
    assert_eq!((d.oh, d.ow), (gs[2], gs[3]), "output gradient has wrong spatial size");
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let in_len = d.c * d.h * d.w;
    let mut cols = vec![0.0; ckk * ohw];
    let mut out = vec![0.0; o * ckk];
    for s in 0..n {
        im2col(&x.data[s * in_len..(s + 1) * in_len], &d, g, &mut cols);
        // out += gy_s @ cols^T
        gemm(o, ohw, ckk, &gy.data[s * o * ohw..(s + 1) * o * ohw], (ohw, 1), &cols, (1, ohw), &mut out, 1.0);
    }
    Tensor::new(vec![o, d.c, d.kh, d.kw], out)
}
