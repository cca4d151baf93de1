//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built on.
//!
//! A [`Tensor`] is an immutable value: its buffer is reference counted so a
//! reshape is a reinterpretation of the same storage, never a copy.

use std::fmt;
use std::sync::Arc;

use crate::error::{contract, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(contract("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(contract(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is known to match `data`; internal kernels only.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// True when both tensors share one storage buffer.
    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(contract("item", format!("tensor of shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the shape without touching the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Swaps the two axes of a rank-2 tensor (copies).
    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Tensor::from_parts(vec![c, r], transpose_raw(&self.data, r, c)))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(contract(op, format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(contract(op, format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax along the middle extent of an (outer, len, inner) view.
pub(crate) fn softmax_raw(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + r;
            let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    out
}

/// Softmax of a whole slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    softmax_raw(x, 1, x.len(), 1)
}

/// Memory order of a rank-3 feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[channels, height, width]`
    Chw,
    /// `[height, width, channels]`
    Hwc,
}

impl Layout {
    /// (channels, height, width) of a rank-3 shape in this layout.
    pub fn dims(self, shape: &[usize]) -> (usize, usize, usize) {
        match self {
            Layout::Chw => (shape[0], shape[1], shape[2]),
            Layout::Hwc => (shape[2], shape[0], shape[1]),
        }
    }

    pub fn shape(self, c: usize, h: usize, w: usize) -> Vec<usize> {
        match self {
            Layout::Chw => vec![c, h, w],
            Layout::Hwc => vec![h, w, c],
        }
    }

    #[inline]
    pub(crate) fn offset(self, c: usize, y: usize, x: usize, channels: usize, h: usize, w: usize) -> usize {
        match self {
            Layout::Chw => (c * h + y) * w + x,
            Layout::Hwc => (y * w + x) * channels + c,
        }
    }
}

/// One output coordinate's two source taps along an axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre sampling with edge clamping:
/// `src = (i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) struct ResizePlan {
    pub layout: Layout,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    ys: Vec<Tap>,
    xs: Vec<Tap>,
}

impl ResizePlan {
    pub fn new(layout: Layout, shape: &[usize], oh: usize, ow: usize) -> Result<Self> {
        if shape.len() != 3 {
            return Err(contract("bilinear_resize", format!("expected rank 3, got {shape:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(contract("bilinear_resize", "target size must be positive"));
        }
        let (c, h, w) = layout.dims(shape);
        Ok(Self {
            layout,
            c,
            h,
            w,
            oh,
            ow,
            ys: bilinear_taps(h, oh),
            xs: bilinear_taps(w, ow),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        self.layout.shape(self.c, self.oh, self.ow)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (c, h, w, oh, ow) = (self.c, self.h, self.w, self.oh, self.ow);
        let mut out = vec![0.0; c * oh * ow];
        for (oy, ty) in self.ys.iter().enumerate() {
            for (ox, tx) in self.xs.iter().enumerate() {
                for ch in 0..c {
                    let at = |y, xx| x[self.layout.offset(ch, y, xx, c, h, w)];
                    let top = at(ty.lo, tx.lo) * (1.0 - tx.frac) + at(ty.lo, tx.hi) * tx.frac;
                    let bot = at(ty.hi, tx.lo) * (1.0 - tx.frac) + at(ty.hi, tx.hi) * tx.frac;
                    out[self.layout.offset(ch, oy, ox, c, oh, ow)] = top * (1.0 - ty.frac) + bot * ty.frac;
                }
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): scatters output gradients back to the source grid.
    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let (c, h, w, oh, ow) = (self.c, self.h, self.w, self.oh, self.ow);
        let mut gx = vec![0.0; c * h * w];
        for (oy, ty) in self.ys.iter().enumerate() {
            for (ox, tx) in self.xs.iter().enumerate() {
                for ch in 0..c {
                    let go = g[self.layout.offset(ch, oy, ox, c, oh, ow)];
                    let mut put = |y, xx, wgt: f64| gx[self.layout.offset(ch, y, xx, c, h, w)] += go * wgt;
                    put(ty.lo, tx.lo, (1.0 - ty.frac) * (1.0 - tx.frac));
                    put(ty.lo, tx.hi, (1.0 - ty.frac) * tx.frac);
                    put(ty.hi, tx.lo, ty.frac * (1.0 - tx.frac));
                    put(ty.hi, tx.hi, ty.frac * tx.frac);
                }
            }
        }
        gx
    }
}

/// Bilinear resize of a constant (non-differentiable) feature map.
pub fn resize_bilinear(x: &Tensor, layout: Layout, oh: usize, ow: usize) -> Result<Tensor> {
    let plan = ResizePlan::new(layout, x.shape(), oh, ow)?;
    Ok(Tensor::from_parts(plan.out_shape(), plan.forward(x.data())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let r = t.reshape(&[6, 4]).unwrap();
        assert!(r.shares_storage(&t));
        assert_eq!(r.reshape(&[2, 3, 4]).unwrap(), t);
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.91).cos());
        let ab = matmul_raw(a.data(), b.data(), 3, 4, 2);
        let bt = b.transpose2().unwrap();
        let ab_nt = matmul_nt_raw(a.data(), bt.data(), 3, 4, 2);
        let at = a.transpose2().unwrap();
        let ab_tn = matmul_tn_raw(at.data(), b.data(), 4, 3, 2);
        for i in 0..6 {
            assert!((ab[i] - ab_nt[i]).abs() < 1e-14);
            assert!((ab[i] - ab_tn[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn taps_identity_and_clamp() {
        for t in bilinear_taps(5, 5).iter() {
            assert_eq!(t.frac, 0.0);
        }
        // 2 -> 4 upsampling: first output clamps at the edge.
        let taps = bilinear_taps(2, 4);
        assert_eq!((taps[0].lo, taps[0].frac), (0, 0.0));
        assert_eq!((taps[1].lo, taps[1].frac), (0, 0.25));
        assert_eq!((taps[2].lo, taps[2].frac), (0, 0.75));
        assert_eq!((taps[3].lo, taps[3].frac), (1, 0.0));
    }

    #[test]
    fn layouts_resize_consistently() {
        let chw = Tensor::from_fn(&[3, 4, 6], |i| ((i * 7) % 11) as f64);
        let (c, h, w) = (3, 4, 6);
        let hwc = Tensor::from_fn(&[h, w, c], |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            chw.data()[(ch * h + y) * w + x]
        });
        let a = resize_bilinear(&chw, Layout::Chw, 3, 5).unwrap();
        let b = resize_bilinear(&hwc, Layout::Hwc, 3, 5).unwrap();
        for ch in 0..c {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(a.data()[(ch * 3 + y) * 5 + x], b.data()[(y * 5 + x) * c + ch]);
                }
            }
        }
    }
}
