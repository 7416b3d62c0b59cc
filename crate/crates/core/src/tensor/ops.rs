//! Forward and backward kernels. Shapes are validated here; the tape in
//! `graph.rs` only wires inputs to outputs.

use super::{numel, Element, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up,
    Down,
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column for tap `kx` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if k > padded {
        return Err(Error::invalid(format!(
            "conv2d: kernel extent {k} exceeds padded input {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::invalid(format!(
            "conv2d: ({len}+2*{pad}-{k}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv_geometry(
    input: Shape,
    kernel: Shape,
    bias_len: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [n, cin, h, w] = input;
    let [cout, kcin, kh, kw] = kernel;
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    if kcin != cin {
        return Err(Error::invalid(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if bias_len != cout {
        return Err(Error::invalid(format!(
            "conv2d: bias has {bias_len} entries, kernel has {cout} outputs"
        )));
    }
    let ho = out_extent(h, kh, stride, pad)?;
    let wo = out_extent(w, kw, stride, pad)?;
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Unrolls one batch item into a `K x P` column matrix.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `K x P` column gradient back onto one batch item.
fn col2im<T: Element>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let (lo, hi) = g.valid_ox(kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w + ix0;
                    let src = &col[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dx[base..base + src.len()].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in src.iter().enumerate() {
                            let d = &mut dx[base + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `bias` may have any shape holding
/// `Cout` values.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kernel.shape(), bias.len(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut col = vec![T::zero(); k * p];
    for n in 0..g.n {
        im2col(&g, &input.data()[n * in_per..(n + 1) * in_per], &mut col);
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        for (co, chunk) in dst.chunks_mut(p.max(1)).enumerate().take(g.cout) {
            chunk.fill(bias.data()[co]);
        }
        T::gemm(g.cout, k, p, kernel.data(), (k, 1), &col, (p, 1), T::one(), dst, p);
    }
    Tensor::new([g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of `conv2d` for whichever operands are requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias_len: usize,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    want: (bool, bool, bool),
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let g = conv_geometry(input.shape(), kernel.shape(), bias_len, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut dx = want.0.then(|| vec![T::zero(); input.len()]);
    let mut dk = want.1.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want.2.then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); k * p];
    for n in 0..g.n {
        let go = &grad_out[n * out_per..(n + 1) * out_per];
        if let Some(dk) = dk.as_mut() {
            im2col(&g, &input.data()[n * in_per..(n + 1) * in_per], &mut col);
            // dK (Cout x K) += dOut (Cout x P) * col^T (P x K)
            T::gemm(g.cout, p, k, go, (p, 1), &col, (1, p), T::one(), dk, k);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (K x P) = K^T (K x Cout) * dOut (Cout x P)
            T::gemm(k, g.cout, p, kernel.data(), (1, k), go, (p, 1), T::zero(), &mut col, p);
            col2im(&g, &col, &mut dx[n * in_per..(n + 1) * in_per]);
        }
        if let Some(db) = db.as_mut() {
            for (co, b) in db.iter_mut().enumerate() {
                *b = *b + go[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
    Ok((dx, dk, db))
}

pub fn leaky_relu<T: Element>(input: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    if !(slope >= T::zero() && slope < T::one()) {
        return Err(Error::invalid(format!("leaky_relu: slope {slope:?} not in [0,1)")));
    }
    if input.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("leaky_relu: NaN input".into()));
    }
    Ok(input.map(|v| if v > T::zero() { v } else { v * slope }))
}

pub(crate) fn leaky_relu_backward<T: Element>(input: &Tensor<T>, slope: T, grad_out: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { g * slope })
        .collect()
}

pub fn resize_nearest<T: Element>(input: &Tensor<T>, factor: usize, dir: Resize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("resize_nearest: factor must be positive"));
    }
    let [n, c, h, w] = input.shape();
    match dir {
        Resize::Up => {
            let (oh, ow) = (h * factor, w * factor);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for plane in input.data().chunks(h * w).take(n * c) {
                for y in 0..oh {
                    let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                    for x in 0..ow {
                        out.push(row[x / factor]);
                    }
                }
            }
            Tensor::new([n, c, oh, ow], out)
        }
        Resize::Down => {
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::invalid(format!(
                    "resize_nearest: {h}x{w} not divisible by {factor}"
                )));
            }
            let (oh, ow) = (h / factor, w / factor);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for plane in input.data().chunks(h * w).take(n * c) {
                for y in 0..oh {
                    for x in 0..ow {
                        out.push(plane[y * factor * w + x * factor]);
                    }
                }
            }
            Tensor::new([n, c, oh, ow], out)
        }
    }
}

pub(crate) fn resize_nearest_backward<T: Element>(
    in_shape: Shape,
    factor: usize,
    dir: Resize,
    grad_out: &[T],
) -> Vec<T> {
    let [_, _, h, w] = in_shape;
    let mut dx = vec![T::zero(); numel(&in_shape)];
    match dir {
        Resize::Up => {
            let (oh, ow) = (h * factor, w * factor);
            for (plane, go) in dx.chunks_mut(h * w).zip(grad_out.chunks(oh * ow)) {
                for y in 0..oh {
                    for x in 0..ow {
                        let d = &mut plane[(y / factor) * w + x / factor];
                        *d = *d + go[y * ow + x];
                    }
                }
            }
        }
        Resize::Down => {
            let (oh, ow) = (h / factor, w / factor);
            for (plane, go) in dx.chunks_mut(h * w).zip(grad_out.chunks(oh * ow)) {
                for y in 0..oh {
                    for x in 0..ow {
                        plane[y * factor * w + x * factor] = go[y * ow + x];
                    }
                }
            }
        }
    }
    dx
}

fn zip_with<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// `scale * x + shift` elementwise.
pub fn affine<T: Element>(x: &Tensor<T>, scale: T, shift: T) -> Tensor<T> {
    x.map(|v| scale * v + shift)
}

pub fn abs<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.abs())
}

pub(crate) fn abs_backward<T: Element>(x: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            if v > T::zero() {
                g
            } else if v < T::zero() {
                -g
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Mean over every element, accumulated in f64. Returns a `(1,1,1,1)` tensor.
pub fn reduce_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::invalid("reduce_mean: empty tensor"));
    }
    Ok(Tensor::scalar(T::of(x.mean())))
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::invalid(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
        data.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

pub(crate) fn concat_backward<T: Element>(a: Shape, b: Shape, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let [n, ca, h, w] = a;
    let cb = b[1];
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut da = Vec::with_capacity(n * pa);
    let mut db = Vec::with_capacity(n * pb);
    for chunk in grad_out.chunks(pa + pb).take(n) {
        da.extend_from_slice(&chunk[..pa]);
        db.extend_from_slice(&chunk[pa..]);
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([2, 3, 4, 5], |[n, c, y, xx]| (n * 60 + c * 20 + y * 5 + xx) as f32 * 0.1);
        let mut k = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            let o = k.offset([c, c, 0, 0]);
            k.data_mut()[o] = 1.0;
        }
        let y = conv2d(&x, &k, &Tensor::zeros([3, 1, 1, 1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = Tensor::from_fn([1, 2, 5, 5], |[_, c, y, xx]| (c + y * xx) as f32);
        let y = conv2d(&x, &Tensor::zeros([4, 2, 3, 3]), &Tensor::zeros([4, 1, 1, 1]), 1, 1).unwrap();
        assert_eq!(y.shape(), [1, 4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, &Tensor::zeros([1, 1, 1, 1]), 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 5, 5]);
        // channel mismatch
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &Tensor::zeros([1, 1, 1, 1]), 1, 1).is_err());
        // (5 + 2 - 4) / 2 is not exact
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 4, 4]), &Tensor::zeros([1, 1, 1, 1]), 2, 1).is_err());
        // kernel larger than padded input
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 8, 8]), &Tensor::zeros([1, 1, 1, 1]), 1, 0).is_err());
    }

    #[test]
    fn strided_conv_extent() {
        let x = Tensor::<f32>::zeros([1, 3, 64, 64]);
        let y = conv2d(&x, &Tensor::zeros([8, 3, 4, 4]), &Tensor::zeros([8, 1, 1, 1]), 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 8, 32, 32]);
    }

    #[test]
    fn leaky_relu_values() {
        let y = leaky_relu(&t([1, 1, 1, 2], &[1.0, -1.0]), 0.2).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-7);
        assert!(matches!(
            leaky_relu(&t([1, 1, 1, 1], &[f32::NAN]), 0.2),
            Err(Error::Numeric(_))
        ));
        assert!(leaky_relu(&t([1, 1, 1, 1], &[0.0]), 1.0).is_err());
    }

    #[test]
    fn resize_cases() {
        let x = t([1, 1, 1, 1], &[7.0]);
        let up = resize_nearest(&x, 2, Resize::Up).unwrap();
        assert_eq!(up.shape(), [1, 1, 2, 2]);
        assert!(up.data().iter().all(|&v| v == 7.0));
        let y = Tensor::from_fn([1, 2, 3, 3], |[_, c, r, q]| (c * 9 + r * 3 + q) as f32);
        assert_eq!(resize_nearest(&y, 1, Resize::Up).unwrap(), y);
        assert!(resize_nearest(&y, 2, Resize::Down).is_err());
    }

    #[test]
    fn mean_and_concat() {
        let m = reduce_mean(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(m.item().unwrap(), 2.5);
        let c = concat_channels(&Tensor::<f32>::zeros([1, 3, 8, 8]), &Tensor::zeros([1, 1, 8, 8])).unwrap();
        assert_eq!(c.shape(), [1, 4, 8, 8]);
        assert!(concat_channels(&Tensor::<f32>::zeros([1, 3, 8, 8]), &Tensor::zeros([1, 1, 8, 4])).is_err());
        assert!(add(&Tensor::<f32>::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 1])).is_err());
    }
}
