//! Dense `C × H × W` feature tensors and the layer kernels of the
//! restoration network, each with its hand-written backward pass.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, NumCast};

/// Floating point type the network can run in.
pub trait Scalar:
    Float + NumCast + Default + Debug + Send + Sync + AddAssign + Sum + 'static
{
    /// `c = op(a) · op(b) + beta · c`, all row-major; `op` transposes when
    /// the flag is set. `a` is `m × k` after `op`, `b` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, ta: bool, tb: bool) -> [isize; 4] {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    [rsa, csa, rsb, csb]
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                ta: bool,
                b: &[$t],
                tb: bool,
                beta: $t,
                c: &mut [$t],
            ) {
                assert!(
                    a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
                    "gemm operand too small"
                );
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, ta, tb);
                // SAFETY: operand lengths are checked above and the strides
                // describe dense row-major (or transposed) storage within them.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            (self.h, self.w),
            (other.h, other.w),
            "concat spatial mismatch"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.c + other.c, self.h, self.w, data)
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Tensor<T>, Tensor<T>) {
        let (h, w, total) = (self.h, self.w, self.c);
        let mut head = self.data;
        let tail = head.split_off(c * h * w);
        (
            Tensor::from_vec(c, h, w, head),
            Tensor::from_vec(total - c, h, w, tail),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the unfolded input, `cin · k · k`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `lo..hi` whose input index `o·stride + off - pad` falls
/// inside `0..n_in`.
fn valid_span(off: usize, g: &ConvGeom, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(off).div_ceil(g.stride);
    let hi = if n_in + g.pad > off {
        ((n_in + g.pad - off - 1) / g.stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `(cin·k·k) × (oh·ow)` matrix, zero padded.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut col = vec![T::zero(); g.patch_len() * p];
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_span(ky, g, g.h, oh);
            for kx in 0..g.k {
                let (x0, x1) = valid_span(kx, g, g.w, ow);
                if x0 == x1 {
                    continue;
                }
                let ix0 = x0 * g.stride + kx - g.pad;
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[iy * g.w + ix0..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * ow + x0..oy * ow + x1];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&src_row[..x1 - x0]);
                    } else {
                        for (d, &s) in dst_row.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                            *d = s;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return col.to_vec();
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_span(ky, g, g.h, oh);
            for kx in 0..g.k {
                let (x0, x1) = valid_span(kx, g, g.w, ow);
                if x0 == x1 {
                    continue;
                }
                let ix0 = x0 * g.stride + kx - g.pad;
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[iy * g.w + ix0..(iy + 1) * g.w];
                    let src_row = &src[oy * ow + x0..oy * ow + x1];
                    for (d, &s) in dst_row.iter_mut().step_by(g.stride).zip(src_row) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward. Returns the output and the unfolded input, which
/// the backward pass needs.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> (Tensor<T>, Vec<T>) {
    debug_assert_eq!((x.c, x.h, x.w), (g.cin, g.h, g.w));
    let col = im2col(&x.data, g);
    let p = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.cout * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    T::gemm(
        g.cout,
        g.patch_len(),
        p,
        weight,
        false,
        &col,
        false,
        T::one(),
        &mut out,
    );
    (Tensor::from_vec(g.cout, g.out_h(), g.out_w(), out), col)
}

/// Convolution backward: accumulates into `dw`/`db` and returns the input
/// gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    dy: &[T],
    col: &[T],
    weight: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let p = g.out_h() * g.out_w();
    let kk = g.patch_len();
    for (co, row) in dy.chunks(p).enumerate() {
        db[co] += row.iter().copied().sum::<T>();
    }
    T::gemm(g.cout, p, kk, dy, false, col, true, T::one(), dw);
    if !need_dx {
        return None;
    }
    let mut dcol = vec![T::zero(); kk * p];
    T::gemm(kk, g.cout, p, weight, true, dy, false, T::zero(), &mut dcol);
    Some(col2im(&dcol, g))
}

pub fn leaky_relu_inplace<T: Scalar>(x: &mut Tensor<T>, slope: T) {
    for v in x.data.iter_mut() {
        if *v <= T::zero() {
            *v = *v * slope;
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the
/// activation output (its sign equals the input's sign).
pub fn leaky_relu_backward_inplace<T: Scalar>(grad: &mut [T], output: &[T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = *g * slope;
        }
    }
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data.iter_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward_inplace<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        *g = *g * y * (T::one() - y);
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Vec::with_capacity(x.c * h2 * w2);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h2 {
            let row = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for xx in 0..w2 {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::from_vec(x.c, h2, w2, out)
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}
