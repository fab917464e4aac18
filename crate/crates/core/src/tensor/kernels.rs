// Forward kernels shared by the graph and by plain-tensor helpers.
// All reductions run in a fixed sequential order.

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds a plain triple loop beats GEMM packing.
const SMALL_GEMM: usize = 2048;
/// Inner dimensions up to this size use a row-axpy loop.
const SMALL_K: usize = 8;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute<F: Real>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", x.shape(), axes));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        // Iterate output in row-major order, copying contiguous inner runs
        // when the innermost axis is unchanged.
        let inner = if axes[rank - 1] == rank - 1 { out_shape[rank - 1] } else { 1 };
        let outer_rank = if inner > 1 { rank - 1 } else { rank };
        let mut idx = vec![0usize; outer_rank];
        let src = x.data();
        let runs = n / inner;
        for _ in 0..runs {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.extend_from_slice(&src[off..off + inner]);
            for ax in (0..outer_rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Rows of `a` (viewed as `(m, k)`) times `b` `(k, n)`, or `b^T` when
/// `trans_b` and `b` is `(n, k)`.
pub(crate) fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
    if b.rank() != 2 || a.rank() == 0 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let k = a.last_dim();
    let (bk, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if k != bk {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let m = a.numel() / k.max(1);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = vec![F::zero(); m * n];
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    gemm_auto(m, k, n, a.data(), k as isize, 1, b.data(), rsb, csb, &mut out, n as isize, 1);
    Tensor::new(shape, out)
}

/// `c += a·b` choosing between GEMM and a plain loop by size.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_auto<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    c: &mut [F],
    rsc: isize,
    csc: isize,
) {
    if k <= SMALL_K && csb == 1 && csc == 1 {
        // Row-wise axpy: packing costs more than the product for tiny k.
        for i in 0..m {
            let row = &mut c[(i as isize * rsc) as usize..(i as isize * rsc) as usize + n];
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                let brow = &b[(p as isize * rsb) as usize..(p as isize * rsb) as usize + n];
                for (cv, &bv) in row.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    } else if m * n * k <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for p in 0..k {
                    acc += a[(i as isize * rsa + p as isize * csa) as usize]
                        * b[(p as isize * rsb + j as isize * csb) as usize];
                }
                c[(i as isize * rsc + j as isize * csc) as usize] += acc;
            }
        }
    } else {
        F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, F::one(), c, rsc, csc);
    }
}

/// Batched product: `a` `(g, m, k)` times `b` `(g, k, n)` (or `(g, n, k)`
/// transposed).
pub(crate) fn bmm<F: Real>(a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); g * m * n];
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    for gi in 0..g {
        gemm_auto(
            m,
            k,
            n,
            &a.data()[gi * m * k..(gi + 1) * m * k],
            k as isize,
            1,
            &b.data()[gi * k * n..(gi + 1) * k * n],
            rsb,
            csb,
            &mut out[gi * m * n..(gi + 1) * m * n],
            n as isize,
            1,
        );
    }
    Tensor::new(vec![g, m, n], out)
}

pub(crate) fn softmax_last<F: Real>(x: &Tensor<F>, tau: F) -> Tensor<F> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    if n == 0 {
        return Tensor::new(x.shape().to_vec(), out).unwrap();
    }
    for row in out.chunks_mut(n) {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = ((*v - mx) / tau).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn log_softmax_last<F: Real>(x: &Tensor<F>, tau: F) -> Tensor<F> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter() {
            s += ((*v - mx) / tau).exp();
        }
        let lse = s.ln();
        for v in row.iter_mut() {
            *v = (*v - mx) / tau - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Zero-padded 3×3 patches of a channel-last `(b, h·w, c)` grid, giving
/// `(b, h·w, 9·c)` ordered (dy, dx, channel).
pub(crate) fn im2col3x3<F: Real>(x: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    if x.rank() != 3 || x.shape()[1] != h * w {
        return Err(Error::shape("im2col3x3", x.shape(), &[h, w]));
    }
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let mut out = vec![F::zero(); b * h * w * 9 * c];
    let src = x.data();
    for bi in 0..b {
        for yy in 0..h {
            for xx in 0..w {
                let o = ((bi * h + yy) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = yy as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let d = o + (dy * 3 + dx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, h * w, 9 * c], out)
}

pub(crate) fn upsample2x<F: Real>(x: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    if x.rank() != 3 || x.shape()[1] != h * w {
        return Err(Error::shape("upsample2x", x.shape(), &[h, w]));
    }
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); b * h2 * w2 * c];
    let src = x.data();
    for bi in 0..b {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let s = ((bi * h + yy / 2) * w + xx / 2) * c;
                let d = ((bi * h2 + yy) * w2 + xx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(vec![b, h2 * w2, c], out)
}

/// `tanh`-form GELU and its derivative.
#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(op, a, b));
    }
    Ok(numel(b))
}
