//! Batched matrix product over the last two axes.
//!
//! A tensor `(N, B, R, C)` is read as `N·B` row-major `R×C` matrices.

use crate::error::{ensure_config, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest flat index touched by an `rows×cols` view with the given strides.
fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "gemm: negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

/// Safe front for [`Scalar::gemm`]: `c ← a·b + beta·c` with bounds checked once.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    beta: T,
    c: &mut [T],
    c_strides: (isize, isize),
) {
    assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs view out of bounds");
    assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs view out of bounds");
    assert!(span(m, n, c_strides) <= c.len(), "gemm: output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every view was checked against its slice above and `c` is a
    // unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            a_strides,
            b.as_ptr(),
            b_strides,
            beta,
            c.as_mut_ptr(),
            c_strides,
        )
    }
}

fn dims(shape: [usize; 4], transposed: bool) -> (usize, usize) {
    if transposed {
        (shape[3], shape[2])
    } else {
        (shape[2], shape[3])
    }
}

/// `op(a) · op(b)` where `op` optionally transposes each matrix.
pub fn bmm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    ensure_config!(
        sa[0] == sb[0] && sa[1] == sb[1],
        "bmm: batch extents differ ({:?} vs {:?})",
        sa,
        sb
    );
    let (m, k) = dims(sa, ta);
    let (k2, p) = dims(sb, tb);
    ensure_config!(k == k2, "bmm: inner extents differ ({k} vs {k2})");
    let batches = sa[0] * sa[1];
    let mut out = Tensor::zeros([sa[0], sa[1], m, p]);
    let (ad, bd) = (a.data(), b.data());
    let (a_len, b_len) = (sa[2] * sa[3], sb[2] * sb[3]);
    for (bi, o) in out.data_mut().chunks_mut(m * p).enumerate().take(batches) {
        let am = &ad[bi * a_len..(bi + 1) * a_len];
        let bm = &bd[bi * b_len..(bi + 1) * b_len];
        for i in 0..m {
            let orow = &mut o[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = if ta { am[kk * sa[3] + i] } else { am[i * sa[3] + kk] };
                if tb {
                    for (j, ov) in orow.iter_mut().enumerate() {
                        *ov += av * bm[j * sb[3] + kk];
                    }
                } else {
                    let brow = &bm[kk * sb[3]..kk * sb[3] + p];
                    for (ov, &bv) in orow.iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `op(a)·op(b)` with respect to `a` and `b`.
pub fn bmm_backward<T: Scalar>(
    gy: &Tensor<T>,
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ga = if ta {
        bmm(b, tb, gy, true)?
    } else {
        bmm(gy, false, b, !tb)?
    };
    let gb = if tb {
        bmm(gy, true, a, ta)?
    } else {
        bmm(a, !ta, gy, false)?
    };
    Ok((ga, gb))
}
