//! Strided GEMM wrappers over the `matrixmultiply` micro-kernels.

use super::Scalar;

/// A stored row-major block read either as-is or transposed.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            trans,
        }
    }

    /// Logical row count of `op(X)`.
    #[inline]
    pub fn m(&self) -> usize {
        if self.trans {
            self.cols
        } else {
            self.rows
        }
    }

    /// Logical column count of `op(X)`.
    #[inline]
    pub fn n(&self) -> usize {
        if self.trans {
            self.rows
        } else {
            self.cols
        }
    }

    #[inline]
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    /// The `g`-th of `groups` equal row blocks of the stored matrix.
    pub fn group(&self, g: usize, groups: usize) -> Self {
        let rows = self.rows / groups;
        let len = rows * self.cols;
        Self {
            data: &self.data[g * len..(g + 1) * len],
            rows,
            cols: self.cols,
            trans: self.trans,
        }
    }
}

/// `c = alpha * op(a) op(b) + beta * c` with `c` contiguous row-major.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.m(), a.n(), b.n());
    assert_eq!(k, b.m(), "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == T::zero() {
                T::zero()
            } else {
                *v * beta
            };
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views were length-checked against their stored shapes and
    // `c` holds exactly m*n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Block-diagonal batch of GEMMs: group `g` of `c` gets `op(a_g) op(b_g)`.
pub(crate) fn gemm_grouped<T: Scalar>(
    groups: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
) {
    if groups == 1 {
        gemm(alpha, a, b, beta, c);
        return;
    }
    let per = c.len() / groups;
    let mut scratch = (Vec::new(), Vec::new());
    for (g, chunk) in c.chunks_exact_mut(per.max(1)).enumerate().take(groups) {
        let (ag, bg) = (a.group(g, groups), b.group(g, groups));
        if ag.m() * ag.n() * bg.n() <= SMALL_GEMM {
            gemm_small(alpha, ag, bg, beta, chunk, &mut scratch);
        } else {
            gemm(alpha, ag, bg, beta, chunk);
        }
    }
}

// below about this many multiply-adds packing dominates the blocked kernel
const SMALL_GEMM: usize = 1 << 10;

fn contiguous<'a, T: Scalar>(v: View<'a, T>, buf: &'a mut Vec<T>) -> &'a [T] {
    if !v.trans {
        return v.data;
    }
    buf.clear();
    for j in 0..v.cols {
        buf.extend((0..v.rows).map(|i| v.data[i * v.cols + j]));
    }
    buf
}

/// Plain triple loop over row-major copies of the operands.
fn gemm_small<T: Scalar>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    scratch: &mut (Vec<T>, Vec<T>),
) {
    let (m, k, n) = (a.m(), a.n(), b.n());
    assert_eq!(k, b.m(), "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    let a = contiguous(a, &mut scratch.0);
    let b = contiguous(b, &mut scratch.1);
    for (i, crow) in c.chunks_exact_mut(n.max(1)).enumerate().take(m) {
        if beta == T::zero() {
            crow.fill(T::zero());
        } else if beta != T::one() {
            crow.iter_mut().for_each(|v| *v *= beta);
        }
        for (p, brow) in b.chunks_exact(n.max(1)).enumerate().take(k) {
            let aip = alpha * a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}
