use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Strided read-only matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[cols, rows]` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: 1,
            cs: rows,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Strided mutable destination for [`gemm`].
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c` with every access bounds-checked up front.
pub fn gemm<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output dimension");
    if m == 0 || n == 0 {
        return;
    }
    let c_span = (m - 1) * c.rs + (n - 1) * c.cs + 1;
    assert!(c_span <= c.data.len(), "gemm output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(a.span() <= a.data.len(), "gemm lhs view out of bounds");
    assert!(b.span() <= b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: spans were checked against the slice lengths above and `c`
    // is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

impl<T: Float> Tape<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        self.record("matmul", value, &[a, b], move |ctx, grads| {
            let g = ctx.grad();
            if let Some(ga) = grads.slot(a) {
                // dA = dC * B^T
                gemm(
                    T::one(),
                    MatRef::row_major(g, m, n),
                    MatRef::transposed(ctx.value(b).data(), n, k),
                    T::one(),
                    MatMut::row_major(ga, m, k),
                );
            }
            if let Some(gb) = grads.slot(b) {
                // dB = A^T * dC
                gemm(
                    T::one(),
                    MatRef::transposed(ctx.value(a).data(), k, m),
                    MatRef::row_major(g, m, n),
                    T::one(),
                    MatMut::row_major(gb, k, n),
                );
            }
        })
    }
}
