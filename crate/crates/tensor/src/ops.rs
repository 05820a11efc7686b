//! Elementwise, reduction and shape operations.

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Tape<T> {
    fn unary<F, D>(&mut self, op: &'static str, a: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let value = self.value(a).map(f);
        self.record(op, value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                let x = ctx.value(a).data();
                let y = ctx.output().data();
                for (i, (&g, acc)) in ctx.grad().iter().zip(ga.iter_mut()).enumerate() {
                    *acc += g * df(x[i], y[i]);
                }
            }
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.record("add", value, &[a, b], move |ctx, grads| {
            grads.accumulate(a, ctx.grad());
            grads.accumulate(b, ctx.grad());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.record("sub", value, &[a, b], move |ctx, grads| {
            grads.accumulate(a, ctx.grad());
            if let Some(gb) = grads.slot(b) {
                for (acc, &g) in gb.iter_mut().zip(ctx.grad()) {
                    *acc -= g;
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.record("mul", value, &[a, b], move |ctx, grads| {
            let g = ctx.grad();
            if let Some(ga) = grads.slot(a) {
                for ((acc, &gi), &yi) in ga.iter_mut().zip(g).zip(ctx.value(b).data()) {
                    *acc += gi * yi;
                }
            }
            if let Some(gb) = grads.slot(b) {
                for ((acc, &gi), &xi) in gb.iter_mut().zip(g).zip(ctx.value(a).data()) {
                    *acc += gi * xi;
                }
            }
        })
    }

    /// Adds a length-`n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.record("add_row", value, &[a, row], move |ctx, grads| {
            grads.accumulate(a, ctx.grad());
            if let Some(gr) = grads.slot(row) {
                for chunk in ctx.grad().chunks(n) {
                    for (acc, &g) in gr.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
            }
        })
    }

    /// `a * scale + shift` per column with constant coefficients.
    pub fn affine_cols(&mut self, a: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let n = self.value(a).cols();
        if scale.len() != n || shift.len() != n {
            return Err(shape_err("affine_cols", format!("{n} columns")));
        }
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for ((x, &s), &t) in chunk.iter_mut().zip(scale).zip(shift) {
                *x = *x * s + t;
            }
        }
        let scale = scale.to_vec();
        self.record("affine_cols", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (acc_row, g_row) in ga.chunks_mut(n).zip(ctx.grad().chunks(n)) {
                    for ((acc, &g), &s) in acc_row.iter_mut().zip(g_row).zip(&scale) {
                        *acc += g * s;
                    }
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, move |_, _| c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, |x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, |x| x.cos(), |x, _| -x.sin())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        self.unary("log", a, |x| x.ln(), |x, _| T::one() / x)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "abs",
            a,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Inverse sigmoid `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`.
    /// The gradient is zero where the clamp is active.
    pub fn logit(&mut self, a: Var, eps: T) -> Result<Var> {
        let hi = T::one() - eps;
        self.unary(
            "logit",
            a,
            move |x| {
                let c = x.max(eps).min(hi);
                (c / (T::one() - c)).ln()
            },
            move |x, _| {
                if x > eps && x < hi {
                    T::one() / (x * (T::one() - x))
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), &[a], move |ctx, grads| {
            let g = ctx.grad()[0];
            if let Some(ga) = grads.slot(a) {
                for acc in ga.iter_mut() {
                    *acc += g;
                }
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(first), t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
            extents.push(t.numel());
            rows += t.rows();
        }
        let value = Tensor::from_vec(&[rows, cols], data)?;
        let parts = parts.to_vec();
        self.record("concat_rows", value, &parts.clone(), move |ctx, grads| {
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(&extents) {
                grads.accumulate(p, &ctx.grad()[offset..offset + len]);
                offset += len;
            }
        })
    }

    /// Concatenates 2-D inputs along the trailing axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let value = Tensor::from_vec(&[rows, total], data)?;
        let parts = parts.to_vec();
        self.record("concat_cols", value, &parts.clone(), move |ctx, grads| {
            let g = ctx.grad();
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(gp) = grads.slot(p) {
                    for r in 0..rows {
                        for (acc, &x) in gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[r * total + col..r * total + col + w])
                        {
                            *acc += x;
                        }
                    }
                }
                col += w;
            }
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > rows {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let value = Tensor::from_vec(&[end - start, cols], t.data()[start * cols..end * cols].to_vec())?;
        self.record("slice_rows", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (acc, &g) in ga[start * cols..end * cols].iter_mut().zip(ctx.grad()) {
                    *acc += g;
                }
            }
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > cols {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::from_vec(&[rows, w], data)?;
        self.record("slice_cols", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                let g = ctx.grad();
                for r in 0..rows {
                    for (acc, &x) in ga[r * cols + start..r * cols + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                    {
                        *acc += x;
                    }
                }
            }
        })
    }

    /// Selects rows by index; repeated indices accumulate in backward.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(&[index.len(), cols], data)?;
        let index = index.to_vec();
        self.record("gather_rows", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (k, &i) in index.iter().enumerate() {
                    for (acc, &g) in ga[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&ctx.grad()[k * cols..(k + 1) * cols])
                    {
                        *acc += g;
                    }
                }
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.record("reshape", value, &[a], move |ctx, grads| {
            grads.accumulate(a, ctx.grad());
        })
    }

    /// Per-segment column-wise maximum of `[p, c]` rows into `[segments, c]`.
    ///
    /// Segments that receive no rows produce zeros. Gradient flows to the
    /// first row attaining each maximum.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if segment.len() != rows {
            return Err(shape_err(
                "segment_max",
                format!("{} segment ids for {rows} rows", segment.len()),
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
            return Err(shape_err("segment_max", format!("segment {bad} of {segments}")));
        }
        let mut out = vec![T::zero(); segments * cols];
        let mut arg = vec![usize::MAX; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            for (c, &x) in t.row(r).iter().enumerate() {
                let slot = s * cols + c;
                if arg[slot] == usize::MAX || x > out[slot] {
                    out[slot] = x;
                    arg[slot] = r;
                }
            }
        }
        let value = Tensor::from_vec(&[segments, cols], out)?;
        self.record("segment_max", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (slot, (&r, &g)) in arg.iter().zip(ctx.grad()).enumerate() {
                    if r != usize::MAX {
                        ga[r * cols + slot % cols] += g;
                    }
                }
            }
        })
    }

    /// Unfolds 3x3 zero-padded neighbourhoods of an `[h * w, c]` row-major
    /// grid into `[h * w, 9 * c]`, ordered by (dy, dx, channel).
    pub fn im2col3x3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != h * w {
            return Err(shape_err("im2col3x3", format!("{} rows for {h}x{w}", t.rows())));
        }
        let c = t.cols();
        let width = 9 * c;
        let mut out = vec![T::zero(); h * w * width];
        let src = t.data();
        for_each_tap(h, w, |dst_cell, tap, src_cell| {
            let o = dst_cell * width + tap * c;
            out[o..o + c].copy_from_slice(&src[src_cell * c..(src_cell + 1) * c]);
        });
        let value = Tensor::from_vec(&[h * w, width], out)?;
        self.record("im2col3x3", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                let g = ctx.grad();
                for_each_tap(h, w, |dst_cell, tap, src_cell| {
                    let o = dst_cell * width + tap * c;
                    for (acc, &x) in ga[src_cell * c..(src_cell + 1) * c].iter_mut().zip(&g[o..o + c]) {
                        *acc += x;
                    }
                });
            }
        })
    }
}

fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy == 0 || sx == 0 || sy > h || sx > w {
                        continue;
                    }
                    f(y * w + x, dy * 3 + dx, (sy - 1) * w + (sx - 1));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn segment_max_leaves_empty_segments_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3, 2], &[1.0, -1.0, 3.0, -2.0, 0.5, 4.0]), true);
        let m = tape.segment_max(a, &[2, 2, 0], 4).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 4.0, 0.0, 0.0, 3.0, -1.0, 0.0, 0.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn im2col_centre_tap_is_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let cols = tape.im2col3x3(a, 2, 2).unwrap();
        let v = tape.value(cols);
        assert_eq!(v.shape(), &[4, 9]);
        for cell in 0..4 {
            assert_eq!(v.row(cell)[4], (cell + 1) as f64);
        }
        // Top-left cell only sees itself, right, below and diagonal.
        assert_eq!(v.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[0.1, 0.5, 0.9]));
        let l = tape.logit(a, 1e-5).unwrap();
        let s = tape.sigmoid(l).unwrap();
        for (x, y) in tape.value(s).data().iter().zip([0.1, 0.5, 0.9]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(TensorError::Domain { .. })));
    }
}
