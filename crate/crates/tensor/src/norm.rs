use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// In-place max-subtracted softmax of one row.
pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl<T: Float> Tape<T> {
    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if n == 0 {
            return Err(shape_err("softmax", "empty trailing axis"));
        }
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.record("softmax", value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                let y = ctx.output().data();
                for ((acc, g), y) in ga.chunks_mut(n).zip(ctx.grad().chunks(n)).zip(y.chunks(n)) {
                    let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    for ((acc, &g), &y) in acc.iter_mut().zip(g).zip(y) {
                        *acc += y * (g - dot);
                    }
                }
            }
        })
    }

    /// Layer normalisation over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err(
                "layer_norm",
                format!("width {n}, gamma {:?}", self.shape(gamma)),
            ));
        }
        let rows = self.value(x).rows();
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        {
            let src = self.value(x).data();
            let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
            for r in 0..rows {
                let row = &src[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let s = T::one() / (var + eps).sqrt();
                rstd[r] = s;
                for c in 0..n {
                    let h = (row[c] - mean) * s;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * gv[c] + bv[c];
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        self.record("layer_norm", value, &[x, gamma, beta], move |ctx, grads| {
            let g = ctx.grad();
            if let Some(gb) = grads.slot(beta) {
                for row in g.chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            if let Some(gg) = grads.slot(gamma) {
                for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((acc, &v), &h) in gg.iter_mut().zip(row).zip(hrow) {
                        *acc += v * h;
                    }
                }
            }
            if let Some(gx) = grads.slot(x) {
                let gv = ctx.value(gamma).data();
                for r in 0..rows {
                    let grow = &g[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for c in 0..n {
                        let d = grow[c] * gv[c];
                        mean_d += d;
                        mean_dh += d * hrow[c];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for c in 0..n {
                        let d = grow[c] * gv[c];
                        gx[r * n + c] += rstd[r] * (d - mean_d - hrow[c] * mean_dh);
                    }
                }
            }
        })
    }
}
