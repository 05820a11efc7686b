use std::rc::Rc;

use log::warn;

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::linalg::{gemm, MatMut, MatRef};
use crate::norm::softmax_in_place;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Boolean attention mask, `true` meaning the query may NOT attend the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    forbid: Vec<bool>,
}

impl AttnMask {
    pub fn allow_all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            forbid: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn set(&mut self, row: usize, col: usize, forbidden: bool) {
        self.forbid[row * self.cols + col] = forbidden;
    }

    pub fn is_forbidden(&self, row: usize, col: usize) -> bool {
        self.forbid[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.forbid[row * self.cols..(row + 1) * self.cols]
    }
}

/// Output of [`Tape::attention`].
pub struct AttentionOutput<T> {
    pub out: Var,
    /// Attention probabilities `[heads, n_q, n_k]`, when requested.
    pub weights: Option<Tensor<T>>,
}

impl<T: Float> Tape<T> {
    /// Fused multi-head scaled dot-product attention on projected inputs.
    ///
    /// `q` is `[n_q, d]`, `k` and `v` are `[n_k, d]`; head `h` uses columns
    /// `h * d / heads .. (h + 1) * d / heads`. Masked logits are excluded from
    /// the softmax. A row with every key masked yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
        keep_weights: bool,
    ) -> Result<AttentionOutput<T>> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if let Some(m) = mask {
            if m.rows != nq || m.cols != nk {
                return Err(shape_err(
                    "attention",
                    format!("mask {}x{} for {nq}x{nk}", m.rows, m.cols),
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        let mut empty_rows = 0usize;
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                gemm(
                    scale,
                    MatRef {
                        data: &qd[h * dh..],
                        rows: nq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                    MatRef {
                        data: &kd[h * dh..],
                        rows: dh,
                        cols: nk,
                        rs: 1,
                        cs: d,
                    },
                    T::zero(),
                    MatMut::row_major(p, nq, nk),
                );
                for (r, row) in p.chunks_mut(nk.max(1)).enumerate() {
                    if let Some(m) = mask {
                        let forbid = m.row(r);
                        if forbid.iter().all(|&f| f) {
                            row.iter_mut().for_each(|x| *x = T::zero());
                            empty_rows += 1;
                            continue;
                        }
                        for (x, &f) in row.iter_mut().zip(forbid) {
                            if f {
                                *x = T::neg_infinity();
                            }
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::row_major(p, nq, nk),
                    MatRef {
                        data: &vd[h * dh..],
                        rows: nk,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                    T::zero(),
                    MatMut {
                        data: &mut out[h * dh..],
                        rows: nq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        if empty_rows > 0 {
            warn!(
                "attention: {} fully masked query rows produce zero output",
                empty_rows / heads
            );
        }
        let weights = keep_weights
            .then(|| Tensor::from_vec(&[heads, nq, nk], probs.clone()))
            .transpose()?;
        let value = Tensor::from_vec(&[nq, d], out)?;
        let probs = Rc::new(probs);
        let out = self.record("attention", value, &[q, k, v], move |ctx, grads| {
            let g = ctx.grad();
            let (qd, kd, vd) = (ctx.value(q).data(), ctx.value(k).data(), ctx.value(v).data());
            let want_q = grads.slot(q).is_some();
            let want_k = grads.slot(k).is_some();
            let want_v = grads.slot(v).is_some();
            let mut dq = if want_q { vec![T::zero(); nq * d] } else { Vec::new() };
            let mut dk = if want_k { vec![T::zero(); nk * d] } else { Vec::new() };
            let mut dv = if want_v { vec![T::zero(); nk * d] } else { Vec::new() };
            let mut ds = vec![T::zero(); nq * nk];
            for h in 0..heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                let g_h = MatRef {
                    data: &g[h * dh..],
                    rows: nq,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                if want_v {
                    // dV = P^T dO
                    gemm(
                        T::one(),
                        MatRef::transposed(p, nk, nq),
                        g_h,
                        T::zero(),
                        MatMut {
                            data: &mut dv[h * dh..],
                            rows: nk,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                }
                if !(want_q || want_k) {
                    continue;
                }
                // dP = dO V^T, then the softmax Jacobian.
                gemm(
                    T::one(),
                    g_h,
                    MatRef {
                        data: &vd[h * dh..],
                        rows: dh,
                        cols: nk,
                        rs: 1,
                        cs: d,
                    },
                    T::zero(),
                    MatMut::row_major(&mut ds, nq, nk),
                );
                for (drow, prow) in ds.chunks_mut(nk.max(1)).zip(p.chunks(nk.max(1))) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in drow.iter_mut().zip(prow) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                if want_q {
                    gemm(
                        T::one(),
                        MatRef::row_major(&ds, nq, nk),
                        MatRef {
                            data: &kd[h * dh..],
                            rows: nk,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                        T::zero(),
                        MatMut {
                            data: &mut dq[h * dh..],
                            rows: nq,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                }
                if want_k {
                    gemm(
                        T::one(),
                        MatRef::transposed(&ds, nk, nq),
                        MatRef {
                            data: &qd[h * dh..],
                            rows: nq,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                        T::zero(),
                        MatMut {
                            data: &mut dk[h * dh..],
                            rows: nk,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                }
            }
            if want_q {
                grads.accumulate(q, &dq);
            }
            if want_k {
                grads.accumulate(k, &dk);
            }
            if want_v {
                grads.accumulate(v, &dv);
            }
        })?;
        Ok(AttentionOutput { out, weights })
    }
}
