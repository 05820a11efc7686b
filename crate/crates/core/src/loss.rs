//! Set-prediction losses: focal classification, L1 box regression, the
//! matching cost that mirrors them, and the per-layer / denoising totals.

use cmt_tensor::{Float, Tape, Tensor, Var};

use crate::config::TrainConfig;
use crate::decoder::REG_DIM;
use crate::error::Result;
use crate::matching::{hungarian_match, Assignment};
use crate::model::ForwardOutput;
use crate::scene::GtBox;

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` inside the logarithms.
pub const P_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub w_cls: f64,
    pub w_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            w_cls: 2.0,
            w_reg: 0.25,
        }
    }
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        Self {
            alpha: t.focal_alpha,
            gamma: t.focal_gamma,
            w_cls: t.w_cls,
            w_reg: t.w_reg,
        }
    }
}

/// Focal loss of one probability against a positive target.
pub fn focal_pos(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Focal loss of one probability against a negative target.
pub fn focal_neg(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
}

fn sigmoid_t<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Summed sigmoid focal loss over `[n, C]` logits; `targets[i]` is the
/// class of row `i` or `None` for no object.
pub fn focal_loss<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[Option<usize>],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let c = tape.value(logits).cols();
    let (a, g, eps) = (T::of(alpha), T::of(gamma), T::of(P_EPS));
    let (one, hi) = (T::one(), T::one() - T::of(P_EPS));
    let mut total = T::zero();
    for (row, t) in tape.value(logits).data().chunks(c).zip(targets) {
        for (k, &x) in row.iter().enumerate() {
            let p = sigmoid_t(x).max(eps).min(hi);
            total += if *t == Some(k) {
                -a * (one - p).powf_(g) * p.ln()
            } else {
                -(one - a) * p.powf_(g) * (one - p).ln()
            };
        }
    }
    let targets = targets.to_vec();
    Ok(
        tape.record("focal_loss", Tensor::scalar(total), &[logits], move |ctx, grads| {
            let gout = ctx.grad()[0];
            let vals = ctx.value(logits).data().to_vec();
            if let Some(gl) = grads.slot(logits) {
                for (i, (row, t)) in vals.chunks(c).zip(&targets).enumerate() {
                    for (k, &x) in row.iter().enumerate() {
                        let p = sigmoid_t(x);
                        if !(p > eps && p < hi) {
                            continue;
                        }
                        // d/dx of the loss through p = sigmoid(x).
                        let d = if *t == Some(k) {
                            a * (one - p).powf_(g) * (g * p * p.ln() - (one - p))
                        } else {
                            (one - a) * p.powf_(g) * (p - g * (one - p) * (one - p).ln())
                        };
                        gl[i * c + k] += gout * d;
                    }
                }
            }
        })?,
    )
}

trait PowF {
    fn powf_(self, e: Self) -> Self;
}

impl<T: Float> PowF for T {
    fn powf_(self, e: T) -> T {
        if e == T::of(2.0) {
            self * self
        } else {
            (e * self.ln()).exp()
        }
    }
}

/// Regression target `(cx, cy, cz, ln w, ln l, ln h, sin yaw, cos yaw)`.
pub fn regression_target(b: &GtBox) -> [f64; REG_DIM] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Mean absolute difference over the eight regression entries.
pub fn l1_pair(pred: &[f64], target: &[f64; REG_DIM]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / REG_DIM as f64
}

/// Summed per-pair L1 (each pair averaged over its eight entries) between
/// rows `rows` of `reg` and `targets`.
pub fn l1_loss<T: Float>(tape: &mut Tape<T>, reg: Var, rows: &[usize], targets: &[[f64; REG_DIM]]) -> Result<Var> {
    let picked = tape.gather_rows(reg, rows)?;
    let t = tape.constant(Tensor::from_f64(&[rows.len(), REG_DIM], &targets.concat())?);
    let d = tape.sub(picked, t)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    Ok(tape.scale(s, T::of(1.0 / REG_DIM as f64))?)
}

/// `cost[q][g] = w_cls (FL_pos - FL_neg)(p_q,c_g) + w_reg L1(q, g)`: exactly
/// the change in the unnormalised loss when query `q` is assigned to `g`.
pub fn match_cost<T: Float>(cls: &Tensor<T>, reg: &Tensor<T>, gts: &[GtBox], w: &LossWeights) -> Vec<Vec<f64>> {
    let targets: Vec<[f64; REG_DIM]> = gts.iter().map(regression_target).collect();
    (0..cls.rows())
        .map(|q| {
            let logits = cls.row(q);
            let r: Vec<f64> = reg.row(q).iter().map(|x| x.to_f64()).collect();
            gts.iter()
                .zip(&targets)
                .map(|(g, t)| {
                    let p = crate::decoder::sigmoid(logits[g.class].to_f64());
                    w.w_cls * (focal_pos(p, w.alpha, w.gamma) - focal_neg(p, w.alpha, w.gamma))
                        + w.w_reg * l1_pair(&r, t)
                })
                .collect()
        })
        .collect()
}

/// Scalar loss values of one step, already averaged over decoder layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub dn_cls: f64,
    pub dn_reg: f64,
    pub total: f64,
    /// Weighted matchable loss of each decoder layer.
    pub per_layer: Vec<f64>,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,cls,reg,dn_cls,dn_reg,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:?},{:?},{:?},{:?},{:?}",
            self.cls, self.reg, self.dn_cls, self.dn_reg, self.total
        )
    }

    /// Running mean used when accumulating over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.cls += weight * other.cls;
        self.reg += weight * other.reg;
        self.dn_cls += weight * other.dn_cls;
        self.dn_reg += weight * other.dn_reg;
        self.total += weight * other.total;
        if self.per_layer.len() < other.per_layer.len() {
            self.per_layer.resize(other.per_layer.len(), 0.0);
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            *a += weight * b;
        }
    }
}

/// Total loss on the tape plus its breakdown. Every decoder layer is matched
/// independently; denoising queries bypass matching.
pub fn compute_loss<T: Float>(
    tape: &mut Tape<T>,
    out: &ForwardOutput<T>,
    gts: &[GtBox],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
    let n_layers = out.layers.len();
    let inv_layers = 1.0 / n_layers as f64;
    let norm = 1.0 / gts.len().max(1) as f64;
    let targets: Vec<[f64; REG_DIM]> = gts.iter().map(regression_target).collect();
    let mut terms: Vec<Var> = Vec::new();
    let mut bd = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(n_layers);
    let n_match = out.n_match;

    for layer in &out.layers {
        let n_all = tape.shape(layer.cls)[0];
        let cls_m = if n_all == n_match {
            layer.cls
        } else {
            tape.slice_rows(layer.cls, 0, n_match)?
        };
        let reg_m = if n_all == n_match {
            layer.reg
        } else {
            tape.slice_rows(layer.reg, 0, n_match)?
        };
        let cost = match_cost(tape.value(cls_m), tape.value(reg_m), gts, w);
        let assignment = hungarian_match(&cost)?;
        let cls_targets: Vec<Option<usize>> = assignment
            .targets(n_match)
            .into_iter()
            .map(|g| g.map(|g| gts[g].class))
            .collect();
        let fl = focal_loss(tape, cls_m, &cls_targets, w.alpha, w.gamma)?;
        let cls_v = tape.value(fl).data()[0].to_f64() * norm;
        let mut layer_total = w.w_cls * cls_v;
        terms.push(tape.scale(fl, T::of(w.w_cls * norm * inv_layers))?);
        bd.cls += cls_v * inv_layers;
        if !gts.is_empty() {
            let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
            let tg: Vec<[f64; REG_DIM]> = assignment.pairs.iter().map(|p| targets[p.1]).collect();
            let l1 = l1_loss(tape, reg_m, &rows, &tg)?;
            let reg_v = tape.value(l1).data()[0].to_f64() * norm;
            layer_total += w.w_reg * reg_v;
            terms.push(tape.scale(l1, T::of(w.w_reg * norm * inv_layers))?);
            bd.reg += reg_v * inv_layers;
        }
        bd.per_layer.push(layer_total);
        assignments.push(assignment);

        if let Some(dn) = out.denoise.as_ref().filter(|d| !d.is_empty()) {
            let n_dn = dn.len();
            let positives = dn.targets.iter().filter(|t| t.positive).count();
            let dn_norm = 1.0 / positives.max(1) as f64;
            let cls_d = tape.slice_rows(layer.cls, n_match, n_match + n_dn)?;
            let reg_d = tape.slice_rows(layer.reg, n_match, n_match + n_dn)?;
            let dn_targets: Vec<Option<usize>> =
                dn.targets.iter().map(|t| t.positive.then(|| gts[t.gt].class)).collect();
            let fl = focal_loss(tape, cls_d, &dn_targets, w.alpha, w.gamma)?;
            bd.dn_cls += tape.value(fl).data()[0].to_f64() * dn_norm * inv_layers;
            terms.push(tape.scale(fl, T::of(w.w_cls * dn_norm * inv_layers))?);
            let rows: Vec<usize> = (0..n_dn).filter(|&i| dn.targets[i].positive).collect();
            if !rows.is_empty() {
                let tg: Vec<[f64; REG_DIM]> = rows.iter().map(|&i| targets[dn.targets[i].gt]).collect();
                let l1 = l1_loss(tape, reg_d, &rows, &tg)?;
                bd.dn_reg += tape.value(l1).data()[0].to_f64() * dn_norm * inv_layers;
                terms.push(tape.scale(l1, T::of(w.w_reg * dn_norm * inv_layers))?);
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    bd.total = tape.value(total).data()[0].to_f64();
    Ok((total, bd, assignments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmt_tensor::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn focal_value(logits: &[f64], c: usize, targets: &[Option<usize>]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[logits.len() / c, c], logits.to_vec()).unwrap());
        let f = focal_loss(&mut tape, x, targets, 0.25, 2.0).unwrap();
        tape.value(f).data()[0]
    }

    #[test]
    fn focal_hand_values() {
        let half = focal_value(&[0.0], 1, &[Some(0)]);
        let expect = -0.25 * 0.25 * 0.5f64.ln();
        assert!((half - expect).abs() < 1e-12);
        assert!((half - 0.043321).abs() < 1e-6);
        // Saturated correct predictions hit the clamp floor, effectively zero.
        let sat = focal_value(&[40.0, -40.0], 2, &[Some(0)]);
        assert!(sat < 1e-12);
        assert!((focal_pos(1.0, 0.25, 2.0)).abs() < 1e-12);
        assert!((focal_neg(0.0, 0.25, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = vec![Some(1), None, Some(2), Some(0)];
        let input = Tensor::from_vec(&[4, 3], x).unwrap();
        let check = check_gradients(&[input], 1e-5, |tape, v| {
            Ok(focal_loss(tape, v[0], &targets, 0.25, 2.0).map_err(|e| match e {
                crate::CmtError::Tensor(t) => t,
                other => panic!("{other}"),
            })?)
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-6, "{}", check.max_rel_error);
    }

    #[test]
    fn l1_definition() {
        let t = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(l1_pair(&t, &t), 0.0);
        let mut p = t;
        p[4] += 1.0;
        assert_eq!(l1_pair(&p, &t), 1.0 / 8.0);
        let mut tape = Tape::<f64>::new();
        let reg = tape.leaf(Tensor::from_vec(&[1, 8], t.to_vec()).unwrap(), true);
        let l = l1_loss(&mut tape, reg, &[0], &[t]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zeros(reg).iter().all(|&x| x == 0.0));
    }

    fn gt(class: usize, x: f64, y: f64) -> GtBox {
        GtBox {
            class,
            center: [x, y, -1.0],
            size: [4.5, 1.9, 1.6],
            yaw: 0.3,
        }
    }

    fn perfect_row(b: &GtBox) -> Vec<f64> {
        regression_target(b).to_vec()
    }

    #[test]
    fn exact_confident_prediction_is_column_minimal() {
        let gts = [gt(0, 3.0, 4.0), gt(1, -6.0, 2.0)];
        let w = LossWeights::default();
        let cls = Tensor::from_vec(&[3, 2], vec![8.0, -8.0, -8.0, 8.0, 0.0, 0.0]).unwrap();
        let mut r = perfect_row(&gts[0]);
        r.extend(perfect_row(&gts[1]));
        r.extend([0.0; 8]);
        let reg = Tensor::from_vec(&[3, 8], r).unwrap();
        let cost = match_cost(&cls, &reg, &gts, &w);
        for g in 0..2 {
            let best = (0..3).min_by(|&a, &b| cost[a][g].total_cmp(&cost[b][g])).unwrap();
            assert_eq!(best, g);
        }
    }

    #[test]
    fn mirrored_pairs_give_symmetric_cost() {
        let gts = [gt(0, 5.0, 0.0), gt(0, -5.0, 0.0)];
        let w = LossWeights::default();
        let cls = Tensor::from_vec(&[2, 1], vec![0.3, 0.3]).unwrap();
        let mut a = perfect_row(&gts[0]);
        a[0] = 4.0;
        let mut b = perfect_row(&gts[1]);
        b[0] = -4.0;
        let reg = Tensor::from_vec(&[2, 8], [a, b].concat()).unwrap();
        let cost = match_cost(&cls, &reg, &gts, &w);
        assert!((cost[0][1] - cost[1][0]).abs() < 1e-12);
        assert!((cost[0][0] - cost[1][1]).abs() < 1e-12);
    }

    #[test]
    fn cost_equals_pairwise_loss_increment() {
        // Unnormalised loss of an assignment = all-negative focal sum plus
        // the cost of its pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts = [gt(0, 1.0, 2.0), gt(2, -3.0, 7.0)];
        let w = LossWeights::default();
        let (n, c) = (5, 3);
        let cls = Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let reg = Tensor::from_vec(&[n, 8], (0..n * 8).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let cost = match_cost(&cls, &reg, &gts, &w);
        let a = hungarian_match(&cost).unwrap();
        let mut tape = Tape::<f64>::new();
        let cv = tape.constant(cls.clone());
        let rv = tape.constant(reg.clone());
        let none = focal_loss(&mut tape, cv, &vec![None; n], w.alpha, w.gamma).unwrap();
        let t: Vec<Option<usize>> = a.targets(n).into_iter().map(|g| g.map(|g| gts[g].class)).collect();
        let fl = focal_loss(&mut tape, cv, &t, w.alpha, w.gamma).unwrap();
        let rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let tg: Vec<_> = a.pairs.iter().map(|p| regression_target(&gts[p.1])).collect();
        let l1 = l1_loss(&mut tape, rv, &rows, &tg).unwrap();
        let loss = w.w_cls * tape.value(fl).data()[0] + w.w_reg * tape.value(l1).data()[0];
        let expect = w.w_cls * tape.value(none).data()[0] + a.total_cost(&cost);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }
}
