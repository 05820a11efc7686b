//! Central finite-difference gradient checking at 64-bit.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::attention::AttnMask;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error `|a - n| / max(|a|, |n|)` (L2 norms).
    pub max_rel_error: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative L2 discrepancy between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_gradients_at(inputs, &coords, h, f)
}

/// Like [`check_gradients`] but only perturbs the listed element indices of
/// each input; `coords[i]` indexes into `inputs[i]`.
pub fn check_gradients_at<F>(inputs: &[Tensor<f64>], coords: &[Vec<usize>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut analytic = Vec::with_capacity(inputs.len());
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, idx) in coords.iter().enumerate() {
        let full = grads.get_or_zeros(vars[i]);
        let a: Vec<f64> = idx.iter().map(|&j| full[j]).collect();
        let mut n = Vec::with_capacity(idx.len());
        for &j in idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            n.push((plus - minus) / (2.0 * h));
        }
        max_rel_error = max_rel_error.max(relative_error(&a, &n));
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}

fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("consistent shape")
}

/// Sums `v` against fixed random weights so every element carries its own
/// coefficient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Checks every differentiable tape operation on small random inputs and
/// returns `(op, max relative error)` pairs, with step `h`.
pub fn op_suite(h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = StdRng::seed_from_u64(0x0b5e);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 4]);
    let sq = random_tensor(&mut rng, &[4, 3]);
    let row = random_tensor(&mut rng, &[4]);
    let tall = random_tensor(&mut rng, &[2, 4]);
    let narrow = random_tensor(&mut rng, &[3, 2]);
    let grid = random_tensor(&mut rng, &[6, 2]);
    let q = random_tensor(&mut rng, &[3, 4]);
    let kv = random_tensor(&mut rng, &[5, 4]);
    let pos = a.map(|x| x.abs() + 0.5);
    let unit = a.map(|x| 0.5 + 0.4 * x);
    let mut mask = AttnMask::allow_all(3, 5);
    mask.set(0, 1, true);
    mask.set(2, 4, true);
    mask.set(2, 0, true);

    let unary = |f: fn(&mut Tape<f64>, Var) -> Result<Var>, seed: u64| -> OpFn {
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = f(t, v[0])?;
            project(t, y, seed)
        })
    };
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 2)
            }),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 3)
            }),
        ),
        (
            "add_row",
            vec![a.clone(), row],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, 4)
            }),
        ),
        (
            "matmul",
            vec![a.clone(), sq],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 5)
            }),
        ),
        (
            "affine_cols",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.affine_cols(v[0], &[1.0, -2.0, 0.5, 3.0], &[0.1, 0.2, 0.3, 0.4])?;
                project(t, y, 6)
            }),
        ),
        ("scale", vec![a.clone()], unary(|t, x| t.scale(x, -1.7), 7)),
        ("relu", vec![a.clone()], unary(|t, x| t.relu(x), 8)),
        ("sigmoid", vec![a.clone()], unary(|t, x| t.sigmoid(x), 9)),
        ("exp", vec![a.clone()], unary(|t, x| t.exp(x), 10)),
        ("sin", vec![a.clone()], unary(|t, x| t.sin(x), 11)),
        ("cos", vec![a.clone()], unary(|t, x| t.cos(x), 12)),
        ("log", vec![pos], unary(|t, x| t.log(x), 13)),
        ("abs", vec![a.clone()], unary(|t, x| t.abs(x), 14)),
        ("logit", vec![unit], unary(|t, x| t.logit(x, 1e-5), 15)),
        ("softmax", vec![a.clone()], unary(|t, x| t.softmax(x), 16)),
        (
            "sum",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            }),
        ),
        (
            "mean",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean(y)
            }),
        ),
        (
            "concat_rows",
            vec![a.clone(), tall],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1], v[0]])?;
                project(t, y, 17)
            }),
        ),
        (
            "concat_cols",
            vec![a.clone(), narrow],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                project(t, y, 18)
            }),
        ),
        ("slice_rows", vec![a.clone()], unary(|t, x| t.slice_rows(x, 1, 3), 19)),
        ("slice_cols", vec![a.clone()], unary(|t, x| t.slice_cols(x, 1, 3), 20)),
        (
            "gather_rows",
            vec![a.clone()],
            unary(|t, x| t.gather_rows(x, &[2, 0, 2, 1]), 21),
        ),
        ("reshape", vec![a.clone()], unary(|t, x| t.reshape(x, &[2, 6]), 22)),
        (
            "segment_max",
            vec![a.clone()],
            unary(|t, x| t.segment_max(x, &[1, 0, 1], 3), 23),
        ),
        ("im2col3x3", vec![grid], unary(|t, x| t.im2col3x3(x, 2, 3), 24)),
        (
            "layer_norm",
            vec![a.clone(), random_tensor(&mut rng, &[4]), random_tensor(&mut rng, &[4])],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 25)
            }),
        ),
    ];
    for heads in [1usize, 2] {
        let mask = mask.clone();
        cases.push((
            if heads == 1 { "attention" } else { "attention_2_heads" },
            vec![q.clone(), kv.clone(), kv.map(|x| -x)],
            Box::new(move |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads, Some(&mask), false)?.out;
                project(t, y, 26)
            }),
        ));
    }
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(&inputs, h, f)?.max_rel_error)))
        .collect()
}
