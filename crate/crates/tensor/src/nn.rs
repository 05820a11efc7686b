//! Parameter storage and the small layers the detector is assembled from.

use std::collections::HashMap;

use rand::Rng;

use crate::attention::{AttentionOutput, AttnMask};
use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(shape_err(
                "param_set",
                format!("{name}: {:?} vs {:?}", self.values[id.0].shape(), value.shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect(),
        }
    }

    /// Per-parameter gradients after a backward pass, zeros where unreached.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Vec<T>> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from explicit variables, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform samples in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// Affine layer `x W + b`, with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[d_in, d_out], d_in))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_in || tape.shape(x).len() != 2 {
            return Err(shape_err(
                "linear",
                format!("input {:?}, expected [_, {}]", tape.shape(x), self.d_in),
            ));
        }
        let h = tape.matmul(x, params.var(self.weight))?;
        tape.add_row(h, params.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, hidden.., d_out]`.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(shape_err("mlp", "needs at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gamma), params.var(self.beta), T::of(self.eps))
    }
}

/// Projected multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err("multi_head_attention", format!("{dim} / {heads} heads")));
        }
        Ok(Self {
            q_proj: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k_proj: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v_proj: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&AttnMask>,
        keep_weights: bool,
    ) -> Result<AttentionOutput<T>> {
        let q = self.q_proj.forward(tape, params, query)?;
        let k = self.k_proj.forward(tape, params, key)?;
        let v = self.v_proj.forward(tape, params, value)?;
        let attn = tape.attention(q, k, v, self.heads, mask, keep_weights)?;
        let out = self.out_proj.forward(tape, params, attn.out)?;
        Ok(AttentionOutput {
            out,
            weights: attn.weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(&[2, 4], vec![1.0, -2.0, 3.0, 0.5, 7.0, 1.0, 1.0, 1.0]).unwrap());
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn single_linear_layer_is_matmul_plus_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng).unwrap();
        store
            .set("l.weight", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        store
            .set("l.bias", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5, 5.5]);
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(mlp.forward(&mut tape, &p, x).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f32> = uniform_fan_in(&mut a, &[16, 4], 16);
        let y: Tensor<f32> = uniform_fan_in(&mut b, &[16, 4], 16);
        assert_eq!(x, y);
        assert!(x.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            store.add("a", Tensor::zeros(&[1])),
            Err(TensorError::DuplicateParam(_))
        ));
    }
}
