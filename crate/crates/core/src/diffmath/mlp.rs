use rand::Rng;

use super::{Activation, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Fully connected stack whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
}

impl Mlp {
    /// Allocate layers `dims[0] → dims[1] → …` with one activation per
    /// layer. Weights use He-uniform initialisation; biases start at zero.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: &[usize],
        activations: &[Activation],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(shape_err!(
                "{} activations for {} layer widths",
                activations.len(),
                dims.len()
            ));
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (i, (pair, &activation)) in dims.windows(2).zip(activations).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
            let limit = (gain / fan_in as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.gen_range(-limit..limit)))
                .collect();
            let weight = store.add(format!("{prefix}.{i}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push(MlpLayer {
                weight,
                bias,
                activation,
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(Self { layers })
    }

    /// Rebind to parameters already present in `store` (checkpoint load).
    pub fn bind<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        activations: &[Activation],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &activation) in activations.iter().enumerate() {
            let weight = store
                .id_of(&format!("{prefix}.{i}.weight"))
                .ok_or_else(|| shape_err!("missing {prefix}.{i}.weight"))?;
            let bias = store
                .id_of(&format!("{prefix}.{i}.bias"))
                .ok_or_else(|| shape_err!("missing {prefix}.{i}.bias"))?;
            let (in_dim, out_dim) = store.get(weight).dims2()?;
            layers.push(MlpLayer {
                weight,
                bias,
                activation,
                in_dim,
                out_dim,
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        input: Var,
    ) -> Result<Var> {
        let width = tape.value(input).dims2()?.1;
        if width != self.in_dim() {
            return Err(shape_err!("mlp expects width {}, got {width}", self.in_dim()));
        }
        let mut h = input;
        for layer in &self.layers {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            h = tape.linear(h, w, Some(b))?;
            h = tape.activation(h, layer.activation)?;
        }
        Ok(h)
    }
}
