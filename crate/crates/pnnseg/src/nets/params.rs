//! Named, shaped weight collection with deterministic iteration order.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Rng;
use indexmap::IndexMap;

/// Ordered map from parameter name to tensor. Insertion order is the
/// build order, which also fixes the order of weight-init draws and of
/// optimizer moments.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    items: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.items.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.items.insert(name, tensor.mark_parameter());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.items
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.items.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.items.values_mut().collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar weights.
    pub fn total_elements(&self) -> usize {
        self.items.values().map(|t| t.len()).sum()
    }

    /// Put every parameter on a tape as a gradient-carrying leaf.
    pub fn register_on(&self, tape: &mut Tape) -> TapedParams {
        let vars = self
            .items
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        TapedParams { vars }
    }

    /// Copy gradients from a tape back onto the parameters. Parameters the
    /// loss never reached get explicit zeros.
    pub fn absorb_grads(&mut self, tape: &Tape, taped: &TapedParams) {
        for ((name, tensor), (taped_name, var)) in self.items.iter_mut().zip(&taped.vars) {
            debug_assert_eq!(name, taped_name);
            tensor.grad = Some(match tape.grad(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.len()],
            });
        }
    }

    /// Round every weight through f32, the checkpoint storage width.
    pub fn quantize_f32(&mut self) {
        for t in self.items.values_mut() {
            t.quantize_f32();
        }
    }
}

/// Tape handles for one registration of a store's parameters.
#[derive(Debug, Clone)]
pub struct TapedParams {
    vars: Vec<(String, Var)>,
}

impl TapedParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }
}

/// Convolution weight [Cout, Cin, k, k], uniform in
/// `±sqrt(1 / (Cin * k * k))`, drawn row-major from the init stream.
pub fn init_conv_weight(cout: usize, cin: usize, k: usize, rng: &mut Rng) -> Tensor {
    uniform_weight(vec![cout, cin, k, k], cin * k * k, rng)
}

/// Transposed-convolution weight [Cin, Cout, k, k]; the fan-in is the
/// layer's input channel count times the kernel area, as for conv.
pub fn init_tconv_weight(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Tensor {
    uniform_weight(vec![cin, cout, k, k], cin * k * k, rng)
}

fn uniform_weight(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape and length agree by construction")
}
