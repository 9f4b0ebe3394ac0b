//! Synthesis, registration and discriminator networks.
//!
//! A network owns a [`ParamSet`] whose order is fixed at construction. Each
//! forward pass binds the set to a tape and consumes it in the same order, so
//! whether a network trains in a given pass is decided by binding it as
//! leaves or as constants.

mod bundle;
mod encoder;
mod store;
mod unet;

pub use bundle::{BundleSpec, ModelBundle, NetworkId};
pub use encoder::{coordinate_channels, rigid_head, Encoder, EncoderSpec};
pub use store::TensorStore;
pub use unet::{Unet, UnetSpec};

use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Norm {
    Group,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Leaky(f64),
    Relu,
}

impl Activation {
    pub fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        match *self {
            Activation::Leaky(slope) => x.leaky_relu(slope),
            Activation::Relu => x.relu(),
        }
    }
}

/// Group count used by group normalization for `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf or as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces the values, keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return arg_err(format!("{} values for {} parameters", values.len(), self.tensors.len()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    v.shape()
                )));
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// Tape handles of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn new(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients after `backward`, zeros where none arrived.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.tape().grad_or_zeros(*v)).collect()
    }

    /// Whether any parameter received a non-zero gradient.
    pub fn has_grad(&self) -> bool {
        self.vars.iter().any(|v| v.tape().grad(*v).is_some_and(|g| g.max_abs() > 0.0))
    }

    pub(crate) fn cursor(&self) -> Cursor<'_, 't> {
        Cursor { vars: &self.vars, next: 0 }
    }
}

pub(crate) struct Cursor<'a, 't> {
    vars: &'a [Var<'t>],
    next: usize,
}

impl<'t> Cursor<'_, 't> {
    pub(crate) fn take(&mut self) -> Result<Var<'t>> {
        let v = self.vars.get(self.next).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter list exhausted after {} entries", self.vars.len()))
        })?;
        self.next += 1;
        Ok(v)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.next != self.vars.len() {
            return arg_err(format!("{} parameters bound, {} used", self.vars.len(), self.next));
        }
        Ok(())
    }
}

/// He-uniform weights `[shape]` with the given fan-in.
pub(crate) fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(crate) fn push_conv<R: Rng>(p: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) {
    p.push(format!("{name}.w"), he_uniform(rng, &[cout, cin, k, k], cin * k * k));
    p.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn push_norm(p: &mut ParamSet, name: &str, channels: usize) {
    p.push(format!("{name}.gamma"), Tensor::ones(&[channels]));
    p.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(3), 3);
    }

    #[test]
    fn binding_controls_gradients() {
        let mut p = ParamSet::default();
        p.push("a", Tensor::ones(&[2]));
        let tape = Tape::new();
        let frozen = p.bind(&tape, false);
        let live = p.bind(&tape, true);
        let loss = frozen.vars()[0].add(live.vars()[0]).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(!frozen.has_grad() && live.has_grad());
        assert_eq!(live.grads()[0].data(), &[1.0, 1.0]);
        assert!(p.assign(vec![Tensor::ones(&[3])]).is_err());
    }
}
