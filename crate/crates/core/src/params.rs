//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => invalid(format!("missing parameter `{name}`")),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `tape`. Names accepted by `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone().with_grad(true))
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Parameters whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Inserts (replacing) every parameter of `other`.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps variables already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(v) => Ok(*v),
            None => invalid(format!("missing parameter `{name}`")),
        }
    }

    /// Gradients of every differentiable parameter after `tape.backward`.
    /// Parameters the loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(n, v)| {
                let g = match tape.grad(*v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(*v).numel()],
                };
                (n.clone(), g)
            })
            .collect()
    }
}

/// Kernel of shape `dims` drawn uniformly from `±sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(dims, data).expect("numel matches dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_marks_only_selected_leaves_trainable() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::full(&[2], 1.0));
        p.insert("b.w", Tensor::full(&[3], 2.0));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |n| n.starts_with("a."));
        let a = bound.var("a.w").unwrap();
        let b = bound.var("b.w").unwrap();
        let s = tape.sum(a);
        let t = tape.sum(b);
        let loss = tape.add(s, t).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.gradients(&tape);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a.w"], vec![1.0, 1.0]);
        assert!(bound.var("c.w").is_err());
        assert_eq!(p.num_scalars(), 5);
    }
}
