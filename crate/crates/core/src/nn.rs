//! Named parameters, tape binding and the affine layer shared by every
//! model component.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Leaky-ReLU slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::shape(
                    "assign",
                    format!(
                        "`{}`: {:?} vs {:?}",
                        self.names[i],
                        old.shape(),
                        new.shape()
                    ),
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// A tape with every parameter bound to a leaf.
pub struct Session {
    pub tape: Tape,
    vars: Vec<Var>,
}

impl Session {
    /// Parameters become trainable leaves.
    pub fn trainable(params: &ParamSet) -> Self {
        Self::bind(params, true)
    }

    /// Parameters become constants; nothing is differentiated.
    pub fn frozen(params: &ParamSet) -> Self {
        Self::bind(params, false)
    }

    fn bind(params: &ParamSet, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward from `loss`; returns one gradient per parameter, zeros for
    /// parameters the loss does not reach.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|&v| {
                grads.take(v).unwrap_or_else(|| {
                    let t = self.tape.value(v);
                    Tensor::zeros(t.rows(), t.cols())
                })
            })
            .collect())
    }
}

/// `x · W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init with bound `1/√fan_in` for weights and bias.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = params.add(
            format!("{name}.weight"),
            Tensor::uniform(fan_in, fan_out, -bound, bound, rng),
        )?;
        let b = params.add(
            format!("{name}.bias"),
            Tensor::uniform(1, fan_out, -bound, bound, rng),
        )?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.tape.matmul(x, w)?;
        s.tape.add_row(y, b)
    }
}

/// Learned lookup table initialized uniform in `±1/√d`.
pub fn embedding(
    params: &mut ParamSet,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let bound = 1.0 / (dim.max(1) as f64).sqrt();
    params.add(name, Tensor::uniform(rows, dim, -bound, bound, rng))
}

/// Seed stream for the stochastic parts of one forward pass.
pub struct Noise {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl Noise {
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_rejects_duplicates_and_bad_assign() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::zeros(2, 2)).unwrap();
        assert!(p.add("a", Tensor::zeros(1, 1)).is_err());
        assert!(p.assign(vec![Tensor::zeros(1, 2)]).is_err());
        assert!(p.assign(vec![]).is_err());
        p.assign(vec![Tensor::ones(2, 2)]).unwrap();
        assert_eq!(p.by_name("a").unwrap(), &Tensor::ones(2, 2));
    }

    #[test]
    fn linear_forward_and_unreached_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let l = Linear::new(&mut p, "l", 3, 2, &mut rng).unwrap();
        let unused = p.add("unused", Tensor::ones(1, 1)).unwrap();
        let mut s = Session::trainable(&p);
        let x = s.tape.constant(Tensor::ones(4, 3));
        let y = l.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).shape(), [4, 2]);
        let loss = s.tape.sum(y);
        let g = s.param_grads(loss).unwrap();
        assert_eq!(g[l.b.0], Tensor::filled(1, 2, 4.0));
        assert_eq!(g[unused.0], Tensor::zeros(1, 1));
    }
}
