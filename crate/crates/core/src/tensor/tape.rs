use std::sync::Arc;

use super::ops::{self, ConvSpec, PoolSpec};
use super::Tensor3;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Conv { input: Var, spec: Arc<ConvSpec> },
    Relu { input: Var },
    L2Pool { input: Var, pool: Arc<PoolSpec> },
    MaxPool { input: Var, argmax: Vec<u32> },
    Affine { input: Var, scale: Vec<f32> },
    /// Scalar head: a value plus its partial derivatives with respect to
    /// earlier tensors.
    Scalar { seeds: Vec<(Var, Tensor3)> },
}

struct Node {
    op: Op,
    value: Tensor3,
}

/// Wengert list for one scalar computation.
///
/// Tensor operations record their outputs; a computation is closed by one
/// scalar head ([`Tape::sum`], [`Tape::dot`], [`Tape::scalar`], ...), after
/// which [`Tape::backward`] replays the list in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a taped scalar with respect to every recorded tensor.
pub struct Gradients {
    grads: Vec<Option<Tensor3>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor3> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor3) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor3 {
        &self.nodes[var.0].value
    }

    pub fn input(&mut self, value: Tensor3) -> Var {
        self.push(Op::Input, value)
    }

    pub fn conv2d(&mut self, input: Var, spec: Arc<ConvSpec>) -> Result<Var> {
        let out = ops::conv2d(self.value(input), &spec)?;
        Ok(self.push(Op::Conv { input, spec }, out))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(Op::Relu { input }, out)
    }

    pub fn l2pool(&mut self, input: Var, pool: Arc<PoolSpec>) -> Var {
        let out = ops::l2pool(self.value(input), &pool);
        self.push(Op::L2Pool { input, pool }, out)
    }

    pub fn max_pool(&mut self, input: Var) -> Var {
        let (out, argmax) = ops::max_pool_with_indices(self.value(input));
        self.push(Op::MaxPool { input, argmax }, out)
    }

    pub fn affine(&mut self, input: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let out = ops::affine_channels(self.value(input), scale, shift)?;
        Ok(self.push(
            Op::Affine {
                input,
                scale: scale.to_vec(),
            },
            out,
        ))
    }

    /// Closes the computation with a caller-evaluated scalar whose partial
    /// derivatives with respect to recorded tensors are `seeds`.
    pub fn scalar(&mut self, value: f64, seeds: Vec<(Var, Tensor3)>) -> Result<Var> {
        for (var, g) in &seeds {
            if var.0 >= self.nodes.len() {
                return Err(Error::ContractViolation(format!("unknown tape variable {}", var.0)));
            }
            if !g.same_shape(self.value(*var)) {
                return Err(Error::shape(format!(
                    "seed {:?} does not match recorded tensor {:?}",
                    g.shape(),
                    self.value(*var).shape()
                )));
            }
        }
        let v = Tensor3::filled(1, 1, 1, value as f32);
        Ok(self.push(Op::Scalar { seeds }, v))
    }

    /// `Σ x`.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = x.sum();
        let seed = Tensor3::filled(x.channels(), x.height(), x.width(), 1.0);
        self.scalar(value, vec![(input, seed)])
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = x.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let seed = x.map(|v| 2.0 * v);
        self.scalar(value, vec![(input, seed)])
    }

    /// `Σ x ⊙ w` for a fixed tensor `w`.
    pub fn dot(&mut self, input: Var, weights: &Tensor3) -> Result<Var> {
        let x = self.value(input);
        if !x.same_shape(weights) {
            return Err(Error::shape("dot weights must match the recorded tensor"));
        }
        let value = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        self.scalar(value, vec![(input, weights.clone())])
    }

    /// Gradients of the final scalar, scaled by `seed`, with respect to every
    /// recorded tensor.
    pub fn gradients(&self, seed: f32) -> Result<Gradients> {
        let last = match self.nodes.last() {
            Some(n) if matches!(n.op, Op::Scalar { .. }) => self.nodes.len() - 1,
            Some(_) => {
                return Err(Error::ContractViolation(
                    "backward needs a tape that ends in a scalar".into(),
                ))
            }
            None => return Err(Error::ContractViolation("backward on an empty tape".into())),
        };
        let mut grads: Vec<Option<Tensor3>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[last] = Some(Tensor3::filled(1, 1, 1, seed));

        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Scalar { seeds } => {
                    let s = g.data()[0];
                    for (var, local) in seeds {
                        accumulate(&mut grads, *var, local.map(|v| v * s))?;
                    }
                }
                Op::Conv { input, spec } => {
                    let x = self.value(*input);
                    let gi = ops::conv2d_input_grad(&g, spec, x.height(), x.width())?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Relu { input } => {
                    accumulate(&mut grads, *input, ops::relu_grad(&g, &node.value))?;
                }
                Op::L2Pool { input, pool } => {
                    let gi = ops::l2pool_grad(&g, self.value(*input), &node.value, pool);
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::max_pool_grad(&g, argmax, self.value(*input).shape());
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Affine { input, scale } => {
                    let mut gi = g;
                    for (c, &a) in scale.iter().enumerate() {
                        gi.plane_mut(c).iter_mut().for_each(|v| *v *= a);
                    }
                    accumulate(&mut grads, *input, gi)?;
                }
            }
            // Intermediate gradients are released once propagated.
            if idx != last {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of the final scalar with respect to the first recorded input.
    pub fn backward(&self, seed: f32) -> Result<Tensor3> {
        let input = self
            .nodes
            .iter()
            .position(|n| matches!(n.op, Op::Input))
            .ok_or_else(|| Error::ContractViolation("tape has no recorded input".into()))?;
        let grads = self.gradients(seed)?;
        Ok(grads
            .wrt(Var(input))
            .cloned()
            .unwrap_or_else(|| {
                let v = &self.nodes[input].value;
                Tensor3::zeros(v.channels(), v.height(), v.width())
            }))
    }
}

fn accumulate(grads: &mut [Option<Tensor3>], var: Var, g: Tensor3) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f32 - 2.0));
        tape.sum(x).unwrap();
        let g = tape.backward(1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_square_gradient_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor3::from_fn(1, 4, 4, |_, _, _| rng.gen_range(0.1..1.0));
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let r = tape.relu(x);
        tape.sum_squares(r).unwrap();
        let g = tape.backward(1.0).unwrap();
        for (gv, xv) in g.data().iter().zip(input.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-6);
        }
    }

    #[test]
    fn non_scalar_tape_is_a_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::zeros(1, 2, 2));
        tape.relu(x);
        assert!(matches!(tape.backward(1.0), Err(Error::ContractViolation(_))));
        assert!(matches!(Tape::new().backward(1.0), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn seed_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::filled(1, 2, 2, 3.0));
        tape.sum_squares(x).unwrap();
        let g = tape.backward(0.5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn gradients_accumulate_over_fan_out() {
        // loss = Σ x + Σ relu(x)²
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::filled(1, 2, 2, 2.0));
        let r = tape.relu(x);
        let ones = Tensor3::filled(1, 2, 2, 1.0);
        let two_r = tape.value(r).map(|v| 2.0 * v);
        tape.scalar(0.0, vec![(x, ones), (r, two_r)]).unwrap();
        let g = tape.backward(1.0).unwrap();
        assert!(g.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }
}
