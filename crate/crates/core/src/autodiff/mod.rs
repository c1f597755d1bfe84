//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value, its parents and
//! a [`Backward`] rule. Parents always precede children, so walking the node
//! list in reverse is a valid topological order for the backward sweep.
//!
//! A tape is single-use: [`Tape::backward`] consumes it, and a second call
//! fails with [`Error::TapeConsumed`] instead of silently accumulating.

mod conv;
mod elementwise;
mod norm;
mod reduce;

pub use norm::Grouping;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule of one recorded operation.
///
/// Given the upstream gradient `grad` (shaped like `output`), returns one
/// entry per input; entries for inputs with `needs[i] == false` may be `None`.
pub trait Backward: Send {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    relu_inputs: Vec<Var>,
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

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Sign pattern (`> 0`) of every recorded ReLU input, in recording order.
    /// Two passes with equal patterns lie on the same linear piece of every
    /// ReLU, so a finite difference between them crosses no kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.relu_inputs
            .iter()
            .flat_map(|v| self.nodes[v.0].value.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Records a custom operation. The backward rule is kept only when some
    /// parent participates in differentiation.
    pub fn record(&mut self, value: Tensor, parents: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: parents.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward>),
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut pending: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                let parent_grads = op.backward(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    match &mut pending[p.0] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[i];
            // caches such as im2col buffers are dead once the node is visited
            node.op = None;
            node.grad = Some(g);
        }
        Ok(())
    }

    fn expect_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }
}

pub mod gradcheck {
    //! Central finite-difference oracle for tape gradients.

    use super::*;

    /// Magnitudes below this are compared absolutely; central differences
    /// with h = 1e-5 carry ~1e-10 of roundoff on their own.
    pub const REL_FLOOR: f64 = 1e-4;

    /// Max relative error between tape gradients and central differences for
    /// every coordinate of every input. `build` maps input vars to a scalar.
    pub fn max_rel_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let h = 1e-5;
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.backward(out).unwrap();

        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = tape
                .grad(vars[k])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_mean_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, -4.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq);
        let loss = tape.scale(m, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(!tape.is_consumed());
    }

    #[test]
    fn linearity_of_backward() {
        // d(a f + b g) = a df + b dg on a shared leaf
        let x0 = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let grad_of = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let f = {
                let s = tape.sigmoid(x);
                tape.sum(s)
            };
            let g = {
                let sq = tape.mul(x, x).unwrap();
                tape.mean(sq)
            };
            let fa = tape.scale(f, a);
            let gb = tape.scale(g, b);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (1.7, -0.4);
        let combined = grad_of(a, b);
        let df = grad_of(1.0, 0.0);
        let dg = grad_of(0.0, 1.0);
        for i in 0..3 {
            assert!((combined[i] - (a * df[i] + b * dg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }
}
