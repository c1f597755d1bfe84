use super::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct SumBack {
    scale: f64,
}

impl Backward for SumBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].len()])]
    }
}

impl Tape {
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), &[x], SumBack { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len() as f64;
        let m = t.sum() / n;
        self.record(Tensor::scalar(m), &[x], SumBack { scale: 1.0 / n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_small_vector() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let m = tape.mean(x);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }
}
