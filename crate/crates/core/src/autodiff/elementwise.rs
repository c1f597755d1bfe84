use super::{Backward, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

struct AddBack;

impl Backward for AddBack {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

struct MulBack;

impl Backward for MulBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let times = |other: &[f64]| grad.iter().zip(other).map(|(g, o)| g * o).collect();
        vec![needs[0].then(|| times(b)), needs[1].then(|| times(a))]
    }
}

struct ScaleBack(f64);

impl Backward for ScaleBack {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

struct ReluBack;

impl Backward for ReluBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        // relu'(0) = 0
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

struct SigmoidBack;

impl Backward for SigmoidBack {
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            grad.iter()
                .zip(output.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
        )]
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn map_unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    fn zip_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("add", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x + y);
        Ok(self.record(out, &[a, b], AddBack))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("mul", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x * y);
        Ok(self.record(out, &[a, b], MulBack))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.map_unary(x, |v| v * s);
        self.record(out, &[x], ScaleBack(s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| v.max(0.0));
        self.relu_inputs.push(x);
        self.record(out, &[x], ReluBack)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, sigmoid);
        self.record(out, &[x], SigmoidBack)
    }
}
