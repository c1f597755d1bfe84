//! Statistics and normalization primitives over `[B, C, H, W]` activations
//! and row-wise kernel standardization.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which elements share one mean/variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group per channel across batch and space (batch norm).
    PerChannel,
    /// One group per (sample, channel) across space (instance norm).
    PerInstance,
    /// `G` groups of consecutive channels per sample (group norm).
    Groups(usize),
}

impl Grouping {
    pub fn num_groups(self, batch: usize, channels: usize) -> usize {
        match self {
            Grouping::PerChannel => channels,
            Grouping::PerInstance => batch * channels,
            Grouping::Groups(g) => batch * g,
        }
    }

    fn group_of(self, b: usize, c: usize, channels: usize) -> usize {
        match self {
            Grouping::PerChannel => c,
            Grouping::PerInstance => b * channels + c,
            Grouping::Groups(g) => b * g + c / (channels / g),
        }
    }

    fn validate(self, channels: usize) -> Result<()> {
        if let Grouping::Groups(g) = self {
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::InvalidArgument(format!(
                    "{g} groups do not divide {channels} channels"
                )));
            }
        }
        Ok(())
    }

    /// Calls `f(group, slice_offset)` for every `(b, c)` plane.
    fn for_planes(self, dims: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
        let (b, c, h, w) = dims;
        for bi in 0..b {
            for ci in 0..c {
                f(self.group_of(bi, ci, c), (bi * c + ci) * h * w);
            }
        }
    }

    fn group_sizes(self, dims: (usize, usize, usize, usize)) -> Vec<f64> {
        let (b, c, h, w) = dims;
        let mut n = vec![0.0; self.num_groups(b, c)];
        self.for_planes(dims, |g, _| n[g] += (h * w) as f64);
        n
    }
}

/// Per-group population mean and variance of `x`.
pub(crate) fn group_moments(x: &Tensor, grouping: Grouping) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = x.dims4()?;
    grouping.validate(dims.1)?;
    let hw = dims.2 * dims.3;
    let n = grouping.group_sizes(dims);
    let groups = n.len();
    let data = x.data();
    let mut mean = vec![0.0; groups];
    grouping.for_planes(dims, |g, off| {
        mean[g] += data[off..off + hw].iter().sum::<f64>()
    });
    mean.iter_mut().zip(&n).for_each(|(m, n)| *m /= n);
    let mut var = vec![0.0; groups];
    grouping.for_planes(dims, |g, off| {
        let mu = mean[g];
        var[g] += data[off..off + hw]
            .iter()
            .map(|v| (v - mu) * (v - mu))
            .sum::<f64>();
    });
    var.iter_mut().zip(&n).for_each(|(v, n)| *v /= n);
    Ok((mean, var))
}

struct MeanBack {
    grouping: Grouping,
    dims: (usize, usize, usize, usize),
    n: Vec<f64>,
}

impl Backward for MeanBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let hw = self.dims.2 * self.dims.3;
        let mut dx = vec![0.0; inputs[0].len()];
        self.grouping.for_planes(self.dims, |g, off| {
            let v = grad[g] / self.n[g];
            dx[off..off + hw].iter_mut().for_each(|d| *d = v);
        });
        vec![Some(dx)]
    }
}

struct VarBack {
    grouping: Grouping,
    dims: (usize, usize, usize, usize),
    n: Vec<f64>,
    mean: Vec<f64>,
}

impl Backward for VarBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let hw = self.dims.2 * self.dims.3;
        let x = inputs[0].data();
        let mut dx = vec![0.0; x.len()];
        self.grouping.for_planes(self.dims, |g, off| {
            let k = 2.0 * grad[g] / self.n[g];
            let mu = self.mean[g];
            for (d, v) in dx[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *d = k * (v - mu);
            }
        });
        vec![Some(dx)]
    }
}

struct NormalizeBack {
    grouping: Grouping,
    dims: (usize, usize, usize, usize),
    n: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for NormalizeBack {
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let hw = self.dims.2 * self.dims.3;
        let xhat = output.data();
        let groups = self.n.len();
        let mut sg = vec![0.0; groups];
        let mut sgx = vec![0.0; groups];
        self.grouping.for_planes(self.dims, |g, off| {
            for (d, x) in grad[off..off + hw].iter().zip(&xhat[off..off + hw]) {
                sg[g] += d;
                sgx[g] += d * x;
            }
        });
        let mut dx = vec![0.0; grad.len()];
        self.grouping.for_planes(self.dims, |g, off| {
            let (n, k) = (self.n[g], self.inv_std[g] / self.n[g]);
            for i in off..off + hw {
                dx[i] = k * (n * grad[i] - sg[g] - xhat[i] * sgx[g]);
            }
        });
        vec![Some(dx)]
    }
}

struct FixedNormalizeBack {
    dims: (usize, usize, usize, usize),
    inv_std: Vec<f64>,
}

impl Backward for FixedNormalizeBack {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let hw = self.dims.2 * self.dims.3;
        let mut dx = grad.to_vec();
        Grouping::PerChannel.for_planes(self.dims, |c, off| {
            dx[off..off + hw]
                .iter_mut()
                .for_each(|d| *d *= self.inv_std[c]);
        });
        vec![Some(dx)]
    }
}

struct AffineBack {
    dims: (usize, usize, usize, usize),
}

impl Backward for AffineBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, gamma) = (inputs[0].data(), inputs[1].data());
        let hw = self.dims.2 * self.dims.3;
        let c = self.dims.1;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        Grouping::PerChannel.for_planes(self.dims, |ci, off| {
            for i in off..off + hw {
                dgamma[ci] += grad[i] * x[i];
                dbeta[ci] += grad[i];
            }
            if let Some(dx) = dx.as_mut() {
                for i in off..off + hw {
                    dx[i] = grad[i] * gamma[ci];
                }
            }
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

struct StandardizeRowsBack {
    row: usize,
    inv_std: Vec<f64>,
}

impl Backward for StandardizeRowsBack {
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let what = output.data();
        let n = self.row as f64;
        let mut dx = vec![0.0; grad.len()];
        for (r, inv) in self.inv_std.iter().enumerate() {
            let span = r * self.row..(r + 1) * self.row;
            let sg: f64 = grad[span.clone()].iter().sum();
            let sgx: f64 = grad[span.clone()]
                .iter()
                .zip(&what[span.clone()])
                .map(|(g, x)| g * x)
                .sum();
            for i in span {
                dx[i] = inv / n * (n * grad[i] - sg - what[i] * sgx);
            }
        }
        vec![Some(dx)]
    }
}

struct ScaleRowsBack {
    row: usize,
}

impl Backward for ScaleRowsBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (w, gain) = (inputs[0].data(), inputs[1].data());
        let dw = needs[0].then(|| {
            grad.iter()
                .enumerate()
                .map(|(i, g)| g * gain[i / self.row])
                .collect()
        });
        let dgain = needs[1].then(|| {
            (0..gain.len())
                .map(|r| {
                    let span = r * self.row..(r + 1) * self.row;
                    grad[span.clone()]
                        .iter()
                        .zip(&w[span])
                        .map(|(g, x)| g * x)
                        .sum()
                })
                .collect()
        });
        vec![dw, dgain]
    }
}

impl Tape {
    /// Differentiable per-group mean and population variance of a
    /// `[B, C, H, W]` tensor; both outputs have shape `[groups]`.
    pub fn spatial_mean_var(&mut self, x: Var, grouping: Grouping) -> Result<(Var, Var)> {
        let dims = self.value(x).dims4()?;
        let (mean, var) = group_moments(self.value(x), grouping)?;
        let n = grouping.group_sizes(dims);
        if n.iter().any(|&k| k < 1.0) {
            return Err(Error::EmptyReduction(
                "statistics group without elements".into(),
            ));
        }
        let g = mean.len();
        let m = self.record(
            Tensor::new(vec![g], mean.clone())?,
            &[x],
            MeanBack {
                grouping,
                dims,
                n: n.clone(),
            },
        );
        let v = self.record(
            Tensor::new(vec![g], var)?,
            &[x],
            VarBack {
                grouping,
                dims,
                n,
                mean,
            },
        );
        Ok((m, v))
    }

    /// `(x - mean) / sqrt(var + eps)` using statistics of the current batch.
    /// Also returns the per-group batch mean and variance.
    pub fn normalize(
        &mut self,
        x: Var,
        grouping: Grouping,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let dims = self.value(x).dims4()?;
        let (mean, var) = group_moments(self.value(x), grouping)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = dims.2 * dims.3;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        grouping.for_planes(dims, |g, off| {
            for i in off..off + hw {
                out[i] = (src[i] - mean[g]) * inv_std[g];
            }
        });
        let n = grouping.group_sizes(dims);
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let v = self.record(
            out,
            &[x],
            NormalizeBack {
                grouping,
                dims,
                n,
                inv_std,
            },
        );
        Ok((v, mean, var))
    }

    /// Per-channel normalization with externally supplied statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(Error::shape(
                "normalize_fixed",
                format!(
                    "{} channels, stats of length {}/{}",
                    dims.1,
                    mean.len(),
                    var.len()
                ),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = dims.2 * dims.3;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        Grouping::PerChannel.for_planes(dims, |c, off| {
            for i in off..off + hw {
                out[i] = (src[i] - mean[c]) * inv_std[c];
            }
        });
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.record(out, &[x], FixedNormalizeBack { dims, inv_std }))
    }

    /// `x * gamma[c] + beta[c]` on a `[B, C, H, W]` tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [dims.1] {
                return Err(Error::shape(
                    "channel_affine",
                    format!(
                        "{name} shape {:?}, expected [{}]",
                        self.value(p).shape(),
                        dims.1
                    ),
                ));
            }
        }
        let hw = dims.2 * dims.3;
        let (src, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0; src.len()];
        Grouping::PerChannel.for_planes(dims, |c, off| {
            for i in off..off + hw {
                out[i] = src[i] * g[c] + b[c];
            }
        });
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.record(out, &[x, gamma, beta], AffineBack { dims }))
    }

    /// Standardizes each leading-axis row of `w` to zero mean and unit
    /// population variance. No epsilon is added, so a constant row is an error.
    pub fn standardize_rows(&mut self, w: Var) -> Result<Var> {
        let t = self.value(w);
        let rows = t.shape()[0];
        let row = t.len() / rows;
        if row < 2 {
            return Err(Error::Degenerate(
                "cannot standardize rows of length 1".into(),
            ));
        }
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, chunk) in t.data().chunks(row).enumerate() {
            let mu = chunk.iter().sum::<f64>() / row as f64;
            let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row as f64;
            if var <= f64::MIN_POSITIVE {
                return Err(Error::Degenerate(format!("row {r} of kernel is constant")));
            }
            let inv = 1.0 / var.sqrt();
            for (o, v) in out[r * row..(r + 1) * row].iter_mut().zip(chunk) {
                *o = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.record(out, &[w], StandardizeRowsBack { row, inv_std }))
    }

    /// Multiplies each leading-axis row of `w` by `gain[row]`.
    pub fn scale_rows(&mut self, w: Var, gain: Var) -> Result<Var> {
        let (t, g) = (self.value(w), self.value(gain));
        let rows = t.shape()[0];
        if g.shape() != [rows] {
            return Err(Error::shape(
                "scale_rows",
                format!("gain {:?} for {rows} rows", g.shape()),
            ));
        }
        let row = t.len() / rows;
        let out: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * g.data()[i / row])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.record(out, &[w, gain], ScaleRowsBack { row }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
    }

    /// Weighted sum with fixed pseudo-random weights, so gradients are non-trivial.
    fn probe(t: &mut Tape, v: Var, seed: u64) -> Var {
        let w = random(t.value(v).shape(), seed);
        let w = t.constant(w);
        let p = t.mul(v, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 7.0));
        let (m, v) = tape.spatial_mean_var(x, Grouping::PerChannel).unwrap();
        assert!(tape.value(m).data().iter().all(|&x| x == 7.0));
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn group_count_must_divide_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        assert!(tape.normalize(x, Grouping::Groups(4), 1e-5).is_err());
        assert!(tape.normalize(x, Grouping::Groups(3), 1e-5).is_ok());
    }

    #[test]
    fn moments_gradients_match_finite_differences() {
        for seed in 0..5 {
            let x = random(&[2, 4, 5, 5], seed);
            for grouping in [
                Grouping::PerChannel,
                Grouping::PerInstance,
                Grouping::Groups(2),
            ] {
                let err = max_rel_error(std::slice::from_ref(&x), |t, v| {
                    let (m, var) = t.spatial_mean_var(v[0], grouping).unwrap();
                    let a = probe(t, m, 7);
                    let b = probe(t, var, 8);
                    t.add(a, b).unwrap()
                });
                assert!(err < 1e-4, "{grouping:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn normalize_and_affine_gradients_match_finite_differences() {
        for seed in 0..5 {
            let x = random(&[2, 4, 3, 3], seed);
            let gamma = random(&[4], seed + 10);
            let beta = random(&[4], seed + 20);
            for grouping in [
                Grouping::PerChannel,
                Grouping::PerInstance,
                Grouping::Groups(2),
            ] {
                let err = max_rel_error(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
                    let (n, _, _) = t.normalize(v[0], grouping, 1e-5).unwrap();
                    let y = t.channel_affine(n, v[1], v[2]).unwrap();
                    probe(t, y, 3)
                });
                assert!(err < 1e-4, "{grouping:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn fixed_normalize_gradient() {
        let x = random(&[2, 3, 2, 2], 1);
        let err = max_rel_error(&[x], |t, v| {
            let n = t
                .normalize_fixed(v[0], &[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0], 1e-5)
                .unwrap();
            probe(t, n, 4)
        });
        assert!(err < 1e-4);
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let w = tape.constant(random(&[4, 3, 3, 3], 9));
        let s = tape.standardize_rows(w).unwrap();
        for row in tape.value(s).data().chunks(27) {
            let mu = row.iter().sum::<f64>() / 27.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 27.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_and_gain_gradients() {
        for seed in 0..5 {
            let w = random(&[3, 2, 3, 3], seed);
            let g = random(&[3], seed + 1);
            let err = max_rel_error(&[w, g], |t, v| {
                let s = t.standardize_rows(v[0]).unwrap();
                let y = t.scale_rows(s, v[1]).unwrap();
                probe(t, y, 11)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constant_row_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::full(&[2, 4], 1.0));
        assert!(matches!(
            tape.standardize_rows(w),
            Err(Error::Degenerate(_))
        ));
    }
}
