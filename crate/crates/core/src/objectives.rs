//! Training loss (weighted Dice + binary cross-entropy) and the Dice score.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the log.
pub const BCE_EPS: f64 = 1e-7;

/// Threshold applied to probabilities before scoring.
pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the Dice term; BCE gets `1 - alpha`.
    pub alpha: f64,
    /// Added to both numerator and denominator of the Dice ratio.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.smooth.is_nan() || self.smooth <= 0.0 || !self.smooth.is_finite() {
            return Err(Error::Config(format!(
                "smooth must be positive, got {}",
                self.smooth
            )));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::EmptyReduction(op.to_string()));
    }
    Ok(())
}

struct DiceBack {
    target: Vec<f64>,
    smooth: f64,
}

fn dice_terms(p: &[f64], t: &[f64]) -> (f64, f64) {
    let inter = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
    let total = p.iter().sum::<f64>() + t.iter().sum::<f64>();
    (inter, total)
}

impl Backward for DiceBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0].data();
        let (inter, total) = dice_terms(p, &self.target);
        let num = 2.0 * inter + self.smooth;
        let den = total + self.smooth;
        let g = grad[0];
        vec![Some(
            self.target
                .iter()
                .map(|&t| -g * (2.0 * t * den - num) / (den * den))
                .collect(),
        )]
    }
}

struct BceBack {
    target: Vec<f64>,
}

impl Backward for BceBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0].data();
        let scale = grad[0] / p.len() as f64;
        vec![Some(
            p.iter()
                .zip(&self.target)
                .map(|(&p, &t)| {
                    // the clamp is flat outside its range
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                        0.0
                    } else {
                        scale * (-t / p + (1.0 - t) / (1.0 - p))
                    }
                })
                .collect(),
        )]
    }
}

/// `1 - (2 Σ p·t + s) / (Σ p + Σ t + s)` over the whole batch.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    check_pair("dice_loss", tape.value(pred), target)?;
    let (inter, total) = dice_terms(tape.value(pred).data(), target.data());
    let loss = 1.0 - (2.0 * inter + smooth) / (total + smooth);
    let op = DiceBack {
        target: target.data().to_vec(),
        smooth,
    };
    Ok(tape.record(Tensor::scalar(loss), &[pred], op))
}

/// Mean pixel-wise binary cross-entropy.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_pair("bce_loss", tape.value(pred), target)?;
    let p = tape.value(pred).data();
    let total: f64 = p
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    let loss = total / p.len() as f64;
    let op = BceBack {
        target: target.data().to_vec(),
    };
    Ok(tape.record(Tensor::scalar(loss), &[pred], op))
}

/// `alpha * dice + (1 - alpha) * bce`.
pub fn combined_loss(tape: &mut Tape, pred: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let dice = dice_loss(tape, pred, target, cfg.smooth)?;
    let bce = bce_loss(tape, pred, target)?;
    let a = tape.scale(dice, cfg.alpha);
    let b = tape.scale(bce, 1.0 - cfg.alpha);
    tape.add(a, b)
}

/// Hard Dice overlap of two masks given as probabilities or 0/1 values,
/// thresholded at 0.5. Two empty masks score 1.
pub fn dice_score(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let (mut both, mut sum) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p >= SCORE_THRESHOLD, t >= SCORE_THRESHOLD);
        both += (p && t) as usize;
        sum += p as usize + t as usize;
    }
    if sum == 0 {
        1.0
    } else {
        2.0 * both as f64 / sum as f64
    }
}

/// Dice score of every sample in a `[B, 1, H, W]` batch.
pub fn dice_per_sample(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    check_pair("dice_per_sample", pred, target)?;
    let b = pred.shape()[0];
    let per = pred.len() / b;
    Ok((0..b)
        .map(|i| {
            dice_score(
                &pred.data()[i * per..(i + 1) * per],
                &target.data()[i * per..(i + 1) * per],
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, pred: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let out = f(&mut tape, p).unwrap();
        tape.value(out).item()
    }

    fn quarter_mask() -> Tensor {
        Tensor::from_fn(&[1, 1, 4, 4], |i| if i < 4 { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_perfect_overlap() {
        let target = quarter_mask();
        let l = eval(|tp, p| dice_loss(tp, p, &target, 1.0), &target);
        assert!(l.abs() < 1.0);
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn dice_zero_overlap_half_mask() {
        let target = Tensor::from_fn(&[1, 1, 4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn(&[1, 1, 4, 4], |i| 1.0 - target.data()[i]);
        let s = 1.0;
        let l = eval(|tp, p| dice_loss(tp, p, &target, s), &pred);
        // exact: 1 - s / (16 + s)
        assert!((l - 1.0).abs() <= s / 16.0);
    }

    #[test]
    fn dice_uniform_half_on_quarter_foreground() {
        let target = quarter_mask();
        let pred = Tensor::full(&[1, 1, 4, 4], 0.5);
        for s in [1.0, 0.1, 1e-3] {
            let l = eval(|tp, p| dice_loss(tp, p, &target, s), &pred);
            let expect = 1.0 - (2.0 * 0.5 * 4.0 + s) / (8.0 + 4.0 + s);
            assert!((l - expect).abs() < 1e-15, "{l} vs {expect}");
        }
    }

    #[test]
    fn bce_half_is_ln2() {
        let target = quarter_mask();
        let l = eval(
            |tp, p| bce_loss(tp, p, &target),
            &Tensor::full(&[1, 1, 4, 4], 0.5),
        );
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_exact_prediction_hits_clamp_floor() {
        let target = quarter_mask();
        let l = eval(|tp, p| bce_loss(tp, p, &target), &target);
        assert!(l >= 0.0 && l <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn bce_two_pixels() {
        let target = t(&[2], &[1.0, 0.0]);
        let l = eval(|tp, p| bce_loss(tp, p, &target), &t(&[2], &[0.9, 0.2]));
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn combined_endpoints_and_mix() {
        let target = t(&[2], &[1.0, 0.0]);
        let pred = t(&[2], &[0.9, 0.2]);
        let with = |alpha| {
            let cfg = LossConfig { alpha, smooth: 1.0 };
            eval(|tp, p| combined_loss(tp, p, &target, &cfg), &pred)
        };
        let dice = eval(|tp, p| dice_loss(tp, p, &target, 1.0), &pred);
        let bce = eval(|tp, p| bce_loss(tp, p, &target), &pred);
        assert_eq!(with(1.0), dice);
        assert_eq!(with(0.0), bce);
        // independent arithmetic: dice = 1 - (2*0.9 + 1)/(1.1 + 1 + 1)
        let dice_hand = 1.0 - 2.8 / 3.1;
        let bce_hand = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((with(0.8) - (0.8 * dice_hand + 0.2 * bce_hand)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[4]));
        assert!(dice_loss(&mut tape, p, &Tensor::zeros(&[5]), 1.0).is_err());
        assert!(bce_loss(&mut tape, p, &Tensor::zeros(&[2, 2])).is_err());
        let bad = LossConfig {
            alpha: 1.5,
            smooth: 1.0,
        };
        assert!(combined_loss(&mut tape, p, &Tensor::zeros(&[4]), &bad).is_err());
        let bad = LossConfig {
            alpha: 0.5,
            smooth: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn combined_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.05..0.95));
            let target = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_bool(0.3) as u8 as f64);
            let cfg = LossConfig::default();
            let err = max_rel_error(&[pred], |tp, v| {
                combined_loss(tp, v[0], &target, &cfg).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn score_examples() {
        let a: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert_eq!(dice_score(&a, &a), 1.0);
        let t: Vec<f64> = (0..64).map(|i| (i < 16) as u8 as f64).collect();
        let disjoint: Vec<f64> = (0..64).map(|i| (i >= 48) as u8 as f64).collect();
        assert_eq!(dice_score(&disjoint, &t), 0.0);
        // |P| = |T| = 16, P covers the second half of T
        let half: Vec<f64> = (0..64).map(|i| (8..24).contains(&i) as u8 as f64).collect();
        assert_eq!(dice_score(&half, &t), 0.5);
        assert_eq!(dice_score(&[0.0; 8], &[0.0; 8]), 1.0);
    }

    proptest! {
        #[test]
        fn loss_ranges(p in prop::collection::vec(0.0f64..1.0, 16), t in prop::collection::vec(any::<bool>(), 16)) {
            let target = Tensor::new(vec![16], t.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let pred = Tensor::new(vec![16], p).unwrap();
            let d = eval(|tp, v| dice_loss(tp, v, &target, 1.0), &pred);
            let b = eval(|tp, v| bce_loss(tp, v, &target), &pred);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(b >= 0.0);
        }

        #[test]
        fn score_symmetric_and_padding_invariant(
            p in prop::collection::vec(any::<bool>(), 1..40),
            t in prop::collection::vec(any::<bool>(), 1..40),
            pad in 0usize..20,
        ) {
            let n = p.len().min(t.len());
            let p: Vec<f64> = p[..n].iter().map(|&b| b as u8 as f64).collect();
            let t: Vec<f64> = t[..n].iter().map(|&b| b as u8 as f64).collect();
            let s = dice_score(&p, &t);
            prop_assert_eq!(s, dice_score(&t, &p));
            let mut pp = p.clone();
            let mut tp = t.clone();
            pp.extend(std::iter::repeat_n(0.0, pad));
            tp.extend(std::iter::repeat_n(0.0, pad));
            prop_assert_eq!(s, dice_score(&pp, &tp));
        }
    }
}
