use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EntryKind, Mode, ParamSet, SegNet};
use crate::autodiff::gradcheck::REL_FLOOR;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::objectives::{combined_loss, LossConfig};
use crate::tensor::Tensor;

/// Finite-difference steps of [`loss_gradient_error`], largest first.
pub const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Coordinates drawn per check before giving up on finding one whose
/// perturbation stays on one linear piece of every ReLU.
const MAX_DRAWS: usize = 50;

fn loss_value(
    net: &SegNet,
    params: &ParamSet,
    input: &Tensor,
    target: &Tensor,
    loss: &LossConfig,
) -> Result<(f64, Vec<bool>)> {
    let mut n = net.clone();
    n.set_params(params)?;
    let mut tape = Tape::new();
    let fwd = n.forward(&mut tape, input, Mode::Train)?;
    let l = combined_loss(&mut tape, fwd.output, target, loss)?;
    Ok((tape.value(l).item(), tape.activation_pattern()))
}

/// Max relative error between the tape gradient of the training loss (train
/// mode, combined Dice/BCE) and central differences, at `per_entry`
/// randomly drawn coordinates of every trainable entry.
///
/// The loss is not differentiable across a ReLU kink, so a difference
/// quotient whose `±h` passes flip any ReLU says nothing about the gradient.
/// Each coordinate uses the largest step in [`FD_STEPS`] that flips none;
/// if every step flips one, the coordinate is redrawn.
pub fn loss_gradient_error(
    net: &SegNet,
    input: &Tensor,
    target: &Tensor,
    loss: &LossConfig,
    per_entry: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = net.clone().forward(&mut tape, input, Mode::Train)?;
    let l = combined_loss(&mut tape, fwd.output, target, loss)?;
    tape.backward(l)?;
    let grads = net.gradients(&tape, &fwd);
    let pattern = tape.activation_pattern();

    let base = net.get_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, (name, e)) in base.iter().enumerate() {
        if e.kind != EntryKind::Param {
            continue;
        }
        let shifted = |i: usize, delta: f64| {
            let mut p = base.clone();
            p.get_index_mut(k).expect("same layout").tensor.data_mut()[i] += delta;
            loss_value(net, &p, input, target, loss)
        };
        for _ in 0..per_entry {
            let mut smooth = None;
            'draw: for _ in 0..MAX_DRAWS {
                let i = rng.random_range(0..e.tensor.len());
                for h in FD_STEPS {
                    let (up, up_pattern) = shifted(i, h)?;
                    let (down, down_pattern) = shifted(i, -h)?;
                    if up_pattern == pattern && down_pattern == pattern {
                        smooth = Some((i, (up - down) / (2.0 * h)));
                        break 'draw;
                    }
                }
            }
            let Some((i, numeric)) = smooth else {
                return Err(Error::Degenerate(format!(
                    "every drawn coordinate of {} crosses a ReLU kink",
                    name
                )));
            };
            let analytic = grads[k].as_ref().map_or(0.0, |g| g[i]);
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
