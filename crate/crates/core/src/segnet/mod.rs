//! Residual U-Net over the union modality channels with pluggable feature
//! normalization (batch, instance, group, or normalization-free weight
//! standardization).
//!
//! Layout for `depth = D`, widths `w_i = base_width * 2^i`:
//!
//! ```text
//! enc0:  ResBlock(p -> w0)
//! down_i: conv3x3/2 (w_{i-1} -> w_i) + norm + relu,  enc_i: ResBlock(w_i -> w_i)   i = 1..=D
//! dec_{i-1}: ResBlock(up2x(x) ++ enc_{i-1} -> w_{i-1})                              i = D..=1
//! head:  conv1x1 (w0 -> 1) + sigmoid
//! ```
//!
//! Each ResBlock is `relu(norm2(conv2(relu(norm1(conv1 x)))) + skip(x))`
//! with a 1x1 projection on the skip when channel counts differ.

mod check;
mod checkpoint;
mod params;

pub use check::{loss_gradient_error, FD_STEPS};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{EntryKind, ParamEntry, ParamSet};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grouping, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NormKind {
    BatchNorm,
    InstanceNorm,
    GroupNorm(usize),
    NormFree,
}

impl NormKind {
    pub fn has_running_stats(self) -> bool {
        matches!(self, NormKind::BatchNorm)
    }

    fn grouping(self) -> Option<Grouping> {
        match self {
            NormKind::BatchNorm => Some(Grouping::PerChannel),
            NormKind::InstanceNorm => Some(Grouping::PerInstance),
            NormKind::GroupNorm(g) => Some(Grouping::Groups(g)),
            NormKind::NormFree => None,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::BatchNorm => f.write_str("batch"),
            NormKind::InstanceNorm => f.write_str("instance"),
            NormKind::GroupNorm(g) => write!(f, "group:{g}"),
            NormKind::NormFree => f.write_str("nf"),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "batch" | "bn" => Ok(NormKind::BatchNorm),
            "instance" | "in" => Ok(NormKind::InstanceNorm),
            "group" | "gn" => Ok(NormKind::GroupNorm(DEFAULT_GROUPS)),
            "nf" | "normfree" | "norm_free" => Ok(NormKind::NormFree),
            other => match other.split_once(':') {
                Some(("group" | "gn", g)) => g
                    .parse()
                    .map(NormKind::GroupNorm)
                    .map_err(|_| Error::Config(format!("bad group count in {s:?}"))),
                _ => Err(Error::Config(format!(
                    "unknown norm kind {s:?} (expected batch, instance, group[:G] or nf)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for NormKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NormKind> for String {
    fn from(k: NormKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of union modalities `p`.
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub norm: NormKind,
    pub seed: u64,
}

impl NetConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| self.base_width << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.depth == 0 || self.base_width == 0 {
            return Err(Error::Config(format!(
                "in_channels, depth and base_width must be positive: {self:?}"
            )));
        }
        if let NormKind::GroupNorm(g) = self.norm {
            if let Some(c) = self.widths().into_iter().find(|c| g == 0 || c % g != 0) {
                return Err(Error::Config(format!(
                    "group norm with {g} groups does not divide layer width {c}"
                )));
            }
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics; BN running buffers updated with [`BN_MOMENTUM`].
    Train,
    /// BN uses running buffers.
    Eval,
    /// Batch statistics without gradients; BN buffers updated with the given
    /// momentum. `1/k` on the k-th batch yields a cumulative average.
    Calibrate { momentum: f64 },
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    gain: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct NormLayer {
    name: String,
    gamma: usize,
    beta: usize,
    running: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Unit {
    conv: ConvLayer,
    norm: Option<NormLayer>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: Unit,
    second: Unit,
    skip: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ResBlock,
    downs: Vec<Unit>,
    encoders: Vec<ResBlock>,
    /// Ordered from the deepest level upwards.
    decoders: Vec<ResBlock>,
    head: ConvLayer,
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
    norm: NormKind,
}

impl Builder {
    fn push(
        &mut self,
        name: String,
        tensor: Tensor,
        is_norm: bool,
        kind: EntryKind,
    ) -> Result<usize> {
        self.params.insert(
            name.clone(),
            ParamEntry {
                tensor,
                is_norm,
                kind,
            },
        )?;
        Ok(self.params.len() - 1)
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<ConvLayer> {
        let fan_in = cin * k * k;
        let he = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, he).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(&mut self.rng));
        let weight = self.push(format!("{name}.weight"), w, false, EntryKind::Param)?;
        let bias = self.push(
            format!("{name}.bias"),
            Tensor::zeros(&[cout]),
            false,
            EntryKind::Param,
        )?;
        let gain = match self.norm {
            // standardized kernels have unit variance; the gain restores He scale
            NormKind::NormFree => Some(self.push(
                format!("{name}.gain"),
                Tensor::full(&[cout], he),
                false,
                EntryKind::Param,
            )?),
            _ => None,
        };
        Ok(ConvLayer {
            weight,
            bias,
            gain,
            stride,
            pad: k / 2,
        })
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<Option<NormLayer>> {
        if self.norm == NormKind::NormFree {
            return Ok(None);
        }
        let gamma = self.push(
            format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            true,
            EntryKind::Param,
        )?;
        let beta = self.push(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            true,
            EntryKind::Param,
        )?;
        let running = if self.norm.has_running_stats() {
            let m = self.push(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                true,
                EntryKind::Buffer,
            )?;
            let v = self.push(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                true,
                EntryKind::Buffer,
            )?;
            Some((m, v))
        } else {
            None
        };
        Ok(Some(NormLayer {
            name: name.to_string(),
            gamma,
            beta,
            running,
        }))
    }

    fn unit(
        &mut self,
        prefix: &str,
        suffix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Unit> {
        let conv = self.conv(&format!("{prefix}.conv{suffix}"), cin, cout, 3, stride)?;
        let norm = self.norm(&format!("{prefix}.norm{suffix}"), cout)?;
        Ok(Unit { conv, norm })
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<ResBlock> {
        let first = self.unit(prefix, "1", cin, cout, 1)?;
        let second = self.unit(prefix, "2", cout, cout, 1)?;
        let skip = if cin != cout {
            Some(self.conv(&format!("{prefix}.skip"), cin, cout, 1, 1)?)
        } else {
            None
        };
        Ok(ResBlock {
            first,
            second,
            skip,
        })
    }
}

/// Result of one forward pass.
pub struct Forward {
    /// `[B, 1, H, W]` lesion probabilities.
    pub output: Var,
    /// Tape handle of every entry, aligned with [`ParamSet`] order;
    /// `None` for buffers.
    pub bound: Vec<Option<Var>>,
    /// `(layer, pre-norm input, normalized output before affine)` per norm layer.
    pub norm_taps: Vec<(String, Var, Var)>,
}

#[derive(Clone)]
pub struct SegNet {
    config: NetConfig,
    params: ParamSet,
    layout: Layout,
}

impl SegNet {
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            norm: config.norm,
        };
        let widths = config.widths();
        let stem = b.res_block("enc0", config.in_channels, widths[0])?;
        let mut downs = Vec::new();
        let mut encoders = Vec::new();
        for i in 1..=config.depth {
            downs.push(b.unit(&format!("down{i}"), "", widths[i - 1], widths[i], 2)?);
            encoders.push(b.res_block(&format!("enc{i}"), widths[i], widths[i])?);
        }
        let mut decoders = Vec::new();
        for i in (1..=config.depth).rev() {
            decoders.push(b.res_block(
                &format!("dec{}", i - 1),
                widths[i] + widths[i - 1],
                widths[i - 1],
            )?);
        }
        let head = b.conv("head", widths[0], 1, 1, 1)?;
        Ok(SegNet {
            config,
            params: b.params,
            layout: Layout {
                stem,
                downs,
                encoders,
                decoders,
                head,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn get_params(&self) -> ParamSet {
        self.params.clone()
    }

    /// Replaces every entry, buffers included. Names, order and shapes must match.
    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.check_same_layout(params)?;
        self.params = params.clone();
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape(
                "segnet",
                format!("expected [B,p,H,W], got {shape:?}"),
            ));
        };
        if *c != self.config.in_channels {
            return Err(Error::shape(
                "segnet",
                format!(
                    "input has {c} channels, model expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            let pad = |v: usize| v.div_ceil(m) * m - v;
            return Err(Error::shape(
                "segnet",
                format!(
                    "spatial size {h}x{w} not divisible by 2^depth = {m}; pad by {}x{} pixels",
                    pad(*h),
                    pad(*w)
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, mode: Mode) -> Result<Forward> {
        self.check_input(input.shape())?;
        let trainable = mode == Mode::Train;
        let bound: Vec<Option<Var>> = self
            .params
            .iter()
            .map(|(_, e)| {
                (e.kind == EntryKind::Param).then(|| tape.leaf(e.tensor.clone(), trainable))
            })
            .collect();
        let x = tape.constant(input.clone());
        let mut pass = Pass {
            tape,
            params: &mut self.params,
            bound: &bound,
            mode,
            norm: self.config.norm,
            taps: Vec::new(),
        };
        let l = &self.layout;
        let mut h = pass.res_block(&l.stem, x)?;
        let mut skips = vec![h];
        for (down, enc) in l.downs.iter().zip(&l.encoders) {
            let d = pass.unit(down, h, true)?;
            h = pass.res_block(enc, d)?;
            skips.push(h);
        }
        skips.pop();
        for dec in &l.decoders {
            let up = pass.tape.upsample_nearest2x(h)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = pass.tape.concat_channels(up, skip)?;
            h = pass.res_block(dec, cat)?;
        }
        let logits = pass.conv(&l.head, h)?;
        let output = pass.tape.sigmoid(logits);
        let norm_taps = pass.taps;
        Ok(Forward {
            output,
            bound,
            norm_taps,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mode = if mode == Mode::Train {
            Mode::Calibrate {
                momentum: BN_MOMENTUM,
            }
        } else {
            mode
        };
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, input, mode)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Gradients of a consumed tape, aligned with [`ParamSet`] order.
    pub fn gradients(&self, tape: &Tape, fwd: &Forward) -> Vec<Option<Vec<f64>>> {
        fwd.bound
            .iter()
            .map(|v| v.and_then(|v| tape.grad(v)).map(<[f64]>::to_vec))
            .collect()
    }

    /// Standardized kernels (before the gain) of every convolution of a
    /// normalization-free model, keyed by weight name.
    pub fn standardized_kernels(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, e) in self.params.iter() {
            if !name.ends_with(".weight") {
                continue;
            }
            let gain_name = name.replace(".weight", ".gain");
            if self.params.get(&gain_name).is_none() {
                continue;
            }
            let mut tape = Tape::new();
            let w = tape.constant(e.tensor.clone());
            let s = tape.standardize_rows(w)?;
            out.push((name.to_string(), tape.value(s).clone()));
        }
        Ok(out)
    }
}

struct Pass<'a> {
    tape: &'a mut Tape,
    params: &'a mut ParamSet,
    bound: &'a [Option<Var>],
    mode: Mode,
    norm: NormKind,
    taps: Vec<(String, Var, Var)>,
}

impl Pass<'_> {
    fn var(&self, idx: usize) -> Var {
        self.bound[idx].expect("parameter bound on tape")
    }

    fn conv(&mut self, c: &ConvLayer, x: Var) -> Result<Var> {
        let mut w = self.var(c.weight);
        if let Some(g) = c.gain {
            let s = self.tape.standardize_rows(w)?;
            w = self.tape.scale_rows(s, self.var(g))?;
        }
        self.tape.conv2d(x, w, self.var(c.bias), c.stride, c.pad)
    }

    fn norm(&mut self, n: &NormLayer, x: Var) -> Result<Var> {
        let grouping = self.norm.grouping().expect("norm layer implies a grouping");
        let normalized = match (n.running, self.mode) {
            (Some((rm, rv)), Mode::Eval) => {
                let mean = self
                    .params
                    .get_index(rm)
                    .expect("buffer")
                    .1
                    .tensor
                    .data()
                    .to_vec();
                let var = self
                    .params
                    .get_index(rv)
                    .expect("buffer")
                    .1
                    .tensor
                    .data()
                    .to_vec();
                self.tape.normalize_fixed(x, &mean, &var, NORM_EPS)?
            }
            (running, mode) => {
                let (y, mean, var) = self.tape.normalize(x, grouping, NORM_EPS)?;
                if let Some((rm, rv)) = running {
                    let m = match mode {
                        Mode::Calibrate { momentum } => momentum,
                        _ => BN_MOMENTUM,
                    };
                    for (idx, batch) in [(rm, mean), (rv, var)] {
                        let buf = self
                            .params
                            .get_index_mut(idx)
                            .expect("buffer")
                            .tensor
                            .data_mut();
                        for (r, b) in buf.iter_mut().zip(batch) {
                            *r = (1.0 - m) * *r + m * b;
                        }
                    }
                }
                y
            }
        };
        self.taps.push((n.name.clone(), x, normalized));
        self.tape
            .channel_affine(normalized, self.var(n.gamma), self.var(n.beta))
    }

    /// conv -> norm -> optional relu
    fn unit(&mut self, u: &Unit, x: Var, relu: bool) -> Result<Var> {
        let mut h = self.conv(&u.conv, x)?;
        if let Some(n) = &u.norm {
            h = self.norm(n, h)?;
        }
        Ok(if relu { self.tape.relu(h) } else { h })
    }

    fn res_block(&mut self, r: &ResBlock, x: Var) -> Result<Var> {
        let h = self.unit(&r.first, x, true)?;
        let h = self.unit(&r.second, h, false)?;
        let s = match &r.skip {
            Some(c) => self.conv(c, x)?,
            None => x,
        };
        let sum = self.tape.add(h, s)?;
        Ok(self.tape.relu(sum))
    }
}
