//! Deterministic synthetic multi-modal 2D segmentation clients.
//!
//! Each sample is a set of per-modality images sharing one binary lesion
//! mask. Backgrounds are smooth random fields plus Gaussian noise; lesions
//! are added with a per-modality contrast, so a lesion with contrast 0 in a
//! modality is invisible there.

mod benchmark;
mod io;
mod shapes;

pub use benchmark::{benchmark_with_seed, default_benchmark, Benchmark, ClientRole};
pub use io::{
    load_benchmark, load_client, save_benchmark, save_client, BenchmarkManifest, ManifestEntry,
};
pub use shapes::ShapeFamily;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum |contrast| for a lesion to count as visible in a modality.
pub const MIN_VISIBLE_CONTRAST: f64 = 0.3;

/// A lesion type: its shape family and how it shows in each modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologySpec {
    pub family: ShapeFamily,
    /// Intensity offset of lesion pixels per modality, in `[-1, 1]`.
    pub visibility: IndexMap<String, f64>,
    /// Characteristic lesion radius in pixels, sampled uniformly.
    pub size_range: (f64, f64),
    /// Lesions per image, sampled uniformly (inclusive).
    pub count_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub client_id: String,
    pub modalities: Vec<String>,
    pub pathology: PathologySpec,
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    /// Amplitude of each smooth background component.
    pub field_amplitude: f64,
    /// Accepted range of the per-image foreground fraction.
    pub fg_fraction: (f64, f64),
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W]` image per modality, in the client's modality order.
    pub images: IndexMap<String, Tensor>,
    /// Binary `[H, W]` lesion mask.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub spec: ClientSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ClientSpec {
    pub fn validate(&self) -> Result<()> {
        let id = &self.client_id;
        let bad = |msg: String| Err(Error::Config(format!("client {id:?}: {msg}")));
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return bad("client id must be a plain, non-empty name".into());
        }
        if self.n_train == 0 {
            return bad("n_train must be at least 1".into());
        }
        if self.modalities.is_empty() {
            return bad("no modalities".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return bad(format!("modality {m:?} listed twice"));
            }
        }
        let p = &self.pathology;
        for (m, c) in &p.visibility {
            if !self.modalities.contains(m) {
                return bad(format!(
                    "visibility given for {m:?}, which the client does not have"
                ));
            }
            if !(-1.0..=1.0).contains(c) {
                return bad(format!("contrast {c} for {m:?} outside [-1, 1]"));
            }
        }
        if !p
            .visibility
            .values()
            .any(|c| c.abs() >= MIN_VISIBLE_CONTRAST)
        {
            return bad(format!(
                "lesions need |contrast| >= {MIN_VISIBLE_CONTRAST} in some modality"
            ));
        }
        let (lo, hi) = p.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("size_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let (cl, ch) = p.count_range;
        if cl == 0 || cl > ch {
            return bad(format!(
                "count_range ({cl}, {ch}) must satisfy 1 <= lo <= hi"
            ));
        }
        if 2.0 * (p.family.extent(hi) + 1.0) >= self.image_size as f64 {
            return bad(format!(
                "{:?} lesions of size {hi} do not fit a {}x{} image",
                p.family, self.image_size, self.image_size
            ));
        }
        let (fl, fh) = self.fg_fraction;
        if !(0.0 <= fl && fl < fh && fh <= 1.0) {
            return bad(format!(
                "fg_fraction ({fl}, {fh}) must satisfy 0 <= lo < hi <= 1"
            ));
        }
        if self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
            || self.field_amplitude.is_nan()
            || self.field_amplitude < 0.0
        {
            return bad("noise_sigma and field_amplitude must be non-negative".into());
        }
        Ok(())
    }
}

/// Background, lesion support and final image of one sample, kept apart so
/// tests can check how they combine.
struct Rendered {
    mask: Vec<bool>,
    #[cfg_attr(not(test), allow(dead_code))]
    backgrounds: Vec<Vec<f64>>,
    images: Vec<Vec<f64>>,
}

const FIELD_COMPONENTS: usize = 3;
const MAX_LAYOUT_ATTEMPTS: usize = 1000;

fn smooth_field(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> Vec<f64> {
    let mut field = vec![0.0; n * n];
    let tau = std::f64::consts::TAU;
    for _ in 0..FIELD_COMPONENTS {
        let a = amplitude * rng.random_range(0.5..1.0);
        let fx = rng.random_range(-2.0..2.0) / n as f64;
        let fy = rng.random_range(-2.0..2.0) / n as f64;
        let phase = rng.random_range(0.0..tau);
        for y in 0..n {
            for x in 0..n {
                field[y * n + x] += a * (tau * (fx * x as f64 + fy * y as f64) + phase).cos();
            }
        }
    }
    field
}

fn layout(spec: &ClientSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let n = spec.image_size;
    let p = &spec.pathology;
    let (fl, fh) = spec.fg_fraction;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut mask = vec![false; n * n];
        let count = rng.random_range(p.count_range.0..=p.count_range.1);
        for _ in 0..count {
            let size = if p.size_range.0 == p.size_range.1 {
                p.size_range.0
            } else {
                rng.random_range(p.size_range.0..p.size_range.1)
            };
            let margin = p.family.extent(size) + 1.0;
            let cx = rng.random_range(margin..n as f64 - margin);
            let cy = rng.random_range(margin..n as f64 - margin);
            p.family.render(&mut mask, n, (cx, cy), size, rng);
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if frac >= fl && frac <= fh && frac > 0.0 {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "client {:?}: could not place lesions within foreground fraction {:?} after {MAX_LAYOUT_ATTEMPTS} attempts",
        spec.client_id, spec.fg_fraction
    )))
}

fn render(spec: &ClientSpec, index: u64) -> Result<Rendered> {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mask = layout(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut backgrounds = Vec::with_capacity(spec.modalities.len());
    let mut images = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let bg = smooth_field(&mut rng, n, spec.field_amplitude);
        let c = spec.pathology.visibility.get(m).copied().unwrap_or(0.0);
        let img = bg
            .iter()
            .zip(&mask)
            .map(|(&b, &inside)| {
                let lesion = if inside { c } else { 0.0 };
                let eps = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                b + lesion + eps
            })
            .collect();
        backgrounds.push(bg);
        images.push(img);
    }
    Ok(Rendered {
        mask,
        backgrounds,
        images,
    })
}

fn sample_from(spec: &ClientSpec, r: Rendered) -> Sample {
    let n = spec.image_size;
    let images = spec
        .modalities
        .iter()
        .zip(r.images)
        .map(|(m, img)| (m.clone(), Tensor::new(vec![n, n], img).expect("n*n pixels")))
        .collect();
    let mask = Tensor::new(vec![n, n], r.mask.iter().map(|&b| b as u8 as f64).collect())
        .expect("n*n pixels");
    Sample { images, mask }
}

/// Generates the train and validation samples of one client. Sample `i`
/// draws from its own random stream, so the output depends only on the spec.
pub fn generate_client(spec: &ClientSpec) -> Result<ClientDataset> {
    spec.validate()?;
    let total = spec.n_train + spec.n_val;
    let mut samples = (0..total as u64)
        .map(|i| render(spec, i).map(|r| sample_from(spec, r)))
        .collect::<Result<Vec<_>>>()?;
    let val = samples.split_off(spec.n_train);
    Ok(ClientDataset {
        spec: spec.clone(),
        train: samples,
        val,
    })
}
