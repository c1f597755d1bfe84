use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::{drop_mask, zero_fill, zscore, ModalityRegistry};
use crate::synthdata::{ClientDataset, Sample};
use crate::tensor::Tensor;

/// One split of a client's data in network layout: z-scored, zero-filled
/// inputs `[N, p, H, W]` and masks `[N, 1, H, W]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub masks: Vec<f64>,
    pub len: usize,
}

/// A client's data expressed in the union channel space.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClient {
    pub client_id: String,
    /// Registry channels this client provides.
    pub present: Vec<bool>,
    pub channels: usize,
    pub size: usize,
    pub train: Split,
    pub val: Split,
}

fn pack(samples: &[Sample], registry: &ModalityRegistry, keep: &[bool]) -> Result<Split> {
    let mut inputs = Vec::new();
    let mut masks = Vec::new();
    for s in samples {
        let mut imgs = Vec::with_capacity(s.images.len());
        for (m, img) in &s.images {
            if keep[registry.index_of(m)?] {
                imgs.push((m.as_str(), zscore(img, None)?));
            }
        }
        let refs: Vec<(&str, &Tensor)> = imgs.iter().map(|(m, t)| (*m, t)).collect();
        inputs.extend_from_slice(zero_fill(&refs, registry)?.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok(Split {
        inputs,
        masks,
        len: samples.len(),
    })
}

impl PreparedClient {
    /// Z-scores every image, then packs it at its registry channel.
    /// With `only`, modalities outside that list are treated as absent.
    pub fn new(
        data: &ClientDataset,
        registry: &ModalityRegistry,
        only: Option<&[String]>,
    ) -> Result<Self> {
        let spec = &data.spec;
        let mut present = registry.mask_of(&spec.modalities)?;
        if let Some(only) = only {
            let allowed = registry.mask_of(only)?;
            present.iter_mut().zip(&allowed).for_each(|(p, a)| *p &= a);
            if !present.iter().any(|&p| p) {
                return Err(Error::InvalidArgument(format!(
                    "client {:?} has none of the modalities {only:?}",
                    spec.client_id
                )));
            }
        }
        let train = pack(&data.train, registry, &present)?;
        let val = pack(&data.val, registry, &present)?;
        Ok(Self {
            client_id: spec.client_id.clone(),
            present,
            channels: registry.len(),
            size: spec.image_size,
            train,
            val,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn plane(&self) -> usize {
        self.size * self.size
    }
}

impl Split {
    /// Gathers samples into `[B, p, H, W]` inputs and `[B, 1, H, W]` masks.
    /// With a drop probability, each sample gets its own drop mask.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        client: &PreparedClient,
        idx: &[usize],
        drop: Option<(f64, &mut R)>,
    ) -> Result<(Tensor, Tensor)> {
        let (n, plane) = (client.sample_len(), client.plane());
        let mut x = Vec::with_capacity(idx.len() * n);
        let mut y = Vec::with_capacity(idx.len() * plane);
        let mut drop = drop;
        for &i in idx {
            let start = x.len();
            x.extend_from_slice(&self.inputs[i * n..(i + 1) * n]);
            y.extend_from_slice(&self.masks[i * plane..(i + 1) * plane]);
            if let Some((phi, rng)) = drop.as_mut() {
                let keep = drop_mask(*phi, &client.present, &mut **rng)?;
                for (c, k) in keep.iter().enumerate() {
                    if !k {
                        x[start + c * plane..start + (c + 1) * plane].fill(0.0);
                    }
                }
            }
        }
        let b = idx.len();
        Ok((
            Tensor::new(vec![b, client.channels, client.size, client.size], x)?,
            Tensor::new(vec![b, 1, client.size, client.size], y)?,
        ))
    }
}

/// Endless shuffled traversal of `0..n`, reshuffled at every pass.
#[derive(Clone, Debug)]
pub struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    pub fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut c = Cycler {
            order: (0..n).collect(),
            cursor: 0,
        };
        c.shuffle(rng);
        c
    }

    fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        use rand::seq::SliceRandom;
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.shuffle(rng);
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
