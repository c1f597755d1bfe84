//! The union modality space: registry, zero-fill, modality drop and z-scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered set of modality names defining the network's input channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ModalityRegistry {
    names: Vec<String>,
}

impl TryFrom<Vec<String>> for ModalityRegistry {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ModalityRegistry> for Vec<String> {
    fn from(r: ModalityRegistry) -> Self {
        r.names
    }
}

impl ModalityRegistry {
    /// A registry with an explicit channel order.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("modality registry is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::InvalidArgument("empty modality name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate modality {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Union of the clients' modality lists. Clients are visited in sorted id
    /// order and names are kept in the order they are first seen.
    pub fn build<S: AsRef<str>>(clients: &[(S, Vec<String>)]) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InvalidArgument(
                "no clients to build a registry from".into(),
            ));
        }
        let mut order: Vec<&(S, Vec<String>)> = clients.iter().collect();
        order.sort_by(|a, b| a.0.as_ref().cmp(b.0.as_ref()));
        let mut names: Vec<String> = Vec::new();
        for (id, list) in order {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "client {:?} lists no modalities",
                    id.as_ref()
                )));
            }
            for m in list {
                if !names.contains(m) {
                    names.push(m.clone());
                }
            }
        }
        Self::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of input channels, `p`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownModality {
                name: name.to_string(),
                registry: self.names.clone(),
            })
    }

    /// Length-`p` presence mask of a subset.
    pub fn mask_of<S: AsRef<str>>(&self, subset: &[S]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for s in subset {
            mask[self.index_of(s.as_ref())?] = true;
        }
        Ok(mask)
    }
}

/// One client's modality subset expressed against a registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientModalities {
    pub client_id: String,
    pub subset: Vec<String>,
    pub mask: Vec<bool>,
}

impl ClientModalities {
    pub fn new(
        client_id: impl Into<String>,
        subset: Vec<String>,
        registry: &ModalityRegistry,
    ) -> Result<Self> {
        let client_id = client_id.into();
        if subset.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {client_id:?} has no modalities"
            )));
        }
        let mask = registry.mask_of(&subset)?;
        Ok(Self {
            client_id,
            subset,
            mask,
        })
    }
}

/// Packs per-modality `[H, W]` images into a `[p, H, W]` stack at their
/// registry positions. Channels with no image are exactly zero.
pub fn zero_fill<S: AsRef<str>>(
    images: &[(S, &Tensor)],
    registry: &ModalityRegistry,
) -> Result<Tensor> {
    let Some((_, first)) = images.first() else {
        return Err(Error::InvalidArgument(
            "zero_fill needs at least one image".into(),
        ));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "zero_fill",
            format!("expected [H, W] images, got {shape:?}"),
        ));
    }
    let plane = first.len();
    let mut out = vec![0.0; registry.len() * plane];
    let mut seen = vec![false; registry.len()];
    for (name, img) in images {
        let c = registry.index_of(name.as_ref())?;
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "zero_fill",
                format!("{}: {:?} vs {:?}", name.as_ref(), img.shape(), shape),
            ));
        }
        if seen[c] {
            return Err(Error::InvalidArgument(format!(
                "modality {:?} given twice",
                name.as_ref()
            )));
        }
        seen[c] = true;
        out[c * plane..(c + 1) * plane].copy_from_slice(img.data());
    }
    Tensor::new(vec![registry.len(), shape[0], shape[1]], out)
}

/// Samples which present channels survive a drop with probability `phi`.
///
/// Each present channel is dropped independently; draws that would remove
/// every present channel are rejected and redrawn. At `phi = 1` exactly one
/// present channel, chosen uniformly, survives.
pub fn drop_mask<R: Rng + ?Sized>(phi: f64, present: &[bool], rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidArgument(format!(
            "drop probability must lie in [0, 1], got {phi}"
        )));
    }
    let idx: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if idx.is_empty() || phi == 0.0 {
        return Ok(present.to_vec());
    }
    let mut mask = vec![false; present.len()];
    if phi >= 1.0 {
        mask[idx[rng.random_range(0..idx.len())]] = true;
        return Ok(mask);
    }
    loop {
        let mut any = false;
        for &i in &idx {
            let keep = !rng.random_bool(phi);
            mask[i] = keep;
            any |= keep;
        }
        if any {
            return Ok(mask);
        }
    }
}

/// Zeroes every channel of a `[p, H, W]` (or `[p, ...]`) slice whose mask entry is false.
pub fn apply_mask(data: &mut [f64], mask: &[bool]) {
    let plane = data.len() / mask.len();
    for (c, &keep) in mask.iter().enumerate() {
        if !keep {
            data[c * plane..(c + 1) * plane].fill(0.0);
        }
    }
}

/// Randomly zeroes present channels of a `[p, H, W]` stack; returns the
/// stack and the realized mask.
pub fn modality_drop<R: Rng + ?Sized>(
    x: &Tensor,
    phi: f64,
    present: &[bool],
    rng: &mut R,
) -> Result<(Tensor, Vec<bool>)> {
    if x.shape().first() != Some(&present.len()) {
        return Err(Error::shape(
            "modality_drop",
            format!("{} channel mask for shape {:?}", present.len(), x.shape()),
        ));
    }
    let mask = drop_mask(phi, present, rng)?;
    let mut out = x.clone();
    // absent channels pass through untouched
    let keep: Vec<bool> = mask.iter().zip(present).map(|(&k, &p)| k || !p).collect();
    apply_mask(out.data_mut(), &keep);
    Ok((out, mask))
}

/// Standardizes an image to zero mean and unit population variance, with
/// statistics taken over `region` when given.
pub fn zscore(image: &Tensor, region: Option<&[bool]>) -> Result<Tensor> {
    let data = image.data();
    if let Some(r) = region {
        if r.len() != data.len() {
            return Err(Error::shape(
                "zscore",
                format!("region of {} for {} pixels", r.len(), data.len()),
            ));
        }
    }
    let inside = |i: usize| region.is_none_or(|r| r[i]);
    let (mut n, mut sum) = (0usize, 0.0);
    for (i, &v) in data.iter().enumerate() {
        if inside(i) {
            n += 1;
            sum += v;
        }
    }
    if n == 0 {
        return Err(Error::EmptyReduction("zscore region is empty".into()));
    }
    let mean = sum / n as f64;
    let var = data
        .iter()
        .enumerate()
        .filter(|&(i, _)| inside(i))
        .map(|(_, &v)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if var == 0.0 || !var.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot z-score a constant image (value {mean})"
        )));
    }
    let std = var.sqrt();
    Tensor::new(
        image.shape().to_vec(),
        data.iter().map(|v| (v - mean) / std).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn registry_union_of_two() {
        let r =
            ModalityRegistry::build(&[("a", strings(&["T1"])), ("b", strings(&["T1", "FLAIR"]))])
                .unwrap();
        assert_eq!(r.len(), 2);
        let mut names = r.names().to_vec();
        names.sort();
        assert_eq!(names, strings(&["FLAIR", "T1"]));
    }

    #[test]
    fn registry_order_ignores_client_input_order() {
        let a = ("c1", strings(&["T1", "T2"]));
        let b = ("c0", strings(&["FLAIR"]));
        let r1 = ModalityRegistry::build(&[a.clone(), b.clone()]).unwrap();
        let r2 = ModalityRegistry::build(&[b, a]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.names(), strings(&["FLAIR", "T1", "T2"]));
    }

    #[test]
    fn registry_single_client_is_identity() {
        let r = ModalityRegistry::build(&[("x", strings(&["T2", "T1"]))]).unwrap();
        assert_eq!(r.names(), strings(&["T2", "T1"]));
    }

    #[test]
    fn registry_rejects_empty() {
        let none: [(&str, Vec<String>); 0] = [];
        assert!(ModalityRegistry::build(&none).is_err());
        assert!(ModalityRegistry::build(&[("a", vec![])]).is_err());
        assert!(ModalityRegistry::new(strings(&["T1", "T1"])).is_err());
    }

    fn six() -> ModalityRegistry {
        ModalityRegistry::new(strings(&["T1", "T1c", "FLAIR", "T2", "PD", "SWI"])).unwrap()
    }

    #[test]
    fn zero_fill_single_modality() {
        let r = six();
        let img = Tensor::from_fn(&[3, 3], |i| i as f64 + 1.0);
        let x = zero_fill(&[("T1", &img)], &r).unwrap();
        assert_eq!(x.shape(), &[6, 3, 3]);
        assert_eq!(&x.data()[..9], img.data());
        assert!(x.data()[9..].iter().all(|&v| v == 0.0));
        assert_eq!(x.sum(), img.sum());
    }

    #[test]
    fn zero_fill_full_set_is_reordering() {
        let r = ModalityRegistry::new(strings(&["A", "B"])).unwrap();
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let x = zero_fill(&[("B", &b), ("A", &a)], &r).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_fill_rejects_unknown() {
        let img = Tensor::zeros(&[2, 2]);
        let err = zero_fill(&[("DWI", &img)], &six()).unwrap_err();
        assert!(matches!(err, Error::UnknownModality { .. }));
    }

    #[test]
    fn drop_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let present = [true, false, true];
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let (y, m) = modality_drop(&x, 0.0, &present, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(m, present);
    }

    #[test]
    fn drop_one_keeps_exactly_one_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let present = [true, true, false, true];
        let mut counts = [0usize; 4];
        for _ in 0..3000 {
            let m = drop_mask(1.0, &present, &mut rng).unwrap();
            assert_eq!(m.iter().filter(|&&k| k).count(), 1);
            assert!(!m[2]);
            counts[m.iter().position(|&k| k).unwrap()] += 1;
        }
        for c in [0, 1, 3] {
            assert!((counts[c] as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.04);
        }
    }

    /// Survival probability of one channel, conditioned on at least one
    /// survivor, by enumerating every keep/drop pattern.
    fn enumerated_survival(phi: f64, n: usize) -> f64 {
        let (mut kept, mut total) = (0.0, 0.0);
        for bits in 1u32..(1 << n) {
            let k = bits.count_ones() as i32;
            let p = (1.0 - phi).powi(k) * phi.powi(n as i32 - k);
            total += p;
            if bits & 1 == 1 {
                kept += p;
            }
        }
        kept / total
    }

    #[test]
    fn drop_monte_carlo_matches_enumeration() {
        let exact = enumerated_survival(0.5, 4);
        assert!((exact - 8.0 / 15.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let present = [true; 4];
        let mut survived = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let m = drop_mask(0.5, &present, &mut rng).unwrap();
            assert!(m.iter().any(|&k| k));
            for (s, k) in survived.iter_mut().zip(m) {
                *s += k as usize;
            }
        }
        for s in survived {
            assert!((s as f64 / trials as f64 - exact).abs() < 0.02);
        }
    }

    #[test]
    fn drop_rejects_bad_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(drop_mask(1.5, &[true], &mut rng).is_err());
        assert!(drop_mask(-0.1, &[true], &mut rng).is_err());
    }

    #[test]
    fn zscore_small_grid() {
        let img = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = zscore(&img, None).unwrap();
        let mean = z.sum() / 4.0;
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-15);
        let again = zscore(&z, None).unwrap();
        assert!(again.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn zscore_rejects_constant() {
        assert!(matches!(
            zscore(&Tensor::full(&[3, 3], 2.0), None),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zscore_region_statistics() {
        let img = Tensor::new(vec![4], vec![1.0, 3.0, 100.0, -50.0]).unwrap();
        let z = zscore(&img, Some(&[true, true, false, false])).unwrap();
        assert_eq!(&z.data()[..2], &[-1.0, 1.0]);
        assert_eq!(z.data()[2], 98.0);
    }

    proptest! {
        #[test]
        fn zscore_random_image(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(&[8, 8], |_| rng.random_range(-5.0..20.0));
            let z = zscore(&img, None).unwrap();
            let mean = z.sum() / 64.0;
            let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-10);
        }

        #[test]
        fn drop_never_empties_and_respects_absence(
            seed in 0u64..500,
            phi in 0.0f64..=1.0,
            present in prop::collection::vec(any::<bool>(), 1..7),
        ) {
            prop_assume!(present.iter().any(|&p| p));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = drop_mask(phi, &present, &mut rng).unwrap();
            prop_assert!(m.iter().any(|&k| k));
            for (k, p) in m.iter().zip(&present) {
                prop_assert!(!k || *p);
            }
        }

        #[test]
        fn zero_fill_then_extract(seed in 0u64..200, keep in prop::collection::vec(any::<bool>(), 6)) {
            prop_assume!(keep.iter().any(|&k| k));
            let r = six();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imgs: Vec<(String, Tensor)> = r
                .names()
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(n, _)| (n.clone(), Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0))))
                .collect();
            let refs: Vec<(&str, &Tensor)> = imgs.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let x = zero_fill(&refs, &r).unwrap();
            for (n, t) in &imgs {
                let c = r.index_of(n).unwrap();
                prop_assert_eq!(&x.data()[c * 16..(c + 1) * 16], t.data());
            }
        }
    }
}
