use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ClientSpec, PathologySpec, ShapeFamily};
use crate::error::Result;
use crate::modality::ModalityRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    /// Participates in federated training.
    Train,
    /// Used only to evaluate generalization.
    HeldOut,
}

/// Training and held-out client specs of one synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub seed: u64,
    pub train: Vec<ClientSpec>,
    pub heldout: Vec<ClientSpec>,
}

impl Benchmark {
    /// Union registry over the training clients.
    pub fn registry(&self) -> Result<ModalityRegistry> {
        let lists: Vec<(&str, Vec<String>)> = self
            .train
            .iter()
            .map(|c| (c.client_id.as_str(), c.modalities.clone()))
            .collect();
        ModalityRegistry::build(&lists)
    }

    pub fn clients(&self) -> impl Iterator<Item = (ClientRole, &ClientSpec)> {
        self.train
            .iter()
            .map(|c| (ClientRole::Train, c))
            .chain(self.heldout.iter().map(|c| (ClientRole::HeldOut, c)))
    }
}

pub const IMAGE_SIZE: usize = 32;
pub const N_TRAIN: usize = 40;
pub const N_VAL: usize = 20;
pub const NOISE_SIGMA: f64 = 0.35;
pub const FIELD_AMPLITUDE: f64 = 0.5;
pub const FG_FRACTION: (f64, f64) = (0.005, 0.10);

fn client(
    index: u64,
    seed: u64,
    id: &str,
    family: ShapeFamily,
    visibility: &[(&str, f64)],
    size_range: (f64, f64),
    count_range: (usize, usize),
) -> ClientSpec {
    let modalities = visibility.iter().map(|(m, _)| m.to_string()).collect();
    let visibility: IndexMap<String, f64> = visibility
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(m, c)| (m.to_string(), *c))
        .collect();
    ClientSpec {
        client_id: id.to_string(),
        modalities,
        pathology: PathologySpec {
            family,
            visibility,
            size_range,
            count_range,
        },
        n_train: N_TRAIN,
        n_val: N_VAL,
        image_size: IMAGE_SIZE,
        noise_sigma: NOISE_SIGMA,
        field_amplitude: FIELD_AMPLITUDE,
        fg_fraction: FG_FRACTION,
        seed: seed.wrapping_mul(100).wrapping_add(index),
    }
}

/// The default benchmark with data seed 0.
pub fn default_benchmark() -> Benchmark {
    benchmark_with_seed(0)
}

/// Five training clients and two held-out clients. The modality subsets
/// follow the multi-database layout being simulated; the second held-out
/// client reuses the first client's lesion type with a single modality, and
/// the first held-out client reuses the third client's lesion type with a
/// modality combination no training client has.
pub fn benchmark_with_seed(seed: u64) -> Benchmark {
    use ShapeFamily::*;
    let train = vec![
        client(
            1,
            seed,
            "c1-tumor",
            Blob,
            &[("T1", -0.4), ("T1c", 0.9), ("FLAIR", 0.8), ("T2", 0.7)],
            (3.0, 5.5),
            (1, 2),
        ),
        client(
            2,
            seed,
            "c2-ms",
            SpeckleCluster,
            &[
                ("T1", -0.3),
                ("T1c", 0.0),
                ("FLAIR", 0.9),
                ("T2", 0.7),
                ("PD", 0.8),
            ],
            (3.0, 5.0),
            (1, 2),
        ),
        client(
            3,
            seed,
            "c3-stroke",
            Wedge,
            &[("T1", -0.8)],
            (4.0, 7.0),
            (1, 1),
        ),
        client(
            4,
            seed,
            "c4-tbi",
            Streak,
            &[("T1", 0.0), ("FLAIR", 0.6), ("T2", 0.5), ("SWI", -0.9)],
            (4.0, 7.0),
            (1, 2),
        ),
        client(
            5,
            seed,
            "c5-wmh",
            Ring,
            &[("T1", -0.3), ("FLAIR", 0.9)],
            (3.0, 5.0),
            (1, 2),
        ),
    ];
    let heldout = vec![
        client(
            6,
            seed,
            "h1-stroke",
            Wedge,
            &[("T1", -0.5), ("FLAIR", 0.8), ("T2", 0.7)],
            (4.0, 7.0),
            (1, 1),
        ),
        client(
            7,
            seed,
            "h2-tumor",
            Blob,
            &[("T1", -0.5)],
            (3.0, 5.5),
            (1, 2),
        ),
    ];
    Benchmark {
        seed,
        train,
        heldout,
    }
}
