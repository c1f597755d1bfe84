//! Federated training of a multi-modal segmentation network across clients
//! that hold different modality subsets and different lesion types.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense float64 arrays with a reverse-mode tape.
//! - [`segnet`]: a small residual U-Net with pluggable feature normalization.
//! - [`objectives`]: Dice + BCE training loss and the Dice score.
//! - [`modality`]: the union channel space, zero-fill and modality drop.
//! - [`synthdata`]: deterministic synthetic multi-modal clients.
//! - [`federation`]: the round loop with FedAvg / FedBN aggregation.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod federation;
mod gemm;
pub mod modality;
pub mod objectives;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{Grouping, Tape, Var};
pub use error::{Error, Result};
pub use modality::{ClientModalities, ModalityRegistry};
pub use objectives::LossConfig;
pub use tensor::Tensor;
