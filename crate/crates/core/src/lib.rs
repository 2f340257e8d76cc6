//! Sim-to-real image translation with a detection-consistency objective.
//!
//! Two unpaired image domains are bridged by a pair of U-Net generators
//! trained with adversarial and cycle losses, plus a perception term that
//! asks a frozen one-stage detector to predict the same boxes and classes on
//! an image and on each of its translations. The crate is self-contained:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, Adam, spectral norm
//! - [`scene`]: procedural labeled scenes rendered in "sim" and "real" styles
//! - [`detector`]: anchors, matching, a small FPN detector, NMS and mAP
//! - [`losses`]: cross entropy through the focal consistency loss and the
//!   six-pair perception loss
//! - [`gan`]: generators, patch discriminators and the combined objective
//! - [`train`]: the training loop, ensembles, translation and checkpoints
//! - [`eval`]: object-preservation and realism metrics plus report output
//! - [`benchmark`]: the fixed corpora and runs behind the measured results

pub mod benchmark;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gan;
pub mod image_io;
pub mod losses;
mod nn;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

// Compile and run the guide's listings as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/gan.md")]
    mod gan {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
