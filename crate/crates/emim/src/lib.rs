//! A desk-scale laboratory for model collapse in masked-image-modeling
//! pretraining on low-diversity multi-modal volumes.
//!
//! The crate reproduces both failure modes on synthetic data — complete
//! collapse, where the trained model emits the per-voxel dataset mean for any
//! input, and dimensional collapse, where learned features occupy a
//! low-dimensional subspace — and implements two remedies: the hybrid mask
//! pattern (per-modality masking phases that raise the difficulty of the
//! pretext task) and the pyramid Barlow twins regularizer (cross-correlation
//! uniformity losses at several encoder depths). Quantitative instruments
//! (masked-view variance, trivial-solution score, singular spectra, effective
//! rank) make each claim measurable.
//!
//! See the guide in `book/` for a narrative tour; the `emim` binary drives
//! the same workflows from the command line.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod rng;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

// The book's code listings compile and run as doctests, keeping the guide in
// sync with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
