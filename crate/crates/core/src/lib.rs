//! Training machinery for detectors learned jointly on datasets whose label
//! spaces only partially overlap.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only computation:
//! box geometry, anchor assignment, classification weight masks, the masked
//! losses, MC-dropout pseudo-annotation mining, a small linear detector used
//! to run the whole pipeline on synthetic scenes, and AP evaluation. File
//! formats and the command line live in the `catext` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assign;
pub mod dataspace;
mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod mining;
pub mod toydet;
pub mod weights;

pub use error::{Error, Result};
