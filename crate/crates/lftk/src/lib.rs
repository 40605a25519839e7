//! Desk-scale toolkit for 4-D light fields: coded-aperture reconstruction and
//! light-field denoising built on a small dense-tensor reverse-mode autodiff
//! core. Everything runs deterministically on CPU from explicit seeds.

pub mod autodiff;
pub mod crnet;
pub mod dnnet;
pub mod error;
pub mod harness;
pub mod lf;
pub mod pfe;

pub use error::{Error, Result};
