//! File formats: the TNSR tensor container and 8-bit PGM/PPM images.

mod pnm;
mod tnsr;

pub use pnm::{export_pnm, import_pnm};
pub use tnsr::{DType, TnsrFile};
