//! On-disk tensor archives and calibration data.

mod archive;
mod calibset;

pub use archive::{DType, ParseError, Tensor, TensorArchive, TensorData, ALIGN, EMPTY_ARCHIVE_LEN, MAGIC};
pub use calibset::{synth_calib, CalibGenerator, CalibSet, KIND_CALIB};
