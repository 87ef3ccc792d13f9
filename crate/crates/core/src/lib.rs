//! Mode variational LSTM cells with exact backpropagation through time,
//! a synthetic mode-shift sequence benchmark and static-sequence probes.

pub mod archive;
pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod probe;
pub mod reference;

pub use cells::{CellOptions, CellParams, Variant};
pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
pub use params::ParamSet;
