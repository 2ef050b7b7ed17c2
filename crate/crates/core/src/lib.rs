//! Adder neural network toolkit.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod error;
#[doc(hidden)]
pub mod fuzzing;
pub mod grad;
pub mod layers;
pub mod necks;
pub mod profiler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::{BatchNormState, FilterBank, FilterKind};
pub use tensor::{ConvGeometry, Element, Shape4, Tensor4};
