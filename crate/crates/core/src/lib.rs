pub mod backbone;
pub mod cascade;
pub mod corruptions;
pub mod datagen;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod registry;
pub mod ses;
pub mod she;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Kernel2D, Tensor};
