//! Two-stage parameter-efficient adaptation of a vision-transformer encoder:
//! masked-image-modeling domain adaptation followed by task adaptation for
//! layered-image segmentation.

pub mod error;
pub mod gradsuite;
pub mod mim;
pub mod numeric;
pub mod params;
pub mod peft;
pub mod pipeline;
pub mod seg;
pub mod synthdata;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
