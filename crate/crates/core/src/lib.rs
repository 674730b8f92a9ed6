//! Buffer-based Siamese single-object tracking.
pub mod backbone;
pub mod bbox;
pub mod buffer;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use bbox::{iou, BBox};
pub use error::{Error, Result};
