//! Building blocks for a dynamic, translation-variant vehicle detector:
//! a small reverse-mode tensor engine, the detector's blocks, training,
//! synthetic data and detection metrics.

pub mod autograd;
pub mod bbox;
pub mod data;
pub mod dcl;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod mab;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod tvconv;

pub use autograd::{Gradients, Graph, Var};
pub use bbox::{iou, BBox, Detection, GtBox};
pub use error::{Error, Result};
pub use model::{DtNetModel, ModelConfig, Variant};
pub use nn::{Ctx, ParamStore};
pub use ops::{Activation, Conv2dSpec, Mode};
pub use tensor::{Scalar, Tensor};
