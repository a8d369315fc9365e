//! Detector assembly, head decoding and persistence.

mod checkpoint;
mod config;
mod decode;
mod dtnet;

pub use checkpoint::{decode_tensors, encode_tensors, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{ModelConfig, Variant};
pub use decode::{decode_box, decode_detections, encode_box, nms, FIELD_CLS, FIELD_OBJ};
pub use dtnet::{DtNetModel, Stages, HEAD_PREFIX, OBJ_BIAS_INIT};
