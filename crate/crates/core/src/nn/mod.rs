//! Parameter storage, forward context and the standard composite blocks
//! (CBS, ELAN, MPCM).

mod blocks;
mod ctx;
mod params;

pub use blocks::{CbsParams, ElanParams, MpcmParams};
pub use ctx::{apply_bn_updates, Ctx};
pub use params::{Param, ParamKind, ParamStore};
