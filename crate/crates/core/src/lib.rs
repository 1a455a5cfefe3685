//! Joint RIS phase-shift compression and WMMSE beamforming.
//!
//! The access point compresses RIS phase information into a short binary
//! control message, the RIS controller decodes it, and the beamformer is
//! recomputed on the effective channel seen through the phases the RIS
//! actually applies. The whole chain is trained end to end.

pub mod aqe;
pub mod autodiff;
pub mod container;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod sysmodel;
pub mod train_eval;
pub mod updater;
pub mod wmmse;

pub use error::{Error, Result};
