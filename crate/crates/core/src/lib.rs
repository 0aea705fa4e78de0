//! Synthesis of three-directional myocardial velocity-mapping studies:
//! temporal interpolation of magnitude frames and masks, phase synthesis
//! from magnitudes, and global velocity assessment, validated on a
//! procedural beating-ring phantom.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod phase_synth;
pub mod pipeline;
pub mod seed;
pub mod svg;
pub mod temporal_interp;
pub mod toy_experiment;
pub mod tensor_file;
pub mod velocity;

pub use error::{MvmError, Result};
