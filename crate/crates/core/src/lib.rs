//! Conversion of feed-forward ANNs into time-to-first-spike networks.
//!
//! Every unit fires exactly once per sample. A layer spends `T_max` steps
//! integrating weighted input spikes and `T_max` steps turning the membrane
//! potential back into a spike time, helped by a readout (counter) spike
//! that leaves a unit current, and a rectifier that forces silent units to
//! fire at `2 T_max`.

pub mod codec;
pub mod data;
pub mod error;
pub mod hwcost;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod oracle;
pub mod snn;
pub mod tensor;
pub mod train;

pub use error::{QuartzError, Result};
pub use model::{AnnModel, Layer, LayerKind};
pub use snn::{convert, simulate, ConversionOptions, RunResult, SpikingNetwork, TraceLevel};
pub use tensor::Tensor;
