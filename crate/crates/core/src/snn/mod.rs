//! Spiking network construction and clock-driven simulation.

mod dataset;
pub mod fixed;
mod network;
mod simulate;

pub use dataset::{
    classify, map_dataset, run_dataset, run_samples, AggregateResult, Classification, SampleSummary,
};
pub use network::{
    convert, ConversionOptions, NetworkSpec, PoolLayer, SpikingLayer, SpikingNetwork, Stage, StageKind,
};
pub use simulate::{
    encode_input, simulate, simulate_spikes, write_trace_csv, LayerRun, RunResult, TraceLevel, TraceRow,
};
