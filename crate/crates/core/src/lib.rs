//! Event camera plus RGB classification through hypergraph completion.
//!
//! Event streams become dynamic nodes that may miss observations at some
//! steps; RGB frames become always-present static nodes. Missing dynamic
//! values are completed by attention-weighted message passing, first among
//! dynamic nodes, then across modalities over a hypergraph built from
//! learned affinities. A small Transformer fuses the result over time.

pub mod autodiff;
pub mod error;
pub mod event;
pub mod harness;
pub mod hypergraph;
pub mod model;
pub mod propagation;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use event::{
    parse_event_stream, stack_events, ActivityMask, EventPoint, EventStream, FrameTensor, Modality, Polarity,
};
pub use hypergraph::{build_dynamic_graph, build_hyperedges, AffinityTensor, DynamicGraph, Hypergraph};
pub use model::{ModelParams, ModelSpec};
pub use tensor::Mat;
pub use training::{Ablation, DataGeometry, Task, TrainConfig};
