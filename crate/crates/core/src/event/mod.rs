//! Event ingestion, frame stacking and tokenization.

pub mod frames;
pub mod stream;
pub mod tokens;

pub use frames::{stack_events, FrameTensor, Modality};
pub use stream::{parse_event_stream, EventPoint, EventStream, Polarity};
pub use tokens::{
    patchify_embed, reduce_dynamic, reduce_static, ActivityMask, DynamicFeatures, PatchEmbed,
    StaticFeatures, TemporalPlan, TokenSet,
};
