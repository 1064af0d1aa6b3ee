//! Attention-gated cascaded decoder, per-stage prediction heads and
//! prediction-map aggregation.

mod aggregate;
mod cascade;
mod gates;

pub use aggregate::{combine_predictions, weighted_sum, Aggregation, Aggregator, HeadWeights, PredictionSet};
pub use cascade::{CascadeDecoder, DecodeOutput, Decoder, PlainDecoder, SkipSet, UpConv};
pub use gates::{AttentionGate, Cam, ConvNormAct};
