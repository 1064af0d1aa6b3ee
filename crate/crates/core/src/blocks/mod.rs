//! MaxViT-style building blocks and the four-stage hierarchical backbone.

mod attention;
mod backbone;
mod config;
mod mbconv;

pub use attention::{partition, unpartition, window_attention, AttentionUnit, Ffn, MultiHeadAttention, Partition};
pub use backbone::{Backbone, FeaturePyramid, MaxVitBlock, Stem};
pub use config::BackboneConfig;
pub use mbconv::{MbConv, SqueezeExcite};
