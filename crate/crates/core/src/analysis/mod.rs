//! FLOP accounting and gradient/attention introspection.

pub mod attnmap;
pub mod flops;
pub mod gradmap;

pub use attnmap::{attention_maps, export_attention_maps, read_attention_csv, AttentionMaps, AttentionRecord};
pub use flops::{
    analytic_cross_attn, analytic_self_attn, closed_form_macs, flop_report, llm_internal, measured_flops, FlopDims,
    FlopReport,
};
pub use gradmap::{export_gradient_map, gradient_map, read_gradient_csv, GradientMap, LayerGrid};
