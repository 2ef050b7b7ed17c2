//! Entry points shared by the fuzz targets and the corpus replay test.
//!
//! Each function feeds arbitrary bytes to one parser or decoder. Rejecting
//! the input is fine; panicking, or accepting it and then failing to
//! round-trip, is a bug.

use crate::checkpoint::Checkpoint;
use crate::grad::GradCheckPlan;
use crate::necks::FusionGraph;
use crate::profiler::{ComponentMask, ModelSpec};
use crate::tensor::Tensor4;
use crate::trainer::ExperimentConfig;

pub fn tensor_decode(data: &[u8]) {
    if let Ok(t) = Tensor4::from_bytes(data) {
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 20 + 4 * t.len());
        let again = Tensor4::from_bytes(&bytes).expect("re-encoded tensor decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
}

pub fn checkpoint_decode(data: &[u8]) {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
        assert_eq!(again.names().collect::<Vec<_>>(), c.names().collect::<Vec<_>>());
    }
}

pub fn model_spec_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ModelSpec::parse(text) {
        let canon = spec.to_text();
        let again = ModelSpec::parse(&canon).expect("canonical spec parses");
        assert_eq!(again.to_text(), canon);
        assert_eq!(again.layers, spec.layers);
    }
    let _ = text.parse::<ComponentMask>();
}

pub fn fusion_graph_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = FusionGraph::from_text(text) {
        g.validate().expect("parsed graphs are valid");
        let canon = g.to_text();
        let again = FusionGraph::from_text(&canon).expect("canonical graph parses");
        assert_eq!(again.to_text(), canon);
        assert_eq!(again.topological_order().expect("acyclic").len(), g.nodes.len());
    }
}

pub fn config_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_text(text) {
        let again = ExperimentConfig::from_text(&cfg.to_text()).expect("canonical config parses");
        assert_eq!(again.to_text(), cfg.to_text());
        let _ = cfg.validate();
    }
    if let Ok(plan) = GradCheckPlan::from_text(text) {
        assert!(plan.validate().is_ok());
    }
}

/// Target name to entry point, for replaying corpora.
pub const TARGETS: [(&str, fn(&[u8])); 5] = [
    ("tensor_decode", tensor_decode),
    ("checkpoint_decode", checkpoint_decode),
    ("model_spec_parse", model_spec_parse),
    ("fusion_graph_parse", fusion_graph_parse),
    ("config_parse", config_parse),
];
