use std::collections::BTreeMap;

use super::{DrNet, HourglassLight, LayerGraph, ModelConfig};
use crate::error::{Error, Result};

pub const DEFAULT_BACKBONE: &str = "drnet";

/// A backbone architecture that can be instantiated from a [`ModelConfig`].
pub trait Backbone: Send + Sync {
    fn name(&self) -> &'static str;

    fn summary(&self) -> &'static str;

    /// Builds the graph with zero-initialized weights.
    fn build(&self, cfg: &ModelConfig) -> Result<LayerGraph>;
}

/// Backbones selectable by name at runtime.
pub struct BackboneRegistry {
    entries: BTreeMap<&'static str, Box<dyn Backbone>>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(DrNet));
        r.register(Box::new(HourglassLight));
        r
    }

    /// Replaces any backbone already registered under the same name.
    pub fn register(&mut self, backbone: Box<dyn Backbone>) {
        self.entries.insert(backbone.name(), backbone);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Backbone> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "backbone",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn build(&self, name: &str, cfg: &ModelConfig) -> Result<LayerGraph> {
        self.get(name)?.build(cfg)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Backbone> {
        self.entries.values().map(|b| b.as_ref())
    }
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
