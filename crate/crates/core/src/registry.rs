//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable family in the engine (secondary activations, losses,
//! optimizers, learning-signal generators) exposes one `Registry` whose
//! entries are factories producing boxed trait objects. Configs and the CLI
//! select entries by name at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub struct Registry<F: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Box<F>>,
}

impl<F: ?Sized> Registry<F> {
    pub fn new(family: &'static str) -> Self {
        Self { family, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, entry: Box<F>) -> &mut Self {
        self.entries.insert(name, entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::UnknownStrategy {
            family: self.family,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}
