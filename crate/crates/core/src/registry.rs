//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable piece of the pipeline (pseudo-label normalization,
//! projector activation, weight decay, AUC averaging, heatmap scoring,
//! synthetic cluster layout) is a trait object registered under a stable
//! name. Configs and checkpoints carry the name; the registry resolves it
//! back to a shared instance at runtime.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Anything that can live in a [`Registry`].
pub trait Named: Send + Sync {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: Vec<Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers a strategy. Panics on a duplicate name, which is a
    /// programming error in the static registry tables.
    pub fn register(&mut self, entry: Arc<T>) -> &mut Self {
        assert!(
            self.entries.iter().all(|e| e.name() != entry.name()),
            "duplicate {} strategy {:?}",
            self.kind,
            entry.name()
        );
        self.entries.push(entry);
        self
    }

    pub fn with(mut self, entry: Arc<T>) -> Self {
        self.register(entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

impl<T: ?Sized + Named> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("entries", &self.names())
            .finish()
    }
}

/// Implements `Debug` and `PartialEq` for a strategy trait object by name.
macro_rules! named_trait_object {
    ($tr:path) => {
        impl ::std::fmt::Debug for dyn $tr {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str($crate::registry::Named::name(self))
            }
        }

        impl PartialEq for dyn $tr {
            fn eq(&self, other: &Self) -> bool {
                $crate::registry::Named::name(self) == $crate::registry::Named::name(other)
            }
        }
    };
}
pub(crate) use named_trait_object;
