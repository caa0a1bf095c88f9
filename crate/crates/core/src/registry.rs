//! Named strategy registries.
//!
//! Each interchangeable algorithm family has a trait; implementations are
//! registered under a stable name and looked up at runtime (from the CLI
//! or a config file). The built-in sets are:
//!
//! | family                         | names                              |
//! |--------------------------------|------------------------------------|
//! | [`FormationLearner`]           | `soft-em`, `hard-em`               |
//! | [`AlignmentCost`]              | `bhattacharyya`, `mahalanobis`     |
//! | [`Initializer`]                | `player-means`, `random`           |

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::alignment::{AlignmentCost, BhattacharyyaCost, MahalanobisCost};
use crate::baseline::HardEmLearner;
use crate::discovery::{FormationLearner, Initializer, PlayerMeansInit, RandomPointsInit, SoftEmLearner};
use crate::{Error, Result};

/// Anything that can be stored in a [`Registry`].
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under its own name, replacing any previous entry.
    pub fn register(&mut self, item: Arc<T>) -> &mut Self {
        self.entries.insert(item.name(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
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
}

pub fn learners() -> Registry<dyn FormationLearner> {
    let mut r: Registry<dyn FormationLearner> = Registry::new("formation learner");
    r.register(Arc::new(SoftEmLearner)).register(Arc::new(HardEmLearner));
    r
}

pub fn alignment_costs() -> Registry<dyn AlignmentCost> {
    let mut r: Registry<dyn AlignmentCost> = Registry::new("alignment cost");
    r.register(Arc::new(BhattacharyyaCost)).register(Arc::new(MahalanobisCost));
    r
}

pub fn initializers() -> Registry<dyn Initializer> {
    let mut r: Registry<dyn Initializer> = Registry::new("initializer");
    r.register(Arc::new(PlayerMeansInit)).register(Arc::new(RandomPointsInit));
    r
}
