use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::task::Task;

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Shared,
    Task(Task),
    Weighting,
}

impl Partition {
    pub fn code(self) -> u8 {
        match self {
            Partition::Shared => 0,
            Partition::Task(Task::Seg) => 1,
            Partition::Task(Task::Det) => 2,
            Partition::Weighting => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Partition::Shared,
            1 => Partition::Task(Task::Seg),
            2 => Partition::Task(Task::Det),
            3 => Partition::Weighting,
            _ => return None,
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Shared => f.write_str("shared"),
            Partition::Task(t) => write!(f, "task:{t}"),
            Partition::Weighting => f.write_str("weighting"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub partition: Partition,
    pub tensor: Tensor,
}

/// Named, partition-tagged parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            partition,
            tensor,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|e| &e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.partition == partition)
            .map(|e| e.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.clear_grad());
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Filter over parameters used by the optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selector {
    partitions: BTreeSet<Partition>,
    skip: BTreeSet<String>,
}

impl Selector {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::none()
            .with(Partition::Shared)
            .with(Partition::Task(Task::Seg))
            .with(Partition::Task(Task::Det))
            .with(Partition::Weighting)
    }

    pub fn only(partition: Partition) -> Self {
        Self::none().with(partition)
    }

    pub fn with(mut self, partition: Partition) -> Self {
        self.partitions.insert(partition);
        self
    }

    /// Excludes a single parameter even if its partition is selected.
    pub fn skipping(mut self, name: impl Into<String>) -> Self {
        self.skip.insert(name.into());
        self
    }

    pub fn selects(&self, entry: &ParamEntry) -> bool {
        self.partitions.contains(&entry.partition) && !self.skip.contains(&entry.name)
    }
}
