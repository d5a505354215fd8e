use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Disjoint class groups, learned in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    groups: Vec<Vec<u32>>,
    g: usize,
}

impl Schedule {
    pub fn groups(&self) -> &[Vec<u32>] {
        &self.groups
    }

    pub fn group_size(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Consecutive chunks of `g` ids in ascending order; the last chunk holds
/// the remainder.
pub fn build_schedule(class_ids: &[u32], g: usize) -> Result<Schedule, ProtocolError> {
    if g == 0 {
        return Err(ProtocolError::Schedule("group size g must be at least 1".into()));
    }
    if class_ids.is_empty() {
        return Err(ProtocolError::Schedule("no classes to schedule".into()));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(ProtocolError::Schedule(format!("class {} listed twice", w[0])));
    }
    Ok(Schedule {
        groups: ids.chunks(g).map(<[u32]>::to_vec).collect(),
        g,
    })
}

/// Dataset class ids in the order they were learned; position is the
/// model's class index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    ids: Vec<u32>,
}

impl ClassMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&c| c == id)
    }

    pub fn id_of(&self, index: usize) -> Option<u32> {
        self.ids.get(index).copied()
    }

    /// Appends ids not already present.
    pub fn extend(&mut self, ids: &[u32]) {
        for &id in ids {
            if self.index_of(id).is_none() {
                self.ids.push(id);
            }
        }
    }
}
