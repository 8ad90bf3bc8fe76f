//! Scene graphs: typed entities plus directed predicate-labeled relations
//! for a single timepoint.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::DataError;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entity {
    pub id: u32,
    pub class: usize,
}

/// Directed relation `sub --pred--> obj`, all fields are indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub sub: u32,
    pub pred: usize,
    pub obj: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn new(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<Self, DataError> {
        let g = SceneGraph {
            entities,
            relations,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn empty() -> Self {
        SceneGraph {
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            if !ids.insert(e.id) {
                return Err(DataError::Graph(format!("duplicate entity id {}", e.id)));
            }
        }
        let mut pairs = BTreeSet::new();
        for r in &self.relations {
            if r.sub == r.obj {
                return Err(DataError::Graph(format!("self-loop on entity {}", r.sub)));
            }
            if !ids.contains(&r.sub) || !ids.contains(&r.obj) {
                return Err(DataError::Graph(format!(
                    "relation ({}, {}, {}) references unknown entity",
                    r.sub, r.pred, r.obj
                )));
            }
            // at most one predicate per ordered pair subsumes the
            // no-duplicate-triple rule
            if !pairs.insert((r.sub, r.obj)) {
                return Err(DataError::Graph(format!(
                    "multiple predicates on ordered pair ({}, {})",
                    r.sub, r.obj
                )));
            }
        }
        Ok(())
    }

    /// Predicate lookup for an ordered entity pair.
    pub fn predicate_of(&self, sub: u32, obj: u32) -> Option<usize> {
        self.relations
            .iter()
            .find(|r| r.sub == sub && r.obj == obj)
            .map(|r| r.pred)
    }

    /// All ordered pairs of distinct entity ids, sorted.
    pub fn ordered_pairs(&self) -> Vec<(u32, u32)> {
        let mut ids: Vec<u32> = self.entities.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        let mut pairs = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1));
        for &a in &ids {
            for &b in &ids {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    pub fn entity_classes(&self) -> BTreeMap<u32, usize> {
        self.entities.iter().map(|e| (e.id, e.class)).collect()
    }
}

/// Deduplicated predicate indices present in `graph`, excluding the none
/// predicate.
pub fn predicate_set(graph: &SceneGraph, vocab: &Vocabulary) -> BTreeSet<usize> {
    let none = vocab.none_index();
    graph
        .relations
        .iter()
        .map(|r| r.pred)
        .filter(|&p| p != none)
        .collect()
}

/// The predicate on the ordered head_surgeon -> patient pair, if any.
///
/// `None` is the distinguished "no main action" value: entity missing, no
/// edge between the two, or the edge labeled with the none predicate.
pub fn main_action(graph: &SceneGraph, vocab: &Vocabulary) -> Result<Option<usize>, DataError> {
    let hs_class = vocab.head_surgeon_index();
    let pat_class = vocab.patient_index();
    let hs: Vec<u32> = graph
        .entities
        .iter()
        .filter(|e| e.class == hs_class)
        .map(|e| e.id)
        .collect();
    if hs.len() > 1 {
        return Err(DataError::Graph("ambiguous head surgeon".into()));
    }
    let pat: Vec<u32> = graph
        .entities
        .iter()
        .filter(|e| e.class == pat_class)
        .map(|e| e.id)
        .collect();
    if pat.len() > 1 {
        return Err(DataError::Graph("ambiguous patient".into()));
    }
    let (Some(&hs), Some(&pat)) = (hs.first(), pat.first()) else {
        return Ok(None);
    };
    Ok(graph
        .predicate_of(hs, pat)
        .filter(|&p| p != vocab.none_index()))
}
