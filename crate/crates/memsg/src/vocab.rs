//! Entity and predicate vocabularies.
//!
//! Class indices are list positions and stay stable across serialization,
//! so every other module works with `usize` indices and only touches names
//! at the file boundary.

use serde::{Deserialize, Serialize};

use crate::error::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entity_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
    /// Reserved predicate name meaning "no relation".
    pub none: String,
    pub head_surgeon: String,
    pub patient: String,
}

impl Vocabulary {
    /// Validates the vocabulary invariants and returns it.
    pub fn validated(self) -> Result<Self, DataError> {
        for (kind, list) in [
            ("entity_classes", &self.entity_classes),
            ("predicate_classes", &self.predicate_classes),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for name in list {
                if !seen.insert(name) {
                    return Err(DataError::Vocab(format!(
                        "duplicate name '{name}' in {kind}"
                    )));
                }
            }
        }
        for (field, name, list) in [
            ("none", &self.none, &self.predicate_classes),
            ("head_surgeon", &self.head_surgeon, &self.entity_classes),
            ("patient", &self.patient, &self.entity_classes),
        ] {
            if !list.contains(name) {
                return Err(DataError::Vocab(format!(
                    "{field} '{name}' is not a member of its class list"
                )));
            }
        }
        Ok(self)
    }

    pub fn entity_index(&self, name: &str) -> Result<usize, DataError> {
        self.entity_classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::Vocab(format!("unknown entity class '{name}'")))
    }

    pub fn predicate_index(&self, name: &str) -> Result<usize, DataError> {
        self.predicate_classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::Vocab(format!("unknown predicate class '{name}'")))
    }

    pub fn none_index(&self) -> usize {
        self.predicate_classes
            .iter()
            .position(|c| *c == self.none)
            .expect("validated vocabulary")
    }

    pub fn head_surgeon_index(&self) -> usize {
        self.entity_classes
            .iter()
            .position(|c| *c == self.head_surgeon)
            .expect("validated vocabulary")
    }

    pub fn patient_index(&self) -> usize {
        self.entity_classes
            .iter()
            .position(|c| *c == self.patient)
            .expect("validated vocabulary")
    }

    pub fn n_entities(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.predicate_classes.len()
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let v: Vocabulary =
            serde_json::from_str(text).map_err(|e| DataError::Vocab(e.to_string()))?;
        v.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    /// Example operating-room vocabulary used by the synthetic scenario
    /// and the CLI defaults.
    pub fn default_or() -> Self {
        Vocabulary {
            entity_classes: [
                "head_surgeon",
                "assistant",
                "anaesthetist",
                "patient",
                "operating_table",
                "instrument_table",
                "drill",
                "saw",
                "hammer",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            predicate_classes: [
                "assisting",
                "drilling",
                "cleaning",
                "sawing",
                "hammering",
                "suturing",
                "touching",
                "cementing",
                "lyingOn",
                "closeTo",
                "holding",
                "none",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            none: "none".into(),
            head_surgeon: "head_surgeon".into(),
            patient: "patient".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_is_valid() {
        let v = Vocabulary::default_or().validated().unwrap();
        assert_eq!(v.none_index(), 11);
        assert_eq!(v.head_surgeon_index(), 0);
        assert_eq!(v.patient_index(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut v = Vocabulary::default_or();
        v.entity_classes.push("drill".into());
        assert!(v.validated().is_err());
    }

    #[test]
    fn none_must_be_a_predicate() {
        let mut v = Vocabulary::default_or();
        v.none = "nothing".into();
        assert!(v.validated().is_err());
    }

    #[test]
    fn indices_stable_across_roundtrip() {
        let v = Vocabulary::default_or();
        let v2 = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, v2);
    }
}
