//! Recordings: ordered timepoint sequences with ground-truth graphs and
//! per-entity-pair visual feature vectors, plus the line-delimited file
//! format they live in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::scene::{Entity, Relation, SceneGraph};
use crate::vocab::Vocabulary;

pub type PairFeatures = BTreeMap<(u32, u32), Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Timepoint {
    pub t: usize,
    pub graph: SceneGraph,
    /// Visual feature vector per ordered entity pair; absent for
    /// prediction-only files.
    pub pair_features: Option<PairFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub take_id: String,
    pub timepoints: Vec<Timepoint>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.timepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timepoints.is_empty()
    }

    /// Feature dimension D_v, if any timepoint carries features.
    pub fn feature_dim(&self) -> Option<usize> {
        self.timepoints
            .iter()
            .filter_map(|tp| tp.pair_features.as_ref())
            .flat_map(|pf| pf.values())
            .map(|v| v.len())
            .next()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut dim: Option<usize> = None;
        for (i, tp) in self.timepoints.iter().enumerate() {
            if tp.t != i {
                return Err(DataError::Recording(format!(
                    "non-consecutive timepoints: expected t={i}, got t={}",
                    tp.t
                )));
            }
            tp.graph.validate()?;
            if let Some(pf) = &tp.pair_features {
                let pairs = tp.graph.ordered_pairs();
                if pf.len() != pairs.len() || pairs.iter().any(|p| !pf.contains_key(p)) {
                    return Err(DataError::Recording(format!(
                        "t={}: pair_features keys must cover exactly all ordered entity pairs",
                        tp.t
                    )));
                }
                for v in pf.values() {
                    match dim {
                        None => dim = Some(v.len()),
                        Some(d) if d != v.len() => {
                            return Err(DataError::Recording(format!(
                                "t={}: feature dimension {} != {}",
                                tp.t,
                                v.len(),
                                d
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File format: one timepoint per line, flat JSON object.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EntityLine {
    id: u32,
    class: String,
}

#[derive(Serialize, Deserialize)]
struct RelationLine {
    sub: u32,
    pred: String,
    obj: u32,
}

#[derive(Serialize, Deserialize)]
struct TimepointLine {
    take_id: String,
    t: usize,
    entities: Vec<EntityLine>,
    relations: Vec<RelationLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_features: Option<BTreeMap<String, Vec<f64>>>,
}

fn parse_line(
    line: &str,
    line_num: usize,
    vocab: &Vocabulary,
) -> Result<(String, Timepoint), DataError> {
    let parsed: TimepointLine = serde_json::from_str(line).map_err(|e| DataError::Parse {
        line: line_num,
        msg: e.to_string(),
    })?;
    let wrap = |e: DataError| DataError::Parse {
        line: line_num,
        msg: e.to_string(),
    };
    let entities = parsed
        .entities
        .iter()
        .map(|e| {
            Ok(Entity {
                id: e.id,
                class: vocab.entity_index(&e.class)?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()
        .map_err(wrap)?;
    let relations = parsed
        .relations
        .iter()
        .map(|r| {
            Ok(Relation {
                sub: r.sub,
                pred: vocab.predicate_index(&r.pred)?,
                obj: r.obj,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()
        .map_err(wrap)?;
    let graph = SceneGraph::new(entities, relations).map_err(wrap)?;
    let pair_features = match parsed.pair_features {
        None => None,
        Some(map) => {
            let mut pf = PairFeatures::new();
            for (key, value) in map {
                let pair = parse_pair_key(&key).ok_or_else(|| DataError::Parse {
                    line: line_num,
                    msg: format!("malformed pair key '{key}'"),
                })?;
                pf.insert(pair, value);
            }
            Some(pf)
        }
    };
    Ok((
        parsed.take_id,
        Timepoint {
            t: parsed.t,
            graph,
            pair_features,
        },
    ))
}

pub fn parse_recording(text: &str, vocab: &Vocabulary) -> Result<Recording, DataError> {
    let mut recordings = parse_recordings(text, vocab)?;
    match recordings.len() {
        1 => Ok(recordings.pop().unwrap()),
        n => Err(DataError::Recording(format!(
            "expected a single take, file contains {n}"
        ))),
    }
}

/// Parses a file holding one or more takes; each take's lines must be
/// contiguous and a take_id may not reappear after a different one.
pub fn parse_recordings(text: &str, vocab: &Vocabulary) -> Result<Vec<Recording>, DataError> {
    let mut recordings: Vec<Recording> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (take_id, tp) = parse_line(line, line_num, vocab)?;
        match recordings.last_mut() {
            Some(last) if last.take_id == take_id => last.timepoints.push(tp),
            _ => {
                if seen.contains(&take_id) {
                    return Err(DataError::Parse {
                        line: line_num,
                        msg: format!("take_id '{take_id}' reappears after another take"),
                    });
                }
                seen.push(take_id.clone());
                recordings.push(Recording {
                    take_id,
                    timepoints: vec![tp],
                });
            }
        }
    }
    if recordings.is_empty() {
        return Err(DataError::Recording("empty recording file".into()));
    }
    for r in &recordings {
        r.validate()?;
    }
    Ok(recordings)
}

fn parse_pair_key(key: &str) -> Option<(u32, u32)> {
    let (a, b) = key.split_once('-')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

pub fn serialize_recording(recording: &Recording, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for tp in &recording.timepoints {
        let line = TimepointLine {
            take_id: recording.take_id.clone(),
            t: tp.t,
            entities: tp
                .graph
                .entities
                .iter()
                .map(|e| EntityLine {
                    id: e.id,
                    class: vocab.entity_classes[e.class].clone(),
                })
                .collect(),
            relations: tp
                .graph
                .relations
                .iter()
                .map(|r| RelationLine {
                    sub: r.sub,
                    pred: vocab.predicate_classes[r.pred].clone(),
                    obj: r.obj,
                })
                .collect(),
            pair_features: tp.pair_features.as_ref().map(|pf| {
                pf.iter()
                    .map(|((a, b), v)| (format!("{a}-{b}"), v.clone()))
                    .collect()
            }),
        };
        out.push_str(&serde_json::to_string(&line).expect("timepoint serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default_or()
    }

    #[test]
    fn minimal_one_line_file() {
        let text = r#"{"take_id":"take1","t":0,"entities":[{"id":0,"class":"patient"}],"relations":[]}"#;
        let r = parse_recording(text, &vocab()).unwrap();
        assert_eq!(r.take_id, "take1");
        assert_eq!(r.len(), 1);
        assert!(r.timepoints[0].graph.relations.is_empty());
    }

    #[test]
    fn non_consecutive_timepoints_rejected() {
        let text = concat!(
            r#"{"take_id":"x","t":0,"entities":[],"relations":[]}"#,
            "\n",
            r#"{"take_id":"x","t":2,"entities":[],"relations":[]}"#,
        );
        let err = parse_recording(text, &vocab()).unwrap_err();
        assert!(err.to_string().contains("non-consecutive"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"take_id":"x","t":0,"entities":[],"relations":[]}"#,
            "\nnot json\n",
        );
        match parse_recording(text, &vocab()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_name_rejected() {
        let text = r#"{"take_id":"x","t":0,"entities":[{"id":0,"class":"robot"}],"relations":[]}"#;
        let err = parse_recording(text, &vocab()).unwrap_err();
        assert!(err.to_string().contains("unknown entity class"));
    }

    #[test]
    fn pair_features_must_cover_all_pairs() {
        let text = r#"{"take_id":"x","t":0,"entities":[{"id":0,"class":"patient"},{"id":1,"class":"drill"}],"relations":[],"pair_features":{"0-1":[1.0]}}"#;
        let err = parse_recording(text, &vocab()).unwrap_err();
        assert!(err.to_string().contains("cover exactly"));
    }

    #[test]
    fn roundtrip_bytes() {
        let text = concat!(
            r#"{"take_id":"x","t":0,"entities":[{"id":0,"class":"head_surgeon"},{"id":1,"class":"patient"}],"relations":[{"sub":0,"pred":"drilling","obj":1}],"pair_features":{"0-1":[0.5,-1.25],"1-0":[0.0,2.0]}}"#,
            "\n",
        );
        let v = vocab();
        let r = parse_recording(text, &v).unwrap();
        let out = serialize_recording(&r, &v);
        let r2 = parse_recording(&out, &v).unwrap();
        assert_eq!(r, r2);
        // serialization is a fixed point
        assert_eq!(out, serialize_recording(&r2, &v));
    }
}
