//! Evaluation: per-pair multi-class confusion, macro F1 and the adjacent
//! predicate-set consistency score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::scene::{predicate_set, SceneGraph};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth pair count for this class.
    pub support: usize,
    /// Predicted pair count for this class.
    pub predicted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    /// Unweighted mean of per-class F1 over the included class set:
    /// classes with any support or any prediction, none excluded unless
    /// `include_none`.
    pub macro_f1: f64,
    pub consistency: Option<f64>,
    pub config: String,
}

/// Per ordered pair per timepoint, the predicted class vs the GT class
/// (none for absent relations) accumulate a multi-class confusion matrix.
/// Per-class F1 uses the 0/0 := 0 convention.
pub fn macro_f1(
    preds: &[SceneGraph],
    gts: &[SceneGraph],
    vocab: &Vocabulary,
    include_none: bool,
) -> Result<EvalReport, DataError> {
    if preds.len() != gts.len() {
        return Err(DataError::Eval(format!(
            "misaligned sequences: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let c = vocab.n_predicates();
    let none = vocab.none_index();
    // confusion[gt][pred]
    let mut confusion = vec![vec![0usize; c]; c];
    for (t, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if pred.entity_classes() != gt.entity_classes() {
            return Err(DataError::Eval(format!(
                "t={t}: predicted and ground-truth entity sets differ"
            )));
        }
        for (a, b) in gt.ordered_pairs() {
            let gt_class = gt.predicate_of(a, b).unwrap_or(none);
            let pred_class = pred.predicate_of(a, b).unwrap_or(none);
            confusion[gt_class][pred_class] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(c);
    let mut macro_sum = 0.0;
    let mut macro_count = 0usize;
    for k in 0..c {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..c).map(|g| confusion[g][k]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let included = (support + predicted > 0) && (include_none || k != none);
        if included {
            macro_sum += f1;
            macro_count += 1;
        }
        per_class.push(ClassScore {
            class: vocab.predicate_classes[k].clone(),
            precision,
            recall,
            f1,
            support,
            predicted,
        });
    }
    Ok(EvalReport {
        per_class,
        macro_f1: if macro_count > 0 {
            macro_sum / macro_count as f64
        } else {
            0.0
        },
        consistency: None,
        config: format!("include_none={include_none}"),
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean over adjacent timepoints of the IoU between their predicate sets.
/// Both sets empty counts as IoU 1 for that pair. `exclude` lists further
/// predicate indices dropped from the sets (none is always dropped).
pub fn consistency(
    graphs: &[SceneGraph],
    vocab: &Vocabulary,
    exclude: &[usize],
) -> Result<f64, DataError> {
    if graphs.len() < 2 {
        return Err(DataError::Eval(format!(
            "consistency needs at least 2 timepoints, got {}",
            graphs.len()
        )));
    }
    let sets: Vec<BTreeSet<usize>> = graphs
        .iter()
        .map(|g| {
            let mut s = predicate_set(g, vocab);
            for e in exclude {
                s.remove(e);
            }
            s
        })
        .collect();
    let mut total = 0.0;
    for pair in sets.windows(2) {
        total += iou(&pair[0], &pair[1]);
    }
    Ok(total / (sets.len() - 1) as f64)
}

fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}
