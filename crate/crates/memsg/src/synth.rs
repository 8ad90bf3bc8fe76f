//! Synthetic operating-room benchmark generator.
//!
//! Each take walks through a fixed phase sequence (preparation, incision,
//! drilling, sawing, hammering, cementing, irrigation, suturing, closing).
//! Pair features are noisy class prototypes; confusable predicate pairs
//! share a prototype, so telling them apart requires temporal context
//! rather than the feature alone.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::params::gaussian;
use crate::recording::{serialize_recording, PairFeatures, Recording, Timepoint};
use crate::scene::{Entity, Relation, SceneGraph};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    /// Predicate of the head-surgeon -> patient relation during the phase.
    pub main_predicate: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Entity class of a hand tool present (and held) during the phase.
    pub tool: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub phases: Vec<PhaseSpec>,
    pub d_v: usize,
    /// Per-coordinate sigma of the gaussian noise added to prototypes.
    pub feature_noise_sigma: f64,
    /// Seed for the prototype table, shared across all takes and splits.
    pub prototype_seed: u64,
    /// Per-step flip probability of the on/off side relations.
    pub churn_prob: f64,
    /// Predicate pairs forced onto nearly identical prototypes.
    pub confusable: Vec<(String, String)>,
    /// Distance between the prototypes of a confusable pair; small against
    /// the noise, so the feature is a weak tie-breaker rather than a label.
    pub confusable_separation: f64,
}

fn phase(name: &str, pred: &str, min_len: usize, max_len: usize, tool: Option<&str>) -> PhaseSpec {
    PhaseSpec {
        name: name.to_string(),
        main_predicate: pred.to_string(),
        min_len,
        max_len,
        tool: tool.map(|s| s.to_string()),
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            phases: vec![
                phase("preparation", "cleaning", 6, 18, None),
                phase("incision", "touching", 6, 12, None),
                phase("drilling", "drilling", 6, 16, Some("drill")),
                phase("sawing", "sawing", 6, 16, Some("saw")),
                phase("hammering", "hammering", 6, 16, Some("hammer")),
                phase("cementing", "cementing", 6, 12, None),
                phase("irrigation", "cleaning", 6, 22, None),
                phase("suturing", "suturing", 8, 22, None),
                phase("closing", "touching", 6, 12, None),
            ],
            d_v: 16,
            feature_noise_sigma: 1.4,
            prototype_seed: 77,
            churn_prob: 0.12,
            // visually ambiguous groups: the feature alone cannot separate
            // them, only temporal context (tool entities in past graphs,
            // distance to anchor phases) can
            confusable: vec![
                ("cleaning".into(), "suturing".into()),
                ("drilling".into(), "sawing".into()),
                ("drilling".into(), "hammering".into()),
            ],
            confusable_separation: 0.8,
        }
    }
}

/// One prototype per predicate class (including none), deterministic in
/// `prototype_seed`. Confusable pairs get identical prototypes.
pub fn prototypes(cfg: &ScenarioConfig, vocab: &Vocabulary) -> Result<Vec<Vec<f64>>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
    let mut protos: Vec<Vec<f64>> = (0..vocab.n_predicates())
        .map(|_| (0..cfg.d_v).map(|_| gaussian(&mut rng)).collect())
        .collect();
    for (a, b) in &cfg.confusable {
        let ia = vocab.predicate_index(a)?;
        let ib = vocab.predicate_index(b)?;
        let dir: Vec<f64> = (0..cfg.d_v).map(|_| gaussian(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        protos[ib] = protos[ia]
            .iter()
            .zip(&dir)
            .map(|(p, d)| p + cfg.confusable_separation * d / norm)
            .collect();
    }
    Ok(protos)
}

/// Phase lengths for one take; each phase keeps its full spec range so
/// every phase outlasts the default memory stride.
pub fn sample_phase_lengths(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    cfg.phases
        .iter()
        .map(|p| rng.gen_range(p.min_len..=p.max_len))
        .collect()
}

// fixed cast: ids are stable so relations stay comparable across time
const HS: u32 = 0;
const ASSISTANT: u32 = 1;
const ANAESTHETIST: u32 = 2;
const PATIENT: u32 = 3;
const TABLE: u32 = 4;
const TOOL: u32 = 5;

pub fn generate_recording(
    cfg: &ScenarioConfig,
    vocab: &Vocabulary,
    take_id: &str,
    seed: u64,
) -> Result<Recording, DataError> {
    let protos = prototypes(cfg, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = sample_phase_lengths(cfg, &mut rng);

    let assisting = vocab.predicate_index("assisting")?;
    let lying_on = vocab.predicate_index("lyingOn")?;
    let close_to = vocab.predicate_index("closeTo")?;
    let holding = vocab.predicate_index("holding")?;
    let none = vocab.none_index();

    let base_entities = vec![
        Entity { id: HS, class: vocab.head_surgeon_index() },
        Entity { id: ASSISTANT, class: vocab.entity_index("assistant")? },
        Entity { id: ANAESTHETIST, class: vocab.entity_index("anaesthetist")? },
        Entity { id: PATIENT, class: vocab.patient_index() },
        Entity { id: TABLE, class: vocab.entity_index("operating_table")? },
    ];

    // two independently churning side relations
    let mut anaesthetist_close = true;
    let mut assistant_close = false;

    let mut timepoints = Vec::new();
    let mut t = 0usize;
    for (phase, len) in cfg.phases.iter().zip(&lengths) {
        let main_pred = vocab.predicate_index(&phase.main_predicate)?;
        let tool_class = phase
            .tool
            .as_deref()
            .map(|name| vocab.entity_index(name))
            .transpose()?;
        for _ in 0..*len {
            if rng.gen::<f64>() < cfg.churn_prob {
                anaesthetist_close = !anaesthetist_close;
            }
            if rng.gen::<f64>() < cfg.churn_prob {
                assistant_close = !assistant_close;
            }

            let mut entities = base_entities.clone();
            let mut relations = vec![
                Relation { sub: HS, pred: main_pred, obj: PATIENT },
                Relation { sub: ASSISTANT, pred: assisting, obj: HS },
                Relation { sub: PATIENT, pred: lying_on, obj: TABLE },
            ];
            if anaesthetist_close {
                relations.push(Relation { sub: ANAESTHETIST, pred: close_to, obj: PATIENT });
            }
            if assistant_close {
                relations.push(Relation { sub: ASSISTANT, pred: close_to, obj: TABLE });
            }
            if let Some(class) = tool_class {
                entities.push(Entity { id: TOOL, class });
                relations.push(Relation { sub: HS, pred: holding, obj: TOOL });
            }
            let graph = SceneGraph { entities, relations };
            graph.validate()?;

            let mut pf = PairFeatures::new();
            for (a, b) in graph.ordered_pairs() {
                let pred = graph.predicate_of(a, b).unwrap_or(none);
                let feat: Vec<f64> = protos[pred]
                    .iter()
                    .map(|&p| p + cfg.feature_noise_sigma * gaussian(&mut rng))
                    .collect();
                pf.insert((a, b), feat);
            }
            timepoints.push(Timepoint {
                t,
                graph,
                pair_features: Some(pf),
            });
            t += 1;
        }
    }
    let rec = Recording {
        take_id: take_id.to_string(),
        timepoints,
    };
    rec.validate()?;
    Ok(rec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Deterministic per-take seeds, disjoint across splits.
pub fn split_seeds(spec: &BenchmarkSpec) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let base = spec.seed;
    let mk = |offset: u64, n: usize| (0..n as u64).map(|i| base + offset + i).collect();
    (
        mk(0, spec.n_train),
        mk(100_000, spec.n_val),
        mk(200_000, spec.n_test),
    )
}

pub fn generate_split(
    cfg: &ScenarioConfig,
    vocab: &Vocabulary,
    prefix: &str,
    seeds: &[u64],
) -> Result<Vec<Recording>, DataError> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_recording(cfg, vocab, &format!("{prefix}_{i:03}"), s))
        .collect()
}

/// Writes train/val/test JSONL files plus the vocabulary into `out_dir`.
/// Returns the written file paths.
pub fn generate_benchmark(
    cfg: &ScenarioConfig,
    vocab: &Vocabulary,
    spec: &BenchmarkSpec,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, DataError> {
    let (train_seeds, val_seeds, test_seeds) = split_seeds(spec);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, seeds) in [
        ("train", &train_seeds),
        ("val", &val_seeds),
        ("test", &test_seeds),
    ] {
        let recs = generate_split(cfg, vocab, name, seeds)?;
        let text: String = recs.iter().map(|r| serialize_recording(r, vocab)).collect();
        let path = out_dir.join(format!("{name}.jsonl"));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    let vocab_path = out_dir.join("vocab.json");
    std::fs::write(&vocab_path, vocab.to_json())?;
    written.push(vocab_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::consistency;
    use crate::scene::main_action;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let a = generate_recording(&cfg, &vocab, "t", 42).unwrap();
        let b = generate_recording(&cfg, &vocab, "t", 42).unwrap();
        assert_eq!(
            serialize_recording(&a, &vocab),
            serialize_recording(&b, &vocab)
        );
        let c = generate_recording(&cfg, &vocab, "t", 43).unwrap();
        assert_ne!(a.timepoints, c.timepoints);
    }

    #[test]
    fn phases_outlast_memory_stride() {
        let cfg = ScenarioConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lengths = sample_phase_lengths(&cfg, &mut rng);
            assert_eq!(lengths.len(), cfg.phases.len());
            for (l, p) in lengths.iter().zip(&cfg.phases) {
                assert!(*l >= p.min_len && *l <= p.max_len);
                assert!(*l > 5, "phase shorter than default memory stride");
            }
        }
    }

    #[test]
    fn recordings_are_valid_with_main_action_everywhere() {
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let rec = generate_recording(&cfg, &vocab, "t", 7).unwrap();
        let min: usize = cfg.phases.iter().map(|p| p.min_len).sum();
        let max: usize = cfg.phases.iter().map(|p| p.max_len).sum();
        assert!(rec.len() >= min && rec.len() <= max);
        for tp in &rec.timepoints {
            let action = main_action(&tp.graph, &vocab).unwrap();
            assert!(action.is_some(), "t={} lacks a main action", tp.t);
        }
    }

    #[test]
    fn ground_truth_consistency_is_near_target() {
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let mut total = 0.0;
        let n = 20;
        for seed in 0..n {
            let rec = generate_recording(&cfg, &vocab, "t", seed).unwrap();
            let graphs: Vec<_> = rec.timepoints.iter().map(|tp| tp.graph.clone()).collect();
            total += consistency(&graphs, &vocab, &[]).unwrap();
        }
        let mean = total / n as f64;
        assert!(
            (mean - 0.9).abs() <= 0.05,
            "ground-truth consistency {mean:.3} outside 0.9 +/- 0.05"
        );
    }

    #[test]
    fn confusable_predicates_share_a_prototype() {
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let protos = prototypes(&cfg, &vocab).unwrap();
        let idx = |n: &str| vocab.predicate_index(n).unwrap();
        let dist = |a: usize, b: usize| -> f64 {
            protos[a]
                .iter()
                .zip(&protos[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        // within a confusable group the prototypes sit exactly the weak
        // separation apart, far below the noise scale
        for (a, b) in [("cleaning", "suturing"), ("drilling", "sawing"), ("drilling", "hammering")]
        {
            let d = dist(idx(a), idx(b));
            assert!(
                (d - cfg.confusable_separation).abs() < 1e-9,
                "{a}/{b} prototype distance {d}"
            );
            assert!(d < cfg.feature_noise_sigma);
        }
        // ordinary class pairs stay well separated
        assert!(dist(idx("cleaning"), idx("drilling")) > 2.0 * cfg.feature_noise_sigma);
        assert!(dist(idx("touching"), idx("cleaning")) > 2.0 * cfg.feature_noise_sigma);
    }

    #[test]
    fn noise_leaves_nonconfusables_mostly_separable() {
        // Monte-Carlo nearest-prototype accuracy over all predicates: high
        // enough that features carry signal, low enough that a
        // feature-only model flips labels from step to step.
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let protos = prototypes(&cfg, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let trials = 4000;
        let mut correct = 0usize;
        for i in 0..trials {
            let gt = i % vocab.n_predicates();
            let sample: Vec<f64> = protos[gt]
                .iter()
                .map(|&p| p + cfg.feature_noise_sigma * gaussian(&mut rng))
                .collect();
            let nearest = (0..vocab.n_predicates())
                .min_by(|&a, &b| {
                    let da: f64 = protos[a].iter().zip(&sample).map(|(p, s)| (p - s).powi(2)).sum();
                    let db: f64 = protos[b].iter().zip(&sample).map(|(p, s)| (p - s).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if nearest == gt {
                correct += 1;
            }
        }
        let acc = correct as f64 / trials as f64;
        assert!(
            acc > 0.45 && acc < 0.90,
            "nearest-prototype accuracy {acc:.3} outside calibration band"
        );
    }

    #[test]
    fn benchmark_files_round_trip() {
        let cfg = ScenarioConfig::default();
        let vocab = Vocabulary::default_or();
        let spec = BenchmarkSpec {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let files = generate_benchmark(&cfg, &vocab, &spec, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        let recs = crate::recording::parse_recordings(&text, &vocab).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].take_id, "train_000");
        let direct = generate_split(&cfg, &vocab, "train", &split_seeds(&spec).0).unwrap();
        assert_eq!(recs, direct);
    }
}
