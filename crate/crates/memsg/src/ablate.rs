//! Ablation grids: train named configuration variants across seeds and
//! report test macro F1 and temporal consistency per run and in summary.

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::eval::{consistency, macro_f1};
use crate::model::{infer_sequence, train, TrainConfig};
use crate::recording::Recording;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub macro_f1: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_macro_f1: f64,
    pub sd_macro_f1: f64,
    pub mean_consistency: f64,
    pub sd_consistency: f64,
    pub n: usize,
}

/// Trains and evaluates one configuration; macro F1 pools all test
/// timepoints, consistency averages over takes.
pub fn evaluate_variant(
    train_set: &[Recording],
    val_set: &[Recording],
    test_set: &[Recording],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(f64, f64), DataError> {
    let (model, _) = train(train_set, val_set, vocab, cfg)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut cons_sum = 0.0;
    for r in test_set {
        let out = infer_sequence(r, &model)?;
        cons_sum += consistency(&out.graphs, vocab, &[])?;
        preds.extend(out.graphs);
        gts.extend(r.timepoints.iter().map(|tp| tp.graph.clone()));
    }
    let f1 = macro_f1(&preds, &gts, vocab, false)?.macro_f1;
    Ok((f1, cons_sum / test_set.len().max(1) as f64))
}

pub fn run_grid(
    train_set: &[Recording],
    val_set: &[Recording],
    test_set: &[Recording],
    vocab: &Vocabulary,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, DataError> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = v.cfg.clone();
            cfg.seed = seed;
            let (f1, cons) = evaluate_variant(train_set, val_set, test_set, vocab, &cfg)?;
            log::info!("variant {} seed {seed}: f1 {f1:.4} consistency {cons:.4}", v.name);
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                macro_f1: f1,
                consistency: cons,
            });
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let vals: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
            let n = vals.len();
            let mean = |f: fn(&AblationRow) -> f64| {
                vals.iter().map(|r| f(r)).sum::<f64>() / n as f64
            };
            let sd = |f: fn(&AblationRow) -> f64, m: f64| {
                if n < 2 {
                    0.0
                } else {
                    (vals.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            };
            let mf = mean(|r| r.macro_f1);
            let mc = mean(|r| r.consistency);
            VariantSummary {
                variant: name.to_string(),
                mean_macro_f1: mf,
                sd_macro_f1: sd(|r| r.macro_f1, mf),
                mean_consistency: mc,
                sd_consistency: sd(|r| r.consistency, mc),
                n,
            }
        })
        .collect()
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,macro_f1,consistency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.seed, r.macro_f1, r.consistency
        ));
    }
    out
}

pub fn render_table(summary: &[VariantSummary]) -> String {
    let width = summary
        .iter()
        .map(|s| s.variant.len())
        .max()
        .unwrap_or(7)
        .max("variant".len());
    let mut out = format!(
        "{:<width$}  {:>18}  {:>18}  {:>3}\n",
        "variant", "macro F1", "consistency", "n"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<width$}  {:>10.4} ±{:.4}  {:>10.4} ±{:.4}  {:>3}\n",
            s.variant, s.mean_macro_f1, s.sd_macro_f1, s.mean_consistency, s.sd_consistency, s.n
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::memory::{MemoryConfig, MemoryMode};
    use crate::model::ModelKind;
    use crate::params::AdamConfig;
    use crate::synth::{generate_recording, ScenarioConfig};

    fn quick_cfg(kind: ModelKind) -> TrainConfig {
        let memory = MemoryConfig {
            mode: MemoryMode::LongShort,
            stride: 5,
            long_anchor: Default::default(),
        };
        TrainConfig {
            encoder: EncoderConfig {
                d: 8,
                n_layers: 1,
                n_heads: 1,
                ff_mult: 2,
                toi_overflow: 512,
            },
            epochs: 1,
            max_steps_per_epoch: Some(10),
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..TrainConfig::defaults(kind, memory, 0)
        }
    }

    #[test]
    fn grid_produces_one_row_per_variant_and_seed() {
        let vocab = Vocabulary::default_or();
        let scen = ScenarioConfig::default();
        let data = vec![generate_recording(&scen, &vocab, "a", 1).unwrap()];
        let test = vec![generate_recording(&scen, &vocab, "b", 2).unwrap()];
        let variants = vec![
            Variant {
                name: "full".into(),
                cfg: quick_cfg(ModelKind::Full),
            },
            Variant {
                name: "visual_only".into(),
                cfg: quick_cfg(ModelKind::VisualOnly),
            },
        ];
        let rows = run_grid(&data, &[], &test, &vocab, &variants, &[1, 2]).unwrap();
        assert_eq!(rows.len(), 4);
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].n, 2);
        let csv = rows_to_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        let table = render_table(&summary);
        assert!(table.contains("visual_only"));
    }

    #[test]
    fn visual_only_ignores_memory_mode() {
        let vocab = Vocabulary::default_or();
        let scen = ScenarioConfig::default();
        let data = vec![generate_recording(&scen, &vocab, "a", 1).unwrap()];
        let test = vec![generate_recording(&scen, &vocab, "b", 2).unwrap()];
        let mut short = quick_cfg(ModelKind::VisualOnly);
        short.memory.mode = MemoryMode::Short;
        let mut all = quick_cfg(ModelKind::VisualOnly);
        all.memory.mode = MemoryMode::All;
        let a = evaluate_variant(&data, &[], &test, &vocab, &short).unwrap();
        let b = evaluate_variant(&data, &[], &test, &vocab, &all).unwrap();
        assert_eq!(a, b);
    }
}
