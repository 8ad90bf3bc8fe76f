//! The bimodal prediction model: visual projection + memory representation
//! feeding per-pair relation logits and the main-action head, with the
//! teacher-forced training loop and autoregressive inference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_graph, fuse_memory, init_fusion, init_graph_encoder, lbt_timepoint_feature,
    AttentionRecord, EncoderConfig, FusePayload,
};
use crate::error::DataError;
use crate::eval::macro_f1;
use crate::memory::{
    augment_window, build_window, select_memory_indices, AugmentationConfig, MemoryConfig,
    MemoryWindow, Payload,
};
use crate::params::{save_checkpoint, load_checkpoint, xavier, AdamConfig, ParamStore};
use crate::recording::{PairFeatures, Recording};
use crate::scene::{main_action, Relation, SceneGraph};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Bimodal: visual features fused with scene-graph memory.
    Full,
    /// Zero memory representation; per-timepoint visual classification.
    VisualOnly,
    /// Latent-based temporality: mean pair feature per past timepoint.
    Lbt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_v: usize,
    pub n_entity_classes: usize,
    pub n_predicate_classes: usize,
    pub kind: ModelKind,
}

/// Everything inference needs to reconstruct the model from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub memory: MemoryConfig,
    pub use_toi: bool,
}

pub struct Model {
    pub meta: ModelMeta,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with seeded initialization. All parameter groups are
    /// created regardless of kind so checkpoints stay interchangeable.
    pub fn init(meta: ModelMeta, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &meta.config;
        let d = cfg.encoder.d;
        let p = cfg.n_predicate_classes;
        let mut store = ParamStore::new();
        init_graph_encoder(
            &mut store,
            &cfg.encoder,
            cfg.n_entity_classes,
            p,
            &mut rng,
        );
        init_fusion(&mut store, &cfg.encoder, &mut rng);
        store.insert("vis.proj", xavier(&mut rng, cfg.d_v, d, cfg.d_v), true);
        store.insert("vis.proj_b", Tensor::zeros(1, d), true);
        store.insert("lbt.proj", xavier(&mut rng, cfg.d_v, d, cfg.d_v), true);
        store.insert("lbt.proj_b", Tensor::zeros(1, d), true);
        store.insert("head.rel1", xavier(&mut rng, 2 * d, d, 2 * d), true);
        store.insert("head.rel1_b", Tensor::zeros(1, d), true);
        store.insert("head.rel2", xavier(&mut rng, d, p, d), true);
        store.insert("head.rel2_b", Tensor::zeros(1, p), true);
        store.insert("head.act", xavier(&mut rng, d, p + 1, d), true);
        store.insert("head.act_b", Tensor::zeros(1, p + 1), true);
        Model { meta, store }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| DataError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        let (store, meta) = load_checkpoint(path)?;
        let meta: ModelMeta =
            serde_json::from_str(&meta).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        Ok(Model { meta, store })
    }
}

/// Encodes the graphs of a memory window into fusion entries.
pub fn encode_window(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    window: &MemoryWindow,
) -> Vec<(FusePayload, usize)> {
    window
        .entries
        .iter()
        .map(|e| {
            let payload = match &e.payload {
                Payload::Graph(graph) => FusePayload::Feature(encode_graph(g, store, enc, graph)),
                Payload::Unknown => FusePayload::Unknown,
            };
            (payload, e.toi_id)
        })
        .collect()
}

/// LBT entries for timepoint `t`: mean pair feature of each selected past
/// timepoint, linearly projected to d. `unknown_at` marks augmented slots.
fn lbt_entries(
    g: &mut Graph,
    store: &ParamStore,
    recording: &Recording,
    d_v: usize,
    memory: &MemoryConfig,
    t: usize,
    unknown_at: &[usize],
) -> Vec<(FusePayload, usize)> {
    let proj = store.leaf(g, "lbt.proj");
    let proj_b = store.leaf(g, "lbt.proj_b");
    select_memory_indices(memory, t)
        .into_iter()
        .map(|idx| {
            if unknown_at.contains(&idx) {
                return (FusePayload::Unknown, t - idx);
            }
            let pf = recording.timepoints[idx]
                .pair_features
                .as_ref()
                .expect("LBT requires pair features");
            let feat = g.leaf(Tensor::row_vec(lbt_timepoint_feature(pf, d_v)));
            let x = g.matmul(feat, proj);
            let x = g.add_row(x, proj_b);
            (FusePayload::Feature(x), t - idx)
        })
        .collect()
}

pub struct Forward {
    /// Ordered entity pairs the logits refer to; empty for zero entities.
    pub pairs: Vec<(u32, u32)>,
    /// [n_pairs, n_predicates] relation logits; None when no pairs.
    pub rel_logits: Option<NodeId>,
    /// [1, n_predicates+1] main-action logits.
    pub action_logits: NodeId,
    pub attention: Vec<AttentionRecord>,
}

/// Per-pair predicate logits from the bimodal representation: projected
/// pair visual feature concatenated with the memory representation.
pub fn predict_timepoint(
    g: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    pair_features: &PairFeatures,
    mem_rep: NodeId,
) -> (Vec<(u32, u32)>, Option<NodeId>) {
    let pairs: Vec<(u32, u32)> = pair_features.keys().copied().collect();
    if pairs.is_empty() {
        return (pairs, None);
    }
    let d_v = config.d_v;
    let mut flat = Vec::with_capacity(pairs.len() * d_v);
    for pair in &pairs {
        let v = &pair_features[pair];
        assert_eq!(
            v.len(),
            d_v,
            "pair feature dim {} != configured D_v {}",
            v.len(),
            d_v
        );
        flat.extend_from_slice(v);
    }
    let feats = g.leaf(Tensor::new(pairs.len(), d_v, flat));
    let proj = store.leaf(g, "vis.proj");
    let proj_b = store.leaf(g, "vis.proj_b");
    let pv = g.matmul(feats, proj);
    let pv = g.add_row(pv, proj_b);
    let mem = g.repeat_rows(mem_rep, pairs.len());
    let x = g.concat_cols(pv, mem);
    let w1 = store.leaf(g, "head.rel1");
    let b1 = store.leaf(g, "head.rel1_b");
    let w2 = store.leaf(g, "head.rel2");
    let b2 = store.leaf(g, "head.rel2_b");
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    (pairs, Some(h))
}

/// Full forward pass for one timepoint given already-built memory entries.
pub fn forward_timepoint(
    g: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    pair_features: &PairFeatures,
    entries: &[(FusePayload, usize)],
    use_toi: bool,
) -> Forward {
    let (mem_rep, attention) = match config.kind {
        ModelKind::VisualOnly => (g.leaf(Tensor::zeros(1, config.encoder.d)), Vec::new()),
        _ => fuse_memory(g, store, &config.encoder, entries, use_toi),
    };
    let (pairs, rel_logits) = predict_timepoint(g, store, config, pair_features, mem_rep);
    let wa = store.leaf(g, "head.act");
    let ba = store.leaf(g, "head.act_b");
    let action_logits = g.matmul(mem_rep, wa);
    let action_logits = g.add_row(action_logits, ba);
    Forward {
        pairs,
        rel_logits,
        action_logits,
        attention,
    }
}

/// Decodes relation logits into a scene graph: per ordered pair take the
/// argmax; none-argmax pairs produce no relation; ties break to the lowest
/// predicate index.
pub fn assemble_graph(
    logits: Option<&Tensor>,
    pairs: &[(u32, u32)],
    entities: &[crate::scene::Entity],
    none_index: usize,
) -> SceneGraph {
    let mut relations = Vec::new();
    if let Some(logits) = logits {
        assert_eq!(logits.rows, pairs.len(), "logit rows != pair count");
        for (i, &(sub, obj)) in pairs.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best != none_index {
                relations.push(Relation {
                    sub,
                    pred: best,
                    obj,
                });
            }
        }
    }
    SceneGraph {
        entities: entities.to_vec(),
        relations,
    }
}

/// Mean per-pair cross-entropy plus lambda-weighted main-action
/// cross-entropy. Targets come from the ground-truth graph, none for
/// unrelated pairs; the main-action target for "no main action" is the
/// extra class at index n_predicates.
pub fn multitask_loss(
    g: &mut Graph,
    forward: &Forward,
    gt: &SceneGraph,
    vocab: &Vocabulary,
    lambda: f64,
) -> Result<NodeId, DataError> {
    let none = vocab.none_index();
    let rel_loss = forward.rel_logits.map(|logits| {
        let targets: Vec<usize> = forward
            .pairs
            .iter()
            .map(|&(a, b)| gt.predicate_of(a, b).unwrap_or(none))
            .collect();
        g.cross_entropy_mean(logits, &targets)
    });
    let action_target = match main_action(gt, vocab)? {
        Some(p) => p,
        None => vocab.n_predicates(),
    };
    let action_loss = g.cross_entropy_mean(forward.action_logits, &[action_target]);
    let scaled = g.scale(action_loss, lambda);
    Ok(match rel_loss {
        Some(rl) => g.add(rl, scaled),
        None => scaled,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub memory: MemoryConfig,
    pub aug: AugmentationConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub kind: ModelKind,
    pub end_to_end: bool,
    pub use_toi: bool,
    pub use_multitask: bool,
    pub use_augmentation: bool,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    /// Optional cap on (shuffled) training samples per epoch.
    pub max_steps_per_epoch: Option<usize>,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    pub fn defaults(kind: ModelKind, memory: MemoryConfig, seed: u64) -> Self {
        TrainConfig {
            memory,
            aug: AugmentationConfig {
                boundary: memory.stride,
                ..Default::default()
            },
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            epochs: 10,
            lambda: 0.5,
            seed,
            kind,
            end_to_end: true,
            use_toi: true,
            use_multitask: true,
            use_augmentation: true,
            patience: 10,
            max_steps_per_epoch: None,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_macro_f1: Option<f64>,
}

// AdamConfig lives in params.rs without serde; mirror it here for configs.
impl Serialize for AdamConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("AdamConfig", 4)?;
        st.serialize_field("lr", &self.lr)?;
        st.serialize_field("beta1", &self.beta1)?;
        st.serialize_field("beta2", &self.beta2)?;
        st.serialize_field("eps", &self.eps)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for AdamConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lr: f64,
            #[serde(default = "default_beta1")]
            beta1: f64,
            #[serde(default = "default_beta2")]
            beta2: f64,
            #[serde(default = "default_eps")]
            eps: f64,
        }
        fn default_beta1() -> f64 {
            0.9
        }
        fn default_beta2() -> f64 {
            0.999
        }
        fn default_eps() -> f64 {
            1e-8
        }
        let raw = Raw::deserialize(d)?;
        Ok(AdamConfig {
            lr: raw.lr,
            beta1: raw.beta1,
            beta2: raw.beta2,
            eps: raw.eps,
        })
    }
}

/// Builds the memory fusion entries for a training sample (teacher
/// forcing: ground-truth graphs, optionally augmented).
fn train_entries(
    g: &mut Graph,
    model: &Model,
    recording: &Recording,
    gt_graphs: &BTreeMap<usize, SceneGraph>,
    cfg: &TrainConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(FusePayload, usize)>, DataError> {
    match cfg.kind {
        ModelKind::VisualOnly => Ok(Vec::new()),
        ModelKind::Full => {
            let window = build_window(gt_graphs, &cfg.memory, t)
                .map_err(DataError::Recording)?;
            let window = if cfg.use_augmentation {
                augment_window(window, &cfg.aug, rng)
            } else {
                window
            };
            Ok(encode_window(g, &model.store, &cfg.encoder, &window))
        }
        ModelKind::Lbt => {
            let indices = select_memory_indices(&cfg.memory, t);
            let unknown_at: Vec<usize> = if cfg.use_augmentation && !indices.is_empty() {
                // reuse the window augmenter on a graph-free shell to pick
                // which timepoints turn UNKNOWN
                let shell = MemoryWindow {
                    toi: t,
                    entries: indices
                        .iter()
                        .map(|&idx| crate::memory::WindowEntry {
                            t: idx,
                            payload: Payload::Graph(SceneGraph::empty()),
                            toi_id: t - idx,
                        })
                        .collect(),
                };
                augment_window(shell, &cfg.aug, rng)
                    .entries
                    .iter()
                    .filter(|e| e.payload == Payload::Unknown)
                    .map(|e| e.t)
                    .collect()
            } else {
                Vec::new()
            };
            Ok(lbt_entries(
                g,
                &model.store,
                recording,
                model.meta.config.d_v,
                &cfg.memory,
                t,
                &unknown_at,
            ))
        }
    }
}

/// Teacher-forced training. Deterministic given seed and config. Returns
/// the model at the best validation epoch (last epoch when `val` is
/// empty) plus per-epoch logs.
pub fn train(
    dataset: &[Recording],
    val: &[Recording],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>), DataError> {
    train_from(dataset, val, vocab, cfg, None)
}

/// Like `train`, but optionally starting from existing weights
/// (e.g. the best visual-only checkpoint). With `end_to_end` off the
/// visual path stays frozen and only memory path and heads train.
pub fn train_from(
    dataset: &[Recording],
    val: &[Recording],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    init_from: Option<&ParamStore>,
) -> Result<(Model, Vec<EpochLog>), DataError> {
    if dataset.is_empty() {
        return Err(DataError::Recording("empty training dataset".into()));
    }
    cfg.aug.validate().map_err(DataError::Recording)?;
    let d_v = dataset
        .iter()
        .find_map(|r| r.feature_dim())
        .ok_or_else(|| DataError::Recording("training data has no pair features".into()))?;
    let meta = ModelMeta {
        config: ModelConfig {
            encoder: cfg.encoder,
            d_v,
            n_entity_classes: vocab.n_entities(),
            n_predicate_classes: vocab.n_predicates(),
            kind: cfg.kind,
        },
        vocab: vocab.clone(),
        memory: cfg.memory,
        use_toi: cfg.use_toi,
    };
    let mut model = Model::init(meta, cfg.seed);
    if let Some(src) = init_from {
        model.store.load_values_from(src)?;
    }
    if !cfg.end_to_end {
        model.store.set_trainable("vis.proj", false);
        model.store.set_trainable("vis.proj_b", false);
    }
    let lambda = if cfg.use_multitask { cfg.lambda } else { 0.0 };

    // precompute GT graph maps per take for window building
    let gt_maps: Vec<BTreeMap<usize, SceneGraph>> = dataset
        .iter()
        .map(|r| {
            r.timepoints
                .iter()
                .map(|tp| (tp.t, tp.graph.clone()))
                .collect()
        })
        .collect();
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (ri, r) in dataset.iter().enumerate() {
        for tp in &r.timepoints {
            samples.push((ri, tp.t));
        }
    }

    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e3779b9 + epoch as u64));
        let mut order = samples.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        if let Some(cap) = cfg.max_steps_per_epoch {
            order.truncate(cap);
        }
        let mut loss_sum = 0.0;
        for &(ri, t) in &order {
            let recording = &dataset[ri];
            let tp = &recording.timepoints[t];
            let Some(pf) = &tp.pair_features else {
                return Err(DataError::Recording(format!(
                    "take '{}' t={t} has no pair features",
                    recording.take_id
                )));
            };
            let mut g = Graph::new();
            let entries =
                train_entries(&mut g, &model, recording, &gt_maps[ri], cfg, t, &mut rng)?;
            let fwd = forward_timepoint(
                &mut g,
                &model.store,
                &model.meta.config,
                pf,
                &entries,
                cfg.use_toi,
            );
            let loss = multitask_loss(&mut g, &fwd, &tp.graph, vocab, lambda)?;
            loss_sum += g.value(loss).data[0];
            g.backward(loss);
            model.store.adam_step(&g.param_grads(), &cfg.adam);
        }
        let mean_loss = loss_sum / order.len().max(1) as f64;

        let val_macro_f1 = if val.is_empty() {
            None
        } else {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for r in val {
                let out = infer_sequence(r, &model)?;
                preds.extend(out.graphs);
                gts.extend(r.timepoints.iter().map(|tp| tp.graph.clone()));
            }
            Some(macro_f1(&preds, &gts, vocab, false)?.macro_f1)
        };
        logs.push(EpochLog {
            epoch,
            mean_loss,
            val_macro_f1,
        });
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4} val_f1 {:?}",
            val_macro_f1
        );
        if let Some(score) = val_macro_f1 {
            let improved = best.as_ref().map_or(true, |(b, _, _)| score > *b);
            if improved {
                best = Some((score, model.store.clone(), epoch));
            } else if let Some((_, _, best_epoch)) = &best {
                if epoch - best_epoch >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, store, _)) = best {
        model.store = store;
    }
    Ok((model, logs))
}

/// Attention dump entry for one evaluated timepoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDump {
    pub t: usize,
    /// (entry timepoint, toi_id) in sequence order.
    pub entries: Vec<(usize, usize)>,
    pub records: Vec<AttentionRecord>,
}

pub struct InferenceOutput {
    pub graphs: Vec<SceneGraph>,
    pub attention: Vec<AttentionDump>,
}

/// Autoregressive inference over one recording: the memory window at t is
/// built exclusively from the model's own predictions for 0..t-1;
/// ground-truth relations are never read.
pub fn infer_sequence(recording: &Recording, model: &Model) -> Result<InferenceOutput, DataError> {
    let meta = &model.meta;
    let vocab = &meta.vocab;
    let none = vocab.none_index();
    let mut predicted: BTreeMap<usize, SceneGraph> = BTreeMap::new();
    let mut graphs = Vec::with_capacity(recording.len());
    let mut attention = Vec::new();
    for tp in &recording.timepoints {
        let t = tp.t;
        let Some(pf) = &tp.pair_features else {
            return Err(DataError::Recording(format!(
                "take '{}' t={t} has no pair features",
                recording.take_id
            )));
        };
        let mut g = Graph::new();
        let entries: Vec<(FusePayload, usize)> = match meta.config.kind {
            ModelKind::VisualOnly => Vec::new(),
            ModelKind::Full => {
                let window =
                    build_window(&predicted, &meta.memory, t).map_err(DataError::Recording)?;
                encode_window(&mut g, &model.store, &meta.config.encoder, &window)
            }
            ModelKind::Lbt => lbt_entries(
                &mut g,
                &model.store,
                recording,
                meta.config.d_v,
                &meta.memory,
                t,
                &[],
            ),
        };
        let entry_index: Vec<(usize, usize)> = entries.iter().map(|&(_, toi)| (t - toi, toi)).collect();
        let fwd = forward_timepoint(&mut g, &model.store, &meta.config, pf, &entries, meta.use_toi);
        let graph = assemble_graph(
            fwd.rel_logits.map(|id| g.value(id)),
            &fwd.pairs,
            &tp.graph.entities,
            none,
        );
        if !fwd.attention.is_empty() {
            attention.push(AttentionDump {
                t,
                entries: entry_index,
                records: fwd.attention,
            });
        }
        predicted.insert(t, graph.clone());
        graphs.push(graph);
    }
    Ok(InferenceOutput { graphs, attention })
}
