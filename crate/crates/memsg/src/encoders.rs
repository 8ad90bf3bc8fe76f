//! Learned encoders: the per-scene-graph feature encoder (edge-biased full
//! self-attention over nodes), the temporal fusion transformer with
//! timepoint-of-interest positional embeddings, and the LBT baseline's
//! timepoint featurizer.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{xavier, ParamStore};
use crate::recording::PairFeatures;
use crate::scene::SceneGraph;
use crate::tensor::{Graph, NodeId, Tensor};

/// Shared transformer geometry for both the graph encoder and the fusion
/// stack. d = 80, two layers and one head match the default setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// ToI ids above this collapse into one overflow bucket.
    pub toi_overflow: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 80,
            n_layers: 2,
            n_heads: 1,
            ff_mult: 4,
            toi_overflow: 512,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.d % self.n_heads == 0,
            "hidden dim {} not divisible by {} heads",
            self.d,
            self.n_heads
        );
        self.d / self.n_heads
    }
}

/// Inserts graph-encoder parameters under the `gnn.` prefix:
/// node/edge embedding tables and `n_layers` attention layers, each with
/// per-head query/key/value plus edge-bias projections, an output
/// projection and a feed-forward block.
pub fn init_graph_encoder(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    n_entity_classes: usize,
    n_predicate_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d;
    store.insert("gnn.node_emb", xavier(rng, n_entity_classes, d, d), true);
    store.insert("gnn.edge_emb", xavier(rng, n_predicate_classes, d, d), true);
    init_layers(store, "gnn", cfg, true, rng);
}

/// Inserts fusion parameters under the `fus.` prefix: the ToI embedding
/// table with its overflow bucket, the summary query, the UNKNOWN and
/// empty-memory embeddings, and `n_layers` attention layers.
pub fn init_fusion(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.insert(
        "fus.toi_emb",
        xavier(rng, cfg.toi_overflow + 1, d, d),
        true,
    );
    store.insert("fus.summary", xavier(rng, 1, d, d), true);
    store.insert("fus.unknown", xavier(rng, 1, d, d), true);
    store.insert("fus.empty", xavier(rng, 1, d, d), true);
    init_layers(store, "fus", cfg, false, rng);
}

fn init_layers(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    edge_bias: bool,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d;
    let dh = cfg.head_dim();
    let ff = d * cfg.ff_mult;
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for w in ["wq", "wk", "wv"] {
                store.insert(&format!("{prefix}.l{l}.h{h}.{w}"), xavier(rng, d, dh, d), true);
            }
            if edge_bias {
                store.insert(&format!("{prefix}.l{l}.h{h}.we"), xavier(rng, d, 1, d), true);
            }
        }
        store.insert(&format!("{prefix}.l{l}.wo"), xavier(rng, d, d, d), true);
        store.insert(&format!("{prefix}.l{l}.ff1"), xavier(rng, d, ff, d), true);
        store.insert(&format!("{prefix}.l{l}.ff1_b"), Tensor::zeros(1, ff), true);
        store.insert(&format!("{prefix}.l{l}.ff2"), xavier(rng, ff, d, ff), true);
        store.insert(&format!("{prefix}.l{l}.ff2_b"), Tensor::zeros(1, d), true);
    }
}

/// Attention weights of the summary position over memory entries, one row
/// per layer and head, renormalized over entry positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
}

/// One post-norm transformer layer. `edge_bias[h]` is an optional additive
/// [n,n] logit bias per head. Returns the new states and, per head, the
/// softmaxed attention matrix node.
fn transformer_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    layer: usize,
    cfg: &EncoderConfig,
    x: NodeId,
    edge_bias: Option<&[NodeId]>,
) -> (NodeId, Vec<NodeId>) {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attn_nodes = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let wq = store.leaf(g, &format!("{prefix}.l{layer}.h{h}.wq"));
        let wk = store.leaf(g, &format!("{prefix}.l{layer}.h{h}.wk"));
        let wv = store.leaf(g, &format!("{prefix}.l{layer}.h{h}.wv"));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let scores = g.matmul_nt(q, k);
        let mut scores = g.scale(scores, scale);
        if let Some(bias) = edge_bias {
            scores = g.add(scores, bias[h]);
        }
        let attn = g.softmax_rows(scores);
        attn_nodes.push(attn);
        heads.push(g.matmul(attn, v));
    }
    let mut cat = heads[0];
    for &head in &heads[1..] {
        cat = g.concat_cols(cat, head);
    }
    let wo = store.leaf(g, &format!("{prefix}.l{layer}.wo"));
    let out = g.matmul(cat, wo);
    let x = g.add(x, out);
    let x = g.layer_norm_rows(x);
    // feed-forward block
    let ff1 = store.leaf(g, &format!("{prefix}.l{layer}.ff1"));
    let ff1_b = store.leaf(g, &format!("{prefix}.l{layer}.ff1_b"));
    let ff2 = store.leaf(g, &format!("{prefix}.l{layer}.ff2"));
    let ff2_b = store.leaf(g, &format!("{prefix}.l{layer}.ff2_b"));
    let hdn = g.matmul(x, ff1);
    let hdn = g.add_row(hdn, ff1_b);
    let hdn = g.relu(hdn);
    let hdn = g.matmul(hdn, ff2);
    let hdn = g.add_row(hdn, ff2_b);
    let x2 = g.add(x, hdn);
    let x2 = g.layer_norm_rows(x2);
    (x2, attn_nodes)
}

/// Encodes one scene graph into a [1,d] feature vector.
///
/// Node states start from the class embedding table and go through
/// `n_layers` rounds of full node-to-node self-attention where the logit
/// between nodes i,j carries an additive learned projection of the edge
/// embedding of predicate(i,j) (zero when no edge). The graph vector is
/// the mean over final node states; a zero-node graph maps to the zero
/// vector.
pub fn encode_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    graph: &SceneGraph,
) -> NodeId {
    let n = graph.entities.len();
    if n == 0 {
        return g.leaf(Tensor::zeros(1, cfg.d));
    }
    let pos: BTreeMap<u32, usize> = graph
        .entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id, i))
        .collect();
    let classes: Vec<usize> = graph.entities.iter().map(|e| e.class).collect();
    let node_emb = store.leaf(g, "gnn.node_emb");
    let mut x = g.embed(node_emb, &classes);

    let preds: Vec<usize> = graph.relations.iter().map(|r| r.pred).collect();
    let positions: Vec<(usize, usize)> = graph
        .relations
        .iter()
        .map(|r| (pos[&r.sub], pos[&r.obj]))
        .collect();

    for l in 0..cfg.n_layers {
        let bias: Option<Vec<NodeId>> = if preds.is_empty() {
            None
        } else {
            let edge_emb = store.leaf(g, "gnn.edge_emb");
            let rows = g.embed(edge_emb, &preds);
            Some(
                (0..cfg.n_heads)
                    .map(|h| {
                        let we = store.leaf(g, &format!("gnn.l{l}.h{h}.we"));
                        let col = g.matmul(rows, we);
                        g.scatter_pairs(col, &positions, n)
                    })
                    .collect(),
            )
        };
        let (next, _) = transformer_layer(g, store, "gnn", l, cfg, x, bias.as_deref());
        x = next;
    }
    g.mean_rows(x)
}

/// A memory entry handed to the fusion stack: an encoded feature or the
/// UNKNOWN placeholder, with its ToI positional id.
#[derive(Debug, Clone, Copy)]
pub enum FusePayload {
    Feature(NodeId),
    Unknown,
}

/// Summarizes memory entries into a single [1,d] memory representation.
///
/// UNKNOWN payloads become the learned unknown embedding; each feature
/// receives its ToI embedding (unless `use_toi` is off); the sequence is
/// prepended with the learned summary query and run through the fusion
/// layers. The returned attention rows are the summary position's weights
/// over the entries. Empty input short-circuits to the learned
/// empty-memory embedding.
pub fn fuse_memory(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    entries: &[(FusePayload, usize)],
    use_toi: bool,
) -> (NodeId, Vec<AttentionRecord>) {
    if entries.is_empty() {
        return (store.leaf(g, "fus.empty"), Vec::new());
    }
    let toi_emb = store.leaf(g, "fus.toi_emb");
    let mut rows = Vec::with_capacity(entries.len() + 1);
    rows.push(store.leaf(g, "fus.summary"));
    for &(payload, toi_id) in entries {
        assert!(toi_id > 0, "toi_id must be positive, got {toi_id}");
        let feat = match payload {
            FusePayload::Feature(id) => id,
            FusePayload::Unknown => store.leaf(g, "fus.unknown"),
        };
        let feat = if use_toi {
            let idx = toi_id.min(cfg.toi_overflow);
            let toi = g.embed(toi_emb, &[idx]);
            g.add(feat, toi)
        } else {
            feat
        };
        rows.push(feat);
    }
    let mut x = g.concat_rows(&rows);
    let mut records = Vec::new();
    for l in 0..cfg.n_layers {
        let (next, attn_nodes) = transformer_layer(g, store, "fus", l, cfg, x, None);
        for (h, attn) in attn_nodes.into_iter().enumerate() {
            // summary row, restricted to entry positions and renormalized
            let row = g.value(attn).row(0);
            let total: f64 = row[1..].iter().sum();
            records.push(AttentionRecord {
                layer: l,
                head: h,
                weights: row[1..].iter().map(|w| w / total).collect(),
            });
        }
        x = next;
    }
    (g.row(x, 0), records)
}

/// LBT baseline timepoint feature: arithmetic mean over the per-pair
/// visual vectors. Zero pairs map to the zero vector.
pub fn lbt_timepoint_feature(pair_features: &PairFeatures, d_v: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_v];
    let n = pair_features.len();
    if n == 0 {
        return out;
    }
    for v in pair_features.values() {
        assert_eq!(v.len(), d_v, "pair feature dim {} != {}", v.len(), d_v);
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Entity, Relation};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 4,
            toi_overflow: 512,
        }
    }

    fn store_with(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_graph_encoder(&mut store, cfg, 9, 12, &mut rng);
        init_fusion(&mut store, cfg, &mut rng);
        store
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> SceneGraph {
        let entities: Vec<Entity> = (0..n)
            .map(|i| Entity {
                id: i as u32,
                class: rng.gen_range(0..9),
            })
            .collect();
        let mut relations = Vec::new();
        for a in 0..n as u32 {
            for b in 0..n as u32 {
                if a != b && rng.gen::<f64>() < 0.3 {
                    relations.push(Relation {
                        sub: a,
                        pred: rng.gen_range(0..12),
                        obj: b,
                    });
                }
            }
        }
        SceneGraph::new(entities, relations).unwrap()
    }

    #[test]
    fn encode_shapes_and_degenerate_cases() {
        let cfg = EncoderConfig::default();
        let store = store_with(&cfg, 0);
        let mut g = Graph::new();
        let single = SceneGraph::new(vec![Entity { id: 7, class: 3 }], vec![]).unwrap();
        let out = encode_graph(&mut g, &store, &cfg, &single);
        assert_eq!(g.value(out).shape(), (1, 80));

        let zero = encode_graph(&mut g, &store, &cfg, &SceneGraph::empty());
        assert!(g.value(zero).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_permutation_invariance() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(1..7);
            let graph = random_graph(&mut rng, n);
            // relabel ids and permute the entity list
            let mut perm: Vec<u32> = (0..n as u32).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let relabel = |id: u32| perm[id as usize] + 100;
            let mut entities: Vec<Entity> = graph
                .entities
                .iter()
                .map(|e| Entity {
                    id: relabel(e.id),
                    class: e.class,
                })
                .collect();
            entities.sort_by_key(|e| e.id);
            let relations = graph
                .relations
                .iter()
                .map(|r| Relation {
                    sub: relabel(r.sub),
                    pred: r.pred,
                    obj: relabel(r.obj),
                })
                .collect();
            let shuffled = SceneGraph::new(entities, relations).unwrap();

            let mut g = Graph::new();
            let a = encode_graph(&mut g, &store, &cfg, &graph);
            let b = encode_graph(&mut g, &store, &cfg, &shuffled);
            let drift = g
                .value(a)
                .data
                .iter()
                .zip(&g.value(b).data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(drift < 1e-9, "permutation drift {drift}");
        }
    }

    #[test]
    fn fuse_empty_is_exactly_empty_embedding() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 2);
        let mut g = Graph::new();
        let (rep, records) = fuse_memory(&mut g, &store, &cfg, &[], true);
        assert_eq!(g.value(rep).data, store.get("fus.empty").data);
        assert!(records.is_empty());
    }

    #[test]
    fn fuse_single_entry_attention_is_one() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 3);
        let mut g = Graph::new();
        let feat = g.leaf(Tensor::row_vec(vec![0.1; 16]));
        let (_, records) = fuse_memory(
            &mut g,
            &store,
            &cfg,
            &[(FusePayload::Feature(feat), 1)],
            true,
        );
        assert_eq!(records.len(), cfg.n_layers * cfg.n_heads);
        for r in records {
            assert_eq!(r.weights, vec![1.0]);
        }
    }

    #[test]
    fn fuse_attention_rows_are_distributions() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let entries: Vec<(FusePayload, usize)> = (0..8)
            .map(|i| {
                let t = Tensor::row_vec((0..16).map(|_| rng.gen::<f64>() - 0.5).collect());
                let id = g.leaf(t);
                (FusePayload::Feature(id), i + 1)
            })
            .collect();
        let (_, records) = fuse_memory(&mut g, &store, &cfg, &entries, true);
        for r in records {
            assert!(r.weights.iter().all(|&w| w >= 0.0));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fuse_toi_ids_matter() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 5);
        let mut g = Graph::new();
        let f = Tensor::row_vec((0..16).map(|i| 0.05 * i as f64).collect());
        let a = g.leaf(f.clone());
        let b = g.leaf(f);
        // the identical feature at two different distances: the ToI
        // embedding is the only thing that can tell them apart
        let (rep1, _) = fuse_memory(&mut g, &store, &cfg, &[(FusePayload::Feature(a), 1)], true);
        let (rep2, _) = fuse_memory(&mut g, &store, &cfg, &[(FusePayload::Feature(b), 2)], true);
        let dist: f64 = g
            .value(rep1)
            .data
            .iter()
            .zip(&g.value(rep2).data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1e-6, "toi embeddings should break the tie");
    }

    #[test]
    fn fuse_permutation_with_tois_invariant() {
        let cfg = small_cfg();
        let store = store_with(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let feats: Vec<NodeId> = (0..5)
            .map(|_| g.leaf(Tensor::row_vec((0..16).map(|_| rng.gen::<f64>()).collect())))
            .collect();
        let entries: Vec<(FusePayload, usize)> = feats
            .iter()
            .enumerate()
            .map(|(i, &f)| (FusePayload::Feature(f), i + 1))
            .collect();
        let mut swapped = entries.clone();
        swapped.swap(0, 3);
        swapped.swap(1, 4);
        let (a, _) = fuse_memory(&mut g, &store, &cfg, &entries, true);
        let (b, _) = fuse_memory(&mut g, &store, &cfg, &swapped, true);
        let drift = g
            .value(a)
            .data
            .iter()
            .zip(&g.value(b).data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-9, "entry order with tois attached must not matter");

        // permuting features while HOLDING toi ids fixed changes the result
        let mut crossed = entries.clone();
        let (f0, t0) = crossed[0];
        let (f3, t3) = crossed[3];
        crossed[0] = (f3, t0);
        crossed[3] = (f0, t3);
        let (c, _) = fuse_memory(&mut g, &store, &cfg, &crossed, true);
        let dist = g
            .value(a)
            .data
            .iter()
            .zip(&g.value(c).data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(dist > 1e-9);
    }

    #[test]
    fn lbt_feature_cases() {
        let mut pf = PairFeatures::new();
        assert_eq!(lbt_timepoint_feature(&pf, 2), vec![0.0, 0.0]);
        pf.insert((0, 1), vec![1.0, 0.0]);
        assert_eq!(lbt_timepoint_feature(&pf, 2), vec![1.0, 0.0]);
        pf.insert((1, 0), vec![0.0, 1.0]);
        assert_eq!(lbt_timepoint_feature(&pf, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn lbt_feature_permutation_invariant() {
        // BTreeMap keys reorder on insertion; the mean must not care
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pairs: Vec<((u32, u32), Vec<f64>)> = (0..6)
            .map(|i| ((i as u32, (i + 1) as u32), (0..4).map(|_| rng.gen()).collect()))
            .collect();
        let forward: PairFeatures = pairs.iter().cloned().collect();
        let reversed: PairFeatures = pairs.iter().rev().cloned().collect();
        assert_eq!(
            lbt_timepoint_feature(&forward, 4),
            lbt_timepoint_feature(&reversed, 4)
        );
    }
}
