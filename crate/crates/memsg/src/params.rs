//! Named parameter store: flat-addressable weights, the adaptive-moment
//! optimizer, gradient checking, and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let len = value.len();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .trainable = trainable;
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Inserts this parameter into `graph` as a named leaf (cached per graph).
    pub fn leaf(&self, graph: &mut Graph, name: &str) -> NodeId {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
            .clone();
        graph.param_leaf(name, t)
    }

    /// Standard bias-corrected adaptive-moment update over the supplied
    /// gradients; non-trainable parameters are skipped.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Vec<f64>>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads {
            let param = self
                .params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter '{name}'"));
            if !param.trainable {
                continue;
            }
            assert_eq!(
                grad.len(),
                param.value.len(),
                "gradient length mismatch for '{name}'"
            );
            for i in 0..grad.len() {
                let g = grad[i];
                param.m[i] = cfg.beta1 * param.m[i] + (1.0 - cfg.beta1) * g;
                param.v[i] = cfg.beta2 * param.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = param.m[i] / bc1;
                let vhat = param.v[i] / bc2;
                param.value.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies values only (optimizer state untouched); shapes must match.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), DataError> {
        for (name, src) in &other.params {
            let Some(dst) = self.params.get_mut(name) else {
                return Err(DataError::Checkpoint(format!(
                    "checkpoint parameter '{name}' does not exist in model"
                )));
            };
            if dst.value.shape() != src.value.shape() {
                return Err(DataError::Checkpoint(format!(
                    "shape mismatch for '{name}': {:?} vs {:?}",
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value.data.copy_from_slice(&src.value.data);
        }
        Ok(())
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, sampled over at most `samples_per_param` coordinates of
/// every trainable parameter. `build` must construct the full forward
/// pass from the store and return the scalar loss node.
pub fn grad_check<F>(
    store: &mut ParamStore,
    build: F,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> f64
where
    F: Fn(&ParamStore, &mut Graph) -> NodeId,
{
    let mut graph = Graph::new();
    let loss = build(store, &mut graph);
    graph.backward(loss);
    let analytic = graph.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut max_err: f64 = 0.0;
    for name in names {
        if !store.params[&name].trainable {
            continue;
        }
        let len = store.get(&name).len();
        let coords: Vec<usize> = if len <= samples_per_param {
            (0..len).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in coords {
            let orig = store.get(&name).data[i];
            let eval = |store: &ParamStore| {
                let mut g = Graph::new();
                let l = build(store, &mut g);
                g.value(l).data[0]
            };
            store.get_mut(&name).data[i] = orig + h;
            let plus = eval(store);
            store.get_mut(&name).data[i] = orig - h;
            let minus = eval(store);
            store.get_mut(&name).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&name][i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| gaussian(rng) * scale).collect(),
    )
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, JSON metadata blob, then per parameter
// name, shape and raw little-endian f64 buffer.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MSGCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta_json: &str) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = meta_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(store.params.len() as u64).to_le_bytes());
    for (name, param) in &store.params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(param.value.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(param.value.cols as u64).to_le_bytes());
        for &x in &param.value.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // atomic write: temp file in the same directory, then rename
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
        if *pos + n > bytes.len() {
            return Err(DataError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(DataError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(DataError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|e| DataError::Checkpoint(e.to_string()))?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| DataError::Checkpoint(e.to_string()))?;
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::new(rows, cols, data), true);
    }
    Ok((store, meta))
}
