//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything the model touches is a row-major f64 matrix; scalars are
//! [1,1] and vectors [1,d]. Ops are recorded on a tape (`Graph`) as they
//! are evaluated, and `backward` walks the tape in reverse. There is no
//! implicit broadcasting; the only shape-mixing ops are the explicit
//! row-broadcast ones.

use std::collections::BTreeMap;

/// Dense 2-D tensor of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor::new(1, data.len(), data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// A * B^T without materializing the transpose.
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// [n,d] + [1,d] broadcast over rows.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Embed {
        table: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    MeanRows(NodeId),
    Row(NodeId, usize),
    RepeatRows(NodeId, usize),
    /// Scatter an [e,1] column into an otherwise-zero [n,n] matrix.
    ScatterPairs {
        src: NodeId,
        positions: Vec<(usize, usize)>,
        n: usize,
    },
    SumAll(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    param: Option<String>,
}

/// Computation tape. Ops evaluate eagerly and record their inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: BTreeMap<String, NodeId>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf tagged with a parameter name; one node per name per graph.
    pub fn param_leaf(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.param_leaves.get(name) {
            return id;
        }
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].param = Some(name.to_string());
        self.param_leaves.insert(name.to_string(), id);
        id
    }

    fn shp(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shp(a);
        let (k2, n) = self.shp(b);
        assert_eq!(k, k2, "matmul shape mismatch: ({m},{k}) x ({k2},{n})");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            matmul_into(&av.data, &bv.data, &mut out, m, k, n);
        }
        self.push(Tensor::new(m, n, out), Op::Matmul(a, b))
    }

    /// a [m,k] x b^T where b is [n,k]; result [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shp(a);
        let (n, k2) = self.shp(b);
        assert_eq!(k, k2, "matmul_nt shape mismatch: ({m},{k}) x ({n},{k2})^T");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                let ar = &av.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &bv.data[j * k..(j + 1) * k];
                    out[i * n + j] = dot(ar, br);
                }
            }
        }
        self.push(Tensor::new(m, n, out), Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shp(a),
            self.shp(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shp(a),
            self.shp(b)
        );
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x + y);
        let (r, c) = self.shp(a);
        self.push(Tensor::new(r, c, data), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shp(a),
            self.shp(b),
            "mul shape mismatch: {:?} vs {:?}",
            self.shp(a),
            self.shp(b)
        );
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x * y);
        let (r, c) = self.shp(a);
        self.push(Tensor::new(r, c, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.rows, v.cols, v.data.iter().map(|x| x * k).collect());
        self.push(t, Op::Scale(a, k))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.shp(a);
        let (br, bc) = self.shp(b);
        assert!(
            br == 1 && bc == d,
            "add_row shape mismatch: ({n},{d}) + ({br},{bc})"
        );
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut data = av.data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv.data[j];
            }
        }
        self.push(Tensor::new(n, d, data), Op::AddRow(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.rows, v.cols, v.data.iter().map(|&x| x.max(0.0)).collect());
        self.push(t, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.rows, v.cols, v.data.iter().map(|&x| gelu(x)).collect());
        self.push(t, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (n, d) = v.shape();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            softmax_into(v.row(i), &mut data[i * d..(i + 1) * d]);
        }
        self.push(Tensor::new(n, d, data), Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (n, d) = v.shape();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Tensor::new(n, d, data), Op::LayerNormRows(a))
    }

    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let (v, d) = self.shp(table);
        for &i in indices {
            assert!(i < v, "embedding index {i} out of range for table of {v}");
        }
        let tv = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        self.push(
            Tensor::new(indices.len(), d, data),
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let d = self.shp(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shp(p);
            assert_eq!(c, d, "concat_rows col mismatch: {c} vs {d}");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(Tensor::new(rows, d, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, p) = self.shp(a);
        let (n2, q) = self.shp(b);
        assert_eq!(n, n2, "concat_cols row mismatch: ({n},{p}) vs ({n2},{q})");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Tensor::new(n, p + q, data), Op::ConcatCols(a, b))
    }

    /// Mean over rows: [n,d] -> [1,d]. Mean over zero rows is the zero vector.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.shp(a);
        let v = &self.nodes[a.0].value;
        let mut data = vec![0.0; d];
        if n > 0 {
            for i in 0..n {
                for j in 0..d {
                    data[j] += v.data[i * d + j];
                }
            }
            for x in &mut data {
                *x /= n as f64;
            }
        }
        self.push(Tensor::new(1, d, data), Op::MeanRows(a))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let (n, d) = self.shp(a);
        assert!(i < n, "row {i} out of range for {n} rows");
        let data = self.nodes[a.0].value.row(i).to_vec();
        self.push(Tensor::new(1, d, data), Op::Row(a, i))
    }

    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let (r, d) = self.shp(a);
        assert_eq!(r, 1, "repeat_rows expects a [1,d] input, got ({r},{d})");
        let row = self.nodes[a.0].value.data.clone();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        self.push(Tensor::new(n, d, data), Op::RepeatRows(a, n))
    }

    pub fn scatter_pairs(&mut self, src: NodeId, positions: &[(usize, usize)], n: usize) -> NodeId {
        let (e, c) = self.shp(src);
        assert_eq!(c, 1, "scatter_pairs expects an [e,1] source, got ({e},{c})");
        assert_eq!(e, positions.len(), "scatter_pairs source/position count");
        let mut data = vec![0.0; n * n];
        for (k, &(i, j)) in positions.iter().enumerate() {
            assert!(i < n && j < n, "scatter position ({i},{j}) out of range {n}");
            data[i * n + j] += self.nodes[src.0].value.data[k];
        }
        self.push(
            Tensor::new(n, n, data),
            Op::ScatterPairs {
                src,
                positions: positions.to_vec(),
                n,
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (n, c) = self.shp(logits);
        assert_eq!(n, targets.len(), "cross_entropy targets: {n} rows vs {} targets", targets.len());
        let v = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target {t} out of range for {c} classes");
            let row = v.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar loss node. Populates grads of every node
    /// reachable from `loss`; multiple uses of a node accumulate by sum.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.shp(loss),
            (1, 1),
            "backward requires a scalar loss, got {:?}",
            self.shp(loss)
        );
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shp(a);
                    let n = self.shp(b).1;
                    // dA = G B^T ; dB = A^T G
                    let bv = self.nodes[b.0].value.data.clone();
                    let av = self.nodes[a.0].value.data.clone();
                    {
                        let da = &mut self.nodes[a.0].grad;
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for j in 0..k {
                                da[i * k + j] += dot(gr, &bv[j * n..(j + 1) * n]);
                            }
                        }
                    }
                    {
                        let db = &mut self.nodes[b.0].grad;
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let coef = av[i * k + p];
                                if coef == 0.0 {
                                    continue;
                                }
                                let dbr = &mut db[p * n..(p + 1) * n];
                                for q in 0..n {
                                    dbr[q] += coef * gr[q];
                                }
                            }
                        }
                    }
                }
                Op::MatmulNt(a, b) => {
                    // C = A B^T, A [m,k], B [n,k], G [m,n]
                    // dA = G B ; dB = G^T A
                    let (m, k) = self.shp(a);
                    let n = self.shp(b).0;
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    {
                        let da = &mut self.nodes[a.0].grad;
                        matmul_add_into(&g, &bv, da, m, n, k);
                    }
                    {
                        let db = &mut self.nodes[b.0].grad;
                        for i in 0..m {
                            let ar = &av[i * k..(i + 1) * k];
                            for j in 0..n {
                                let coef = g[i * n + j];
                                if coef == 0.0 {
                                    continue;
                                }
                                let dbr = &mut db[j * k..(j + 1) * k];
                                for p in 0..k {
                                    dbr[p] += coef * ar[p];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_assign(&mut self.nodes[a.0].grad, &g);
                    add_assign(&mut self.nodes[b.0].grad, &g);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    for (da, (gi, bi)) in self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&bv)) {
                        *da += gi * bi;
                    }
                    for (db, (gi, ai)) in self.nodes[b.0].grad.iter_mut().zip(g.iter().zip(&av)) {
                        *db += gi * ai;
                    }
                }
                Op::Scale(a, kf) => {
                    for (da, gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *da += gi * kf;
                    }
                }
                Op::AddRow(a, b) => {
                    let (n, d) = self.shp(a);
                    add_assign(&mut self.nodes[a.0].grad, &g);
                    let db = &mut self.nodes[b.0].grad;
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value.data.clone();
                    for (da, (gi, ai)) in self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&av)) {
                        if *ai > 0.0 {
                            *da += gi;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = self.nodes[a.0].value.data.clone();
                    for (da, (gi, ai)) in self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&av)) {
                        *da += gi * gelu_deriv(*ai);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (n, d) = self.shp(a);
                    let yv = self.nodes[idx].value.data.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..n {
                        let y = &yv[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let s = dot(y, gr);
                        for j in 0..d {
                            da[i * d + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LayerNormRows(a) => {
                    let (n, d) = self.shp(a);
                    let xv = self.nodes[a.0].value.data.clone();
                    let yv = self.nodes[idx].value.data.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..n {
                        let x = &xv[i * d..(i + 1) * d];
                        let y = &yv[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let mean = x.iter().sum::<f64>() / d as f64;
                        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = gr.iter().sum::<f64>() / d as f64;
                        let gymean = dot(gr, y) / d as f64;
                        for j in 0..d {
                            da[i * d + j] += inv * (gr[j] - gmean - y[j] * gymean);
                        }
                    }
                }
                Op::Embed { table, indices } => {
                    let d = self.shp(table).1;
                    let dt = &mut self.nodes[table.0].grad;
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[k * d + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_assign(&mut self.nodes[p.0].grad, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (n, p) = self.shp(a);
                    let q = self.shp(b).1;
                    {
                        let da = &mut self.nodes[a.0].grad;
                        for i in 0..n {
                            for j in 0..p {
                                da[i * p + j] += g[i * (p + q) + j];
                            }
                        }
                    }
                    {
                        let db = &mut self.nodes[b.0].grad;
                        for i in 0..n {
                            for j in 0..q {
                                db[i * q + j] += g[i * (p + q) + p + j];
                            }
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.shp(a);
                    if n > 0 {
                        let da = &mut self.nodes[a.0].grad;
                        for i in 0..n {
                            for j in 0..d {
                                da[i * d + j] += g[j] / n as f64;
                            }
                        }
                    }
                }
                Op::Row(a, i) => {
                    let d = self.shp(a).1;
                    let da = &mut self.nodes[a.0].grad;
                    for j in 0..d {
                        da[i * d + j] += g[j];
                    }
                }
                Op::RepeatRows(a, n) => {
                    let d = self.shp(a).1;
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..n {
                        for j in 0..d {
                            da[j] += g[i * d + j];
                        }
                    }
                }
                Op::ScatterPairs { src, positions, n } => {
                    let ds = &mut self.nodes[src.0].grad;
                    for (k, &(i, j)) in positions.iter().enumerate() {
                        ds[k] += g[i * n + j];
                    }
                }
                Op::SumAll(a) => {
                    for da in self.nodes[a.0].grad.iter_mut() {
                        *da += g[0];
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (n, c) = self.shp(logits);
                    let lv = self.nodes[logits.0].value.data.clone();
                    let dl = &mut self.nodes[logits.0].grad;
                    let scale = g[0] / n as f64;
                    let mut probs = vec![0.0; c];
                    for (i, &t) in targets.iter().enumerate() {
                        softmax_into(&lv[i * c..(i + 1) * c], &mut probs);
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dl[i * c + j] += scale * (probs[j] - indicator);
                        }
                    }
                }
            }
        }
    }

    /// Gradients of all named parameter leaves, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.param_leaves
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].grad.clone()))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// c += a[m,k] x b[k,n] is the hot loop; ikj order keeps accesses row-major.
fn matmul_add_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_add_into(a, b, c, m, k, n);
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// tanh approximation of GELU
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect(),
        )
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vec(vec![0.0, 0.0]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.leaf(randn(&mut rng, 4, 9));
        let y = g.softmax_rows(x);
        for i in 0..4 {
            let row = g.value(y).row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_near_zero_for_confident_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::row_vec(vec![10.0, -10.0]));
        let ce = g.cross_entropy_mean(logits, &[0]);
        // -log softmax evaluated independently: ln(1 + e^{-20})
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((g.value(ce).data[0] - expected).abs() < 1e-15);
        assert!(g.value(ce).data[0] < 1e-4);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::new(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let a = randn(&mut rng, 3, 3);
        let an = g.leaf(a.clone());
        let c = g.matmul(eye, an);
        assert_eq!(g.value(c).data, a.data);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let w = g.param_leaf("w", Tensor::row_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum_all(w);
        g.backward(s);
        assert_eq!(g.param_grads()["w"], vec![1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param_leaf("w", Tensor::row_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(w, w);
        let s = g.sum_all(sq);
        g.backward(s);
        assert_eq!(g.param_grads()["w"], vec![2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch: (2,3) x (2,2)")]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(2, 2));
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 2));
        g.backward(a);
    }

    #[test]
    fn ops_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, 4, 6);
        let b = randn(&mut rng, 6, 3);
        let run = || {
            let mut g = Graph::new();
            let an = g.leaf(a.clone());
            let bn = g.leaf(b.clone());
            let c = g.matmul(an, bn);
            let d = g.gelu(c);
            let e = g.layer_norm_rows(d);
            g.value(e).data.clone()
        };
        assert_eq!(run(), run());
    }

    /// Central-difference check on a 2-layer MLP with layer norm and
    /// softmax cross-entropy, driven through the shared grad_check helper.
    #[test]
    fn mlp_finite_difference() {
        use crate::params::{grad_check, ParamStore};
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("w1", randn(&mut rng, 5, 8), true);
            store.insert("b1", randn(&mut rng, 1, 8), true);
            store.insert("w2", randn(&mut rng, 8, 4), true);
            store.insert("b2", randn(&mut rng, 1, 4), true);
            let x = randn(&mut rng, 3, 5);
            let targets = vec![1usize, 0, 3];
            let err = grad_check(
                &mut store,
                |store, g| {
                    let xn = g.leaf(x.clone());
                    let w1 = store.leaf(g, "w1");
                    let b1 = store.leaf(g, "b1");
                    let w2 = store.leaf(g, "w2");
                    let b2 = store.leaf(g, "b2");
                    let h = g.matmul(xn, w1);
                    let h = g.add_row(h, b1);
                    let h = g.relu(h);
                    let h = g.layer_norm_rows(h);
                    let h = g.matmul(h, w2);
                    let h = g.add_row(h, b2);
                    g.cross_entropy_mean(h, &targets)
                },
                1e-5,
                usize::MAX,
                0,
            );
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }
}
