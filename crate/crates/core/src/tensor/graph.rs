//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a 2-D value (`rows x cols`); vectors are `1 x n` and scalars
//! are `1 x 1`. Ops that appear as a unit in the model (layer norm, attention,
//! softmax cross-entropy) are fused so their backward passes stay exact and
//! cheap.

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    ScaleExp(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, seq: usize },
    MeanPool(Var, usize),
    L2Normalize(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Gather(Var, Vec<usize>),
    Concat(Var, Var),
    Transpose(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    // forward intermediates reused by backward (normalized inputs, softmax rows, norms)
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, needs_grad, aux: Vec::new() });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_aux(&mut self, rows: usize, cols: usize, value: Vec<f64>, aux: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let v = self.push(rows, cols, value, op, needs_grad);
        self.nodes[v.0].aux = aux;
        v
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if value.len() != rows * cols {
            bail!(Dimension, "leaf of shape {rows}x{cols} given {} values", value.len());
        }
        Ok(self.push(rows, cols, value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            bail!(Dimension, "matmul {n}x{k} by {k2}x{m}");
        }
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            bail!(Dimension, "matmul_nt {n}x{k} by ({m}x{k2})^T");
        }
        let out = matmul_nt_raw(self.value(a), self.value(b), n, k, m);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, m, out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "add {:?} and {:?}", self.shape(a), self.shape(b));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "mul {:?} and {:?}", self.shape(a), self.shape(b));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            bail!(Dimension, "add_row {r}x{c} with {:?}", self.shape(b));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (o, x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::AddRow(a, b), ng))
    }

    /// Adds `pos` (`l x c`) to each consecutive group of `l` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, pos: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (l, c2) = self.shape(pos);
        if c != c2 || l == 0 || r % l != 0 {
            bail!(Dimension, "add_tiled {r}x{c} with {l}x{c2}");
        }
        let pv = self.value(pos);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let p = &pv[(i % l) * c..(i % l + 1) * c];
            for (o, x) in row.iter_mut().zip(p) {
                *o += x;
            }
        }
        let ng = self.ng(&[a, pos]);
        Ok(self.push(r, c, out, Op::AddTiled(a, pos), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::Scale(a, s), ng))
    }

    /// `exp(s) * a` for a `1 x 1` log-scale `s`.
    pub fn scale_exp(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            bail!(Dimension, "scale_exp needs a scalar, got {:?}", self.shape(s));
        }
        let (r, c) = self.shape(a);
        let f = self.scalar(s).exp();
        let out = self.value(a).iter().map(|x| x * f).collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(r, c, out, Op::ScaleExp(a, s), ng))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            bail!(Dimension, "layer_norm over width {d} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta));
        }
        if eps < 0.0 {
            bail!(Domain, "layer_norm epsilon must be non-negative, got {eps}");
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; n * d];
        let mut aux = vec![0.0; n * d + n];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            if denom == 0.0 {
                bail!(Domain, "layer_norm of a constant row with zero epsilon");
            }
            let inv = 1.0 / denom;
            aux[n * d + i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                aux[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push_aux(n, d, out, aux, Op::LayerNorm { x, gamma, beta }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::Gelu(a), ng))
    }

    /// Single-head scaled dot-product attention applied independently to each
    /// consecutive group of `seq` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) || seq == 0 || n % seq != 0 {
            bail!(Dimension, "attention q {:?} k {:?} v {:?} seq {seq}", self.shape(q), self.shape(k), self.shape(v));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n * seq];
        let mut out = vec![0.0; n * d];
        for blk in 0..n / seq {
            let base = blk * seq;
            for i in 0..seq {
                let qi = &qv[(base + i) * d..(base + i + 1) * d];
                let p = &mut probs[(base + i) * seq..(base + i + 1) * seq];
                for j in 0..seq {
                    p[j] = dot(qi, &kv[(base + j) * d..(base + j + 1) * d]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[(base + i) * d..(base + i + 1) * d];
                for j in 0..seq {
                    axpy(p[j], &vv[(base + j) * d..(base + j + 1) * d], o);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push_aux(n, d, out, probs, Op::Attention { q, k, v, seq }, ng))
    }

    /// Mean over each consecutive group of `seq` rows.
    pub fn mean_pool(&mut self, a: Var, seq: usize) -> Result<Var> {
        let (n, d) = self.shape(a);
        if seq == 0 || n % seq != 0 {
            bail!(Dimension, "mean_pool of {n} rows in groups of {seq}");
        }
        let av = self.value(a);
        let groups = n / seq;
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let o = &mut out[g * d..(g + 1) * d];
            for i in 0..seq {
                axpy(1.0, &av[(g * seq + i) * d..(g * seq + i + 1) * d], o);
            }
            for x in o.iter_mut() {
                *x /= seq as f64;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(groups, d, out, Op::MeanPool(a, seq), ng))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                bail!(Domain, "cannot normalize a zero-norm row");
            }
            norms[i] = norm;
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push_aux(n, d, out, norms, Op::L2Normalize(a), ng))
    }

    /// Row-wise cosine similarity matrix between the rows of `a` and `b`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        self.matmul_nt(an, bn)
    }

    /// Mean softmax cross-entropy of each logit row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if targets.len() != n || n == 0 {
            bail!(Dimension, "cross_entropy over {n} rows with {} targets", targets.len());
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            bail!(Argument, "target {t} out of range for {k} classes");
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push_aux(1, 1, vec![loss / n as f64], probs, Op::CrossEntropy { logits, targets: targets.to_vec() }, ng))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(i) = idx.iter().find(|&&i| i >= r) {
            bail!(Argument, "row index {i} out of range for {r} rows");
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(idx.len(), c, out, Op::Gather(table, idx.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, c) = self.shape(a);
        let (rb, c2) = self.shape(b);
        if c != c2 {
            bail!(Dimension, "concat_rows {ra}x{c} with {rb}x{c2}");
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(ra + rb, c, out, Op::Concat(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(c, r, out, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![s], Op::Sum(a), ng))
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf. Leaf gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            bail!(Argument, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        tmp[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = tmp[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.grads[idx] {
                    Some(g) => axpy(1.0, &dy, g),
                    slot => *slot = Some(dy),
                }
                continue;
            }
            self.propagate(idx, &dy, &mut tmp);
        }
        Ok(())
    }

    fn acc<'t>(&self, tmp: &'t mut [Option<Vec<f64>>], v: Var) -> Option<&'t mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(tmp[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]))
    }

    fn propagate(&self, idx: usize, dy: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.shape(a);
                let m = node.cols;
                if let Some(ga) = self.acc(tmp, a) {
                    let bv = self.value(b);
                    for i in 0..n {
                        let dyi = &dy[i * m..(i + 1) * m];
                        for p in 0..k {
                            ga[i * k + p] += dot(dyi, &bv[p * m..(p + 1) * m]);
                        }
                    }
                }
                if let Some(gb) = self.acc(tmp, b) {
                    let av = self.value(a);
                    for i in 0..n {
                        let dyi = &dy[i * m..(i + 1) * m];
                        for p in 0..k {
                            axpy(av[i * k + p], dyi, &mut gb[p * m..(p + 1) * m]);
                        }
                    }
                }
            }
            &Op::MatMulNt(a, b) => {
                let (n, k) = self.shape(a);
                let m = node.cols;
                if let Some(ga) = self.acc(tmp, a) {
                    let bv = self.value(b);
                    for i in 0..n {
                        for j in 0..m {
                            axpy(dy[i * m + j], &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                if let Some(gb) = self.acc(tmp, b) {
                    let av = self.value(a);
                    for i in 0..n {
                        for j in 0..m {
                            axpy(dy[i * m + j], &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(tmp, v) {
                        axpy(1.0, dy, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(tmp, a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(self.value(b)) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = self.acc(tmp, b) {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(self.value(a)) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(tmp, a) {
                    axpy(1.0, dy, ga);
                }
                if let Some(gb) = self.acc(tmp, b) {
                    for row in dy.chunks(node.cols) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            &Op::AddTiled(a, pos) => {
                if let Some(ga) = self.acc(tmp, a) {
                    axpy(1.0, dy, ga);
                }
                let l = self.shape(pos).0;
                let c = node.cols;
                if let Some(gp) = self.acc(tmp, pos) {
                    for (i, row) in dy.chunks(c).enumerate() {
                        axpy(1.0, row, &mut gp[(i % l) * c..(i % l + 1) * c]);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(tmp, a) {
                    axpy(s, dy, ga);
                }
            }
            &Op::ScaleExp(a, s) => {
                let f = self.scalar(s).exp();
                if let Some(ga) = self.acc(tmp, a) {
                    axpy(f, dy, ga);
                }
                if let Some(gs) = self.acc(tmp, s) {
                    gs[0] += f * dot(self.value(a), dy);
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (n, d) = (node.rows, node.cols);
                let xhat = &node.aux[..n * d];
                let inv = &node.aux[n * d..];
                if let Some(gg) = self.acc(tmp, gamma) {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += dy[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(tmp, beta) {
                    for row in dy.chunks(d) {
                        axpy(1.0, row, gb);
                    }
                }
                let g = self.value(gamma);
                if let Some(gx) = self.acc(tmp, x) {
                    let mut dh = vec![0.0; d];
                    for i in 0..n {
                        let h = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dh[j] = dy[i * d + j] * g[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dh, h) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += inv[i] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = self.acc(tmp, a) {
                    for ((g, d), &x) in ga.iter_mut().zip(dy).zip(self.value(a)) {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            &Op::Attention { q, k, v, seq } => {
                let (n, d) = (node.rows, node.cols);
                let scale = 1.0 / (d as f64).sqrt();
                let probs = &node.aux;
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let mut ds = vec![0.0; n * seq];
                let mut dp = vec![0.0; seq];
                for blk in 0..n / seq {
                    let base = blk * seq;
                    for i in 0..seq {
                        let dyi = &dy[(base + i) * d..(base + i + 1) * d];
                        let p = &probs[(base + i) * seq..(base + i + 1) * seq];
                        for j in 0..seq {
                            dp[j] = dot(dyi, &vv[(base + j) * d..(base + j + 1) * d]);
                        }
                        let s = dot(p, &dp);
                        for j in 0..seq {
                            ds[(base + i) * seq + j] = p[j] * (dp[j] - s);
                        }
                    }
                }
                if let Some(gv) = self.acc(tmp, v) {
                    for blk in 0..n / seq {
                        let base = blk * seq;
                        for i in 0..seq {
                            let dyi = &dy[(base + i) * d..(base + i + 1) * d];
                            for j in 0..seq {
                                let p = probs[(base + i) * seq + j];
                                axpy(p, dyi, &mut gv[(base + j) * d..(base + j + 1) * d]);
                            }
                        }
                    }
                }
                if let Some(gq) = self.acc(tmp, q) {
                    for blk in 0..n / seq {
                        let base = blk * seq;
                        for i in 0..seq {
                            for j in 0..seq {
                                let w = ds[(base + i) * seq + j] * scale;
                                axpy(w, &kv[(base + j) * d..(base + j + 1) * d], &mut gq[(base + i) * d..(base + i + 1) * d]);
                            }
                        }
                    }
                }
                if let Some(gk) = self.acc(tmp, k) {
                    for blk in 0..n / seq {
                        let base = blk * seq;
                        for i in 0..seq {
                            for j in 0..seq {
                                let w = ds[(base + i) * seq + j] * scale;
                                axpy(w, &qv[(base + i) * d..(base + i + 1) * d], &mut gk[(base + j) * d..(base + j + 1) * d]);
                            }
                        }
                    }
                }
            }
            &Op::MeanPool(a, seq) => {
                let d = node.cols;
                if let Some(ga) = self.acc(tmp, a) {
                    let f = 1.0 / seq as f64;
                    for (gi, row) in dy.chunks(d).enumerate() {
                        for i in 0..seq {
                            axpy(f, row, &mut ga[(gi * seq + i) * d..(gi * seq + i + 1) * d]);
                        }
                    }
                }
            }
            &Op::L2Normalize(a) => {
                let d = node.cols;
                if let Some(ga) = self.acc(tmp, a) {
                    for (i, norm) in node.aux.iter().enumerate() {
                        let y = &node.value[i * d..(i + 1) * d];
                        let dyi = &dy[i * d..(i + 1) * d];
                        let yd = dot(y, dyi);
                        for j in 0..d {
                            ga[i * d + j] += (dyi[j] - y[j] * yd) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let k = self.shape(*logits).1;
                let n = targets.len();
                let f = dy[0] / n as f64;
                if let Some(gl) = self.acc(tmp, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += f * (node.aux[i * k + j] - ind);
                        }
                    }
                }
            }
            Op::Gather(table, idx) => {
                let c = node.cols;
                if let Some(gt) = self.acc(tmp, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &dy[r * c..(r + 1) * c], &mut gt[i * c..(i + 1) * c]);
                    }
                }
            }
            &Op::Concat(a, b) => {
                let split = self.nodes[a.0].value.len();
                if let Some(ga) = self.acc(tmp, a) {
                    axpy(1.0, &dy[..split], ga);
                }
                if let Some(gb) = self.acc(tmp, b) {
                    axpy(1.0, &dy[split..], gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.shape(a);
                if let Some(ga) = self.acc(tmp, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(tmp, a) {
                    for g in ga.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * m..(p + 1) * m], o);
        }
    }
    out
}

pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(1, 1, vec![3.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(1, 1, vec![3.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(1, 2, vec![1.0, 2.0]).unwrap();
        let c = g.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
        assert!(matches!(g.leaf(2, 2, vec![0.0; 3], false), Err(crate::Error::Dimension(_))));
    }
}
