//! Tape-based reverse-mode differentiation over 2-D row-major values.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products.

use crate::analysis::VARIANCE_EPS;
use crate::scorefn::{self, ScoreFunctionKind};

use super::taps::TapCollector;
use super::{BreakdownCause, BreakdownSignal};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Perturbs one score-function input during the forward pass. Used to
/// check tap gradients against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreProbe {
    pub layer: usize,
    pub site: usize,
    pub delta: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    /// `[r, c] + [1, c]`
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowNormalize { input: Var, inv_std: Vec<f64> },
    Score { input: Var, kind: ScoreFunctionKind, layer: usize, site_offset: usize, inputs: Vec<f64> },
    MeanRowGroups { input: Var, group: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Score matrix recorded during the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSite {
    pub layer: usize,
    pub var: Var,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    score_sites: Vec<ScoreSite>,
    site_counters: Vec<usize>,
    taps: Option<TapCollector>,
    probe: Option<ScoreProbe>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` with `a: [m, k]`, `b: [m, n]`, result `[k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[l * n..(l + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], var: Var, len: usize) -> &'a mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_taps(taps: TapCollector) -> Self {
        Self { taps: Some(taps), ..Self::default() }
    }

    pub fn set_probe(&mut self, probe: ScoreProbe) {
        self.probe = Some(probe);
    }

    pub fn take_taps(&mut self) -> Option<TapCollector> {
        self.taps.take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        let n = &self.nodes[var.0];
        (n.rows, n.cols)
    }

    pub fn score_sites(&self) -> &[ScoreSite] {
        &self.score_sites
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape does not match data");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let value = matmul(self.value(a), self.value(b), m, k, n);
        self.push(m, n, value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions differ");
        let value = matmul_nt(self.value(a), self.value(b), m, k, n);
        self.push(m, n, value, Op::MatMulNt(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias must be a single row");
        let b = self.value(bias);
        let value = self.value(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv)).collect();
        self.push(r, c, value, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add shapes differ");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let (r, c) = self.shape(x);
        let value = self.value(x).iter().map(|v| v * factor).collect();
        self.push(r, c, value, Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(r, c, value, Op::Gelu(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + count <= r, "row slice out of range");
        let value = self.value(x)[start * c..(start + count) * c].to_vec();
        self.push(count, c, value, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + count <= c, "column slice out of range");
        let value = self.value(x).chunks(c).flat_map(|row| row[start..start + count].iter().copied()).collect();
        self.push(r, count, value, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols row counts differ");
        let cols: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(rows, cols, value, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == cols), "concat_rows column counts differ");
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            value.extend_from_slice(self.value(p));
            rows += self.shape(p).0;
        }
        self.push(rows, cols, value, Op::ConcatRows(parts))
    }

    /// Whitens every row to mean 0 and population variance 1.
    pub fn row_normalize(&mut self, x: Var, layer: usize) -> Result<Var, BreakdownSignal> {
        let (r, c) = self.shape(x);
        let mut value = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            if !(var > VARIANCE_EPS) || !var.is_finite() {
                return Err(BreakdownSignal { layer, cause: BreakdownCause::DegenerateRow { variance: var } });
            }
            let s = 1.0 / var.sqrt();
            inv_std.push(s);
            value.extend(row.iter().map(|v| (v - mean) * s));
        }
        Ok(self.push(r, c, value, Op::RowNormalize { input: x, inv_std }))
    }

    /// Applies `kind` to every row of `x`.
    pub fn score(&mut self, x: Var, kind: ScoreFunctionKind, layer: usize) -> Result<Var, BreakdownSignal> {
        let (r, c) = self.shape(x);
        if self.site_counters.len() <= layer {
            self.site_counters.resize(layer + 1, 0);
        }
        let site_offset = self.site_counters[layer];
        self.site_counters[layer] += r * c;

        let mut inputs = self.value(x).to_vec();
        if let Some(p) = self.probe {
            if p.layer == layer && (site_offset..site_offset + r * c).contains(&p.site) {
                inputs[p.site - site_offset] += p.delta;
            }
        }
        let mut value = Vec::with_capacity(r * c);
        for row in inputs.chunks(c) {
            let eval = scorefn::scores(kind, row)
                .map_err(|e| BreakdownSignal { layer, cause: BreakdownCause::Score(e) })?;
            value.extend(eval.scores);
        }
        let var = self.push(r, c, value, Op::Score { input: x, kind, layer, site_offset, inputs });
        self.score_sites.push(ScoreSite { layer, var });
        Ok(var)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(group > 0 && r % group == 0, "rows must split evenly into groups");
        let out_rows = r / group;
        let mut value = vec![0.0; out_rows * c];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let dst = &mut value[(i / group) * c..(i / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v / group as f64;
            }
        }
        self.push(out_rows, c, value, Op::MeanRowGroups { input: x, group })
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (b, c) = self.shape(logits);
        assert_eq!(b, labels.len(), "one label per logit row");
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - row[label];
            probs.extend(exps.iter().map(|e| e / z));
        }
        let value = vec![loss / b as f64];
        self.push(1, 1, value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let Tape { nodes, taps, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n = cols;
                    let da = matmul_nt(&g, &nodes[b.0].value, m, n, k);
                    let db = matmul_tn(&nodes[a.0].value, &g, m, k, n);
                    add_into(accumulate(&mut grads, *a, m * k), &da);
                    add_into(accumulate(&mut grads, *b, k * n), &db);
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n = cols;
                    let da = matmul(&g, &nodes[b.0].value, m, n, k);
                    let db = matmul_tn(&g, &nodes[a.0].value, m, n, k);
                    add_into(accumulate(&mut grads, *a, m * k), &da);
                    add_into(accumulate(&mut grads, *b, n * k), &db);
                }
                Op::AddBias(x, bias) => {
                    add_into(accumulate(&mut grads, *x, rows * cols), &g);
                    let gb = accumulate(&mut grads, *bias, cols);
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(accumulate(&mut grads, *a, rows * cols), &g);
                    add_into(accumulate(&mut grads, *b, rows * cols), &g);
                }
                Op::Scale(x, factor) => {
                    let gx = accumulate(&mut grads, *x, rows * cols);
                    for (d, v) in gx.iter_mut().zip(&g) {
                        *d += v * factor;
                    }
                }
                Op::Gelu(x) => {
                    let xv = &nodes[x.0].value;
                    let gx = accumulate(&mut grads, *x, rows * cols);
                    for ((d, v), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += v * gelu_derivative(xi);
                    }
                }
                Op::SliceRows(x, start) => {
                    let len = nodes[x.0].value.len();
                    let gx = accumulate(&mut grads, *x, len);
                    add_into(&mut gx[start * cols..(start + rows) * cols], &g);
                }
                Op::SliceCols(x, start) => {
                    let src_cols = nodes[x.0].cols;
                    let gx = accumulate(&mut grads, *x, rows * src_cols);
                    for (r, grow) in g.chunks(cols).enumerate() {
                        add_into(&mut gx[r * src_cols + start..r * src_cols + start + cols], grow);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].cols;
                        let gp = accumulate(&mut grads, *p, rows * w);
                        for (r, grow) in g.chunks(cols).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[offset..offset + w]);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        add_into(accumulate(&mut grads, *p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::RowNormalize { input, inv_std } => {
                    let y = &node.value;
                    let gx = accumulate(&mut grads, *input, rows * cols);
                    let c = cols as f64;
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for k in 0..cols {
                            gx[r * cols + k] += (gr[k] - mean_g - yr[k] * mean_gy) * inv_std[r];
                        }
                    }
                }
                Op::Score { input, kind, layer, site_offset, inputs } => {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &inputs[r * cols..(r + 1) * cols];
                        // Forward already validated every row.
                        let jac = scorefn::jacobian(*kind, row).expect("row accepted in forward pass");
                        let dx = jac.vjp(&g[r * cols..(r + 1) * cols]);
                        gx[r * cols..(r + 1) * cols].copy_from_slice(&dx);
                    }
                    if let Some(t) = taps.as_mut() {
                        t.observe(*layer, *site_offset, inputs, &gx);
                    }
                    add_into(accumulate(&mut grads, *input, rows * cols), &gx);
                }
                Op::MeanRowGroups { input, group } => {
                    let len = nodes[input.0].value.len();
                    let gx = accumulate(&mut grads, *input, len);
                    let scale = 1.0 / *group as f64;
                    for (i, dst) in gx.chunks_mut(cols).enumerate() {
                        let src = &g[(i / group) * cols..(i / group + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * scale;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let (b, c) = (nodes[logits.0].rows, nodes[logits.0].cols);
                    let scale = g[0] / b as f64;
                    let gl = accumulate(&mut grads, *logits, b * c);
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            gl[r * c + k] += (probs[r * c + k] - onehot) * scale;
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
