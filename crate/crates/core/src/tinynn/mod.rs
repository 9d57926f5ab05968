//! A small attention classifier with a pluggable score function.
//!
//! Structure: linear patch embedding over non-overlapping patches, `depth`
//! blocks of `x + attention(x)` followed by `x + MLP(x)` (GELU, no norm
//! layers), mean pooling over tokens and a linear classification head.

mod tape;
mod taps;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scorefn::{ScoreError, ScoreFunctionKind};

pub use tape::{Gradients, ScoreProbe, ScoreSite, Tape, Var};
pub use taps::{GradientTapRecord, TapCollector, TapSample};

/// Divisor applied to `Q·Kᵀ` before the score function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `1 / d_model`
    #[default]
    InvDModel,
    /// `1 / √d_model`
    InvSqrtDModel,
}

impl ScoreScale {
    pub fn factor(self, embed_dim: usize) -> f64 {
        match self {
            ScoreScale::InvDModel => 1.0 / embed_dim as f64,
            ScoreScale::InvSqrtDModel => 1.0 / (embed_dim as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub score_kind: ScoreFunctionKind,
    pub score_scale: ScoreScale,
    pub prenormalize: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub depth: usize,
    pub attention: AttentionConfig,
    pub patch_size: usize,
    /// `(height, width, channels)`
    pub input_shape: (usize, usize, usize),
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl DemoConfig {
    /// 8×8×1 inputs: embed 32, 2 heads, 2×2 patches (16 tokens).
    pub fn synthetic(kind: ScoreFunctionKind, depth: usize, num_classes: usize) -> Self {
        Self {
            depth,
            attention: AttentionConfig {
                embed_dim: 32,
                num_heads: 2,
                score_kind: kind,
                score_scale: ScoreScale::InvDModel,
                prenormalize: false,
            },
            patch_size: 2,
            input_shape: (8, 8, 1),
            mlp_ratio: 2.0,
            num_classes,
        }
    }

    /// 32×32×3 inputs: embed 64, 4 heads, 4×4 patches (64 tokens), 100 classes.
    pub fn cifar100(kind: ScoreFunctionKind, depth: usize) -> Self {
        Self {
            depth,
            attention: AttentionConfig {
                embed_dim: 64,
                num_heads: 4,
                score_kind: kind,
                score_scale: ScoreScale::InvDModel,
                prenormalize: false,
            },
            patch_size: 4,
            input_shape: (32, 32, 3),
            mlp_ratio: 2.0,
            num_classes: 100,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let (h, w, c) = self.input_shape;
        let a = &self.attention;
        let fail = |msg: &str| Err(NnError::Config(msg.to_string()));
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return fail("input height and width must be divisible by the patch size");
        }
        if c == 0 || a.embed_dim == 0 || a.num_heads == 0 || a.embed_dim % a.num_heads != 0 {
            return fail("embed_dim must be a positive multiple of num_heads");
        }
        if self.tokens() < 2 {
            return fail("attention needs at least 2 tokens");
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return fail("mlp_ratio must be positive");
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let (h, w, _) = self.input_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.input_shape.2
    }

    pub fn hidden_dim(&self) -> usize {
        (self.attention.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BreakdownCause {
    #[error(transparent)]
    Score(ScoreError),
    #[error("pre-normalization met a constant row (variance {variance:e})")]
    DegenerateRow { variance: f64 },
}

/// A score stage rejected its input during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("breakdown in attention layer {layer}: {cause}")]
pub struct BreakdownSignal {
    pub layer: usize,
    pub cause: BreakdownCause,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Breakdown(#[from] BreakdownSignal),
}

/// Parameter or value array with an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape does not match data");
        Self { shape, values, requires_grad, grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("only 1-D and 2-D tensors go on the tape"),
        }
    }
}

/// A single image stored height × width × channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width * channels, data.len(), "image shape does not match data");
        Self { height, width, channels, data }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Parameter vars for one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Multi-head attention over `batch` sequences of `tokens` rows each,
/// stacked in `x: [batch · tokens, embed_dim]`.
pub fn attention_forward(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    x: Var,
    batch: usize,
    params: &AttentionParams,
    layer: usize,
) -> Result<Var, BreakdownSignal> {
    let (rows, _) = tape.shape(x);
    let tokens = rows / batch;
    let hd = cfg.head_dim();
    let scale = cfg.score_scale.factor(cfg.embed_dim);

    let q = tape.matmul(x, params.wq);
    let q = tape.add_bias(q, params.bq);
    let k = tape.matmul(x, params.wk);
    let k = tape.add_bias(k, params.bk);
    let v = tape.matmul(x, params.wv);
    let v = tape.add_bias(v, params.bv);

    let mut outputs = Vec::with_capacity(batch);
    for b in 0..batch {
        let qb = tape.slice_rows(q, b * tokens, tokens);
        let kb = tape.slice_rows(k, b * tokens, tokens);
        let vb = tape.slice_rows(v, b * tokens, tokens);
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_cols(qb, h * hd, hd);
            let kh = tape.slice_cols(kb, h * hd, hd);
            let vh = tape.slice_cols(vb, h * hd, hd);
            let raw = tape.matmul_nt(qh, kh);
            let mut raw = tape.scale(raw, scale);
            if cfg.prenormalize {
                raw = tape.row_normalize(raw, layer)?;
            }
            let s = tape.score(raw, cfg.score_kind, layer)?;
            heads.push(tape.matmul(s, vh));
        }
        outputs.push(tape.concat_cols(heads));
    }
    Ok(tape.concat_rows(outputs))
}

/// Parameter indices of one block.
#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    first: usize,
}

impl BlockSlots {
    const LEN: usize = 10;
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: DemoConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Loss, batch accuracy and optional taps from one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub taps: Vec<GradientTapRecord>,
}

impl Model {
    /// Builds the demo with weights drawn from `N(0, 1/fan_in)` and zero
    /// biases, in a fixed order from `seed`.
    pub fn new(cfg: DemoConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let mut model = Model { cfg, params: Vec::new(), names: Vec::new() };
        let d = cfg.attention.embed_dim;
        let hidden = cfg.hidden_dim();
        let mut weight = |model: &mut Model, name: String, fan_in: usize, fan_out: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let values = rng::normal_vec(&mut rng, fan_in * fan_out, std);
            model.push(name, vec![fan_in, fan_out], values);
        };
        weight(&mut model, "patch.w".into(), cfg.patch_dim(), d);
        model.push("patch.b".into(), vec![d], vec![0.0; d]);
        for l in 0..cfg.depth {
            for p in ["q", "k", "v"] {
                weight(&mut model, format!("block{l}.w{p}"), d, d);
                model.push(format!("block{l}.b{p}"), vec![d], vec![0.0; d]);
            }
            weight(&mut model, format!("block{l}.mlp.w1"), d, hidden);
            model.push(format!("block{l}.mlp.b1"), vec![hidden], vec![0.0; hidden]);
            weight(&mut model, format!("block{l}.mlp.w2"), hidden, d);
            model.push(format!("block{l}.mlp.b2"), vec![d], vec![0.0; d]);
        }
        weight(&mut model, "head.w".into(), d, cfg.num_classes);
        model.push("head.b".into(), vec![cfg.num_classes], vec![0.0; cfg.num_classes]);
        Ok(model)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) {
        self.names.push(name);
        self.params.push(Tensor::new(shape, values, true));
    }

    pub fn config(&self) -> &DemoConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Flattened non-overlapping patches of every image: `[B · tokens, patch_dim]`.
    fn patches(&self, images: &[Image]) -> Vec<f64> {
        let p = self.cfg.patch_size;
        let (h, w, c) = self.cfg.input_shape;
        let mut out = Vec::with_capacity(images.len() * self.cfg.tokens() * self.cfg.patch_dim());
        for img in images {
            assert_eq!((img.height, img.width, img.channels), (h, w, c), "image shape mismatch");
            for py in 0..h / p {
                for px in 0..w / p {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                out.push(img.pixel(py * p + dy, px * p + dx, ch));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn param_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                let (r, c) = t.rows_cols();
                tape.leaf(r, c, t.values.clone())
            })
            .collect()
    }

    /// Records the forward pass and returns `(parameter vars, logits)`.
    pub fn forward(&self, tape: &mut Tape, images: &[Image]) -> Result<(Vec<Var>, Var), BreakdownSignal> {
        let vars = self.param_vars(tape);
        let batch = images.len();
        let tokens = self.cfg.tokens();
        let x = tape.leaf(batch * tokens, self.cfg.patch_dim(), self.patches(images));
        let x = tape.matmul(x, vars[0]);
        let mut x = tape.add_bias(x, vars[1]);
        for l in 0..self.cfg.depth {
            let s = BlockSlots { first: 2 + l * BlockSlots::LEN };
            let p = |i: usize| vars[s.first + i];
            let attn = AttentionParams { wq: p(0), bq: p(1), wk: p(2), bk: p(3), wv: p(4), bv: p(5) };
            let a = attention_forward(tape, &self.cfg.attention, x, batch, &attn, l)?;
            x = tape.add(x, a);
            let h = tape.matmul(x, p(6));
            let h = tape.add_bias(h, p(7));
            let h = tape.gelu(h);
            let h = tape.matmul(h, p(8));
            let h = tape.add_bias(h, p(9));
            x = tape.add(x, h);
        }
        let pooled = tape.mean_row_groups(x, tokens);
        let head = 2 + self.cfg.depth * BlockSlots::LEN;
        let logits = tape.matmul(pooled, vars[head]);
        let logits = tape.add_bias(logits, vars[head + 1]);
        Ok((vars, logits))
    }

    /// Logits `[B, num_classes]`, row-major.
    pub fn logits(&self, images: &[Image]) -> Result<Vec<f64>, BreakdownSignal> {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, images)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Mean cross-entropy over the batch, without gradients.
    pub fn loss(&self, images: &[Image], labels: &[usize]) -> Result<f64, BreakdownSignal> {
        self.loss_on(&mut Tape::new(), images, labels)
    }

    fn loss_on(&self, tape: &mut Tape, images: &[Image], labels: &[usize]) -> Result<f64, BreakdownSignal> {
        let (_, logits) = self.forward(tape, images)?;
        let loss = tape.cross_entropy(logits, labels);
        Ok(tape.value(loss)[0])
    }

    /// Loss with one score input shifted by `probe.delta`.
    pub fn probed_loss(&self, images: &[Image], labels: &[usize], probe: ScoreProbe) -> Result<f64, BreakdownSignal> {
        let mut tape = Tape::new();
        tape.set_probe(probe);
        self.loss_on(&mut tape, images, labels)
    }

    /// Forward and backward pass; fills every parameter's `grad`.
    pub fn compute_gradients(
        &mut self,
        images: &[Image],
        labels: &[usize],
        taps: Option<TapCollector>,
        step: usize,
    ) -> Result<StepOutput, BreakdownSignal> {
        let mut tape = match taps {
            Some(t) => Tape::with_taps(t),
            None => Tape::new(),
        };
        let (vars, logits) = self.forward(&mut tape, images)?;
        let correct = count_correct(tape.value(logits), self.cfg.num_classes, labels);
        let loss_var = tape.cross_entropy(logits, labels);
        let loss = tape.value(loss_var)[0];
        let grads = tape.backward(loss_var);
        for (param, var) in self.params.iter_mut().zip(&vars) {
            let g = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; param.len()]);
            param.grad = Some(g);
        }
        let taps = tape.take_taps().map(|t| t.into_records(step)).unwrap_or_default();
        Ok(StepOutput { loss, correct, taps })
    }

    /// Head-averaged `tokens × tokens` score matrix of every layer for one image.
    pub fn export_attention(&self, image: &Image) -> Result<Vec<Vec<f64>>, BreakdownSignal> {
        let mut tape = Tape::new();
        self.forward(&mut tape, std::slice::from_ref(image))?;
        let n = self.cfg.tokens();
        let heads = self.cfg.attention.num_heads as f64;
        let mut maps = vec![vec![0.0; n * n]; self.cfg.depth];
        for site in tape.score_sites() {
            for (m, v) in maps[site.layer].iter_mut().zip(tape.value(site.var)) {
                *m += v / heads;
            }
        }
        Ok(maps)
    }
}

/// Number of rows whose arg-max matches the label.
pub fn count_correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(tape: &mut Tape, d: usize) -> AttentionParams {
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        let mut w = || tape.leaf(d, d, eye.clone());
        let (wq, wk, wv) = (w(), w(), w());
        let mut b = || tape.leaf(1, d, vec![0.0; d]);
        AttentionParams { wq, bq: b(), wk, bk: b(), wv, bv: b() }
    }

    fn attn_cfg(kind: ScoreFunctionKind, prenormalize: bool) -> AttentionConfig {
        AttentionConfig { embed_dim: 2, num_heads: 1, score_kind: kind, score_scale: ScoreScale::InvDModel, prenormalize }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        for kind in [ScoreFunctionKind::Softmax, ScoreFunctionKind::SinSoftmax, ScoreFunctionKind::SirenMax] {
            let mut tape = Tape::new();
            let p = identity_params(&mut tape, 2);
            let x = tape.leaf(2, 2, vec![0.3, -0.8, 0.3, -0.8]);
            let out = attention_forward(&mut tape, &attn_cfg(kind, false), x, 1, &p, 0).unwrap();
            let v = tape.value(out);
            assert_eq!(v[0..2], v[2..4]);
        }
    }

    #[test]
    fn uniform_softmax_scores_average_values() {
        // Zero query weights make every raw score zero.
        let mut tape = Tape::new();
        let mut p = identity_params(&mut tape, 2);
        p.wq = tape.leaf(2, 2, vec![0.0; 4]);
        let x = tape.leaf(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 4.0]);
        let out = attention_forward(&mut tape, &attn_cfg(ScoreFunctionKind::Softmax, false), x, 1, &p, 0).unwrap();
        let mean = [(1.0 - 1.0 + 3.0) / 3.0, (2.0 + 0.5 + 4.0) / 3.0];
        for row in tape.value(out).chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-15 && (row[1] - mean[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn prenormalized_scores_ignore_affine_rescaling() {
        // Raw scores x·xᵀ/2 with x = [[a], [b]] padded to width 2.
        let run = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let p = identity_params(&mut tape, 2);
            let x = tape.leaf(2, 2, vec![a, 0.0, b, 0.0]);
            attention_forward(&mut tape, &attn_cfg(ScoreFunctionKind::Softmax, true), x, 1, &p, 0).unwrap();
            tape.value(tape.score_sites()[0].var).to_vec()
        };
        let (s1, s2) = (run(1.0, 2.0), run(3.0, 6.0));
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-12);
        }
        // Each row of raw scores has two distinct values, so prenorm maps it to [-1, 1] in some order.
        let expect = crate::scorefn::scores(ScoreFunctionKind::Softmax, &[-1.0, 1.0]).unwrap().scores;
        assert!((s1[0] - expect[0]).abs() < 1e-12 && (s1[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let ok = DemoConfig::synthetic(ScoreFunctionKind::Softmax, 1, 3);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.tokens(), 16);
        let mut bad = ok;
        bad.depth = 0;
        assert!(Model::new(bad, 0).is_err());
        let mut bad = ok;
        bad.patch_size = 3;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.attention.num_heads = 3;
        assert!(bad.validate().is_err());
        assert_eq!(DemoConfig::cifar100(ScoreFunctionKind::Softmax, 1).tokens(), 64);
    }
}
