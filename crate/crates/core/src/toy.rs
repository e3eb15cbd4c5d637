//! A tiny seeded LLaMA-style decoder with operation-level masking.
//!
//! Each layer takes three token index sets derived from the policy: tokens
//! contributing keys/values (MHA-out), tokens receiving an attention update
//! (MHA-in) and tokens passed through the MLP. Attention is causal over the
//! retained keys only, with the softmax renormalised over that subset.
//! Weights are drawn from a ChaCha stream keyed by the seed; nothing
//! is trained.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{CallCounter, EvalError, Evaluator, Score};
use crate::model::{DecoderConfig, DecoderShape, ModuleKind, Operation, Policy, TokenLayout};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("sequence has {got} tokens, layout expects {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: u32 },
    #[error("layer {layer}: token {token} has no retained key to attend to")]
    AttentionDegenerate { layer: u16, token: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("vocabulary must be non-empty")]
    EmptyVocab,
    #[error("zeroed MLP layer {0} is out of range")]
    BadZeroLayer(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMetric {
    /// Fraction of samples whose last-position argmax equals the target.
    Accuracy,
    /// Mean log-probability of the target at the last position.
    MeanLogLikelihood,
}

/// Smallest per-sample log-likelihood; also the score of a degenerate sample.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -708.0;

impl ToyMetric {
    pub fn floor(self) -> f64 {
        match self {
            ToyMetric::Accuracy => 0.0,
            ToyMetric::MeanLogLikelihood => LOG_LIKELIHOOD_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToySample {
    pub tokens: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoderSpec {
    pub shape: DecoderShape,
    pub layout: TokenLayout,
    pub seed: u64,
    pub vocab: u32,
    pub eval_set: Vec<ToySample>,
    pub metric: ToyMetric,
    /// Layers whose MLP down-projection is all zeros, making the MLP inert.
    pub zero_mlp_layers: Vec<u16>,
}

impl ToyDecoderSpec {
    /// A spec whose eval targets are the unpruned model's own predictions,
    /// so the baseline accuracy is exactly 1.
    pub fn self_labelled(
        shape: DecoderShape,
        layout: TokenLayout,
        seed: u64,
        vocab: u32,
        samples: usize,
        metric: ToyMetric,
        zero_mlp_layers: Vec<u16>,
    ) -> Result<Self, ToyError> {
        let mut spec = ToyDecoderSpec {
            shape,
            layout,
            seed,
            vocab,
            eval_set: Vec::new(),
            metric,
            zero_mlp_layers,
        };
        let model = ToyDecoder::new(spec.clone())?;
        let n = spec.layout.total_tokens() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_da7a);
        for _ in 0..samples {
            let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            let logits = model.vanilla_forward(&tokens)?;
            spec.eval_set.push(ToySample {
                tokens,
                target: argmax(&logits) as u32,
            });
        }
        Ok(spec)
    }
}

/// Row-major `rows × cols` matrix; a row vector multiplies from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let scale = 1.0 / libm::sqrt(rows as f64);
        let data = (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale * 1.7)
            .collect();
        Matrix { rows, cols, data }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · W`, accumulating over input rows in ascending order.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub head: Matrix,
}

/// Token index sets (ascending) taking part in each module of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerMask {
    pub out: Vec<usize>,
    pub inp: Vec<usize>,
    pub mlp: Vec<usize>,
}

impl LayerMask {
    pub fn full(n: usize) -> Self {
        let all: Vec<usize> = (0..n).collect();
        LayerMask {
            out: all.clone(),
            inp: all.clone(),
            mlp: all,
        }
    }

    /// Index sets for `layer` under `policy`: a token belongs to a module's
    /// set unless its group's operation for that module is pruned.
    pub fn from_policy(layout: &TokenLayout, layer: u16, policy: &Policy) -> Self {
        let mut mask = LayerMask::default();
        for g in layout.ids() {
            let range = layout.token_range(g);
            for module in ModuleKind::ALL {
                if policy.contains(&Operation::new(g, layer, module)) {
                    continue;
                }
                let set = match module {
                    ModuleKind::MhaOut => &mut mask.out,
                    ModuleKind::MhaIn => &mut mask.inp,
                    ModuleKind::Mlp => &mut mask.mlp,
                };
                set.extend(range.clone());
            }
        }
        mask
    }
}

pub type Hidden = Vec<Vec<f64>>;

pub fn rms_norm(x: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / libm::sqrt(ss / x.len() as f64 + 1e-6);
    x.iter().map(|v| v * inv).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += libm::exp(l - max);
    }
    logits[idx] - max - libm::log(sum)
}

/// The seeded decoder; also an [`Evaluator`] over its eval set.
#[derive(Debug)]
pub struct ToyDecoder {
    spec: ToyDecoderSpec,
    weights: ToyWeights,
    calls: CallCounter,
}

impl ToyDecoder {
    pub fn new(spec: ToyDecoderSpec) -> Result<Self, ToyError> {
        if spec.vocab == 0 {
            return Err(ToyError::EmptyVocab);
        }
        if let Some(&l) = spec
            .zero_mlp_layers
            .iter()
            .find(|&&l| l == 0 || l > spec.shape.layers)
        {
            return Err(ToyError::BadZeroLayer(l));
        }
        let s = &spec.shape;
        let (h, d, m) = (s.hidden as usize, s.kv_dim as usize, s.mlp_dim as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let embed = Matrix::random(&mut rng, spec.vocab as usize, h);
        let layers = (1..=s.layers)
            .map(|l| {
                let wq = Matrix::random(&mut rng, h, d);
                let wk = Matrix::random(&mut rng, h, d);
                let wv = Matrix::random(&mut rng, h, d);
                let wo = Matrix::random(&mut rng, d, h);
                let w_gate = Matrix::random(&mut rng, h, m);
                let w_up = Matrix::random(&mut rng, h, m);
                let mut w_down = Matrix::random(&mut rng, m, h);
                if spec.zero_mlp_layers.contains(&l) {
                    w_down = Matrix::zeros(m, h);
                }
                LayerWeights {
                    wq,
                    wk,
                    wv,
                    wo,
                    w_gate,
                    w_up,
                    w_down,
                }
            })
            .collect();
        let head = Matrix::random(&mut rng, h, spec.vocab as usize);
        Ok(ToyDecoder {
            spec,
            weights: ToyWeights { embed, layers, head },
            calls: CallCounter::new(),
        })
    }

    pub fn spec(&self) -> &ToyDecoderSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn config(&self) -> DecoderConfig {
        DecoderConfig::new(self.spec.shape, self.spec.layout.clone())
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Hidden, ToyError> {
        tokens
            .iter()
            .map(|&t| {
                if t >= self.spec.vocab {
                    Err(ToyError::TokenOutOfVocab {
                        token: t,
                        vocab: self.spec.vocab,
                    })
                } else {
                    Ok(self.weights.embed.row(t as usize).to_vec())
                }
            })
            .collect()
    }

    fn check_len(&self, tokens: &[u32]) -> Result<(), ToyError> {
        let expected = self.spec.layout.total_tokens() as usize;
        if tokens.len() != expected {
            return Err(ToyError::SequenceLength {
                expected,
                got: tokens.len(),
            });
        }
        Ok(())
    }

    /// One masked decoder layer applied in place. Row indices in `mask` refer
    /// to rows of `hidden`; causality follows row order.
    pub fn apply_layer(&self, hidden: &mut Hidden, layer: u16, mask: &LayerMask) -> Result<(), ToyError> {
        let w = &self.weights.layers[layer as usize - 1];
        let scale = 1.0 / libm::sqrt(self.spec.shape.kv_dim as f64);

        let mut keys = Vec::with_capacity(mask.out.len());
        let mut values = Vec::with_capacity(mask.out.len());
        for &j in &mask.out {
            let x = rms_norm(&hidden[j]);
            keys.push(w.wk.left_mul(&x));
            values.push(w.wv.left_mul(&x));
        }

        let mut updates = Vec::with_capacity(mask.inp.len());
        for &t in &mask.inp {
            let visible = mask.out.partition_point(|&j| j <= t);
            if visible == 0 {
                return Err(ToyError::AttentionDegenerate { layer, token: t });
            }
            let q = w.wq.left_mul(&rms_norm(&hidden[t]));
            let scores: Vec<f64> = keys[..visible].iter().map(|k| dot(&q, k) * scale).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
            let mut denom = 0.0;
            for e in &exps {
                denom += e;
            }
            let mut ctx = vec![0.0; self.spec.shape.kv_dim as usize];
            for (e, v) in exps.iter().zip(&values) {
                let a = e / denom;
                for (c, x) in ctx.iter_mut().zip(v) {
                    *c += a * x;
                }
            }
            updates.push(w.wo.left_mul(&ctx));
        }
        for (&t, o) in mask.inp.iter().zip(updates) {
            for (hv, ov) in hidden[t].iter_mut().zip(o) {
                *hv += ov;
            }
        }

        for &t in &mask.mlp {
            let x = rms_norm(&hidden[t]);
            let gate = w.w_gate.left_mul(&x);
            let up = w.w_up.left_mul(&x);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let out = w.w_down.left_mul(&act);
            for (hv, ov) in hidden[t].iter_mut().zip(out) {
                *hv += ov;
            }
        }
        Ok(())
    }

    pub fn logits(&self, hidden_row: &[f64]) -> Vec<f64> {
        self.weights.head.left_mul(&rms_norm(hidden_row))
    }

    /// Hidden states after all layers under `policy`.
    pub fn forward_hidden(&self, tokens: &[u32], policy: &Policy) -> Result<Hidden, ToyError> {
        self.check_len(tokens)?;
        let mut hidden = self.embed(tokens)?;
        for layer in 1..=self.spec.shape.layers {
            let mask = LayerMask::from_policy(&self.spec.layout, layer, policy);
            self.apply_layer(&mut hidden, layer, &mask)?;
        }
        Ok(hidden)
    }

    /// Last-position logits under `policy`.
    pub fn forward(&self, tokens: &[u32], policy: &Policy) -> Result<Vec<f64>, ToyError> {
        let hidden = self.forward_hidden(tokens, policy)?;
        Ok(self.logits(hidden.last().expect("layout has tokens")))
    }

    /// Unmasked reference forward: every token in every module, written
    /// without index sets.
    pub fn vanilla_hidden(&self, tokens: &[u32]) -> Result<Hidden, ToyError> {
        self.check_len(tokens)?;
        let mut hidden = self.embed(tokens)?;
        let n = hidden.len();
        let scale = 1.0 / libm::sqrt(self.spec.shape.kv_dim as f64);
        for w in &self.weights.layers {
            let normed: Vec<Vec<f64>> = hidden.iter().map(|x| rms_norm(x)).collect();
            let keys: Vec<Vec<f64>> = normed.iter().map(|x| w.wk.left_mul(x)).collect();
            let values: Vec<Vec<f64>> = normed.iter().map(|x| w.wv.left_mul(x)).collect();
            let mut outs = Vec::with_capacity(n);
            for t in 0..n {
                let q = w.wq.left_mul(&normed[t]);
                let scores: Vec<f64> = (0..=t).map(|j| dot(&q, &keys[j]) * scale).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
                let mut denom = 0.0;
                for e in &exps {
                    denom += e;
                }
                let mut ctx = vec![0.0; self.spec.shape.kv_dim as usize];
                for j in 0..=t {
                    let a = exps[j] / denom;
                    for (c, x) in ctx.iter_mut().zip(&values[j]) {
                        *c += a * x;
                    }
                }
                outs.push(w.wo.left_mul(&ctx));
            }
            for (row, o) in hidden.iter_mut().zip(outs) {
                for (hv, ov) in row.iter_mut().zip(o) {
                    *hv += ov;
                }
            }
            for row in hidden.iter_mut() {
                let x = rms_norm(row);
                let gate = w.w_gate.left_mul(&x);
                let up = w.w_up.left_mul(&x);
                let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
                let out = w.w_down.left_mul(&act);
                for (hv, ov) in row.iter_mut().zip(out) {
                    *hv += ov;
                }
            }
        }
        Ok(hidden)
    }

    pub fn vanilla_forward(&self, tokens: &[u32]) -> Result<Vec<f64>, ToyError> {
        let hidden = self.vanilla_hidden(tokens)?;
        Ok(self.logits(hidden.last().expect("layout has tokens")))
    }

    fn sample_score(&self, sample: &ToySample, policy: &Policy) -> Result<f64, ToyError> {
        let logits = match self.forward(&sample.tokens, policy) {
            Ok(l) => l,
            Err(ToyError::AttentionDegenerate { .. }) => return Ok(self.spec.metric.floor()),
            Err(e) => return Err(e),
        };
        if sample.target >= self.spec.vocab {
            return Err(ToyError::TokenOutOfVocab {
                token: sample.target,
                vocab: self.spec.vocab,
            });
        }
        Ok(match self.spec.metric {
            ToyMetric::Accuracy => (argmax(&logits) == sample.target as usize) as u8 as f64,
            ToyMetric::MeanLogLikelihood => {
                log_softmax_at(&logits, sample.target as usize).max(LOG_LIKELIHOOD_FLOOR)
            }
        })
    }

    /// Metric averaged over the eval set.
    pub fn score(&self, policy: &Policy) -> Result<Score, ToyError> {
        if self.spec.eval_set.is_empty() {
            return Err(ToyError::EmptyEvalSet);
        }
        let mut total = 0.0;
        for sample in &self.spec.eval_set {
            total += self.sample_score(sample, policy)?;
        }
        Ok(total / self.spec.eval_set.len() as f64)
    }
}

impl Evaluator for ToyDecoder {
    fn evaluate(&self, policy: &Policy) -> Result<Score, EvalError> {
        self.calls.bump();
        self.score(policy)
            .map_err(|e| EvalError::Failed(alloc::format!("{e}")))
    }

    fn call_count(&self) -> u64 {
        self.calls.get()
    }

    fn concurrency_safe(&self) -> bool {
        true
    }
}
