//! Weight-shared decoder: one pre-norm transformer block applied `L` times
//! over a three-token sequence, with the residual stream captured after the
//! embedding and after every block application.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::SEQ_LEN;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::{kernels, AttentionVars, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Number of applications of the shared block.
    pub num_iterations: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Width 256, 4 heads, MLP 1024, 6 iterations.
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            model_dim: 256,
            num_heads: 4,
            mlp_dim: 1024,
            num_iterations: 6,
            seed,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.model_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("vocab_size, model_dim and mlp_dim must be >= 1".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_iterations < 2 {
            return Err(Error::Config(format!(
                "num_iterations {} < 2 leaves no intermediate state",
                self.num_iterations
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count; independent of `num_iterations`.
    pub fn parameter_count(&self) -> usize {
        let (v, d, m) = (self.vocab_size, self.model_dim, self.mlp_dim);
        let embeddings = v * d + SEQ_LEN * d;
        let attention = 4 * (d * d + d);
        let mlp = d * m + m + m * d + d;
        let norms = 3 * 2 * d;
        embeddings + attention + mlp + norms + d * v
    }
}

/// How a parameter tensor is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Bias,
    Matrix,
}

/// Names of the parameter tensors in storage order.
pub const PARAM_NAMES: [&str; 21] = [
    "token_embedding",
    "position_embedding",
    "block.ln1.gain",
    "block.ln1.shift",
    "block.attn.wq",
    "block.attn.bq",
    "block.attn.wk",
    "block.attn.bk",
    "block.attn.wv",
    "block.attn.bv",
    "block.attn.wo",
    "block.attn.bo",
    "block.ln2.gain",
    "block.ln2.shift",
    "block.mlp.w1",
    "block.mlp.b1",
    "block.mlp.w2",
    "block.mlp.b2",
    "final_norm.gain",
    "final_norm.shift",
    "unembedding",
];

pub fn param_kind(name: &str) -> ParamKind {
    if name.ends_with("embedding") && name != "unembedding" {
        ParamKind::Embedding
    } else if name.ends_with(".gain") || name.ends_with(".shift") {
        ParamKind::Norm
    } else if name.rsplit('.').next().is_some_and(|s| s.starts_with('b')) {
        ParamKind::Bias
    } else {
        ParamKind::Matrix
    }
}

/// The one shared block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_shift: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub block: BlockParams<T>,
    pub final_gain: Tensor<T>,
    pub final_shift: Tensor<T>,
    pub unembedding: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Gaussian(0, 0.02) for embeddings and projections, zeros for biases
    /// and norm shifts, ones for norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, streams::INIT);
        Ok(Self::init_with(config, INIT_STD, &mut rng))
    }

    /// Same layout with a caller-chosen std; used for well-conditioned
    /// gradient checks.
    pub fn init_with<R: Rng>(config: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let (v, d, m) = (config.vocab_size, config.model_dim, config.mlp_dim);
        let mut normal = |shape: Vec<usize>| Tensor::randn(shape, std, rng);
        let token_embedding = normal(vec![v, d]);
        let position_embedding = normal(vec![SEQ_LEN, d]);
        let wq = normal(vec![d, d]);
        let wk = normal(vec![d, d]);
        let wv = normal(vec![d, d]);
        let wo = normal(vec![d, d]);
        let w1 = normal(vec![d, m]);
        let w2 = normal(vec![m, d]);
        let unembedding = normal(vec![d, v]);
        let ones = || Tensor::filled(vec![d], T::one());
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        Self {
            token_embedding,
            position_embedding,
            block: BlockParams {
                ln1_gain: ones(),
                ln1_shift: zeros(d),
                wq,
                bq: zeros(d),
                wk,
                bk: zeros(d),
                wv,
                bv: zeros(d),
                wo,
                bo: zeros(d),
                ln2_gain: ones(),
                ln2_shift: zeros(d),
                w1,
                b1: zeros(m),
                w2,
                b2: zeros(d),
            },
            final_gain: ones(),
            final_shift: zeros(d),
            unembedding,
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor<T>; 21] {
        let b = &self.block;
        [
            &self.token_embedding,
            &self.position_embedding,
            &b.ln1_gain,
            &b.ln1_shift,
            &b.wq,
            &b.bq,
            &b.wk,
            &b.bk,
            &b.wv,
            &b.bv,
            &b.wo,
            &b.bo,
            &b.ln2_gain,
            &b.ln2_shift,
            &b.w1,
            &b.b1,
            &b.w2,
            &b.b2,
            &self.final_gain,
            &self.final_shift,
            &self.unembedding,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 21] {
        let b = &mut self.block;
        [
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut b.ln1_gain,
            &mut b.ln1_shift,
            &mut b.wq,
            &mut b.bq,
            &mut b.wk,
            &mut b.bk,
            &mut b.wv,
            &mut b.bv,
            &mut b.wo,
            &mut b.bo,
            &mut b.ln2_gain,
            &mut b.ln2_shift,
            &mut b.w1,
            &mut b.b1,
            &mut b.w2,
            &mut b.b2,
            &mut self.final_gain,
            &mut self.final_shift,
            &mut self.unembedding,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        let vars: Vec<Var> = self.tensors().iter().map(|t| tape.leaf((*t).clone())).collect();
        ModelVars(vars.try_into().expect("21 parameter tensors"))
    }

    /// Collects gradients for every parameter after a backward pass; unused
    /// parameters get zeros.
    pub fn grads_from(&self, tape: &mut Tape<T>, vars: &ModelVars) -> Vec<Vec<T>> {
        self.tensors()
            .iter()
            .zip(vars.0)
            .map(|(t, v)| tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect()
    }

    /// Final norm followed by the unembedding, for one residual row.
    pub fn decode_state(&self, state: &[T]) -> Result<Vec<T>> {
        let d = self.final_gain.len();
        if state.len() != d {
            return Err(Error::Shape(format!(
                "state of width {} against model width {d}",
                state.len()
            )));
        }
        let (normed, _) = kernels::layer_norm(
            state,
            self.final_gain.data(),
            self.final_shift.data(),
            d,
            T::from_f64_lossy(LAYER_NORM_EPS),
        );
        Ok(kernels::affine(
            &normed,
            self.unembedding.data(),
            None,
            1,
            d,
            self.unembedding.cols(),
        ))
    }
}

/// Tape handles for a registered [`ModelParams`], in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars(pub [Var; 21]);

impl ModelVars {
    fn attention(&self) -> AttentionVars {
        let v = &self.0;
        AttentionVars {
            wq: v[4],
            bq: v[5],
            wk: v[6],
            bk: v[7],
            wv: v[8],
            bv: v[9],
            wo: v[10],
            bo: v[11],
        }
    }
}

/// Tape outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Logits for every row, `[batch * 3, vocab]`.
    pub logits: Var,
    /// Residual stream `x_0..x_L`, each `[batch * 3, d]`.
    pub states: Vec<Var>,
}

/// Records the forward pass for `inputs` (row-major `batch × 3` token ids).
pub fn forward_tape<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    inputs: &[u32],
    iterations: usize,
) -> Result<TapeForward> {
    if inputs.len() % SEQ_LEN != 0 || inputs.is_empty() {
        return Err(Error::Shape(format!(
            "input of {} tokens is not a batch of length-{SEQ_LEN} sequences",
            inputs.len()
        )));
    }
    let v = &vars.0;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let positions: Vec<u32> = (0..inputs.len()).map(|i| (i % SEQ_LEN) as u32).collect();
    let tok = tape.embedding(v[0], inputs)?;
    let pos = tape.embedding(v[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut states = vec![x];
    let attn = vars.attention();
    for _ in 0..iterations {
        let h = tape.layer_norm(x, v[2], v[3], eps)?;
        let a = tape.causal_attention(h, &attn, SEQ_LEN, config.num_heads)?;
        let mid = tape.add(x, a)?;
        let h2 = tape.layer_norm(mid, v[12], v[13], eps)?;
        let up = tape.affine(h2, v[14], Some(v[15]))?;
        let act = tape.gelu(up);
        let down = tape.affine(act, v[16], Some(v[17]))?;
        x = tape.add(mid, down)?;
        states.push(x);
    }
    let normed = tape.layer_norm(x, v[18], v[19], eps)?;
    let logits = tape.affine(normed, v[20], None)?;
    Ok(TapeForward { logits, states })
}

/// Cross-entropy targets for a batch: only the final position is scored.
pub fn final_position_targets(targets: &[u32]) -> Vec<Option<u32>> {
    targets
        .iter()
        .flat_map(|&t| [None, None, Some(t)])
        .collect()
}

/// Mean final-position cross-entropy for a batch; returns the loss node and
/// the forward outputs.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
) -> Result<(Var, TapeForward)> {
    let fwd = forward_tape(tape, vars, config, inputs, config.num_iterations)?;
    let loss = tape.cross_entropy(fwd.logits, &final_position_targets(targets))?;
    Ok((loss, fwd))
}

/// Per-iteration residual-stream snapshots for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<T> {
    /// `states[i]` is `x_i` as `3 × d`, for `i` in `0..=L`.
    pub states: Vec<Vec<T>>,
    pub model_dim: usize,
}

impl<T: Real> HiddenTrace<T> {
    pub fn num_snapshots(&self) -> usize {
        self.states.len()
    }

    /// Residual vector at `iteration` and 0-based `position`.
    pub fn state(&self, iteration: usize, position: usize) -> &[T] {
        &self.states[iteration][position * self.model_dim..(position + 1) * self.model_dim]
    }
}

/// Batched inference result.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// Final-position logits, `batch × vocab`.
    pub logits: Vec<T>,
    pub traces: Vec<HiddenTrace<T>>,
    pub vocab_size: usize,
}

impl<T: Real> BatchOutput<T> {
    pub fn logits_of(&self, i: usize) -> &[T] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }
}

/// Forward pass over a batch of sequences, returning final-position logits
/// and full hidden traces.
pub fn forward_batch<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    inputs: &[u32],
    iterations: usize,
) -> Result<BatchOutput<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_tape(&mut tape, &vars, config, inputs, iterations)?;
    let d = config.model_dim;
    let vsz = tape.value(out.logits).cols();
    let batch = inputs.len() / SEQ_LEN;
    let all = tape.value(out.logits).data();
    let mut logits = Vec::with_capacity(batch * vsz);
    for b in 0..batch {
        let row = b * SEQ_LEN + SEQ_LEN - 1;
        logits.extend_from_slice(&all[row * vsz..(row + 1) * vsz]);
    }
    let traces = (0..batch)
        .map(|b| HiddenTrace {
            states: out
                .states
                .iter()
                .map(|&s| tape.value(s).data()[b * SEQ_LEN * d..(b + 1) * SEQ_LEN * d].to_vec())
                .collect(),
            model_dim: d,
        })
        .collect();
    Ok(BatchOutput {
        logits,
        traces,
        vocab_size: vsz,
    })
}

/// Single-sequence forward pass.
pub fn forward_with_trace<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &[u32],
    iterations: usize,
) -> Result<(Vec<T>, HiddenTrace<T>)> {
    if input.len() != SEQ_LEN {
        return Err(Error::Shape(format!(
            "input has {} tokens, expected {SEQ_LEN}",
            input.len()
        )));
    }
    let mut out = forward_batch(params, config, input, iterations)?;
    let trace = out.traces.pop().expect("one trace");
    Ok((out.logits, trace))
}

/// Argmax over entity tokens only (ids `0..num_entities`); ties go to the
/// lower id.
pub fn argmax_entity<T: Real>(logits: &[T], num_entities: usize) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().take(num_entities).skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn predict_answer<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &[u32],
    iterations: usize,
    num_entities: usize,
) -> Result<u32> {
    let (logits, _) = forward_with_trace(params, config, input, iterations)?;
    Ok(argmax_entity(&logits, num_entities))
}

/// Predicted entity token for every sequence in `inputs`, in chunks of
/// `chunk` sequences.
pub fn predict_batch<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    inputs: &[u32],
    num_entities: usize,
    chunk: usize,
) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(inputs.len() / SEQ_LEN);
    for part in inputs.chunks(chunk.max(1) * SEQ_LEN) {
        let out = forward_batch(params, config, part, config.num_iterations)?;
        for i in 0..part.len() / SEQ_LEN {
            preds.push(argmax_entity(out.logits_of(i), num_entities));
        }
    }
    Ok(preds)
}
