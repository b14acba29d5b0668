//! Spatial-temporal encoder with episodic memory.
//!
//! Each timestep prepends the `K` memory embeddings to the frame's patch
//! tokens, runs `L` pre-norm transformer blocks with unmasked attention over
//! the whole sequence, and hands the first `K` output rows to the next step as
//! its memory. The prediction head reads the same rows.

mod attention;
mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{self, patchify, MultiViewFrame, PatchConfig, ViewEmbedder, ViewGeometry};
use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};

pub use attention::{extract_attention, AttentionExtract, LayerAttention};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{name_matches, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub memory_tokens: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be at least 1"));
        }
        Ok(())
    }
}

/// Whether memory output is threaded into the next step (`Carry`) or every
/// step restarts from the learned initial memory (`Reset`, the memory-less
/// ablation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    #[default]
    Carry,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub patch: usize,
    pub views: Vec<ViewGeometry>,
    #[serde(default)]
    pub memory_mode: MemoryMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let cfg = PatchConfig::new(self.patch)?;
        if self.views.is_empty() {
            return Err(Error::config("model needs at least one view"));
        }
        for v in &self.views {
            cfg.grid(v.height, v.width)?;
        }
        Ok(())
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig::new(self.patch).expect("validated patch size")
    }

    /// Patch grid (rows, cols) per view.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        let cfg = self.patch_config();
        self.views
            .iter()
            .map(|v| cfg.grid(v.height, v.width).expect("validated geometry"))
            .collect()
    }

    pub fn tokens_per_view(&self) -> Vec<usize> {
        self.grids().iter().map(|(h, w)| h * w).collect()
    }

    /// Sequence length `K + sum N_m` seen by the encoder.
    pub fn sequence_len(&self) -> usize {
        self.encoder.memory_tokens + self.tokens_per_view().iter().sum::<usize>()
    }
}

/// Episodic memory carried between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub embeddings: Tensor,
    pub t: usize,
}

/// Variables of one transformer block on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub norm2: (Var, Var),
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Mean-pool, layer norm, linear map to class logits, softmax.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub norm: (Var, Var),
    pub weight: Var,
    pub bias: Var,
}

/// All model parameters registered on a tape, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub views: Vec<(Var, Var)>,
    pub memory: Var,
    pub blocks: Vec<BlockVars>,
    pub head: HeadVars,
}

/// Tape handles produced by one timestep.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub tokens_in: Var,
    pub tokens_out: Var,
    pub memory_out: Var,
    /// `1 x n_classes` probabilities.
    pub probs: Var,
    /// Attention nodes per block when recording was requested.
    pub attention: Option<Vec<Var>>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    /// Gradient is cut at memory boundaries every `W` steps; `None` is full BPTT.
    pub truncation: Option<usize>,
    pub record_attention: bool,
}

/// A prediction at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let label = argmax(&probs);
        Prediction { probs, label }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cemformer {
    config: ModelConfig,
    params: ParamStore,
}

impl Cemformer {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let d = enc.dim;
        let cfg = config.patch_config();
        let mut params = ParamStore::new();
        for (m, &g) in config.views.iter().enumerate() {
            let e = ViewEmbedder::init(&mut rng, g, cfg, d)?;
            params.push(format!("embed.view{m}.proj"), e.proj)?;
            params.push(format!("embed.view{m}.pos"), e.pos)?;
        }
        params.push(
            "memory.init",
            embed::normal_matrix(&mut rng, enc.memory_tokens, d, 0.02),
        )?;
        let hidden = d * enc.mlp_ratio;
        for l in 0..enc.layers {
            let p = format!("blocks.{l}");
            params.push(format!("{p}.norm1.gamma"), Tensor::full(&[d], 1.0))?;
            params.push(format!("{p}.norm1.beta"), Tensor::zeros(&[d]))?;
            params.push(format!("{p}.attn.qkv.weight"), embed::xavier_uniform(&mut rng, d, 3 * d))?;
            params.push(format!("{p}.attn.qkv.bias"), Tensor::zeros(&[3 * d]))?;
            params.push(format!("{p}.attn.out.weight"), embed::xavier_uniform(&mut rng, d, d))?;
            params.push(format!("{p}.attn.out.bias"), Tensor::zeros(&[d]))?;
            params.push(format!("{p}.norm2.gamma"), Tensor::full(&[d], 1.0))?;
            params.push(format!("{p}.norm2.beta"), Tensor::zeros(&[d]))?;
            params.push(format!("{p}.mlp.fc1.weight"), embed::xavier_uniform(&mut rng, d, hidden))?;
            params.push(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            params.push(format!("{p}.mlp.fc2.weight"), embed::xavier_uniform(&mut rng, hidden, d))?;
            params.push(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
        }
        params.push("head.norm.gamma", Tensor::full(&[d], 1.0))?;
        params.push("head.norm.beta", Tensor::zeros(&[d]))?;
        params.push(
            "head.linear.weight",
            embed::xavier_uniform(&mut rng, d, enc.n_classes),
        )?;
        params.push("head.linear.bias", Tensor::zeros(&[enc.n_classes]))?;
        Ok(Cemformer { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a freshly initialized layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Cemformer::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(Cemformer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn with_memory_mode(mut self, mode: MemoryMode) -> Self {
        self.config.memory_mode = mode;
        self
    }

    /// Learned initial memory `E_0^mem` at `t = 0`.
    pub fn init_memory(&self) -> MemoryState {
        MemoryState {
            embeddings: self.params.get("memory.init").expect("memory param").clone(),
            t: 0,
        }
    }

    /// Registers every parameter on `tape`; `trainable(name)` decides which
    /// ones collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(name, t)| tape.leaf(t.clone(), trainable(name)))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        let views = (0..self.config.views.len()).map(|_| (next(), next())).collect();
        let memory = next();
        let blocks = (0..self.config.encoder.layers)
            .map(|_| BlockVars {
                norm1: (next(), next()),
                qkv_w: next(),
                qkv_b: next(),
                out_w: next(),
                out_b: next(),
                norm2: (next(), next()),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let head = HeadVars {
            norm: (next(), next()),
            weight: next(),
            bias: next(),
        };
        BoundParams {
            vars,
            views,
            memory,
            blocks,
            head,
        }
    }

    /// Checks a frame's view count and geometry against the model.
    pub fn check_frame(&self, frame: &MultiViewFrame) -> Result<()> {
        let got = frame.geometry();
        if got != self.config.views {
            return Err(Error::contract(format!(
                "frame geometry {got:?} does not match model views {:?}",
                self.config.views
            )));
        }
        Ok(())
    }

    /// Patch tokens `z^0` for one frame.
    pub fn embed_frame(&self, tape: &mut Tape, bound: &BoundParams, frame: &MultiViewFrame) -> Result<Var> {
        self.check_frame(frame)?;
        let cfg = self.config.patch_config();
        let mut tokens = Vec::with_capacity(frame.views().len());
        for (image, &(proj, pos)) in frame.views().iter().zip(&bound.views) {
            let patches = tape.constant(patchify(image, cfg)?);
            tokens.push(embed::embed_view(tape, patches, proj, pos)?);
        }
        embed::concat_views(tape, &tokens)
    }

    /// One timestep: embed, prepend memory, encode, carry, predict.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        memory: Var,
        frame: &MultiViewFrame,
        record_attention: bool,
    ) -> Result<StepOutput> {
        let enc = &self.config.encoder;
        let z0 = self.embed_frame(tape, bound, frame)?;
        let tokens_in = prepend_memory(tape, memory, z0)?;
        let (tokens_out, attention) = encode_step(tape, tokens_in, &bound.blocks, enc.heads)?;
        let memory_out = carry_memory(tape, tokens_out, enc.memory_tokens)?;
        let probs = if enc.memory_tokens > 0 {
            predict(tape, memory_out, &bound.head)?
        } else {
            // Without memory tokens the head pools every output token.
            head_forward(tape, tokens_out, &bound.head)?
        };
        Ok(StepOutput {
            tokens_in,
            tokens_out,
            memory_out,
            probs,
            attention: record_attention.then_some(attention),
        })
    }

    /// Runs the recurrence over `frames`, threading memory according to the
    /// configured [`MemoryMode`].
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        frames: &[&MultiViewFrame],
        opts: &RolloutOptions,
    ) -> Result<Vec<StepOutput>> {
        if opts.truncation == Some(0) {
            return Err(Error::config("truncation window must be at least 1"));
        }
        let mut memory = bound.memory;
        let mut outputs = Vec::with_capacity(frames.len());
        for (i, frame) in frames.iter().enumerate() {
            let carried = self.config.memory_mode == MemoryMode::Carry;
            if let (Some(w), true) = (opts.truncation, i > 0 && carried) {
                if i % w == 0 {
                    memory = tape.detach(memory);
                }
            }
            let out = self
                .step(tape, bound, memory, frame, opts.record_attention)
                .map_err(|e| e.within(&format!("step {}", i + 1)))?;
            memory = match self.config.memory_mode {
                MemoryMode::Carry => out.memory_out,
                MemoryMode::Reset => bound.memory,
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Per-step predictions for a frame sequence, without gradients.
    pub fn predict_sequence(&self, frames: &[&MultiViewFrame]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let outs = self.rollout(&mut tape, &bound, frames, &RolloutOptions::default())?;
        Ok(outs
            .iter()
            .map(|o| Prediction::from_probs(tape.value(o.probs).data().to_vec()))
            .collect())
    }
}

/// `[E_t^mem ; z^0]`.
pub fn prepend_memory(tape: &mut Tape, memory: Var, z0: Var) -> Result<Var> {
    tape.concat_tokens(&[memory, z0])
}

/// `L` pre-norm blocks: `x += MHSA(LN(x)); x += MLP(LN(x))`.
///
/// Returns the encoded sequence and the attention node of each block.
pub fn encode_step(
    tape: &mut Tape,
    tokens: Var,
    blocks: &[BlockVars],
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut x = tokens;
    let mut attention = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        let run = |tape: &mut Tape| -> Result<(Var, Var)> {
            let h = tape.layer_norm(x, b.norm1.0, b.norm1.1, LN_EPS)?;
            let qkv = tape.matmul(h, b.qkv_w)?;
            let qkv = tape.add_bias(qkv, b.qkv_b)?;
            let att = tape.attention(qkv, heads)?;
            let o = tape.matmul(att, b.out_w)?;
            let o = tape.add_bias(o, b.out_b)?;
            let x1 = tape.add(x, o)?;
            let h = tape.layer_norm(x1, b.norm2.0, b.norm2.1, LN_EPS)?;
            let f = tape.matmul(h, b.fc1_w)?;
            let f = tape.add_bias(f, b.fc1_b)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, b.fc2_w)?;
            let f = tape.add_bias(f, b.fc2_b)?;
            Ok((tape.add(x1, f)?, att))
        };
        let (next, att) = run(tape).map_err(|e| e.within(&format!("block {l}")))?;
        x = next;
        attention.push(att);
    }
    Ok((x, attention))
}

/// `E_{t+1}^mem`: the first `K` rows of the encoder output.
pub fn carry_memory(tape: &mut Tape, encoded: Var, k: usize) -> Result<Var> {
    let rows = tape.value(encoded).rows();
    if rows < k {
        return Err(Error::contract(format!(
            "encoder output has {rows} rows, fewer than {k} memory tokens"
        )));
    }
    tape.slice_tokens(encoded, 0, k)
}

/// Class probabilities from the `K` memory output rows.
pub fn predict(tape: &mut Tape, memory_out: Var, head: &HeadVars) -> Result<Var> {
    if tape.value(memory_out).rows() == 0 {
        return Err(Error::contract("prediction requires at least one memory token"));
    }
    head_forward(tape, memory_out, head)
}

fn head_forward(tape: &mut Tape, rows: Var, head: &HeadVars) -> Result<Var> {
    let pooled = tape.mean_rows(rows)?;
    let normed = tape.layer_norm(pooled, head.norm.0, head.norm.1, LN_EPS)?;
    let logits = tape.matmul(normed, head.weight)?;
    let logits = tape.add_bias(logits, head.bias)?;
    tape.softmax_rows(logits)
}
