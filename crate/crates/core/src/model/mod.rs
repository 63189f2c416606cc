//! A small byte-level decoder-only transformer.
//!
//! The model is pre-LN with fixed sinusoidal positions and an output head tied
//! to the token embedding. Gradients are hand-derived; the backward pass
//! returns the gradient with respect to the input rows (which is what prompt
//! tuning needs) and, on request, with respect to any weight matrix.

mod checkpoint;
mod forward;
mod lora;
mod train;

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparcError};
use crate::io::Crc64;
use crate::linalg::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{GradRequest, SequencePass};
pub use lora::{
    attach_lora, count_trainable, AdapterSet, LoraAdapter, ParamCount, DEFAULT_LORA_TARGETS,
};
pub(crate) use train::reduce_passes;
pub use train::{
    embed_dataset, finetune_full, pretrain_base, EmbeddingBatch, FinetuneConfig, Pooling,
    PretrainConfig, PretrainReport,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SparcError::Parameter(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SparcError::Parameter(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > 256 {
            return Err(SparcError::Parameter(
                "the byte tokenizer supports at most 256 symbols".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one transformer block. Vectors are stored as 1×n matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const LAYER_TENSORS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl LayerWeights {
    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// The full named tensor set.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub tok_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
}

impl Weights {
    fn init(config: &TinyLmConfig) -> Weights {
        let d = config.d_model;
        let f = config.d_ff;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let depth_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let tok_emb = gauss(config.vocab_size, d, inv_sqrt_d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Matrix::from_fn(1, d, |_, _| 1.0),
                ln1_bias: Matrix::zeros(1, d),
                wq: gauss(d, d, inv_sqrt_d),
                wk: gauss(d, d, inv_sqrt_d),
                wv: gauss(d, d, inv_sqrt_d),
                wo: gauss(d, d, inv_sqrt_d * depth_scale),
                ln2_gain: Matrix::from_fn(1, d, |_, _| 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w1: gauss(d, f, inv_sqrt_d),
                b1: Matrix::zeros(1, f),
                w2: gauss(f, d, depth_scale / (f as f64).sqrt()),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        Weights {
            tok_emb,
            layers,
            lnf_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            lnf_bias: Matrix::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Weights {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Tensor names in canonical (serialization and digest) order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string()];
        for l in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{l}.{t}")));
        }
        names.push("ln_f.gain".into());
        names.push("ln_f.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        let idx = self.names().iter().position(|n| n == name)?;
        Some(self.tensors()[idx])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let idx = self.names().iter().position(|n| n == name)?;
        Some(self.tensors_mut().swap_remove(idx))
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Weights, s: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }
}

/// The frozen base language model.
#[derive(Clone, Debug)]
pub struct TinyLm {
    config: TinyLmConfig,
    weights: Weights,
    frozen: bool,
    digest: u64,
    positions: Matrix,
}

impl TinyLm {
    /// Randomly initialized, unfrozen model.
    pub fn new(config: TinyLmConfig) -> Result<TinyLm> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self::from_parts(config, weights, false))
    }

    pub(crate) fn from_parts(config: TinyLmConfig, weights: Weights, frozen: bool) -> TinyLm {
        let positions = sinusoidal_positions(config.max_seq, config.d_model);
        let digest = compute_digest(&config, &weights);
        TinyLm {
            config,
            weights,
            frozen,
            digest,
            positions,
        }
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Mutable access for training; refused once the model is frozen.
    pub fn weights_mut(&mut self) -> Result<&mut Weights> {
        if self.frozen {
            return Err(SparcError::ModelState("frozen"));
        }
        Ok(&mut self.weights)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.digest = compute_digest(&self.config, &self.weights);
        self.frozen = true;
    }

    /// Unfrozen copy, used as the starting point of full fine-tuning.
    pub fn thawed_clone(&self) -> TinyLm {
        let mut out = self.clone();
        out.frozen = false;
        out
    }

    /// Content hash of config and weights, cached at freeze time.
    pub fn weight_digest(&self) -> u64 {
        if self.frozen {
            self.digest
        } else {
            compute_digest(&self.config, &self.weights)
        }
    }

    /// Recompute the digest from the current weights, ignoring the cache.
    pub fn recompute_digest(&self) -> u64 {
        compute_digest(&self.config, &self.weights)
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub(crate) fn positions(&self) -> &Matrix {
        &self.positions
    }

    /// Weights with adapter deltas merged in; borrowed when there are none.
    pub fn merged_weights(&self, adapters: Option<&AdapterSet>) -> Result<Cow<'_, Weights>> {
        match adapters {
            Some(set) if !set.is_empty() => {
                let mut w = self.weights.clone();
                set.apply_to(&mut w)?;
                Ok(Cow::Owned(w))
            }
            _ => Ok(Cow::Borrowed(&self.weights)),
        }
    }

    /// Logits for a plain token sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        self.forward_with_prompt(&Matrix::zeros(0, self.config.d_model), tokens)
    }

    /// Logits with `prompt_embeds` (T×D) prepended at positions `0..T`.
    pub fn forward_with_prompt(&self, prompt_embeds: &Matrix, tokens: &[usize]) -> Result<Matrix> {
        self.forward_conditioned(Conditioning::prompt(prompt_embeds), tokens)
    }

    pub fn forward_conditioned(&self, cond: Conditioning<'_>, tokens: &[usize]) -> Result<Matrix> {
        let w = self.merged_weights(cond.adapters)?;
        let empty = Matrix::zeros(0, self.config.d_model);
        let prompt = cond.prompt.unwrap_or(&empty);
        self.check_inputs(prompt, tokens)?;
        Ok(forward::forward(self, &w, prompt, tokens).0)
    }

    /// Logits under explicit (typically merged) weights.
    pub(crate) fn logits_with(
        &self,
        weights: &Weights,
        prompt: &Matrix,
        tokens: &[usize],
    ) -> Result<Matrix> {
        self.check_inputs(prompt, tokens)?;
        Ok(forward::forward(self, weights, prompt, tokens).0)
    }

    /// Mean next-token cross-entropy over unmasked targets and its gradient
    /// with respect to the prompt rows.
    pub fn loss_and_prompt_grad(
        &self,
        prompt_embeds: &Matrix,
        seq: &TokenSequence,
    ) -> Result<(f64, Matrix)> {
        let pass = self.sequence_pass(
            &self.weights,
            prompt_embeds,
            seq,
            &GradRequest::prompt_only(),
        )?;
        let scale = 1.0 / pass.count as f64;
        Ok((pass.ce_sum * scale, pass.d_prompt.scale(scale)))
    }

    /// Summed cross-entropy over `seq`'s targets plus the requested gradients
    /// of that sum. `weights` is normally `merged_weights(..)`.
    pub fn sequence_pass(
        &self,
        weights: &Weights,
        prompt_embeds: &Matrix,
        seq: &TokenSequence,
        req: &GradRequest,
    ) -> Result<SequencePass> {
        self.check_inputs(prompt_embeds, &seq.tokens)?;
        if seq.target_count() == 0 {
            return Err(SparcError::Data("sequence has no target positions".into()));
        }
        Ok(forward::sequence_pass(
            self,
            weights,
            prompt_embeds,
            seq,
            req,
        ))
    }

    fn check_inputs(&self, prompt: &Matrix, tokens: &[usize]) -> Result<()> {
        if prompt.cols() != self.config.d_model {
            return Err(SparcError::Dimension(format!(
                "prompt width {} != d_model {}",
                prompt.cols(),
                self.config.d_model
            )));
        }
        let len = prompt.rows() + tokens.len();
        if len > self.config.max_seq {
            return Err(SparcError::SequenceOverflow {
                len,
                max: self.config.max_seq,
            });
        }
        if len == 0 {
            return Err(SparcError::Dimension("empty input".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(SparcError::Validation(format!(
                "token {t} outside vocabulary"
            )));
        }
        Ok(())
    }
}

/// Optional prompt rows and adapters applied on top of the base model.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    pub prompt: Option<&'a Matrix>,
    pub adapters: Option<&'a AdapterSet>,
}

impl<'a> Conditioning<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn prompt(p: &'a Matrix) -> Self {
        Conditioning {
            prompt: Some(p),
            adapters: None,
        }
    }
}

/// Token ids with a flag per position marking it as a prediction target.
/// Position 0 is never predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub target_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, target_mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != target_mask.len() {
            return Err(SparcError::Dimension(format!(
                "{} tokens but {} mask entries",
                tokens.len(),
                target_mask.len()
            )));
        }
        Ok(TokenSequence {
            tokens,
            target_mask,
        })
    }

    /// Every position after the first is a target.
    pub fn all_targets(tokens: Vec<usize>) -> Self {
        let mask = vec![true; tokens.len()];
        TokenSequence {
            tokens,
            target_mask: mask,
        }
    }

    pub fn target_count(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Byte-level tokenizer.
pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn sinusoidal_positions(max_seq: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_seq, d, |pos, i| {
        let pair = (i / 2) as f64;
        let freq = (10000f64).powf(-2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn compute_digest(config: &TinyLmConfig, weights: &Weights) -> u64 {
    let mut h = Crc64::new();
    for v in [
        config.vocab_size,
        config.d_model,
        config.n_layers,
        config.n_heads,
        config.d_ff,
        config.max_seq,
    ] {
        h.update(&(v as u64).to_le_bytes());
    }
    h.update(&config.seed.to_le_bytes());
    for (name, t) in weights.names().iter().zip(weights.tensors()) {
        h.update(name.as_bytes());
        h.update_f64s(t.data());
    }
    h.finish()
}
