use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::hidden_states;
use super::{GradRequest, SequencePass, TinyLm, TinyLmConfig, TokenSequence, Weights};
use crate::error::{Result, SparcError};
use crate::linalg::{axpy, Matrix};
use crate::optim::{clip_global_norm, minibatches, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    pub clip: f64,
    /// Fraction of the stream (taken from the end) held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch: 8,
            window: 48,
            lr: 3e-3,
            clip: 1.0,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub heldout_loss: f64,
    pub uniform_loss: f64,
    pub train_losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of the (scaled) input token embeddings.
    MeanTokens,
    /// Mean of the final hidden states, after the last layer norm.
    #[default]
    LastHiddenMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub x: Matrix,
    pub source: String,
    pub pooling: Pooling,
    /// Documents cut to `max_seq` tokens.
    pub truncated: usize,
}

/// Sum per-sequence passes in order and divide by the total target count.
pub(crate) fn reduce_passes(passes: Vec<SequencePass>) -> (f64, usize, Matrix, Option<Weights>) {
    let count: usize = passes.iter().map(|p| p.count).sum();
    let scale = 1.0 / count.max(1) as f64;
    let mut iter = passes.into_iter();
    let first = iter.next().expect("at least one pass");
    let mut ce = first.ce_sum;
    let mut d_prompt = first.d_prompt;
    let mut grads = first.grads;
    for p in iter {
        ce += p.ce_sum;
        d_prompt.add_assign(&p.d_prompt);
        if let (Some(g), Some(pg)) = (grads.as_mut(), p.grads.as_ref()) {
            g.add_scaled(pg, 1.0);
        }
    }
    let d_prompt = d_prompt.scale(scale);
    if let Some(g) = grads.as_mut() {
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    (ce * scale, count, d_prompt, grads)
}

/// Mean next-token loss over `seqs` with no prompt.
pub(crate) fn mean_loss(
    lm: &TinyLm,
    w: &Weights,
    prompt: &Matrix,
    seqs: &[TokenSequence],
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = seqs
        .par_iter()
        .map(|s| {
            lm.sequence_pass(w, prompt, s, &GradRequest::prompt_only())
                .map(|p| (p.ce_sum, p.count))
        })
        .collect::<Result<_>>()?;
    let (ce, n) = parts
        .iter()
        .fold((0.0, 0), |(c, n), (pc, pn)| (c + pc, n + pn));
    Ok(ce / n.max(1) as f64)
}

fn windows_of(stream: &[usize], window: usize) -> Vec<TokenSequence> {
    stream
        .chunks(window)
        .filter(|c| c.len() >= 2)
        .map(|c| TokenSequence::all_targets(c.to_vec()))
        .collect()
}

fn adam_step(lm: &mut TinyLm, adam: &mut Adam, mut grads: Weights, clip: f64) -> Result<()> {
    let mut gs: Vec<&mut [f64]> = grads
        .tensors_mut()
        .into_iter()
        .map(|t| t.data_mut())
        .collect();
    clip_global_norm(&mut gs, clip);
    let gs: Vec<&[f64]> = gs.into_iter().map(|g| &*g).collect();
    let mut ps: Vec<&mut [f64]> = lm
        .weights_mut()?
        .tensors_mut()
        .into_iter()
        .map(|t| t.data_mut())
        .collect();
    adam.step(&mut ps, &gs);
    Ok(())
}

/// Train a fresh model on random windows of `corpus` and return it frozen.
pub fn pretrain_base(
    corpus: &[usize],
    config: TinyLmConfig,
    pc: &PretrainConfig,
) -> Result<(TinyLm, PretrainReport)> {
    if corpus.is_empty() {
        return Err(SparcError::Data("empty pretraining corpus".into()));
    }
    if pc.steps == 0 {
        return Err(SparcError::Parameter(
            "pretraining needs at least one step".into(),
        ));
    }
    if corpus.len() < 8 {
        return Err(SparcError::Data(
            "pretraining corpus shorter than 8 tokens".into(),
        ));
    }
    let mut lm = TinyLm::new(config)?;
    let window = pc.window.min(lm.config().max_seq).max(2);
    let held = ((corpus.len() as f64 * pc.holdout).ceil() as usize).clamp(2, corpus.len() / 2);
    let (train, heldout) = corpus.split_at(corpus.len() - held);
    let held_seqs = windows_of(heldout, window);
    let empty = Matrix::zeros(0, lm.config().d_model);
    let initial = mean_loss(&lm, lm.weights(), &empty, &held_seqs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut adam = Adam::new(pc.lr);
    let win = window.min(train.len());
    let mut train_losses = Vec::with_capacity(pc.steps);
    for _ in 0..pc.steps {
        let batch: Vec<TokenSequence> = (0..pc.batch.max(1))
            .map(|_| {
                let start = rng.random_range(0..=train.len() - win);
                TokenSequence::all_targets(train[start..start + win].to_vec())
            })
            .collect();
        let passes: Vec<SequencePass> = batch
            .par_iter()
            .map(|s| lm.sequence_pass(lm.weights(), &empty, s, &GradRequest::all_weights()))
            .collect::<Result<_>>()?;
        let (loss, _, _, grads) = reduce_passes(passes);
        train_losses.push(loss);
        adam_step(
            &mut lm,
            &mut adam,
            grads.expect("weight grads requested"),
            pc.clip,
        )?;
    }
    let heldout_loss = mean_loss(&lm, lm.weights(), &empty, &held_seqs)?;
    lm.freeze();
    let uniform_loss = (lm.config().vocab_size as f64).ln();
    log::info!(
        "pretrain: held-out loss {initial:.4} -> {heldout_loss:.4} (uniform {uniform_loss:.4})"
    );
    Ok((
        lm,
        PretrainReport {
            initial_heldout_loss: initial,
            heldout_loss,
            uniform_loss,
            train_losses,
        },
    ))
}

/// One pooled embedding per document. Documents longer than `max_seq` are
/// truncated and counted.
pub fn embed_dataset<S: AsRef<str> + Sync>(
    lm: &TinyLm,
    source: &str,
    docs: &[S],
    pooling: Pooling,
) -> Result<EmbeddingBatch> {
    if !lm.is_frozen() {
        return Err(SparcError::ModelState(
            "not frozen; embeddings need a frozen base",
        ));
    }
    if docs.is_empty() {
        return Err(SparcError::Data(format!("{source}: no documents to embed")));
    }
    let max = lm.config().max_seq;
    let d = lm.config().d_model;
    let rows: Vec<(Vec<f64>, bool)> = docs
        .par_iter()
        .map(|doc| {
            let mut toks = super::encode(doc.as_ref());
            if toks.is_empty() {
                return Err(SparcError::Data(format!("{source}: empty document")));
            }
            let cut = toks.len() > max;
            toks.truncate(max);
            let mut mean = vec![0.0; d];
            match pooling {
                Pooling::LastHiddenMean => {
                    let h = hidden_states(lm, lm.weights(), &toks);
                    for row in h.iter_rows() {
                        axpy(1.0, row, &mut mean);
                    }
                }
                Pooling::MeanTokens => {
                    let s = (d as f64).sqrt();
                    for &t in &toks {
                        axpy(s, lm.weights().tok_emb.row(t), &mut mean);
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= toks.len() as f64);
            Ok((mean, cut))
        })
        .collect::<Result<_>>()?;
    let truncated = rows.iter().filter(|(_, c)| *c).count();
    if truncated > 0 {
        log::warn!("{source}: truncated {truncated} documents to {max} tokens");
    }
    let data: Vec<f64> = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok(EmbeddingBatch {
        x: Matrix::new(docs.len(), d, data)?,
        source: source.to_string(),
        pooling,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-3,
            epochs: 4,
            batch: 8,
            clip: 1.0,
            seed: 0,
        }
    }
}

/// Update every weight of an unfrozen model on `seqs`. Returns the mean
/// training loss after each epoch.
pub fn finetune_full(
    lm: &mut TinyLm,
    seqs: &[TokenSequence],
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(SparcError::Data("no sequences to fine-tune on".into()));
    }
    if lm.is_frozen() {
        return Err(SparcError::ModelState("frozen; fine-tune a thawed clone"));
    }
    let empty = Matrix::zeros(0, lm.config().d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut curve = vec![mean_loss(lm, lm.weights(), &empty, seqs)?];
    for _ in 0..cfg.epochs {
        for idx in minibatches(seqs.len(), cfg.batch, &mut rng) {
            let passes: Vec<SequencePass> = idx
                .par_iter()
                .map(|&i| {
                    lm.sequence_pass(lm.weights(), &empty, &seqs[i], &GradRequest::all_weights())
                })
                .collect::<Result<_>>()?;
            let grads = reduce_passes(passes).3.expect("weight grads requested");
            adam_step(lm, &mut adam, grads, cfg.clip)?;
        }
        curve.push(mean_loss(lm, lm.weights(), &empty, seqs)?);
    }
    Ok(curve)
}
