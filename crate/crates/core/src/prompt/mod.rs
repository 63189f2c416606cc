//! Soft prompts parameterized in a task's principal subspace.
//!
//! A prompt is a `T×K` matrix `P` of subspace coordinates. It reaches the
//! model as `P·W + 1·μᵀ`, where `W` (K×D) and `μ` come from the task's
//! [`SubspaceBasis`]. Only `P` is ever trained; `W` stays fixed per task.

mod store;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Result, SparcError};
use crate::linalg::{Matrix, SubspaceBasis};
use crate::model::{AdapterSet, GradRequest, SequencePass, TinyLm, TokenSequence};
use crate::optim::{clip_global_norm, minibatches, Adam};

pub use store::{PromptRecord, PromptStore, STORE_MAGIC, STORE_VERSION};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    pub id: String,
    /// T×K subspace coordinates.
    pub p: Matrix,
    pub basis_ref: String,
    pub trained_on: Vec<String>,
    pub frozen: bool,
    /// Add the basis mean on expansion. Disable only for ablations.
    pub add_mean: bool,
}

impl SoftPrompt {
    pub fn tokens(&self) -> usize {
        self.p.rows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.p.cols()
    }

    /// Exactly `T·K`.
    pub fn param_count(&self) -> usize {
        self.p.rows() * self.p.cols()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Gaussian `P` (σ = 0.02) bound to `basis`, deterministic in `seed`.
pub fn init_prompt(basis: &SubspaceBasis, tokens: usize, seed: u64) -> Result<SoftPrompt> {
    if tokens == 0 {
        return Err(SparcError::Parameter(
            "a prompt needs at least one soft token".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, PROMPT_INIT_STD).unwrap();
    let p = Matrix::from_fn(tokens, basis.rank(), |_, _| dist.sample(&mut rng));
    Ok(SoftPrompt {
        id: format!("prompt-{}-{seed}", basis.id),
        p,
        basis_ref: basis.id.clone(),
        trained_on: Vec::new(),
        frozen: false,
        add_mean: true,
    })
}

fn check_binding(prompt: &SoftPrompt, basis: &SubspaceBasis) -> Result<()> {
    if prompt.basis_ref != basis.id {
        return Err(SparcError::BasisMismatch {
            prompt: prompt.id.clone(),
            expected: prompt.basis_ref.clone(),
            actual: basis.id.clone(),
        });
    }
    ensure_dims!(
        prompt.subspace_dim() == basis.rank(),
        "prompt has K = {}, basis rank is {}",
        prompt.subspace_dim(),
        basis.rank()
    );
    Ok(())
}

/// `P·W + 1·μᵀ` (T×D).
pub fn expand(prompt: &SoftPrompt, basis: &SubspaceBasis) -> Result<Matrix> {
    check_binding(prompt, basis)?;
    let mut out = prompt.p.dot(&basis.components);
    if prompt.add_mean {
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&basis.mean) {
                *v += m;
            }
        }
    }
    Ok(out)
}

/// Chain a gradient on the expanded rows back to `P`: `G·Wᵀ`.
pub fn grad_chain_to_subspace(grad_embeds: &Matrix, basis: &SubspaceBasis) -> Result<Matrix> {
    ensure_dims!(
        grad_embeds.cols() == basis.source_dim(),
        "gradient width {} != basis dimension {}",
        grad_embeds.cols(),
        basis.source_dim()
    );
    Ok(grad_embeds.dot_t(&basis.components))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Global gradient-norm clip; ≤ 0 disables.
    pub clip: f64,
    pub seed: u64,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        PromptTrainConfig {
            lr: 1e-2,
            epochs: 8,
            batch: 8,
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptTraining {
    pub prompt: SoftPrompt,
    pub adapters: Option<AdapterSet>,
    /// Mean training loss before training and after each epoch.
    pub curve: Vec<f64>,
    /// Loss of the returned state (the best point on `curve`).
    pub final_loss: f64,
    pub steps: usize,
}

/// Prompt-only training: Adam on `P` with the base model frozen.
pub fn train_prompt(
    lm: &TinyLm,
    prompt: &SoftPrompt,
    basis: &SubspaceBasis,
    seqs: &[TokenSequence],
    cfg: &PromptTrainConfig,
) -> Result<PromptTraining> {
    train_prompt_with_adapters(lm, prompt, basis, None, seqs, cfg)
}

fn dataset_loss(
    lm: &TinyLm,
    prompt: &SoftPrompt,
    basis: &SubspaceBasis,
    adapters: Option<&AdapterSet>,
    seqs: &[TokenSequence],
) -> Result<f64> {
    let w = lm.merged_weights(adapters)?;
    let embeds = expand(prompt, basis)?;
    let parts: Vec<(f64, usize)> = seqs
        .par_iter()
        .map(|s| {
            lm.sequence_pass(&w, &embeds, s, &GradRequest::prompt_only())
                .map(|p| (p.ce_sum, p.count))
        })
        .collect::<Result<_>>()?;
    let (ce, n) = parts
        .iter()
        .fold((0.0, 0), |(c, n), (pc, pn)| (c + pc, n + pn));
    Ok(ce / n.max(1) as f64)
}

/// Train `P` jointly with optional LoRA adapters. Base weights are never
/// written. The state with the lowest full-dataset loss is returned, so the
/// final loss never exceeds the initial one.
pub fn train_prompt_with_adapters(
    lm: &TinyLm,
    prompt: &SoftPrompt,
    basis: &SubspaceBasis,
    adapters: Option<&AdapterSet>,
    seqs: &[TokenSequence],
    cfg: &PromptTrainConfig,
) -> Result<PromptTraining> {
    if prompt.frozen {
        return Err(SparcError::FrozenPrompt(prompt.id.clone()));
    }
    if !lm.is_frozen() {
        return Err(SparcError::ModelState(
            "not frozen; prompt training needs a frozen base",
        ));
    }
    if seqs.is_empty() {
        return Err(SparcError::Data("no sequences to train on".into()));
    }
    check_binding(prompt, basis)?;
    let digest_before = lm.recompute_digest();

    let mut cur = prompt.clone();
    let mut cur_adapters = adapters.cloned();
    let targets = cur_adapters
        .as_ref()
        .map(AdapterSet::targets)
        .unwrap_or_default();
    let req = GradRequest::matrices(&targets);

    let mut curve = vec![dataset_loss(lm, &cur, basis, cur_adapters.as_ref(), seqs)?];
    let mut best = (curve[0], cur.clone(), cur_adapters.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut steps = 0;

    for _ in 0..cfg.epochs {
        for idx in minibatches(seqs.len(), cfg.batch, &mut rng) {
            let w = lm.merged_weights(cur_adapters.as_ref())?;
            let embeds = expand(&cur, basis)?;
            let passes: Vec<SequencePass> = idx
                .par_iter()
                .map(|&i| lm.sequence_pass(&w, &embeds, &seqs[i], &req))
                .collect::<Result<_>>()?;
            let (_, _, d_embeds, wgrads) = crate::model::reduce_passes(passes);
            drop(w);

            let mut g_p = grad_chain_to_subspace(&d_embeds, basis)?;
            let mut g_ad = match (&cur_adapters, &wgrads) {
                (Some(set), Some(wg)) => set.chain_grads(wg)?,
                _ => Vec::new(),
            };
            {
                let mut gs: Vec<&mut [f64]> = vec![g_p.data_mut()];
                for (ga, gb) in g_ad.iter_mut() {
                    gs.push(ga.data_mut());
                    gs.push(gb.data_mut());
                }
                clip_global_norm(&mut gs, cfg.clip);
            }
            let mut gs: Vec<&[f64]> = vec![g_p.data()];
            for (ga, gb) in &g_ad {
                gs.push(ga.data());
                gs.push(gb.data());
            }
            let mut ps: Vec<&mut [f64]> = vec![cur.p.data_mut()];
            if let Some(set) = cur_adapters.as_mut() {
                for ad in set.adapters.iter_mut() {
                    ps.push(ad.a.data_mut());
                    ps.push(ad.b.data_mut());
                }
            }
            adam.step(&mut ps, &gs);
            steps += 1;
        }
        let loss = dataset_loss(lm, &cur, basis, cur_adapters.as_ref(), seqs)?;
        curve.push(loss);
        if loss < best.0 {
            best = (loss, cur.clone(), cur_adapters.clone());
        }
    }

    debug_assert_eq!(digest_before, lm.recompute_digest());
    if digest_before != lm.recompute_digest() {
        return Err(SparcError::ModelState("modified during prompt training"));
    }
    let (final_loss, prompt, adapters) = best;
    debug_assert_eq!(
        prompt.param_count(),
        prompt.tokens() * prompt.subspace_dim()
    );
    Ok(PromptTraining {
        prompt,
        adapters,
        curve,
        final_loss,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pca;

    fn basis(d: usize, k: usize) -> SubspaceBasis {
        let x = Matrix::from_fn(3 * d, d, |i, j| {
            ((i * 31 + j * 7) as f64).sin() + 0.1 * j as f64
        });
        pca(&x, k).unwrap()
    }

    fn identity_basis(d: usize) -> SubspaceBasis {
        SubspaceBasis::new(vec![0.0; d], Matrix::identity(d), vec![1.0; d], d as f64).unwrap()
    }

    #[test]
    fn init_shape_and_determinism() {
        let b = basis(6, 3);
        let p = init_prompt(&b, 4, 11).unwrap();
        assert_eq!(p.p.shape(), (4, 3));
        assert_eq!(p.param_count(), 12);
        assert_eq!(p, init_prompt(&b, 4, 11).unwrap());
        assert!(matches!(
            init_prompt(&b, 0, 1),
            Err(SparcError::Parameter(_))
        ));
    }

    #[test]
    fn zero_prompt_expands_to_mean() {
        let b = basis(5, 2);
        let mut p = init_prompt(&b, 3, 0).unwrap();
        p.p = Matrix::zeros(3, 2);
        let e = expand(&p, &b).unwrap();
        for row in e.iter_rows() {
            assert_eq!(row, &b.mean[..]);
        }
    }

    #[test]
    fn identity_basis_passes_through() {
        let b = identity_basis(4);
        let p = init_prompt(&b, 2, 5).unwrap();
        assert_eq!(expand(&p, &b).unwrap(), p.p);
        let g = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        assert_eq!(grad_chain_to_subspace(&g, &b).unwrap(), g);
        assert_eq!(
            grad_chain_to_subspace(&Matrix::zeros(2, 4), &b).unwrap(),
            Matrix::zeros(2, 4)
        );
    }

    #[test]
    fn mismatched_basis_is_rejected() {
        let a = basis(5, 2);
        let b = identity_basis(5);
        let p = init_prompt(&a, 2, 0).unwrap();
        assert!(matches!(
            expand(&p, &b),
            Err(SparcError::BasisMismatch { .. })
        ));
    }
}
