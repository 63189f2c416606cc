use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{TinyLm, Weights};
use crate::error::{Result, SparcError};
use crate::linalg::Matrix;
use crate::prompt::SoftPrompt;

/// Query and value projections of every layer.
pub const DEFAULT_LORA_TARGETS: [&str; 2] = ["attn.wq", "attn.wv"];

const LORA_INIT_STD: f64 = 0.01;

/// Low-rank additive delta `(α/r)·A·B` on one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// d×r
    pub a: Matrix,
    /// r×d′
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn delta(&self) -> Matrix {
        self.a.dot(&self.b).scale(self.scale())
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

/// Adapters kept apart from the base weights; the base model never sees them
/// except through [`TinyLm::merged_weights`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn targets(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.target.clone()).collect()
    }

    pub(crate) fn apply_to(&self, w: &mut Weights) -> Result<()> {
        for ad in &self.adapters {
            let base = w
                .get_mut(&ad.target)
                .ok_or_else(|| SparcError::UnknownTarget(ad.target.clone()))?;
            if base.shape() != (ad.a.rows(), ad.b.cols()) {
                return Err(SparcError::Dimension(format!(
                    "adapter on {} has shape {}x{}, weight is {}x{}",
                    ad.target,
                    ad.a.rows(),
                    ad.b.cols(),
                    base.rows(),
                    base.cols()
                )));
            }
            base.add_assign(&ad.delta());
        }
        Ok(())
    }

    /// Chain weight-space gradients to `(dA, dB)` per adapter:
    /// `dA = s·dW·Bᵀ`, `dB = s·Aᵀ·dW`.
    pub fn chain_grads(&self, weight_grads: &Weights) -> Result<Vec<(Matrix, Matrix)>> {
        self.adapters
            .iter()
            .map(|ad| {
                let dw = weight_grads
                    .get(&ad.target)
                    .ok_or_else(|| SparcError::UnknownTarget(ad.target.clone()))?;
                let s = ad.scale();
                Ok((dw.dot_t(&ad.b).scale(s), ad.a.t_dot(dw).scale(s)))
            })
            .collect()
    }
}

fn resolve_targets(lm: &TinyLm, targets: &[String]) -> Result<Vec<String>> {
    let names = lm.weights().names();
    let mut out = Vec::new();
    for t in targets {
        let matched: Vec<&String> = if names.contains(t) {
            names.iter().filter(|n| *n == t).collect()
        } else {
            names
                .iter()
                .filter(|n| n.starts_with("layers.") && n.ends_with(&format!(".{t}")))
                .collect()
        };
        if matched.is_empty() {
            return Err(SparcError::UnknownTarget(t.clone()));
        }
        for n in matched {
            if lm.weights().get(n).is_some_and(|m| m.rows() == 1) {
                return Err(SparcError::UnknownTarget(format!(
                    "{n} is a vector, not a matrix"
                )));
            }
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
    }
    Ok(out)
}

/// Create adapters for `targets` (full tensor names, or a per-layer suffix such
/// as `attn.wq` meaning every layer). `A` is Gaussian with σ = 0.01 and `B` is
/// zero, so the initial delta vanishes.
pub fn attach_lora<S: AsRef<str>>(
    lm: &TinyLm,
    targets: &[S],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(SparcError::Parameter("LoRA rank must be at least 1".into()));
    }
    let targets: Vec<String> = targets.iter().map(|s| s.as_ref().to_string()).collect();
    let resolved = resolve_targets(lm, &targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, LORA_INIT_STD).unwrap();
    let adapters = resolved
        .into_iter()
        .map(|name| {
            let (d, d_out) = lm.weights().get(&name).unwrap().shape();
            LoraAdapter {
                a: Matrix::from_fn(d, rank, |_, _| dist.sample(&mut rng)),
                b: Matrix::zeros(rank, d_out),
                target: name,
                alpha,
            }
        })
        .collect();
    Ok(AdapterSet { adapters })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Trainable parameters (`T·K` plus adapter parameters) against the base
/// model's total.
pub fn count_trainable(
    prompt: Option<&SoftPrompt>,
    adapters: Option<&AdapterSet>,
    lm: &TinyLm,
) -> ParamCount {
    let trainable =
        prompt.map_or(0, SoftPrompt::param_count) + adapters.map_or(0, AdapterSet::param_count);
    let total = lm.param_count();
    ParamCount {
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode, TinyLmConfig};

    fn lm() -> TinyLm {
        TinyLm::new(TinyLmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq: 32,
            ..TinyLmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_init_forward_is_exact() {
        let lm = lm();
        let toks = encode("zero init");
        let base = lm.forward(&toks).unwrap();
        let set = attach_lora(&lm, &DEFAULT_LORA_TARGETS, 4, 8.0, 1).unwrap();
        assert_eq!(set.adapters.len(), 4);
        let cond = crate::model::Conditioning {
            prompt: None,
            adapters: Some(&set),
        };
        assert_eq!(
            lm.forward_conditioned(cond, &toks).unwrap().data(),
            base.data()
        );
    }

    #[test]
    fn unknown_and_vector_targets() {
        let lm = lm();
        assert!(matches!(
            attach_lora(&lm, &["attn.wz"], 4, 8.0, 0),
            Err(SparcError::UnknownTarget(_))
        ));
        assert!(attach_lora(&lm, &["layers.0.ln1.gain"], 4, 8.0, 0).is_err());
        assert!(attach_lora(&lm, &["attn.wq"], 0, 8.0, 0).is_err());
    }

    #[test]
    fn param_arithmetic() {
        let lm = TinyLm::new(TinyLmConfig::default()).unwrap();
        let set = attach_lora(&lm, &["layers.0.attn.wq"], 4, 8.0, 0).unwrap();
        assert_eq!(set.param_count(), 512);
        let c = count_trainable(None, Some(&set), &lm);
        assert_eq!(c.trainable, 512);
        assert_eq!(count_trainable(None, None, &lm).trainable, 0);
    }

    #[test]
    fn base_digest_untouched() {
        let lm = lm();
        let before = lm.recompute_digest();
        let mut set = attach_lora(&lm, &["attn.wv"], 2, 4.0, 0).unwrap();
        set.adapters[0].b.data_mut()[0] = 0.5;
        let _ = lm.merged_weights(Some(&set)).unwrap();
        assert_eq!(before, lm.recompute_digest());
    }
}
