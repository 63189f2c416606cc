//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparc_core::data::{generate, pretraining_corpus, DomainSpec, Grammar};
use sparc_core::linalg::{orthonormalize, Matrix, SubspaceBasis};
use sparc_core::model::{pretrain_base, PretrainConfig};
use sparc_core::prompt::{init_prompt, PromptRecord, PromptStore};
use sparc_core::{Dataset, RunConfig, TinyLm, TinyLmConfig};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Uniformly random orthogonal `d×d` matrix (rows orthonormal).
pub fn random_rotation(d: usize, seed: u64) -> Matrix {
    orthonormalize(&gaussian(d, d, seed)).unwrap()
}

/// A basis with the given orthonormal rows, zero mean and flat spectrum.
pub fn basis_from_rows(rows: Matrix) -> SubspaceBasis {
    let k = rows.rows();
    let d = rows.cols();
    SubspaceBasis::new(vec![0.0; d], rows, vec![1.0; k], k as f64).unwrap()
}

pub fn store_of(bases: &[SubspaceBasis]) -> PromptStore {
    let mut store = PromptStore::new();
    for (i, b) in bases.iter().enumerate() {
        store
            .insert(PromptRecord {
                task_id: format!("task{i}"),
                basis: b.clone(),
                prompt: init_prompt(b, 1, i as u64).unwrap(),
                adapters: None,
            })
            .unwrap();
    }
    store
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d / (na * nb)).abs()
}

/// Largest |cos| between any row of `a` and any row of `b`.
pub fn max_abs_cos(a: &Matrix, b: &Matrix) -> f64 {
    let mut m = 0.0f64;
    for r in a.iter_rows() {
        for s in b.iter_rows() {
            m = m.max(abs_cos(r, s));
        }
    }
    m
}

/// A new/stored basis pair with prescribed principal angles.
///
/// The stored basis spans the first `k` rotated axes. New component `i` is
/// `cos θᵢ·eᵢ + sin θᵢ·e_{k+i}`, so its best alignment to the stored basis is
/// exactly `|cos θᵢ|`. Angles keep clear of `tau` so the count is unambiguous.
pub struct AngleFixture {
    pub new: SubspaceBasis,
    pub stored: SubspaceBasis,
    pub cosines: Vec<f64>,
    pub expected_aligned: usize,
}

pub fn angle_fixture(seed: u64, d: usize, k: usize, tau: f64) -> AngleFixture {
    assert!(2 * k <= d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_rotation(d, seed ^ 0xA5A5);
    let mut cosines = Vec::with_capacity(k);
    while cosines.len() < k {
        let c: f64 = rng.random_range(0.0..1.0);
        if (c - tau).abs() > 1e-3 {
            cosines.push(c);
        }
    }
    let mut new_rows = Matrix::zeros(k, d);
    for (i, &c) in cosines.iter().enumerate() {
        let s = (1.0 - c * c).sqrt();
        for j in 0..d {
            new_rows.set(i, j, c * q.get(i, j) + s * q.get(k + i, j));
        }
    }
    let stored_rows = q.slice_rows(0, k);
    AngleFixture {
        new: basis_from_rows(new_rows),
        stored: basis_from_rows(stored_rows),
        expected_aligned: cosines.iter().filter(|&&c| c > tau).count(),
        cosines,
    }
}

/// A store of one to three random subspaces in `R^d` plus new data that
/// partly lies inside them. `d ≥ 10` leaves at least one free direction.
pub fn orthogonality_fixture(seed: u64) -> (PromptStore, Matrix, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(10..=24);
    let n_stored = rng.random_range(1..=3);
    let mut bases = Vec::new();
    let mut used = 0;
    for s in 0..n_stored {
        let k = rng.random_range(1..=3);
        used += k;
        let x = gaussian(
            rng.random_range(k + 2..=30),
            d,
            seed.wrapping_mul(31).wrapping_add(s as u64),
        );
        bases.push(sparc_core::linalg::pca(&x, k).unwrap());
    }
    let store = store_of(&bases);
    let n = rng.random_range(10..=40);
    let mut x = gaussian(n, d, seed ^ 0xFEED);
    let leak: f64 = rng.random_range(0.0..5.0);
    for i in 0..n {
        for b in &bases {
            let w: f64 = rng.random_range(-1.0..1.0);
            for j in 0..d {
                let v = x.get(i, j) + leak * w * b.components.get(0, j);
                x.set(i, j, v);
            }
        }
    }
    let k = rng.random_range(1..=(d - used).min(6));
    (store, x, k)
}

pub fn order1(id: &str, alphabet: &str, transition_seed: u64, doc_count: usize) -> DomainSpec {
    DomainSpec {
        grammar: Grammar::MarkovChain {
            order: 1,
            transition_seed,
        },
        ..DomainSpec::markov(id, alphabet, transition_seed, doc_count, (24, 40))
    }
}

pub fn pretrain_specs() -> Vec<DomainSpec> {
    vec![
        order1("g1", "abcdefgh", 11, 128),
        order1("g2", "ijklmnop", 12, 128),
        order1("g3", "abcdijkl", 13, 128),
        order1("g4", "efghmnop", 14, 128),
    ]
}

pub fn base_config() -> (TinyLmConfig, PretrainConfig) {
    (
        TinyLmConfig {
            max_seq: 64,
            ..TinyLmConfig::default()
        },
        PretrainConfig {
            steps: 400,
            ..PretrainConfig::default()
        },
    )
}

/// The pretrained base shared by every test in one process.
pub fn base() -> &'static TinyLm {
    static BASE: OnceLock<TinyLm> = OnceLock::new();
    BASE.get_or_init(|| {
        let corpus = pretraining_corpus(&pretrain_specs(), 100).unwrap();
        let (cfg, pc) = base_config();
        pretrain_base(&corpus, cfg, &pc).unwrap().0
    })
}

pub fn task(id: &str, alphabet: &str, transition_seed: u64) -> Dataset {
    generate(&order1(id, alphabet, transition_seed, 64), 1).unwrap()
}

/// Prompt hyperparameters that train meaningfully within a few seconds per
/// stage on the test base.
pub fn fast_run() -> RunConfig {
    RunConfig {
        lr: 0.05,
        epochs: 12,
        tokens: 8,
        k: 16,
        ..RunConfig::default()
    }
}

/// Worst relative error between the analytic prompt gradient in subspace
/// coordinates and a central finite difference (h = 1e-4), on a random
/// 1-layer model with `T ≤ 4` and at most 16 tokens. Entries whose
/// magnitudes are both below `1e-6` are compared on that absolute floor.
pub fn prompt_gradient_error(seed: u64) -> f64 {
    use sparc_core::model::{TinyLmConfig, TokenSequence};
    use sparc_core::prompt::{expand, grad_chain_to_subspace};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let mut lm = TinyLm::new(TinyLmConfig {
        d_model: d,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq: 24,
        seed,
        ..TinyLmConfig::default()
    })
    .unwrap();
    lm.freeze();
    let t = rng.random_range(1..=4);
    let len = rng.random_range(2..=16);
    let k = rng.random_range(1..=8);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(32..127)).collect();
    let mut mask: Vec<bool> = (0..len).map(|i| i > 0 && rng.random_bool(0.7)).collect();
    mask[len - 1] = true;
    let seq = TokenSequence::new(tokens, mask).unwrap();
    let basis = sparc_core::linalg::pca(&gaussian(40, d, seed ^ 0xB0B).scale(0.5), k).unwrap();
    let mut prompt = init_prompt(&basis, t, seed).unwrap();
    prompt.p = gaussian(t, basis.components.rows(), seed ^ 0xC0DE);
    let loss = |p: &Matrix| {
        let mut q = prompt.clone();
        q.p = p.clone();
        lm.loss_and_prompt_grad(&expand(&q, &basis).unwrap(), &seq)
            .unwrap()
    };
    let (_, g_embed) = loss(&prompt.p);
    let g = grad_chain_to_subspace(&g_embed, &basis).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let mut plus = prompt.p.clone();
            plus.set(r, c, plus.get(r, c) + h);
            let mut minus = prompt.p.clone();
            minus.set(r, c, minus.get(r, c) - h);
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let an = g.get(r, c);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
