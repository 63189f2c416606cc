mod common;

use common::*;
use sparc_core::continual::{classification_accuracy, per_token_accuracy};
use sparc_core::data::{generate, Example};
use sparc_core::model::{
    embed_dataset, finetune_full, pretrain_base, Conditioning, FinetuneConfig, Pooling,
    PretrainConfig,
};
use sparc_core::prompt::{expand, init_prompt, train_prompt, PromptTrainConfig};
use sparc_core::subspace::{basis_overlap, fit_subspace};
use sparc_core::{
    run, Dataset, DatasetKind, Mode, RunConfig, RunOutcome, TinyLm, TinyLmConfig, Trainer,
};

fn small_config(seed: u64) -> TinyLmConfig {
    TinyLmConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_seq: 48,
        seed,
        ..TinyLmConfig::default()
    }
}

fn overlap(lm: &TinyLm, a: &Dataset, b: &Dataset) -> f64 {
    let k = 8;
    let fit = |d: &Dataset| {
        let e = embed_dataset(lm, &d.id, &d.documents(), Pooling::LastHiddenMean).unwrap();
        fit_subspace(&e.x, k).unwrap()
    };
    basis_overlap(&fit(a), &fit(b), 0.5).unwrap().overlap_pct
}

fn decisions(o: &RunOutcome) -> Vec<String> {
    o.events
        .iter()
        .filter(|e| e["event"] == "decision")
        .map(|e| e["decision"]["kind"].as_str().unwrap().to_string())
        .collect()
}

fn lm_dataset(id: &str, docs: &[String]) -> Dataset {
    let examples = docs
        .iter()
        .map(|d| Example {
            input: d[..2].to_string(),
            target: Some(d[2..].to_string()),
            label: None,
        })
        .collect();
    Dataset::new(id, DatasetKind::Lm, examples, Vec::new()).unwrap()
}

#[test]
fn overlap_tracks_alphabet_sharing() {
    let lm = base();
    let spec = order1("s", "abcdefgh", 21, 64);
    let same = overlap(
        lm,
        &generate(&spec, 1).unwrap(),
        &generate(&spec, 2).unwrap(),
    );
    let a = task("a", "abcdefgh", 1);
    let disjoint = overlap(lm, &a, &task("b", "ijklmnop", 2));
    let half = overlap(lm, &a, &task("h", "abcdijkl", 3));
    let identical = overlap(lm, &a, &task("i", "abcdefgh", 4));
    println!("overlap same-spec {same}, disjoint {disjoint}, half {half}, identical-alphabet {identical}");
    assert!(same > 0.8);
    assert!(disjoint < 0.2);
    assert!(disjoint <= half && half <= identical);
}

#[test]
fn disjoint_domains_embed_apart() {
    let lm = base();
    let embed = |d: &Dataset| {
        embed_dataset(lm, &d.id, &d.documents(), Pooling::LastHiddenMean)
            .unwrap()
            .x
    };
    let a = embed(&task("a", "abcdefgh", 1));
    let b = embed(&task("b", "ijklmnop", 2));
    let mean_cos = |x: &sparc_core::Matrix, y: &sparc_core::Matrix| {
        let mut s = 0.0;
        let mut n = 0;
        for r in x.iter_rows() {
            for q in y.iter_rows() {
                s += abs_cos(r, q);
                n += 1;
            }
        }
        s / n as f64
    };
    let within = (mean_cos(&a, &a) + mean_cos(&b, &b)) / 2.0;
    let between = mean_cos(&a, &b);
    assert!(between < within, "between {between} within {within}");
    let same = embed_dataset(lm, "d", &["abcabc", "abcabc"], Pooling::MeanTokens).unwrap();
    assert_eq!(same.x.row(0), same.x.row(1));
    assert_eq!(same.x.shape(), (2, 64));
}

#[test]
fn pretraining_examples() {
    // Incompressible bytes: nothing to learn.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    use rand::{Rng, SeedableRng};
    let noise: Vec<usize> = (0..6000).map(|_| rng.random_range(0..256)).collect();
    let pc = PretrainConfig {
        steps: 60,
        ..PretrainConfig::default()
    };
    let (_, rep) = pretrain_base(&noise, small_config(1), &pc).unwrap();
    let ln256 = 256f64.ln();
    assert!((rep.uniform_loss - ln256).abs() < 1e-12);
    assert!(
        rep.heldout_loss > ln256 - 0.05,
        "held-out {}",
        rep.heldout_loss
    );

    let abab: Vec<usize> = "ab".repeat(1500).bytes().map(usize::from).collect();
    let pc = PretrainConfig {
        steps: 150,
        ..PretrainConfig::default()
    };
    let (lm1, rep) = pretrain_base(&abab, small_config(2), &pc).unwrap();
    assert!(rep.heldout_loss < 0.1, "held-out {}", rep.heldout_loss);
    let (lm2, _) = pretrain_base(&abab, small_config(2), &pc).unwrap();
    assert_eq!(lm1.weight_digest(), lm2.weight_digest());
}

#[test]
fn per_token_accuracy_examples() {
    // Overfit a small model to one sequence.
    let doc = "qwertyuiopasdfghjklzxcvbnm".to_string();
    let ds = lm_dataset("mem", &vec![doc.clone(); 4]);
    let mut lm = TinyLm::new(small_config(3)).unwrap();
    let (seqs, _) = ds.sequences(48).unwrap();
    let cfg = FinetuneConfig {
        lr: 1e-2,
        epochs: 150,
        batch: 4,
        ..FinetuneConfig::default()
    };
    finetune_full(&mut lm, &seqs, &cfg).unwrap();
    lm.freeze();
    assert_eq!(
        per_token_accuracy(&lm, Conditioning::none(), &ds).unwrap(),
        1.0
    );

    // An untrained model scored on independent uniform targets sits at chance.
    // Targets use the 128 single-byte code points a UTF-8 string can carry.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    use rand::{Rng, SeedableRng};
    let docs: Vec<String> = (0..100)
        .map(|_| {
            (0..40)
                .map(|_| char::from(rng.random_range(0u8..128)))
                .collect()
        })
        .collect();
    let noise = lm_dataset("noise", &docs);
    let mut fresh = TinyLm::new(small_config(4)).unwrap();
    fresh.freeze();
    let acc = per_token_accuracy(&fresh, Conditioning::none(), &noise).unwrap();
    let n: f64 = 100.0 * 38.0;
    let p: f64 = 1.0 / 128.0;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!(
        (acc - p).abs() <= 3.0 * sigma,
        "accuracy {acc}, chance {p} ± {}",
        3.0 * sigma
    );
    assert_eq!(
        per_token_accuracy(&fresh, Conditioning::none(), &noise).unwrap(),
        acc
    );
}

#[test]
fn classification_accuracy_examples() {
    let mut fresh = TinyLm::new(small_config(6)).unwrap();
    fresh.freeze();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    use rand::{Rng, SeedableRng};
    let labels = vec!["x".to_string(), "y".to_string()];
    let examples: Vec<Example> = (0..400)
        .map(|i| Example {
            input: (0..12)
                .map(|_| char::from(rng.random_range(b'a'..=b'w')))
                .collect(),
            target: None,
            label: Some(labels[i % 2].clone()),
        })
        .collect();
    let ds = Dataset::new(
        "coin",
        DatasetKind::Classification,
        examples,
        labels.clone(),
    )
    .unwrap();
    let acc = classification_accuracy(&fresh, Conditioning::none(), &ds).unwrap();
    assert!(
        (acc - 0.5).abs() <= 3.0 * (0.25f64 / 400.0).sqrt(),
        "accuracy {acc}"
    );

    let one = Dataset::new(
        "one",
        DatasetKind::Classification,
        ds.examples[..1].to_vec(),
        labels,
    )
    .unwrap();
    let a1 = classification_accuracy(&fresh, Conditioning::none(), &one).unwrap();
    assert!(a1 == 0.0 || a1 == 1.0);

    // Copy task: the label is the last input symbol.
    let lm = base();
    let copy_labels = vec!["A".to_string(), "B".to_string()];
    let examples: Vec<Example> = (0..40)
        .map(|i| {
            let l = &copy_labels[i % 2];
            let stem: String = (0..6)
                .map(|_| char::from(rng.random_range(b'a'..=b'h')))
                .collect();
            Example {
                input: format!("{stem}{l}"),
                target: None,
                label: Some(l.clone()),
            }
        })
        .collect();
    let copy = Dataset::new("copy", DatasetKind::Classification, examples, copy_labels).unwrap();
    let e = embed_dataset(lm, "copy", &copy.documents(), Pooling::LastHiddenMean).unwrap();
    let basis = fit_subspace(&e.x, 8).unwrap();
    let (seqs, _) = copy.sequences(64 - 4).unwrap();
    let cfg = PromptTrainConfig {
        lr: 0.1,
        epochs: 30,
        ..PromptTrainConfig::default()
    };
    let out = train_prompt(lm, &init_prompt(&basis, 4, 0).unwrap(), &basis, &seqs, &cfg).unwrap();
    let embeds = expand(&out.prompt, &basis).unwrap();
    let acc = classification_accuracy(lm, Conditioning::prompt(&embeds), &copy).unwrap();
    assert!(acc >= 0.9, "copy accuracy {acc}");
}

#[test]
fn prompt_memorizes_a_repeated_sequence() {
    let lm = base();
    let wide = generate(&order1("w", "abcdefghijklmnopqrstuvwxyz", 5, 96), 1).unwrap();
    let e = embed_dataset(lm, "w", &wide.documents(), Pooling::LastHiddenMean).unwrap();
    let basis = fit_subspace(&e.x, 48).unwrap();
    let doc = generate(&order1("m", "abcdefghijklmnop", 9, 1), 3)
        .unwrap()
        .documents()[0]
        .clone();
    let rep = lm_dataset("rep", &vec![doc; 8]);
    let (seqs, _) = rep.sequences(64 - 16).unwrap();
    let digest = lm.weight_digest();
    let cfg = PromptTrainConfig {
        lr: 0.3,
        epochs: 200,
        batch: 8,
        ..PromptTrainConfig::default()
    };
    let out = train_prompt(
        lm,
        &init_prompt(&basis, 16, 0).unwrap(),
        &basis,
        &seqs,
        &cfg,
    )
    .unwrap();
    assert_eq!(out.steps, 200);
    println!(
        "repeated sequence loss {} -> {}",
        out.curve[0], out.final_loss
    );
    assert!(out.final_loss <= 0.5 * out.curve[0]);
    assert_eq!(lm.recompute_digest(), digest);
}

fn quick(mode: Mode, trainer: Trainer) -> RunConfig {
    RunConfig {
        epochs: 2,
        mode,
        trainer,
        ..fast_run()
    }
}

#[test]
fn single_dataset_run() {
    let o = run(
        base(),
        &[task("a", "abcdefgh", 1)],
        &quick(Mode::TaskIncremental, Trainer::PromptOnly),
    )
    .unwrap();
    assert_eq!(o.matrix.values.shape(), (1, 1));
    assert_eq!(o.transfer.unwrap().forgetting.unwrap(), vec![0.0]);
}

#[test]
fn identical_distributions_reuse() {
    let spec = order1("s", "abcdefgh", 21, 64);
    let mut d2 = generate(&spec, 2).unwrap();
    d2.id = "s2".into();
    let data = [generate(&spec, 1).unwrap(), d2];
    let o = run(
        base(),
        &data,
        &quick(Mode::TaskIncremental, Trainer::PromptOnly),
    )
    .unwrap();
    assert_eq!(decisions(&o), ["new_orthogonal", "reuse"]);
}

#[test]
fn disjoint_domains_keep_exact_accuracy() {
    let data = [task("a", "abcdefgh", 1), task("b", "ijklmnop", 2)];
    let o = run(
        base(),
        &data,
        &quick(Mode::TaskIncremental, Trainer::PromptOnly),
    )
    .unwrap();
    assert_eq!(decisions(&o), ["new_orthogonal", "new_orthogonal"]);
    let v = &o.matrix.values;
    assert_eq!(v.get(0, 0).to_bits(), v.get(1, 0).to_bits());
    assert_eq!(o.transfer.unwrap().forgetting.unwrap(), vec![0.0, 0.0]);
    assert_eq!(base().recompute_digest(), o.base_digest);
}

#[test]
fn baselines() {
    let data = [task("a", "abcdefgh", 1), task("b", "ijklmnop", 2)];
    let z = run(
        base(),
        &data,
        &quick(Mode::TaskIncremental, Trainer::ZeroShot),
    )
    .unwrap();
    assert_eq!(z.matrix.values.row(0), z.matrix.values.row(1));

    let f = run(
        base(),
        &data,
        &quick(Mode::TaskIncremental, Trainer::FullFinetune),
    )
    .unwrap();
    for i in 0..2 {
        println!(
            "full_finetune diag {i}: {} vs zero-shot {}",
            f.matrix.values.get(i, i),
            z.zero_shot[i]
        );
        assert!(f.matrix.values.get(i, i) >= z.zero_shot[i]);
    }
    assert_eq!(base().recompute_digest(), f.base_digest);

    let n = run(
        base(),
        &data,
        &quick(Mode::TaskIncremental, Trainer::NonContinual),
    )
    .unwrap();
    let t = n.transfer.unwrap();
    assert!(t.forgetting.is_none() && t.avg_forgetting.is_none());
}

#[test]
fn runs_replay_identically() {
    let data = [task("a", "abcdefgh", 1), task("h", "abcdijkl", 3)];
    let cfg = quick(Mode::DomainIncremental, Trainer::PromptOnly);
    let a = run(base(), &data, &cfg).unwrap();
    let b = run(base(), &data, &cfg).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
    assert_eq!(a.store, b.store);
}
