//! The continual-learning controller: per-stage routing, training and
//! evaluation over an ordered dataset sequence, plus the baselines.

mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Dataset;
use crate::error::{Result, SparcError};
use crate::linalg::{Matrix, SubspaceBasis};
use crate::model::{
    attach_lora, count_trainable, embed_dataset, finetune_full, Conditioning, FinetuneConfig,
    ParamCount, Pooling, TinyLm, DEFAULT_LORA_TARGETS,
};
use crate::prompt::{
    expand, init_prompt, train_prompt_with_adapters, PromptRecord, PromptStore, PromptTrainConfig,
};
use crate::subspace::{decide, fit_subspace, orthogonal_subspace, DecisionKind};

pub use metrics::{
    classification_accuracy, compute_transfer, evaluate, per_token_accuracy, AccuracyMatrix,
    TransferReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One objective over shifting domains; reused prompts keep training.
    DomainIncremental,
    /// Distinct tasks with per-task frozen prompts.
    #[default]
    TaskIncremental,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    #[default]
    PromptOnly,
    PromptPlusLora,
    FullFinetune,
    ZeroShot,
    NonContinual,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = SparcError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(SparcError::Parameter(format!(
                        "unknown {} {s:?} (expected one of: {})",
                        stringify!($t).to_lowercase(),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(Mode { DomainIncremental => "domain_incremental", TaskIncremental => "task_incremental" });
str_enum!(Trainer {
    PromptOnly => "prompt_only",
    PromptPlusLora => "prompt_plus_lora",
    FullFinetune => "full_finetune",
    ZeroShot => "zero_shot",
    NonContinual => "non_continual",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// PCA components per task subspace.
    pub k: usize,
    /// Soft tokens per prompt.
    pub tokens: usize,
    pub tau_align: f64,
    pub tau_reuse: f64,
    pub mode: Mode,
    pub trainer: Trainer,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
    /// Epochs spent fine-tuning a reused prompt; defaults to a quarter of
    /// `epochs` (at least one).
    pub reuse_epochs: Option<usize>,
    /// Fine-tune reused prompts in place instead of as a copy. Defaults to
    /// in place for domain-incremental runs and copy-on-write otherwise.
    pub reuse_in_place: Option<bool>,
    /// Ablation: one prompt, created at the first stage and trained on every
    /// dataset in turn.
    pub shared_prompt: bool,
    pub add_mean: bool,
    pub pooling: Pooling,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<String>,
    /// Learning rate of the full fine-tuning baseline.
    pub finetune_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 16,
            tokens: 8,
            tau_align: 0.5,
            tau_reuse: 0.5,
            mode: Mode::default(),
            trainer: Trainer::default(),
            epochs: 12,
            lr: 1e-2,
            batch: 8,
            clip: 1.0,
            seed: 0,
            reuse_epochs: None,
            reuse_in_place: None,
            shared_prompt: false,
            add_mean: true,
            pooling: Pooling::default(),
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: DEFAULT_LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            finetune_lr: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SparcError::Parameter(m));
        if self.k == 0 || self.tokens == 0 || self.batch == 0 {
            return bad("k, tokens and batch must be at least 1".into());
        }
        for (name, tau) in [("tau_align", self.tau_align), ("tau_reuse", self.tau_reuse)] {
            if !(tau > 0.0 && tau < 1.0) {
                return bad(format!("{name} = {tau} outside (0, 1)"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite())
        {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.trainer == Trainer::PromptPlusLora
            && (self.lora_rank == 0 || self.lora_targets.is_empty())
        {
            return bad("prompt_plus_lora needs lora_rank >= 1 and at least one target".into());
        }
        Ok(())
    }

    pub fn effective_reuse_epochs(&self) -> usize {
        self.reuse_epochs.unwrap_or((self.epochs / 4).max(1))
    }

    fn in_place(&self) -> bool {
        self.shared_prompt
            || self
                .reuse_in_place
                .unwrap_or(self.mode == Mode::DomainIncremental)
    }

    fn freezes(&self) -> bool {
        self.mode == Mode::TaskIncremental && !self.in_place()
    }

    fn train_cfg(&self, epochs: usize, stage: usize) -> PromptTrainConfig {
        PromptTrainConfig {
            lr: self.lr,
            epochs,
            batch: self.batch,
            clip: self.clip,
            seed: stage_seed(self.seed, stage),
        }
    }
}

fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub mode: Mode,
    pub matrix: AccuracyMatrix,
    pub zero_shot: Vec<f64>,
    /// Present only for complete runs.
    pub transfer: Option<TransferReport>,
    pub store: PromptStore,
    pub events: Vec<Value>,
    pub base_digest: u64,
    /// The error that stopped the run early, if any.
    pub failure: Option<SparcError>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.matrix.is_complete()
    }

    /// One JSON object per line.
    pub fn log_jsonl(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn hex(d: u64) -> String {
    format!("{d:016x}")
}

struct Session<'a> {
    lm: &'a TinyLm,
    datasets: &'a [Dataset],
    cfg: &'a RunConfig,
    events: Vec<Value>,
    rows: Vec<Vec<f64>>,
    store: PromptStore,
    params: ParamCount,
    base_digest: u64,
}

impl<'a> Session<'a> {
    fn start(
        lm: &'a TinyLm,
        datasets: &'a [Dataset],
        cfg: &'a RunConfig,
    ) -> Result<(Session<'a>, Vec<f64>)> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(SparcError::Data("a run needs at least one dataset".into()));
        }
        for (i, d) in datasets.iter().enumerate() {
            d.validate()?;
            if datasets[..i].iter().any(|o| o.id == d.id) {
                return Err(SparcError::Data(format!("duplicate dataset id {}", d.id)));
            }
        }
        if !lm.is_frozen() {
            return Err(SparcError::ModelState(
                "not frozen; runs start from a frozen base",
            ));
        }
        let base_digest = lm.weight_digest();
        let zero_shot = datasets
            .iter()
            .map(|d| evaluate(lm, Conditioning::none(), d))
            .collect::<Result<Vec<_>>>()?;
        let mut s = Session {
            lm,
            datasets,
            cfg,
            events: Vec::new(),
            rows: Vec::new(),
            store: PromptStore::new(),
            params: ParamCount::default(),
            base_digest,
        };
        s.events.push(json!({
            "event": "run_start",
            "trainer": cfg.trainer.to_string(),
            "mode": cfg.mode.to_string(),
            "datasets": datasets.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
            "config": cfg,
            "reuse_epochs": cfg.effective_reuse_epochs(),
            "base_digest": hex(base_digest),
            "zero_shot": zero_shot,
        }));
        Ok((s, zero_shot))
    }

    fn push_row(&mut self, stage: usize, row: Vec<f64>, used: Vec<Option<String>>) {
        self.events.push(json!({
            "event": "evaluate",
            "stage": stage,
            "accuracy": row,
            "prompts": used,
        }));
        self.rows.push(row);
    }

    fn check_digest(&mut self, stage: usize) -> Result<()> {
        let now = self.lm.recompute_digest();
        self.events.push(json!({
            "event": "digest",
            "stage": stage,
            "digest": hex(now),
            "unchanged": now == self.base_digest,
        }));
        if now != self.base_digest {
            return Err(SparcError::ModelState(
                "base weights changed during the run",
            ));
        }
        Ok(())
    }

    fn finish(
        mut self,
        zero_shot: Vec<f64>,
        failure: Option<SparcError>,
        forgetting_defined: bool,
    ) -> Result<RunOutcome> {
        let n = self.datasets.len();
        let ids: Vec<String> = self.datasets.iter().map(|d| d.id.clone()).collect();
        let matrix = AccuracyMatrix {
            stages: ids[..self.rows.len()].to_vec(),
            datasets: ids,
            values: Matrix::new(self.rows.len(), n, self.rows.concat())?,
        };
        let transfer = if failure.is_none() && matrix.is_complete() {
            let mut t = compute_transfer(&matrix, &zero_shot)?;
            t.params = self.params;
            if !forgetting_defined {
                t.forgetting = None;
                t.absolute_drop = None;
                t.avg_forgetting = None;
                t.backward_retention = None;
            }
            Some(t)
        } else {
            None
        };
        self.events.push(json!({
            "event": "run_end",
            "complete": failure.is_none(),
            "error": failure.as_ref().map(|e| e.to_string()),
            "transfer": transfer,
        }));
        Ok(RunOutcome {
            trainer: self.cfg.trainer,
            mode: self.cfg.mode,
            matrix,
            zero_shot,
            transfer,
            store: self.store,
            events: self.events,
            base_digest: self.base_digest,
            failure,
        })
    }
}

/// Dispatch on `cfg.trainer`.
pub fn run(lm: &TinyLm, datasets: &[Dataset], cfg: &RunConfig) -> Result<RunOutcome> {
    match cfg.trainer {
        Trainer::PromptOnly | Trainer::PromptPlusLora => run_sequence(lm, datasets, cfg),
        _ => run_baseline(lm, datasets, cfg),
    }
}

/// Embed every dataset under the frozen base and fit its subspace.
fn fit_all(
    lm: &TinyLm,
    datasets: &[Dataset],
    cfg: &RunConfig,
) -> Result<Vec<(Matrix, SubspaceBasis)>> {
    datasets
        .iter()
        .map(|d| {
            let emb = embed_dataset(lm, &d.id, &d.documents(), cfg.pooling)?;
            let basis = fit_subspace(&emb.x, cfg.k)?;
            Ok((emb.x, basis))
        })
        .collect()
}

/// The record used to evaluate dataset `j`: its routed prompt once trained,
/// otherwise whichever prompt `decide` would pick for it (if any).
fn eval_record<'s>(
    store: &'s PromptStore,
    cfg: &RunConfig,
    dataset: &str,
    basis: &SubspaceBasis,
) -> Result<Option<&'s PromptRecord>> {
    if let Some(r) = store.routed(dataset) {
        return Ok(Some(r));
    }
    if cfg.shared_prompt {
        return Ok(store.records().first());
    }
    Ok(
        match decide(basis, store, cfg.tau_align, cfg.tau_reuse)?.kind {
            DecisionKind::Reuse(id) => store.get(&id),
            DecisionKind::NewOrthogonal => None,
        },
    )
}

fn evaluate_with(lm: &TinyLm, rec: Option<&PromptRecord>, ds: &Dataset) -> Result<f64> {
    match rec {
        None => evaluate(lm, Conditioning::none(), ds),
        Some(r) => {
            let e = expand(&r.prompt, &r.basis)?;
            evaluate(
                lm,
                Conditioning {
                    prompt: Some(&e),
                    adapters: r.adapters.as_ref(),
                },
                ds,
            )
        }
    }
}

fn sparc_stage(s: &mut Session<'_>, bases: &[(Matrix, SubspaceBasis)], i: usize) -> Result<()> {
    let (lm, cfg) = (s.lm, s.cfg);
    let ds = &s.datasets[i];
    let (x, basis) = &bases[i];
    s.events
        .push(json!({ "event": "stage_start", "stage": i, "dataset": ds.id, "k": basis.rank() }));

    let (kind, overlaps) = if cfg.shared_prompt {
        match s.store.records().first() {
            Some(r) => (DecisionKind::Reuse(r.prompt.id.clone()), Vec::new()),
            None => (DecisionKind::NewOrthogonal, Vec::new()),
        }
    } else {
        let d = decide(basis, &s.store, cfg.tau_align, cfg.tau_reuse)?;
        (d.kind, d.overlaps)
    };
    s.events.push(json!({
        "event": "decision",
        "stage": i,
        "dataset": ds.id,
        "decision": kind,
        "overlaps": overlaps,
    }));

    let (seqs, _) = ds.sequences(lm.config().max_seq - cfg.tokens)?;
    let prompt_id = format!("p{}", s.store.len());
    let (id, training) = match &kind {
        DecisionKind::Reuse(pid) if cfg.in_place() => {
            let epochs = if cfg.shared_prompt {
                cfg.epochs
            } else {
                cfg.effective_reuse_epochs()
            };
            let rec = s.store.get_mut(pid)?;
            let out = train_prompt_with_adapters(
                lm,
                &rec.prompt,
                &rec.basis,
                rec.adapters.as_ref(),
                &seqs,
                &cfg.train_cfg(epochs, i),
            )?;
            rec.prompt.p = out.prompt.p.clone();
            rec.adapters = out.adapters.clone();
            rec.prompt.trained_on.push(ds.id.clone());
            (pid.clone(), out)
        }
        DecisionKind::Reuse(pid) => {
            let src = s.store.get(pid).expect("decided prompts exist").clone();
            let mut prompt = src.prompt.clone().with_id(&prompt_id);
            prompt.frozen = false;
            let out = train_prompt_with_adapters(
                lm,
                &prompt,
                &src.basis,
                src.adapters.as_ref(),
                &seqs,
                &cfg.train_cfg(cfg.effective_reuse_epochs(), i),
            )?;
            let mut prompt = out.prompt.clone();
            prompt.trained_on = vec![ds.id.clone()];
            prompt.frozen = cfg.freezes();
            s.store.insert(PromptRecord {
                task_id: ds.id.clone(),
                basis: src.basis,
                prompt,
                adapters: out.adapters.clone(),
            })?;
            (prompt_id, out)
        }
        DecisionKind::NewOrthogonal => {
            let nb = if cfg.shared_prompt {
                basis.clone()
            } else {
                orthogonal_subspace(x, &s.store, basis.rank())?
            };
            let seed = stage_seed(cfg.seed, i);
            let mut prompt = init_prompt(&nb, cfg.tokens, seed)?.with_id(&prompt_id);
            prompt.add_mean = cfg.add_mean;
            let adapters = if cfg.trainer == Trainer::PromptPlusLora {
                Some(attach_lora(
                    lm,
                    &cfg.lora_targets,
                    cfg.lora_rank,
                    cfg.lora_alpha,
                    seed,
                )?)
            } else {
                None
            };
            let out = train_prompt_with_adapters(
                lm,
                &prompt,
                &nb,
                adapters.as_ref(),
                &seqs,
                &cfg.train_cfg(cfg.epochs, i),
            )?;
            let mut prompt = out.prompt.clone();
            prompt.trained_on = vec![ds.id.clone()];
            prompt.frozen = cfg.freezes();
            s.store.insert(PromptRecord {
                task_id: ds.id.clone(),
                basis: nb,
                prompt,
                adapters: out.adapters.clone(),
            })?;
            (prompt_id, out)
        }
    };
    s.store.route(&ds.id, &id)?;
    s.params = count_trainable(Some(&training.prompt), training.adapters.as_ref(), lm);
    s.events.push(json!({
        "event": "train",
        "stage": i,
        "prompt": id,
        "curve": training.curve,
        "final_loss": training.final_loss,
        "steps": training.steps,
        "params": s.params,
    }));
    s.check_digest(i)?;

    let mut row = Vec::with_capacity(s.datasets.len());
    let mut used = Vec::with_capacity(s.datasets.len());
    for (j, d) in s.datasets.iter().enumerate() {
        let rec = eval_record(&s.store, cfg, &d.id, &bases[j].1)?;
        used.push(rec.map(|r| r.prompt.id.clone()));
        row.push(evaluate_with(lm, rec, d)?);
    }
    s.push_row(i, row, used);
    Ok(())
}

/// Route, train and evaluate each dataset in order with soft prompts (and
/// optional adapters) over the frozen base.
pub fn run_sequence(lm: &TinyLm, datasets: &[Dataset], cfg: &RunConfig) -> Result<RunOutcome> {
    if !matches!(cfg.trainer, Trainer::PromptOnly | Trainer::PromptPlusLora) {
        return Err(SparcError::Parameter(format!(
            "{} is a baseline trainer",
            cfg.trainer
        )));
    }
    let (mut s, zero_shot) = Session::start(lm, datasets, cfg)?;
    let bases = fit_all(lm, datasets, cfg)?;
    let mut failure = None;
    for i in 0..datasets.len() {
        if let Err(e) = sparc_stage(&mut s, &bases, i) {
            log::error!("stage {i} ({}) failed: {e}", datasets[i].id);
            s.events
                .push(json!({ "event": "error", "stage": i, "message": e.to_string() }));
            failure = Some(e);
            break;
        }
    }
    s.finish(zero_shot, failure, true)
}

/// Full fine-tuning, zero-shot and non-continual reference runs.
pub fn run_baseline(lm: &TinyLm, datasets: &[Dataset], cfg: &RunConfig) -> Result<RunOutcome> {
    let (mut s, zero_shot) = Session::start(lm, datasets, cfg)?;
    let n = datasets.len();
    let mut failure = None;
    match cfg.trainer {
        Trainer::ZeroShot => {
            for i in 0..n {
                s.push_row(i, zero_shot.clone(), vec![None; n]);
            }
        }
        Trainer::FullFinetune => {
            let mut tuned = lm.thawed_clone();
            s.params = ParamCount {
                trainable: lm.param_count(),
                total: lm.param_count(),
                fraction: 1.0,
            };
            let mut stage = |s: &mut Session<'_>, i: usize| -> Result<()> {
                let (seqs, _) = datasets[i].sequences(lm.config().max_seq)?;
                let curve = finetune_full(
                    &mut tuned,
                    &seqs,
                    &FinetuneConfig {
                        lr: cfg.finetune_lr,
                        epochs: cfg.epochs,
                        batch: cfg.batch,
                        clip: cfg.clip,
                        seed: stage_seed(cfg.seed, i),
                    },
                )?;
                s.events
                    .push(json!({ "event": "train", "stage": i, "curve": curve }));
                let row = datasets
                    .iter()
                    .map(|d| evaluate(&tuned, Conditioning::none(), d))
                    .collect::<Result<Vec<_>>>()?;
                s.push_row(i, row, vec![None; n]);
                Ok(())
            };
            for i in 0..n {
                if let Err(e) = stage(&mut s, i) {
                    failure = Some(e);
                    break;
                }
            }
        }
        Trainer::NonContinual => {
            let bases = fit_all(lm, datasets, cfg)?;
            let mut own = Vec::with_capacity(n);
            for i in 0..n {
                let res: Result<()> = (|| {
                    let ds = &datasets[i];
                    let basis = &bases[i].1;
                    let mut prompt = init_prompt(basis, cfg.tokens, stage_seed(cfg.seed, i))?
                        .with_id(format!("p{i}"));
                    prompt.add_mean = cfg.add_mean;
                    let (seqs, _) = ds.sequences(lm.config().max_seq - cfg.tokens)?;
                    let out = train_prompt_with_adapters(
                        lm,
                        &prompt,
                        basis,
                        None,
                        &seqs,
                        &cfg.train_cfg(cfg.epochs, i),
                    )?;
                    let mut prompt = out.prompt;
                    prompt.trained_on = vec![ds.id.clone()];
                    prompt.frozen = true;
                    s.params = count_trainable(Some(&prompt), None, lm);
                    s.events.push(json!({ "event": "train", "stage": i, "prompt": prompt.id, "curve": out.curve }));
                    s.store.insert(PromptRecord {
                        task_id: ds.id.clone(),
                        basis: basis.clone(),
                        prompt,
                        adapters: None,
                    })?;
                    s.store.route(&ds.id, &format!("p{i}"))?;
                    own.push(evaluate_with(lm, s.store.routed(&ds.id), ds)?);
                    s.check_digest(i)?;
                    let row = (0..n)
                        .map(|j| if j <= i { own[j] } else { zero_shot[j] })
                        .collect();
                    let used = (0..n).map(|j| (j <= i).then(|| format!("p{j}"))).collect();
                    s.push_row(i, row, used);
                    Ok(())
                })();
                if let Err(e) = res {
                    failure = Some(e);
                    break;
                }
            }
        }
        Trainer::PromptOnly | Trainer::PromptPlusLora => {
            return Err(SparcError::Parameter(format!(
                "{} is not a baseline trainer",
                cfg.trainer
            )));
        }
    }
    if let Some(e) = &failure {
        s.events
            .push(json!({ "event": "error", "stage": s.rows.len(), "message": e.to_string() }));
    }
    let defined = cfg.trainer != Trainer::NonContinual;
    s.finish(zero_shot, failure, defined)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in [
            Trainer::PromptOnly,
            Trainer::PromptPlusLora,
            Trainer::FullFinetune,
            Trainer::ZeroShot,
            Trainer::NonContinual,
        ] {
            assert_eq!(t.to_string().parse::<Trainer>().unwrap(), t);
        }
        assert_eq!(
            "domain_incremental".parse::<Mode>().unwrap(),
            Mode::DomainIncremental
        );
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn config_validation_and_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.effective_reuse_epochs(), 3);
        assert!(!c.in_place() && c.freezes());
        let d = RunConfig {
            mode: Mode::DomainIncremental,
            ..RunConfig::default()
        };
        assert!(d.in_place() && !d.freezes());
        assert!(RunConfig {
            tau_align: 1.0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            tokens: 0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        let json = r#"{"k": 4, "bogus": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }
}
