use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sparc_core::data::{export_jsonl, load_jsonl, pretraining_corpus};
use sparc_core::model::{embed_dataset, load_checkpoint, pretrain_base, save_checkpoint};
use sparc_core::subspace::{basis_overlap, fit_subspace};
use sparc_core::{DatasetKind, SparcError};

use crate::config::CliConfig;
use crate::report::{RunSummary, ACCURACY_CSV, PROMPT_STORE, RUN_LOG, TRANSFER_JSON};
use crate::{CliError, Common};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| SparcError::from(e).into())
}

fn to_json(v: &impl serde::Serialize) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(SparcError::from)? + "\n")
}

pub fn pretrain(common: &Common, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = CliConfig::load(common.config.as_deref(), &common.overrides(out))?;
    let out = cfg.out_dir()?;
    let specs = if cfg.pretrain_domains.is_empty() {
        &cfg.domains
    } else {
        &cfg.pretrain_domains
    };
    if specs.is_empty() {
        return Err(CliError::Usage(
            "no pretrain_domains or domains to build a corpus from".into(),
        ));
    }
    let corpus = pretraining_corpus(specs, cfg.data_seed)?;
    let (lm, rep) = pretrain_base(&corpus, cfg.model.clone(), &cfg.pretrain)?;
    save_checkpoint(&lm, out)?;
    println!(
        "held-out loss {:.4} (initial {:.4}, uniform {:.4})",
        rep.heldout_loss, rep.initial_heldout_loss, rep.uniform_loss
    );
    println!(
        "weight digest {:016x} written to {}",
        lm.weight_digest(),
        out.display()
    );
    Ok(())
}

pub fn run(common: &Common, model: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = CliConfig::load(common.config.as_deref(), &common.overrides(out))?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.run.validate()?;
    let lm = load_checkpoint(model)?;
    let datasets = cfg.datasets(common.lenient)?;
    let outcome = sparc_core::run(&lm, &datasets, &cfg.run)?;
    fs::create_dir_all(&out).map_err(SparcError::from)?;
    write(&out.join(ACCURACY_CSV), outcome.matrix.to_csv())?;
    write(&out.join(RUN_LOG), outcome.log_jsonl())?;
    outcome.store.save(&out.join(PROMPT_STORE))?;
    let summary = RunSummary::from_outcome(&outcome);
    write(&out.join(TRANSFER_JSON), to_json(&summary)?)?;
    write(&out.join("config.json"), to_json(&cfg)?)?;
    if let Some(e) = outcome.failure {
        return Err(e.into());
    }
    match outcome.transfer.as_ref().and_then(|t| t.avg_forgetting) {
        Some(f) => println!(
            "{} stages, average forgetting {f:.4}",
            outcome.matrix.stages.len()
        ),
        None => println!("{} stages, forgetting N/A", outcome.matrix.stages.len()),
    }
    println!("reports written to {}", out.display());
    Ok(())
}

pub fn analyze_overlap(
    common: &Common,
    model: &Path,
    files: &[PathBuf],
    kind: &str,
    tau: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = CliConfig::load(common.config.as_deref(), &common.overrides(out))?;
    let kind = match kind {
        "lm" => DatasetKind::Lm,
        "classification" => DatasetKind::Classification,
        other => return Err(CliError::Usage(format!("unknown dataset kind {other:?}"))),
    };
    let tau = tau.unwrap_or(cfg.run.tau_align);
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CliError::Usage(format!("--tau {tau} outside (0, 1)")));
    }
    let k = cfg.run.k;
    let lm = load_checkpoint(model)?;
    let mut datasets = if cfg.domains.is_empty() && cfg.jsonl.is_empty() {
        Vec::new()
    } else {
        cfg.datasets(common.lenient)?
    };
    for f in files {
        datasets.push(load_jsonl(f, kind, common.lenient)?);
    }
    if datasets.is_empty() {
        return Err(CliError::Usage(
            "no datasets: pass --datasets or configure domains".into(),
        ));
    }
    let mut bases = Vec::new();
    let mut info = Vec::new();
    for ds in &datasets {
        let e = embed_dataset(&lm, &ds.id, &ds.documents(), cfg.run.pooling)?;
        let b = fit_subspace(&e.x, k)?;
        info.push(json!({
            "id": ds.id,
            "documents": ds.len(),
            "k_requested": k,
            "k": b.rank(),
            "k_reduced": b.rank() < k,
            "retained_variance": b.retained_variance(),
        }));
        bases.push(b);
    }
    let mut pairs = Vec::new();
    for (i, a) in bases.iter().enumerate() {
        for (j, b) in bases.iter().enumerate() {
            let rep = basis_overlap(a, b, tau)?;
            log::info!(
                "{} vs {}: overlap {:.3}",
                datasets[i].id,
                datasets[j].id,
                rep.overlap_pct
            );
            pairs.push(json!({ "new": datasets[i].id, "stored": datasets[j].id, "report": rep }));
        }
    }
    let doc: Value =
        json!({ "tau": tau, "pooling": cfg.run.pooling, "datasets": info, "pairs": pairs });
    let text = to_json(&doc)?;
    match &cfg.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn export_data(common: &Common, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = CliConfig::load(common.config.as_deref(), &common.overrides(out))?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(out).map_err(SparcError::from)?;
    for ds in cfg.datasets(common.lenient)? {
        let p = out.join(format!("{}.jsonl", ds.id));
        export_jsonl(&ds, &p)?;
        println!("{} examples -> {}", ds.len(), p.display());
    }
    Ok(())
}
