use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sparc_core::{AccuracyMatrix, RunOutcome, SparcError, TransferReport};

use crate::CliError;

pub const ACCURACY_CSV: &str = "accuracy_matrix.csv";
pub const TRANSFER_JSON: &str = "transfer_report.json";
pub const PROMPT_STORE: &str = "prompt_store.spps";
pub const RUN_LOG: &str = "run_log.jsonl";

/// Contents of `transfer_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub trainer: String,
    pub mode: String,
    pub complete: bool,
    pub error: Option<String>,
    pub datasets: Vec<String>,
    pub zero_shot: Vec<f64>,
    pub base_digest: String,
    pub transfer: Option<TransferReport>,
    pub decisions: Vec<Value>,
}

impl RunSummary {
    pub fn from_outcome(o: &RunOutcome) -> RunSummary {
        RunSummary {
            trainer: o.trainer.to_string(),
            mode: o.mode.to_string(),
            complete: o.is_complete(),
            error: o.failure.as_ref().map(ToString::to_string),
            datasets: o.matrix.datasets.clone(),
            zero_shot: o.zero_shot.clone(),
            base_digest: format!("{:016x}", o.base_digest),
            transfer: o.transfer.clone(),
            decisions: o
                .events
                .iter()
                .filter(|e| e["event"] == "decision")
                .cloned()
                .collect(),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| SparcError::Data(format!("cannot read {}: {e}", path.display())).into())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.4}"))
}

/// Write `report.md`, `forgetting.csv`, `params.csv` and a copy of the
/// accuracy matrix into `out`.
pub fn render(run_dir: &Path, out: &Path) -> Result<(), CliError> {
    let csv = read(&run_dir.join(ACCURACY_CSV))?;
    let matrix = AccuracyMatrix::from_csv(&csv)?;
    let summary: RunSummary =
        serde_json::from_str(&read(&run_dir.join(TRANSFER_JSON))?).map_err(SparcError::from)?;
    let n = matrix.datasets.len();
    let t = summary.transfer.as_ref();
    let forgetting = |j: usize| t.and_then(|t| t.forgetting.as_ref()).map(|f| f[j]);
    let drop = |j: usize| t.and_then(|t| t.absolute_drop.as_ref()).map(|f| f[j]);
    let fwd = |j: usize| t.map(|t| t.forward_transfer[j]);

    let mut fcsv = String::from("dataset,forgetting,absolute_drop,forward_transfer,zero_shot\n");
    for j in 0..n {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        let zs = summary.zero_shot.get(j).copied();
        writeln!(
            fcsv,
            "{},{},{},{},{}",
            matrix.datasets[j],
            opt(forgetting(j)),
            opt(drop(j)),
            opt(fwd(j)),
            opt(zs)
        )
        .unwrap();
    }
    let params = t.map(|t| t.params).unwrap_or_default();
    let pcsv = format!(
        "trainer,trainable,total,fraction\n{},{},{},{:?}\n",
        summary.trainer, params.trainable, params.total, params.fraction
    );

    let mut md = format!("# Run report: {} ({})\n\n", summary.trainer, summary.mode);
    if let Some(e) = &summary.error {
        writeln!(md, "Run stopped early: {e}\n").unwrap();
    }
    md.push_str("## Forgetting\n\n| dataset | forgetting | absolute drop | forward transfer |\n|---|---|---|---|\n");
    for j in 0..n {
        writeln!(
            md,
            "| {} | {} | {} | {} |",
            matrix.datasets[j],
            cell(forgetting(j)),
            cell(drop(j)),
            cell(fwd(j))
        )
        .unwrap();
    }
    let avg = t.and_then(|t| t.avg_forgetting);
    let ret = t.and_then(|t| t.backward_retention);
    writeln!(
        md,
        "\nAverage forgetting: {}. Backward retention: {}.\n",
        cell(avg),
        cell(ret)
    )
    .unwrap();
    md.push_str("## Accuracy matrix\n\nRows are training stages, columns are evaluated datasets.\n\n| after | ");
    md.push_str(&matrix.datasets.join(" | "));
    md.push_str(" |\n|---|");
    md.push_str(&"---|".repeat(n));
    md.push('\n');
    for (i, stage) in matrix.stages.iter().enumerate() {
        let row: Vec<String> = matrix
            .values
            .row(i)
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect();
        writeln!(md, "| {stage} | {} |", row.join(" | ")).unwrap();
    }
    md.push_str(
        "\n## Parameters\n\n| trainer | trainable | total | fraction |\n|---|---|---|---|\n",
    );
    writeln!(
        md,
        "| {} | {} | {} | {:.6}% |",
        summary.trainer,
        params.trainable,
        params.total,
        100.0 * params.fraction
    )
    .unwrap();

    fs::create_dir_all(out).map_err(SparcError::from)?;
    let put = |name: &str, body: &str| fs::write(out.join(name), body).map_err(SparcError::from);
    put("report.md", &md)?;
    put("forgetting.csv", &fcsv)?;
    put("params.csv", &pcsv)?;
    if out != run_dir {
        put(ACCURACY_CSV, &csv)?;
    }
    println!("report written to {}", out.join("report.md").display());
    Ok(())
}
