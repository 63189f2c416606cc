use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind};
use crate::error::{ensure_dims, Result, SparcError};
use crate::linalg::Matrix;
use crate::model::{encode, Conditioning, ParamCount, TinyLm};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn budget(lm: &TinyLm, cond: &Conditioning<'_>) -> usize {
    lm.config().max_seq - cond.prompt.map_or(0, Matrix::rows)
}

/// Fraction of target positions where the greedy next token matches.
/// Prompt positions are never scored. Classification sets are scored on
/// their verbalizer tokens.
pub fn per_token_accuracy(lm: &TinyLm, cond: Conditioning<'_>, ds: &Dataset) -> Result<f64> {
    let (seqs, _) = ds.sequences(budget(lm, &cond))?;
    let t = cond.prompt.map_or(0, Matrix::rows);
    let w = lm.merged_weights(cond.adapters)?;
    let fixed = Conditioning {
        prompt: cond.prompt,
        adapters: None,
    };
    let parts: Vec<(usize, usize)> = seqs
        .par_iter()
        .map(|s| {
            let logits = forward_with(lm, &w, fixed, &s.tokens)?;
            let mut hit = 0;
            let mut n = 0;
            for p in 1..s.len() {
                if s.target_mask[p] {
                    n += 1;
                    hit += (argmax(logits.row(t + p - 1)) == s.tokens[p]) as usize;
                }
            }
            Ok((hit, n))
        })
        .collect::<Result<_>>()?;
    let (hit, n) = parts.iter().fold((0, 0), |(a, b), (h, c)| (a + h, b + c));
    if n == 0 {
        return Err(SparcError::Data(format!(
            "{}: no target tokens to score",
            ds.id
        )));
    }
    Ok(hit as f64 / n as f64)
}

fn forward_with(
    lm: &TinyLm,
    w: &crate::model::Weights,
    cond: Conditioning<'_>,
    tokens: &[usize],
) -> Result<Matrix> {
    let empty = Matrix::zeros(0, lm.config().d_model);
    lm.logits_with(w, cond.prompt.unwrap_or(&empty), tokens)
}

/// Exact-match accuracy where each example is assigned the verbalizer with
/// the highest summed log-probability after its input.
pub fn classification_accuracy(lm: &TinyLm, cond: Conditioning<'_>, ds: &Dataset) -> Result<f64> {
    if ds.kind != DatasetKind::Classification {
        return Err(SparcError::Data(format!(
            "{} is not a classification set",
            ds.id
        )));
    }
    if ds.labels.is_empty() {
        return Err(SparcError::Data(format!("{}: empty verbalizer set", ds.id)));
    }
    if ds.is_empty() {
        return Err(SparcError::Data(format!("{}: dataset is empty", ds.id)));
    }
    let t = cond.prompt.map_or(0, Matrix::rows);
    let room = budget(lm, &cond);
    let w = lm.merged_weights(cond.adapters)?;
    let fixed = Conditioning {
        prompt: cond.prompt,
        adapters: None,
    };
    let verbal: Vec<Vec<usize>> = ds.labels.iter().map(|l| encode(l)).collect();
    let longest = verbal.iter().map(Vec::len).max().unwrap_or(0);
    let hits: Vec<bool> = ds
        .examples
        .par_iter()
        .map(|ex| {
            let mut input = encode(&ex.input);
            if input.len() + longest > room {
                let keep = room.saturating_sub(longest);
                input.drain(..input.len() - keep.min(input.len()));
            }
            if input.is_empty() {
                return Err(SparcError::Data(format!("{}: example does not fit", ds.id)));
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for (c, v) in verbal.iter().enumerate() {
                let mut toks = input.clone();
                toks.extend(v);
                let logits = forward_with(lm, &w, fixed, &toks)?;
                let score: f64 = v
                    .iter()
                    .enumerate()
                    .map(|(m, &tok)| log_softmax_at(logits.row(t + input.len() + m - 1), tok))
                    .sum();
                if score > best.0 {
                    best = (score, c);
                }
            }
            Ok(ex.label.as_deref() == Some(ds.labels[best.1].as_str()))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// The accuracy recorded in stage matrices: per-token for LM
/// data, label accuracy for classification data.
pub fn evaluate(lm: &TinyLm, cond: Conditioning<'_>, ds: &Dataset) -> Result<f64> {
    match ds.kind {
        DatasetKind::Lm => per_token_accuracy(lm, cond, ds),
        DatasetKind::Classification => classification_accuracy(lm, cond, ds),
    }
}

/// `values[i][j]`: accuracy on dataset `j` after training stage `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub datasets: Vec<String>,
    /// Dataset trained at each completed stage.
    pub stages: Vec<String>,
    pub values: Matrix,
}

impl AccuracyMatrix {
    pub fn is_complete(&self) -> bool {
        self.stages.len() == self.datasets.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("stage,{}\n", self.datasets.join(","));
        for (i, stage) in self.stages.iter().enumerate() {
            out.push_str(stage);
            for v in self.values.row(i) {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<AccuracyMatrix> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| SparcError::Format("empty accuracy matrix CSV".into()))?;
        let datasets: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut stages = Vec::new();
        let mut data = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut cells = line.split(',');
            stages.push(cells.next().unwrap_or_default().to_string());
            let row: Vec<f64> = cells
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SparcError::Format(format!("accuracy CSV row {}: {e}", n + 1)))?;
            if row.len() != datasets.len() {
                return Err(SparcError::Format(format!(
                    "accuracy CSV row {} has {} values, header names {}",
                    n + 1,
                    row.len(),
                    datasets.len()
                )));
            }
            data.extend(row);
        }
        Ok(AccuracyMatrix {
            values: Matrix::new(stages.len(), datasets.len(), data)?,
            datasets,
            stages,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Relative drop from each dataset's peak (from its own stage onward) to
    /// its final accuracy. `None` where forgetting is undefined.
    pub forgetting: Option<Vec<f64>>,
    /// Peak minus final, unnormalized.
    pub absolute_drop: Option<Vec<f64>>,
    /// Mean forgetting over every dataset but the last.
    pub avg_forgetting: Option<f64>,
    /// Accuracy just before a dataset's own stage minus its zero-shot
    /// accuracy; 0 for the first dataset.
    pub forward_transfer: Vec<f64>,
    pub backward_retention: Option<f64>,
    pub params: ParamCount,
}

pub fn compute_transfer(m: &AccuracyMatrix, zero_shot: &[f64]) -> Result<TransferReport> {
    let s = m.datasets.len();
    ensure_dims!(
        m.values.shape() == (s, s) && zero_shot.len() == s,
        "transfer needs a complete {s}x{s} matrix and a zero-shot row of {s}"
    );
    let v = &m.values;
    let mut forgetting = Vec::with_capacity(s);
    let mut drop = Vec::with_capacity(s);
    for j in 0..s {
        let peak = (j..s)
            .map(|i| v.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let fin = v.get(s - 1, j);
        let d = (peak - fin).max(0.0);
        drop.push(d);
        forgetting.push(if peak > 0.0 { d / peak } else { 0.0 });
    }
    let avg = if s > 1 {
        forgetting[..s - 1].iter().sum::<f64>() / (s - 1) as f64
    } else {
        0.0
    };
    let forward_transfer = (0..s)
        .map(|j| {
            if j == 0 {
                0.0
            } else {
                v.get(j - 1, j) - zero_shot[j]
            }
        })
        .collect();
    Ok(TransferReport {
        forgetting: Some(forgetting),
        absolute_drop: Some(drop),
        avg_forgetting: Some(avg),
        forward_transfer,
        backward_retention: Some(1.0 - avg),
        params: ParamCount::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let n = rows[0].len();
        AccuracyMatrix {
            datasets: (0..n).map(|i| format!("d{i}")).collect(),
            stages: (0..rows.len()).map(|i| format!("d{i}")).collect(),
            values: Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
        }
    }

    #[test]
    fn relative_forgetting_example() {
        let t = compute_transfer(&matrix(&[&[0.8, 0.1], &[0.6, 0.7]]), &[0.1, 0.05]).unwrap();
        let f = t.forgetting.unwrap();
        assert!((f[0] - 0.25).abs() < 1e-15);
        assert_eq!(f[1], 0.0);
        assert!((t.forward_transfer[1] - 0.05).abs() < 1e-15);
        assert!((t.avg_forgetting.unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_has_no_forgetting_or_transfer() {
        let t = compute_transfer(&matrix(&[&[0.5, 0.5], &[0.5, 0.5]]), &[0.5, 0.5]).unwrap();
        assert_eq!(t.forgetting.unwrap(), vec![0.0, 0.0]);
        assert_eq!(t.forward_transfer, vec![0.0, 0.0]);
        assert_eq!(t.backward_retention, Some(1.0));
    }

    #[test]
    fn diagonal_gains_keep_full_retention() {
        let t = compute_transfer(
            &matrix(&[&[0.6, 0.2, 0.2], &[0.6, 0.7, 0.2], &[0.6, 0.7, 0.9]]),
            &[0.2; 3],
        )
        .unwrap();
        assert_eq!(t.backward_retention, Some(1.0));
        assert!(compute_transfer(&matrix(&[&[0.5, 0.5]]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = matrix(&[&[0.1 + 0.2, 1.0 / 3.0], &[0.0, 1.0]]);
        assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert!((log_softmax_at(&[0.0, 0.0], 1) - (0.5f64).ln()).abs() < 1e-15);
    }
}
