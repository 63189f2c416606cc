//! Comparing task subspaces, deciding prompt reuse, and building orthogonal
//! bases for novel tasks.

use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::error::{ensure_dims, Result, SparcError};
use crate::linalg::{dot_slice, norm, Matrix, SubspaceBasis};
use crate::linalg::{
    mean_center, numerical_rank, orthogonal_complement, orthonormalize, pca, scrub_against,
};
use crate::prompt::PromptStore;

/// Largest `k₁·k₂` for which the similarity matrix is written to JSON.
pub const MAX_SERIALIZED_SIM: usize = 10_000;

const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub sim: Matrix,
    pub per_component_max: Vec<f64>,
    pub aligned_count: usize,
    pub overlap_pct: f64,
    pub tau: f64,
    pub best_match_prompt: Option<String>,
}

impl Serialize for OverlapReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let with_sim = self.sim.rows() * self.sim.cols() <= MAX_SERIALIZED_SIM;
        let mut st = s.serialize_struct("OverlapReport", 7)?;
        st.serialize_field("k_new", &self.sim.rows())?;
        st.serialize_field("k_stored", &self.sim.cols())?;
        if with_sim {
            let rows: Vec<&[f64]> = self.sim.iter_rows().collect();
            st.serialize_field("sim", &rows)?;
        } else {
            st.skip_field("sim")?;
        }
        st.serialize_field("per_component_max", &self.per_component_max)?;
        st.serialize_field("aligned_count", &self.aligned_count)?;
        st.serialize_field("overlap_pct", &self.overlap_pct)?;
        st.serialize_field("tau", &self.tau)?;
        st.serialize_field("best_match_prompt", &self.best_match_prompt)?;
        st.end()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
#[serde(tag = "kind", content = "prompt", rename_all = "snake_case")]
pub enum DecisionKind {
    Reuse(String),
    NewOrthogonal,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ReuseDecision {
    pub kind: DecisionKind,
    /// One report per stored prompt, in store order.
    pub overlaps: Vec<(String, OverlapReport)>,
}

/// `S[i,j] = cos(p1_i, p2_j)`.
pub fn cosine_similarity_matrix(p1: &Matrix, p2: &Matrix) -> Result<Matrix> {
    ensure_dims!(
        p1.cols() == p2.cols(),
        "component widths differ: {} vs {}",
        p1.cols(),
        p2.cols()
    );
    let norms = |m: &Matrix| -> Result<Vec<f64>> {
        m.iter_rows()
            .enumerate()
            .map(|(i, r)| {
                let n = norm(r);
                if n > MIN_ROW_NORM {
                    Ok(n)
                } else {
                    Err(SparcError::Validation(format!(
                        "component row {i} has zero norm"
                    )))
                }
            })
            .collect()
    };
    let (n1, n2) = (norms(p1)?, norms(p2)?);
    Ok(Matrix::from_fn(p1.rows(), p2.rows(), |i, j| {
        (dot_slice(p1.row(i), p2.row(j)) / (n1[i] * n2[j])).clamp(-1.0, 1.0)
    }))
}

/// Fraction of rows of `s` whose best |cos| exceeds `tau` (strictly).
pub fn overlap_percentage(s: &Matrix, tau: f64) -> Result<OverlapReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SparcError::Parameter(format!("tau = {tau} outside (0, 1)")));
    }
    if s.rows() == 0 || s.cols() == 0 {
        return Err(SparcError::Validation("empty similarity matrix".into()));
    }
    let per_component_max: Vec<f64> = s
        .iter_rows()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let aligned_count = per_component_max.iter().filter(|&&m| m > tau).count();
    Ok(OverlapReport {
        sim: s.clone(),
        overlap_pct: aligned_count as f64 / s.rows() as f64,
        per_component_max,
        aligned_count,
        tau,
        best_match_prompt: None,
    })
}

/// Overlap of `new` against `stored` (denominator is `new`'s rank).
pub fn basis_overlap(
    new: &SubspaceBasis,
    stored: &SubspaceBasis,
    tau: f64,
) -> Result<OverlapReport> {
    overlap_percentage(
        &cosine_similarity_matrix(&new.components, &stored.components)?,
        tau,
    )
}

/// Reuse the stored prompt with the highest overlap if it exceeds
/// `tau_reuse`; ties go to the earliest record.
pub fn decide(
    new_basis: &SubspaceBasis,
    store: &PromptStore,
    tau_align: f64,
    tau_reuse: f64,
) -> Result<ReuseDecision> {
    if !(0.0..1.0).contains(&tau_reuse) {
        return Err(SparcError::Parameter(format!(
            "tau_reuse = {tau_reuse} outside [0, 1)"
        )));
    }
    let mut overlaps = Vec::with_capacity(store.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, rec) in store.records().iter().enumerate() {
        let mut rep = basis_overlap(new_basis, &rec.basis, tau_align)?;
        rep.best_match_prompt = Some(rec.prompt.id.clone());
        if rep.overlap_pct > tau_reuse && best.is_none_or(|(_, b)| rep.overlap_pct > b) {
            best = Some((i, rep.overlap_pct));
        }
        overlaps.push((rec.prompt.id.clone(), rep));
    }
    let kind = match best {
        Some((i, _)) => DecisionKind::Reuse(store.records()[i].prompt.id.clone()),
        None => DecisionKind::NewOrthogonal,
    };
    Ok(ReuseDecision { kind, overlaps })
}

/// `pca(x, k)` with `k` lowered to the data's numerical rank (with a
/// warning) when the request exceeds it.
pub fn fit_subspace(x: &Matrix, k: usize) -> Result<SubspaceBasis> {
    if k == 0 {
        return Err(SparcError::Parameter("k must be at least 1".into()));
    }
    let rank = numerical_rank(x)?;
    if rank == 0 {
        return Err(SparcError::DegenerateData(
            "embeddings have zero variance".into(),
        ));
    }
    let k_eff = k.min(rank).min(x.rows().saturating_sub(1).max(1));
    if k_eff < k {
        log::warn!("requested k = {k} exceeds the data rank {rank}; using k = {k_eff}");
    }
    pca(x, k_eff)
}

/// Row-orthonormal span of every stored component (empty when the store is).
pub fn stored_span(store: &PromptStore, dim: usize) -> Result<Matrix> {
    let mut all = Matrix::zeros(0, dim);
    for rec in store.records() {
        all = all.vstack(&rec.basis.components)?;
    }
    if all.rows() == 0 {
        return Ok(all);
    }
    orthonormalize(&all)
}

/// PCA of the part of `x_new` orthogonal to every stored subspace.
///
/// If that residual has rank below `k`, `k` shrinks to the rank with a
/// warning. The returned basis keeps the mean of `x_new` itself so expanded
/// prompts stay near the new data; only the components are constrained.
pub fn orthogonal_subspace(x_new: &Matrix, store: &PromptStore, k: usize) -> Result<SubspaceBasis> {
    if k == 0 {
        return Err(SparcError::Parameter("k must be at least 1".into()));
    }
    let v = stored_span(store, x_new.cols())?;
    if v.rows() == 0 {
        return pca(x_new, k);
    }
    let x_orth = orthogonal_complement(x_new, &v)?;
    let rank = numerical_rank(&x_orth)?;
    if rank == 0 {
        return Err(SparcError::DegenerateData(
            "new data lies inside the stored subspaces; use a smaller k or force reuse".into(),
        ));
    }
    let k_eff = k.min(rank).min(x_new.rows().saturating_sub(1).max(1));
    if k_eff < k {
        log::warn!("orthogonal residual has rank {rank}; reducing k from {k} to {k_eff}");
    }
    let b = pca(&x_orth, k_eff)?;
    let components = scrub_against(&b.components, &v)?;
    let kept = components.rows();
    if kept == 0 {
        return Err(SparcError::DegenerateData(
            "orthogonal components vanished after projection".into(),
        ));
    }
    let (_, mean) = mean_center(x_new)?;
    SubspaceBasis::new(
        mean,
        components,
        b.eigenvalues[..kept].to_vec(),
        b.total_variance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{init_prompt, PromptRecord};

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn basis_of(rows: Vec<Vec<f64>>) -> SubspaceBasis {
        let d = rows[0].len();
        let k = rows.len();
        let eig: Vec<f64> = (0..k).map(|i| (k - i) as f64).collect();
        SubspaceBasis::new(
            vec![0.0; d],
            Matrix::from_rows(&rows).unwrap(),
            eig,
            k as f64 * 2.0,
        )
        .unwrap()
    }

    fn store_of(bases: Vec<SubspaceBasis>) -> PromptStore {
        let mut s = PromptStore::new();
        for (i, b) in bases.into_iter().enumerate() {
            let p = init_prompt(&b, 2, i as u64)
                .unwrap()
                .with_id(format!("p{i}"));
            s.insert(PromptRecord {
                task_id: format!("t{i}"),
                basis: b,
                prompt: p,
                adapters: None,
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn self_similarity_is_identity() {
        let p = Matrix::from_rows(&[e(4, 0), e(4, 2)]).unwrap();
        assert_eq!(
            cosine_similarity_matrix(&p, &p).unwrap(),
            Matrix::identity(2)
        );
        let q = Matrix::from_rows(&[e(4, 1), e(4, 3)]).unwrap();
        assert_eq!(
            cosine_similarity_matrix(&p, &q).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(cosine_similarity_matrix(&p, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn direct_count_example() {
        let s = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.4, 0.2], vec![0.0, -0.6]]).unwrap();
        let r = overlap_percentage(&s, 0.5).unwrap();
        assert_eq!(r.per_component_max, vec![0.9, 0.4, 0.6]);
        assert_eq!(r.aligned_count, 2);
        assert_eq!(r.overlap_pct, 2.0 / 3.0);
        assert_eq!(
            overlap_percentage(&Matrix::identity(5), 0.5)
                .unwrap()
                .overlap_pct,
            1.0
        );
        assert_eq!(
            overlap_percentage(&Matrix::zeros(5, 5), 0.5)
                .unwrap()
                .overlap_pct,
            0.0
        );
        assert!(overlap_percentage(&s, 1.0).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let s = Matrix::from_rows(&[vec![0.5]]).unwrap();
        assert_eq!(overlap_percentage(&s, 0.5).unwrap().aligned_count, 0);
    }

    #[test]
    fn decisions() {
        let b = basis_of(vec![e(4, 0), e(4, 1)]);
        assert_eq!(
            decide(&b, &PromptStore::new(), 0.5, 0.5).unwrap().kind,
            DecisionKind::NewOrthogonal
        );
        let store = store_of(vec![basis_of(vec![e(4, 2), e(4, 3)]), b.clone(), b.clone()]);
        let d = decide(&b, &store, 0.5, 0.5).unwrap();
        assert_eq!(d.kind, DecisionKind::Reuse("p1".into()));
        assert_eq!(d.overlaps.len(), 3);
        assert_eq!(d.overlaps[0].1.overlap_pct, 0.0);
    }

    #[test]
    fn axis_separable_orthogonal_basis() {
        let store = store_of(vec![basis_of(vec![e(3, 0)])]);
        let x = Matrix::from_fn(6, 3, |i, j| {
            if j == 0 {
                5.0 * i as f64
            } else if j == 1 {
                (i % 3) as f64
            } else {
                0.0
            }
        });
        let b = orthogonal_subspace(&x, &store, 1).unwrap();
        assert!((b.components.get(0, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn data_inside_stored_span_is_degenerate() {
        let store = store_of(vec![basis_of(vec![e(3, 0), e(3, 1)])]);
        let x = Matrix::from_fn(5, 3, |i, j| if j < 2 { (i * (j + 1)) as f64 } else { 0.0 });
        assert!(matches!(
            orthogonal_subspace(&x, &store, 1),
            Err(SparcError::DegenerateData(_))
        ));
    }

    #[test]
    fn sim_is_omitted_for_large_reports() {
        let small = overlap_percentage(&Matrix::identity(3), 0.5).unwrap();
        let v = serde_json::to_value(&small).unwrap();
        assert!(v.get("sim").is_some());
        let big = overlap_percentage(&Matrix::zeros(101, 100), 0.5).unwrap();
        let v = serde_json::to_value(&big).unwrap();
        assert!(v.get("sim").is_none());
        assert_eq!(v["aligned_count"], 0);
    }
}
