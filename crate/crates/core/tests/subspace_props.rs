mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use sparc_core::linalg::{pca, Matrix};
use sparc_core::prompt::PromptStore;
use sparc_core::subspace::{
    basis_overlap, cosine_similarity_matrix, decide, orthogonal_subspace, overlap_percentage,
    stored_span, DecisionKind,
};

fn axes(d: usize, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), d, |r, c| if idx[r] == c { 1.0 } else { 0.0 })
}

/// Cosines of the principal angles between two row spaces.
fn principal_cosines(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
        * DMatrix::from_row_slice(b.rows(), b.cols(), b.data()).transpose();
    m.singular_values().iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn similarity_matches_scalar_cosines(k1 in 1usize..5, k2 in 1usize..5, d in 2usize..9, seed in any::<u64>()) {
        let p1 = gaussian(k1, d, seed);
        let p2 = gaussian(k2, d, seed ^ 7);
        let s = cosine_similarity_matrix(&p1, &p2).unwrap();
        for i in 0..k1 {
            for j in 0..k2 {
                let d: f64 = p1.row(i).iter().zip(p2.row(j)).map(|(a, b)| a * b).sum();
                let c = d / (p1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
                    * p2.row(j).iter().map(|v| v * v).sum::<f64>().sqrt());
                prop_assert!((s.get(i, j) - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_is_non_increasing_in_tau(seed in any::<u64>(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = pca(&gaussian(20, 6, seed), 3).unwrap();
        let b = pca(&gaussian(20, 6, seed ^ 3), 4).unwrap();
        let r_lo = basis_overlap(&a, &b, lo).unwrap();
        let r_hi = basis_overlap(&a, &b, hi).unwrap();
        prop_assert!(r_hi.overlap_pct <= r_lo.overlap_pct);
        prop_assert!(r_hi.aligned_count <= r_lo.aligned_count);
    }

    #[test]
    fn constructed_angles_give_expected_counts(seed in any::<u64>(), k in 1usize..6, tau in 0.1f64..0.9) {
        let f = angle_fixture(seed, 2 * k + 2, k, tau);
        let rep = basis_overlap(&f.new, &f.stored, tau).unwrap();
        prop_assert_eq!(rep.aligned_count, f.expected_aligned);
        for (m, c) in rep.per_component_max.iter().zip(&f.cosines) {
            prop_assert!((m - c).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_components_avoid_every_stored_subspace(seed in any::<u64>()) {
        let (store, x, k) = orthogonality_fixture(seed);
        let b = orthogonal_subspace(&x, &store, k).unwrap();
        for rec in store.records() {
            prop_assert!(max_abs_cos(&b.components, &rec.basis.components) <= 1e-6);
        }
    }

    #[test]
    fn decide_is_pure(seed in any::<u64>(), tau in 0.1f64..0.9) {
        let f = angle_fixture(seed, 10, 4, tau);
        let store = store_of(&[f.stored.clone()]);
        prop_assert_eq!(decide(&f.new, &store, tau, 0.5).unwrap(), decide(&f.new, &store, tau, 0.5).unwrap());
    }
}

#[test]
fn self_and_orthogonal_similarity() {
    let p = random_rotation(5, 1).slice_rows(0, 3);
    assert!(
        cosine_similarity_matrix(&p, &p)
            .unwrap()
            .max_abs_diff(&Matrix::identity(3))
            < 1e-12
    );
    let q = random_rotation(6, 2);
    let s = cosine_similarity_matrix(&q.slice_rows(0, 3), &q.slice_rows(3, 6)).unwrap();
    assert!(s.max_abs() < 1e-12);
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
}

#[test]
fn overlap_is_asymmetric() {
    let one = basis_from_rows(axes(4, &[0]));
    let two = basis_from_rows(axes(4, &[0, 1]));
    assert_eq!(basis_overlap(&one, &two, 0.5).unwrap().overlap_pct, 1.0);
    assert_eq!(basis_overlap(&two, &one, 0.5).unwrap().overlap_pct, 0.5);
}

#[test]
fn reuse_goes_to_the_larger_overlap() {
    let new = basis_from_rows(axes(10, &[0, 1, 2, 3, 4]));
    let a = basis_from_rows(axes(10, &[0, 1, 2, 5, 6]));
    let b = basis_from_rows(axes(10, &[0, 1, 2, 3, 7]));
    let store = store_of(&[a, b]);
    let d = decide(&new, &store, 0.5, 0.5).unwrap();
    assert!((d.overlaps[0].1.overlap_pct - 0.6).abs() < 1e-12);
    assert!((d.overlaps[1].1.overlap_pct - 0.8).abs() < 1e-12);
    assert_eq!(
        d.kind,
        DecisionKind::Reuse(store.records()[1].prompt.id.clone())
    );
    assert_eq!(
        decide(&new, &PromptStore::new(), 0.5, 0.5).unwrap().kind,
        DecisionKind::NewOrthogonal
    );
}

#[test]
fn equal_overlaps_pick_the_earliest_record() {
    let new = basis_from_rows(axes(6, &[0, 1]));
    let a = basis_from_rows(axes(6, &[0, 1, 2]));
    let b = basis_from_rows(axes(6, &[1, 0, 3]));
    let store = store_of(&[a, b]);
    let d = decide(&new, &store, 0.5, 0.5).unwrap();
    assert_eq!(
        d.kind,
        DecisionKind::Reuse(store.records()[0].prompt.id.clone())
    );
}

#[test]
fn six_dim_orthogonal_example() {
    // Stored span {e1, e2}; new data spans {e2, e3, e4}.
    let store = store_of(&[basis_from_rows(axes(6, &[0, 1]))]);
    let coef = gaussian(40, 3, 5);
    let x = Matrix::from_fn(40, 6, |i, j| match j {
        1 => coef.get(i, 0),
        2 => 2.0 * coef.get(i, 1),
        3 => coef.get(i, 2),
        _ => 0.0,
    });
    let b = orthogonal_subspace(&x, &store, 3).unwrap();
    assert_eq!(b.components.rows(), 2);
    let stored = &store.records()[0].basis.components;
    assert!(principal_cosines(&b.components, stored)
        .iter()
        .all(|&c| c <= 1e-6));
    // The two components span exactly {e3, e4}.
    let target = axes(6, &[2, 3]);
    assert!(principal_cosines(&b.components, &target)
        .iter()
        .all(|&c| (c - 1.0).abs() < 1e-9));
}

#[test]
fn empty_store_matches_plain_pca() {
    let x = gaussian(30, 7, 8);
    assert_eq!(
        orthogonal_subspace(&x, &PromptStore::new(), 3).unwrap(),
        pca(&x, 3).unwrap()
    );
    assert_eq!(stored_span(&PromptStore::new(), 7).unwrap().rows(), 0);
}
