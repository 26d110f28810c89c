//! Property-based invariants for the numeric core.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use oodsynth::backbone::{
    patch_context_incorporate, vv_attention, ContextConfig, Padding, PatchGrid, VVAttentionConfig,
};
use oodsynth::scoring::auroc;

fn grid_strategy(max_side: usize, max_dim: usize) -> impl Strategy<Value = PatchGrid> {
    (1..=max_side, 1..=max_side, 1..=max_dim).prop_flat_map(|(rows, cols, dim)| {
        proptest::collection::vec(-3.0f64..3.0, rows * cols * dim).prop_map(move |values| {
            PatchGrid::new(Array3::from_shape_vec((rows, cols, dim), values).unwrap()).unwrap()
        })
    })
}

fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (id.len() * ood.len()) as f64
}

proptest! {
    #[test]
    fn context_incorporation_is_linear(
        grid_values in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 2),
        other_values in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 2),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        beta in 0.0f64..1.0,
        zero_pad in any::<bool>(),
    ) {
        let g1 = PatchGrid::new(Array3::from_shape_vec((3, 4, 2), grid_values).unwrap()).unwrap();
        let g2 = PatchGrid::new(Array3::from_shape_vec((3, 4, 2), other_values).unwrap()).unwrap();
        let cfg = ContextConfig {
            beta_ctx: beta,
            padding: if zero_pad { Padding::Zero } else { Padding::Replicate },
        };
        let combined = PatchGrid::new(g1.values() * a + g2.values() * b).unwrap();
        let lhs = patch_context_incorporate(&combined, &cfg).unwrap();
        let r1 = patch_context_incorporate(&g1, &cfg).unwrap();
        let r2 = patch_context_incorporate(&g2, &cfg).unwrap();
        let rhs = r1.values() * a + r2.values() * b;
        for (x, y) in lhs.values().iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn vv_attention_stays_in_convex_hull(grid in grid_strategy(5, 4), scale in 0.05f64..3.0) {
        let out = vv_attention(&grid, &VVAttentionConfig { scale }).unwrap();
        let n = grid.rows() * grid.cols();
        let flat = grid.values().to_shape((n, grid.dim())).unwrap();
        for d in 0..grid.dim() {
            let col = flat.column(d);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (i, j) in out.cells() {
                let v = out.values()[(i, j, d)];
                prop_assert!(v >= min - 1e-6 && v <= max + 1e-6);
            }
        }
    }

    #[test]
    fn auroc_equals_pairwise_oracle(
        id in proptest::collection::vec(0u8..12, 1..60),
        ood in proptest::collection::vec(0u8..12, 1..60),
    ) {
        let id: Vec<f64> = id.into_iter().map(|v| v as f64 / 12.0).collect();
        let ood: Vec<f64> = ood.into_iter().map(|v| v as f64 / 12.0).collect();
        let fast = auroc(&id, &ood).unwrap();
        let slow = auroc_pairwise(&id, &ood);
        prop_assert!((fast - slow).abs() < 1e-9);
    }

    #[test]
    fn auroc_complement_sums_to_one(
        id in proptest::collection::vec(0.0f64..1.0, 1..40),
        ood in proptest::collection::vec(0.0f64..1.0, 1..40),
    ) {
        // Continuous draws are tie-free with probability one.
        let forward = auroc(&id, &ood).unwrap();
        let reverse = auroc(&ood, &id).unwrap();
        prop_assert!((forward + reverse - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embeddings_similarity_bounded(values in proptest::collection::vec(-4.0f64..4.0, 6)) {
        let raw = ndarray::Array1::from_vec(values);
        if let Ok(unit) = oodsynth::numeric::l2_normalize(&raw.view()) {
            let rows = Array2::from_shape_fn((3, 6), |(m, d)| if d == m { 1.0 } else { 0.0 });
            let emb = oodsynth::textbank::TextEmbeddings::from_matrix(rows).unwrap();
            let feature = oodsynth::backbone::ImageFeature { vector: unit, normalized: true };
            let sims = oodsynth::textbank::similarity(&feature, &emb).unwrap();
            for &s in sims.iter() {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
            }
        }
    }
}
