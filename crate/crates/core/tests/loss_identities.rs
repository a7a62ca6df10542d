mod common;

#[test]
fn disen_vanishes_on_orthogonal_embeddings() {
    for s in 0..100 {
        assert_eq!(common::orthogonal_disen(s), 0.0);
    }
}

#[test]
fn contrastive_is_log_pool_size_under_uniform_similarity() {
    for n in [2usize, 5, 17] {
        let (a, b) = common::uniform_contrastive(n);
        let expect = (n as f64).ln();
        assert!((a - expect).abs() <= 1e-9, "N={n}: {a}");
        assert!((b - expect).abs() <= 1e-9, "N={n}: {b}");
    }
}

#[test]
fn total_loss_is_weighted_sum_of_terms() {
    for s in 0..50 {
        let gap = common::compositionality_gap(s);
        assert!(gap <= 1e-12, "seed {s}: gap {gap}");
    }
}
