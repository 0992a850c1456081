use proptest::prelude::*;

use tunembed::audio_branch::{binary_loss, hinge_loss, multi_loss};
use tunembed::embedding::EMBEDDING_DIM;
use tunembed::eval::{auc, ScoredPair};
use tunembed::index::{EmbeddingStore, StoreKind};
use tunembed::train::{split_dataset, Interaction, Nesterov, SplitMode, SplitSpec};
use tunembed::transfer::{Pca, SvmModel};

fn vec40() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, EMBEDDING_DIM).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn scaled(v: &[f32], s: f32) -> Vec<f32> {
    v.iter().map(|x| x * s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_positive_rescaling(u in vec40(), p in vec40(), n1 in vec40(), n2 in vec40(), s in 0.01f32..100.0) {
        let base = hinge_loss(&u, &p, &[&n1, &n2], 0.2).unwrap();
        let moved = hinge_loss(&scaled(&u, s), &p, &[&n1, &scaled(&n2, s)], 0.2).unwrap();
        prop_assert!((base - moved).abs() < 1e-5);
        let base = multi_loss(&u, &p, &[&n1]).unwrap();
        prop_assert!((base - multi_loss(&u, &scaled(&p, s), &[&n1]).unwrap()).abs() < 1e-5);
        let base = binary_loss(&u, &p, true).unwrap();
        prop_assert!((base - binary_loss(&scaled(&u, s), &p, true).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn hinge_is_bounded(u in vec40(), p in vec40(), negs in prop::collection::vec(vec40(), 1..6)) {
        let refs: Vec<&[f32]> = negs.iter().map(Vec::as_slice).collect();
        let l = hinge_loss(&u, &p, &refs, 0.2).unwrap();
        prop_assert!(l >= 0.0 && l <= negs.len() as f64 * 2.2 + 1e-9);
    }

    #[test]
    fn auc_survives_monotone_transforms(
        scores in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60),
    ) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let pairs: Vec<ScoredPair> = scores.iter().map(|&(s, l)| ScoredPair::new("u", "t", s, l)).collect();
        let moved: Vec<ScoredPair> = scores.iter().map(|&(s, l)| ScoredPair::new("u", "t", (s * 0.5).exp() + 3.0, l)).collect();
        let a = auc(&pairs).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - auc(&moved).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn store_round_trip_is_bit_exact(vs in prop::collection::vec(vec40(), 0..20)) {
        let store = EmbeddingStore::build(StoreKind::Audio, vs.into_iter().enumerate().map(|(i, v)| (format!("id{i}"), v))).unwrap();
        let bytes = store.to_bytes().unwrap();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn top_n_is_sorted_and_sized(vs in prop::collection::vec(vec40(), 1..30), q in vec40(), n in 1usize..40) {
        let store = EmbeddingStore::build(StoreKind::User, vs.into_iter().enumerate().map(|(i, v)| (format!("u{i:02}"), v))).unwrap();
        let top = store.top_n(&q, n).unwrap();
        prop_assert_eq!(top.len(), n.min(store.len()));
        for w in top.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
    }

    #[test]
    fn learning_rate_never_increases(lr0 in 0.001f64..1.0, decay in 0.0f64..0.1, steps in 1usize..50) {
        let mut opt = Nesterov::new(lr0, 0.9, decay).unwrap();
        let mut params = tunembed::nd::ParamSet::new();
        params.insert("w", tunembed::nd::Tensor::vector(vec![1.0f32]).with_grad());
        let grads = params.clone();
        let mut last = opt.learning_rate();
        for _ in 0..steps {
            opt.step(&mut params, &grads).unwrap();
            prop_assert!(opt.learning_rate() <= last);
            last = opt.learning_rate();
        }
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(seed in any::<u64>(), users in 1usize..6, extra in 0usize..8, disjoint in any::<bool>()) {
        let mut rows = Vec::new();
        for u in 0..users {
            for (k, liked) in [(10 + extra, true), (10 + (extra * 3) % 7, false)] {
                for t in 0..k {
                    rows.push(Interaction {
                        user: format!("u{u}"),
                        track: format!("{}{t}", if liked { "l" } else { "d" }),
                        album: "al".into(),
                        artist: "ar".into(),
                        liked,
                        timestamp: t as i64,
                    });
                }
            }
        }
        let mode = if disjoint { SplitMode::DisjointUsers } else { SplitMode::PerUser };
        let s = split_dataset(&rows, &SplitSpec::new(mode, seed)).unwrap();
        let mut all: Vec<Interaction> = s.parts().iter().flat_map(|p| p.iter().cloned()).collect();
        all.sort();
        let mut want = rows.clone();
        want.sort();
        prop_assert_eq!(all, want);
        prop_assert_eq!(s, split_dataset(&rows, &SplitSpec::new(mode, seed)).unwrap());
    }

    #[test]
    fn pca_components_are_orthonormal_and_ordered(
        data in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 8..30),
        k in 1usize..6,
    ) {
        let pca = Pca::fit(&data, k).unwrap();
        let c = pca.components();
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-5);
            }
        }
        for w in pca.explained_variance().windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svm_multipliers_stay_in_the_box(
        data in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 3), 0usize..3), 6..30),
        c in 0.1f64..5.0,
    ) {
        let (x, y): (Vec<Vec<f64>>, Vec<usize>) = data.into_iter().unzip();
        let mut classes = y.clone();
        classes.sort();
        classes.dedup();
        prop_assume!(classes.len() >= 2);
        let model = SvmModel::fit(&x, &y, 0.5, c).unwrap();
        for (_, _, m) in model.machines() {
            prop_assert!(m.alpha().iter().all(|&a| (0.0..=c).contains(&a)));
            prop_assert!(m.kkt_gap() <= 1e-3);
        }
    }
}
