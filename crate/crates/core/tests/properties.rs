mod common;

use std::path::Path;

use common::*;
use ovvad_core::data::ovff::{decode_matrix, encode_matrix};
use ovvad_core::data::{
    epoch_batches, gen_synthetic, sample_frames, sample_indices, FeatureSequence, Split, SyntheticConfig,
};
use ovvad_core::nas::{splice_insert, Snippet, SnippetSource};
use ovvad_core::numkernel::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e300f64..1e300, 1..50)) {
        let m = Matrix::new(1, row.len(), row).unwrap().row_softmax();
        prop_assert!((m.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ovff_round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 1..200), cols in 1usize..8) {
        let values: Vec<f64> = bits
            .iter()
            .map(|&b| f32::from_bits(b))
            .filter(|v| v.is_finite())
            .map(f64::from)
            .collect();
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let m = Matrix::new(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let bytes = encode_matrix(&m);
        let back = decode_matrix(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(encode_matrix(&back), bytes);
        for (a, b) in back.data().iter().zip(m.data()) {
            prop_assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn sampling_preserves_order_without_duplicates(n in 1usize..2000, max_len in 1usize..300, seed in any::<u64>()) {
        let idx = sample_indices(n, max_len, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(idx.len(), n.min(max_len));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        let again = sample_indices(n, max_len, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(idx, again);
    }

    #[test]
    fn splice_then_remove_restores_normal(n in 1usize..40, m in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = FeatureSequence::new(random_matrix(n, 3, 1.0, &mut rng)).unwrap();
        let snippet = Snippet {
            id: "s".into(),
            features: FeatureSequence::new(random_matrix(m, 3, 1.0, &mut rng)).unwrap(),
            category: "Arson".into(),
            source: SnippetSource::GeneratedVideo,
        };
        let v = splice_insert("n", &normal, &snippet, &mut rng).unwrap();
        prop_assert_eq!(v.features.len(), n + m);
        prop_assert_eq!(v.frame_gt.iter().filter(|&&g| g == 1).count(), m);
        let u = v.provenance.insert_at;
        prop_assert!(u <= n);
        prop_assert!(v.frame_gt[u..u + m].iter().all(|&g| g == 1));
        prop_assert_eq!(v.remove_inserted().unwrap(), normal.features);
    }
}

#[test]
fn long_sequence_sampling_example() {
    let seq = FeatureSequence::new(Matrix::zeros(512, 2)).unwrap();
    let out = sample_frames(&seq, 256, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.len(), 256);
    let short = FeatureSequence::new(Matrix::zeros(100, 2)).unwrap();
    assert_eq!(
        sample_frames(&short, 256, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        short
    );
}

#[test]
fn generated_corpus_contracts() {
    for seed in 0..3 {
        let syn = gen_synthetic(&SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let corpus = syn.to_corpus().unwrap();
        assert_eq!(corpus.catalog.len(), 5);
        assert_eq!(corpus.catalog.base_indices().len(), 3);
        for v in &corpus.videos {
            if v.record.split == Split::Train {
                assert!(v.class_index.is_none_or(|c| corpus.catalog.is_base[c]));
            }
            if let (Some(gt), Some(_)) = (&v.record.frame_gt, v.class_index) {
                let first = gt.iter().position(|&g| g == 1).unwrap();
                let ones = gt.iter().filter(|&&g| g == 1).count();
                assert!(gt[first..first + ones].iter().all(|&g| g == 1));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for batch in epoch_batches(&corpus.manifest, 64, &mut rng).unwrap() {
            let normals = batch.iter().filter(|&&i| corpus.videos[i].is_normal()).count();
            assert_eq!(normals, 32);
        }
    }
}
