use super::idx::*;
use super::partition::*;
use super::*;
use proptest::prelude::*;
use std::collections::HashSet;

fn dummy_balanced(classes: usize, per_class: usize) -> LabeledDataset {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    LabeledDataset::new(Array2::zeros((n, 1)), labels, classes).unwrap()
}

fn assert_is_partition(shards: &[ClientShard], n: usize) {
    let mut seen = HashSet::new();
    for s in shards {
        for &i in &s.indices {
            assert!(i < n, "index out of range");
            assert!(seen.insert(i), "index {i} appears twice");
        }
    }
    assert_eq!(seen.len(), n, "partition does not cover the dataset");
}

fn max_class_share(dataset: &LabeledDataset, shard: &ClientShard) -> f64 {
    let mut counts = vec![0usize; dataset.class_count];
    for &i in &shard.indices {
        counts[dataset.labels[i]] += 1;
    }
    *counts.iter().max().unwrap() as f64 / shard.n() as f64
}

#[test]
fn mixture_zero_sigma_collapses_to_centers() {
    let d = make_synthetic_mixture(3, 4, 5, 2.0, 0.0, 11).unwrap();
    for c in 0..3 {
        let idx = d.class_indices(c);
        let first = d.features.row(idx[0]).to_owned();
        for &i in &idx[1..] {
            assert_eq!(d.features.row(i), first.view());
        }
    }
}

#[test]
fn mixture_is_deterministic() {
    let a = make_synthetic_mixture(4, 6, 20, 3.0, 0.7, 99).unwrap();
    let b = make_synthetic_mixture(4, 6, 20, 3.0, 0.7, 99).unwrap();
    assert_eq!(a, b);
    let c = make_synthetic_mixture(4, 6, 20, 3.0, 0.7, 100).unwrap();
    assert_ne!(a, c);
}

#[test]
fn mixture_with_wide_spread_is_centroid_separable() {
    let d = make_synthetic_mixture(3, 8, 100, 5.0, 0.5, 7).unwrap();
    assert_eq!(nearest_centroid_accuracy(&d), 1.0);
}

#[test]
fn split_train_test_blocks_per_class() {
    let d = make_synthetic_mixture(3, 2, 10, 4.0, 0.1, 5).unwrap();
    let (train, test) = split_train_test(&d, 7, 3).unwrap();
    assert_eq!(train.len(), 21);
    assert_eq!(test.len(), 9);
    for c in 0..3 {
        assert_eq!(train.class_indices(c).len(), 7);
        assert_eq!(test.class_indices(c).len(), 3);
    }
    assert!(split_train_test(&d, 9, 3).is_err());
}

#[test]
fn lda_single_client_takes_everything() {
    let d = dummy_balanced(3, 10);
    let shards = partition_lda(&d, 1, 0.5, 1).unwrap();
    assert_eq!(shards.len(), 1);
    assert_eq!(shards[0].indices, (0..30).collect::<Vec<_>>());
}

#[test]
fn lda_outputs_a_partition() {
    let d = dummy_balanced(5, 40);
    for seed in 0..5 {
        let shards = partition_lda(&d, 7, 0.5, seed).unwrap();
        assert_eq!(shards.len(), 7);
        assert!(shards.iter().all(|s| s.n() >= 1));
        assert_is_partition(&shards, d.len());
    }
}

#[test]
fn lda_high_alpha_concentrates_to_uniform() {
    let d = dummy_balanced(10, 1000);
    let mut bad_seeds = 0;
    for seed in 0..100u64 {
        let shards = partition_lda(&d, 10, 1000.0, seed).unwrap();
        let mut seed_ok = true;
        for s in &shards {
            if max_class_share(&d, s) >= 0.2 {
                seed_ok = false;
            }
            // Total-variation distance of the shard's class histogram
            // from uniform stays small in the high-alpha regime.
            let mut counts = vec![0usize; 10];
            for &i in &s.indices {
                counts[d.labels[i]] += 1;
            }
            let tv: f64 = counts
                .iter()
                .map(|&c| (c as f64 / s.n() as f64 - 0.1).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.1, "seed {seed} client {} tv {tv}", s.owner);
        }
        if !seed_ok {
            bad_seeds += 1;
        }
    }
    assert!(bad_seeds <= 1, "{bad_seeds} of 100 seeds exceeded max-share 0.2");
}

#[test]
fn lda_low_alpha_skews_hard() {
    let d = dummy_balanced(10, 1000);
    let mut mean_of_means = 0.0;
    for seed in 0..100u64 {
        let shards = partition_lda(&d, 10, 0.05, seed).unwrap();
        let m: f64 = shards.iter().map(|s| max_class_share(&d, s)).sum::<f64>() / shards.len() as f64;
        mean_of_means += m / 100.0;
    }
    assert!(mean_of_means > 0.6, "mean max share {mean_of_means}");
}

#[test]
fn lda_rejects_too_small_dataset() {
    let d = dummy_balanced(2, 2);
    assert!(matches!(partition_lda(&d, 5, 1.0, 0), Err(Error::Partition(_))));
}

#[test]
fn two_class_paper_case() {
    let d = dummy_balanced(10, 500);
    let shards = partition_two_class(&d, 10, 500, 3).unwrap();
    assert_eq!(shards.len(), 10);
    for s in &shards {
        assert_eq!(s.n(), 500);
        let classes: HashSet<usize> = s.indices.iter().map(|&i| d.labels[i]).collect();
        assert_eq!(classes.len(), 2, "client {} holds {:?}", s.owner, classes);
        // Even split across the two classes.
        let mut counts = vec![0usize; 10];
        for &i in &s.indices {
            counts[d.labels[i]] += 1;
        }
        assert!(counts.iter().filter(|&&c| c > 0).all(|&c| c == 250));
    }
    assert_is_partition(&shards, d.len());
}

#[test]
fn two_class_insufficient_samples_error() {
    let d = dummy_balanced(4, 10);
    assert!(matches!(
        partition_two_class(&d, 8, 500, 0),
        Err(Error::Partition(_))
    ));
}

#[test]
fn subset_paper_constants_give_dominant_share() {
    let d = dummy_balanced(10, 5010);
    for seed in [0u64, 1, 2] {
        let shards = partition_subset(&d, 10, 4950, 5, 6, seed).unwrap();
        let mut seen = HashSet::new();
        for s in &shards {
            let mut counts = vec![0usize; 10];
            for &i in &s.indices {
                counts[d.labels[i]] += 1;
                assert!(seen.insert(i));
            }
            let dominant = s.owner % 10;
            assert_eq!(counts[dominant], 4950);
            for (c, &cnt) in counts.iter().enumerate() {
                if c != dominant {
                    assert!(cnt == 5 || cnt == 6, "tail count {cnt}");
                }
            }
            let share = counts[dominant] as f64 / s.n() as f64;
            assert!((share - 0.990).abs() < 0.001, "share {share}");
        }
    }
}

#[test]
fn subset_rejects_more_clients_than_classes() {
    let d = dummy_balanced(3, 100);
    assert!(matches!(
        partition_subset(&d, 4, 10, 1, 2, 0),
        Err(Error::Partition(_))
    ));
}

#[test]
fn idx_minimal_label_file_decodes() {
    let bytes = [0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![3, 7]));
}

#[test]
fn idx_images_decode_row_major() {
    let pixels: Vec<u8> = (10..18).collect();
    let bytes = encode_idx_images(2, 2, 2, &pixels).unwrap();
    match parse_idx(&bytes).unwrap() {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels: p,
        } => {
            assert_eq!((count, rows, cols), (2, 2, 2));
            // First image is the first 4 bytes, rows before columns.
            assert_eq!(&p[..4], &[10, 11, 12, 13]);
            assert_eq!(&p[4..], &[14, 15, 16, 17]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_short_payload_reports_expected_vs_actual() {
    let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 1, 2];
    match parse_idx(&bytes) {
        Err(Error::IdxParse { offset, reason }) => {
            assert_eq!(offset, 8);
            assert!(reason.contains("2") && reason.contains("3"), "{reason}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_bad_magic_at_offset_zero() {
    let bytes = [0, 0, 9, 9, 0, 0, 0, 0];
    match parse_idx(&bytes) {
        Err(Error::IdxParse { offset: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_truncated_header_offset_is_end() {
    match parse_idx(&[0, 0, 8]) {
        Err(Error::IdxParse { offset: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    match parse_idx(&[0, 0, 8, 3, 0, 0, 0, 1, 0, 0]) {
        Err(Error::IdxParse { offset: 10, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_dimension_overflow_rejected() {
    let mut bytes = vec![0, 0, 8, 3];
    bytes.extend_from_slice(&u32::MAX.to_be_bytes());
    bytes.extend_from_slice(&u32::MAX.to_be_bytes());
    bytes.extend_from_slice(&2u32.to_be_bytes());
    match parse_idx(&bytes) {
        Err(Error::IdxParse { offset: 4, reason }) => assert!(reason.contains("overflow")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_trailing_bytes_rejected() {
    let mut bytes = encode_idx_labels(&[1, 2, 3]);
    bytes.push(0);
    assert!(parse_idx(&bytes).is_err());
}

#[test]
fn idx_dataset_scales_pixels() {
    let images = IdxData::Images {
        count: 2,
        rows: 1,
        cols: 2,
        pixels: vec![0, 255, 51, 102],
    };
    let labels = IdxData::Labels(vec![1, 0]);
    let d = dataset_from_idx(&images, &labels).unwrap();
    assert_eq!(d.class_count, 2);
    assert_eq!(d.labels, vec![1, 0]);
    assert!((d.features[[0, 1]] - 1.0).abs() < 1e-15);
    assert!((d.features[[1, 0]] - 0.2).abs() < 1e-15);
}

proptest! {
    #[test]
    fn idx_encode_decode_round_trips(
        labels in proptest::collection::vec(any::<u8>(), 0..64),
        dims in (1usize..4, 1usize..4, 1usize..4),
    ) {
        let lbytes = encode_idx_labels(&labels);
        prop_assert_eq!(encode_idx(&parse_idx(&lbytes).unwrap()).unwrap(), lbytes);

        let (c, r, k) = dims;
        let pixels: Vec<u8> = (0..c * r * k).map(|i| (i * 37 % 256) as u8).collect();
        let ibytes = encode_idx_images(c, r, k, &pixels).unwrap();
        prop_assert_eq!(encode_idx(&parse_idx(&ibytes).unwrap()).unwrap(), ibytes);
    }
}

#[test]
fn batch_iter_without_virtual_is_plain_batching() {
    let shard = ClientShard {
        owner: 0,
        indices: (0..10).collect(),
    };
    let batches: Vec<MixedBatch> = mixed_batch_iter(&shard, None, 4, 0, 17).unwrap().collect();
    assert_eq!(batches.len(), 3);
    assert!(batches.iter().all(|b| b.virtual_indices.is_empty()));
    let mut all: Vec<usize> = batches.iter().flat_map(|b| b.natural.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

#[test]
fn batch_iter_paper_shape() {
    let shard = ClientShard {
        owner: 1,
        indices: (100..356).collect(),
    };
    let vd = dummy_balanced(2, 8);
    let batches: Vec<MixedBatch> = mixed_batch_iter(&shard, Some(&vd), 128, 128, 5)
        .unwrap()
        .collect();
    assert_eq!(batches.len(), 2);
    for b in &batches {
        assert_eq!(b.natural.len(), 128);
        assert_eq!(b.virtual_indices.len(), 128);
        assert!(b.virtual_indices.iter().all(|&i| i < 16));
    }
}

#[test]
fn batch_iter_is_deterministic_per_seed() {
    let shard = ClientShard {
        owner: 0,
        indices: (0..33).collect(),
    };
    let vd = dummy_balanced(2, 4);
    let a: Vec<MixedBatch> = mixed_batch_iter(&shard, Some(&vd), 8, 3, 21).unwrap().collect();
    let b: Vec<MixedBatch> = mixed_batch_iter(&shard, Some(&vd), 8, 3, 21).unwrap().collect();
    let c: Vec<MixedBatch> = mixed_batch_iter(&shard, Some(&vd), 8, 3, 22).unwrap().collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batch_iter_needs_virtual_data_when_bv_positive() {
    let shard = ClientShard {
        owner: 0,
        indices: vec![0, 1],
    };
    assert!(matches!(
        mixed_batch_iter(&shard, None, 2, 1, 0),
        Err(Error::Config(_))
    ));
}
