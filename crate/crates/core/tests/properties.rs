use fcss::descriptor::{extract_dense, DenseDescriptorField};
use fcss::evalkit::{flow_accuracy, pck, GroundTruthFlow};
use fcss::io::{read_flow, read_model, read_tensor, write_flow, write_model, write_tensor};
use fcss::learning::{contrastive_loss, mine_correspondences, BBox, MiningConfig, Pixel, TrainingBatch};
use fcss::matching::{lr_consistency_mask, smooth_flow, FlowField};
use fcss::model::{Model, ModelConfig};
use fcss::tensor::channelwise_l2_normalize;
use fcss::{Real, Tensor, NORM_EPS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_field(seed: u64, c: usize, h: usize, w: usize) -> DenseDescriptorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0));
    DenseDescriptorField::from_tensor(channelwise_l2_normalize(&t, NORM_EPS))
}

fn small_model(seed: u64) -> Model {
    let config = ModelConfig {
        patterns_per_level: vec![6, 5, 4],
        ..ModelConfig::default()
    };
    Model::init(config, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn descriptors_have_unit_norm(seed in 0u64..1000, h in 8usize..24, w in 8usize..24) {
        let model = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
        let image = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0));
        let f = extract_dense(&image, &model).unwrap();
        for y in 0..h {
            for x in 0..w {
                let n = f.descriptor_at(x, y).unwrap().iter().map(|v| v * v).sum::<Real>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-5, "norm {n} at ({x}, {y})");
            }
        }
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000, pairs in 1usize..40, margin in 0.0..3.0) {
        let a = unit_field(seed, 8, 6, 7);
        let b = unit_field(seed + 1, 8, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = TrainingBatch::default();
        for _ in 0..pairs {
            let pa = Pixel::new(rng.gen_range(0..7), rng.gen_range(0..6));
            let pb = Pixel::new(rng.gen_range(0..7), rng.gen_range(0..6));
            if rng.gen_bool(0.5) {
                batch.positives.push((pa, pb));
            } else {
                batch.negatives.push((pa, pb));
            }
        }
        let out = contrastive_loss(&batch, &a, &b, margin).unwrap();
        prop_assert!(out.loss >= 0.0);
    }

    #[test]
    fn mining_partitions_samples_inside_boxes(seed in 0u64..1000, bx in 0usize..4, by in 0usize..4, tau in 0.0..3.0) {
        let a = unit_field(seed, 6, 12, 12);
        let b = unit_field(seed + 7, 6, 12, 12);
        let ba = BBox::new(bx, by, 8, 7);
        let bb = BBox::new(by, bx, 7, 8);
        let cfg = MiningConfig { tau, candidates: 30 };
        let mined = mine_correspondences(&a, &b, ba, bb, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mined.pairs.len(), 30);
        prop_assert_eq!(mined.positive_count() + mined.negatives().count(), mined.pairs.len());
        let mut sources: Vec<_> = mined.pairs.iter().map(|p| (p.source.y, p.source.x)).collect();
        sources.sort_unstable();
        sources.dedup();
        prop_assert_eq!(sources.len(), mined.pairs.len());
        for p in &mined.pairs {
            prop_assert!(ba.contains(p.source.x, p.source.y));
            prop_assert!(bb.contains(p.target.x, p.target.y));
            let (dx, dy) = (p.back.x as Real - p.source.x as Real, p.back.y as Real - p.source.y as Real);
            prop_assert_eq!(p.positive, (dx * dx + dy * dy).sqrt() <= tau);
        }
    }

    #[test]
    fn selection_respects_cap_and_ratio(seed in 0u64..1000, cap in 1usize..64, candidates in 1usize..100) {
        let a = unit_field(seed, 4, 10, 10);
        let b = unit_field(seed + 3, 4, 10, 10);
        let bbox = BBox::full(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MiningConfig { tau: 1.0, candidates };
        let mined = mine_correspondences(&a, &b, bbox, bbox, &cfg, &mut rng).unwrap();
        let batch = TrainingBatch::select(&mined, cap, 0.5, &mut rng);
        prop_assert!(batch.len() <= cap);
        prop_assert!(batch.positives.len() <= mined.positive_count());
        prop_assert!(batch.negatives.len() <= mined.negatives().count());
        if !batch.negatives.is_empty() && cap >= 2 {
            prop_assert!(batch.positives.len() <= batch.negatives.len());
        }
    }

    #[test]
    fn pck_is_monotone_in_alpha(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = FlowField::new(Tensor::from_fn(2, 16, 16, |_, _, _| rng.gen_range(-5.0..5.0)), vec![true; 256]).unwrap();
        let src: Vec<(Real, Real)> = (0..n).map(|_| (rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0))).collect();
        let tgt: Vec<(Real, Real)> = (0..n).map(|_| (rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0))).collect();
        let mut last = 0.0;
        for k in 0..30 {
            let v = pck(&flow, &src, &tgt, (16, 12), k as Real * 0.05).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn flow_accuracy_is_monotone_in_threshold(seed in 0u64..1000, h in 4usize..20, w in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = FlowField::new(Tensor::from_fn(2, h, w, |_, _, _| rng.gen_range(-3.0..3.0)), vec![true; h * w]).unwrap();
        let gt = GroundTruthFlow {
            flow: Tensor::from_fn(2, h, w, |_, _, _| rng.gen_range(-3.0..3.0)),
            mask: vec![true; h * w],
        };
        let mut last = 0.0;
        for k in 0..40 {
            let v = flow_accuracy(&pred, &gt, k as Real).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn smoothing_keeps_constant_fields(h in 2usize..12, w in 2usize..12, dx in -4.0..4.0, dy in -4.0..4.0, iters in 0usize..4) {
        let f = FlowField::constant(h, w, dx, dy);
        let s = smooth_flow(&f, iters, 2.0);
        prop_assert_eq!(s, f);
    }

    #[test]
    fn permutation_flow_and_its_inverse_are_consistent(seed in 0u64..1000, h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0; h * w];
        for (i, &j) in perm.iter().enumerate() {
            inv[j] = i;
        }
        let as_flow = |map: &[usize]| {
            let t = Tensor::from_fn(2, h, w, |c, y, x| {
                let j = map[y * w + x];
                if c == 0 { (j % w) as Real - x as Real } else { (j / w) as Real - y as Real }
            });
            FlowField::new(t, vec![true; h * w]).unwrap()
        };
        let mask = lr_consistency_mask(&as_flow(&perm), &as_flow(&inv), 0.0);
        prop_assert!(mask.iter().all(|m| *m));
    }

    #[test]
    fn files_round_trip_bit_exactly(seed in 0u64..1000, c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1e3..1e3));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.shape(), t.shape());

        let f = FlowField::new(
            Tensor::from_fn(2, h, w, |_, _, _| rng.gen_range(-9.0..9.0)),
            (0..h * w).map(|_| rng.gen_bool(0.5)).collect(),
        ).unwrap();
        let mut buf = Vec::new();
        write_flow(&mut buf, &f).unwrap();
        prop_assert_eq!(read_flow(&mut buf.as_slice()).unwrap(), f);

        let m = small_model(seed);
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        prop_assert_eq!(read_model(&mut buf.as_slice()).unwrap(), m);
    }
}
