//! Property tests over randomized inputs.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;

use common::{
    random_boxes, random_detections, random_manifest, reference_cmc, reference_map, reference_nms, retrieval_case, rng,
    RetrievalCase,
};
use reid_forge::data::{make_query_gallery_split, pk_sample_batches, BoundingBox, DatasetManifest, SplitTag};
use reid_forge::detection::{iou, match_image, nms};
use reid_forge::eval::{compute_cmc, compute_map, Protocol};
use reid_forge::losses::{batch_hard_triplet, build_weight_matrix, DEFAULT_MARGIN};
use reid_forge::tensor::{decode_tensor, encode_tensor, Tape, Tensor};

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn map_of(c: &RetrievalCase) -> f64 {
    compute_map(&c.dist, &c.query, &c.gallery, Protocol::default()).unwrap()
}

fn cmc_of(c: &RetrievalCase) -> Vec<f64> {
    compute_cmc(&c.dist, &c.query, &c.gallery, c.gallery.len(), Protocol::default()).unwrap()
}

/// Replaces every distance by its rank among the distinct values: strictly
/// increasing, so ties and order are preserved exactly.
fn rank_transform(t: &Tensor) -> Tensor {
    let mut distinct: Vec<f64> = t.data().to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let data = t
        .data()
        .iter()
        .map(|v| distinct.partition_point(|d| d < v) as f64)
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_separated_subset_matching_the_reference(seed in any::<u64>(), n in 0usize..=15, thr in 0.05..0.95f64) {
        let dets = random_detections(&mut rng(seed), n);
        let kept = nms(&dets, thr);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        let want: BTreeSet<usize> = reference_nms(&dets, thr).into_iter().collect();
        let got: BTreeSet<usize> = kept
            .iter()
            .map(|k| dets.iter().position(|d| d == k).unwrap())
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn matching_accounts_for_every_box(seed in any::<u64>(), np in 0usize..=15, ng in 0usize..=15, conf in 0.0..1.0f64) {
        let mut r = rng(seed);
        let preds = random_detections(&mut r, np);
        let gts = random_boxes(&mut r, ng);
        let m = match_image(&preds, &gts, conf, 0.5);
        let confident = preds.iter().filter(|d| d.score >= conf).count();
        prop_assert_eq!(m.tp + m.fp, confident);
        prop_assert_eq!(m.tp + m.fn_, ng);
    }

    #[test]
    fn weight_matrix_grows_with_gamma_and_boxes(
        boxes in prop::collection::vec(arb_box(), 0..4),
        extra in arb_box(),
        g1 in 1.0..3.0f64,
        dg in 0.0..2.0f64,
    ) {
        let fit = |b: &BoundingBox| b.fits_within(64.0, 64.0);
        let boxes: Vec<BoundingBox> = boxes.into_iter().filter(fit).collect();
        let lo = build_weight_matrix(&boxes, 64, 8, g1).unwrap();
        let hi = build_weight_matrix(&boxes, 64, 8, g1 + dg).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                prop_assert!(lo.get(r, c) == 1.0 || lo.get(r, c) == g1);
                prop_assert!(hi.get(r, c) >= lo.get(r, c));
            }
        }
        if fit(&extra) {
            let mut more = boxes.clone();
            more.push(extra);
            let wider = build_weight_matrix(&more, 64, 8, g1).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    prop_assert!(wider.get(r, c) >= lo.get(r, c));
                }
            }
        }
        let one = build_weight_matrix(&boxes, 64, 8, 1.0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                prop_assert_eq!(one.get(r, c), 1.0);
            }
        }
    }

    #[test]
    fn triplet_loss_ignores_batch_order(seed in any::<u64>(), p in 2usize..=5, k in 2usize..=4, d in 1usize..=8) {
        let mut r = rng(seed);
        let n = p * k;
        let emb: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let ids: Vec<i64> = (0..n).map(|i| (i / k) as i64 * 7).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let loss = |rows: &[usize]| {
            let data: Vec<f64> = rows.iter().flat_map(|&i| emb[i * d..(i + 1) * d].to_vec()).collect();
            let labels: Vec<i64> = rows.iter().map(|&i| ids[i]).collect();
            let mut tape = Tape::new();
            let e = tape.leaf(Tensor::new(vec![n, d], data).unwrap());
            let l = batch_hard_triplet(&mut tape, e, &labels, DEFAULT_MARGIN).unwrap();
            tape.value(l).item().unwrap()
        };
        let identity: Vec<usize> = (0..n).collect();
        prop_assert!((loss(&identity) - loss(&perm)).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_match_brute_force(seed in any::<u64>()) {
        let c = retrieval_case(seed);
        prop_assert!((map_of(&c) - reference_map(&c)).abs() < 1e-12);
        let cmc = cmc_of(&c);
        let want = reference_cmc(&c, c.gallery.len());
        for (a, b) in cmc.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(seed in any::<u64>(), shift in -20i32..20) {
        let c = retrieval_case(seed);
        let scale = 2f64.powi(shift);
        let scaled = RetrievalCase {
            dist: Tensor::new(c.dist.shape().to_vec(), c.dist.data().iter().map(|d| d * scale).collect()).unwrap(),
            query: c.query.clone(),
            gallery: c.gallery.clone(),
        };
        let ranked = RetrievalCase {
            dist: rank_transform(&c.dist),
            query: c.query.clone(),
            gallery: c.gallery.clone(),
        };
        for t in [&scaled, &ranked] {
            prop_assert_eq!(map_of(t).to_bits(), map_of(&c).to_bits());
            prop_assert_eq!(cmc_of(t), cmc_of(&c));
        }
    }

    #[test]
    fn map_ignores_gallery_order_without_ties(seed in any::<u64>()) {
        let c = retrieval_case(seed);
        let mut distinct = c.dist.data().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() == c.dist.len());
        let (q, g) = (c.query.len(), c.gallery.len());
        let mut r = rng(seed ^ 0x9e37);
        let mut perm: Vec<usize> = (0..g).collect();
        for i in (1..g).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let data = (0..q).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| c.dist.row(i)[j]).collect();
        let shuffled = RetrievalCase {
            dist: Tensor::new(vec![q, g], data).unwrap(),
            query: c.query.clone(),
            gallery: perm.iter().map(|&j| c.gallery[j]).collect(),
        };
        prop_assert!((map_of(&shuffled) - map_of(&c)).abs() < 1e-12);
        prop_assert_eq!(cmc_of(&shuffled), cmc_of(&c));
    }

    #[test]
    fn cmc_is_nondecreasing_and_reaches_one(seed in any::<u64>()) {
        let c = retrieval_case(seed);
        let cmc = cmc_of(&c);
        for w in cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(*cmc.last().unwrap(), 1.0);
        let map = map_of(&c);
        prop_assert!(map > 0.0 && map <= 1.0);
    }

    #[test]
    fn split_keeps_a_cross_camera_positive(seed in any::<u64>(), fraction in 0.05..0.95f64) {
        let m = random_manifest(seed);
        let split = make_query_gallery_split(&m, fraction, seed).unwrap();
        for q in split.with_split(SplitTag::Query) {
            prop_assert!(split
                .with_split(SplitTag::Gallery)
                .any(|g| g.identity_id == q.identity_id && g.camera_id != q.camera_id));
        }
        for (before, after) in m.records.iter().zip(&split.records) {
            prop_assert_eq!(before.split == SplitTag::Train, after.split == SplitTag::Train);
            prop_assert!(after.split != SplitTag::UnassignedTest);
        }
        prop_assert_eq!(&split, &make_query_gallery_split(&m, fraction, seed).unwrap());
    }

    #[test]
    fn manifest_survives_jsonl(seed in any::<u64>()) {
        let m = random_manifest(seed);
        prop_assert_eq!(&DatasetManifest::from_jsonl(&m.to_jsonl()).unwrap(), &m);
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = shape.iter().product();
        let t = Tensor::new(shape.clone(), (0..n).map(|_| r.random_range(-1e6..1e6)).collect()).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let (back, used) = decode_tensor(&buf).unwrap();
        prop_assert_eq!(used, buf.len());
        prop_assert_eq!(back, t);
    }

    #[test]
    fn pk_batches_hold_p_identities_of_k(seed in any::<u64>(), p in 2usize..=4, k in 2usize..=3) {
        let m = random_manifest(seed);
        let train: Vec<_> = m.records.iter().filter(|r| r.split == SplitTag::Train).collect();
        let eligible: BTreeSet<i64> = train.iter().map(|r| r.identity_id).collect();
        prop_assume!(eligible.len() >= p);
        let sampler = pk_sample_batches(&m, p, k, seed).unwrap();
        let batches = sampler.epoch(0);
        let seen: BTreeSet<i64> = batches.iter().flat_map(|b| b.identities()).collect();
        prop_assert_eq!(seen, eligible);
        for batch in batches {
            let ids = batch.identities();
            prop_assert_eq!(ids.len(), p * k);
            let distinct: BTreeSet<i64> = ids.iter().copied().collect();
            prop_assert_eq!(distinct.len(), p);
            for idx in batch.indices() {
                prop_assert_eq!(m.records[idx].split, SplitTag::Train);
            }
        }
    }
}
