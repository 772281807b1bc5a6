use std::path::Path;

use boxseg_core::eval::{
    box_prec_at_half, evaluate, hungarian_match, mask_iou, parse_jsonl, parse_model_output, render, tag_ood,
    BenchTagConfig, CoordMode, EvalOptions, MetricAccumulator, PredictionRecord, SampleStats, MASK_PLACEHOLDER,
};
use boxseg_core::mask::{rle, BinaryMask};
use boxseg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let p = rng.gen_range(0.0..1.0);
    BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

fn counts(a: &BinaryMask, b: &BinaryMask) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            i += (p && q) as u64;
            u += (p || q) as u64;
        }
    }
    (i, u)
}

#[test]
fn mask_iou_examples() {
    let a = BinaryMask::rect(4, 4, 0, 0, 2, 2);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(mask_iou(&a, &BinaryMask::rect(4, 4, 2, 2, 4, 4)).unwrap(), 0.0);
    assert_eq!(mask_iou(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4)).unwrap(), 1.0);
    // a: 4 px, b: 6 px, shared 2 px.
    let a = BinaryMask::rect(8, 8, 0, 0, 2, 2);
    let b = BinaryMask::rect(8, 8, 1, 0, 3, 3);
    assert_eq!((a.area(), b.area()), (4, 6));
    assert_eq!(mask_iou(&a, &b).unwrap(), 0.25);
    assert!(mask_iou(&a, &BinaryMask::empty(4, 8)).is_err());
}

#[test]
fn metrics_equal_pixel_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = MetricAccumulator::new();
    let (mut si, mut su) = (0u64, 0u64);
    let mut ious = Vec::new();
    for _ in 0..200 {
        let (p, g) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        acc.accumulate_single(&p, &g).unwrap();
        let (i, u) = counts(&p, &g);
        si += i;
        su += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    assert_eq!(acc.sum_intersection, si);
    assert_eq!(acc.sum_union, su);
    assert_eq!(acc.ciou(), si as f64 / su as f64);
    assert_eq!(acc.miou(), ious.iter().sum::<f64>() / 200.0);
    for t in [0.5, 0.7, 0.9] {
        assert_eq!(acc.precision_at(t), ious.iter().filter(|&&v| v > t).count() as f64 / 200.0);
    }
}

#[test]
fn two_sample_fixture() {
    let mut acc = MetricAccumulator::new();
    acc.add_counts(90, 100);
    acc.add_counts(1, 10);
    assert_eq!(acc.miou(), 0.5);
    assert!((acc.ciou() - 0.8273).abs() < 1e-4);
    assert_eq!(acc.ciou(), 91.0 / 110.0);
    assert_eq!(acc.precision_at(0.5), 0.5);

    let mut one = MetricAccumulator::new();
    let m = BinaryMask::rect(5, 5, 1, 1, 4, 4);
    one.accumulate_single(&m, &m).unwrap();
    assert_eq!((one.miou(), one.ciou(), one.precision_at(0.9)), (1.0, 1.0, 1.0));
}

#[test]
fn equal_unions_make_ciou_and_miou_agree() {
    let mut acc = MetricAccumulator::new();
    for i in [3, 7, 10, 0, 5] {
        acc.add_counts(i, 10);
    }
    assert_eq!(acc.miou(), acc.ciou());
}

fn brute_force_max(m: &[Vec<f64>]) -> f64 {
    let (p, g) = (m.len(), m[0].len());
    let n = p.max(g);
    let at = |r: usize, c: usize| if r < p && c < g { m[r][c] } else { 0.0 };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::NEG_INFINITY;
    permute(&mut perm, 0, &mut |q| {
        let s: f64 = (0..n).map(|r| at(r, q[r])).sum();
        best = best.max(s);
    });
    best
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn hungarian_examples() {
    let a = hungarian_match(&[vec![0.9, 0.2], vec![0.3, 0.8]]);
    assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    assert!((a.total - 1.7).abs() < 1e-12);
    let a = hungarian_match(&[vec![0.4]]);
    assert_eq!(a.pairs, vec![(0, 0)]);
}

#[test]
fn hungarian_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..500 {
        let (p, g) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        // Quantized entries make ties common.
        let quantized = trial % 2 == 0;
        let m: Vec<Vec<f64>> = (0..p)
            .map(|_| {
                (0..g)
                    .map(|_| if quantized { rng.gen_range(0..5) as f64 / 4.0 } else { rng.gen_range(0.0..1.0) })
                    .collect()
            })
            .collect();
        let a = hungarian_match(&m);
        assert_eq!(a.pairs.len(), p.min(g));
        let mut rows: Vec<usize> = a.pairs.iter().map(|x| x.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|x| x.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(rows.len(), p.min(g));
        assert_eq!(cols.len(), p.min(g));
        let from_pairs: f64 = a.pairs.iter().map(|&(r, c)| m[r][c]).sum();
        assert_eq!(a.total, from_pairs);
        assert_eq!(a.total, brute_force_max(&m), "trial {trial}: {m:?}");
        assert_eq!(hungarian_match(&m), a);
    }
}

#[test]
fn multi_instance_matching() {
    let masks: Vec<BinaryMask> = (0..3).map(|i| BinaryMask::rect(12, 12, i * 4, 0, i * 4 + 4, 6)).collect();
    let mut acc = MetricAccumulator::new();
    let permuted = vec![masks[2].clone(), masks[0].clone(), masks[1].clone()];
    let pairs = acc.accumulate_multi(&permuted, &masks).unwrap();
    assert_eq!(pairs, vec![(0, 2), (1, 0), (2, 1)]);
    assert_eq!(acc.miou(), 1.0);

    let mut acc = MetricAccumulator::new();
    let pairs = acc.accumulate_multi(&masks[..2], &masks).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!((acc.unmatched_pred, acc.unmatched_gt), (0, 1));

    let mut acc = MetricAccumulator::new();
    assert!(acc.accumulate_multi(&[], &masks).unwrap().is_empty());
    assert_eq!((acc.samples(), acc.unmatched_gt), (0, 3));
}

#[test]
fn multi_instance_pairs_follow_enumeration() {
    // Predictions shifted so the greedy choice and the optimum differ.
    let gts = [
        BinaryMask::rect(12, 4, 0, 0, 4, 4),
        BinaryMask::rect(12, 4, 3, 0, 7, 4),
        BinaryMask::rect(12, 4, 6, 0, 12, 4),
    ];
    let preds = [
        BinaryMask::rect(12, 4, 1, 0, 6, 4),
        BinaryMask::rect(12, 4, 0, 0, 3, 4),
        BinaryMask::rect(12, 4, 5, 0, 11, 4),
    ];
    let m: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| mask_iou(p, g).unwrap()).collect()).collect();
    let best = brute_force_max(&m);
    let mut acc = MetricAccumulator::new();
    let pairs = acc.accumulate_multi(&preds, &gts).unwrap();
    let total: f64 = pairs.iter().map(|&(p, g)| m[p][g]).sum();
    assert!((total - best).abs() < 1e-12);
    assert_eq!(acc.per_sample_ious, pairs.iter().map(|&(p, g)| m[p][g]).collect::<Vec<_>>());
}

#[test]
fn box_precision_is_strict() {
    assert!(box_prec_at_half([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]));
    assert!(!box_prec_at_half([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]));
    assert!(!box_prec_at_half([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]));
}

#[test]
fn ood_tags() {
    let cfg = BenchTagConfig::default();
    let tags = |area_ratio, label_frequency| tag_ood(SampleStats { area_ratio, label_frequency }, &cfg);
    assert_eq!(tags(0.001, None), vec!["area_small"]);
    assert_eq!(tags(0.71, None), vec!["area_large"]);
    assert_eq!(tags(0.3, Some(1e-5)), vec!["category_rare"]);
    assert!(tags(0.002, Some(1e-4)).is_empty());
    assert!(tags(0.7, None).is_empty());
    let bad = BenchTagConfig {
        area_small: 0.8,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

fn example_block() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/example_output.txt")).unwrap()
}

#[test]
fn parses_the_conversation_example() {
    let text = example_block();
    let recs = parse_model_output(&text).unwrap();
    assert_eq!(
        recs,
        vec![PredictionRecord {
            bbox_2d: [210, 45, 890, 520],
            label: "dog".into()
        }]
    );
}

#[test]
fn rejects_a_broken_placeholder() {
    let text = example_block().replace(MASK_PLACEHOLDER, "<mask_token>");
    match parse_model_output(&text) {
        Err(Error::Schema { field, .. }) => assert_eq!(field, "[0].mask"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parser_edge_cases() {
    assert!(parse_model_output("[]").unwrap().is_empty());
    assert!(parse_model_output("```json\n[]\n```<|im_end|>").unwrap().is_empty());
    let bad = "[{\"bbox_2d\": [1, 2, 3], \"label\": \"x\", \"mask\": \"<mask_start><mask_token><mask_end>\"}]";
    assert!(matches!(parse_model_output(bad), Err(Error::Schema { .. })));
    let reversed = "[{\"bbox_2d\": [5, 2, 3, 4], \"label\": \"x\", \"mask\": \"<mask_start><mask_token><mask_end>\"}]";
    assert!(matches!(parse_model_output(reversed), Err(Error::Schema { .. })));
    let extra = "[{\"bbox_2d\": [1, 2, 3, 4], \"label\": \"x\", \"score\": 1}]";
    assert!(matches!(parse_model_output(extra), Err(Error::Schema { .. })));
    let text = "prefix [ {\"bbox_2d\": [1, 2, 3, 4], oops";
    match parse_model_output(text) {
        Err(Error::Parse { offset, .. }) => assert!(offset >= 7 && offset <= text.len(), "{offset}"),
        other => panic!("{other:?}"),
    }
    assert!(parse_model_output("no json here").is_err());
}

#[test]
fn grid_coordinates_scale_to_pixels() {
    let b = CoordMode::Grid(1000).to_pixels([210.0, 45.0, 890.0, 520.0], 640, 480);
    for (v, e) in b.iter().zip([134.4, 21.6, 569.6, 249.6]) {
        assert!((v - e).abs() < 1e-9, "{b:?}");
    }
    assert_eq!(CoordMode::Pixel.to_pixels([1.0, 2.0, 3.0, 4.0], 9, 9), [1.0, 2.0, 3.0, 4.0]);
}

fn sample_line(id: &str, m: &BinaryMask, extra: &str) -> String {
    format!(
        "{{\"id\":\"{id}\",\"image_size\":[{},{}],\"masks\":[{}]{extra}}}",
        m.height(),
        m.width(),
        serde_json::to_string(&rle::encode(m)).unwrap()
    )
}

#[test]
fn report_on_identical_manifests_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lines: Vec<String> = (0..5)
        .map(|i| sample_line(&format!("s{i}"), &random_mask(&mut rng, 10, 8), ",\"boxes\":[[0,0,4,4]]"))
        .collect();
    let samples = parse_jsonl(&lines.join("\n")).unwrap();
    let r = evaluate(&samples, &samples, Path::new("."), Path::new("."), &EvalOptions::default()).unwrap();
    assert_eq!((r.metrics.miou, r.metrics.ciou, r.metrics.p50, r.metrics.p90), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(r.gt_samples, 5);
    assert_eq!(r.box_precision.as_ref().unwrap().precision, 1.0);
    let json = serde_json::to_value(&r).unwrap();
    for key in ["schema", "miou", "ciou", "p@0.5", "p@0.7", "p@0.9", "matched", "unmatched", "per_tag"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["schema"], "ORSR1");
}

#[test]
fn report_counts_missing_and_extra_predictions_and_tags() {
    let gt_mask = BinaryMask::rect(10, 10, 0, 0, 10, 10);
    let gts = parse_jsonl(&[
        sample_line("a", &gt_mask, ",\"tags\":[\"occlusion\"]"),
        sample_line("b", &gt_mask, ""),
    ]
    .join("\n"))
    .unwrap();
    let preds = parse_jsonl(&[sample_line("a", &gt_mask, ""), sample_line("z", &gt_mask, "")].join("\n")).unwrap();
    let r = evaluate(&preds, &gts, Path::new("."), Path::new("."), &EvalOptions::default()).unwrap();
    assert_eq!(r.missing_predictions, 1);
    assert_eq!(r.extra_predictions, 1);
    assert_eq!(r.metrics.miou, 0.5);
    assert_eq!(r.per_tag["occlusion"].miou, 1.0);
    assert_eq!(r.per_tag["area_large"].samples, 2);
    assert!(parse_jsonl(&[sample_line("a", &gt_mask, ""), sample_line("a", &gt_mask, "")].join("\n")).is_err());
}

proptest! {
    #[test]
    fn merge_is_associative_and_commutative(seed in any::<u64>(), n in 0usize..30, cut1 in 0usize..30, cut2 in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(u64, u64)> = (0..n).map(|_| { let u = rng.gen_range(0..50u64); (rng.gen_range(0..=u), u) }).collect();
        let (c1, c2) = (cut1.min(n), cut2.min(n));
        let (lo, hi) = (c1.min(c2), c1.max(c2));
        let acc_of = |s: &[(u64, u64)]| {
            let mut a = MetricAccumulator::new();
            for &(i, u) in s { a.add_counts(i, u); }
            a
        };
        let whole = acc_of(&pairs);
        let (a, b, c) = (acc_of(&pairs[..lo]), acc_of(&pairs[lo..hi]), acc_of(&pairs[hi..]));
        let mut left = a.clone();
        left.merge(&b);
        left.merge(&c);
        let mut bc = b.clone();
        bc.merge(&c);
        let mut right = a.clone();
        right.merge(&bc);
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(&right, &whole);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        prop_assert_eq!((ab.sum_intersection, ab.sum_union), (ba.sum_intersection, ba.sum_union));
        prop_assert_eq!(ab.ciou(), ba.ciou());
    }

    #[test]
    fn precision_is_non_increasing(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = MetricAccumulator::new();
        for _ in 0..n { let u = rng.gen_range(1..20u64); acc.add_counts(rng.gen_range(0..=u), u); }
        let mut prev = 1.0;
        for k in 0..=20 {
            let p = acc.precision_at(k as f64 / 20.0);
            prop_assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn render_then_parse_is_identity(
        recs in prop::collection::vec(
            (0i64..500, 0i64..500, 1i64..500, 1i64..500, "[a-z ]{1,12}"),
            0..5,
        )
    ) {
        let records: Vec<PredictionRecord> = recs
            .into_iter()
            .map(|(x, y, w, h, label)| PredictionRecord { bbox_2d: [x, y, x + w, y + h], label })
            .collect();
        prop_assert_eq!(parse_model_output(&render(&records)).unwrap(), records);
    }
}
