use finpipe_core::detection::{
    average_precision, load_detections_from_str, map_over_thresholds, mask_iou, DetectionConfig, DetectionLine,
    DetectorBackend, IouThresholdGrid,
};
use finpipe_core::mask::{decode_counts, encode_counts};
use finpipe_core::{BinaryMask, RoiRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rect(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh)
}

fn roi(image: &str, class: &str, mask: BinaryMask, score: f64) -> RoiRecord {
    RoiRecord::new("", image, mask, score, class, "test").unwrap()
}

// ---------------------------------------------------------------- oracles

fn iou_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching per image, then 101-point interpolation where each
/// recall point takes the maximum precision over every operating point at
/// or beyond it.
fn ap_oracle(preds: &[RoiRecord], gts: &[RoiRecord], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    let mut images: Vec<&str> = preds.iter().chain(gts).map(|r| r.image_id.as_str()).collect();
    images.sort();
    images.dedup();
    let mut hits: Vec<(f64, usize, bool)> = Vec::new();
    for img in images {
        let mut ps: Vec<(usize, &RoiRecord)> = preds.iter().enumerate().filter(|(_, p)| p.image_id == img).collect();
        ps.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap().then(a.0.cmp(&b.0)));
        let gs: Vec<&RoiRecord> = gts.iter().filter(|g| g.image_id == img).collect();
        let mut used = vec![false; gs.len()];
        for (idx, p) in ps {
            let mut best = None;
            let mut best_iou = -1.0;
            for (j, g) in gs.iter().enumerate() {
                let iou = iou_oracle(&p.mask, &g.mask);
                if !used[j] && iou >= thr && iou > best_iou {
                    best = Some(j);
                    best_iou = iou;
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            hits.push((p.confidence, idx, best.is_some()));
        }
    }
    // Score ties resolve per image, then image order; only the score order
    // matters to the curve when scores are distinct.
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, h) in hits.iter().enumerate() {
        if h.2 {
            tp += 1.0;
        }
        points.push((tp / gts.len() as f64, tp / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        total += points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    Some(total / 101.0)
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (Vec<RoiRecord>, Vec<RoiRecord>) {
    let (w, h) = (32, 32);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut used_scores = Vec::new();
    for img in 0..rng.gen_range(1..4) {
        let image = format!("img{img}");
        for _ in 0..rng.gen_range(0..4) {
            let (x, y) = (rng.gen_range(0..20), rng.gen_range(0..20));
            let (bw, bh) = (rng.gen_range(4..12), rng.gen_range(4..12));
            gts.push(roi(&image, "fin", rect(w, h, x, y, bw, bh), 1.0));
            if rng.gen_bool(0.8) {
                let jx = (x as i64 + rng.gen_range(-3..=3)).clamp(0, 20) as usize;
                let jy = (y as i64 + rng.gen_range(-3..=3)).clamp(0, 20) as usize;
                preds.push(roi(&image, "fin", rect(w, h, jx, jy, bw, bh), 0.0));
            }
        }
        for _ in 0..rng.gen_range(0..3) {
            let (x, y) = (rng.gen_range(0..24), rng.gen_range(0..24));
            preds.push(roi(&image, "fin", rect(w, h, x, y, rng.gen_range(2..8), rng.gen_range(2..8)), 0.0));
        }
    }
    for p in &mut preds {
        // Distinct scores keep the ordering unambiguous.
        let mut s;
        loop {
            s = (rng.gen_range(1..10_000) as f64) / 10_000.0;
            if !used_scores.contains(&s) {
                break;
            }
        }
        used_scores.push(s);
        p.confidence = s;
    }
    (preds, gts)
}

// ---------------------------------------------------------------- tests

#[test]
fn iou_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let a = rect(24, 24, rng.gen_range(0..20), rng.gen_range(0..20), rng.gen_range(0..10), rng.gen_range(0..10));
        let b = BinaryMask::from_fn(24, 24, |_, _| rng.gen_bool(0.3));
        assert!((mask_iou(&a, &b).unwrap() - iou_oracle(&a, &b)).abs() < 1e-12);
    }
    assert_eq!(mask_iou(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(), 0.0);
    assert!(mask_iou(&BinaryMask::new(3, 3), &BinaryMask::new(4, 3)).is_err());
}

#[test]
fn tp_fp_tp_fixture() {
    let a = rect(20, 20, 0, 0, 5, 5);
    let b = rect(20, 20, 10, 10, 5, 5);
    let gts = vec![roi("i", "fin", a.clone(), 1.0), roi("i", "fin", b.clone(), 1.0)];
    let preds = vec![
        roi("i", "fin", a, 0.9),
        roi("i", "fin", rect(20, 20, 15, 0, 4, 4), 0.8),
        roi("i", "fin", b, 0.7),
    ];
    let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let got = average_precision(&preds, &gts, 0.5).unwrap().unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 0.835).abs() < 1e-3);
    assert_eq!(ap_oracle(&preds, &gts, 0.5), Some(got));
}

#[test]
fn ap_matches_independent_oracle_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let (preds, gts) = random_fixture(&mut rng);
        for thr in [0.3, 0.5, 0.75, 0.9] {
            let got = average_precision(&preds, &gts, thr).unwrap();
            let want = ap_oracle(&preds, &gts, thr);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{g} vs {w}"),
                (g, w) => assert_eq!(g, w),
            }
        }
    }
}

#[test]
fn map_rows_non_increasing_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = IouThresholdGrid::default();
    for _ in 0..300 {
        let (preds, gts) = random_fixture(&mut rng);
        let report = map_over_thresholds("r", &preds, &gts, &grid).unwrap();
        let vals: Vec<f64> = report.rows.iter().filter_map(|(_, v)| *v).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", report.rows);
    }
}

#[test]
fn map_averages_classes() {
    let fin = rect(10, 10, 0, 0, 4, 4);
    let other = rect(10, 10, 5, 5, 4, 4);
    let gts = vec![roi("i", "a", fin.clone(), 1.0), roi("i", "b", other.clone(), 1.0)];
    // Class a perfect, class b missed entirely.
    let preds = vec![roi("i", "a", fin, 0.9), roi("i", "b", rect(10, 10, 0, 6, 2, 2), 0.5)];
    let report = map_over_thresholds("two", &preds, &gts, &IouThresholdGrid::default()).unwrap();
    assert_eq!(report.classes, vec!["a".to_string(), "b".to_string()]);
    assert!(report.rows.iter().all(|(_, v)| (v.unwrap() - 0.5).abs() < 1e-12));
}

#[test]
fn self_evaluation_is_perfect_across_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (_, gts) = random_fixture(&mut rng);
        if gts.is_empty() {
            continue;
        }
        let report = map_over_thresholds("self", &gts, &gts, &IouThresholdGrid::default()).unwrap();
        assert_eq!(report.rows.len(), 10);
        assert!(report.rows.iter().all(|(_, v)| *v == Some(1.0)));
    }
}

#[test]
fn detection_lines_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut text = String::new();
    let mut masks = Vec::new();
    for i in 0..20 {
        let m = rect(30, 20, rng.gen_range(0..25), rng.gen_range(0..15), rng.gen_range(1..5), rng.gen_range(1..5));
        let line = DetectionLine::from_mask(&format!("im{i}"), "dolphin", Some(0.5 + i as f64 / 100.0), &m);
        text.push_str(&serde_json::to_string(&line).unwrap());
        text.push('\n');
        masks.push(m);
    }
    let cfg = DetectionConfig {
        backend: DetectorBackend::ResultsFile,
        min_confidence: 0.0,
        ..DetectionConfig::default()
    };
    let recs = load_detections_from_str(&text, std::path::Path::new("."), &cfg, None).unwrap();
    assert_eq!(recs.len(), 20);
    for (r, m) in recs.iter().zip(&masks) {
        assert_eq!(&r.mask, m);
        assert_eq!(Some(r.bbox), m.bbox());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rle_round_trips(w in 1usize..30, h in 1usize..30, p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(p));
        prop_assert_eq!(BinaryMask::from_rle(&m.to_rle()).unwrap(), m.clone());
        let counts = m.rle_counts();
        prop_assert_eq!(decode_counts(&encode_counts(&counts)).unwrap(), counts.clone());
        prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), w * h);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = BinaryMask::from_fn(12, 9, |_, _| rng.gen_bool(0.4));
        let b = BinaryMask::from_fn(12, 9, |_, _| rng.gen_bool(0.4));
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.is_empty() {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
    }
}
