use std::collections::{BTreeSet, VecDeque};

use finpipe_core::maskproc::{
    apply_mask, calibrate_threshold, close_holes, crop_bounds, crop_to_mask, filter_components_by_colour,
    postprocess_detection, split_components, ColourThreshold, PostprocessParams, StructuringElement,
};
use finpipe_core::{BBox, BinaryMask};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- oracles

fn dilate_oracle(m: &BinaryMask, r: i64) -> BinaryMask {
    let (w, h) = (m.width() as i64, m.height() as i64);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        let mut hit = false;
        for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx >= 0 && yy >= 0 && xx < w && yy < h && m.get(xx as usize, yy as usize) {
                    hit = true;
                }
            }
        }
        hit
    })
}

fn erode_oracle(m: &BinaryMask, r: i64) -> BinaryMask {
    let (w, h) = (m.width() as i64, m.height() as i64);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx >= 0 && yy >= 0 && xx < w && yy < h && !m.get(xx as usize, yy as usize) {
                    return false;
                }
            }
        }
        true
    })
}

fn close_oracle(m: &BinaryMask, k: usize) -> BinaryMask {
    let r = (k / 2) as i64;
    erode_oracle(&dilate_oracle(m, r), r)
}

fn bfs_components(m: &BinaryMask) -> BTreeSet<Vec<(usize, usize)>> {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut out = BTreeSet::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !m.get(x0, y0) || seen[y0 * w + x0] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut q = VecDeque::from([(x0, y0)]);
            seen[y0 * w + x0] = true;
            while let Some((x, y)) = q.pop_front() {
                pixels.push((x, y));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        let (xx, yy) = (xx as usize, yy as usize);
                        if m.get(xx, yy) && !seen[yy * w + xx] {
                            seen[yy * w + xx] = true;
                            q.push_back((xx, yy));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            out.insert(pixels);
        }
    }
    out
}

fn pixel_set(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = m.true_pixels().collect();
    v.sort_unstable();
    v
}

fn apply_oracle(img: &RgbImage, m: &BinaryMask) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        if m.get(x as usize, y as usize) {
            *img.get_pixel(x, y)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

fn scan_bounds(m: &BinaryMask, pad: u32) -> (u32, u32, u32, u32) {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                x0 = x0.min(x as u32);
                y0 = y0.min(y as u32);
                x1 = x1.max(x as u32);
                y1 = y1.max(y as u32);
            }
        }
    }
    let x0 = x0.saturating_sub(pad);
    let y0 = y0.saturating_sub(pad);
    let x1 = (x1 + pad).min(m.width() as u32 - 1);
    let y1 = (y1 + pad).min(m.height() as u32 - 1);
    (x0, y0, x1, y1)
}

fn crop_oracle(img: &RgbImage, m: &BinaryMask, pad: u32) -> RgbImage {
    let (x0, y0, x1, y1) = scan_bounds(m, pad);
    RgbImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| *img.get_pixel(x0 + x, y0 + y))
}

fn percentile_oracle(values: &[u8], p: f64) -> u8 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let mut rank = 1;
    while (rank as f64) < p * v.len() as f64 - 1e-9 {
        rank += 1;
    }
    v[rank.min(v.len()) - 1]
}

// ---------------------------------------------------------------- fixtures

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let w = rng.gen_range(1..=64);
    let h = rng.gen_range(1..=64);
    let blobs = rng.gen_range(0..5);
    let mut centres = Vec::new();
    for _ in 0..blobs {
        centres.push((
            rng.gen_range(0.0..w as f64),
            rng.gen_range(0.0..h as f64),
            rng.gen_range(1.0..16.0f64),
            rng.gen_range(1.0..16.0f64),
        ));
    }
    let noise = rng.gen_range(0.0..0.15);
    let holes = rng.gen_range(0.0..0.1);
    let mut m = BinaryMask::from_fn(w, h, |x, y| {
        centres.iter().any(|&(cx, cy, rx, ry)| {
            let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            dx * dx + dy * dy <= 1.0
        })
    });
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(noise) {
                m.set(x, y, true);
            } else if m.get(x, y) && rng.gen_bool(holes) {
                m.set(x, y, false);
            }
        }
    }
    m
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

// ---------------------------------------------------------------- oracle tests

#[test]
fn closing_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..200 {
        let m = random_mask(&mut rng);
        let k = [3, 5, 7, 9][rng.gen_range(0..4)];
        let se = StructuringElement::square(k).unwrap();
        assert_eq!(close_holes(&m, se), close_oracle(&m, k));
    }
}

#[test]
fn components_match_bfs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let m = random_mask(&mut rng);
        let comps = split_components(&m);
        let got: BTreeSet<_> = comps.iter().map(pixel_set).collect();
        assert_eq!(got.len(), comps.len());
        assert_eq!(got, bfs_components(&m));
        assert!(comps.windows(2).all(|w| w[0].area() >= w[1].area()));
    }
}

#[test]
fn two_blobs_with_gap() {
    let m = BinaryMask::from_fn(10, 5, |x, y| (1..4).contains(&y) && ((1..4).contains(&x) || (6..9).contains(&x)));
    let comps = split_components(&m);
    assert_eq!(comps.len(), 2);
    let got: BTreeSet<_> = comps.iter().map(pixel_set).collect();
    assert_eq!(got, bfs_components(&m));
}

#[test]
fn apply_mask_matches_select_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let img = random_image(&mut rng, 33, 21);
    let checker = BinaryMask::from_fn(33, 21, |x, y| (x + y) % 2 == 0);
    assert_eq!(apply_mask(&img, &checker).unwrap(), apply_oracle(&img, &checker));
    for _ in 0..100 {
        let m = random_mask(&mut rng);
        let img = random_image(&mut rng, m.width(), m.height());
        assert_eq!(apply_mask(&img, &m).unwrap(), apply_oracle(&img, &m));
    }
}

#[test]
fn crop_matches_scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut checked = 0;
    while checked < 300 {
        let m = random_mask(&mut rng);
        if m.is_empty() {
            assert!(crop_bounds(&m, 0).is_err());
            continue;
        }
        let pad = rng.gen_range(0..8);
        let img = random_image(&mut rng, m.width(), m.height());
        let (x0, y0, x1, y1) = scan_bounds(&m, pad);
        assert_eq!(crop_bounds(&m, pad).unwrap(), BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 });
        assert_eq!(crop_to_mask(&img, &m, pad).unwrap(), crop_oracle(&img, &m, pad));
        checked += 1;
    }
}

#[test]
fn calibrate_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..200 {
        let n = rng.gen_range(1..400);
        let channels: [Vec<u8>; 3] = std::array::from_fn(|_| (0..n).map(|_| rng.gen()).collect());
        let p = [0.5, 0.9, 0.95, 1.0, rng.gen_range(0.01..1.0)][rng.gen_range(0..5)];
        let th = calibrate_threshold(&channels, p).unwrap();
        for c in 0..3 {
            assert_eq!(th.rgb[c], percentile_oracle(&channels[c], p));
        }
    }
    let tens: Vec<u8> = (1..=10).map(|v| v * 10).collect();
    let th = calibrate_threshold(&[tens.clone(), tens.clone(), tens], 0.9).unwrap();
    assert_eq!(th.rgb, [90, 90, 90]);
}

#[test]
fn colour_filter_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..150 {
        let m = random_mask(&mut rng);
        let comps = split_components(&m);
        let img = random_image(&mut rng, m.width(), m.height());
        let th = ColourThreshold {
            rgb: [rng.gen_range(60..220), rng.gen_range(60..220), rng.gen_range(60..220)],
            keep_fraction: rng.gen_range(0.05..1.0),
            ..ColourThreshold::default()
        };
        let fraction = |c: &BinaryMask| {
            let dark = c
                .true_pixels()
                .filter(|&(x, y)| {
                    let p = img.get_pixel(x as u32, y as u32).0;
                    p[0] < th.rgb[0] && p[1] < th.rgb[1] && p[2] < th.rgb[2]
                })
                .count();
            dark as f64 / c.area() as f64
        };
        let kept = filter_components_by_colour(&comps, &img, &th).unwrap();
        if comps.len() <= 1 {
            assert_eq!(kept, comps);
            continue;
        }
        let expect: Vec<BinaryMask> = comps.iter().filter(|c| fraction(c) >= th.keep_fraction).cloned().collect();
        if expect.is_empty() {
            assert_eq!(kept.len(), 1);
            let best = comps.iter().map(fraction).fold(0.0, f64::max);
            assert_eq!(fraction(&kept[0]), best);
        } else {
            assert_eq!(kept, expect);
        }
    }
}

#[test]
fn fin_plus_splash_keeps_only_fin() {
    let (w, h) = (60, 30);
    let fin = BinaryMask::from_fn(w, h, |x, y| (5..25).contains(&x) && (5..25).contains(&y));
    let splash = BinaryMask::from_fn(w, h, |x, y| (40..55).contains(&x) && (10..20).contains(&y));
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if fin.get(x as usize, y as usize) {
            Rgb([60, 60, 70])
        } else if splash.get(x as usize, y as usize) {
            Rgb([235, 240, 250])
        } else {
            Rgb([110, 160, 200])
        }
    });
    let mask = fin.or(&splash).unwrap();
    let params = PostprocessParams::default();
    let crops = postprocess_detection(&img, &mask, &params).unwrap();
    assert_eq!(crops.len(), 1);
    // Step-by-step composition.
    let closed = close_holes(&mask, params.se);
    let comps = split_components(&closed);
    let kept = filter_components_by_colour(&comps, &apply_mask(&img, &closed).unwrap(), &params.threshold).unwrap();
    assert_eq!(kept, vec![fin.clone()]);
    let expect = crop_to_mask(&apply_mask(&img, &fin).unwrap(), &fin, params.pad_px).unwrap();
    assert_eq!(crops[0].crop, expect);
    assert_eq!(crops[0].component, fin);
}

// ---------------------------------------------------------------- properties

fn arb_mask() -> impl Strategy<Value = BinaryMask> {
    (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
        proptest::collection::vec(proptest::bool::weighted(0.35), w * h)
            .prop_map(move |bits| BinaryMask::from_bits(w, h, bits).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closing_is_extensive_and_idempotent(m in arb_mask(), k in prop::sample::select(vec![3usize, 5, 7])) {
        let se = StructuringElement::square(k).unwrap();
        let c = close_holes(&m, se);
        prop_assert!(m.true_pixels().all(|(x, y)| c.get(x, y)));
        prop_assert_eq!(close_holes(&c, se), c);
    }

    #[test]
    fn components_partition_the_mask(m in arb_mask()) {
        let comps = split_components(&m);
        let total: usize = comps.iter().map(|c| c.area()).sum();
        prop_assert_eq!(total, m.area());
        let mut union = BinaryMask::new(m.width(), m.height());
        for c in &comps {
            prop_assert!(!c.is_empty());
            prop_assert_eq!(bfs_components(c).len(), 1);
            union = union.or(c).unwrap();
        }
        prop_assert_eq!(union, m);
    }

    #[test]
    fn crop_contains_every_true_pixel(m in arb_mask(), pad in 0u32..6) {
        prop_assume!(!m.is_empty());
        let b = crop_bounds(&m, pad).unwrap();
        for (x, y) in m.true_pixels() {
            prop_assert!(x as u32 >= b.x && (x as u32) < b.x + b.w);
            prop_assert!(y as u32 >= b.y && (y as u32) < b.y + b.h);
        }
        prop_assert!(b.x + b.w <= m.width() as u32 && b.y + b.h <= m.height() as u32);
    }

    #[test]
    fn apply_mask_is_idempotent(m in arb_mask(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, m.width(), m.height());
        let once = apply_mask(&img, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
    }
}
