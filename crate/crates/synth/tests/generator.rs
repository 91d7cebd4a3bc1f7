use finpipe_core::maskproc::{calibrate_threshold, postprocess_detection, PostprocessParams};
use finpipe_synth::experiments::{crop_triple, split_dataset};
use finpipe_synth::{
    generate_synthetic_catalogue, read_dataset, run_threshold_study, write_dataset, Background, SynthConfig,
};

fn cfg(background: Background) -> SynthConfig {
    SynthConfig { num_individuals: 6, images_per_individual: 4, background, ..Default::default() }
}

#[test]
fn same_config_gives_identical_bytes() {
    let a = generate_synthetic_catalogue(&cfg(Background::TexturedSea)).unwrap();
    let b = generate_synthetic_catalogue(&cfg(Background::TexturedSea)).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&a, da.path()).unwrap();
    write_dataset(&b, db.path()).unwrap();
    for s in &a.samples {
        for sub in ["images", "masks"] {
            let f = format!("{sub}/{}.png", s.id);
            assert_eq!(std::fs::read(da.path().join(&f)).unwrap(), std::fs::read(db.path().join(&f)).unwrap());
        }
    }
    assert_eq!(read_dataset(da.path()).unwrap(), a);
}

#[test]
fn canonical_silhouettes_are_unique() {
    let ds = generate_synthetic_catalogue(&SynthConfig { num_individuals: 12, images_per_individual: 2, ..Default::default() }).unwrap();
    let masks: Vec<_> = ds.shapes.iter().map(|s| s.canonical_mask()).collect();
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            let hamming = masks[i].bits().iter().zip(masks[j].bits()).filter(|(a, b)| a != b).count();
            assert!(hamming > 0, "{i} and {j} share a silhouette");
        }
    }
}

#[test]
fn fin_pixels_darker_than_water_everywhere() {
    for bg in [Background::PlainSea, Background::TexturedSea] {
        for ds in [generate_synthetic_catalogue(&cfg(bg)).unwrap(), generate_synthetic_catalogue(&SynthConfig::confounded()).unwrap()] {
            for s in &ds.samples {
                let (mut fin, mut water) = ((0.0, 0usize), (0.0, 0usize));
                for (x, y, p) in s.image.enumerate_pixels() {
                    let v: f64 = p.0.iter().map(|&c| c as f64).sum();
                    let acc = if s.mask.get(x as usize, y as usize) { &mut fin } else { &mut water };
                    acc.0 += v;
                    acc.1 += 1;
                }
                assert!(fin.0 / (fin.1 as f64) < water.0 / (water.1 as f64), "{}", s.id);
            }
        }
    }
}

#[test]
fn plain_sea_masks_survive_as_one_component() {
    let ds = generate_synthetic_catalogue(&SynthConfig { num_individuals: 10, images_per_individual: 5, ..Default::default() }).unwrap();
    for s in &ds.samples {
        let crops = postprocess_detection(&s.image, &s.mask, &PostprocessParams::default()).unwrap();
        assert_eq!(crops.len(), 1, "{}", s.id);
    }
}

#[test]
fn threshold_study_properties() {
    let ds = generate_synthetic_catalogue(&SynthConfig { num_individuals: 6, images_per_individual: 8, ..Default::default() }).unwrap();
    let study = run_threshold_study(&ds, 0.9, &[0.5, 0.9]).unwrap();
    for o in study.overlap {
        assert!(o < 0.2, "overlap {o}");
    }
    assert!(study.rates[1].rejected > study.rates[0].rejected);

    let mut channels: [Vec<u8>; 3] = Default::default();
    for s in &ds.samples {
        for (x, y) in s.mask.true_pixels() {
            let p = s.image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                channels[c].push(p[c]);
            }
        }
    }
    assert_eq!(calibrate_threshold(&channels, 0.9).unwrap().rgb, study.calibration.threshold.rgb);
}

#[test]
fn background_mask_is_box_minus_fin() {
    let ds = generate_synthetic_catalogue(&cfg(Background::TexturedSea)).unwrap();
    for s in &ds.samples {
        let t = crop_triple(s, 4).unwrap();
        assert_eq!(t.background_mask.intersection_area(&s.mask).unwrap(), 0);
        let b = finpipe_core::maskproc::crop_bounds(&s.mask, 4).unwrap();
        assert_eq!(t.background_mask.area() + s.mask.area(), (b.w * b.h) as usize);
        assert_eq!(t.bbox.dimensions(), t.fin.dimensions());
    }
}

#[test]
fn split_is_stratified() {
    let ds = generate_synthetic_catalogue(&SynthConfig { num_individuals: 3, images_per_individual: 10, ..Default::default() }).unwrap();
    let split = split_dataset(&ds, 0.8, 0).unwrap();
    assert_eq!(split.train.len(), 24);
    assert_eq!(split.test.len(), 6);
    for label in ds.labels() {
        assert_eq!(split.test.iter().filter(|&&i| ds.samples[i].label == label).count(), 2);
    }
}
