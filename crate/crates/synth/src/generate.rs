//! Procedural dorsal-fin photographs with pixel-exact masks.
//!
//! Each individual owns a fin silhouette (leading/trailing edge curvature,
//! sweep, base width, a sequence of trailing-edge notches, and pale scar
//! strokes) and, for textured sea, its own wave pattern. Every rendering
//! varies rotation, scale, exposure, position and sensor noise.

use std::f64::consts::PI;

use finpipe_core::BinaryMask;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    PlainSea,
    /// Wave texture whose orientation, wavelength and tint belong to the
    /// individual in the picture.
    TexturedSea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_individuals: usize,
    pub images_per_individual: usize,
    /// `(height, width)`.
    pub image_size: (u32, u32),
    pub background: Background,
    pub dark_mean: [f64; 3],
    pub light_mean: [f64; 3],
    /// Per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Spread of silhouettes around a common base fin (1 = full range).
    pub shape_variation: f64,
    /// Half-range of the per-individual water tint (textured sea only).
    pub tint_range: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub exposure_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            num_individuals: 10,
            images_per_individual: 20,
            image_size: (160, 224),
            background: Background::PlainSea,
            dark_mean: [58.0, 62.0, 74.0],
            light_mean: [118.0, 168.0, 204.0],
            noise_sigma: 6.0,
            shape_variation: 1.0,
            tint_range: 18.0,
            max_rotation_deg: 15.0,
            scale_range: (0.8, 1.2),
            exposure_range: (0.8, 1.2),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.num_individuals < 2 {
            return fail(format!("need >= 2 individuals, got {}", self.num_individuals));
        }
        if self.images_per_individual < 2 {
            return fail(format!("need >= 2 images per individual, got {}", self.images_per_individual));
        }
        if self.image_size.0 < 64 || self.image_size.1 < 64 {
            return fail(format!("image size {:?} is below 64x64", self.image_size));
        }
        if (0..3).any(|c| self.dark_mean[c] >= self.light_mean[c]) {
            return fail(format!(
                "dark_mean {:?} must lie below light_mean {:?} in every channel",
                self.dark_mean, self.light_mean
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.shape_variation >= 0.0 && self.tint_range >= 0.0) {
            return fail("noise_sigma, shape_variation and tint_range must be >= 0".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.4) {
            return fail(format!("scale range {:?} must satisfy 0 < lo <= hi <= 1.4", self.scale_range));
        }
        let (lo, hi) = self.exposure_range;
        if !(lo > 0.0 && lo <= hi) {
            return fail(format!("exposure range {:?} is invalid", self.exposure_range));
        }
        Ok(())
    }

    /// Textured-sea set where water colour follows identity more strongly
    /// than fin shape does.
    pub fn confounded() -> Self {
        SynthConfig {
            seed: 2,
            images_per_individual: 10,
            background: Background::TexturedSea,
            light_mean: [140.0, 170.0, 196.0],
            shape_variation: 0.3,
            tint_range: 60.0,
            ..Default::default()
        }
    }

    pub fn label(&self, individual: usize) -> String {
        format!("fin{individual:03}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    /// Position along the trailing edge, 0 at the tip.
    pub t: f64,
    pub depth: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub angle: f64,
    pub wavelength: f64,
    pub amplitude: f64,
}

/// Identity-bearing attributes of one individual, in fin-height units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinShape {
    pub base_width: f64,
    pub apex_x: f64,
    pub lead_bulge: f64,
    pub trail_concavity: f64,
    pub notches: Vec<Notch>,
    /// Scar strokes as barycentric endpoints in the base-apex triangle.
    pub scars: Vec<[[f64; 3]; 2]>,
    pub waves: [Wave; 2],
    pub tint: [f64; 3],
}

type Pt = (f64, f64);

fn bezier(p0: Pt, c: Pt, p1: Pt, t: f64) -> Pt {
    let s = 1.0 - t;
    (
        s * s * p0.0 + 2.0 * s * t * c.0 + t * t * p1.0,
        s * s * p0.1 + 2.0 * s * t * c.1 + t * t * p1.1,
    )
}

fn toward(from: Pt, to: Pt, target: Pt, amount: f64) -> Pt {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len = (dx * dx + dy * dy).sqrt();
    let mut n = (-dy / len, dx / len);
    let mid = ((from.0 + to.0) / 2.0, (from.1 + to.1) / 2.0);
    if n.0 * (target.0 - mid.0) + n.1 * (target.1 - mid.1) < 0.0 {
        n = (-n.0, -n.1);
    }
    (mid.0 + amount * len * n.0, mid.1 + amount * len * n.1)
}

impl FinShape {
    pub fn sample<R: Rng>(rng: &mut R, variation: f64, tint_range: f64) -> Self {
        let mut vary = |base: f64, spread: f64| base + variation * rng.gen_range(-spread..=spread);
        let base_width = vary(0.95, 0.35);
        let apex_x = vary(0.9, 0.35);
        let lead_bulge = vary(0.16, 0.1);
        let trail_concavity = vary(0.18, 0.12);
        let n_notches = rng.gen_range(1..=4);
        let mut notches: Vec<Notch> = (0..n_notches)
            .map(|_| Notch {
                t: rng.gen_range(0.12..0.88),
                depth: rng.gen_range(0.035..0.09),
                half_width: rng.gen_range(0.02..0.05),
            })
            .collect();
        notches.sort_by(|a, b| a.t.total_cmp(&b.t));
        let n_scars = rng.gen_range(0..=2);
        let bary = |rng: &mut R| {
            let mut w = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            w
        };
        let scars = (0..n_scars).map(|_| [bary(rng), bary(rng)]).collect();
        let wave = |rng: &mut R| Wave {
            angle: rng.gen_range(0.0..PI),
            wavelength: rng.gen_range(5.0..22.0),
            amplitude: rng.gen_range(14.0..30.0),
        };
        let waves = [wave(rng), wave(rng)];
        let t = tint_range.max(1e-9);
        let tint = [rng.gen_range(-t..t), rng.gen_range(-t..t), rng.gen_range(-t..t)];
        FinShape {
            base_width,
            apex_x,
            lead_bulge,
            trail_concavity,
            notches,
            scars,
            waves,
            tint,
        }
    }

    fn corners(&self) -> [Pt; 3] {
        [(0.0, 0.0), (self.apex_x, 1.0), (self.base_width, 0.0)]
    }

    /// Closed outline in fin coordinates (y up, height 1).
    pub fn outline(&self) -> Vec<Pt> {
        let [front, apex, rear] = self.corners();
        let centroid = ((front.0 + apex.0 + rear.0) / 3.0, 1.0 / 3.0);
        let away = (2.0 * ((front.0 + apex.0) / 2.0) - centroid.0, 2.0 * 0.5 - centroid.1);
        let c_lead = toward(front, apex, away, self.lead_bulge);
        let c_trail = toward(apex, rear, centroid, self.trail_concavity);
        let mut pts = Vec::with_capacity(130);
        for i in 0..40 {
            pts.push(bezier(front, c_lead, apex, i as f64 / 40.0));
        }
        let steps = 90;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let mut p = bezier(apex, c_trail, rear, t);
            let offset: f64 = self
                .notches
                .iter()
                .map(|n| n.depth * (1.0 - (t - n.t).abs() / n.half_width).max(0.0))
                .sum();
            if offset > 0.0 {
                let a = bezier(apex, c_trail, rear, (t - 1e-3).max(0.0));
                let b = bezier(apex, c_trail, rear, (t + 1e-3).min(1.0));
                let (tx, ty) = (b.0 - a.0, b.1 - a.1);
                let len = (tx * tx + ty * ty).sqrt();
                let mut n = (-ty / len, tx / len);
                if n.0 * (centroid.0 - p.0) + n.1 * (centroid.1 - p.1) < 0.0 {
                    n = (-n.0, -n.1);
                }
                p = (p.0 + offset * n.0, p.1 + offset * n.1);
            }
            pts.push(p);
        }
        pts
    }

    fn scar_segments(&self) -> Vec<(Pt, Pt)> {
        let c = self.corners();
        let at = |w: &[f64; 3]| {
            (
                w[0] * c[0].0 + w[1] * c[1].0 + w[2] * c[2].0,
                w[0] * c[0].1 + w[1] * c[1].1 + w[2] * c[2].1,
            )
        };
        self.scars.iter().map(|[a, b]| (at(a), at(b))).collect()
    }

    /// Silhouette under a fixed pose on a 96x96 raster.
    pub fn canonical_mask(&self) -> BinaryMask {
        let pose = Pose { angle: 0.0, height_px: 60.0, centre: (48.0, 48.0) };
        let poly = pose.apply_all(self, &self.outline());
        fill_polygon(&poly, 96, 96)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    angle: f64,
    height_px: f64,
    centre: Pt,
}

impl Pose {
    fn apply(&self, shape: &FinShape, p: Pt) -> Pt {
        let cx = (shape.apex_x.min(0.0) + shape.apex_x.max(shape.base_width)) / 2.0;
        let x = (p.0 - cx) * self.height_px;
        let y = -(p.1 - 0.5) * self.height_px;
        let (s, c) = self.angle.sin_cos();
        (self.centre.0 + c * x - s * y, self.centre.1 + s * x + c * y)
    }

    fn apply_all(&self, shape: &FinShape, pts: &[Pt]) -> Vec<Pt> {
        pts.iter().map(|&p| self.apply(shape, p)).collect()
    }
}

/// Even-odd scanline fill sampled at pixel centres.
fn fill_polygon(poly: &[Pt], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width as usize, height as usize);
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if (a.1 <= yc) != (b.1 <= yc) {
                xs.push(a.0 + (yc - a.1) / (b.1 - a.1) * (b.0 - a.0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                continue;
            }
            let x0 = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let x1 = (pair[1] - 0.5).floor().min(width as f64 - 1.0) as i64;
            for x in x0..=x1 {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    mask
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One rendered photograph.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Present for generated datasets.
    pub config: Option<SynthConfig>,
    /// Per-individual attributes; empty for imported datasets.
    pub shapes: Vec<FinShape>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.samples.iter().map(|s| s.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Per-individual attributes for `cfg`.
pub fn sample_shapes(cfg: &SynthConfig) -> Vec<FinShape> {
    (0..cfg.num_individuals)
        .map(|i| FinShape::sample(&mut stream_rng(cfg.seed, i as u64), cfg.shape_variation, cfg.tint_range))
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders image `k` of individual `shape`.
pub fn render(cfg: &SynthConfig, shape: &FinShape, rng: &mut ChaCha8Rng) -> (RgbImage, BinaryMask) {
    let (h, w) = cfg.image_size;
    let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let exposure = rng.gen_range(cfg.exposure_range.0..=cfg.exposure_range.1);
    let height_px = 0.42 * h as f64 * scale;

    let outline = shape.outline();
    let probe = Pose { angle, height_px, centre: (0.0, 0.0) }.apply_all(shape, &outline);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &probe {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let margin = 6.0;
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: f64| {
        let (a, b) = (margin - lo, extent - margin - hi);
        if a < b {
            rng.gen_range(a..=b)
        } else {
            (a + b) / 2.0
        }
    };
    let centre = (pick(rng, x0, x1, w as f64), pick(rng, y0, y1, h as f64));
    let pose = Pose { angle, height_px, centre };
    let poly = pose.apply_all(shape, &outline);
    let mask = fill_polygon(&poly, w, h);
    let scars: Vec<(Pt, Pt)> = shape
        .scar_segments()
        .into_iter()
        .map(|(a, b)| (pose.apply(shape, a), pose.apply(shape, b)))
        .collect();
    let scar_width = 0.03 * height_px;

    let phases = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-9)).unwrap();
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut base = [0.0; 3];
            if mask.get(x as usize, y as usize) {
                let scarred = scars.iter().any(|&(a, b)| segment_distance(p, a, b) < scar_width);
                for c in 0..3 {
                    base[c] = cfg.dark_mean[c] + if scarred { 45.0 } else { 0.0 };
                }
            } else {
                let mut texture = 0.0;
                if cfg.background == Background::TexturedSea {
                    for (wave, phase) in shape.waves.iter().zip(phases) {
                        let (s, c) = wave.angle.sin_cos();
                        texture += wave.amplitude * ((p.0 * c + p.1 * s) * 2.0 * PI / wave.wavelength + phase).sin();
                    }
                }
                for c in 0..3 {
                    let tint = if cfg.background == Background::TexturedSea { shape.tint[c] } else { 0.0 };
                    base[c] = cfg.light_mean[c] + tint + texture;
                }
            }
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = exposure * base[c] + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(x, y, Rgb(px));
        }
    }
    (image, mask)
}

/// Builds the whole catalogue; a pure function of `cfg`.
pub fn generate_synthetic_catalogue(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let shapes = sample_shapes(cfg);
    let mut samples = Vec::with_capacity(cfg.num_individuals * cfg.images_per_individual);
    for (i, shape) in shapes.iter().enumerate() {
        let label = cfg.label(i);
        for k in 0..cfg.images_per_individual {
            let mut rng = stream_rng(cfg.seed, (1 << 40) | ((i as u64) << 20) | k as u64);
            let (image, mask) = render(cfg, shape, &mut rng);
            samples.push(Sample {
                id: format!("{label}_{k:03}"),
                label: label.clone(),
                image,
                mask,
            });
        }
    }
    Ok(Dataset { config: Some(cfg.clone()), shapes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { num_individuals: 3, images_per_individual: 2, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_catalogue(&small()).unwrap();
        let b = generate_synthetic_catalogue(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fins_darker_than_water() {
        let ds = generate_synthetic_catalogue(&SynthConfig { background: Background::TexturedSea, ..small() }).unwrap();
        for s in &ds.samples {
            let (mut fin, mut nf, mut water, mut nw) = (0.0, 0, 0.0, 0);
            for (x, y, p) in s.image.enumerate_pixels() {
                let v = p.0.iter().map(|&c| c as f64).sum::<f64>() / 3.0;
                if s.mask.get(x as usize, y as usize) {
                    fin += v;
                    nf += 1;
                } else {
                    water += v;
                    nw += 1;
                }
            }
            assert!(nf > 500);
            assert!(fin / nf as f64 + 30.0 < water / nw as f64);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(SynthConfig { num_individuals: 1, ..small() }.validate().is_err());
        assert!(SynthConfig { images_per_individual: 1, ..small() }.validate().is_err());
        assert!(SynthConfig { dark_mean: [200.0, 10.0, 10.0], ..small() }.validate().is_err());
    }

    #[test]
    fn polygon_fill_square() {
        let sq = [(1.0, 1.0), (4.0, 1.0), (4.0, 4.0), (1.0, 4.0)];
        let m = fill_polygon(&sq, 6, 6);
        assert_eq!(m.area(), 9);
        assert!(m.get(1, 1) && m.get(3, 3) && !m.get(4, 4));
    }
}
