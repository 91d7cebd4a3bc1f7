//! Training-time image augmentation: colour jitter and random perspective.

use image::{Rgb, RgbImage};
use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::config::AugmentStrategy;

/// Sampling ranges for colour jitter. Hue is a fraction of the colour wheel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.9, 1.1),
            hue: (-0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample<R: Rng>(ranges: &JitterRanges, rng: &mut R) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        JitterParams {
            brightness: draw(ranges.brightness),
            contrast: draw(ranges.contrast),
            saturation: draw(ranges.saturation),
            hue: draw(ranges.hue),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn blend(img: &mut RgbImage, factor: f64, other: impl Fn(&Rgb<u8>) -> [f64; 3]) {
    for p in img.pixels_mut() {
        let o = other(p);
        for c in 0..3 {
            p[c] = to_u8(factor * p[c] as f64 + (1.0 - factor) * o[c]);
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Applies brightness, contrast, saturation and hue in that order. Factors at
/// their identity value are skipped.
pub fn apply_colour_jitter(image: &RgbImage, params: &JitterParams) -> RgbImage {
    let mut img = image.clone();
    if params.brightness != 1.0 {
        blend(&mut img, params.brightness, |_| [0.0; 3]);
    }
    if params.contrast != 1.0 {
        let n = (img.width() * img.height()).max(1) as f64;
        let mean = img.pixels().map(|p| to_u8(luma(p)) as f64).sum::<f64>() / n;
        blend(&mut img, params.contrast, |_| [mean; 3]);
    }
    if params.saturation != 1.0 {
        blend(&mut img, params.saturation, |p| {
            let g = to_u8(luma(p)) as f64;
            [g; 3]
        });
    }
    if params.hue != 0.0 {
        for p in img.pixels_mut() {
            let (h, s, v) = rgb_to_hsv(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0);
            let (r, g, b) = hsv_to_rgb(h + params.hue, s, v);
            *p = Rgb([to_u8(r * 255.0), to_u8(g * 255.0), to_u8(b * 255.0)]);
        }
    }
    img
}

pub fn augment_colour_jitter<R: Rng>(image: &RgbImage, rng: &mut R) -> RgbImage {
    let params = JitterParams::sample(&JitterRanges::default(), rng);
    apply_colour_jitter(image, &params)
}

/// Inward displacement of each corner (top-left, top-right, bottom-right,
/// bottom-left), in pixels, as `(dx, dy)` magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveParams {
    pub displacements: [[f64; 2]; 4],
}

impl PerspectiveParams {
    /// Each coordinate is drawn uniformly from `[0, distortion * side / 2]`.
    pub fn sample<R: Rng>(width: u32, height: u32, distortion: f64, rng: &mut R) -> Self {
        let mx = distortion * width as f64 / 2.0;
        let my = distortion * height as f64 / 2.0;
        let mut displacements = [[0.0; 2]; 4];
        for d in displacements.iter_mut() {
            d[0] = if mx > 0.0 { rng.gen_range(0.0..=mx) } else { 0.0 };
            d[1] = if my > 0.0 { rng.gen_range(0.0..=my) } else { 0.0 };
        }
        PerspectiveParams { displacements }
    }

    pub fn is_identity(&self) -> bool {
        self.displacements.iter().flatten().all(|&v| v == 0.0)
    }

    /// `(source corners, destination corners)`.
    pub fn corners(&self, width: u32, height: u32) -> ([[f64; 2]; 4], [[f64; 2]; 4]) {
        let (w, h) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
        let src = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
        let sign = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let mut dst = src;
        for i in 0..4 {
            dst[i][0] += sign[i][0] * self.displacements[i][0];
            dst[i][1] += sign[i][1] * self.displacements[i][1];
        }
        (src, dst)
    }
}

/// Homography `H` with `H * from[i] ~ to[i]`, as a row-major 3x3.
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<[[f64; 3]; 3]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = from[i];
        let [u, v] = to[i];
        let r = 2 * i;
        a.set_row(r, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = img.dimensions();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return [0; 3];
    }
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = to_u8(top * (1.0 - fy) + bot * fy);
    }
    out
}

/// Warps `image` so that its corners move to the displaced positions.
/// Uncovered output pixels are black.
pub fn apply_perspective(image: &RgbImage, params: &PerspectiveParams) -> RgbImage {
    let (w, h) = image.dimensions();
    if params.is_identity() || w < 2 || h < 2 {
        return image.clone();
    }
    let (src, dst) = params.corners(w, h);
    let Some(m) = homography(&dst, &src) else {
        return image.clone();
    };
    RgbImage::from_fn(w, h, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let z = m[2][0] * xf + m[2][1] * yf + m[2][2];
        if z.abs() < 1e-12 {
            return Rgb([0; 3]);
        }
        let sx = (m[0][0] * xf + m[0][1] * yf + m[0][2]) / z;
        let sy = (m[1][0] * xf + m[1][1] * yf + m[1][2]) / z;
        Rgb(bilinear(image, sx, sy))
    })
}

pub const DEFAULT_DISTORTION: f64 = 0.5;

pub fn augment_perspective<R: Rng>(image: &RgbImage, rng: &mut R, distortion: f64) -> RgbImage {
    let params = PerspectiveParams::sample(image.width(), image.height(), distortion, rng);
    apply_perspective(image, &params)
}

/// Applies `strategy`; `Both` runs colour jitter first.
pub fn augment<R: Rng>(image: &RgbImage, strategy: AugmentStrategy, rng: &mut R) -> RgbImage {
    match strategy {
        AugmentStrategy::None => image.clone(),
        AugmentStrategy::ColourJitter => augment_colour_jitter(image, rng),
        AugmentStrategy::PerspectiveShift => augment_perspective(image, rng, DEFAULT_DISTORTION),
        AugmentStrategy::Both => {
            let j = augment_colour_jitter(image, rng);
            augment_perspective(&j, rng, DEFAULT_DISTORTION)
        }
    }
}
