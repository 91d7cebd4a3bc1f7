//! Mask hygiene for detector output: hole closing, component splitting,
//! colour-threshold rejection of splash and water, background removal, and
//! centred cropping. Also the intensity-percentile threshold calibration.
//!
//! Everything here is a pure function over immutable inputs.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::{BBox, BinaryMask};

/// Square structuring element of odd side `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub k: usize,
}

impl Default for StructuringElement {
    fn default() -> Self {
        StructuringElement { k: 5 }
    }
}

impl StructuringElement {
    pub fn square(k: usize) -> Result<Self> {
        let se = StructuringElement { k };
        se.validate()?;
        Ok(se)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 || self.k % 2 == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "structuring element side must be odd and >= 3, got {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }
}

/// Per-channel intensity threshold plus the calibration percentile and the
/// per-component keep fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColourThreshold {
    pub rgb: [u8; 3],
    pub percentile: f64,
    pub keep_fraction: f64,
}

impl Default for ColourThreshold {
    fn default() -> Self {
        ColourThreshold {
            rgb: [148, 148, 159],
            percentile: 0.9,
            keep_fraction: 0.5,
        }
    }
}

impl ColourThreshold {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| v > 0.0 && v <= 1.0;
        if !in_range(self.percentile) || !in_range(self.keep_fraction) {
            return Err(CoreError::InvalidConfig(format!(
                "percentile and keep fraction must lie in (0, 1], got {} and {}",
                self.percentile, self.keep_fraction
            )));
        }
        Ok(())
    }

    /// A pixel is dark when every channel is strictly below its threshold.
    #[inline]
    pub fn is_dark(&self, px: &Rgb<u8>) -> bool {
        px.0.iter().zip(&self.rgb).all(|(v, t)| v < t)
    }
}

fn check_image_dims(image: &RgbImage, mask: &BinaryMask) -> Result<()> {
    let img = (image.width() as usize, image.height() as usize);
    if img != mask.dims() {
        return Err(CoreError::DimensionMismatch {
            expected: img,
            found: mask.dims(),
        });
    }
    Ok(())
}

// ------------------------------------------------------------- morphology

fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    let rows = BinaryMask::from_fn(w, h, |x, y| {
        (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| mask.get(xx, y))
    });
    BinaryMask::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| rows.get(x, yy))
    })
}

// Pixels outside the raster do not constrain erosion, which keeps closing
// extensive up to the border.
fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    let rows = BinaryMask::from_fn(w, h, |x, y| {
        (x.saturating_sub(r)..=(x + r).min(w - 1)).all(|xx| mask.get(xx, y))
    });
    BinaryMask::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..=(y + r).min(h - 1)).all(|yy| rows.get(x, yy))
    })
}

/// Morphological closing: dilation followed by erosion with `se`.
///
/// Holes narrower than the element are filled; wider holes (natural notches
/// and punctures in a fin) survive. The kernel size is the only knob that
/// separates the two, so pick it below the smallest feature worth keeping.
pub fn close_holes(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    if mask.width() == 0 || mask.height() == 0 {
        return mask.clone();
    }
    let r = se.radius();
    erode(&dilate(mask, r), r)
}

// ------------------------------------------------------------- components

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Splits a mask into its 8-connected components, each as a full-size mask.
///
/// Ordered by descending pixel count; ties go to the component whose
/// topmost-leftmost pixel comes first in row-major order.
pub fn split_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = mask.dims();
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; w * h];
    let mut sets = DisjointSet { parent: Vec::new() };

    // First pass: provisional labels from the already-visited neighbours
    // (W, NW, N, NE).
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [NONE; 4];
            if x > 0 {
                neighbours[0] = labels[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbours[1] = labels[up + x - 1];
                }
                neighbours[2] = labels[up + x];
                if x + 1 < w {
                    neighbours[3] = labels[up + x + 1];
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                if label == NONE {
                    label = n;
                } else {
                    sets.union(label, n);
                }
            }
            if label == NONE {
                label = sets.parent.len() as u32;
                sets.parent.push(label);
            }
            labels[y * w + x] = label;
        }
    }

    // Second pass: resolve roots; roots are numbered in order of first
    // appearance, i.e. by topmost-leftmost pixel.
    let mut root_slot: Vec<u32> = vec![NONE; sets.parent.len()];
    let mut comps: Vec<(usize, BinaryMask)> = Vec::new();
    for i in 0..w * h {
        if labels[i] == NONE {
            continue;
        }
        let root = sets.find(labels[i]) as usize;
        if root_slot[root] == NONE {
            root_slot[root] = comps.len() as u32;
            comps.push((0, BinaryMask::new(w, h)));
        }
        let entry = &mut comps[root_slot[root] as usize];
        entry.0 += 1;
        entry.1.set(i % w, i / w, true);
    }
    // Stable sort keeps first-appearance order among equal sizes.
    comps.sort_by(|a, b| b.0.cmp(&a.0));
    comps.into_iter().map(|(_, m)| m).collect()
}

// ------------------------------------------------------------- colour

/// Keeps pixels under `mask`, blacks out the rest.
pub fn apply_mask(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    check_image_dims(image, mask)?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !mask.get(x as usize, y as usize) {
            *px = Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}

/// Fraction of the component's pixels that are dark under `th`; 0 for an
/// empty component.
pub fn dark_fraction(image: &RgbImage, component: &BinaryMask, th: &ColourThreshold) -> Result<f64> {
    check_image_dims(image, component)?;
    let (mut dark, mut total) = (0usize, 0usize);
    for (x, y) in component.true_pixels() {
        total += 1;
        if th.is_dark(image.get_pixel(x as u32, y as u32)) {
            dark += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        dark as f64 / total as f64
    })
}

/// Rejects light (water, splash) components of a multi-component mask.
///
/// A single component is returned untouched. Otherwise components whose
/// dark fraction is at least `th.keep_fraction` survive; if none does, the
/// darkest one is kept so an over-exposed detection is never dropped.
pub fn filter_components_by_colour(
    components: &[BinaryMask],
    image: &RgbImage,
    th: &ColourThreshold,
) -> Result<Vec<BinaryMask>> {
    for c in components {
        check_image_dims(image, c)?;
    }
    if components.len() <= 1 {
        return Ok(components.to_vec());
    }
    let fractions = components
        .iter()
        .map(|c| dark_fraction(image, c, th))
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<BinaryMask> = components
        .iter()
        .zip(&fractions)
        .filter(|(_, &f)| f >= th.keep_fraction)
        .map(|(c, _)| c.clone())
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    // Earliest index wins ties, so the larger component is preferred.
    let best = fractions
        .iter()
        .enumerate()
        .fold(0usize, |best, (i, &f)| if f > fractions[best] { i } else { best });
    Ok(vec![components[best].clone()])
}

// ------------------------------------------------------------- calibration

/// 256-bin intensity histograms for R, G and B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelHistograms {
    pub r: Vec<u64>,
    pub g: Vec<u64>,
    pub b: Vec<u64>,
}

impl Default for ChannelHistograms {
    fn default() -> Self {
        ChannelHistograms {
            r: vec![0; 256],
            g: vec![0; 256],
            b: vec![0; 256],
        }
    }
}

impl ChannelHistograms {
    pub fn channel(&self, c: usize) -> &[u64] {
        match c {
            0 => &self.r,
            1 => &self.g,
            _ => &self.b,
        }
    }

    pub fn add_pixel(&mut self, px: &Rgb<u8>) {
        self.r[px.0[0] as usize] += 1;
        self.g[px.0[1] as usize] += 1;
        self.b[px.0[2] as usize] += 1;
    }

    pub fn add_values(&mut self, channel: usize, values: &[u8]) {
        let hist = match channel {
            0 => &mut self.r,
            1 => &mut self.g,
            _ => &mut self.b,
        };
        for &v in values {
            hist[v as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ChannelHistograms) {
        for (dst, src) in [
            (&mut self.r, &other.r),
            (&mut self.g, &other.g),
            (&mut self.b, &other.b),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.r.iter().sum()
    }
}

/// Rank (1-based) of the nearest-rank `p`-quantile among `n` sorted values:
/// the smallest `r` with `r >= p * n`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    // The epsilon absorbs representation error such as 0.9 * 10 landing just
    // above 9.
    let r = (p * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

fn histogram_quantile(hist: &[u64], p: f64) -> Option<u8> {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return None;
    }
    let rank = nearest_rank(p, n as usize) as u64;
    let mut seen = 0u64;
    for (value, &count) in hist.iter().enumerate() {
        seen += count;
        if seen >= rank {
            return Some(value as u8);
        }
    }
    None
}

/// Per-channel nearest-rank percentile threshold from accumulated histograms
/// of foreground (fin) pixels.
pub fn calibrate_from_histograms(
    fin: &ChannelHistograms,
    percentile: f64,
    keep_fraction: f64,
) -> Result<ColourThreshold> {
    let mut rgb = [0u8; 3];
    for (c, t) in rgb.iter_mut().enumerate() {
        *t = histogram_quantile(fin.channel(c), percentile)
            .ok_or(CoreError::EmptyInput("channel intensity multiset"))?;
    }
    let th = ColourThreshold {
        rgb,
        percentile,
        keep_fraction,
    };
    th.validate()?;
    Ok(th)
}

/// Per-channel nearest-rank percentile of dark-class intensities.
pub fn calibrate_threshold(channels: &[Vec<u8>; 3], percentile: f64) -> Result<ColourThreshold> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "percentile must lie in (0, 1], got {percentile}"
        )));
    }
    let mut hist = ChannelHistograms::default();
    for (c, values) in channels.iter().enumerate() {
        if values.is_empty() {
            return Err(CoreError::EmptyInput("channel intensity multiset"));
        }
        hist.add_values(c, values);
    }
    calibrate_from_histograms(&hist, percentile, ColourThreshold::default().keep_fraction)
}

/// Six global histograms (channel x {dolphin, background}) and the threshold
/// derived from the dolphin ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub dolphin: ChannelHistograms,
    pub background: ChannelHistograms,
    pub threshold: ColourThreshold,
}

impl CalibrationReport {
    pub fn build(
        dolphin: ChannelHistograms,
        background: ChannelHistograms,
        percentile: f64,
        keep_fraction: f64,
    ) -> Result<Self> {
        let threshold = calibrate_from_histograms(&dolphin, percentile, keep_fraction)?;
        Ok(CalibrationReport {
            dolphin,
            background,
            threshold,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Adds the pixels of `image` under `mask` to `fg` and the rest to `bg`.
pub fn accumulate_histograms(
    image: &RgbImage,
    mask: &BinaryMask,
    fg: &mut ChannelHistograms,
    bg: &mut ChannelHistograms,
) -> Result<()> {
    check_image_dims(image, mask)?;
    for (x, y, px) in image.enumerate_pixels() {
        if mask.get(x as usize, y as usize) {
            fg.add_pixel(px);
        } else {
            bg.add_pixel(px);
        }
    }
    Ok(())
}

// ------------------------------------------------------------- cropping

/// Tight box of `mask` grown by `pad_px` on every side and clamped to the
/// raster.
pub fn crop_bounds(mask: &BinaryMask, pad_px: u32) -> Result<BBox> {
    let tight = mask.bbox().ok_or(CoreError::EmptyMask)?;
    let x0 = tight.x.saturating_sub(pad_px);
    let y0 = tight.y.saturating_sub(pad_px);
    let x1 = (tight.x_max() + pad_px).min(mask.width() as u32 - 1);
    let y1 = (tight.y_max() + pad_px).min(mask.height() as u32 - 1);
    Ok(BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Crops `image` to the padded tight box of `mask`, which centres the region
/// in the output unless the padding hits the border.
pub fn crop_to_mask(image: &RgbImage, mask: &BinaryMask, pad_px: u32) -> Result<RgbImage> {
    check_image_dims(image, mask)?;
    let b = crop_bounds(mask, pad_px)?;
    Ok(image::imageops::crop_imm(image, b.x, b.y, b.w, b.h).to_image())
}

/// One background-free crop produced from a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedCrop {
    pub crop: RgbImage,
    /// Full-size component mask the crop was cut from.
    pub component: BinaryMask,
    pub bounds: BBox,
}

/// Parameters for [`postprocess_detection`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub se: StructuringElement,
    pub threshold: ColourThreshold,
    pub pad_px: u32,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            se: StructuringElement::default(),
            threshold: ColourThreshold::default(),
            pad_px: 4,
        }
    }
}

/// Full mask hygiene for one detection: close holes, black out the
/// background, split into components, drop light components, then emit one
/// centred crop per surviving component.
pub fn postprocess_detection(
    image: &RgbImage,
    mask: &BinaryMask,
    params: &PostprocessParams,
) -> Result<Vec<ProcessedCrop>> {
    check_image_dims(image, mask)?;
    params.se.validate()?;
    params.threshold.validate()?;
    let closed = close_holes(mask, params.se);
    let subtracted = apply_mask(image, &closed)?;
    let components = split_components(&closed);
    let kept = filter_components_by_colour(&components, &subtracted, &params.threshold)?;
    kept.into_iter()
        .map(|component| {
            let isolated = apply_mask(image, &component)?;
            let bounds = crop_bounds(&component, params.pad_px)?;
            let crop = crop_to_mask(&isolated, &component, params.pad_px)?;
            Ok(ProcessedCrop {
                crop,
                component,
                bounds,
            })
        })
        .collect()
}
