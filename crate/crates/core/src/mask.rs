//! Binary masks, tight bounding boxes, and the two mask exchange formats:
//! COCO-style compressed RLE (`{size: [h, w], counts: "..."}`) and 1-bit PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Axis-aligned pixel box, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    /// Inclusive right column.
    pub fn x_max(&self) -> u32 {
        self.x + self.w - 1
    }

    /// Inclusive bottom row.
    pub fn y_max(&self) -> u32 {
        self.y + self.h - 1
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [u32; 4]) -> Self {
        BBox {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

/// Row-major boolean grid aligned to a source image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(CoreError::InvalidConfig(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates of all true pixels in row-major order.
    pub fn true_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Tight bounding box of the true pixels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for (x, y) in self.true_pixels() {
            any = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        any.then(|| BBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0 + 1) as u32,
            h: (y1 - y0 + 1) as u32,
        })
    }

    pub fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CoreError::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count())
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// Pixel-wise OR.
    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Mask that is true exactly inside `bbox` (clamped to the mask extent).
    pub fn from_bbox(width: usize, height: usize, bbox: BBox) -> Self {
        let x1 = (bbox.x + bbox.w) as usize;
        let y1 = (bbox.y + bbox.h) as usize;
        BinaryMask::from_fn(width, height, |x, y| {
            x >= bbox.x as usize && x < x1 && y >= bbox.y as usize && y < y1
        })
    }

    /// Sub-mask covering `bbox`; `bbox` must lie inside the mask.
    pub fn crop(&self, bbox: BBox) -> BinaryMask {
        BinaryMask::from_fn(bbox.w as usize, bbox.h as usize, |x, y| {
            self.get(x + bbox.x as usize, y + bbox.y as usize)
        })
    }

    // ---------------------------------------------------------------- RLE

    /// Uncompressed COCO run lengths: column-major, alternating runs starting
    /// with background.
    pub fn rle_counts(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let b = self.get(x, y);
                if b != current {
                    counts.push(run);
                    run = 0;
                    current = b;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle_counts(width: usize, height: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (width * height) as u64 {
            return Err(CoreError::InvalidRle(format!(
                "runs sum to {total}, expected {}",
                width * height
            )));
        }
        let mut mask = BinaryMask::new(width, height);
        let mut idx = 0usize;
        let mut value = false;
        for &c in counts {
            for _ in 0..c {
                let (x, y) = (idx / height, idx % height);
                mask.set(x, y, value);
                idx += 1;
            }
            value = !value;
        }
        Ok(mask)
    }

    pub fn to_rle(&self) -> Rle {
        Rle {
            size: [self.height as u32, self.width as u32],
            counts: encode_counts(&self.rle_counts()),
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let counts = decode_counts(&rle.counts)?;
        BinaryMask::from_rle_counts(rle.size[1] as usize, rle.size[0] as usize, &counts)
    }

    // ---------------------------------------------------------------- PNG

    /// Writes the mask as a 1-bit grayscale PNG (white = foreground).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut encoder = png::Encoder::new(
            BufWriter::new(file),
            self.width as u32,
            self.height as u32,
        );
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&self.pack_rows())?;
        Ok(())
    }

    fn pack_rows(&self) -> Vec<u8> {
        let stride = self.width.div_ceil(8);
        let mut data = vec![0u8; stride * self.height];
        for (x, y) in self.true_pixels() {
            data[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
        data
    }

    /// Reads any grayscale or colour PNG; non-zero pixels are foreground.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let stride = info.line_size;
        Ok(BinaryMask::from_fn(w, h, |x, y| {
            let px = &buf[y * stride + x * channels..y * stride + (x + 1) * channels];
            // Alpha, if present, is ignored.
            let colour = if channels == 2 || channels == 4 {
                &px[..channels - 1]
            } else {
                px
            };
            colour.iter().any(|&v| v != 0)
        }))
    }
}

// Masks serialise as compressed RLE.
impl Serialize for BinaryMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rle().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rle = Rle::deserialize(deserializer)?;
        BinaryMask::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

/// COCO-style compressed run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: String,
}

/// Compresses run lengths into the pycocotools string form: each run is
/// delta-coded against the run two positions earlier (from the fourth run
/// on) and written as 5-bit groups offset by 48.
pub fn encode_counts(counts: &[u32]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn decode_counts(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            let Some(&byte) = bytes.get(p) else {
                return Err(CoreError::InvalidRle("truncated run".into()));
            };
            if !(48..48 + 64).contains(&byte) {
                return Err(CoreError::InvalidRle(format!(
                    "byte {byte:#x} outside the RLE alphabet"
                )));
            }
            if k > 10 {
                return Err(CoreError::InvalidRle("run too long".into()));
            }
            let c = (byte - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(CoreError::InvalidRle(format!("run length {x} out of range")));
        }
        counts.push(x as u32);
    }
    Ok(counts)
}
