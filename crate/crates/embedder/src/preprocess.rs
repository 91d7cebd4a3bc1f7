use image::{imageops, RgbImage};
use ndarray::Array2;

/// Aspect-preserving resize onto a black `(height, width)` canvas, centred.
pub fn letterbox(image: &RgbImage, size: (usize, usize)) -> RgbImage {
    let (th, tw) = (size.0 as u32, size.1 as u32);
    let (w, h) = image.dimensions();
    let mut canvas = RgbImage::new(tw, th);
    if w == 0 || h == 0 {
        return canvas;
    }
    let scale = (tw as f64 / w as f64).min(th as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, tw);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, th);
    let resized = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, nw, nh, imageops::FilterType::Triangle)
    };
    imageops::replace(&mut canvas, &resized, ((tw - nw) / 2) as i64, ((th - nh) / 2) as i64);
    canvas
}

/// Channel-major `(3, h * w)` matrix in `[0, 1]` from an image already at
/// network resolution.
pub fn image_to_array(image: &RgbImage) -> Array2<f64> {
    let (w, h) = image.dimensions();
    let hw = (w * h) as usize;
    let mut data = vec![0.0; 3 * hw];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = p[c] as f64 / 255.0;
        }
    }
    Array2::from_shape_vec((3, hw), data).expect("shape")
}

/// Letterbox then convert to a network input.
pub fn to_input(image: &RgbImage, size: (usize, usize)) -> Array2<f64> {
    image_to_array(&letterbox(image, size))
}
