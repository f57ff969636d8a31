//! 8-bit RGB image operations used by the augmentation policies.

use image::{Rgb, RgbImage};

/// Fill color for pixels uncovered by geometric transforms.
pub const FILL: [u8; 3] = [124, 116, 104];

fn map_pixels(img: &RgbImage, f: impl Fn(usize, u8) -> u8) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p.0[c] = f(c, p.0[c]);
        }
    }
    out
}

pub fn invert(img: &RgbImage) -> RgbImage {
    map_pixels(img, |_, v| 255 - v)
}

pub fn posterize(img: &RgbImage, bits: u8) -> RgbImage {
    let bits = bits.clamp(1, 8);
    let mask = 0xFFu8 << (8 - bits);
    map_pixels(img, |_, v| v & mask)
}

pub fn solarize(img: &RgbImage, threshold: u16) -> RgbImage {
    map_pixels(img, |_, v| if v as u16 >= threshold { 255 - v } else { v })
}

pub fn solarize_add(img: &RgbImage, add: i32) -> RgbImage {
    map_pixels(img, |_, v| if v < 128 { (v as i32 + add).clamp(0, 255) as u8 } else { v })
}

pub fn autocontrast(img: &RgbImage) -> RgbImage {
    let mut lo = [255u8; 3];
    let mut hi = [0u8; 3];
    for p in img.pixels() {
        for c in 0..3 {
            lo[c] = lo[c].min(p.0[c]);
            hi[c] = hi[c].max(p.0[c]);
        }
    }
    map_pixels(img, |c, v| {
        if hi[c] <= lo[c] {
            v
        } else {
            let scale = 255.0 / (hi[c] - lo[c]) as f32;
            ((v - lo[c]) as f32 * scale).round().clamp(0.0, 255.0) as u8
        }
    })
}

/// Per-channel histogram equalization.
pub fn equalize(img: &RgbImage) -> RgbImage {
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for p in img.pixels() {
            hist[p.0[c] as usize] += 1;
        }
        let total: usize = hist.iter().sum();
        let last = hist.iter().rposition(|&h| h > 0).map_or(0, |i| hist[i]);
        let step = (total - last) / 255;
        if step == 0 {
            for (i, v) in lut.iter_mut().enumerate() {
                *v = i as u8;
            }
            continue;
        }
        let mut n = step / 2;
        for (i, v) in lut.iter_mut().enumerate() {
            *v = (n / step).min(255) as u8;
            n += hist[i];
        }
    }
    map_pixels(img, |c, v| luts[c][v as usize])
}

fn gray(p: &Rgb<u8>) -> f32 {
    0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32
}

/// `degenerate + factor·(img − degenerate)`, clamped to 8 bits.
fn blend(img: &RgbImage, degenerate: &RgbImage, factor: f32) -> RgbImage {
    let mut out = img.clone();
    for (o, d) in out.pixels_mut().zip(degenerate.pixels()) {
        for c in 0..3 {
            let v = d.0[c] as f32 + factor * (o.0[c] as f32 - d.0[c] as f32);
            o.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn color(img: &RgbImage, factor: f32) -> RgbImage {
    let mut g = img.clone();
    for p in g.pixels_mut() {
        let l = gray(p).round() as u8;
        p.0 = [l; 3];
    }
    blend(img, &g, factor)
}

pub fn contrast(img: &RgbImage, factor: f32) -> RgbImage {
    let n = (img.width() * img.height()).max(1) as f32;
    let mean = (img.pixels().map(gray).sum::<f32>() / n).round() as u8;
    let g = RgbImage::from_pixel(img.width(), img.height(), Rgb([mean; 3]));
    blend(img, &g, factor)
}

pub fn brightness(img: &RgbImage, factor: f32) -> RgbImage {
    blend(img, &RgbImage::new(img.width(), img.height()), factor)
}

/// Blend with a 3×3 smoothed copy; border pixels keep their values.
pub fn sharpness(img: &RgbImage, factor: f32) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut smooth = img.clone();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = [0f32; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        let p = img.get_pixel(x + dx - 1, y + dy - 1);
                        for c in 0..3 {
                            acc[c] += weight * p.0[c] as f32;
                        }
                    }
                }
                smooth.put_pixel(x, y, Rgb(acc.map(|v| (v / 13.0).round() as u8)));
            }
        }
    }
    blend(img, &smooth, factor)
}

/// Applies the inverse affine map `(x, y) ↦ (a·x + b·y + c, d·x + e·y + f)`
/// (output pixel to source pixel, both in pixel-center coordinates) with
/// bilinear sampling.
pub fn affine(img: &RgbImage, inv: [f32; 6]) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32, y as f32);
            let sx = inv[0] * xf + inv[1] * yf + inv[2];
            let sy = inv[3] * xf + inv[4] * yf + inv[5];
            out.put_pixel(x, y, Rgb(sample_bilinear(img, sx, sy)));
        }
    }
    out
}

fn sample_bilinear(img: &RgbImage, sx: f32, sy: f32) -> [u8; 3] {
    let (w, h) = img.dimensions();
    if sx < -0.5 || sy < -0.5 || sx > w as f32 - 0.5 || sy > h as f32 - 0.5 {
        return FILL;
    }
    let x0 = sx.floor().clamp(0.0, (w - 1) as f32);
    let y0 = sy.floor().clamp(0.0, (h - 1) as f32);
    let (fx, fy) = ((sx - x0).clamp(0.0, 1.0), (sy - y0).clamp(0.0, 1.0));
    let (x0, y0) = (x0 as u32, y0 as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = |x: u32, y: u32| img.get_pixel(x, y).0[c] as f32;
        let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
        let bot = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Counter-clockwise rotation about the image center.
pub fn rotate(img: &RgbImage, degrees: f32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    affine(
        img,
        [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy],
    )
}

pub fn shear_x(img: &RgbImage, factor: f32) -> RgbImage {
    affine(img, [1.0, factor, 0.0, 0.0, 1.0, 0.0])
}

pub fn shear_y(img: &RgbImage, factor: f32) -> RgbImage {
    affine(img, [1.0, 0.0, 0.0, factor, 1.0, 0.0])
}

pub fn translate(img: &RgbImage, dx: f32, dy: f32) -> RgbImage {
    affine(img, [1.0, 0.0, -dx, 0.0, 1.0, -dy])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> RgbImage {
        RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 77]))
    }

    #[test]
    fn identities() {
        let img = gradient();
        assert_eq!(invert(&invert(&img)), img);
        assert_eq!(posterize(&img, 8), img);
        assert_eq!(solarize(&img, 256), img);
        assert_eq!(color(&img, 1.0), img);
        assert_eq!(contrast(&img, 1.0), img);
        assert_eq!(brightness(&img, 1.0), img);
        assert_eq!(sharpness(&img, 1.0), img);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(translate(&img, 0.0, 0.0), img);
    }

    #[test]
    fn brightness_zero_is_black() {
        assert!(brightness(&gradient(), 0.0).pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn translation_moves_content() {
        let img = gradient();
        let t = translate(&img, 2.0, 0.0);
        assert_eq!(t.get_pixel(5, 3), img.get_pixel(3, 3));
        assert_eq!(t.get_pixel(0, 3).0, FILL);
    }

    #[test]
    fn autocontrast_stretches() {
        let img = RgbImage::from_fn(4, 1, |x, _| Rgb([100 + x as u8 * 10; 3]));
        let a = autocontrast(&img);
        assert_eq!(a.get_pixel(0, 0).0[0], 0);
        assert_eq!(a.get_pixel(3, 0).0[0], 255);
    }

    #[test]
    fn equalize_constant_image_unchanged() {
        let img = RgbImage::from_pixel(4, 4, Rgb([9, 9, 9]));
        assert_eq!(equalize(&img), img);
    }
}
