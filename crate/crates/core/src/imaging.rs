//! CPU-side pixel buffers and the geometric ops used by data generation,
//! augmentation and evaluation preprocessing. Kept independent of the tensor
//! backend so preprocessing stays bit-reproducible.

use std::path::Path;

use crate::error::{Error, Result};

/// Dense `[3, h, w]` image, values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub h: usize,
    pub w: usize,
    /// len = 3 * h * w, layout `[c][y][x]`
    pub data: Vec<f32>,
}

impl PixelImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn from_gray(h: usize, w: usize, gray: &[f32]) -> Self {
        assert_eq!(gray.len(), h * w);
        let mut img = Self::zeros(h, w);
        for c in 0..3 {
            img.data[c * h * w..(c + 1) * h * w].copy_from_slice(gray);
        }
        img
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize (align_corners = false convention).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let mut out = Self::zeros(out_h, out_w);
        let sy = self.h as f32 / out_h as f32;
        let sx = self.w as f32 / out_w as f32;
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let v = self.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.get(c, y0, x1) * (1.0 - wy) * wx
                        + self.get(c, y1, x0) * wy * (1.0 - wx)
                        + self.get(c, y1, x1) * wy * wx;
                    out.set(c, oy, ox, v);
                }
            }
        }
        out
    }

    /// Resize so the shorter side equals `short`, aspect preserved
    /// (longer side rounded to nearest).
    pub fn resize_shorter_side(&self, short: usize) -> Self {
        let (out_h, out_w) = shorter_side_dims(self.h, self.w, short);
        self.resize(out_h, out_w)
    }

    pub fn crop(&self, top: usize, left: usize, ch: usize, cw: usize) -> Self {
        assert!(top + ch <= self.h && left + cw <= self.w, "crop out of bounds");
        let mut out = Self::zeros(ch, cw);
        for c in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        out
    }

    pub fn center_crop(&self, size: usize) -> Self {
        let top = (self.h - size) / 2;
        let left = (self.w - size) / 2;
        self.crop(top, left, size, size)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = Self::zeros(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, self.h - 1 - y, x));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = [
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::ImageUnreadable {
            record_id: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ImageUnreadable {
                record_id: path.display().to_string(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, px.0[c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }
}

pub fn shorter_side_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        let out_w = ((w as f64 * short as f64 / h as f64).round() as usize).max(1);
        (short, out_w)
    } else {
        let out_h = ((h as f64 * short as f64 / w as f64).round() as usize).max(1);
        (out_h, short)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorter_side_resize_dims() {
        // 512x640 -> shorter side 256 -> 256x320
        assert_eq!(shorter_side_dims(512, 640, 256), (256, 320));
        assert_eq!(shorter_side_dims(640, 512, 256), (320, 256));
        assert_eq!(shorter_side_dims(256, 256, 256), (256, 256));
    }

    #[test]
    fn center_crop_offsets() {
        let img = PixelImage::zeros(256, 320);
        let c = img.center_crop(224);
        assert_eq!((c.h, c.w), (224, 224));
        // offsets (16, 48) checked through value placement
        let mut img = PixelImage::zeros(256, 320);
        img.set(0, 16, 48, 1.0);
        let c = img.center_crop(224);
        assert_eq!(c.get(0, 0, 0), 1.0);
    }

    #[test]
    fn flip_round_trip() {
        let mut img = PixelImage::zeros(4, 6);
        img.set(1, 2, 5, 0.7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().get(1, 2, 0), 0.7);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = PixelImage::from_gray(8, 8, &[0.5; 64]);
        let r = img.resize(16, 16);
        for v in &r.data {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_exact_u8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = PixelImage::zeros(16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f32 / 255.0;
        }
        img.save_png(&path).unwrap();
        let back = PixelImage::load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }
}
