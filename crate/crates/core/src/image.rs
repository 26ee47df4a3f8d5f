//! RGB image buffers in [0,1], row-major HWC. The exchange type
//! between the renderer, the VQ tokenizer and the ViT.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, usage_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn black(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * CHANNELS],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * CHANNELS {
            return Err(shape_err!(
                "image {}x{} wants {} floats, got {}",
                h,
                w,
                h * w * CHANNELS,
                data.len()
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let off = (y * self.w + x) * CHANNELS;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let off = (y * self.w + x) * CHANNELS;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }

    /// Mean squared error against another image of the same size.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(shape_err!(
                "mse between {}x{} and {}x{}",
                self.h,
                self.w,
                other.h,
                other.w
            ));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Area-weighted box filter resize to an arbitrary size.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 || self.h == 0 || self.w == 0 {
            return Err(usage_err!("degenerate image size in resize"));
        }
        let sy = self.h as f64 / out_h as f64;
        let sx = self.w as f64 / out_w as f64;
        let mut out = Image::black(out_h, out_w);
        for oy in 0..out_h {
            let y0 = oy as f64 * sy;
            let y1 = (oy + 1) as f64 * sy;
            for ox in 0..out_w {
                let x0 = ox as f64 * sx;
                let x1 = (ox + 1) as f64 * sx;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0f64;
                let mut yy = libm::floor(y0) as usize;
                while (yy as f64) < y1 && yy < self.h {
                    let wy = (y1.min((yy + 1) as f64) - y0.max(yy as f64)).max(0.0);
                    let mut xx = libm::floor(x0) as usize;
                    while (xx as f64) < x1 && xx < self.w {
                        let wx = (x1.min((xx + 1) as f64) - x0.max(xx as f64)).max(0.0);
                        let p = self.pixel(yy, xx);
                        let w = wy * wx;
                        acc[0] += p[0] as f64 * w;
                        acc[1] += p[1] as f64 * w;
                        acc[2] += p[2] as f64 * w;
                        area += w;
                        xx += 1;
                    }
                    yy += 1;
                }
                out.set_pixel(
                    oy,
                    ox,
                    [
                        (acc[0] / area) as f32,
                        (acc[1] / area) as f32,
                        (acc[2] / area) as f32,
                    ],
                );
            }
        }
        Ok(out)
    }

    /// Resize preserving aspect to fit inside `side x side`, centered
    /// on a black canvas.
    pub fn letterbox(&self, target_h: usize, target_w: usize) -> Result<Image> {
        let scale = (target_w as f64 / self.w as f64).min(target_h as f64 / self.h as f64);
        let rw = (libm::round(self.w as f64 * scale) as usize).clamp(1, target_w);
        let rh = (libm::round(self.h as f64 * scale) as usize).clamp(1, target_h);
        let resized = self.resize(rh, rw)?;
        let mut out = Image::black(target_h, target_w);
        let oy = (target_h - rh) / 2;
        let ox = (target_w - rw) / 2;
        for y in 0..rh {
            for x in 0..rw {
                out.set_pixel(oy + y, ox + x, resized.pixel(y, x));
            }
        }
        Ok(out)
    }

    /// [h, w, 3] tensor for model input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(vec![self.h, self.w, CHANNELS], data).expect("image buffer is consistent")
    }

    /// Back from a [h, w, 3] tensor, clamping into [0,1].
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        if t.shape().len() != 3 || t.shape()[2] != CHANNELS {
            return Err(shape_err!("image tensor wants [h,w,3], got {:?}", t.shape()));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| v.clamp01().to_f64() as f32)
            .collect();
        Image::from_data(t.shape()[0], t.shape()[1], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constant() {
        let mut img = Image::black(6, 9);
        for y in 0..6 {
            for x in 0..9 {
                img.set_pixel(y, x, [0.25, 0.5, 0.75]);
            }
        }
        let out = img.resize(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let p = out.pixel(y, x);
                assert!((p[0] - 0.25).abs() < 1e-6);
                assert!((p[1] - 0.5).abs() < 1e-6);
                assert!((p[2] - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_identity() {
        let mut img = Image::black(3, 3);
        img.set_pixel(1, 2, [1.0, 0.0, 0.5]);
        let out = img.resize(3, 3).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn tensor_roundtrip_clamps() {
        let mut t = Tensor::<f32>::zeros(vec![2, 2, 3]);
        t.data_mut()[0] = 1.5;
        t.data_mut()[1] = -0.3;
        let img = Image::from_tensor(&t).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(0, 0)[1], 0.0);
    }

    #[test]
    fn letterbox_centers_wide_image() {
        let mut img = Image::black(2, 8);
        for x in 0..8 {
            img.set_pixel(0, x, [1.0, 1.0, 1.0]);
            img.set_pixel(1, x, [1.0, 1.0, 1.0]);
        }
        let out = img.letterbox(8, 8).unwrap();
        // content occupies the middle rows, top/bottom stay black
        assert_eq!(out.pixel(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(out.pixel(7, 7), [0.0, 0.0, 0.0]);
        let lit: usize = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .filter(|&(y, x)| out.pixel(y, x)[0] > 0.5)
            .count();
        assert_eq!(lit, 16); // 2 rows of 8 scaled to 2x8 region
    }
}
