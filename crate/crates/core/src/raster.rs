//! Dense channel-major rasters used for images, depth maps and BEV planes.
//!
//! Pixel `(u, v)` integer coordinates address pixel centers: column `u`,
//! row `v`. Continuous sampling uses the same convention, so a sample at
//! `(2.0, 3.0)` returns the stored value of column 2, row 3 exactly.

use std::path::Path;

use crate::error::{with_path, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Raster {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "raster {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Raster {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for v in 0..height {
                for u in 0..width {
                    data.push(f(c, v, u));
                }
            }
        }
        Raster {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn index(&self, c: usize, v: usize, u: usize) -> usize {
        (c * self.height + v) * self.width + u
    }

    #[inline]
    pub fn get(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[self.index(c, v, u)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: usize, u: usize, value: f64) {
        let i = self.index(c, v, u);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bilinear sample of every channel at continuous pixel coordinates.
    /// Returns `None` when the point lies outside the pixel-center hull.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return false;
        }
        let u0 = (u.floor() as usize).min(self.width - 1);
        let v0 = (v.floor() as usize).min(self.height - 1);
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.get(c, v0, u0);
            let b = self.get(c, v0, u1);
            let d = self.get(c, v1, u0);
            let e = self.get(c, v1, u1);
            let top = if fu == 0.0 { a } else { a + (b - a) * fu };
            let bot = if fu == 0.0 { d } else { d + (e - d) * fu };
            *o = if fv == 0.0 { top } else { top + (bot - top) * fv };
        }
        true
    }

    /// Resize with bilinear interpolation using half-pixel centers
    /// (`align_corners = false`), edge-clamped.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Raster::zeros(self.channels, height, width);
        for v in 0..height {
            let fy = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for u in 0..width {
                let fx = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, v, u, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    /// Little-endian bytes of the raw values, used for content hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8 + 24);
        for d in [self.channels, self.height, self.width] {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        bytes
    }

    /// Quantize to 8-bit and write a PNG (1 or 3 channels, values in [0, 1]).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_fn(w, h, |u, v| image::Luma([q(self.get(0, v as usize, u as usize))]))
                .save(path),
            3 => image::RgbImage::from_fn(w, h, |u, v| {
                let (u, v) = (u as usize, v as usize);
                image::Rgb([q(self.get(0, v, u)), q(self.get(1, v, u)), q(self.get(2, v, u))])
            })
            .save(path),
            c => return Err(Error::Image(format!("cannot write {c}-channel raster as PNG"))),
        };
        res.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Load an 8-bit PNG/JPEG as an RGB raster with values in [0, 1].
    pub fn load_rgb(path: &Path) -> Result<Raster> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Raster::from_fn(3, h, w, |c, v, u| {
            img.get_pixel(u as u32, v as u32)[c] as f64 / 255.0
        }))
    }

    /// Raw little-endian f64 dump with a `c h w` u32 header.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.data.len() * 8);
        for d in [self.channels, self.height, self.width] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        with_path(path, std::fs::write(path, bytes))
    }

    pub fn read_raw(path: &Path) -> Result<Raster> {
        let bytes = with_path(path, std::fs::read(path))?;
        if bytes.len() < 12 {
            return Err(Error::Archive(format!("{}: truncated raster header", path.display())));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[12..];
        if body.len() != c * h * w * 8 {
            return Err(Error::Archive(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                c * h * w * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Raster::from_vec(c, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_at_integer_coordinates_is_exact() {
        let r = Raster::from_fn(2, 4, 5, |c, v, u| (c * 100 + v * 10 + u) as f64 * 0.37);
        let mut out = [0.0; 2];
        for v in 0..4 {
            for u in 0..5 {
                assert!(r.sample_bilinear(u as f64, v as f64, &mut out));
                assert_eq!(out[0], r.get(0, v, u));
                assert_eq!(out[1], r.get(1, v, u));
            }
        }
        assert!(!r.sample_bilinear(-0.1, 0.0, &mut out));
        assert!(!r.sample_bilinear(4.01, 0.0, &mut out));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let r = Raster::filled(1, 8, 16, 0.3);
        let s = r.resize_bilinear(3, 5);
        assert!(s.data.iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }
}
