//! Channel-major `f32` images and PNG export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels x height x width`, row-major.
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape("raster", &[channels, height, width], &[data.len()]));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize) -> f32 {
        self.data[c * self.pixels() + i]
    }

    pub fn set(&mut self, c: usize, i: usize, v: f32) {
        let n = self.pixels();
        self.data[c * n + i] = v;
    }

    /// Channels `start..start+len`.
    pub fn channels_range(&self, start: usize, len: usize) -> Raster {
        let n = self.pixels();
        Raster {
            channels: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn concat(parts: &[&Raster]) -> Result<Raster> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no rasters"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::shape(
                    "raster concat",
                    &[first.height, first.width],
                    &[p.height, p.width],
                ));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Raster::new(channels, first.height, first.width, data)
    }

    pub fn same_size(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_tensor<S: crate::Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| S::lit(v as f64)).collect(),
        )
        .expect("raster extents")
    }

    /// Item `n` of an `N, C, H, W` tensor.
    pub fn from_tensor<S: crate::Scalar>(t: &Tensor<S>, n: usize) -> Result<Raster> {
        let s = t.shape();
        if s.len() != 4 || n >= s[0] {
            return Err(Error::shape("raster from tensor", s, &[n]));
        }
        let len = s[1] * s[2] * s[3];
        Raster::new(
            s[1],
            s[2],
            s[3],
            t.data()[n * len..(n + 1) * len]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        )
    }

    /// Stacks equally sized rasters into an `N, C, H, W` tensor.
    pub fn batch<S: crate::Scalar>(items: &[&Raster]) -> Result<Tensor<S>> {
        let first = items.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for r in items {
            if r.channels != first.channels || !r.same_size(first) {
                return Err(Error::shape(
                    "raster batch",
                    &[first.channels, first.height, first.width],
                    &[r.channels, r.height, r.width],
                ));
            }
            data.extend(r.data.iter().map(|&v| S::lit(v as f64)));
        }
        Tensor::new(&[items.len(), first.channels, first.height, first.width], data)
    }
}

/// Converts a linear value to 8 bits: `round(clamp(v, 0, 1) * 255)`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel raster as an 8-bit PNG (linear values, no gamma).
pub fn save_png(raster: &Raster, path: &Path) -> Result<()> {
    let img = match raster.channels {
        1 => image::DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(
                raster.width as u32,
                raster.height as u32,
                raster.data.iter().map(|&v| to_u8(v)).collect(),
            )
            .expect("buffer size"),
        ),
        3 => {
            let n = raster.pixels();
            let mut buf = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    buf.push(to_u8(raster.get(c, i)));
                }
            }
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(raster.width as u32, raster.height as u32, buf).expect("buffer size"),
            )
        }
        c => return Err(Error::invalid(format!("png export needs 1 or 3 channels, got {c}"))),
    };
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Lays out 3-channel tiles in a grid (`rows x cols`, row-major order) with a
/// one-pixel gap.
pub fn grid(tiles: &[Raster], cols: usize) -> Result<Raster> {
    let first = tiles.first().ok_or_else(|| Error::invalid("empty grid"))?;
    let rows = tiles.len().div_ceil(cols);
    let (th, tw) = (first.height, first.width);
    let (h, w) = (rows * (th + 1) - 1, cols * (tw + 1) - 1);
    let mut out = Raster::zeros(3, h, w);
    for (k, t) in tiles.iter().enumerate() {
        if t.channels != 3 || !t.same_size(first) {
            return Err(Error::invalid("grid tiles must be equally sized RGB"));
        }
        let (r0, c0) = ((k / cols) * (th + 1), (k % cols) * (tw + 1));
        for c in 0..3 {
            for y in 0..th {
                for x in 0..tw {
                    out.set(c, (r0 + y) * w + c0 + x, t.get(c, y * tw + x));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_encoding_is_linear_times_255() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn png_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::zeros(3, 2, 3);
        r.set(0, 1, 1.0);
        r.set(2, 5, 0.5);
        let path = dir.path().join("x.png");
        save_png(&r, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(1, 0).0, [255, 0, 0]);
        assert_eq!(back.get_pixel(2, 1).0, [0, 0, 128]);
    }
}
