//! RGB images in `[0, 1]`, pixel metrics and 8-bit PNG interchange.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{DnpError, Result};

/// Row-major `H x W x 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Pixel-centre mask over an `h x w` image.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|k| self.contains(k / w, k % w)).collect()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(DnpError::validation(
                "image",
                format!("{} values for a {height} x {width} RGB image", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    /// `3 x H x W` planar copy.
    pub fn to_chw(&self) -> Vec<f32> {
        crate::field::channels_first(&self.data, self.height * self.width, 3)
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != height * width * 3 {
            return Err(DnpError::validation("image", "planar buffer size mismatch"));
        }
        Self::new(height, width, crate::field::channels_last(chw, height * width, 3))
    }

    /// Area-average pooling to `h x w`; both ratios must be integers.
    pub fn downscale(&self, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(DnpError::Contract(format!(
                "downscale {}x{} -> {h}x{w} needs an integer ratio",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let norm = 1.0 / (fy * fx) as f64;
        let mut out = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                let mut acc = [0.0f64; 3];
                for y in i * fy..(i + 1) * fy {
                    for x in j * fx..(j + 1) * fx {
                        let p = self.pixel(y, x);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| (v * norm) as f32));
            }
        }
        Image::new(h, w, out)
    }

    /// Nearest-neighbour 2x duplication.
    pub fn upsample2x(&self) -> Image {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                out.extend(self.pixel(y / 2, x / 2));
            }
        }
        Image { height: h, width: w, data: out }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// The image as it survives an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| DnpError::Contract(format!("png encoding failed: {e}")))?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| DnpError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DnpError::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| DnpError::format(path, e))
    }

    fn check_same(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(DnpError::Contract(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn l1(&self, other: &Image) -> Result<f64> {
        self.check_same(other)?;
        Ok(mean(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64)))
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same(other)?;
        Ok(mean(self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2))))
    }

    /// Mean absolute difference over the pixels where `mask` is set.
    pub fn masked_l1(&self, other: &Image, mask: &[bool]) -> Result<f64> {
        self.check_same(other)?;
        if mask.len() != self.height * self.width {
            return Err(DnpError::Contract("mask size does not match image".into()));
        }
        let vals = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .flat_map(|(k, _)| (0..3).map(move |c| (self.data[k * 3 + c] - other.data[k * 3 + c]).abs() as f64));
        Ok(mean(vals))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Cap applied to the PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB for a mean squared error of signals in `[0, 1]`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_downscales_to_half() {
        let mut img = Image::filled(2, 2, [0.0; 3]);
        img.set_pixel(0, 0, [1.0; 3]);
        img.set_pixel(1, 1, [1.0; 3]);
        assert_eq!(img.downscale(1, 1).unwrap().data(), &[0.5, 0.5, 0.5]);
        assert!(img.downscale(3, 1).is_err());
    }

    #[test]
    fn chw_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|v| v as f32 / 20.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        assert_eq!(Image::from_chw(2, 3, &img.to_chw()).unwrap(), img);
        assert_eq!(img.to_chw()[..6], [0.0, 0.15, 0.3, 0.45, 0.6, 0.75]);
    }

    #[test]
    fn png_roundtrip_is_quantization() {
        let data: Vec<f32> = (0..4 * 5 * 3).map(|v| (v as f32 * 0.173).fract()).collect();
        let img = Image::new(4, 5, data).unwrap();
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn psnr_cap_and_value() {
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let a = Image::filled(3, 3, [0.2; 3]);
        let b = Image::filled(3, 3, [0.3; 3]);
        assert!((a.l1(&b).unwrap() - 0.1).abs() < 1e-6);
        let mask = PixelBox { y0: 0, y1: 1, x0: 0, x1: 3 }.mask(3, 3);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert!((a.masked_l1(&b, &mask).unwrap() - 0.1).abs() < 1e-6);
    }
}
