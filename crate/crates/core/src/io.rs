//! 8-bit raster images on disk.
//!
//! Pixels are held channel-planar: an RGB image is three `height x width`
//! planes in R, G, B order, matching the `(C, H, W)` layout of [`Tensor4`].

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::engine::{Dims, Tensor4};
use crate::error::{Error, Result};

/// An 8-bit grayscale (1 channel) or RGB (3 channel) image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-planar pixel values, `channels * height * width` of them.
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} pixel values do not fill a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image8 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Image8::new(1, height, width, data)
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Scales pixels into `[0, 1]` as a `(1, channels, H, W)` tensor.
    /// A grayscale image is replicated when `channels` is 3.
    pub fn to_tensor(&self, channels: usize) -> Result<Tensor4> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(channels * n);
        match (self.channels, channels) {
            (a, b) if a == b => out.extend(self.data.iter().map(|&p| p as f32 / 255.0)),
            (1, 3) => {
                for _ in 0..3 {
                    out.extend(self.data.iter().map(|&p| p as f32 / 255.0));
                }
            }
            (a, b) => {
                return Err(Error::shape(format!(
                    "cannot feed a {a}-channel image to a {b}-channel network"
                )))
            }
        }
        Tensor4::from_vec(Dims::new(1, channels, self.height, self.width), out)
    }

    fn from_dynamic(img: DynamicImage) -> Image8 {
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let n = width * height;
            let mut data = vec![0u8; 3 * n];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = px[c];
                }
            }
            Image8 {
                channels: 3,
                height,
                width,
                data,
            }
        } else {
            Image8 {
                channels: 1,
                height,
                width,
                data: img.to_luma8().into_raw(),
            }
        }
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf = image::GrayImage::from_raw(w, h, self.data.clone()).expect("size checked");
            DynamicImage::ImageLuma8(buf)
        } else {
            let n = self.height * self.width;
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(self.data[c * n + i]);
                }
            }
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("size checked"))
        }
    }
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ImageFormat::from_extension(&ext) {
        Some(ImageFormat::Png) => Ok(ImageFormat::Png),
        other => Err(Error::Image {
            path: path.to_path_buf(),
            format: other.map_or_else(|| format!("'.{ext}'"), |f| format!("{f:?}")),
            message: "unsupported format, use PNG".into(),
        }),
    }
}

/// Reads an 8-bit grayscale or RGB PNG. Alpha is dropped; 16-bit data is
/// reduced to 8 bits.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image8> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let reader = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(std::io::BufReader::new(reader), format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        format: format!("{format:?}"),
        message: e.to_string(),
    })?;
    Ok(Image8::from_dynamic(img))
}

pub fn write_image(path: impl AsRef<Path>, img: &Image8) -> Result<()> {
    let path = path.as_ref();
    let format = format_of(path)?;
    img.to_dynamic().save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        format: format!("{format:?}"),
        message: e.to_string(),
    })
}

/// Renders a non-negative map as a grayscale image, scaled so its maximum is white.
pub fn map_to_image(map: &Tensor4) -> Result<Image8> {
    let d = map.dims();
    if d.batch != 1 || d.channels != 1 {
        return Err(Error::shape(format!("expected a single map, got {d}")));
    }
    let peak = map.max_abs();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let data = map
        .data()
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8)
        .collect();
    Image8::gray(d.height, d.width, data)
}
