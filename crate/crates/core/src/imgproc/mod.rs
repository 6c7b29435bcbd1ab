//! Image representation, codecs, classical filters, and geometric transforms.
//!
//! Pixel layout is row-major and channel-interleaved: the sample at
//! `(x, y, c)` lives at `data[(y * width + x) * channels + c]`. Intensities
//! are unitless `f64` in `[0, 1]`; every public operation keeps them there.

mod filters;
mod geom;
mod io;

pub use filters::{box_filter, guided_filter, min_filter};
pub use geom::{center_crop, hflip, resize_bilinear, resize_gray_bilinear, rotate};
pub use io::{read_image, write_image};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("channel {channel} has zero percentile intensity; cannot white balance")]
    DegenerateChannel { channel: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("crop {out_w}x{out_h} exceeds image {width}x{height}")]
    CropTooLarge {
        out_w: usize,
        out_h: usize,
        width: usize,
        height: usize,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image file {path}: {detail}")]
    CorruptFile { path: String, detail: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid image geometry: {0}")]
    BadGeometry(String),
}

pub type Result<T> = std::result::Result<T, ImgError>;

/// An image with 1 or 3 channels, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImgError::BadGeometry(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImgError::BadGeometry(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(ImgError::BadGeometry(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ImgError::BadGeometry(
                "intensities must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn splat(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-pixel mean over channels.
    pub fn luma(&self) -> GrayMap {
        let inv = 1.0 / self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect();
        GrayMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// NCHW planar copy of the pixel data (single image, N = 1 slice).
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let plane = self.height * self.width;
        for i in 0..plane {
            for c in 0..self.channels {
                out[c * plane + i] = self.data[i * self.channels + c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_planar`].
    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        planar: &[f64],
    ) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(ImgError::BadGeometry("planar buffer length mismatch".into()));
        }
        let mut data = vec![0.0; planar.len()];
        for i in 0..plane {
            for c in 0..channels {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self::new(height, width, channels, data)
    }
}

/// A single-channel scalar field with no range restriction (finite values only).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ImgError::BadGeometry(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImgError::BadGeometry("gray map values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn splat(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Output of [`white_balance`]: the rescaled image plus the gains applied.
#[derive(Debug, Clone)]
pub struct WhiteBalanceResult {
    pub image: Image,
    pub gains: [f64; 3],
}

/// Flip intensities: every sample becomes `1 - v`.
pub fn invert(img: &Image) -> Image {
    let data = img.data.iter().map(|v| 1.0 - v).collect();
    Image {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data,
    }
}

/// Per-channel percentile white balance.
///
/// Each channel is scaled so its `percentile` intensity maps to 1 (clamped
/// above), which is what lets the dehazing stages treat the atmospheric
/// light as unit-valued.
pub fn white_balance(img: &Image, percentile: f64) -> Result<WhiteBalanceResult> {
    if img.channels != 3 {
        return Err(ImgError::ShapeMismatch(format!(
            "white balance needs 3 channels, got {}",
            img.channels
        )));
    }
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(ImgError::BadGeometry(format!(
            "percentile must be in (0, 1], got {percentile}"
        )));
    }
    let n = img.height * img.width;
    let mut gains = [0.0f64; 3];
    for c in 0..3 {
        let mut vals: Vec<f64> = (0..n).map(|i| img.data[i * 3 + c]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((percentile * n as f64).ceil() as usize).clamp(1, n) - 1;
        let p = vals[idx];
        if p == 0.0 {
            return Err(ImgError::DegenerateChannel { channel: c });
        }
        gains[c] = 1.0 / p;
    }
    let mut data = img.data.clone();
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] * gains[c]).min(1.0);
        }
    }
    Ok(WhiteBalanceResult {
        image: Image {
            height: img.height,
            width: img.width,
            channels: 3,
            data,
        },
        gains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_endpoints() {
        let img = Image::new(1, 2, 1, vec![0.0, 0.25]).unwrap();
        let out = invert(&img);
        assert_eq!(out.data(), &[1.0, 0.75]);
    }

    #[test]
    fn invert_is_involution() {
        // Dyadic intensities: 1 - (1 - v) is bit-exact on this grid.
        let img = Image::new(2, 3, 3, (0..18).map(|i| i as f64 * 14.0 / 256.0).collect()).unwrap();
        assert_eq!(invert(&invert(&img)), img);
    }

    #[test]
    fn invert_round_trip_within_one_ulp() {
        let data: Vec<f64> = (0..48).map(|i| (i as f64 * 0.618034).fract()).collect();
        let img = Image::new(4, 4, 3, data).unwrap();
        let back = invert(&invert(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= f64::EPSILON, "{a} vs {b}");
        }
    }

    #[test]
    fn white_balance_uniform_half() {
        let img = Image::splat(4, 4, 3, 0.5).unwrap();
        let wb = white_balance(&img, 0.99).unwrap();
        assert_eq!(wb.gains, [2.0, 2.0, 2.0]);
        assert!(wb.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn white_balance_gains_match_percentile_oracle() {
        // Channel maxima 1.0, 0.5, 0.25 at percentile 1.0 -> gains 1, 2, 4.
        let mut img = Image::splat(2, 2, 3, 0.1).unwrap();
        img.set(0, 0, 0, 1.0);
        img.set(1, 0, 1, 0.5);
        img.set(0, 1, 2, 0.25);
        let wb = white_balance(&img, 1.0).unwrap();
        // Independent oracle: exhaustive max per channel.
        for c in 0..3 {
            let max = (0..4).map(|i| img.data()[i * 3 + c]).fold(0.0f64, f64::max);
            assert_eq!(wb.gains[c], 1.0 / max);
        }
        assert_eq!(wb.gains, [1.0, 2.0, 4.0]);
    }

    #[test]
    fn white_balance_identity_when_balanced() {
        let mut img = Image::splat(2, 2, 3, 1.0).unwrap();
        img.set(0, 0, 0, 0.5);
        let wb = white_balance(&img, 1.0).unwrap();
        assert_eq!(wb.gains, [1.0, 1.0, 1.0]);
        assert_eq!(wb.image, img);
    }

    #[test]
    fn white_balance_rejects_black_channel() {
        let mut data = vec![0.5; 12];
        for px in 0..4 {
            data[px * 3 + 2] = 0.0;
        }
        let img = Image::new(2, 2, 3, data).unwrap();
        match white_balance(&img, 0.99) {
            Err(ImgError::DegenerateChannel { channel: 2 }) => {}
            other => panic!("expected DegenerateChannel, got {other:?}"),
        }
    }

    #[test]
    fn white_balance_gains_reproduce_output() {
        let img = Image::new(2, 2, 3, (0..12).map(|i| 0.05 + i as f64 * 0.07).collect()).unwrap();
        let wb = white_balance(&img, 0.75).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let expect = (img.data()[i * 3 + c] * wb.gains[c]).min(1.0);
                assert_eq!(wb.image.data()[i * 3 + c], expect);
            }
        }
    }

    #[test]
    fn planar_round_trip() {
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let planar = img.to_planar();
        let back = Image::from_planar(3, 2, 3, &planar).unwrap();
        assert_eq!(back, img);
    }
}
