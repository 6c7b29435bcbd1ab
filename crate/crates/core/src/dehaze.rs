//! Dark Channel Prior dehazing and its inverted-domain use as illumination
//! compensation.
//!
//! The haze model is `I = J * t + A * (1 - t)`. Dehazing estimates the
//! transmission map `t` from the dark channel, refines it with a guided
//! filter, estimates the atmospheric light `A` from the haziest pixels, and
//! inverts the model for the radiance `J`. Running the same machinery on
//! inverted intensities removes smooth multiplicative shadows instead of
//! haze, which is the preprocessing this crate exists for.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imgproc::{
    self, guided_filter, min_filter, resize_gray_bilinear, white_balance, GrayMap, Image,
    ImgError,
};

#[derive(Debug, Error)]
pub enum DehazeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no input images given")]
    EmptyDataset,
    #[error("all {0} input images failed to load")]
    AllImagesSkipped(usize),
    #[error(transparent)]
    Image(#[from] ImgError),
}

pub type Result<T> = std::result::Result<T, DehazeError>;

/// Per-pixel transmission in `[floor, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    height: usize,
    width: usize,
    floor: f64,
    data: Vec<f64>,
}

impl TransmissionMap {
    /// Build a map, clamping every value into `[floor, 1]`.
    pub fn from_raw(height: usize, width: usize, floor: f64, raw: Vec<f64>) -> Self {
        assert!(floor > 0.0 && floor <= 1.0, "floor must be in (0, 1]");
        assert_eq!(raw.len(), height * width, "transmission buffer mismatch");
        let data = raw.into_iter().map(|v| v.clamp(floor, 1.0)).collect();
        Self {
            height,
            width,
            floor,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear resample to `out_h x out_w`; convexity keeps the range.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        let data = resize_gray_bilinear(&self.data, self.height, self.width, out_h, out_w);
        Self {
            height: out_h,
            width: out_w,
            floor: self.floor,
            data,
        }
    }

    /// Grayscale export image with `[floor, 1]` mapped linearly onto `[0, 1]`.
    pub fn to_export_image(&self) -> Image {
        let span = 1.0 - self.floor;
        let data = self
            .data
            .iter()
            .map(|&v| ((v - self.floor) / span).clamp(0.0, 1.0))
            .collect();
        Image::new(self.height, self.width, 1, data).expect("export range is [0,1]")
    }
}

/// Global illuminant color, each component in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight {
    pub rgb: [f64; 3],
}

impl AtmosphericLight {
    pub const UNIT: Self = Self { rgb: [1.0, 1.0, 1.0] };

    pub fn new(rgb: [f64; 3]) -> Self {
        assert!(
            rgb.iter().all(|&v| v > 0.0 && v <= 1.0),
            "atmospheric light components must be in (0, 1]"
        );
        Self { rgb }
    }
}

/// Dehazing hyperparameters. The defaults follow the usual Dark Channel
/// Prior conventions; everything is overridable.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DehazeParams {
    /// Half-width of the dark-channel window (radius 7 means 15x15).
    pub patch_radius: usize,
    /// Fraction of haze kept to preserve depth cues, in (0, 1].
    pub omega: f64,
    /// Fraction of brightest dark-channel pixels used to estimate A.
    pub top_fraction: f64,
    /// Lower clamp for the transmission map.
    pub t_floor: f64,
    /// Guided-filter window radius for transmission refinement.
    pub guided_radius: usize,
    /// Guided-filter regularizer.
    pub guided_eps: f64,
    /// Percentile used by the white-balance stage of `illuminate`.
    pub wb_percentile: f64,
}

impl Default for DehazeParams {
    fn default() -> Self {
        Self {
            patch_radius: 7,
            omega: 0.95,
            top_fraction: 0.001,
            t_floor: 0.1,
            guided_radius: 30,
            guided_eps: 1e-3,
            wb_percentile: 0.99,
        }
    }
}

/// Dataset-averaged transmission map used as regression target during
/// training.
#[derive(Debug, Clone)]
pub struct ReferenceMap {
    pub map: TransmissionMap,
    pub source_count: usize,
    pub resolution: usize,
}

/// Dark channel: window minimum (border-clipped) of the per-pixel channel
/// minimum.
pub fn dark_channel(img: &Image, patch_radius: usize) -> Result<GrayMap> {
    if img.channels() != 3 {
        return Err(DehazeError::ShapeMismatch(format!(
            "dark channel needs 3 channels, got {}",
            img.channels()
        )));
    }
    let per_pixel_min: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|px| px[0].min(px[1]).min(px[2]))
        .collect();
    let map = GrayMap::new(img.height(), img.width(), per_pixel_min)?;
    Ok(min_filter(&map, patch_radius))
}

/// Same as [`dark_channel`] but with each channel pre-divided by the
/// matching component of `a`. Values may exceed 1; no clamping here.
fn dark_channel_scaled(img: &Image, a: AtmosphericLight, patch_radius: usize) -> GrayMap {
    let per_pixel_min: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|px| {
            (px[0] / a.rgb[0])
                .min(px[1] / a.rgb[1])
                .min(px[2] / a.rgb[2])
        })
        .collect();
    let map = GrayMap::new(img.height(), img.width(), per_pixel_min)
        .expect("scaled dark channel is finite for positive A");
    min_filter(&map, patch_radius)
}

/// Estimate the atmospheric light from the brightest dark-channel pixels.
///
/// Takes the `ceil(top_fraction * N)` pixels with the largest dark-channel
/// values (ties broken by row-major index) and averages the source image
/// over them per channel. Components are clamped into `[1e-3, 1]`.
pub fn estimate_atmospheric_light(
    img: &Image,
    dark: &GrayMap,
    top_fraction: f64,
) -> Result<AtmosphericLight> {
    if img.height() != dark.height() || img.width() != dark.width() {
        return Err(DehazeError::ShapeMismatch(
            "dark channel size differs from image".into(),
        ));
    }
    assert!(
        top_fraction > 0.0 && top_fraction <= 1.0,
        "top_fraction must be in (0, 1]"
    );
    let n = img.height() * img.width();
    let take = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by dark value, ascending by index on ties.
    order.sort_by(|&i, &j| {
        dark.data()[j]
            .partial_cmp(&dark.data()[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut sums = [0.0f64; 3];
    for &i in &order[..take] {
        for c in 0..3 {
            sums[c] += img.data()[i * 3 + c];
        }
    }
    let rgb = [
        (sums[0] / take as f64).clamp(1e-3, 1.0),
        (sums[1] / take as f64).clamp(1e-3, 1.0),
        (sums[2] / take as f64).clamp(1e-3, 1.0),
    ];
    Ok(AtmosphericLight::new(rgb))
}

/// Dark-channel transmission estimate:
/// `t = 1 - omega * dark_channel(I / A)`, clamped into `[t_floor, 1]`.
pub fn estimate_transmission(
    img: &Image,
    a: AtmosphericLight,
    params: &DehazeParams,
) -> Result<TransmissionMap> {
    if img.channels() != 3 {
        return Err(DehazeError::ShapeMismatch(
            "transmission estimate needs 3 channels".into(),
        ));
    }
    let dark = dark_channel_scaled(img, a, params.patch_radius);
    let raw: Vec<f64> = dark.data().iter().map(|&d| 1.0 - params.omega * d).collect();
    Ok(TransmissionMap::from_raw(
        img.height(),
        img.width(),
        params.t_floor,
        raw,
    ))
}

/// Edge-aware refinement of a transmission map, guided by the image luma.
pub fn refine_transmission(
    guide: &Image,
    t: &TransmissionMap,
    params: &DehazeParams,
) -> Result<TransmissionMap> {
    if guide.height() != t.height() || guide.width() != t.width() {
        return Err(DehazeError::ShapeMismatch(
            "guide size differs from transmission map".into(),
        ));
    }
    let luma = guide.luma();
    let t_map = GrayMap::new(t.height(), t.width(), t.data().to_vec())?;
    let refined = guided_filter(&luma, &t_map, params.guided_radius, params.guided_eps)?;
    Ok(TransmissionMap::from_raw(
        t.height(),
        t.width(),
        t.floor(),
        refined.data().to_vec(),
    ))
}

/// Invert the haze model: `J = (I - A) / max(t, t_floor) + A`, clamped to
/// `[0, 1]`.
pub fn recover_radiance(
    img: &Image,
    t: &TransmissionMap,
    a: AtmosphericLight,
    t_floor: f64,
) -> Result<Image> {
    if img.height() != t.height() || img.width() != t.width() {
        return Err(DehazeError::ShapeMismatch(
            "transmission map size differs from image".into(),
        ));
    }
    let ch = img.channels();
    let mut data = vec![0.0; img.data().len()];
    for (i, px) in img.data().chunks_exact(ch).enumerate() {
        let denom = t.data()[i].max(t_floor);
        for c in 0..ch {
            let a_c = a.rgb[c.min(2)];
            data[i * ch + c] = ((px[c] - a_c) / denom + a_c).clamp(0.0, 1.0);
        }
    }
    Ok(Image::new(img.height(), img.width(), ch, data)?)
}

/// Full Dark Channel Prior pipeline. Returns the dehazed image together
/// with the refined transmission map and the estimated atmospheric light.
pub fn dehaze_image(
    img: &Image,
    params: &DehazeParams,
) -> Result<(Image, TransmissionMap, AtmosphericLight)> {
    let dark = dark_channel(img, params.patch_radius)?;
    let a = estimate_atmospheric_light(img, &dark, params.top_fraction)?;
    let t = estimate_transmission(img, a, params)?;
    let t = refine_transmission(img, &t, params)?;
    let j = recover_radiance(img, &t, a, params.t_floor)?;
    Ok((j, t, a))
}

/// Illumination compensation by dehazing in the inverted-intensity domain:
/// white balance, invert, dehaze, invert back.
///
/// Returns the corrected image and the transmission map estimated in the
/// inverted domain.
pub fn illuminate(img: &Image, params: &DehazeParams) -> Result<(Image, TransmissionMap)> {
    let wb = white_balance(img, params.wb_percentile)?;
    let inverted = imgproc::invert(&wb.image);
    let (dehazed, t, _a) = dehaze_image(&inverted, params)?;
    Ok((imgproc::invert(&dehazed), t))
}

/// One image's contribution to the reference map: white balance, invert,
/// estimate + refine transmission (A fixed at 1), resize to the target
/// resolution.
pub fn reference_transmission(
    img: &Image,
    params: &DehazeParams,
    out_size: usize,
) -> Result<TransmissionMap> {
    let wb = white_balance(img, params.wb_percentile)?;
    let inverted = imgproc::invert(&wb.image);
    let t = estimate_transmission(&inverted, AtmosphericLight::UNIT, params)?;
    let t = refine_transmission(&inverted, &t, params)?;
    Ok(t.resize(out_size, out_size))
}

/// Outcome of [`compute_reference_map`]: skipped files are reported, not
/// fatal, unless every file fails.
#[derive(Debug, Clone)]
pub struct ReferenceMapReport {
    pub reference: ReferenceMap,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Average the per-image transmission maps over a dataset.
///
/// Per-pixel means use Kahan compensated summation so the result is
/// independent of the path order to well below 1e-12.
pub fn compute_reference_map(
    paths: &[PathBuf],
    params: &DehazeParams,
    out_size: usize,
) -> Result<ReferenceMapReport> {
    if paths.is_empty() {
        return Err(DehazeError::EmptyDataset);
    }
    let n = out_size * out_size;
    let mut sum = vec![0.0f64; n];
    let mut comp = vec![0.0f64; n];
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for path in paths {
        let t = match imgproc::read_image(path)
            .map_err(DehazeError::from)
            .and_then(|img| reference_transmission(&img, params, out_size))
        {
            Ok(t) => t,
            Err(e) => {
                skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        for i in 0..n {
            let y = t.data()[i] - comp[i];
            let s = sum[i] + y;
            comp[i] = (s - sum[i]) - y;
            sum[i] = s;
        }
        used += 1;
    }
    if used == 0 {
        return Err(DehazeError::AllImagesSkipped(paths.len()));
    }
    let inv = 1.0 / used as f64;
    let data: Vec<f64> = sum.iter().map(|&s| s * inv).collect();
    let map = TransmissionMap::from_raw(out_size, out_size, params.t_floor, data);
    Ok(ReferenceMapReport {
        reference: ReferenceMap {
            map,
            source_count: used,
            resolution: out_size,
        },
        skipped,
    })
}

/// Raw little-endian sidecar for a reference map (PNG export quantizes to
/// 8 bits, the sidecar keeps full precision).
///
/// Layout: magic `b"TMAP"`, `u32` version (1), `u32` width, `u32` height,
/// `u32` source count, `f64` floor, then `width * height` row-major `f64`
/// values. All fields little-endian.
pub fn write_reference_sidecar(reference: &ReferenceMap, path: impl AsRef<Path>) -> Result<()> {
    let map = &reference.map;
    let mut bytes = Vec::with_capacity(28 + map.data().len() * 8);
    bytes.extend_from_slice(b"TMAP");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(reference.source_count as u32).to_le_bytes());
    bytes.extend_from_slice(&map.floor().to_le_bytes());
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path.as_ref(), bytes).map_err(|e| {
        DehazeError::Image(ImgError::IoFailure {
            path: path.as_ref().display().to_string(),
            source: e,
        })
    })
}

/// Read a sidecar written by [`write_reference_sidecar`].
pub fn read_reference_sidecar(path: impl AsRef<Path>) -> Result<ReferenceMap> {
    let path = path.as_ref();
    let fmt_err = |detail: String| {
        DehazeError::Image(ImgError::CorruptFile {
            path: path.display().to_string(),
            detail,
        })
    };
    let bytes = std::fs::read(path).map_err(|e| {
        DehazeError::Image(ImgError::IoFailure {
            path: path.display().to_string(),
            source: e,
        })
    })?;
    if bytes.len() < 28 || &bytes[0..4] != b"TMAP" {
        return Err(fmt_err("missing TMAP header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != 1 {
        return Err(fmt_err(format!("unsupported sidecar version {version}")));
    }
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let source_count = u32_at(16) as usize;
    let floor = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expect = 28 + width * height * 8;
    if bytes.len() != expect {
        return Err(fmt_err(format!(
            "expected {expect} bytes, got {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[28..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(fmt_err("non-finite transmission values".into()));
    }
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(fmt_err(format!("floor {floor} out of range")));
    }
    Ok(ReferenceMap {
        map: TransmissionMap::from_raw(height, width, floor, data),
        source_count: source_count.max(1),
        resolution: width,
    })
}

/// Mean brightness spread (max minus min of per-region mean luma) across a
/// `blocks x blocks` grid of regions covering the whole frame.
pub fn region_mean_spread(img: &Image, blocks: usize) -> f64 {
    region_mean_spread_rect(img, 0, 0, img.width(), img.height(), blocks)
}

/// Like [`region_mean_spread`] but restricted to the given rectangle, so the
/// statistic can be taken over the illuminated field of view only.
pub fn region_mean_spread_rect(
    img: &Image,
    rx: usize,
    ry: usize,
    rw: usize,
    rh: usize,
    blocks: usize,
) -> f64 {
    let luma = img.luma();
    let mut means = Vec::with_capacity(blocks * blocks);
    for by in 0..blocks {
        for bx in 0..blocks {
            let y0 = ry + by * rh / blocks;
            let y1 = (ry + (by + 1) * rh / blocks).max(y0 + 1);
            let x0 = rx + bx * rw / blocks;
            let x1 = (rx + (bx + 1) * rw / blocks).max(x0 + 1);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += luma.get(x, y);
                }
            }
            means.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    let max = means.iter().cloned().fold(f64::MIN, f64::max);
    let min = means.iter().cloned().fold(f64::MAX, f64::min);
    max - min
}
