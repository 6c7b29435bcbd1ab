//! 8-bit PNG and binary PPM (P6) input/output.
//!
//! Decoding maps channel value `v` to `v / 255`. Encoding is the exact
//! inverse with round-half-away-from-zero, so an image that came from an
//! 8-bit file round-trips bit-exactly.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::{Image, ImgError, Result};

fn detect_format(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") | Some("pgm") => Ok(ImageFormat::Pnm),
        other => Err(ImgError::UnsupportedFormat(format!(
            "{} (extension {:?})",
            path.display(),
            other
        ))),
    }
}

/// Read an 8-bit PNG or binary PPM into unit-interval intensities.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    detect_format(path)?;
    let reader = ImageReader::open(path).map_err(|e| ImgError::IoFailure {
        path: path.display().to_string(),
        source: e,
    })?;
    let decoded = reader
        .with_guessed_format()
        .map_err(|e| ImgError::IoFailure {
            path: path.display().to_string(),
            source: e,
        })?
        .decode()
        .map_err(|e| ImgError::CorruptFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let (channels, raw, w, h) = match decoded {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            (1usize, img.into_raw(), w, h)
        }
        other => {
            let img = other.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            (3usize, img.into_raw(), w, h)
        }
    };
    let data = raw.iter().map(|&v| v as f64 / 255.0).collect();
    Image::new(h, w, channels, data)
}

#[inline]
fn quantize(v: f64) -> u8 {
    // round() is round-half-away-from-zero; inputs are already in [0, 1].
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write an image as 8-bit PNG or binary PPM depending on the extension.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = detect_format(path)?;
    let w = img.width() as u32;
    let h = img.height() as u32;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let io_err = |e: image::ImageError| match e {
        image::ImageError::IoError(source) => ImgError::IoFailure {
            path: path.display().to_string(),
            source,
        },
        other => ImgError::CorruptFile {
            path: path.display().to_string(),
            detail: other.to_string(),
        },
    };
    match img.channels() {
        1 => {
            // PPM (P6) is RGB-only; expand gray to three channels there.
            if format == ImageFormat::Pnm {
                let rgb: Vec<u8> = bytes.iter().flat_map(|&v| [v, v, v]).collect();
                let buf = image::RgbImage::from_raw(w, h, rgb).unwrap();
                buf.save_with_format(path, format).map_err(io_err)
            } else {
                let buf = image::GrayImage::from_raw(w, h, bytes).unwrap();
                buf.save_with_format(path, format).map_err(io_err)
            }
        }
        3 => {
            let buf = image::RgbImage::from_raw(w, h, bytes).unwrap();
            buf.save_with_format(path, format).map_err(io_err)
        }
        _ => unreachable!("images are 1 or 3 channels"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized_ramp(h: usize, w: usize, ch: usize) -> Image {
        let n = h * w * ch;
        let data = (0..n).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        Image::new(h, w, ch, data).unwrap()
    }

    #[test]
    fn eight_bit_mapping() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(128.0 / 255.0), 128);
        assert!((128.0_f64 / 255.0 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = quantized_ramp(5, 4, 3);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        let img = quantized_ramp(3, 7, 3);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gray_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = quantized_ramp(4, 4, 1);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn unsupported_extension_rejected() {
        assert!(matches!(
            read_image("/no/such/file.txt"),
            Err(ImgError::UnsupportedFormat(_))
        ));
        let img = quantized_ramp(2, 2, 3);
        assert!(matches!(
            write_image(&img, "/tmp/x.jpeg"),
            Err(ImgError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            read_image("/no/such/dir/missing.png"),
            Err(ImgError::IoFailure { .. })
        ));
    }

    #[test]
    fn corrupt_png_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        assert!(matches!(
            read_image(&path),
            Err(ImgError::CorruptFile { .. })
        ));
    }
}
