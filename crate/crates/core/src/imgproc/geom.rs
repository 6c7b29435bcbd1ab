//! Geometric transforms: resize, crop, rotate, flip.
//!
//! Bilinear sampling uses the align-corners convention: output corner
//! samples coincide with input corner samples, and interior coordinates
//! scale by `(len_in - 1) / (len_out - 1)`. A same-size resize is an exact
//! identity.

use super::{Image, ImgError, Result};

#[inline]
fn src_coord(i: usize, len_out: usize, len_in: usize) -> f64 {
    if len_out == 1 {
        (len_in - 1) as f64 / 2.0
    } else {
        i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
    }
}

#[inline]
fn split_coord(s: f64, len: usize) -> (usize, usize, f64) {
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with align-corners sampling.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(ImgError::BadGeometry("resize target must be at least 1x1".into()));
    }
    if out_w == img.width() && out_h == img.height() {
        return Ok(img.clone());
    }
    let ch = img.channels();
    let mut data = vec![0.0; out_h * out_w * ch];
    for y in 0..out_h {
        let sy = src_coord(y, out_h, img.height());
        let (y0, y1, fy) = split_coord(sy, img.height());
        for x in 0..out_w {
            let sx = src_coord(x, out_w, img.width());
            let (x0, x1, fx) = split_coord(sx, img.width());
            for c in 0..ch {
                let v00 = img.get(x0, y0, c);
                let v10 = img.get(x1, y0, c);
                let v01 = img.get(x0, y1, c);
                let v11 = img.get(x1, y1, c);
                let top = v00 + (v10 - v00) * fx;
                let bottom = v01 + (v11 - v01) * fx;
                let v = top + (bottom - top) * fy;
                data[(y * out_w + x) * ch + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, ch, data)
}

/// Bilinear resize of a raw single-channel field (no range clamp).
///
/// Output values are convex combinations of inputs, so any input range is
/// preserved.
pub fn resize_gray_bilinear(
    data: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(data.len(), in_h * in_w, "gray buffer length mismatch");
    if out_w == in_w && out_h == in_h {
        return data.to_vec();
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let sy = src_coord(y, out_h, in_h);
        let (y0, y1, fy) = split_coord(sy, in_h);
        for x in 0..out_w {
            let sx = src_coord(x, out_w, in_w);
            let (x0, x1, fx) = split_coord(sx, in_w);
            let v00 = data[y0 * in_w + x0];
            let v10 = data[y0 * in_w + x1];
            let v01 = data[y1 * in_w + x0];
            let v11 = data[y1 * in_w + x1];
            let top = v00 + (v10 - v00) * fx;
            let bottom = v01 + (v11 - v01) * fx;
            out[y * out_w + x] = top + (bottom - top) * fy;
        }
    }
    out
}

/// Centered crop. When a margin is odd the extra pixel goes to the
/// bottom/right, biasing the window toward the top-left.
pub fn center_crop(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w > img.width() || out_h > img.height() || out_w == 0 || out_h == 0 {
        return Err(ImgError::CropTooLarge {
            out_w,
            out_h,
            width: img.width(),
            height: img.height(),
        });
    }
    let x0 = (img.width() - out_w) / 2;
    let y0 = (img.height() - out_h) / 2;
    let ch = img.channels();
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for y in 0..out_h {
        let row = (y0 + y) * img.width();
        let start = (row + x0) * ch;
        data.extend_from_slice(&img.data()[start..start + out_w * ch]);
    }
    Image::new(out_h, out_w, ch, data)
}

/// Rotate about the image center by `angle` degrees (counterclockwise in
/// standard x-right/y-down pixel coordinates this appears clockwise).
/// Bilinear sampling; samples falling outside the source read as 0; the
/// output keeps the input dimensions.
pub fn rotate(img: &Image, angle: f64) -> Image {
    let rad = angle.to_radians();
    let (sin, cos) = rad.sin_cos();
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let mut data = vec![0.0; h * w * ch];
    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.get(x as usize, y as usize, c)
        }
    };
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // Inverse map: source position that lands on (x, y).
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            for c in 0..ch {
                let v00 = sample(xi, yi, c);
                let v10 = sample(xi + 1, yi, c);
                let v01 = sample(xi, yi + 1, c);
                let v11 = sample(xi + 1, yi + 1, c);
                let top = v00 + (v10 - v00) * fx;
                let bottom = v01 + (v11 - v01) * fx;
                let v = top + (bottom - top) * fy;
                data[(y * w + x) * ch + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, ch, data).expect("rotation preserves geometry and range")
}

/// Reverse column order in every row.
pub fn hflip(img: &Image) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut data = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * ch;
            let dst = (y * w + (w - 1 - x)) * ch;
            data[dst..dst + ch].copy_from_slice(&img.data()[src..src + ch]);
        }
    }
    Image::new(h, w, ch, data).expect("flip preserves geometry and range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, ch: usize) -> Image {
        let n = h * w * ch;
        Image::new(h, w, ch, (0..n).map(|i| i as f64 / (n - 1) as f64).collect()).unwrap()
    }

    #[test]
    fn resize_same_size_is_bit_identical() {
        let img = ramp(5, 7, 3);
        let out = resize_bilinear(&img, 7, 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::splat(4, 6, 3, 0.3).unwrap();
        for (w, h) in [(3, 9), (1, 1), (13, 2)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_two_to_three_ramp() {
        // Align-corners: [0, 1] widened to three samples becomes [0, 0.5, 1].
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 3, 1).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn crop_full_size_is_identity() {
        let img = ramp(4, 4, 1);
        assert_eq!(center_crop(&img, 4, 4).unwrap(), img);
    }

    #[test]
    fn crop_even_and_odd_margins() {
        let img4 = ramp(4, 4, 1);
        let out = center_crop(&img4, 2, 2).unwrap();
        assert_eq!(out.get(0, 0, 0), img4.get(1, 1, 0));
        assert_eq!(out.get(1, 1, 0), img4.get(2, 2, 0));

        // Odd margin biases toward the top-left: 5 -> 2 keeps rows/cols {1, 2}.
        let img5 = ramp(5, 5, 1);
        let out = center_crop(&img5, 2, 2).unwrap();
        assert_eq!(out.get(0, 0, 0), img5.get(1, 1, 0));
        assert_eq!(out.get(1, 1, 0), img5.get(2, 2, 0));
    }

    #[test]
    fn crop_too_large_errors() {
        let img = ramp(3, 3, 1);
        assert!(matches!(
            center_crop(&img, 4, 2),
            Err(ImgError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp(6, 5, 3);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn rotate_full_turn_is_near_identity() {
        let img = ramp(8, 8, 1);
        let out = rotate(&img, 360.0);
        let max = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-6, "max diff {max}");
    }

    #[test]
    fn rotate_quarter_turn_matches_index_remap() {
        // Constant disk so edge interpolation cannot bleed background in.
        let n = 9usize;
        let c = (n - 1) as f64 / 2.0;
        let mut img = Image::splat(n, n, 1, 0.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                if d2 <= 9.0 {
                    img.set(x, y, 0, 0.5);
                }
            }
        }
        let out = rotate(&img, 90.0);
        // Exact quarter-turn remap oracle: source pixel for output (x, y)
        // under a 90 degree rotation is (x', y') with x' = cx + (y - cy),
        // y' = cy - (x - cx).
        for y in 0..n {
            for x in 0..n {
                let xs = (c + (y as f64 - c)) as usize;
                let ys = (c - (x as f64 - c)) as usize;
                let expect = img.get(xs, ys, 0);
                let got = out.get(x, y, 0);
                assert!((got - expect).abs() < 1e-6, "at ({x},{y}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn hflip_basics() {
        let img = Image::new(1, 2, 1, vec![0.2, 0.8]).unwrap();
        assert_eq!(hflip(&img).data(), &[0.8, 0.2]);

        let img = ramp(5, 6, 3);
        assert_eq!(hflip(&hflip(&img)), img);

        let sym = Image::new(1, 3, 1, vec![0.1, 0.5, 0.1]).unwrap();
        assert_eq!(hflip(&sym), sym);
    }

    proptest! {
        #[test]
        fn geometry_preserves_range(seed in 0u64..300, angle in -400.0f64..400.0) {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let img = Image::new(8, 8, 3, (0..192).map(|_| next()).collect()).unwrap();
            for out in [
                rotate(&img, angle),
                resize_bilinear(&img, 5, 11).unwrap(),
                hflip(&img),
            ] {
                prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
