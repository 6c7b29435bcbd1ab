//! Window filters over scalar fields.
//!
//! `min_filter` and `box_filter` use border-clipped windows: near an edge
//! the window shrinks and (for the mean) the divisor is the true window
//! size, so no padding value ever leaks into the output. Window sums run
//! in row-major order so results are reproducible against a definitional
//! per-pixel scan.

use super::{GrayMap, ImgError, Result};

#[inline]
fn clip(center: usize, radius: usize, len: usize) -> (usize, usize) {
    let lo = center.saturating_sub(radius);
    let hi = (center + radius).min(len - 1);
    (lo, hi)
}

/// Minimum over the border-clipped `(2r+1) x (2r+1)` window at each pixel.
pub fn min_filter(map: &GrayMap, radius: usize) -> GrayMap {
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = (map.height(), map.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = clip(y, radius, h);
        for x in 0..w {
            let (x0, x1) = clip(x, radius, w);
            let mut m = f64::INFINITY;
            for yy in y0..=y1 {
                let row = &map.data()[yy * w + x0..=yy * w + x1];
                for &v in row {
                    if v < m {
                        m = v;
                    }
                }
            }
            out[y * w + x] = m;
        }
    }
    GrayMap::new(h, w, out).expect("min filter preserves finiteness")
}

/// Mean over the border-clipped `(2r+1) x (2r+1)` window at each pixel,
/// divided by the actual (clipped) window size.
pub fn box_filter(map: &GrayMap, radius: usize) -> GrayMap {
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = (map.height(), map.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = clip(y, radius, h);
        for x in 0..w {
            let (x0, x1) = clip(x, radius, w);
            let mut sum = 0.0;
            for yy in y0..=y1 {
                let row = &map.data()[yy * w + x0..=yy * w + x1];
                for &v in row {
                    sum += v;
                }
            }
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            out[y * w + x] = sum / count;
        }
    }
    GrayMap::new(h, w, out).expect("box filter preserves finiteness")
}

/// Guided filter of `src` steered by `guide`.
///
/// Linear-model coefficients come from windowed statistics:
/// `a = cov(guide, src) / (var(guide) + eps)`, `b = mean(src) - a * mean(guide)`,
/// and the output is `mean(a) * guide + mean(b)` with all means taken by
/// [`box_filter`] at the given radius.
pub fn guided_filter(guide: &GrayMap, src: &GrayMap, radius: usize, eps: f64) -> Result<GrayMap> {
    if guide.height() != src.height() || guide.width() != src.width() {
        return Err(ImgError::ShapeMismatch(format!(
            "guide {}x{} vs src {}x{}",
            guide.width(),
            guide.height(),
            src.width(),
            src.height()
        )));
    }
    if !(eps > 0.0) {
        return Err(ImgError::BadGeometry(format!("eps must be > 0, got {eps}")));
    }
    let (h, w) = (guide.height(), guide.width());
    let n = h * w;

    let product = |a: &GrayMap, b: &GrayMap| {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        GrayMap::new(h, w, data)
    };

    let mean_guide = box_filter(guide, radius);
    let mean_src = box_filter(src, radius);
    let corr_gg = box_filter(&product(guide, guide)?, radius);
    let corr_gs = box_filter(&product(guide, src)?, radius);

    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        let mg = mean_guide.data()[i];
        let ms = mean_src.data()[i];
        let var = corr_gg.data()[i] - mg * mg;
        let cov = corr_gs.data()[i] - mg * ms;
        a[i] = cov / (var + eps);
        b[i] = ms - a[i] * mg;
    }
    let mean_a = box_filter(&GrayMap::new(h, w, a)?, radius);
    let mean_b = box_filter(&GrayMap::new(h, w, b)?, radius);

    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = mean_a.data()[i] * guide.data()[i] + mean_b.data()[i];
    }
    GrayMap::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Definitional oracle: independent double loop over the clipped window.
    fn brute_min(map: &GrayMap, radius: usize) -> Vec<f64> {
        let (h, w) = (map.height(), map.width());
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::INFINITY;
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        m = m.min(map.get(xx, yy));
                    }
                }
                out[y * w + x] = m;
            }
        }
        out
    }

    fn brute_mean(map: &GrayMap, radius: usize) -> Vec<f64> {
        let (h, w) = (map.height(), map.width());
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut count = 0usize;
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        sum += map.get(xx, yy);
                        count += 1;
                    }
                }
                out[y * w + x] = sum / count as f64;
            }
        }
        out
    }

    #[test]
    fn min_filter_radius_zero_is_identity() {
        let map = GrayMap::new(2, 3, vec![0.1, 0.9, 0.3, 0.7, 0.2, 0.5]).unwrap();
        assert_eq!(min_filter(&map, 0), map);
    }

    #[test]
    fn min_filter_single_hole() {
        let mut map = GrayMap::splat(5, 5, 1.0).unwrap();
        map.set(2, 2, 0.0);
        let out = min_filter(&map, 1);
        for y in 0..5 {
            for x in 0..5 {
                let in_core = (1..=3).contains(&x) && (1..=3).contains(&y);
                let expect = if in_core { 0.0 } else { 1.0 };
                assert_eq!(out.get(x, y), expect, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn filters_keep_constants() {
        // Dyadic constant: window sums are exact, so equality is bitwise.
        let map = GrayMap::splat(7, 5, 0.25).unwrap();
        for radius in [1usize, 2, 4] {
            assert_eq!(min_filter(&map, radius).data(), map.data());
            assert_eq!(box_filter(&map, radius).data(), map.data());
        }
    }

    #[test]
    fn box_filter_radius_zero_is_identity() {
        let map = GrayMap::new(1, 4, vec![0.4, 0.6, 0.1, 0.9]).unwrap();
        assert_eq!(box_filter(&map, 0), map);
    }

    #[test]
    fn box_filter_single_spike() {
        // 3x3 zeros with 0.9 at the center, radius 1: center windows hold
        // the full spike; corner windows have 4 pixels, edge windows 6.
        let mut map = GrayMap::splat(3, 3, 0.0).unwrap();
        map.set(1, 1, 0.9);
        let out = box_filter(&map, 1);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(out.get(1, 1), 0.1));
        for (x, y) in [(0, 0), (2, 0), (0, 2), (2, 2)] {
            assert!(close(out.get(x, y), 0.225), "corner ({x},{y}) = {}", out.get(x, y));
        }
        for (x, y) in [(1, 0), (0, 1), (2, 1), (1, 2)] {
            assert!(close(out.get(x, y), 0.15), "edge ({x},{y}) = {}", out.get(x, y));
        }
    }

    #[test]
    fn guided_filter_constant_input_is_exact() {
        let map = GrayMap::splat(6, 6, 0.5).unwrap();
        let out = guided_filter(&map, &map, 2, 1e-3).unwrap();
        assert_eq!(out.data(), map.data());
    }

    #[test]
    fn guided_filter_constant_src_any_guide() {
        let guide = GrayMap::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let src = GrayMap::splat(4, 4, 0.75).unwrap();
        let out = guided_filter(&guide, &src, 1, 1e-3).unwrap();
        for &v in out.data() {
            assert!((v - 0.75).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn guided_filter_small_eps_approximates_identity() {
        // Non-degenerate variance, eps -> 0: output tracks src.
        let mut vals = Vec::new();
        let mut state = 11u64;
        for _ in 0..64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push(((state >> 33) as f64 / (1u64 << 31) as f64).fract());
        }
        let src = GrayMap::new(8, 8, vals).unwrap();
        let out = guided_filter(&src, &src, 2, 1e-8).unwrap();
        let max_diff = out
            .data()
            .iter()
            .zip(src.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-3, "max diff {max_diff}");
    }

    #[test]
    fn guided_filter_shape_mismatch() {
        let a = GrayMap::splat(3, 3, 0.5).unwrap();
        let b = GrayMap::splat(3, 4, 0.5).unwrap();
        assert!(matches!(
            guided_filter(&a, &b, 1, 1e-3),
            Err(ImgError::ShapeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn window_filters_match_brute_force(
            h in 1usize..=16,
            w in 1usize..=16,
            radius in 0usize..=4,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
            let data: Vec<f64> = (0..h * w)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            let map = GrayMap::new(h, w, data).unwrap();
            let min_out = min_filter(&map, radius);
            let box_out = box_filter(&map, radius);
            prop_assert_eq!(min_out.data(), &brute_min(&map, radius)[..]);
            prop_assert_eq!(box_out.data(), &brute_mean(&map, radius)[..]);
        }

        #[test]
        fn guided_filter_stays_finite(
            seed in 0u64..500,
            radius in 1usize..=3,
        ) {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let guide = GrayMap::new(8, 8, (0..64).map(|_| next()).collect()).unwrap();
            let src = GrayMap::new(8, 8, (0..64).map(|_| next()).collect()).unwrap();
            let out = guided_filter(&guide, &src, radius, 1e-8).unwrap();
            prop_assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }
}
