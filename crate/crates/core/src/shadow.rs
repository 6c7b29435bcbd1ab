//! The differentiable shadow removal layer.
//!
//! Forward map: `J = 1 - (((1 - I) - A) / t + A)` applied elementwise, with
//! one transmission value shared by the three color channels of a pixel.
//! With `A = 1` this reduces to `J = I / t`. The output is intentionally
//! not clamped inside the differentiable path; clamping would kill
//! gradients exactly where training needs them. Use [`export_batch_image`]
//! when a displayable image is wanted.
//!
//! Batch layout is NCHW: images `[N, 3, H, W]`, transmission `[N, 1, H, W]`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("transmission underflow: t = {t} below clamp {clamp}")]
    TransmissionUnderflow { t: f64, clamp: f64 },
}

pub type Result<T> = std::result::Result<T, ShadowError>;

/// Configuration of the layer.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ShadowLayerConfig {
    /// Atmospheric light, a fixed scalar hyperparameter. White-balanced
    /// inputs justify the default of 1.
    pub a_value: f64,
    /// Smallest transmission the layer accepts; the network's output
    /// activation must bound t below by this.
    pub t_min_clamp: f64,
    /// Clamp to [0, 1] when exporting images (never inside the layer).
    pub clamp_output_for_export: bool,
}

impl Default for ShadowLayerConfig {
    fn default() -> Self {
        Self {
            a_value: 1.0,
            t_min_clamp: 0.1,
            clamp_output_for_export: true,
        }
    }
}

impl ShadowLayerConfig {
    pub fn validate(&self) {
        assert!(
            self.a_value > 0.0 && self.a_value <= 1.0,
            "a_value must be in (0, 1]"
        );
        assert!(self.t_min_clamp > 0.0, "t_min_clamp must be positive");
    }
}

/// Batch geometry shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDims {
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl BatchDims {
    pub fn image_len(&self) -> usize {
        self.n * 3 * self.height * self.width
    }

    pub fn map_len(&self) -> usize {
        self.n * self.height * self.width
    }
}

fn check_shapes(img: &[f64], t: &[f64], dims: BatchDims) -> Result<()> {
    if img.len() != dims.image_len() {
        return Err(ShadowError::ShapeMismatch(format!(
            "image buffer has {} values, dims want {}",
            img.len(),
            dims.image_len()
        )));
    }
    if t.len() != dims.map_len() {
        return Err(ShadowError::ShapeMismatch(format!(
            "transmission buffer has {} values, dims want {}",
            t.len(),
            dims.map_len()
        )));
    }
    Ok(())
}

/// Scalar form of the layer, the single source of the formula.
#[inline]
pub fn shadow_scalar(i: f64, t: f64, a: f64) -> f64 {
    1.0 - (((1.0 - i) - a) / t + a)
}

/// Forward pass over an NCHW batch.
pub fn shadow_forward(
    img: &[f64],
    t: &[f64],
    dims: BatchDims,
    cfg: &ShadowLayerConfig,
) -> Result<Vec<f64>> {
    cfg.validate();
    check_shapes(img, t, dims)?;
    if let Some(&bad) = t.iter().find(|&&v| v < cfg.t_min_clamp) {
        return Err(ShadowError::TransmissionUnderflow {
            t: bad,
            clamp: cfg.t_min_clamp,
        });
    }
    let plane = dims.height * dims.width;
    let mut out = vec![0.0; img.len()];
    for n in 0..dims.n {
        let t_plane = &t[n * plane..(n + 1) * plane];
        for c in 0..3 {
            let base = (n * 3 + c) * plane;
            for p in 0..plane {
                out[base + p] = shadow_scalar(img[base + p], t_plane[p], cfg.a_value);
            }
        }
    }
    Ok(out)
}

/// Analytic backward pass.
///
/// `dJ/dI = 1/t` per element; `dJ/dt = ((1 - I) - A) / t^2`, summed over
/// the three color channels because one transmission value feeds all of
/// them. Returns `(d_img, d_t)` for the given upstream gradient.
pub fn shadow_backward(
    img: &[f64],
    t: &[f64],
    dims: BatchDims,
    cfg: &ShadowLayerConfig,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate();
    check_shapes(img, t, dims)?;
    if upstream.len() != img.len() {
        return Err(ShadowError::ShapeMismatch(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            img.len()
        )));
    }
    let plane = dims.height * dims.width;
    let mut d_img = vec![0.0; img.len()];
    let mut d_t = vec![0.0; t.len()];
    for n in 0..dims.n {
        let t_plane = &t[n * plane..(n + 1) * plane];
        let dt_plane = &mut d_t[n * plane..(n + 1) * plane];
        for c in 0..3 {
            let base = (n * 3 + c) * plane;
            for p in 0..plane {
                let tv = t_plane[p];
                let g = upstream[base + p];
                d_img[base + p] = g / tv;
                dt_plane[p] += g * ((1.0 - img[base + p]) - cfg.a_value) / (tv * tv);
            }
        }
    }
    Ok((d_img, d_t))
}

/// Clamp a forward output into `[0, 1]` for image export.
pub fn export_batch_image(j: &[f64], cfg: &ShadowLayerConfig) -> Vec<f64> {
    if cfg.clamp_output_for_export {
        j.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        j.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims1(h: usize, w: usize) -> BatchDims {
        BatchDims { n: 1, height: h, width: w }
    }

    fn cfg_a(a: f64) -> ShadowLayerConfig {
        ShadowLayerConfig {
            a_value: a,
            ..ShadowLayerConfig::default()
        }
    }

    #[test]
    fn forward_scalar_anchors() {
        // t = 1, A = 1 is the identity.
        assert_eq!(shadow_scalar(0.5, 1.0, 1.0), 0.5);
        // A = 1 divides by t: 0.4 / 0.8 = 0.5.
        assert!((shadow_scalar(0.4, 0.8, 1.0) - 0.5).abs() < 1e-15);
        // General A: 1 - ((0.4 - 0.9) / 0.8 + 0.9) = 0.725.
        assert!((shadow_scalar(0.6, 0.8, 0.9) - 0.725).abs() < 1e-15);
    }

    #[test]
    fn forward_batch_matches_scalar() {
        let dims = dims1(2, 3);
        let img: Vec<f64> = (0..18).map(|i| 0.05 + i as f64 * 0.05).collect();
        let t: Vec<f64> = (0..6).map(|i| 0.3 + i as f64 * 0.1).collect();
        let cfg = cfg_a(0.9);
        let out = shadow_forward(&img, &t, dims, &cfg).unwrap();
        for c in 0..3 {
            for p in 0..6 {
                let want = shadow_scalar(img[c * 6 + p], t[p], 0.9);
                assert_eq!(out[c * 6 + p], want);
            }
        }
    }

    #[test]
    fn underflow_and_shape_errors() {
        let dims = dims1(2, 2);
        let img = vec![0.5; 12];
        let mut t = vec![0.5; 4];
        t[3] = 0.05;
        assert!(matches!(
            shadow_forward(&img, &t, dims, &ShadowLayerConfig::default()),
            Err(ShadowError::TransmissionUnderflow { .. })
        ));
        assert!(matches!(
            shadow_forward(&img, &[0.5; 3], dims, &ShadowLayerConfig::default()),
            Err(ShadowError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_anchors() {
        // At t = 1, A = 1: dJ/dI = 1.
        let dims = dims1(1, 1);
        let (di, _) = shadow_backward(
            &[0.3, 0.3, 0.3],
            &[1.0],
            dims,
            &cfg_a(1.0),
            &[1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(di[0], 1.0);

        // I = 0.4, t = 0.8, A = 1: dJ/dI = 1.25, dJ/dt = -0.625 per channel.
        let (di, dt) = shadow_backward(
            &[0.4, 0.4, 0.4],
            &[0.8],
            dims,
            &cfg_a(1.0),
            &[1.0, 0.0, 0.0],
        )
        .unwrap();
        assert!((di[0] - 1.25).abs() < 1e-12);
        assert!((dt[0] - (-0.625)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_central_differences() {
        let dims = dims1(4, 5);
        let plane = 20usize;
        let mut state = 0xC0FFEEu64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let img: Vec<f64> = (0..3 * plane).map(|_| 0.05 + 0.9 * next()).collect();
        let t: Vec<f64> = (0..plane).map(|_| 0.2 + 0.8 * next()).collect();
        let upstream: Vec<f64> = (0..3 * plane).map(|_| next() - 0.5).collect();
        let cfg = cfg_a(0.9);
        let (di, dt) = shadow_backward(&img, &t, dims, &cfg, &upstream).unwrap();

        let loss = |img: &[f64], t: &[f64]| -> f64 {
            let out = shadow_forward(img, t, dims, &cfg).unwrap();
            out.iter().zip(&upstream).map(|(j, u)| j * u).sum()
        };
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in 0..3 * plane {
            let mut plus = img.to_vec();
            plus[idx] += h;
            let mut minus = img.to_vec();
            minus[idx] -= h;
            let fd = (loss(&plus, &t) - loss(&minus, &t)) / (2.0 * h);
            let rel = (di[idx] - fd).abs() / di[idx].abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        for idx in 0..plane {
            let mut plus = t.to_vec();
            plus[idx] += h;
            let mut minus = t.to_vec();
            minus[idx] -= h;
            let fd = (loss(&img, &plus) - loss(&img, &minus)) / (2.0 * h);
            let rel = (dt[idx] - fd).abs() / dt[idx].abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn dt_is_sum_of_per_channel_contributions() {
        // Zeroing the upstream gradient of two channels isolates each
        // channel's term; the three must add up to the full dt.
        let dims = dims1(2, 2);
        let plane = 4usize;
        let img: Vec<f64> = (0..12).map(|i| 0.1 + 0.07 * i as f64).collect();
        let t = vec![0.4, 0.6, 0.8, 1.0];
        let cfg = cfg_a(0.9);
        let upstream: Vec<f64> = (0..12).map(|i| 0.3 + 0.05 * i as f64).collect();
        let (_, dt_full) = shadow_backward(&img, &t, dims, &cfg, &upstream).unwrap();
        let mut dt_sum = vec![0.0; plane];
        for c in 0..3 {
            let mut masked = vec![0.0; 12];
            masked[c * plane..(c + 1) * plane]
                .copy_from_slice(&upstream[c * plane..(c + 1) * plane]);
            let (_, dt_c) = shadow_backward(&img, &t, dims, &cfg, &masked).unwrap();
            for p in 0..plane {
                dt_sum[p] += dt_c[p];
            }
        }
        for p in 0..plane {
            assert!((dt_full[p] - dt_sum[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_decreasing_in_t_at_unit_airlight() {
        // dJ/dt = -I / t^2 < 0 whenever I > 0.
        for i in [0.1, 0.5, 0.9] {
            for t in [0.2, 0.5, 1.0] {
                let dims = dims1(1, 1);
                let (_, dt) = shadow_backward(
                    &[i, i, i],
                    &[t],
                    dims,
                    &cfg_a(1.0),
                    &[1.0, 0.0, 0.0],
                )
                .unwrap();
                assert!(dt[0] < 0.0, "dJ/dt must be negative at I={i}, t={t}");
                assert!((dt[0] - (-i / (t * t))).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn unit_airlight_reduces_to_division(seed in 0u64..500) {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = || {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let dims = BatchDims { n: 2, height: 3, width: 3 };
            let img: Vec<f64> = (0..dims.image_len()).map(|_| next()).collect();
            let t: Vec<f64> = (0..dims.map_len()).map(|_| 0.1 + 0.9 * next()).collect();
            let out = shadow_forward(&img, &t, dims, &cfg_a(1.0)).unwrap();
            let plane = 9usize;
            for n in 0..2 {
                for c in 0..3 {
                    for p in 0..plane {
                        let want = img[(n * 3 + c) * plane + p] / t[n * plane + p];
                        let got = out[(n * 3 + c) * plane + p];
                        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn export_clamps_only_when_asked() {
        let j = vec![-0.2, 0.5, 1.7];
        let clamped = export_batch_image(&j, &ShadowLayerConfig::default());
        assert_eq!(clamped, vec![0.0, 0.5, 1.0]);
        let raw = export_batch_image(
            &j,
            &ShadowLayerConfig {
                clamp_output_for_export: false,
                ..ShadowLayerConfig::default()
            },
        );
        assert_eq!(raw, j);
    }
}
