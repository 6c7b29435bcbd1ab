//! The two networks of the learned pipeline: a small U-Net-style
//! transmission estimator and a small CNN classifier.
//!
//! Both are built at configurable desk scale. The U-Net ends in sigmoid
//! followed by an affine rescale onto `[t_min, 1]`, which structurally
//! guarantees the shadow removal layer's transmission precondition. The
//! classifier is conv-relu-pool blocks with channel doubling, global
//! average pooling, and one dense output unit with sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad spatial dims: {0}")]
    BadSpatialDims(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Transmission estimator configuration.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TinyUNetConfig {
    /// Number of encoder levels (poolings).
    pub depth: usize,
    /// Channels of the first encoder level; doubled per level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Lower bound of the output transmission.
    pub t_min: f64,
}

impl Default for TinyUNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 3,
            out_channels: 1,
            t_min: 0.1,
        }
    }
}

/// Classifier configuration.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TinyClassifierConfig {
    /// conv-relu-pool blocks with channel doubling.
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for TinyClassifierConfig {
    fn default() -> Self {
        Self {
            conv_blocks: 4,
            base_channels: 8,
            in_channels: 3,
        }
    }
}

fn he_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> (Tensor, Tensor) {
    let fan_in = c_in * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let w: Vec<f64> = (0..c_out * c_in * k * k)
        .map(|_| normal.sample(rng))
        .collect();
    (
        Tensor::new(vec![c_out, c_in, k, k], w).expect("conv weight shape"),
        Tensor::zeros(vec![c_out]),
    )
}

fn he_dense(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> (Tensor, Tensor) {
    let std = (2.0 / d_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let w: Vec<f64> = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
    (
        Tensor::new(vec![d_in, d_out], w).expect("dense weight shape"),
        Tensor::zeros(vec![d_out]),
    )
}

fn push_conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
    let (w, b) = he_conv(rng, c_out, c_in, k);
    params.push(format!("{name}.w"), w);
    params.push(format!("{name}.b"), b);
}

/// He fan-in initialization of all U-Net parameters, deterministic per seed.
pub fn init_unet(cfg: &TinyUNetConfig, seed: u64) -> ParamSet {
    assert!(cfg.depth >= 1, "depth must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let base = cfg.base_channels;
    for l in 0..cfg.depth {
        let c_in = if l == 0 { cfg.in_channels } else { base << (l - 1) };
        let c_out = base << l;
        push_conv(&mut params, &mut rng, &format!("enc{l}.conv1"), c_out, c_in, 3);
        push_conv(&mut params, &mut rng, &format!("enc{l}.conv2"), c_out, c_out, 3);
    }
    let mid_in = base << (cfg.depth - 1);
    let mid_out = base << cfg.depth;
    push_conv(&mut params, &mut rng, "mid.conv1", mid_out, mid_in, 3);
    push_conv(&mut params, &mut rng, "mid.conv2", mid_out, mid_out, 3);
    for l in (0..cfg.depth).rev() {
        let c_skip = base << l;
        let c_up = base << (l + 1);
        push_conv(&mut params, &mut rng, &format!("dec{l}.conv1"), c_skip, c_up + c_skip, 3);
        push_conv(&mut params, &mut rng, &format!("dec{l}.conv2"), c_skip, c_skip, 3);
    }
    push_conv(&mut params, &mut rng, "head", cfg.out_channels, base, 1);
    params
}

/// He fan-in initialization of all classifier parameters.
pub fn init_classifier(cfg: &TinyClassifierConfig, seed: u64) -> ParamSet {
    assert!(cfg.conv_blocks >= 1, "conv_blocks must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let base = cfg.base_channels;
    for b in 0..cfg.conv_blocks {
        let c_in = if b == 0 { cfg.in_channels } else { base << (b - 1) };
        let c_out = base << b;
        push_conv(&mut params, &mut rng, &format!("block{b}"), c_out, c_in, 3);
    }
    let feat = base << (cfg.conv_blocks - 1);
    let (w, b) = he_dense(&mut rng, feat, 1);
    params.push("head.w", w);
    params.push("head.b", b);
    params
}

fn node(set: &ParamSet, ids: &[NodeId], name: &str) -> NodeId {
    ids[set
        .index_of(name)
        .unwrap_or_else(|| panic!("parameter '{name}' missing"))]
}

fn conv_block(
    g: &mut Graph,
    set: &ParamSet,
    ids: &[NodeId],
    name: &str,
    x: NodeId,
    pad: usize,
) -> Result<NodeId> {
    let w = node(set, ids, &format!("{name}.w"));
    let b = node(set, ids, &format!("{name}.b"));
    Ok(g.conv2d(x, w, b, 1, pad)?)
}

/// U-Net forward pass; `ids` comes from `params.register(graph)`.
///
/// Output is `[N, out_channels, H, W]` with every value in `(t_min, 1)`.
pub fn unet_forward(
    g: &mut Graph,
    cfg: &TinyUNetConfig,
    set: &ParamSet,
    ids: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(ModelError::BadSpatialDims(format!(
            "unet wants [N,{},H,W], got {shape:?}",
            cfg.in_channels
        )));
    }
    let div = 1 << cfg.depth;
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(ModelError::BadSpatialDims(format!(
            "unet input {}x{} not divisible by {div}",
            shape[2], shape[3]
        )));
    }
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut cur = x;
    for l in 0..cfg.depth {
        let c1 = conv_block(g, set, ids, &format!("enc{l}.conv1"), cur, 1)?;
        let r1 = g.relu(c1);
        let c2 = conv_block(g, set, ids, &format!("enc{l}.conv2"), r1, 1)?;
        let r2 = g.relu(c2);
        skips.push(r2);
        cur = g.max_pool2(r2)?;
    }
    let m1 = conv_block(g, set, ids, "mid.conv1", cur, 1)?;
    let m1 = g.relu(m1);
    let m2 = conv_block(g, set, ids, "mid.conv2", m1, 1)?;
    cur = g.relu(m2);
    for l in (0..cfg.depth).rev() {
        let up = g.nearest_upsample2(cur)?;
        let cat = g.concat_channels(up, skips[l])?;
        let c1 = conv_block(g, set, ids, &format!("dec{l}.conv1"), cat, 1)?;
        let r1 = g.relu(c1);
        let c2 = conv_block(g, set, ids, &format!("dec{l}.conv2"), r1, 1)?;
        cur = g.relu(c2);
    }
    let head = conv_block(g, set, ids, "head", cur, 0)?;
    let sig = g.sigmoid(head);
    Ok(g.scale_shift(sig, cfg.t_min, 1.0))
}

/// Classifier forward pass; output `[N, 1]`, probabilities strictly in (0, 1).
pub fn classifier_forward(
    g: &mut Graph,
    cfg: &TinyClassifierConfig,
    set: &ParamSet,
    ids: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(ModelError::BadSpatialDims(format!(
            "classifier wants [N,{},H,W], got {shape:?}",
            cfg.in_channels
        )));
    }
    let div = 1 << cfg.conv_blocks;
    if shape[2] < div || shape[3] < div || shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(ModelError::BadSpatialDims(format!(
            "classifier input {}x{} does not survive {} pooling stages",
            shape[2], shape[3], cfg.conv_blocks
        )));
    }
    let mut cur = x;
    for b in 0..cfg.conv_blocks {
        let c = conv_block(g, set, ids, &format!("block{b}"), cur, 1)?;
        let r = g.relu(c);
        cur = g.max_pool2(r)?;
    }
    let feat = g.global_avg_pool(cur)?;
    let w = node(set, ids, "head.w");
    let b = node(set, ids, "head.b");
    let logit = g.dense(feat, w, b)?;
    Ok(g.sigmoid(logit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(71);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| next()).collect()).unwrap()
    }

    #[test]
    fn unet_output_shape_and_range() {
        let cfg = TinyUNetConfig {
            depth: 2,
            base_channels: 4,
            ..TinyUNetConfig::default()
        };
        let params = init_unet(&cfg, 1);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(rng_input(2, 3, 16, 12, 9), false);
        let t = unet_forward(&mut g, &cfg, &params, &ids, x).unwrap();
        assert_eq!(g.shape(t), &[2, 1, 16, 12]);
        assert!(g.values(t).iter().all(|&v| (0.1..=1.0).contains(&v)));
    }

    #[test]
    fn unet_rejects_undivisible_input() {
        let cfg = TinyUNetConfig::default();
        let params = init_unet(&cfg, 1);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(rng_input(1, 3, 12, 12, 2), false);
        assert!(matches!(
            unet_forward(&mut g, &cfg, &params, &ids, x),
            Err(ModelError::BadSpatialDims(_))
        ));
    }

    #[test]
    fn unet_forward_is_deterministic() {
        let cfg = TinyUNetConfig {
            depth: 2,
            base_channels: 4,
            ..TinyUNetConfig::default()
        };
        let run = || {
            let params = init_unet(&cfg, 33);
            let mut g = Graph::new();
            let ids = params.register(&mut g);
            let x = g.leaf(rng_input(1, 3, 8, 8, 5), false);
            let t = unet_forward(&mut g, &cfg, &params, &ids, x).unwrap();
            g.values(t).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn classifier_outputs_probabilities() {
        let cfg = TinyClassifierConfig {
            conv_blocks: 3,
            base_channels: 4,
            ..TinyClassifierConfig::default()
        };
        let params = init_classifier(&cfg, 4);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(rng_input(3, 3, 16, 16, 21), false);
        let p = classifier_forward(&mut g, &cfg, &params, &ids, x).unwrap();
        assert_eq!(g.shape(p), &[3, 1]);
        assert!(g.values(p).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn classifier_identical_inputs_identical_outputs() {
        let cfg = TinyClassifierConfig {
            conv_blocks: 2,
            base_channels: 4,
            ..TinyClassifierConfig::default()
        };
        let params = init_classifier(&cfg, 8);
        let one = rng_input(1, 3, 8, 8, 55);
        let mut doubled = one.values().to_vec();
        doubled.extend_from_slice(one.values());
        let batch = Tensor::new(vec![2, 3, 8, 8], doubled).unwrap();
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(batch, false);
        let p = classifier_forward(&mut g, &cfg, &params, &ids, x).unwrap();
        assert_eq!(g.values(p)[0], g.values(p)[1]);
    }

    #[test]
    fn classifier_rejects_small_input() {
        let cfg = TinyClassifierConfig::default();
        let params = init_classifier(&cfg, 4);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(rng_input(1, 3, 8, 8, 2), false);
        assert!(matches!(
            classifier_forward(&mut g, &cfg, &params, &ids, x),
            Err(ModelError::BadSpatialDims(_))
        ));
    }

    #[test]
    fn classifier_bce_gradients_mostly_nonzero() {
        let cfg = TinyClassifierConfig {
            conv_blocks: 3,
            base_channels: 4,
            ..TinyClassifierConfig::default()
        };
        let mut params = init_classifier(&cfg, 12);
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let x = g.leaf(rng_input(8, 3, 16, 16, 5), false);
        let p = classifier_forward(&mut g, &cfg, &params, &ids, x).unwrap();
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let y = g.leaf(Tensor::new(vec![8, 1], labels).unwrap(), false);
        let loss = g.bce_loss(p, y).unwrap();
        g.backward(loss).unwrap();
        params.harvest_grads(&g, &ids);
        let mut total = 0usize;
        let mut nonzero = 0usize;
        for prm in params.iter() {
            for &gv in &prm.grad {
                assert!(gv.is_finite());
                total += 1;
                if gv != 0.0 {
                    nonzero += 1;
                }
            }
        }
        assert!(
            nonzero as f64 >= 0.99 * total as f64,
            "only {nonzero}/{total} gradients nonzero"
        );
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = TinyUNetConfig::default();
        let a = init_unet(&cfg, 7);
        let b = init_unet(&cfg, 7);
        let c = init_unet(&cfg, 8);
        assert_eq!(a.value_bytes(), b.value_bytes());
        assert_ne!(a.value_bytes(), c.value_bytes());
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let cfg = TinyClassifierConfig::default();
        let params = init_classifier(&cfg, 3);
        // block3: 64 x 32 x 3 x 3 = 18432 weights, fan_in = 288.
        let w = params.get("block3.w").unwrap();
        assert!(w.value.numel() >= 1024);
        let mean = w.value.values().iter().sum::<f64>() / w.value.numel() as f64;
        let var = w
            .value
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / w.value.numel() as f64;
        let expect = 2.0 / 288.0;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "variance {var} vs expected {expect}"
        );
        // Biases start at zero.
        assert!(params
            .get("block3.b")
            .unwrap()
            .value
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }
}
