//! Finite-difference gradient checking.
//!
//! The harness rebuilds the forward pass from perturbed leaf tensors and
//! compares central differences against analytic adjoints, so it exercises
//! a route through the code that never touches the backward
//! implementation it validates.

use crate::autodiff::{Graph, NodeId, Result, Tensor};
use crate::shadow::{shadow_scalar, ShadowLayerConfig};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor so near-zero derivative pairs
/// compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check analytic gradients of a scalar-valued graph against central
/// finite differences.
///
/// `build` must construct the loss from the given leaves alone (it is
/// re-invoked for every probe evaluation). `probes` lists, per leaf index,
/// flat value indices to perturb.
pub fn check_gradients<F>(
    name: &str,
    build: F,
    leaves: &[Tensor],
    probes: &[(usize, Vec<usize>)],
    h: f64,
    tolerance: f64,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

    let eval = |leaves: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.values(loss)[0])
    };

    // Relu and max-pool kinks sit at finite distances from the evaluation
    // point; a centered difference that straddles one measures a
    // subgradient mixture, not the derivative, and stays wrong until the
    // step drops inside the locally smooth piece. Walk a step ladder and
    // accept the first adjacent pair of readings that agree tightly: two
    // polluted readings at different steps cannot coincide generically,
    // so agreement certifies a kink-free window. The selection never
    // consults the analytic value.
    let fd_at = |leaf: usize, idx: usize, step: f64| -> Result<f64> {
        let mut plus = leaves.to_vec();
        plus[leaf].values_mut()[idx] += step;
        let mut minus = leaves.to_vec();
        minus[leaf].values_mut()[idx] -= step;
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
    };
    let agree = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for (leaf, indices) in probes {
        for &idx in indices {
            let mut prev = fd_at(*leaf, idx, h)?;
            let mut fd = prev;
            let mut step = h;
            for _ in 0..4 {
                step /= 10.0;
                let next = fd_at(*leaf, idx, step)?;
                if agree(prev, next) {
                    fd = next;
                    break;
                }
                prev = next;
                fd = next;
            }
            max_rel = max_rel.max(rel_err(analytic[*leaf][idx], fd));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        checked,
    })
}

/// Scalar-level check of the shadow removal layer's two partial
/// derivatives over random `(I, t, A)` points.
pub fn check_shadow_scalars(seed: u64, points: usize, h: f64, tolerance: f64) -> Vec<CheckResult> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(41);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut max_di: f64 = 0.0;
    let mut max_dt: f64 = 0.0;
    for _ in 0..points {
        let i = 0.05 + 0.9 * next();
        let t = 0.2 + 0.8 * next();
        let a = 0.5 + 0.5 * next();
        let an_di = 1.0 / t;
        let an_dt = ((1.0 - i) - a) / (t * t);
        let fd_di = (shadow_scalar(i + h, t, a) - shadow_scalar(i - h, t, a)) / (2.0 * h);
        let fd_dt = (shadow_scalar(i, t + h, a) - shadow_scalar(i, t - h, a)) / (2.0 * h);
        max_di = max_di.max(rel_err(an_di, fd_di));
        max_dt = max_dt.max(rel_err(an_dt, fd_dt));
    }
    vec![
        CheckResult {
            name: "shadow dJ/dI".into(),
            max_rel_err: max_di,
            tolerance,
            checked: points,
        },
        CheckResult {
            name: "shadow dJ/dt".into(),
            max_rel_err: max_dt,
            tolerance,
            checked: points,
        },
    ]
}

/// End-to-end differentiability of the learned pipeline: finite
/// differences on U-Net parameters through the shadow removal layer, the
/// classifier, and the combined classification + regression loss.
///
/// Probes at least `min_probes` parameters spread over every U-Net
/// tensor. Use a small step (1e-7 works well): relu and max-pool kinks
/// sit at finite distances from the evaluation point, and the centered
/// difference must stay inside the locally smooth piece; f64 keeps the
/// roundoff floor near 1e-9 at that step.
pub fn check_end_to_end(seed: u64, min_probes: usize, h: f64, tolerance: f64) -> Result<CheckResult> {
    use crate::models::{
        classifier_forward, init_classifier, init_unet, unet_forward, TinyClassifierConfig,
        TinyUNetConfig,
    };

    let unet_cfg = TinyUNetConfig {
        depth: 3,
        base_channels: 2,
        ..TinyUNetConfig::default()
    };
    let clf_cfg = TinyClassifierConfig {
        conv_blocks: 3,
        base_channels: 2,
        ..TinyClassifierConfig::default()
    };
    let mut unet_params = init_unet(&unet_cfg, seed);
    let mut clf_params = init_classifier(&clf_cfg, seed.wrapping_add(1));
    let n_unet = unet_params.len();
    let n_clf = clf_params.len();

    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };

    // Check at a generic point. Fresh He init has all-zero biases, which
    // makes dead regions sit exactly on the relu kink where the loss is
    // not differentiable and central differences measure a subgradient
    // mixture. A small random offset on every parameter moves the network
    // off those ties without changing what is being verified.
    for set in [&mut unet_params, &mut clf_params] {
        for p in set.iter_mut() {
            for v in p.value.values_mut() {
                let mag = 0.01 + 0.04 * next();
                *v += if next() > 0.5 { mag } else { -mag };
            }
        }
    }
    let (n, size) = (2usize, 16usize);
    let img = Tensor::new(
        vec![n, 3, size, size],
        (0..n * 3 * size * size).map(|_| 0.05 + 0.9 * next()).collect(),
    )?;
    let label = Tensor::new(vec![n, 1], vec![1.0, 0.0])?;
    let reference = Tensor::new(
        vec![n, 1, size, size],
        (0..n * size * size).map(|_| 0.3 + 0.6 * next()).collect(),
    )?;

    let mut leaves: Vec<Tensor> = Vec::new();
    for p in unet_params.iter() {
        leaves.push(p.value.clone());
    }
    for p in clf_params.iter() {
        leaves.push(p.value.clone());
    }
    leaves.push(img);
    leaves.push(label);
    leaves.push(reference);

    // Spread probes across every U-Net tensor, proportional to size.
    let total: usize = unet_params.iter().map(|p| p.value.numel()).sum();
    let mut probes: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, p) in unet_params.iter().enumerate() {
        let numel = p.value.numel();
        let k = ((min_probes * numel).div_ceil(total)).clamp(1, numel);
        let idxs: Vec<usize> = (0..k).map(|j| j * numel / k).collect();
        probes.push((i, idxs));
    }

    let unet_set = unet_params.clone();
    let clf_set = clf_params.clone();
    let shadow_cfg = ShadowLayerConfig::default();
    check_gradients(
        "end-to-end unet gradients",
        move |g, ids| {
            let unet_ids = &ids[..n_unet];
            let clf_ids = &ids[n_unet..n_unet + n_clf];
            let x = ids[n_unet + n_clf];
            let y = ids[n_unet + n_clf + 1];
            let m = ids[n_unet + n_clf + 2];
            let t = unet_forward(g, &unet_cfg, &unet_set, unet_ids, x)
                .map_err(|e| crate::autodiff::AdError::DomainError(e.to_string()))?;
            let j = g.shadow_removal(x, t, shadow_cfg)?;
            let pred = classifier_forward(g, &clf_cfg, &clf_set, clf_ids, j)
                .map_err(|e| crate::autodiff::AdError::DomainError(e.to_string()))?;
            let bce = g.bce_loss(pred, y)?;
            let mse = g.mse_loss(t, m)?;
            g.add(bce, mse)
        },
        &leaves,
        &probes,
        h,
        tolerance,
    )
}

/// Every check the artifact cares about, in a fixed order with fixed
/// tolerances. Used by the CLI and the acceptance suite.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.extend(check_shadow_scalars(seed, 100, 1e-4, 1e-4));
    out.push(check_shadow_batch(seed, 1e-5, 1e-4)?);
    out.extend(op_suite(seed)?);
    out.push(check_end_to_end(seed, 50, 1e-7, 1e-3)?);
    Ok(out)
}

fn rand_tensor(shape: Vec<usize>, next: &mut impl FnMut() -> f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| next() - 0.5).collect()).expect("valid shape")
}

fn all_probes(leaves: &[Tensor]) -> Vec<(usize, Vec<usize>)> {
    leaves
        .iter()
        .enumerate()
        .map(|(i, t)| (i, (0..t.numel()).collect()))
        .collect()
}

/// Finite-difference checks for each differentiable graph operation.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(59);
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut out = Vec::new();
    let tol = 1e-3;
    let h = 1e-5;

    {
        let leaves = vec![
            rand_tensor(vec![1, 2, 6, 5], &mut next),
            rand_tensor(vec![3, 2, 3, 3], &mut next),
            rand_tensor(vec![3], &mut next),
        ];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "conv2d stride 1",
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                Ok(g.sum(y))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![
            rand_tensor(vec![1, 2, 5, 5], &mut next),
            rand_tensor(vec![2, 2, 3, 3], &mut next),
            rand_tensor(vec![2], &mut next),
        ];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "conv2d stride 2",
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                Ok(g.sum(y))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        // Distinct values keep the pool argmax stable under perturbation.
        let vals: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37) % 1.9).collect();
        let leaves = vec![
            Tensor::new(vec![1, 2, 4, 4], vals)?,
            rand_tensor(vec![1, 2, 2, 2], &mut next),
        ];
        let probes = vec![(0, (0..32).collect::<Vec<_>>())];
        out.push(check_gradients(
            "max_pool2",
            |g, ids| {
                let y = g.max_pool2(ids[0])?;
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![
            rand_tensor(vec![1, 2, 3, 3], &mut next),
            rand_tensor(vec![1, 2, 6, 6], &mut next),
        ];
        let probes = vec![(0, (0..18).collect::<Vec<_>>())];
        out.push(check_gradients(
            "nearest_upsample2",
            |g, ids| {
                let y = g.nearest_upsample2(ids[0])?;
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![
            rand_tensor(vec![1, 2, 3, 3], &mut next),
            rand_tensor(vec![1, 1, 3, 3], &mut next),
            rand_tensor(vec![1, 3, 3, 3], &mut next),
        ];
        let probes = all_probes(&leaves[..2]);
        out.push(check_gradients(
            "concat_channels",
            |g, ids| {
                let y = g.concat_channels(ids[0], ids[1])?;
                let w = g.mul(y, ids[2])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        // Bounded away from the relu kink.
        let vals: Vec<f64> = (0..12)
            .map(|_| {
                let v = 0.1 + 0.9 * next();
                if next() > 0.5 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let leaves = vec![Tensor::new(vec![12], vals)?, rand_tensor(vec![12], &mut next)];
        let probes = vec![(0, (0..12).collect::<Vec<_>>())];
        out.push(check_gradients(
            "relu",
            |g, ids| {
                let y = g.relu(ids[0]);
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![rand_tensor(vec![10], &mut next), rand_tensor(vec![10], &mut next)];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "sigmoid",
            |g, ids| {
                let y = g.sigmoid(ids[0]);
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![rand_tensor(vec![8], &mut next), rand_tensor(vec![8], &mut next)];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "scale_shift",
            |g, ids| {
                let y = g.scale_shift(ids[0], 0.1, 1.0);
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![
            rand_tensor(vec![3, 4], &mut next),
            rand_tensor(vec![4, 2], &mut next),
            rand_tensor(vec![2], &mut next),
        ];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "dense",
            |g, ids| {
                let y = g.dense(ids[0], ids[1], ids[2])?;
                Ok(g.sum(y))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![
            rand_tensor(vec![2, 3, 2, 2], &mut next),
            rand_tensor(vec![2, 3], &mut next),
        ];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "global_avg_pool",
            |g, ids| {
                let y = g.global_avg_pool(ids[0])?;
                let w = g.mul(y, ids[1])?;
                Ok(g.sum(w))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let leaves = vec![rand_tensor(vec![9], &mut next), rand_tensor(vec![9], &mut next)];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "add/mul/scale",
            |g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let m = g.mul(s, ids[0])?;
                let sc = g.scale(m, 1.7);
                Ok(g.sum(sc))
            },
            &leaves,
            &probes,
            h,
            tol,
        )?);
    }
    {
        let pred = Tensor::new(vec![4, 1], (0..4).map(|_| 0.1 + 0.8 * next()).collect())?;
        let label = Tensor::new(vec![4, 1], vec![1.0, 0.0, 1.0, 0.0])?;
        let leaves = vec![pred, label];
        let probes = vec![(0, (0..4).collect::<Vec<_>>())];
        out.push(check_gradients(
            "bce_loss",
            |g, ids| g.bce_loss(ids[0], ids[1]),
            &leaves,
            &probes,
            1e-6,
            tol,
        )?);
    }
    {
        let leaves = vec![rand_tensor(vec![6], &mut next), rand_tensor(vec![6], &mut next)];
        let probes = all_probes(&leaves);
        out.push(check_gradients(
            "mse_loss",
            |g, ids| g.mse_loss(ids[0], ids[1]),
            &leaves,
            &probes,
            1e-6,
            tol,
        )?);
    }
    Ok(out)
}

/// Batch-level shadow layer check through the graph op.
pub fn check_shadow_batch(seed: u64, h: f64, tolerance: f64) -> Result<CheckResult> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(97);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let (n, hh, ww) = (2usize, 3usize, 4usize);
    let img = Tensor::new(
        vec![n, 3, hh, ww],
        (0..n * 3 * hh * ww).map(|_| 0.05 + 0.9 * next()).collect(),
    )?;
    let t = Tensor::new(
        vec![n, 1, hh, ww],
        (0..n * hh * ww).map(|_| 0.2 + 0.8 * next()).collect(),
    )?;
    let cfg = ShadowLayerConfig {
        a_value: 0.9,
        ..ShadowLayerConfig::default()
    };
    let weights = Tensor::new(
        vec![n, 3, hh, ww],
        (0..n * 3 * hh * ww).map(|_| next() - 0.5).collect(),
    )?;
    let probes = vec![
        (0usize, (0..img.numel()).step_by(5).collect::<Vec<_>>()),
        (1usize, (0..t.numel()).step_by(3).collect::<Vec<_>>()),
    ];
    check_gradients(
        "shadow layer (graph op)",
        |g, ids| {
            let j = g.shadow_removal(ids[0], ids[1], cfg)?;
            let weighted = g.mul(j, ids[2])?;
            Ok(g.sum(weighted))
        },
        &[img, t, weights],
        &probes,
        h,
        tolerance,
    )
}
