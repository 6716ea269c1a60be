//! Region-scoring network: a conv/pool stack over a fixed-size context
//! window followed by a fully connected tail realized as convolutions,
//! ending in one sigmoid score.

use rand::Rng;

use super::init::{he_conv, zero_bias};
use super::pixel::image_tensor;
use super::RegionNetConfig;
use crate::error::{Error, Result};
use crate::nn::{
    conv2d, conv2d_backward, max_pool2, max_pool2_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, ModelParams, PoolIndices, Scalar, Tensor,
};
use crate::raster::{resize_bilinear, PlanarImage, RasterImage, SaliencyMap};
use crate::region::{superpixel_centroids, RegionPartition};
use crate::superpixel::SuperpixelLabeling;

/// Fresh parameters for the given architecture: `conv{i}` for the
/// feature stack, `fc{i}` for the tail.
pub fn init_region_params<S: Scalar>(
    cfg: &RegionNetConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let mut in_c = 3;
    for (i, &out_c) in cfg.conv_channels.iter().enumerate() {
        params.insert(format!("conv{i}.weight"), he_conv(out_c, in_c, 3, 3, rng));
        params.insert(format!("conv{i}.bias"), zero_bias(out_c));
        in_c = out_c;
    }
    let tail = cfg.tail_extent();
    for (i, &width) in cfg.fc_widths.iter().enumerate() {
        let k = if i == 0 { tail } else { 1 };
        params.insert(format!("fc{i}.weight"), he_conv(width, in_c, k, k, rng));
        params.insert(format!("fc{i}.bias"), zero_bias(width));
        in_c = width;
    }
    Ok(params)
}

/// Square context window centered on `(cx, cy)` that contains the whole
/// image, resampled to `out_size`. Out-of-image area takes the image's
/// mean color.
pub fn region_window(
    img: &RasterImage,
    cx: usize,
    cy: usize,
    out_size: usize,
) -> Result<RasterImage> {
    let (w, h) = (img.width(), img.height());
    if cx >= w || cy >= h {
        return Err(Error::CenterOutOfBounds {
            x: cx as i64,
            y: cy as i64,
            width: w,
            height: h,
        });
    }
    if out_size == 0 {
        return Err(Error::invalid("window size must be positive"));
    }
    let r = cx.max(w - 1 - cx).max(cy).max(h - 1 - cy);
    let side = 2 * r + 1;
    let mean = img.mean_rgb();
    let mut window = PlanarImage::zeros(side, side, 3);
    window.fill(&mean);
    for wy in 0..side {
        let sy = cy as i64 - r as i64 + wy as i64;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for wx in 0..side {
            let sx = cx as i64 - r as i64 + wx as i64;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let px = img.pixel(sx as usize, sy as usize);
            for (c, &v) in px.iter().enumerate() {
                window.set(c, wx, wy, f64::from(v));
            }
        }
    }
    Ok(resize_bilinear(&window, out_size, out_size)?.to_raster())
}

/// Activations kept for the backward pass.
pub(crate) struct RegionTrace<S> {
    conv_inputs: Vec<Tensor<S>>,
    conv_zs: Vec<Tensor<S>>,
    pools: Vec<PoolIndices>,
    fc_inputs: Vec<Tensor<S>>,
    fc_zs: Vec<Tensor<S>>,
    /// `1x1x1x1` probability.
    pub(crate) prob: Tensor<S>,
}

impl<S: Scalar> RegionTrace<S> {
    pub(crate) fn score(&self) -> f64 {
        self.prob.data()[0].to_f64()
    }
}

/// Traced forward over a window tensor of the configured size.
pub(crate) fn region_forward_t<S: Scalar>(
    cfg: &RegionNetConfig,
    params: &ModelParams<S>,
    x: &Tensor<S>,
) -> Result<RegionTrace<S>> {
    cfg.validate()?;
    let [_, c, h, w] = x.shape();
    if c != 3 || h != cfg.window_size || w != cfg.window_size {
        return Err(Error::DimensionMismatch {
            context: "region_net",
            expected: format!("3x{0}x{0} window", cfg.window_size),
            actual: format!("{c}x{h}x{w}"),
        });
    }
    let mut conv_inputs = Vec::new();
    let mut conv_zs = Vec::new();
    let mut pools = Vec::new();
    let mut cur = x.clone();
    for i in 0..cfg.conv_channels.len() {
        let z = conv2d(
            &cur,
            params.get(&format!("conv{i}.weight")),
            params.get(&format!("conv{i}.bias")).data(),
            1,
            1,
        )?;
        let a = relu(&z);
        let (pooled, idx) = max_pool2(&a);
        conv_inputs.push(cur);
        conv_zs.push(z);
        pools.push(idx);
        cur = pooled;
    }
    let mut fc_inputs = Vec::new();
    let mut fc_zs = Vec::new();
    let n_fc = cfg.fc_widths.len();
    for i in 0..n_fc {
        let z = conv2d(
            &cur,
            params.get(&format!("fc{i}.weight")),
            params.get(&format!("fc{i}.bias")).data(),
            1,
            0,
        )?;
        fc_inputs.push(cur);
        cur = if i + 1 < n_fc { relu(&z) } else { z.clone() };
        fc_zs.push(z);
    }
    let prob = sigmoid(&cur);
    Ok(RegionTrace {
        conv_inputs,
        conv_zs,
        pools,
        fc_inputs,
        fc_zs,
        prob,
    })
}

/// Parameter gradients given `dL/dscore`.
pub(crate) fn region_backward<S: Scalar>(
    cfg: &RegionNetConfig,
    params: &ModelParams<S>,
    trace: &RegionTrace<S>,
    grad_score: f64,
) -> ModelParams<S> {
    let mut grads = ModelParams::new();
    let mut grad_prob = Tensor::zeros([1, 1, 1, 1]);
    grad_prob.set(0, 0, 0, 0, S::from_f64(grad_score));
    let mut g = sigmoid_backward(&trace.prob, &grad_prob);

    for i in (0..cfg.fc_widths.len()).rev() {
        let weight = params.get(&format!("fc{i}.weight"));
        let (g_in, g_w, g_b) = conv2d_backward(&trace.fc_inputs[i], weight, 1, 0, &g);
        let width = g_b.len();
        grads.insert(format!("fc{i}.weight"), g_w);
        grads.insert(
            format!("fc{i}.bias"),
            Tensor::from_vec([1, 1, 1, width], g_b).expect("bias grad"),
        );
        g = if i > 0 {
            relu_backward(&trace.fc_zs[i - 1], &g_in)
        } else {
            g_in
        };
    }
    for i in (0..cfg.conv_channels.len()).rev() {
        let g_pool = max_pool2_backward(&trace.pools[i], &g);
        let g_z = relu_backward(&trace.conv_zs[i], &g_pool);
        let weight = params.get(&format!("conv{i}.weight"));
        let (g_in, g_w, g_b) = conv2d_backward(&trace.conv_inputs[i], weight, 1, 1, &g_z);
        let width = g_b.len();
        grads.insert(format!("conv{i}.weight"), g_w);
        grads.insert(
            format!("conv{i}.bias"),
            Tensor::from_vec([1, 1, 1, width], g_b).expect("bias grad"),
        );
        g = g_in;
    }
    grads
}

/// Scores one context window; the window must already have the
/// configured size.
pub fn region_net_forward<S: Scalar>(
    cfg: &RegionNetConfig,
    params: &ModelParams<S>,
    window: &RasterImage,
) -> Result<f64> {
    let trace = region_forward_t(cfg, params, &image_tensor::<S>(window))?;
    Ok(trace.score())
}

/// Region-level saliency map: each region's score is the mean of its
/// sampled superpixels' window scores and is painted over the whole
/// region, so the map is constant on regions.
pub fn region_saliency<S: Scalar>(
    cfg: &RegionNetConfig,
    params: &ModelParams<S>,
    img: &RasterImage,
    partition: &RegionPartition,
    labeling: &SuperpixelLabeling,
    picks: &[Vec<usize>],
) -> Result<SaliencyMap> {
    if picks.len() != partition.region_count() {
        return Err(Error::invalid("one superpixel pick list per region"));
    }
    let centroids = superpixel_centroids(labeling);
    let mut region_scores = Vec::with_capacity(picks.len());
    for ids in picks {
        if ids.is_empty() {
            return Err(Error::invalid("every region needs at least one pick"));
        }
        let mut sum = 0.0;
        for &id in ids {
            let (cx, cy) = centroids[id];
            let window = region_window(img, cx, cy, cfg.window_size)?;
            sum += region_net_forward(cfg, params, &window)?;
        }
        region_scores.push(sum / ids.len() as f64);
    }
    let map = partition.pixel_region_map(labeling);
    let w = labeling.width();
    Ok(SaliencyMap::from_fn(w, labeling.height(), |x, y| {
        region_scores[map[y * w + x] as usize]
    }))
}
