//! Fully convolutional pixel-scoring network: stacked conv/pool blocks,
//! bilinear-initialized transposed-conv upsampling of the last two
//! block outputs, channel concatenation, and a 1x1 sigmoid head.

use rand::Rng;

use super::init::{bilinear_tconv, he_conv, zero_bias};
use super::PixelNetConfig;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, conv2d, conv2d_backward, crop_center, crop_center_backward, max_pool2,
    max_pool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels,
    transposed_conv2d, transposed_conv2d_backward, ModelParams, PoolIndices, Scalar, Tensor,
};
use crate::raster::{RasterImage, SaliencyMap};

/// Fresh parameters for the given architecture. Tensor names follow
/// `block{i}.conv{j}`, `up0`/`up1` (second-to-last and last block
/// branches), and `head`.
pub fn init_pixel_params<S: Scalar>(
    cfg: &PixelNetConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let mut in_c = 3;
    for (b, &out_c) in cfg.block_channels.iter().enumerate() {
        let mut c = in_c;
        for j in 0..cfg.convs_per_block {
            params.insert(
                format!("block{b}.conv{j}.weight"),
                he_conv(out_c, c, 3, 3, rng),
            );
            params.insert(format!("block{b}.conv{j}.bias"), zero_bias(out_c));
            c = out_c;
        }
        in_c = out_c;
    }
    let blocks = cfg.block_channels.len();
    for (slot, bi) in [(0usize, blocks - 2), (1, blocks - 1)] {
        let stride = 1usize << (bi + 1);
        params.insert(
            format!("up{slot}.weight"),
            bilinear_tconv(cfg.block_channels[bi], cfg.up_channels, 2 * stride),
        );
    }
    params.insert(
        "head.weight".to_string(),
        he_conv(1, 2 * cfg.up_channels, 1, 1, rng),
    );
    params.insert("head.bias".to_string(), zero_bias(1));
    Ok(params)
}

/// Intermediate activations kept for the backward pass.
pub struct PixelTrace<S> {
    /// Per block: input of each conv, each conv's pre-activation, and
    /// the pooling bookkeeping.
    conv_inputs: Vec<Vec<Tensor<S>>>,
    conv_zs: Vec<Vec<Tensor<S>>>,
    pools: Vec<PoolIndices>,
    /// Post-pool output of every block.
    block_outs: Vec<Tensor<S>>,
    /// Uncropped upsampled shapes, for scattering gradients back.
    raw_shapes: [[usize; 4]; 2],
    /// Input of the 1x1 head.
    cat: Tensor<S>,
    /// Final probabilities.
    pub(crate) prob: Tensor<S>,
}

impl<S> PixelTrace<S> {
    /// Predicted probability map, shape `[1, 1, H, W]`.
    pub fn prob(&self) -> &Tensor<S> {
        &self.prob
    }
}

/// Traced forward pass over an image tensor whose spatial dims are
/// divisible by the total stride.
pub fn pixel_forward_t<S: Scalar>(
    cfg: &PixelNetConfig,
    params: &ModelParams<S>,
    x: &Tensor<S>,
) -> Result<PixelTrace<S>> {
    cfg.validate()?;
    let [_, c, h, w] = x.shape();
    if c != 3 {
        return Err(Error::DimensionMismatch {
            context: "pixel_forward",
            expected: "3 channels".into(),
            actual: format!("{c}"),
        });
    }
    let stride_total = cfg.stride_total();
    if h % stride_total != 0 || w % stride_total != 0 || h == 0 || w == 0 {
        return Err(Error::DimensionMismatch {
            context: "pixel_forward",
            expected: format!("spatial dims divisible by {stride_total}"),
            actual: format!("{h}x{w}"),
        });
    }

    let blocks = cfg.block_channels.len();
    let mut conv_inputs = Vec::with_capacity(blocks);
    let mut conv_zs = Vec::with_capacity(blocks);
    let mut pools = Vec::with_capacity(blocks);
    let mut block_outs = Vec::with_capacity(blocks);
    let mut cur = x.clone();
    for b in 0..blocks {
        let mut inputs = Vec::with_capacity(cfg.convs_per_block);
        let mut zs = Vec::with_capacity(cfg.convs_per_block);
        for j in 0..cfg.convs_per_block {
            let weight = params.get(&format!("block{b}.conv{j}.weight"));
            let bias = params.get(&format!("block{b}.conv{j}.bias"));
            let z = conv2d(&cur, weight, bias.data(), 1, 1)?;
            let a = relu(&z);
            inputs.push(cur);
            zs.push(z);
            cur = a;
        }
        let (pooled, idx) = max_pool2(&cur);
        conv_inputs.push(inputs);
        conv_zs.push(zs);
        pools.push(idx);
        block_outs.push(pooled.clone());
        cur = pooled;
    }

    let mut branches = Vec::with_capacity(2);
    let mut raw_shapes = [[0usize; 4]; 2];
    for (slot, bi) in [(0usize, blocks - 2), (1, blocks - 1)] {
        let stride = 1usize << (bi + 1);
        let weight = params.get(&format!("up{slot}.weight"));
        let raw = transposed_conv2d(&block_outs[bi], weight, stride)?;
        raw_shapes[slot] = raw.shape();
        branches.push(crop_center(&raw, h, w));
    }
    let cat = concat_channels(&[&branches[0], &branches[1]])?;
    let z = conv2d(
        &cat,
        params.get("head.weight"),
        params.get("head.bias").data(),
        1,
        0,
    )?;
    let prob = sigmoid(&z);
    Ok(PixelTrace {
        conv_inputs,
        conv_zs,
        pools,
        block_outs,
        raw_shapes,
        cat,
        prob,
    })
}

/// Backward pass: gradients of every parameter given `dL/dprob`.
pub fn pixel_backward<S: Scalar>(
    cfg: &PixelNetConfig,
    params: &ModelParams<S>,
    trace: &PixelTrace<S>,
    grad_prob: &Tensor<S>,
) -> ModelParams<S> {
    let mut grads = ModelParams::new();
    let g = sigmoid_backward(&trace.prob, grad_prob);
    let (g_cat, g_head_w, g_head_b) =
        conv2d_backward(&trace.cat, params.get("head.weight"), 1, 0, &g);
    grads.insert("head.weight", g_head_w);
    grads.insert(
        "head.bias",
        Tensor::from_vec([1, 1, 1, 1], g_head_b).expect("head bias"),
    );

    let parts = split_channels(&g_cat, &[cfg.up_channels, cfg.up_channels]);
    let blocks = cfg.block_channels.len();
    let mut branch_grads: Vec<Option<Tensor<S>>> = vec![None; blocks];
    for (slot, bi) in [(0usize, blocks - 2), (1, blocks - 1)] {
        let stride = 1usize << (bi + 1);
        let g_raw = crop_center_backward(&parts[slot], trace.raw_shapes[slot]);
        let weight = params.get(&format!("up{slot}.weight"));
        let (g_in, g_w) = transposed_conv2d_backward(&trace.block_outs[bi], weight, stride, &g_raw);
        grads.insert(format!("up{slot}.weight"), g_w);
        branch_grads[bi] = Some(match branch_grads[bi].take() {
            Some(acc) => acc.add(&g_in),
            None => g_in,
        });
    }

    let mut from_next: Option<Tensor<S>> = None;
    for b in (0..blocks).rev() {
        let g_out = match (branch_grads[b].take(), from_next.take()) {
            (Some(a), Some(b)) => a.add(&b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("every block feeds a branch or a deeper block"),
        };
        let mut g_cur = max_pool2_backward(&trace.pools[b], &g_out);
        for j in (0..cfg.convs_per_block).rev() {
            let g_z = relu_backward(&trace.conv_zs[b][j], &g_cur);
            let weight = params.get(&format!("block{b}.conv{j}.weight"));
            let (g_in, g_w, g_b) = conv2d_backward(&trace.conv_inputs[b][j], weight, 1, 1, &g_z);
            grads.insert(format!("block{b}.conv{j}.weight"), g_w);
            let out_c = g_b.len();
            grads.insert(
                format!("block{b}.conv{j}.bias"),
                Tensor::from_vec([1, 1, 1, out_c], g_b).expect("bias grad"),
            );
            g_cur = g_in;
        }
        from_next = Some(g_cur);
    }
    grads
}

/// Scales an image to `[0, 1]` RGB planes in tensor form.
pub fn image_tensor<S: Scalar>(img: &RasterImage) -> Tensor<S> {
    let (w, h) = (img.width(), img.height());
    let mut t = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel(x, y);
            for (c, &v) in px.iter().enumerate() {
                t.set(0, c, y, x, S::from_f64(f64::from(v) / 255.0));
            }
        }
    }
    t
}

/// Extracts a `1x1xHxW` probability tensor into a saliency map.
pub fn tensor_map<S: Scalar>(t: &Tensor<S>) -> SaliencyMap {
    let [_, _, h, w] = t.shape();
    SaliencyMap::from_fn(w, h, |x, y| t.get(0, 0, y, x).to_f64().clamp(0.0, 1.0))
}

/// Replicates the last row/column until both dims are multiples of
/// `multiple`.
pub(crate) fn pad_image_to_multiple(img: &RasterImage, multiple: usize) -> RasterImage {
    let w = img.width().div_ceil(multiple) * multiple;
    let h = img.height().div_ceil(multiple) * multiple;
    if (w, h) == (img.width(), img.height()) {
        return img.clone();
    }
    RasterImage::from_fn(w, h, |x, y| {
        img.pixel(x.min(img.width() - 1), y.min(img.height() - 1))
    })
}

/// Scores an image whose dimensions already match the net's stride.
pub fn pixel_forward<S: Scalar>(
    cfg: &PixelNetConfig,
    params: &ModelParams<S>,
    img: &RasterImage,
) -> Result<SaliencyMap> {
    let trace = pixel_forward_t(cfg, params, &image_tensor::<S>(img))?;
    Ok(tensor_map(&trace.prob))
}

/// Scores an image of any size: pads by replication to the stride
/// multiple, scores, and crops the map back.
pub fn pixel_predict<S: Scalar>(
    cfg: &PixelNetConfig,
    params: &ModelParams<S>,
    img: &RasterImage,
) -> Result<SaliencyMap> {
    let padded = pad_image_to_multiple(img, cfg.stride_total());
    let trace = pixel_forward_t(cfg, params, &image_tensor::<S>(&padded))?;
    let full = tensor_map(&trace.prob);
    if (full.width(), full.height()) == (img.width(), img.height()) {
        return Ok(full);
    }
    Ok(SaliencyMap::from_fn(img.width(), img.height(), |x, y| {
        full.get(x, y)
    }))
}
