//! Fusion network: stacks the image with the pixel and region saliency
//! maps into a 5-channel input and refines them with a small all-conv
//! sigmoid net.

use rand::Rng;

use super::init::{he_conv, zero_bias};
use super::pixel::{image_tensor, tensor_map};
use super::FusionNetConfig;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, conv2d, conv2d_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    ModelParams, Scalar, Tensor,
};
use crate::raster::{RasterImage, SaliencyMap};

/// Fresh parameters: one `conv{i}` per layer, 3x3 throughout.
pub fn init_fusion_params<S: Scalar>(
    cfg: &FusionNetConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let chans = cfg.layer_channels();
    let mut params = ModelParams::new();
    for i in 0..chans.len() - 1 {
        params.insert(
            format!("conv{i}.weight"),
            he_conv(chans[i + 1], chans[i], 3, 3, rng),
        );
        params.insert(format!("conv{i}.bias"), zero_bias(chans[i + 1]));
    }
    Ok(params)
}

fn map_tensor<S: Scalar>(map: &SaliencyMap) -> Tensor<S> {
    let (w, h) = (map.width(), map.height());
    let mut t = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set(0, 0, y, x, S::from_f64(map.get(x, y)));
        }
    }
    t
}

/// Builds the 5-channel input: RGB in `[0, 1]`, then the pixel map,
/// then the region map.
pub fn fusion_input<S: Scalar>(
    img: &RasterImage,
    pixel_map: &SaliencyMap,
    region_map: &SaliencyMap,
) -> Result<Tensor<S>> {
    let dims = (img.width(), img.height());
    for (name, map) in [("pixel", pixel_map), ("region", region_map)] {
        if (map.width(), map.height()) != dims {
            return Err(Error::DimensionMismatch {
                context: "fusion input",
                expected: format!("{}x{} maps", dims.0, dims.1),
                actual: format!("{name} map {}x{}", map.width(), map.height()),
            });
        }
    }
    let rgb = image_tensor::<S>(img);
    let p = map_tensor::<S>(pixel_map);
    let r = map_tensor::<S>(region_map);
    concat_channels(&[&rgb, &p, &r])
}

/// Activations kept for the backward pass.
pub struct FusionTrace<S> {
    inputs: Vec<Tensor<S>>,
    zs: Vec<Tensor<S>>,
    pub(crate) prob: Tensor<S>,
}

impl<S> FusionTrace<S> {
    /// Predicted probability map, shape `[1, 1, H, W]`.
    pub fn prob(&self) -> &Tensor<S> {
        &self.prob
    }
}

/// Traced forward over a prebuilt 5-channel input.
pub fn fusion_forward_t<S: Scalar>(
    cfg: &FusionNetConfig,
    params: &ModelParams<S>,
    x: &Tensor<S>,
) -> Result<FusionTrace<S>> {
    cfg.validate()?;
    if x.shape()[1] != 5 {
        return Err(Error::DimensionMismatch {
            context: "fusion net",
            expected: "5 channels".into(),
            actual: format!("{}", x.shape()[1]),
        });
    }
    let layers = cfg.layer_channels().len() - 1;
    let mut inputs = Vec::with_capacity(layers);
    let mut zs = Vec::with_capacity(layers);
    let mut cur = x.clone();
    for i in 0..layers {
        let z = conv2d(
            &cur,
            params.get(&format!("conv{i}.weight")),
            params.get(&format!("conv{i}.bias")).data(),
            1,
            1,
        )?;
        inputs.push(cur);
        cur = if i + 1 < layers { relu(&z) } else { z.clone() };
        zs.push(z);
    }
    let prob = sigmoid(&cur);
    Ok(FusionTrace { inputs, zs, prob })
}

/// Parameter gradients plus the gradient on the 5-channel input.
pub fn fusion_backward<S: Scalar>(
    cfg: &FusionNetConfig,
    params: &ModelParams<S>,
    trace: &FusionTrace<S>,
    grad_prob: &Tensor<S>,
) -> (ModelParams<S>, Tensor<S>) {
    let mut grads = ModelParams::new();
    let layers = cfg.layer_channels().len() - 1;
    let mut g = sigmoid_backward(&trace.prob, grad_prob);
    for i in (0..layers).rev() {
        let weight = params.get(&format!("conv{i}.weight"));
        let (g_in, g_w, g_b) = conv2d_backward(&trace.inputs[i], weight, 1, 1, &g);
        let width = g_b.len();
        grads.insert(format!("conv{i}.weight"), g_w);
        grads.insert(
            format!("conv{i}.bias"),
            Tensor::from_vec([1, 1, 1, width], g_b).expect("bias grad"),
        );
        g = if i > 0 {
            relu_backward(&trace.zs[i - 1], &g_in)
        } else {
            g_in
        };
    }
    (grads, g)
}

/// Fused saliency map for an image and its two intermediate maps.
pub fn fuse_forward<S: Scalar>(
    cfg: &FusionNetConfig,
    params: &ModelParams<S>,
    img: &RasterImage,
    pixel_map: &SaliencyMap,
    region_map: &SaliencyMap,
) -> Result<SaliencyMap> {
    let x = fusion_input::<S>(img, pixel_map, region_map)?;
    let trace = fusion_forward_t(cfg, params, &x)?;
    Ok(tensor_map(&trace.prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> FusionNetConfig {
        FusionNetConfig {
            hidden_channels: vec![4],
        }
    }

    fn toy_maps(w: usize, h: usize) -> (RasterImage, SaliencyMap, SaliencyMap) {
        let img = RasterImage::from_fn(w, h, |x, y| [(x * 30) as u8, (y * 40) as u8, 128]);
        let p = SaliencyMap::from_fn(w, h, |x, _| x as f64 / w as f64);
        let r = SaliencyMap::from_fn(w, h, |_, y| y as f64 / h as f64);
        (img, p, r)
    }

    #[test]
    fn output_matches_image_size() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: ModelParams<f64> = init_fusion_params(&cfg, &mut rng).unwrap();
        let (img, p, r) = toy_maps(7, 5);
        let fused = fuse_forward(&cfg, &params, &img, &p, &r).unwrap();
        assert_eq!((fused.width(), fused.height()), (7, 5));
    }

    #[test]
    fn mismatched_map_sizes_are_rejected() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: ModelParams<f64> = init_fusion_params(&cfg, &mut rng).unwrap();
        let (img, p, _) = toy_maps(7, 5);
        let bad = SaliencyMap::from_fn(6, 5, |_, _| 0.0);
        assert!(fuse_forward(&cfg, &params, &img, &p, &bad).is_err());
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params: ModelParams<f64> = init_fusion_params(&cfg, &mut rng).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        for n in names {
            for v in params.get_mut(&n).data_mut() {
                *v = 0.0;
            }
        }
        let (img, p, r) = toy_maps(4, 4);
        let fused = fuse_forward(&cfg, &params, &img, &p, &r).unwrap();
        for &v in fused.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn no_hidden_layers_is_a_single_conv() {
        let cfg = FusionNetConfig {
            hidden_channels: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params: ModelParams<f64> = init_fusion_params(&cfg, &mut rng).unwrap();
        assert_eq!(params.len(), 2);
        assert_eq!(params.get("conv0.weight").shape(), [1, 5, 3, 3]);
        let (img, p, r) = toy_maps(4, 3);
        fuse_forward(&cfg, &params, &img, &p, &r).unwrap();
    }
}
