//! Training loops: the region net first on its own window labels, then
//! the pixel and fusion nets jointly against a frozen region map.

use crate::error::{Error, Result};
use crate::harness::seed_rng;
use crate::nn::{
    balanced_xent_loss, scalar_xent_loss, sgd_step, ModelParams, OptimState, Scalar, Tensor,
};
use crate::raster::{GrayMask, RasterImage};
use crate::region::{centerline_superpixels, superpixel_centroids};

use super::fusion::{fusion_backward, fusion_forward_t, fusion_input};
use super::pixel::{image_tensor, pad_image_to_multiple, pixel_backward, pixel_forward_t};
use super::region_net::{region_backward, region_forward_t, region_saliency, region_window};
use super::{segment_image, ModelConfigs, RegionNetConfig, SegmentationConfig};

/// One training pair. The mask must match the image size.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub stem: String,
    pub image: RasterImage,
    pub mask: GrayMask,
}

/// SGD settings shared by both training stages.
#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// Joint-stage settings.
#[derive(Debug, Clone, Copy)]
pub struct JointConfig {
    /// Weight of the auxiliary pixel-head loss.
    pub lambda: f64,
    /// Train only the fusion net, leaving pixel weights untouched.
    pub freeze_pixel: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambda: 1.0,
            freeze_pixel: false,
        }
    }
}

/// Mean losses of one joint epoch, recorded before each update.
#[derive(Debug, Clone, Copy)]
pub struct JointEpoch {
    pub total: f64,
    pub fused: f64,
    pub pixel: f64,
}

fn check_samples(samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    for s in samples {
        if (s.mask.width(), s.mask.height()) != (s.image.width(), s.image.height()) {
            return Err(Error::DimensionMismatch {
                context: "training sample",
                expected: format!("{}x{} mask", s.image.width(), s.image.height()),
                actual: format!("{} is {}x{}", s.stem, s.mask.width(), s.mask.height()),
            });
        }
    }
    Ok(())
}

/// Fraction of a region's pixels that are foreground in the mask.
fn region_foreground_share(
    pixel_regions: &[u32],
    region_count: usize,
    mask: &GrayMask,
) -> Vec<f64> {
    let mut fg = vec![0usize; region_count];
    let mut total = vec![0usize; region_count];
    for (i, &r) in pixel_regions.iter().enumerate() {
        total[r as usize] += 1;
        if mask.data()[i] == 1 {
            fg[r as usize] += 1;
        }
    }
    fg.iter()
        .zip(&total)
        .map(|(&f, &t)| f as f64 / t as f64)
        .collect()
}

/// Trains the region net alone. Every sampled superpixel becomes one
/// window whose label is whether its region is majority-foreground;
/// one SGD step per window. Returns the mean window loss per epoch.
pub fn train_region_net<S: Scalar>(
    cfg: &RegionNetConfig,
    params: &mut ModelParams<S>,
    samples: &[TrainSample],
    seg_cfg: &SegmentationConfig,
    optim: &OptimConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_samples(samples)?;

    // Windows and labels are fixed before the first epoch.
    let mut rng = seed_rng(seed, "train-region-windows");
    let mut windows: Vec<(Tensor<S>, bool)> = Vec::new();
    for s in samples {
        let seg = segment_image(&s.image, seg_cfg)?;
        let picks = centerline_superpixels(
            &seg.partition,
            &seg.labeling,
            seg_cfg.centerline_m,
            &mut rng,
        );
        let centroids = superpixel_centroids(&seg.labeling);
        let pixel_regions = seg.partition.pixel_region_map(&seg.labeling);
        let share = region_foreground_share(&pixel_regions, seg.partition.region_count(), &s.mask);
        for (region, ids) in picks.iter().enumerate() {
            let label = share[region] >= 0.5;
            for &id in ids {
                let (cx, cy) = centroids[id];
                let win = region_window(&s.image, cx, cy, cfg.window_size)?;
                windows.push((image_tensor::<S>(&win), label));
            }
        }
    }

    let mut state = OptimState::new(optim.learning_rate, optim.momentum);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sum = 0.0;
        for (x, label) in &windows {
            let trace = region_forward_t(cfg, params, x)?;
            let (loss, dldp) = scalar_xent_loss(trace.score(), *label);
            let grads = region_backward(cfg, params, &trace, dldp);
            sgd_step(params, &grads, &mut state);
            sum += loss;
        }
        epoch_losses.push(sum / windows.len() as f64);
    }
    Ok(epoch_losses)
}

/// Copies the top-left `h x w` window of a `1x1` channel tensor.
fn crop_tl<S: Scalar>(t: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let mut out = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set(0, 0, y, x, t.get(0, 0, y, x));
        }
    }
    out
}

/// Scatters a top-left crop gradient back into the full shape.
fn embed_tl<S: Scalar>(g: &Tensor<S>, full: [usize; 4]) -> Tensor<S> {
    let [_, _, h, w] = g.shape();
    let mut out = Tensor::zeros(full);
    for y in 0..h {
        for x in 0..w {
            out.set(0, 0, y, x, g.get(0, 0, y, x));
        }
    }
    out
}

/// Trains pixel and fusion nets together: per image, the fused map's
/// balanced loss plus `lambda` times the pixel map's, with the region
/// map precomputed from the frozen region net. One SGD step per image.
#[allow(clippy::too_many_arguments)]
pub fn train_joint<S: Scalar>(
    configs: &ModelConfigs,
    pixel_params: &mut ModelParams<S>,
    fusion_params: &mut ModelParams<S>,
    region_params: &ModelParams<S>,
    samples: &[TrainSample],
    seg_cfg: &SegmentationConfig,
    optim: &OptimConfig,
    joint: &JointConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<JointEpoch>> {
    configs.pixel.validate()?;
    configs.fusion.validate()?;
    check_samples(samples)?;

    // Per sample: padded image tensor for the pixel net, plus a
    // 5-channel fusion input whose pixel-map plane is rewritten every
    // step. The region map never changes.
    let stride = configs.pixel.stride_total();
    let mut rng = seed_rng(seed, "train-joint-windows");
    let mut inputs: Vec<(Tensor<S>, Tensor<S>)> = Vec::new();
    for s in samples {
        let seg = segment_image(&s.image, seg_cfg)?;
        let picks = centerline_superpixels(
            &seg.partition,
            &seg.labeling,
            seg_cfg.centerline_m,
            &mut rng,
        );
        let region_map = region_saliency::<S>(
            &configs.region,
            region_params,
            &s.image,
            &seg.partition,
            &seg.labeling,
            &picks,
        )?;
        let padded = pad_image_to_multiple(&s.image, stride);
        let x = image_tensor::<S>(&padded);
        let zero =
            crate::raster::SaliencyMap::from_fn(s.image.width(), s.image.height(), |_, _| 0.0);
        let fusion_x = fusion_input::<S>(&s.image, &zero, &region_map)?;
        inputs.push((x, fusion_x));
    }

    let mut pixel_state = OptimState::new(optim.learning_rate, optim.momentum);
    let mut fusion_state = OptimState::new(optim.learning_rate, optim.momentum);
    let mut epochs_out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sums = JointEpoch {
            total: 0.0,
            fused: 0.0,
            pixel: 0.0,
        };
        for (s, (x, fusion_x)) in samples.iter().zip(inputs.iter_mut()) {
            let (h, w) = (s.image.height(), s.image.width());
            let ptrace = pixel_forward_t(&configs.pixel, pixel_params, x)?;
            let pixel_map = crop_tl(&ptrace.prob, h, w);
            let (pixel_loss, pixel_grad) = balanced_xent_loss(&pixel_map, &s.mask)?;

            // Plane 3 of the fusion input carries the current pixel map.
            let plane = 3 * h * w..4 * h * w;
            fusion_x.data_mut()[plane.clone()].copy_from_slice(pixel_map.data());
            let ftrace = fusion_forward_t(&configs.fusion, fusion_params, fusion_x)?;
            let (fused_loss, fused_grad) = balanced_xent_loss(&ftrace.prob, &s.mask)?;
            let (fusion_grads, input_grad) =
                fusion_backward(&configs.fusion, fusion_params, &ftrace, &fused_grad);

            sums.fused += fused_loss;
            sums.pixel += pixel_loss;
            sums.total += fused_loss + joint.lambda * pixel_loss;

            if !joint.freeze_pixel {
                // The pixel map feels both losses: the fusion input
                // plane plus the weighted auxiliary head.
                let lambda = S::from_f64(joint.lambda);
                let mut map_grad = Tensor::zeros([1, 1, h, w]);
                for (o, (&a, &b)) in map_grad.data_mut().iter_mut().zip(
                    input_grad.data()[plane.clone()]
                        .iter()
                        .zip(pixel_grad.data()),
                ) {
                    *o = a + lambda * b;
                }
                let full_grad = embed_tl(&map_grad, ptrace.prob.shape());
                let pixel_grads = pixel_backward(&configs.pixel, pixel_params, &ptrace, &full_grad);
                sgd_step(pixel_params, &pixel_grads, &mut pixel_state);
            }
            sgd_step(fusion_params, &fusion_grads, &mut fusion_state);
        }
        let n = samples.len() as f64;
        epochs_out.push(JointEpoch {
            total: sums.total / n,
            fused: sums.fused / n,
            pixel: sums.pixel / n,
        });
    }
    Ok(epochs_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::pixel::tensor_map;
    use crate::nets::{
        init_fusion_params, init_pixel_params, init_region_params, FusionNetConfig, PixelNetConfig,
    };
    use crate::superpixel::SlicConfig;

    fn toy_samples(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let image = RasterImage::from_fn(16, 16, |x, y| {
                    let inside = (4..12).contains(&x) && (4..12).contains(&y);
                    if inside {
                        [220, 60 + (i * 10) as u8, 40]
                    } else {
                        [30, 40, 50 + (i * 5) as u8]
                    }
                });
                let mask =
                    GrayMask::from_fn(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y));
                TrainSample {
                    stem: format!("s{i}"),
                    image,
                    mask,
                }
            })
            .collect()
    }

    fn toy_seg() -> SegmentationConfig {
        SegmentationConfig {
            slic: SlicConfig {
                target_count: 16,
                ..SlicConfig::default()
            },
            ..SegmentationConfig::default()
        }
    }

    fn toy_configs() -> ModelConfigs {
        ModelConfigs {
            pixel: PixelNetConfig {
                block_channels: vec![4, 6],
                convs_per_block: 1,
                up_channels: 2,
            },
            region: RegionNetConfig {
                window_size: 11,
                conv_channels: vec![4],
                fc_widths: vec![6, 1],
            },
            fusion: FusionNetConfig {
                hidden_channels: vec![4],
            },
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfgs = toy_configs();
        let mut rng = seed_rng(1, "t");
        let mut rp: ModelParams<f64> = init_region_params(&cfgs.region, &mut rng).unwrap();
        let err = train_region_net(
            &cfgs.region,
            &mut rp,
            &[],
            &toy_seg(),
            &OptimConfig::default(),
            1,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let cfgs = toy_configs();
        let mut rng = seed_rng(2, "t");
        let mut rp: ModelParams<f64> = init_region_params(&cfgs.region, &mut rng).unwrap();
        let before = rp.clone();
        let losses = train_region_net(
            &cfgs.region,
            &mut rp,
            &toy_samples(2),
            &toy_seg(),
            &OptimConfig::default(),
            0,
            0,
        )
        .unwrap();
        assert!(losses.is_empty());
        assert_eq!(rp, before);
    }

    #[test]
    fn region_training_is_deterministic_and_reduces_loss() {
        let cfgs = toy_configs();
        let samples = toy_samples(3);
        let run = |seed: u64| {
            let mut rng = seed_rng(seed, "init");
            let mut rp: ModelParams<f64> = init_region_params(&cfgs.region, &mut rng).unwrap();
            let losses = train_region_net(
                &cfgs.region,
                &mut rp,
                &samples,
                &toy_seg(),
                &OptimConfig {
                    learning_rate: 0.05,
                    momentum: 0.9,
                },
                8,
                seed,
            )
            .unwrap();
            (rp, losses)
        };
        let (rp_a, losses_a) = run(5);
        let (rp_b, losses_b) = run(5);
        assert_eq!(rp_a, rp_b);
        assert_eq!(losses_a, losses_b);
        assert!(losses_a.last().unwrap() < losses_a.first().unwrap());
    }

    #[test]
    fn joint_training_freezes_region_and_reduces_loss() {
        let cfgs = toy_configs();
        let samples = toy_samples(2);
        let mut rng = seed_rng(7, "init");
        let mut pp: ModelParams<f64> = init_pixel_params(&cfgs.pixel, &mut rng).unwrap();
        let mut fp: ModelParams<f64> = init_fusion_params(&cfgs.fusion, &mut rng).unwrap();
        let rp: ModelParams<f64> = init_region_params(&cfgs.region, &mut rng).unwrap();
        let rp_before = rp.clone();
        let epochs = train_joint(
            &cfgs,
            &mut pp,
            &mut fp,
            &rp,
            &samples,
            &toy_seg(),
            &OptimConfig {
                learning_rate: 2e-3,
                momentum: 0.9,
            },
            &JointConfig::default(),
            6,
            7,
        )
        .unwrap();
        assert_eq!(rp, rp_before);
        assert_eq!(epochs.len(), 6);
        assert!(epochs.last().unwrap().total < epochs.first().unwrap().total);
    }

    #[test]
    fn frozen_pixel_with_zero_lambda_matches_fusion_only_oracle() {
        let cfgs = toy_configs();
        let samples = toy_samples(2);
        let mut rng = seed_rng(9, "init");
        let pp0: ModelParams<f64> = init_pixel_params(&cfgs.pixel, &mut rng).unwrap();
        let fp0: ModelParams<f64> = init_fusion_params(&cfgs.fusion, &mut rng).unwrap();
        let rp: ModelParams<f64> = init_region_params(&cfgs.region, &mut rng).unwrap();

        let mut pp = pp0.clone();
        let mut fp = fp0.clone();
        let optim = OptimConfig {
            learning_rate: 0.03,
            momentum: 0.9,
        };
        let epochs = train_joint(
            &cfgs,
            &mut pp,
            &mut fp,
            &rp,
            &samples,
            &toy_seg(),
            &optim,
            &JointConfig {
                lambda: 0.0,
                freeze_pixel: true,
            },
            4,
            21,
        )
        .unwrap();
        assert_eq!(pp, pp0);

        // Oracle: train only the fusion net against fixed maps, in the
        // same order with the same update rule.
        let stride = cfgs.pixel.stride_total();
        let mut rng2 = seed_rng(21, "train-joint-windows");
        let mut oracle_fp = fp0.clone();
        let mut state = OptimState::new(optim.learning_rate, optim.momentum);
        let mut fixed: Vec<(Tensor<f64>, &GrayMask)> = Vec::new();
        for s in &samples {
            let seg = segment_image(&s.image, &toy_seg()).unwrap();
            let picks = centerline_superpixels(
                &seg.partition,
                &seg.labeling,
                toy_seg().centerline_m,
                &mut rng2,
            );
            let region_map = region_saliency::<f64>(
                &cfgs.region,
                &rp,
                &s.image,
                &seg.partition,
                &seg.labeling,
                &picks,
            )
            .unwrap();
            let padded = pad_image_to_multiple(&s.image, stride);
            let ptrace = pixel_forward_t(&cfgs.pixel, &pp0, &image_tensor::<f64>(&padded)).unwrap();
            let pixel_map = tensor_map(&crop_tl(&ptrace.prob, s.image.height(), s.image.width()));
            let x = fusion_input::<f64>(&s.image, &pixel_map, &region_map).unwrap();
            fixed.push((x, &s.mask));
        }
        let mut oracle_losses = Vec::new();
        for _ in 0..4 {
            let mut sum = 0.0;
            for (x, mask) in &fixed {
                let tr = fusion_forward_t(&cfgs.fusion, &oracle_fp, x).unwrap();
                let (loss, grad) = balanced_xent_loss(&tr.prob, mask).unwrap();
                let (grads, _) = fusion_backward(&cfgs.fusion, &oracle_fp, &tr, &grad);
                sgd_step(&mut oracle_fp, &grads, &mut state);
                sum += loss;
            }
            oracle_losses.push(sum / fixed.len() as f64);
        }
        assert_eq!(fp, oracle_fp);
        for (e, o) in epochs.iter().zip(&oracle_losses) {
            assert!((e.fused - o).abs() < 1e-12);
        }
    }
}
