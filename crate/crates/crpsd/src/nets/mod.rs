//! The three networks and their training procedures: a fully
//! convolutional pixel-scoring net, a window-level region-scoring net,
//! and a small fusion net that combines both maps with the image.

mod fusion;
mod init;
mod pixel;
mod region_net;
mod train;

pub use fusion::{
    fuse_forward, fusion_backward, fusion_forward_t, fusion_input, init_fusion_params, FusionTrace,
};
pub use init::bilinear_kernel;
pub use pixel::{
    image_tensor, init_pixel_params, pixel_backward, pixel_forward, pixel_forward_t, pixel_predict,
    tensor_map, PixelTrace,
};
pub use region_net::{init_region_params, region_net_forward, region_saliency, region_window};
pub use train::{train_joint, train_region_net, JointConfig, JointEpoch, OptimConfig, TrainSample};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, Scalar};
use crate::raster::{RasterImage, SaliencyMap};
use crate::region::{centerline_superpixels, cluster_regions, ClusterConfig, RegionPartition};
use crate::superpixel::{slic_segment, SlicConfig, SuperpixelLabeling};

/// Architecture of the pixel-scoring net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelNetConfig {
    /// Output channels of each conv block; one 2x pooling per block.
    pub block_channels: Vec<usize>,
    /// Convolutions (3x3, He-initialized) per block.
    pub convs_per_block: usize,
    /// Channels each upsampling branch emits before the 1x1 head.
    pub up_channels: usize,
}

impl Default for PixelNetConfig {
    fn default() -> Self {
        PixelNetConfig {
            block_channels: vec![16, 32, 64, 64],
            convs_per_block: 2,
            up_channels: 8,
        }
    }
}

impl PixelNetConfig {
    /// Total downsampling factor.
    pub fn stride_total(&self) -> usize {
        1 << self.block_channels.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.block_channels.len() < 2 {
            return Err(Error::invalid(
                "pixel net needs at least 2 blocks; the head reads the last two",
            ));
        }
        if self.convs_per_block == 0 || self.up_channels == 0 {
            return Err(Error::invalid("pixel net layer counts must be positive"));
        }
        Ok(())
    }
}

/// Architecture of the window-scoring net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionNetConfig {
    /// Side length every context window is resized to.
    pub window_size: usize,
    /// Channels of the conv/pool feature stack.
    pub conv_channels: Vec<usize>,
    /// Widths of the fully connected tail; the last must be 1.
    pub fc_widths: Vec<usize>,
}

impl Default for RegionNetConfig {
    fn default() -> Self {
        RegionNetConfig {
            window_size: 51,
            conv_channels: vec![16, 32, 64],
            fc_widths: vec![64, 1],
        }
    }
}

impl RegionNetConfig {
    /// Spatial extent left after the conv/pool stack.
    pub(crate) fn tail_extent(&self) -> usize {
        let mut s = self.window_size;
        for _ in 0..self.conv_channels.len() {
            s = s.div_ceil(2);
        }
        s
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.conv_channels.is_empty() || self.fc_widths.is_empty() {
            return Err(Error::invalid("region net layer lists must be non-empty"));
        }
        if *self.fc_widths.last().unwrap() != 1 {
            return Err(Error::invalid("region net must end in a single scalar"));
        }
        Ok(())
    }
}

/// Architecture of the fusion net: 5 input channels, one output map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionNetConfig {
    /// Hidden channels between the fixed 5-channel input and 1-channel
    /// output; layer count is `hidden_channels.len() + 1`.
    pub hidden_channels: Vec<usize>,
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        FusionNetConfig {
            hidden_channels: vec![16, 16],
        }
    }
}

impl FusionNetConfig {
    /// Channel counts of every layer, input to output.
    pub(crate) fn layer_channels(&self) -> Vec<usize> {
        let mut c = vec![5];
        c.extend_from_slice(&self.hidden_channels);
        c.push(1);
        c
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden_channels.contains(&0) {
            return Err(Error::invalid("fusion channels must be positive"));
        }
        Ok(())
    }
}

/// Configs of all three networks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelConfigs {
    pub pixel: PixelNetConfig,
    pub region: RegionNetConfig,
    pub fusion: FusionNetConfig,
}

/// Segmentation and window-selection parameters shared by training and
/// prediction.
#[derive(Debug, Clone)]
pub struct SegmentationConfig {
    pub slic: SlicConfig,
    pub cluster: ClusterConfig,
    /// Context windows scored per region.
    pub centerline_m: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            slic: SlicConfig::default(),
            cluster: ClusterConfig::default(),
            centerline_m: crate::region::CENTERLINE_M_DEFAULT,
        }
    }
}

/// A trained pipeline: three parameter sets plus the configs and the
/// seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<S> {
    pub configs: ModelConfigs,
    pub seed: u64,
    pub pixel_params: ModelParams<S>,
    pub region_params: ModelParams<S>,
    pub fusion_params: ModelParams<S>,
}

/// The three saliency maps predicted for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Region-level map: piecewise constant on regions.
    pub region: SaliencyMap,
    /// Pixel-level map.
    pub pixel: SaliencyMap,
    /// Fused final map.
    pub fused: SaliencyMap,
}

/// Region stage output for one image.
pub struct Segmentation {
    pub labeling: SuperpixelLabeling,
    pub partition: RegionPartition,
    pub merges: Vec<crate::region::MergeStep>,
}

/// Runs superpixels plus clustering for one image.
pub fn segment_image(img: &RasterImage, cfg: &SegmentationConfig) -> Result<Segmentation> {
    let labeling = slic_segment(img, &cfg.slic)?;
    let lab = crate::raster::rgb_to_lab(img);
    let features = crate::superpixel::superpixel_features(&lab, &labeling);
    let (partition, merges) = cluster_regions(&features, img.width(), img.height(), &cfg.cluster)?;
    Ok(Segmentation {
        labeling,
        partition,
        merges,
    })
}

impl<S: Scalar> TrainedModel<S> {
    /// Runs the full pipeline on one image. The window-selection seed
    /// is derived from the model's training seed, so predictions are
    /// reproducible from the saved model alone.
    pub fn predict(&self, img: &RasterImage, seg_cfg: &SegmentationConfig) -> Result<Prediction> {
        let seg = segment_image(img, seg_cfg)?;
        let mut rng = crate::harness::seed_rng(self.seed, "predict-windows");
        let picks = centerline_superpixels(
            &seg.partition,
            &seg.labeling,
            seg_cfg.centerline_m,
            &mut rng,
        );
        let region = region_saliency::<S>(
            &self.configs.region,
            &self.region_params,
            img,
            &seg.partition,
            &seg.labeling,
            &picks,
        )?;
        let pixel = pixel_predict::<S>(&self.configs.pixel, &self.pixel_params, img)?;
        let fused = fuse_forward::<S>(
            &self.configs.fusion,
            &self.fusion_params,
            img,
            &pixel,
            &region,
        )?;
        Ok(Prediction {
            region,
            pixel,
            fused,
        })
    }

    /// Writes the parameters next to a plain-text sidecar
    /// (same stem, `.cfg`) recording the architecture and seed.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut merged = ModelParams::<S>::new();
        merged.adopt("pixel", self.pixel_params.clone());
        merged.adopt("region", self.region_params.clone());
        merged.adopt("fusion", self.fusion_params.clone());
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        merged.save(&mut file)?;
        use std::io::Write as _;
        file.flush()?;
        drop(file);

        let sidecar = sidecar_path(path);
        let mut text = String::new();
        let join = |v: &[usize]| {
            v.iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        text.push_str(&format!(
            "pixel_blocks={}\n",
            join(&self.configs.pixel.block_channels)
        ));
        text.push_str(&format!(
            "pixel_convs_per_block={}\n",
            self.configs.pixel.convs_per_block
        ));
        text.push_str(&format!(
            "pixel_up_channels={}\n",
            self.configs.pixel.up_channels
        ));
        text.push_str(&format!(
            "region_window={}\n",
            self.configs.region.window_size
        ));
        text.push_str(&format!(
            "region_convs={}\n",
            join(&self.configs.region.conv_channels)
        ));
        text.push_str(&format!(
            "region_fc={}\n",
            join(&self.configs.region.fc_widths)
        ));
        text.push_str(&format!(
            "fusion_channels={}\n",
            join(&self.configs.fusion.hidden_channels)
        ));
        text.push_str(&format!("seed={}\n", self.seed));
        fs::write(sidecar, text)?;
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("cfg")
}

impl TrainedModel<f32> {
    /// Loads a model saved by [`TrainedModel::save`], checking that the
    /// stored tensors match the sidecar's architecture.
    pub fn load(path: &Path) -> Result<TrainedModel<f32>> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let sidecar = sidecar_path(path);
        if !sidecar.exists() {
            return Err(Error::MissingFile(sidecar));
        }
        let text = fs::read_to_string(&sidecar)?;
        let kv = crate::harness::parse_kv_lines(&text)?;
        let get = |key: &str| -> Result<String> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| Error::config(format!("sidecar is missing {key}")))
        };
        let list = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad list entry {p}")))
                })
                .collect()
        };
        let configs = ModelConfigs {
            pixel: PixelNetConfig {
                block_channels: list(&get("pixel_blocks")?)?,
                convs_per_block: get("pixel_convs_per_block")?
                    .parse()
                    .map_err(|_| Error::config("bad pixel_convs_per_block"))?,
                up_channels: get("pixel_up_channels")?
                    .parse()
                    .map_err(|_| Error::config("bad pixel_up_channels"))?,
            },
            region: RegionNetConfig {
                window_size: get("region_window")?
                    .parse()
                    .map_err(|_| Error::config("bad region_window"))?,
                conv_channels: list(&get("region_convs")?)?,
                fc_widths: list(&get("region_fc")?)?,
            },
            fusion: FusionNetConfig {
                hidden_channels: list(&get("fusion_channels")?)?,
            },
        };
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::config("bad seed"))?;

        let file = std::io::BufReader::new(fs::File::open(path)?);
        let merged = ModelParams::load(file)?;
        let pixel_params = merged.extract("pixel");
        let region_params = merged.extract("region");
        let fusion_params = merged.extract("fusion");
        if pixel_params.len() + region_params.len() + fusion_params.len() != merged.len() {
            return Err(Error::CorruptModel(
                "tensors outside the pixel/region/fusion namespaces".into(),
            ));
        }

        // Shape check against a fresh initialization of the declared
        // architecture.
        let mut check_rng = crate::harness::seed_rng(0, "shape-check");
        let reference: [(&str, ModelParams<f32>); 3] = [
            ("pixel", init_pixel_params(&configs.pixel, &mut check_rng)?),
            (
                "region",
                init_region_params(&configs.region, &mut check_rng)?,
            ),
            (
                "fusion",
                init_fusion_params(&configs.fusion, &mut check_rng)?,
            ),
        ];
        for ((name, reference), loaded) in
            reference
                .iter()
                .zip([&pixel_params, &region_params, &fusion_params])
        {
            if reference.len() != loaded.len()
                || !reference
                    .iter()
                    .all(|(k, t)| loaded.contains(k) && loaded.get(k).shape() == t.shape())
            {
                return Err(Error::CorruptModel(format!(
                    "{name} tensors do not match the sidecar architecture"
                )));
            }
        }

        Ok(TrainedModel {
            configs,
            seed,
            pixel_params,
            region_params,
            fusion_params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn tiny_model() -> TrainedModel<f32> {
        let configs = ModelConfigs {
            pixel: PixelNetConfig {
                block_channels: vec![4, 8],
                convs_per_block: 1,
                up_channels: 2,
            },
            region: RegionNetConfig {
                window_size: 15,
                conv_channels: vec![4],
                fc_widths: vec![8, 1],
            },
            fusion: FusionNetConfig {
                hidden_channels: vec![4],
            },
        };
        let mut rng = crate::harness::seed_rng(11, "init");
        TrainedModel {
            pixel_params: init_pixel_params(&configs.pixel, &mut rng).unwrap(),
            region_params: init_region_params(&configs.region, &mut rng).unwrap(),
            fusion_params: init_fusion_params(&configs.fusion, &mut rng).unwrap(),
            configs,
            seed: 11,
        }
    }

    #[test]
    fn model_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crpw");
        let model = tiny_model();
        model.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn load_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crpw");
        let mut model = tiny_model();
        // Declare a different head width than the stored tensors.
        model
            .fusion_params
            .insert("conv0.weight", Tensor::zeros([9, 5, 3, 3]));
        model.save(&path).unwrap();
        assert!(matches!(
            TrainedModel::load(&path),
            Err(Error::CorruptModel(_))
        ));
    }

    #[test]
    fn load_requires_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crpw");
        let model = tiny_model();
        model.save(&path).unwrap();
        std::fs::remove_file(dir.path().join("model.cfg")).unwrap();
        assert!(matches!(
            TrainedModel::load(&path),
            Err(Error::MissingFile(_))
        ));
    }
}
