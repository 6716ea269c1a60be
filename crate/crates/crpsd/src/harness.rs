//! Batch front end: dataset ingestion, run configuration, and the
//! train/predict/eval/regions commands behind the CLI. Every command
//! writes deterministic files; warnings go to stderr only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, evaluate_image, DatasetEval, FixationSet, ImageEval, PR_THRESHOLDS,
};
use crate::nets::{
    init_fusion_params, init_pixel_params, init_region_params, segment_image, train_joint,
    train_region_net, FusionNetConfig, JointConfig, ModelConfigs, OptimConfig, PixelNetConfig,
    RegionNetConfig, SegmentationConfig, TrainSample, TrainedModel,
};
use crate::raster::{load_image, load_mask, SaliencyMap, MASK_THRESHOLD_DEFAULT};
use crate::region::{export_regions_png, ClusterConfig};
use crate::superpixel::SlicConfig;

/// Deterministic per-stage RNG: the stream depends on the master seed
/// and the stage name, so stages are decorrelated but reproducible.
pub fn seed_rng(master: u64, stage: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(stage.as_bytes());
    hasher.update(master.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Caps the worker pool from the `CRPSD_THREADS` environment variable.
/// Call once at startup; later calls are ignored.
pub fn init_threads() {
    if let Ok(raw) = std::env::var("CRPSD_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring invalid CRPSD_THREADS value {raw:?}"),
        }
    }
}

/// Syntax-checked `key=value` lines: blank lines and `#` comments are
/// skipped, keys must be unique. Returns (line number, key, value).
fn kv_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config {
                line,
                message: format!("expected key=value, got {trimmed:?}"),
            });
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                message: "empty key".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key {key}"),
            });
        }
        out.push((line, key, value.trim().to_string()));
    }
    Ok(out)
}

/// Parses `key=value` lines into a map. `#` starts a comment line.
pub fn parse_kv_lines(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(kv_entries(text)?
        .into_iter()
        .map(|(_, k, v)| (k, v))
        .collect())
}

/// One image/mask pair, with an optional fixation file.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fixations: Option<PathBuf>,
}

/// Stem-matched dataset listing in lexicographic stem order.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Unmatched files, one message each.
    pub warnings: Vec<String>,
}

/// Maps file stem to full path for every regular file in `dir`,
/// skipping dotfiles. Duplicate stems are an error.
fn stem_listing(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let path = entry.path();
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let Some(stem) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if out.insert(stem.clone(), path).is_some() {
            return Err(Error::DuplicateStem {
                stem,
                dir: dir.to_path_buf(),
            });
        }
    }
    Ok(out)
}

/// Pairs images and masks by file stem (case-sensitive). Unmatched
/// files become warnings; an empty intersection is an error.
pub fn ingest(
    image_dir: &Path,
    mask_dir: &Path,
    fixation_dir: Option<&Path>,
) -> Result<DatasetManifest> {
    let images = stem_listing(image_dir)?;
    let masks = stem_listing(mask_dir)?;
    let fixations = match fixation_dir {
        Some(dir) => Some(stem_listing(dir)?),
        None => None,
    };

    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for (stem, image) in &images {
        match masks.get(stem) {
            Some(mask) => {
                let fix = match &fixations {
                    Some(map) => {
                        let f = map.get(stem).cloned();
                        if f.is_none() {
                            warnings.push(format!("no fixation file for {stem}"));
                        }
                        f
                    }
                    None => None,
                };
                entries.push(ManifestEntry {
                    stem: stem.clone(),
                    image: image.clone(),
                    mask: mask.clone(),
                    fixations: fix,
                });
            }
            None => warnings.push(format!("image {stem} has no mask")),
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            warnings.push(format!("mask {stem} has no image"));
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(DatasetManifest { entries, warnings })
}

/// Flat key=value run configuration with every pipeline default.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_name: String,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub fixation_dir: Option<PathBuf>,
    /// Where predictions are written and read; defaults to `output_dir`.
    pub pred_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Model file; defaults to `output_dir/model.crpw`.
    pub model_path: Option<PathBuf>,
    pub seed: u64,
    pub mask_threshold: u8,
    pub superpixel_count: usize,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    pub knn_k: usize,
    pub cluster_stop: f64,
    pub affinity_bandwidth: f64,
    pub centerline_m: usize,
    pub pixel_blocks: Vec<usize>,
    pub pixel_convs_per_block: usize,
    pub pixel_up_channels: usize,
    pub region_window: usize,
    pub region_convs: Vec<usize>,
    pub region_fc: Vec<usize>,
    pub fusion_channels: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs_region: usize,
    pub epochs_joint: usize,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let slic = SlicConfig::default();
        let cluster = ClusterConfig::default();
        let models = ModelConfigs::default();
        RunConfig {
            dataset_name: "dataset".into(),
            image_dir: PathBuf::new(),
            mask_dir: PathBuf::new(),
            fixation_dir: None,
            pred_dir: None,
            output_dir: PathBuf::from("out"),
            model_path: None,
            seed: 0,
            mask_threshold: MASK_THRESHOLD_DEFAULT,
            superpixel_count: slic.target_count,
            slic_compactness: slic.compactness,
            slic_iterations: slic.iterations,
            knn_k: cluster.k,
            cluster_stop: cluster.stop_threshold,
            affinity_bandwidth: cluster.bandwidth,
            centerline_m: crate::region::CENTERLINE_M_DEFAULT,
            pixel_blocks: models.pixel.block_channels,
            pixel_convs_per_block: models.pixel.convs_per_block,
            pixel_up_channels: models.pixel.up_channels,
            region_window: models.region.window_size,
            region_convs: models.region.conv_channels,
            region_fc: models.region.fc_widths,
            fusion_channels: models.fusion.hidden_channels,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs_region: 5,
            epochs_joint: 5,
            lambda: 1.0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse {key}={value}"),
    })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| Error::Config {
                line,
                message: format!("cannot parse {key}={value}"),
            })
        })
        .collect()
}

impl RunConfig {
    /// Parses a config file body. Unknown keys are rejected with their
    /// line number; `image_dir` and `mask_dir` are required.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut have_image = false;
        let mut have_mask = false;
        for (line, key, value) in kv_entries(text)? {
            match key.as_str() {
                "dataset_name" => cfg.dataset_name = value,
                "image_dir" => {
                    cfg.image_dir = PathBuf::from(value);
                    have_image = true;
                }
                "mask_dir" => {
                    cfg.mask_dir = PathBuf::from(value);
                    have_mask = true;
                }
                "fixation_dir" => cfg.fixation_dir = Some(PathBuf::from(value)),
                "pred_dir" => cfg.pred_dir = Some(PathBuf::from(value)),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "model_path" => cfg.model_path = Some(PathBuf::from(value)),
                "seed" => cfg.seed = parse_value(line, &key, &value)?,
                "mask_threshold" => cfg.mask_threshold = parse_value(line, &key, &value)?,
                "superpixel_count" => cfg.superpixel_count = parse_value(line, &key, &value)?,
                "slic_compactness" => cfg.slic_compactness = parse_value(line, &key, &value)?,
                "slic_iterations" => cfg.slic_iterations = parse_value(line, &key, &value)?,
                "knn_k" => cfg.knn_k = parse_value(line, &key, &value)?,
                "cluster_stop" => cfg.cluster_stop = parse_value(line, &key, &value)?,
                "affinity_bandwidth" => cfg.affinity_bandwidth = parse_value(line, &key, &value)?,
                "centerline_m" => cfg.centerline_m = parse_value(line, &key, &value)?,
                "pixel_blocks" => cfg.pixel_blocks = parse_list(line, &key, &value)?,
                "pixel_convs_per_block" => {
                    cfg.pixel_convs_per_block = parse_value(line, &key, &value)?
                }
                "pixel_up_channels" => cfg.pixel_up_channels = parse_value(line, &key, &value)?,
                "region_window" => cfg.region_window = parse_value(line, &key, &value)?,
                "region_convs" => cfg.region_convs = parse_list(line, &key, &value)?,
                "region_fc" => cfg.region_fc = parse_list(line, &key, &value)?,
                "fusion_channels" => cfg.fusion_channels = parse_list(line, &key, &value)?,
                "learning_rate" => cfg.learning_rate = parse_value(line, &key, &value)?,
                "momentum" => cfg.momentum = parse_value(line, &key, &value)?,
                "epochs_region" => cfg.epochs_region = parse_value(line, &key, &value)?,
                "epochs_joint" => cfg.epochs_joint = parse_value(line, &key, &value)?,
                "lambda" => cfg.lambda = parse_value(line, &key, &value)?,
                other => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key {other}"),
                    })
                }
            }
        }
        if !have_image {
            return Err(Error::config("image_dir is required"));
        }
        if !have_mask {
            return Err(Error::config("mask_dir is required"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            slic: SlicConfig {
                target_count: self.superpixel_count,
                compactness: self.slic_compactness,
                iterations: self.slic_iterations,
            },
            cluster: ClusterConfig {
                k: self.knn_k,
                stop_threshold: self.cluster_stop,
                bandwidth: self.affinity_bandwidth,
            },
            centerline_m: self.centerline_m,
        }
    }

    pub fn model_configs(&self) -> ModelConfigs {
        ModelConfigs {
            pixel: PixelNetConfig {
                block_channels: self.pixel_blocks.clone(),
                convs_per_block: self.pixel_convs_per_block,
                up_channels: self.pixel_up_channels,
            },
            region: RegionNetConfig {
                window_size: self.region_window,
                conv_channels: self.region_convs.clone(),
                fc_widths: self.region_fc.clone(),
            },
            fusion: FusionNetConfig {
                hidden_channels: self.fusion_channels.clone(),
            },
        }
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    fn model_file(&self) -> PathBuf {
        self.model_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.crpw"))
    }

    fn maps_dir(&self) -> PathBuf {
        self.pred_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_samples(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<TrainSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(TrainSample {
                stem: e.stem.clone(),
                image: load_image(&e.image)?,
                mask: load_mask(&e.mask, cfg.mask_threshold)?,
            })
        })
        .collect()
}

/// Trains region, then pixel+fusion, and writes the model plus a
/// per-epoch loss CSV into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let manifest = ingest(&cfg.image_dir, &cfg.mask_dir, None)?;
    report_warnings(&manifest.warnings);
    let samples = load_samples(cfg, &manifest)?;

    let configs = cfg.model_configs();
    let seg = cfg.segmentation();
    let mut rng = seed_rng(cfg.seed, "init");
    let mut pixel_params = init_pixel_params::<f32>(&configs.pixel, &mut rng)?;
    let mut region_params = init_region_params::<f32>(&configs.region, &mut rng)?;
    let mut fusion_params = init_fusion_params::<f32>(&configs.fusion, &mut rng)?;

    let region_losses = train_region_net(
        &configs.region,
        &mut region_params,
        &samples,
        &seg,
        &cfg.optim(),
        cfg.epochs_region,
        cfg.seed,
    )?;
    let joint_epochs = train_joint(
        &configs,
        &mut pixel_params,
        &mut fusion_params,
        &region_params,
        &samples,
        &seg,
        &cfg.optim(),
        &JointConfig {
            lambda: cfg.lambda,
            freeze_pixel: false,
        },
        cfg.epochs_joint,
        cfg.seed,
    )?;

    let model = TrainedModel {
        configs,
        seed: cfg.seed,
        pixel_params,
        region_params,
        fusion_params,
    };
    model.save(&cfg.model_file())?;

    let mut csv = String::from("stage,epoch,total,fused,pixel\n");
    for (i, loss) in region_losses.iter().enumerate() {
        let _ = writeln!(csv, "region,{i},{loss},,");
    }
    for (i, e) in joint_epochs.iter().enumerate() {
        let _ = writeln!(csv, "joint,{i},{},{},{}", e.total, e.fused, e.pixel);
    }
    fs::write(cfg.output_dir.join("losses.csv"), csv)?;
    Ok(())
}

/// Map filename suffixes written by prediction.
pub const MAP_SUFFIXES: [&str; 3] = [".rsd.png", ".psd.png", ".crpsd.png"];

/// Predicts all three maps for every manifest image and writes them as
/// 8-bit grayscale PNGs named `{stem}.rsd.png`, `{stem}.psd.png`, and
/// `{stem}.crpsd.png`.
pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let model = TrainedModel::<f32>::load(&cfg.model_file())?;
    let manifest = ingest(&cfg.image_dir, &cfg.mask_dir, None)?;
    report_warnings(&manifest.warnings);
    let maps_dir = cfg.maps_dir();
    fs::create_dir_all(&maps_dir)?;
    let seg = cfg.segmentation();

    let predictions: Vec<(String, crate::nets::Prediction)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.image)?;
            let p = model.predict(&img, &seg)?;
            Ok((e.stem.clone(), p))
        })
        .collect::<Result<_>>()?;

    for (stem, p) in &predictions {
        p.region
            .save_png(&maps_dir.join(format!("{stem}.rsd.png")))?;
        p.pixel
            .save_png(&maps_dir.join(format!("{stem}.psd.png")))?;
        p.fused
            .save_png(&maps_dir.join(format!("{stem}.crpsd.png")))?;
    }
    Ok(())
}

/// Space-separated `x y` fixation coordinates, one per line; `#`
/// comments allowed.
pub fn load_fixation_points(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let coords = (parts.next(), parts.next(), parts.next());
        let (Some(xs), Some(ys), None) = coords else {
            return Err(Error::invalid(format!(
                "{}:{}: expected \"x y\"",
                path.display(),
                idx + 1
            )));
        };
        let parse = |s: &str| {
            s.parse::<u32>().map_err(|_| {
                Error::invalid(format!(
                    "{}:{}: bad coordinate {s}",
                    path.display(),
                    idx + 1
                ))
            })
        };
        points.push((parse(xs)?, parse(ys)?));
    }
    Ok(points)
}

/// The prediction file evaluated for a stem: the fused map, or a plain
/// `{stem}.png` fallback so external map directories can be scored.
fn prediction_path(maps_dir: &Path, stem: &str) -> Option<PathBuf> {
    let fused = maps_dir.join(format!("{stem}.crpsd.png"));
    if fused.is_file() {
        return Some(fused);
    }
    let plain = maps_dir.join(format!("{stem}.png"));
    if plain.is_file() {
        return Some(plain);
    }
    None
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Report<'a> {
    schema_version: u32,
    dataset: &'a str,
    image_count: usize,
    excluded: &'a [String],
    images: &'a [ImageEval],
    means: &'a DatasetEval,
}

/// Scores the predicted maps against the masks and writes the JSON
/// report, the mean PR curve as CSV, and two SVG plots.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let manifest = ingest(&cfg.image_dir, &cfg.mask_dir, cfg.fixation_dir.as_deref())?;
    report_warnings(&manifest.warnings);
    fs::create_dir_all(&cfg.output_dir)?;
    let maps_dir = cfg.maps_dir();

    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| prediction_path(&maps_dir, &e.stem).is_none())
        .map(|e| e.stem.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    // Fixation points are shared across images (each image's negatives
    // come from all the others), so load them up front.
    let fixation_points: Vec<Option<Vec<(u32, u32)>>> = manifest
        .entries
        .iter()
        .map(|e| e.fixations.as_deref().map(load_fixation_points).transpose())
        .collect::<Result<_>>()?;

    struct Outcome {
        stem: String,
        eval: Option<ImageEval>,
    }
    let outcomes: Vec<Outcome> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let map = SaliencyMap::load_png(&prediction_path(&maps_dir, &e.stem).unwrap())?;
            let mask = load_mask(&e.mask, cfg.mask_threshold)?;
            if mask.positives() == 0 {
                return Ok(Outcome {
                    stem: e.stem.clone(),
                    eval: None,
                });
            }
            let (w, h) = (mask.width(), mask.height());
            let own = match &fixation_points[i] {
                Some(points) => Some(FixationSet::new(points.clone(), w, h)?),
                None => None,
            };
            let negatives = own.as_ref().and_then(|_| {
                let pooled: Vec<(u32, u32)> = fixation_points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .flat_map(|(_, p)| p.iter().flatten().copied())
                    .filter(|&(x, y)| (x as usize) < w && (y as usize) < h)
                    .collect();
                FixationSet::new(pooled, w, h).ok()
            });
            let fixations = match (&own, &negatives) {
                (Some(p), Some(n)) => Some((p, n)),
                _ => None,
            };
            let eval = evaluate_image(&e.stem, &map, &mask, fixations)?;
            Ok(Outcome {
                stem: e.stem.clone(),
                eval: Some(eval),
            })
        })
        .collect::<Result<_>>()?;

    let mut excluded = Vec::new();
    let mut images = Vec::new();
    for o in outcomes {
        match o.eval {
            Some(e) => images.push(e),
            None => {
                eprintln!("warning: {} has an empty mask; excluded", o.stem);
                excluded.push(o.stem);
            }
        }
    }
    let means = aggregate(&images)?;

    let report = Report {
        schema_version: 1,
        dataset: &cfg.dataset_name,
        image_count: images.len(),
        excluded: &excluded,
        images: &images,
        means: &means,
    };
    let mut json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
    json.push('\n');
    fs::write(cfg.output_dir.join("report.json"), json)?;

    let mut csv = String::from("tau,precision,recall\n");
    for t in 0..PR_THRESHOLDS {
        let _ = writeln!(
            csv,
            "{t},{},{}",
            means.curve.precision()[t],
            means.curve.recall()[t]
        );
    }
    fs::write(cfg.output_dir.join("pr_curve.csv"), csv)?;

    fs::write(cfg.output_dir.join("pr_curve.svg"), pr_curve_svg(&means))?;
    fs::write(cfg.output_dir.join("fbeta.svg"), fbeta_svg(&means))?;
    Ok(())
}

/// Segments every image and writes the region visualization PNGs plus a
/// region-count CSV.
pub fn cmd_regions(cfg: &RunConfig) -> Result<()> {
    let manifest = ingest(&cfg.image_dir, &cfg.mask_dir, None)?;
    report_warnings(&manifest.warnings);
    fs::create_dir_all(&cfg.output_dir)?;
    let seg_cfg = cfg.segmentation();

    let rows: Vec<(String, usize, usize)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.image)?;
            let seg = segment_image(&img, &seg_cfg)?;
            export_regions_png(
                &seg.partition,
                &seg.labeling,
                &cfg.output_dir.join(format!("{}.regions.png", e.stem)),
            )?;
            Ok((
                e.stem.clone(),
                seg.labeling.count(),
                seg.partition.region_count(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("image,superpixelCount,regionCount\n");
    for (stem, sp, regions) in &rows {
        let _ = writeln!(csv, "{stem},{sp},{regions}");
    }
    fs::write(cfg.output_dir.join("regions.csv"), csv)?;
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const SVG_MARGIN: f64 = 56.0;

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n"
        ),
        w = SVG_W,
        h = SVG_H,
        cx = SVG_W / 2.0,
        title = title
    )
}

/// Line plot of the dataset-mean PR curve, recall on x.
fn pr_curve_svg(means: &DatasetEval) -> String {
    let plot_w = SVG_W - 2.0 * SVG_MARGIN;
    let plot_h = SVG_H - 2.0 * SVG_MARGIN;
    let to_x = |r: f64| SVG_MARGIN + r * plot_w;
    let to_y = |p: f64| SVG_H - SVG_MARGIN - p * plot_h;

    let mut svg = svg_header("Precision vs recall, dataset mean");
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            to_x(f),
            to_y(0.0),
            to_x(f),
            to_y(1.0)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            to_x(0.0),
            to_y(f),
            to_x(1.0),
            to_y(f)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{:.1}</text>",
            to_x(f),
            SVG_H - SVG_MARGIN + 18.0,
            f
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{:.1}</text>",
            SVG_MARGIN - 8.0,
            to_y(f) + 4.0,
            f
        );
    }
    let points: Vec<String> = (0..PR_THRESHOLDS)
        .map(|t| {
            format!(
                "{:.2},{:.2}",
                to_x(means.curve.recall()[t]),
                to_y(means.curve.precision()[t])
            )
        })
        .collect();
    let _ = writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c33\" stroke-width=\"2\"/>",
        points.join(" ")
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">recall</text>",
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        svg,
        concat!(
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" ",
            "transform=\"rotate(-90 16 {:.1})\">precision</text>"
        ),
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of the dataset F-beta summaries.
fn fbeta_svg(means: &DatasetEval) -> String {
    let bars = [
        ("mean F\u{3b2}", means.mean_f_beta),
        ("adaptive F\u{3b2}", means.adaptive_f_beta),
        ("max F\u{3b2}", means.max_f_beta),
        ("weighted F\u{3b2}", means.weighted_f_beta),
    ];
    let plot_h = SVG_H - 2.0 * SVG_MARGIN;
    let slot = (SVG_W - 2.0 * SVG_MARGIN) / bars.len() as f64;
    let bar_w = slot * 0.6;

    let mut svg = svg_header("F-measure summary, dataset mean");
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let y = SVG_H - SVG_MARGIN - f * plot_h;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>",
            SVG_MARGIN,
            SVG_W - SVG_MARGIN
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{:.1}</text>",
            SVG_MARGIN - 8.0,
            y + 4.0,
            f
        );
    }
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = SVG_MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let h = value.clamp(0.0, 1.0) * plot_h;
        let y = SVG_H - SVG_MARGIN - h;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#48a\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{value:.3}</text>",
            x + bar_w / 2.0,
            y - 6.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{label}</text>",
            x + bar_w / 2.0,
            SVG_H - SVG_MARGIN + 18.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn seed_rng_depends_on_stage_and_seed() {
        let a = seed_rng(1, "x").next_u64();
        let b = seed_rng(1, "x").next_u64();
        let c = seed_rng(1, "y").next_u64();
        let d = seed_rng(2, "x").next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn kv_lines_parse_comments_and_reject_junk() {
        let map = parse_kv_lines("# comment\nfoo=1\n\nbar = two \n").unwrap();
        assert_eq!(map.get("foo").unwrap(), "1");
        assert_eq!(map.get("bar").unwrap(), "two");
        assert!(matches!(
            parse_kv_lines("foo=1\nfoo=2"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(
            parse_kv_lines("not a pair"),
            Err(Error::Config { line: 1, .. })
        ));
    }

    #[test]
    fn run_config_rejects_unknown_keys_with_line() {
        let text = "image_dir=a\nmask_dir=b\nbogus=1\n";
        match RunConfig::parse(text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn run_config_defaults_match_module_defaults() {
        let cfg = RunConfig::parse("image_dir=a\nmask_dir=b\n").unwrap();
        assert_eq!(cfg.superpixel_count, 300);
        assert_eq!(cfg.knn_k, 15);
        assert_eq!(cfg.cluster_stop, -0.04);
        assert_eq!(cfg.centerline_m, 5);
        assert_eq!(cfg.region_window, 51);
        assert_eq!(cfg.mask_threshold, 128);
        assert_eq!(cfg.pixel_blocks, vec![16, 32, 64, 64]);
    }

    #[test]
    fn run_config_requires_dirs() {
        assert!(RunConfig::parse("mask_dir=b\n").is_err());
        assert!(RunConfig::parse("image_dir=a\n").is_err());
    }

    #[test]
    fn ingest_pairs_by_stem_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let masks = dir.path().join("gt");
        fs::create_dir_all(&images).unwrap();
        fs::create_dir_all(&masks).unwrap();
        let img = crate::raster::RasterImage::from_fn(4, 4, |_, _| [1, 2, 3]);
        for stem in ["a", "b", "lonely"] {
            crate::raster::save_image(&img, &images.join(format!("{stem}.png"))).unwrap();
        }
        for stem in ["a", "b", "extra"] {
            crate::raster::save_image(&img, &masks.join(format!("{stem}.png"))).unwrap();
        }
        let manifest = ingest(&images, &masks, None).unwrap();
        let stems: Vec<&str> = manifest.entries.iter().map(|e| e.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b"]);
        assert_eq!(manifest.warnings.len(), 2);
    }

    #[test]
    fn ingest_rejects_duplicate_stems() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let masks = dir.path().join("gt");
        fs::create_dir_all(&images).unwrap();
        fs::create_dir_all(&masks).unwrap();
        let img = crate::raster::RasterImage::from_fn(4, 4, |_, _| [9, 9, 9]);
        crate::raster::save_image(&img, &images.join("a.png")).unwrap();
        fs::write(images.join("a.txt"), "x").unwrap();
        crate::raster::save_image(&img, &masks.join("a.png")).unwrap();
        assert!(matches!(
            ingest(&images, &masks, None),
            Err(Error::DuplicateStem { .. })
        ));
    }

    #[test]
    fn fixation_files_parse_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        fs::write(&path, "# fixations\n3 4\n10 2\n").unwrap();
        assert_eq!(load_fixation_points(&path).unwrap(), vec![(3, 4), (10, 2)]);
        fs::write(&path, "3\n").unwrap();
        assert!(load_fixation_points(&path).is_err());
    }
}
