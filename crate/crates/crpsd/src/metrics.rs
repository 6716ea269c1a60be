//! Evaluation protocol: threshold-sweep PR curves, F-beta, MAE, the
//! structure-aware weighted F-beta, Otsu-adaptive scores, and shuffled
//! AUC for fixation data.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{otsu_threshold, GrayMask, SaliencyMap};

/// Default beta-squared for F-beta scores.
pub const F_BETA_SQ_DEFAULT: f64 = 0.3;

/// Thresholds swept by a PR curve.
pub const PR_THRESHOLDS: usize = 256;

/// Precision/recall at every 8-bit binarization threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    precision: Vec<f64>,
    recall: Vec<f64>,
}

impl PRCurve {
    fn new(precision: Vec<f64>, recall: Vec<f64>) -> Self {
        assert_eq!(precision.len(), PR_THRESHOLDS);
        assert_eq!(recall.len(), PR_THRESHOLDS);
        PRCurve { precision, recall }
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn recall(&self) -> &[f64] {
        &self.recall
    }

    /// `(precision, recall)` at threshold `tau`.
    pub fn point(&self, tau: u8) -> (f64, f64) {
        (self.precision[tau as usize], self.recall[tau as usize])
    }

    /// Mean F-beta over all thresholds.
    pub fn mean_f_beta(&self, beta_sq: f64) -> f64 {
        let sum: f64 = (0..PR_THRESHOLDS)
            .map(|t| f_beta(self.precision[t], self.recall[t], beta_sq))
            .sum();
        sum / PR_THRESHOLDS as f64
    }

    /// Best F-beta over all thresholds.
    pub fn max_f_beta(&self, beta_sq: f64) -> f64 {
        (0..PR_THRESHOLDS)
            .map(|t| f_beta(self.precision[t], self.recall[t], beta_sq))
            .fold(0.0, f64::max)
    }
}

fn check_shapes(map: &SaliencyMap, gt: &GrayMask, context: &'static str) -> Result<()> {
    if (map.width(), map.height()) != (gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch {
            context,
            expected: format!("{}x{}", gt.width(), gt.height()),
            actual: format!("{}x{}", map.width(), map.height()),
        });
    }
    Ok(())
}

/// PR curve over all 256 thresholds; a pixel is predicted salient at
/// threshold `tau` when its 8-bit quantization is `>= tau`. Precision
/// with no predicted pixels is 1.
pub fn pr_curve(map: &SaliencyMap, gt: &GrayMask) -> Result<PRCurve> {
    check_shapes(map, gt, "pr_curve")?;
    let pos = gt.positives();
    if pos == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut hist_all = [0u64; 256];
    let mut hist_fg = [0u64; 256];
    for (i, &s) in map.data().iter().enumerate() {
        let q = crate::raster::quantize(s) as usize;
        hist_all[q] += 1;
        if gt.data()[i] == 1 {
            hist_fg[q] += 1;
        }
    }
    let mut precision = vec![0.0; PR_THRESHOLDS];
    let mut recall = vec![0.0; PR_THRESHOLDS];
    let mut pred = 0u64;
    let mut tp = 0u64;
    for tau in (0..PR_THRESHOLDS).rev() {
        pred += hist_all[tau];
        tp += hist_fg[tau];
        precision[tau] = if pred == 0 {
            1.0
        } else {
            tp as f64 / pred as f64
        };
        recall[tau] = tp as f64 / pos as f64;
    }
    Ok(PRCurve::new(precision, recall))
}

/// Weighted harmonic mean of precision and recall; 0 when the
/// denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Mean absolute error between a map and a binary mask.
pub fn mae(map: &SaliencyMap, gt: &GrayMask) -> Result<f64> {
    check_shapes(map, gt, "mae")?;
    let sum: f64 = map
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&s, &g)| (s - g as f64).abs())
        .sum();
    Ok(sum / map.data().len() as f64)
}

/// Squared distance to the nearest foreground pixel plus that pixel's
/// flat index, for every pixel. Ties go to the smallest index.
pub(crate) fn nearest_foreground(gt: &GrayMask) -> (Vec<f64>, Vec<usize>) {
    let (w, h) = (gt.width(), gt.height());
    let n = w * h;
    // Nearest foreground row within each column, per pixel row.
    let mut col_row = vec![usize::MAX; n];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt.get(x, y) {
                last = Some(y);
            }
            if let Some(r) = last {
                col_row[y * w + x] = r;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if gt.get(x, y) {
                next = Some(y);
            }
            if let Some(r) = next {
                let cur = col_row[y * w + x];
                // Equidistant rows keep the smaller one.
                if cur == usize::MAX || r.abs_diff(y) < cur.abs_diff(y) {
                    col_row[y * w + x] = r;
                }
            }
        }
    }

    let mut dist = vec![0.0f64; n];
    let mut source = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt.get(x, y) {
                source[i] = i;
                continue;
            }
            let mut best_d2 = u64::MAX;
            let mut best_src = usize::MAX;
            for xp in 0..w {
                let r = col_row[y * w + xp];
                if r == usize::MAX {
                    continue;
                }
                let dx = x.abs_diff(xp) as u64;
                let dy = y.abs_diff(r) as u64;
                let d2 = dx * dx + dy * dy;
                let src = r * w + xp;
                if d2 < best_d2 || (d2 == best_d2 && src < best_src) {
                    best_d2 = d2;
                    best_src = src;
                }
            }
            dist[i] = (best_d2 as f64).sqrt();
            source[i] = best_src;
        }
    }
    (dist, source)
}

/// 7x7 Gaussian filter with zero padding outside the image.
fn gauss7(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let mut kernel = [[0.0f64; 7]; 7];
    let mut sum = 0.0;
    for (ky, row) in kernel.iter_mut().enumerate() {
        for (kx, v) in row.iter_mut().enumerate() {
            let dy = ky as f64 - 3.0;
            let dx = kx as f64 - 3.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = y as i64 + ky as i64 - 3;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for (kx, &kv) in row.iter().enumerate() {
                    let sx = x as i64 + kx as i64 - 3;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    acc += values[sy as usize * w + sx as usize] * kv;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Smoothing scale of the error-dependency filter.
const WFB_SIGMA: f64 = 5.0;
/// Importance decay: background errors half-weighted 5 pixels out.
const WFB_DECAY: f64 = 5.0;

/// Structure-aware weighted F-beta (beta squared 1): background errors
/// are substituted from the nearest foreground pixel, smoothed, capped
/// by the raw error on foreground, and attenuated with distance.
pub fn weighted_f_beta(map: &SaliencyMap, gt: &GrayMask) -> Result<f64> {
    check_shapes(map, gt, "weighted_f_beta")?;
    let pos = gt.positives();
    if pos == 0 {
        return Err(Error::EmptyForeground);
    }
    let (w, h) = (gt.width(), gt.height());
    let n = w * h;
    let err: Vec<f64> = map
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&s, &g)| (s - g as f64).abs())
        .collect();
    let (dist, source) = nearest_foreground(gt);

    let substituted: Vec<f64> = (0..n)
        .map(|i| {
            if gt.data()[i] == 1 {
                err[i]
            } else {
                err[source[i]]
            }
        })
        .collect();
    let smoothed = gauss7(&substituted, w, h, WFB_SIGMA);

    let alpha = 0.5f64.ln() / WFB_DECAY;
    let mut fg_err_sum = 0.0;
    let mut bg_err_sum = 0.0;
    for i in 0..n {
        if gt.data()[i] == 1 {
            let e = if smoothed[i] < err[i] {
                smoothed[i]
            } else {
                err[i]
            };
            fg_err_sum += e;
        } else {
            let weight = 2.0 - (alpha * dist[i]).exp();
            bg_err_sum += err[i] * weight;
        }
    }
    let tp_w = pos as f64 - fg_err_sum;
    let fp_w = bg_err_sum;
    let recall = 1.0 - fg_err_sum / pos as f64;
    let precision = tp_w / (f64::EPSILON + tp_w + fp_w);
    Ok(2.0 * precision * recall / (f64::EPSILON + precision + recall))
}

/// Precision, recall, and F-beta at one adaptive threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AdaptiveScores {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

/// Scores at the Otsu threshold of the map.
pub fn adaptive_scores(map: &SaliencyMap, gt: &GrayMask) -> Result<AdaptiveScores> {
    check_shapes(map, gt, "adaptive_scores")?;
    if gt.positives() == 0 {
        return Err(Error::EmptyForeground);
    }
    let tau = otsu_threshold(map)?;
    let mut tp = 0u64;
    let mut pred = 0u64;
    for (i, &s) in map.data().iter().enumerate() {
        if crate::raster::quantize(s) >= tau {
            pred += 1;
            if gt.data()[i] == 1 {
                tp += 1;
            }
        }
    }
    let precision = if pred == 0 {
        1.0
    } else {
        tp as f64 / pred as f64
    };
    let recall = tp as f64 / gt.positives() as f64;
    Ok(AdaptiveScores {
        threshold: tau,
        precision,
        recall,
        f_beta: f_beta(precision, recall, F_BETA_SQ_DEFAULT),
    })
}

/// Fixation points of one image, validated against its bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationSet {
    points: Vec<(u32, u32)>,
}

impl FixationSet {
    pub fn new(points: Vec<(u32, u32)>, width: usize, height: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyFixations);
        }
        for &(x, y) in &points {
            if x as usize >= width || y as usize >= height {
                return Err(Error::invalid(format!(
                    "fixation ({x}, {y}) outside {width}x{height}"
                )));
            }
        }
        Ok(FixationSet { points })
    }

    pub fn points(&self) -> &[(u32, u32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rank-based AUC of map values at this image's fixations against
/// values at fixations shuffled in from other images. Ties get average
/// ranks.
pub fn shuffled_auc(
    map: &SaliencyMap,
    fixations: &FixationSet,
    negatives: &FixationSet,
) -> Result<f64> {
    let mut values: Vec<(f64, bool)> = Vec::with_capacity(fixations.len() + negatives.len());
    for (set, is_pos) in [(fixations, true), (negatives, false)] {
        for &(x, y) in set.points() {
            if x as usize >= map.width() || y as usize >= map.height() {
                return Err(Error::invalid(format!(
                    "fixation ({x}, {y}) outside {}x{} map",
                    map.width(),
                    map.height()
                )));
            }
            values.push((map.get(x as usize, y as usize), is_pos));
        }
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].0.partial_cmp(&values[b].0).unwrap());
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].0 == values[order[i]].0 {
            j += 1;
        }
        // 1-based average rank of the tie run [i, j].
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if values[k].1 {
                pos_rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = fixations.len() as f64;
    let nn = negatives.len() as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Scores of one evaluated image.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageEval {
    pub stem: String,
    pub mean_f_beta: f64,
    pub adaptive: AdaptiveScores,
    pub mae: f64,
    pub weighted_f_beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffled_auc: Option<f64>,
    #[serde(skip)]
    pub curve: PRCurve,
}

/// Evaluates one map against its mask; fixation scoring is optional.
pub fn evaluate_image(
    stem: &str,
    map: &SaliencyMap,
    gt: &GrayMask,
    fixations: Option<(&FixationSet, &FixationSet)>,
) -> Result<ImageEval> {
    let curve = pr_curve(map, gt)?;
    let adaptive = adaptive_scores(map, gt)?;
    let sauc = match fixations {
        Some((pos, neg)) => Some(shuffled_auc(map, pos, neg)?),
        None => None,
    };
    Ok(ImageEval {
        stem: stem.to_string(),
        mean_f_beta: curve.mean_f_beta(F_BETA_SQ_DEFAULT),
        adaptive,
        mae: mae(map, gt)?,
        weighted_f_beta: weighted_f_beta(map, gt)?,
        shuffled_auc: sauc,
        curve,
    })
}

/// Dataset-level scores: arithmetic means over images, plus the best
/// F-beta of the pointwise-averaged curve.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetEval {
    pub image_count: usize,
    pub mean_f_beta: f64,
    pub adaptive_precision: f64,
    pub adaptive_recall: f64,
    pub adaptive_f_beta: f64,
    pub mae: f64,
    pub weighted_f_beta: f64,
    pub max_f_beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_shuffled_auc: Option<f64>,
    #[serde(skip)]
    pub curve: PRCurve,
}

/// Averages per-image reports into a dataset report.
pub fn aggregate(images: &[ImageEval]) -> Result<DatasetEval> {
    if images.is_empty() {
        return Err(Error::invalid("aggregate needs at least one image"));
    }
    let n = images.len() as f64;
    let mean = |f: &dyn Fn(&ImageEval) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mut precision = vec![0.0; PR_THRESHOLDS];
    let mut recall = vec![0.0; PR_THRESHOLDS];
    for img in images {
        for t in 0..PR_THRESHOLDS {
            precision[t] += img.curve.precision[t] / n;
            recall[t] += img.curve.recall[t] / n;
        }
    }
    let curve = PRCurve::new(precision, recall);
    let saucs: Vec<f64> = images.iter().filter_map(|i| i.shuffled_auc).collect();
    Ok(DatasetEval {
        image_count: images.len(),
        mean_f_beta: mean(&|i| i.mean_f_beta),
        adaptive_precision: mean(&|i| i.adaptive.precision),
        adaptive_recall: mean(&|i| i.adaptive.recall),
        adaptive_f_beta: mean(&|i| i.adaptive.f_beta),
        mae: mean(&|i| i.mae),
        weighted_f_beta: mean(&|i| i.weighted_f_beta),
        max_f_beta: curve.max_f_beta(F_BETA_SQ_DEFAULT),
        mean_shuffled_auc: if saucs.is_empty() {
            None
        } else {
            Some(saucs.iter().sum::<f64>() / saucs.len() as f64)
        },
        curve,
    })
}
