//! SLIC superpixel segmentation: seeded k-means in a joint color/space
//! metric, followed by a connectivity cleanup pass.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{rgb_to_lab, LabImage, RasterImage};

/// Parameters of the segmentation stage.
#[derive(Debug, Clone)]
pub struct SlicConfig {
    /// Requested superpixel count; the delivered count may drift by up
    /// to half of this in either direction.
    pub target_count: usize,
    /// Weight of the spatial term relative to color (larger values give
    /// more compact, grid-like superpixels).
    pub compactness: f64,
    /// Assignment/update sweeps.
    pub iterations: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            target_count: 300,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Dense superpixel assignment; labels are `0..count` and every label
/// names a 4-connected set of pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelLabeling {
    width: usize,
    height: usize,
    count: usize,
    labels: Vec<u32>,
}

impl SuperpixelLabeling {
    /// Wraps raw labels, checking that they are dense in `0..count`.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "SuperpixelLabeling::new",
                expected: format!("{} labels", width * height),
                actual: format!("{} labels", labels.len()),
            });
        }
        let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(hole) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!("label {hole} is unused")));
        }
        Ok(SuperpixelLabeling {
            width,
            height,
            count,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of distinct labels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Pixel count per label.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Writes labels as a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        if self.count > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "{} labels exceed the 16-bit range",
                self.count
            )));
        }
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (x, y, px) in buf.enumerate_pixels_mut() {
            px.0[0] = self.label(x as usize, y as usize) as u16;
        }
        buf.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::CorruptImage {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
    }
}

/// Summary statistics of one superpixel, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperpixelFeature {
    pub mean_l: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub pixel_count: usize,
}

#[derive(Clone, Copy)]
struct Center {
    l: f64,
    a: f64,
    b: f64,
    x: f64,
    y: f64,
}

/// Squared color/space gradient at `(x, y)`, used to nudge seeds off
/// edges; border samples clamp to the image.
fn gradient(lab: &LabImage, x: usize, y: usize) -> f64 {
    let w = lab.width();
    let h = lab.height();
    let at = |x: usize, y: usize| lab.lab(x.min(w - 1), y.min(h - 1));
    let xm = at(x.saturating_sub(1), y);
    let xp = at(x + 1, y);
    let ym = at(x, y.saturating_sub(1));
    let yp = at(x, y + 1);
    let mut g = 0.0;
    for c in 0..3 {
        let dx = xp[c] - xm[c];
        let dy = yp[c] - ym[c];
        g += dx * dx + dy * dy;
    }
    g
}

fn initial_centers(lab: &LabImage, n: usize) -> Vec<Center> {
    let w = lab.width();
    let h = lab.height();
    // Grid shape follows the aspect ratio so spacing stays near square.
    let ny = ((n as f64 * h as f64 / w as f64).sqrt().round() as usize).max(1);
    let nx = ((n as f64 / ny as f64).round() as usize).max(1);
    let mut centers = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            // Cell centers of an even partition of the image.
            let cx = ((gx as f64 + 0.5) * w as f64 / nx as f64).floor() as usize;
            let cy = ((gy as f64 + 0.5) * h as f64 / ny as f64).floor() as usize;
            let cx = cx.min(w - 1);
            let cy = cy.min(h - 1);
            // Move to the flattest pixel of the 3x3 neighborhood.
            let mut best = (cx, cy);
            let mut best_g = f64::INFINITY;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let px = cx as i64 + dx;
                    let py = cy as i64 + dy;
                    if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                        continue;
                    }
                    let g = gradient(lab, px as usize, py as usize);
                    if g < best_g {
                        best_g = g;
                        best = (px as usize, py as usize);
                    }
                }
            }
            let [l, a, b] = lab.lab(best.0, best.1);
            centers.push(Center {
                l,
                a,
                b,
                x: best.0 as f64,
                y: best.1 as f64,
            });
        }
    }
    centers
}

/// Segments an image into superpixels.
///
/// Pixels compete for the nearest cluster center under the combined
/// distance `sqrt(d_lab^2 + (compactness / s)^2 * d_xy^2)` where
/// `s = sqrt(w * h / n)` is the expected superpixel spacing. Centers
/// only see pixels within a `2s` window, which keeps the cost linear in
/// the pixel count. The result is cleaned by [`enforce_connectivity`].
pub fn slic_segment(img: &RasterImage, cfg: &SlicConfig) -> Result<SuperpixelLabeling> {
    let w = img.width();
    let h = img.height();
    let n = cfg.target_count;
    if n == 0 {
        return Err(Error::invalid("superpixel count must be positive"));
    }
    if n > w * h {
        return Err(Error::TooManySuperpixels {
            requested: n,
            pixels: w * h,
        });
    }

    let lab = rgb_to_lab(img);
    let mut centers = initial_centers(&lab, n);
    let spacing = ((w * h) as f64 / n as f64).sqrt();
    let spatial_weight = (cfg.compactness / spacing) * (cfg.compactness / spacing);
    let reach = spacing.ceil() as i64;

    let mut assignment = vec![u32::MAX; w * h];
    let mut best_dist = vec![f64::INFINITY; w * h];
    for _ in 0..cfg.iterations {
        best_dist.fill(f64::INFINITY);
        assignment.fill(u32::MAX);
        for (ci, center) in centers.iter().enumerate() {
            let x0 = (center.x.round() as i64 - reach).max(0) as usize;
            let x1 = (center.x.round() as i64 + reach).min(w as i64 - 1) as usize;
            let y0 = (center.y.round() as i64 - reach).max(0) as usize;
            let y1 = (center.y.round() as i64 + reach).min(h as i64 - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let [l, a, b] = lab.lab(x, y);
                    let dl = l - center.l;
                    let da = a - center.a;
                    let db = b - center.b;
                    let dx = x as f64 - center.x;
                    let dy = y as f64 - center.y;
                    let d = dl * dl + da * da + db * db + spatial_weight * (dx * dx + dy * dy);
                    let idx = y * w + x;
                    if d < best_dist[idx] {
                        best_dist[idx] = d;
                        assignment[idx] = ci as u32;
                    }
                }
            }
        }

        // A pixel outside every search window falls back to the nearest
        // center by full scan; rare, but keeps the labeling total.
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if assignment[idx] != u32::MAX {
                    continue;
                }
                let [l, a, b] = lab.lab(x, y);
                let mut best = 0u32;
                let mut best_d = f64::INFINITY;
                for (ci, center) in centers.iter().enumerate() {
                    let dl = l - center.l;
                    let da = a - center.a;
                    let db = b - center.b;
                    let dx = x as f64 - center.x;
                    let dy = y as f64 - center.y;
                    let d = dl * dl + da * da + db * db + spatial_weight * (dx * dx + dy * dy);
                    if d < best_d {
                        best_d = d;
                        best = ci as u32;
                    }
                }
                assignment[idx] = best;
            }
        }

        // Recenter on the assigned pixels; empty clusters stay put.
        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let ci = assignment[y * w + x] as usize;
                let [l, a, b] = lab.lab(x, y);
                sums[ci][0] += l;
                sums[ci][1] += a;
                sums[ci][2] += b;
                sums[ci][3] += x as f64;
                sums[ci][4] += y as f64;
                counts[ci] += 1;
            }
        }
        for (ci, center) in centers.iter_mut().enumerate() {
            if counts[ci] == 0 {
                continue;
            }
            let k = counts[ci] as f64;
            center.l = sums[ci][0] / k;
            center.a = sums[ci][1] / k;
            center.b = sums[ci][2] / k;
            center.x = sums[ci][3] / k;
            center.y = sums[ci][4] / k;
        }
    }

    let raw = compact_labels(w, h, &assignment);
    enforce_connectivity(&raw)
}

/// Renumbers arbitrary labels densely in first-appearance scan order.
fn compact_labels(w: usize, h: usize, labels: &[u32]) -> SuperpixelLabeling {
    let mut remap = std::collections::BTreeMap::new();
    let mut next = 0u32;
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let id = *remap.entry(l).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        out.push(id);
    }
    SuperpixelLabeling::new(w, h, out).expect("compacted labels are dense")
}

/// Splits every label into 4-connected components, keeps the largest
/// component of each label, and resolves the rest: fragments smaller
/// than a quarter of the mean label area are absorbed by the adjacent
/// component sharing the longest border, larger fragments become labels
/// of their own. A labeling whose labels are already connected comes
/// back unchanged (up to renumbering in scan order).
pub fn enforce_connectivity(labeling: &SuperpixelLabeling) -> Result<SuperpixelLabeling> {
    let w = labeling.width();
    let h = labeling.height();
    let area = w * h;
    let min_size = area / labeling.count() / 4;

    // Connected components in scan order.
    let mut comp = vec![usize::MAX; area];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut stack = Vec::new();
    for start in 0..area {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let label = labeling.labels()[start];
        comp_label.push(label);
        comp_size.push(0usize);
        stack.push(start);
        comp[start] = id;
        while let Some(p) = stack.pop() {
            comp_size[id] += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labeling.labels()[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }

    let n_comp = comp_label.len();

    // Largest component of each label keeps it; ties go to the earliest
    // component in scan order.
    let mut main_of_label = vec![usize::MAX; labeling.count()];
    for id in 0..n_comp {
        let l = comp_label[id] as usize;
        let cur = main_of_label[l];
        if cur == usize::MAX || comp_size[id] > comp_size[cur] {
            main_of_label[l] = id;
        }
    }

    // Border lengths between adjacent components.
    let mut border: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w && comp[p] != comp[p + 1] {
                let key = (comp[p].min(comp[p + 1]), comp[p].max(comp[p + 1]));
                *border.entry(key).or_insert(0) += 1;
            }
            if y + 1 < h && comp[p] != comp[p + w] {
                let key = (comp[p].min(comp[p + w]), comp[p].max(comp[p + w]));
                *border.entry(key).or_insert(0) += 1;
            }
        }
    }
    let mut neighbors: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_comp];
    for (&(a, b), &len) in &border {
        neighbors[a].push((b, len));
        neighbors[b].push((a, len));
    }

    // Union-find over components; small orphans join a neighbor.
    let mut parent: Vec<usize> = (0..n_comp).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for id in 0..n_comp {
        let label = comp_label[id] as usize;
        if main_of_label[label] == id || comp_size[id] >= min_size.max(1) {
            continue;
        }
        // Longest shared border wins; ties go to the earliest component.
        let mut merged: std::collections::BTreeMap<usize, usize> =
            std::collections::BTreeMap::new();
        for &(nb, len) in &neighbors[id] {
            let root = find(&mut parent, nb);
            if root != id {
                *merged.entry(root).or_insert(0) += len;
            }
        }
        if let Some((&target, _)) = merged.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            parent[id] = target;
        }
    }

    let mut labels = Vec::with_capacity(area);
    let mut roots = vec![0u32; n_comp];
    for (id, root) in roots.iter_mut().enumerate().take(n_comp) {
        *root = find(&mut parent, id) as u32;
    }
    for p in 0..area {
        labels.push(roots[comp[p]]);
    }
    Ok(compact_labels(w, h, &labels))
}

/// Mean Lab color and mean position of every superpixel.
pub fn superpixel_features(
    lab: &LabImage,
    labeling: &SuperpixelLabeling,
) -> Vec<SuperpixelFeature> {
    assert_eq!(
        (lab.width(), lab.height()),
        (labeling.width(), labeling.height()),
        "labeling and image disagree on size"
    );
    let mut sums = vec![[0.0f64; 5]; labeling.count()];
    let mut counts = vec![0usize; labeling.count()];
    for y in 0..labeling.height() {
        for x in 0..labeling.width() {
            let id = labeling.label(x, y) as usize;
            let [l, a, b] = lab.lab(x, y);
            sums[id][0] += l;
            sums[id][1] += a;
            sums[id][2] += b;
            sums[id][3] += x as f64;
            sums[id][4] += y as f64;
            counts[id] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let k = n as f64;
            SuperpixelFeature {
                mean_l: s[0] / k,
                mean_a: s[1] / k,
                mean_b: s[2] / k,
                mean_x: s[3] / k,
                mean_y: s[4] / k,
                pixel_count: n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flood_count(labeling: &SuperpixelLabeling) -> usize {
        let w = labeling.width();
        let h = labeling.height();
        let mut seen = vec![false; w * h];
        let mut comps = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            comps += 1;
            seen[start] = true;
            stack.push(start);
            let label = labeling.labels()[start];
            while let Some(p) = stack.pop() {
                let (x, y) = (p % w, p / w);
                let visit = |q: usize, seen: &mut Vec<bool>, stack: &mut Vec<usize>| {
                    if !seen[q] && labeling.labels()[q] == label {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1, &mut seen, &mut stack);
                }
                if x + 1 < w {
                    visit(p + 1, &mut seen, &mut stack);
                }
                if y > 0 {
                    visit(p - w, &mut seen, &mut stack);
                }
                if y + 1 < h {
                    visit(p + w, &mut seen, &mut stack);
                }
            }
        }
        comps
    }

    #[test]
    fn orphan_pixel_is_absorbed() {
        // Label 0 owns the left half plus one stray pixel inside label 1.
        let w = 8;
        let h = 4;
        let mut labels = vec![0u32; w * h];
        for y in 0..h {
            for x in 4..w {
                labels[y * w + x] = 1;
            }
        }
        labels[2 * w + 6] = 0;
        let raw = SuperpixelLabeling::new(w, h, labels).unwrap();
        let fixed = enforce_connectivity(&raw).unwrap();
        assert_eq!(fixed.count(), 2);
        assert_eq!(flood_count(&fixed), 2);
        assert_eq!(fixed.label(6, 2), fixed.label(7, 2));
    }

    #[test]
    fn connected_labeling_is_a_fixpoint() {
        let w = 6;
        let h = 6;
        let labeling = SuperpixelLabeling::new(
            w,
            h,
            (0..w * h)
                .map(|p| ((p % w) / 3 + 2 * ((p / w) / 3)) as u32)
                .collect(),
        )
        .unwrap();
        let fixed = enforce_connectivity(&labeling).unwrap();
        assert_eq!(fixed, labeling);
    }

    #[test]
    fn slic_covers_and_stays_connected() {
        let img = RasterImage::from_fn(40, 30, |x, y| {
            [(x * 6) as u8, (y * 8) as u8, ((x + y) * 3) as u8]
        });
        let cfg = SlicConfig {
            target_count: 12,
            ..SlicConfig::default()
        };
        let labeling = slic_segment(&img, &cfg).unwrap();
        assert_eq!(flood_count(&labeling), labeling.count());
        assert!(
            labeling.count() >= 6 && labeling.count() <= 18,
            "count = {}",
            labeling.count()
        );
        let sizes = labeling.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 40 * 30);
        assert!(sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn slic_rejects_oversubscription() {
        let img = RasterImage::from_fn(4, 4, |_, _| [0, 0, 0]);
        let cfg = SlicConfig {
            target_count: 17,
            ..SlicConfig::default()
        };
        assert!(matches!(
            slic_segment(&img, &cfg),
            Err(Error::TooManySuperpixels { .. })
        ));
    }

    #[test]
    fn features_average_positions() {
        let img = RasterImage::from_fn(4, 2, |x, _| [(x * 60) as u8, 0, 0]);
        let lab = rgb_to_lab(&img);
        let labels = SuperpixelLabeling::new(4, 2, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let feats = superpixel_features(&lab, &labels);
        assert_eq!(feats.len(), 2);
        assert!((feats[0].mean_x - 0.5).abs() < 1e-12);
        assert!((feats[1].mean_x - 2.5).abs() < 1e-12);
        assert!((feats[0].mean_y - 0.5).abs() < 1e-12);
        assert_eq!(feats[0].pixel_count, 4);
        // Positions stay inside the image.
        for f in &feats {
            assert!(f.mean_x >= 0.0 && f.mean_x <= 3.0);
            assert!(f.mean_y >= 0.0 && f.mean_y <= 1.0);
        }
    }
}
