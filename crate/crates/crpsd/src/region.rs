//! Groups superpixels into a small, image-dependent number of regions:
//! a directed k-nearest-neighbour graph over superpixel features feeds
//! an agglomerative clustering whose pair affinity is a degree product
//! over the cross-cluster weight submatrices. Also selects, per region,
//! the superpixels that sit deepest inside it.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::superpixel::{SuperpixelFeature, SuperpixelLabeling};

/// Default number of centerline superpixels scored per region.
pub const CENTERLINE_M_DEFAULT: usize = 5;

/// Parameters of the clustering stage.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    /// Out-degree of the neighbor graph.
    pub k: usize,
    /// Merging stops once no cluster pair reaches `|stop_threshold|`.
    /// The sign is ignored: affinities are non-negative, so the
    /// magnitude acts as an affinity floor.
    pub stop_threshold: f64,
    /// Bandwidth multiplier on the mean squared edge distance in the
    /// weight kernel.
    pub bandwidth: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 15,
            stop_threshold: -0.04,
            bandwidth: 1.0,
        }
    }
}

impl ClusterConfig {
    /// The affinity floor implied by the stop threshold.
    pub fn affinity_floor(&self) -> f64 {
        self.stop_threshold.abs()
    }
}

/// Directed weighted graph with a fixed out-degree.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    node_count: usize,
    k: usize,
    /// Out-edges per node, sorted by destination id.
    edges: Vec<Vec<(usize, f64)>>,
}

impl AffinityGraph {
    /// Wraps explicit edge lists; every weight must be finite and
    /// non-negative.
    pub fn from_edges(node_count: usize, edges: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::TooFewNodes(node_count));
        }
        if edges.len() != node_count {
            return Err(Error::invalid("edge list length differs from node count"));
        }
        let k = edges[0].len();
        for (src, out) in edges.iter().enumerate() {
            if out.len() != k {
                return Err(Error::invalid(format!(
                    "node {src} has {} out-edges, expected {k}",
                    out.len()
                )));
            }
            for &(dst, w) in out {
                if dst >= node_count || dst == src {
                    return Err(Error::invalid(format!("bad edge {src} -> {dst}")));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::invalid(format!("bad weight {w} on {src} -> {dst}")));
                }
            }
        }
        let mut edges = edges;
        for out in &mut edges {
            out.sort_by_key(|&(dst, _)| dst);
        }
        Ok(AffinityGraph {
            node_count,
            k,
            edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Out-edges of `node`, sorted by destination.
    pub fn out_edges(&self, node: usize) -> &[(usize, f64)] {
        &self.edges[node]
    }

    /// Weight of the edge `src -> dst`, or 0 when absent.
    pub fn weight(&self, src: usize, dst: usize) -> f64 {
        match self.edges[src].binary_search_by_key(&dst, |&(d, _)| d) {
            Ok(i) => self.edges[src][i].1,
            Err(_) => 0.0,
        }
    }
}

/// Spatial scale applied to superpixel positions so their spread is
/// commensurate with the lightness range.
pub fn spatial_scale(width: usize, height: usize) -> f64 {
    100.0 / width.max(height) as f64
}

/// Feature vectors fed to the neighbor graph: mean Lab color plus the
/// scaled mean position.
pub fn feature_vectors(
    features: &[SuperpixelFeature],
    width: usize,
    height: usize,
) -> Vec<[f64; 5]> {
    let s = spatial_scale(width, height);
    features
        .iter()
        .map(|f| [f.mean_l, f.mean_a, f.mean_b, f.mean_x * s, f.mean_y * s])
        .collect()
}

fn sq_dist(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    let mut d = 0.0;
    for c in 0..5 {
        let diff = a[c] - b[c];
        d += diff * diff;
    }
    d
}

/// Builds the directed k-nearest-neighbour graph over feature vectors.
///
/// Each node links to its `k` nearest neighbors by Euclidean distance
/// (ties to the smaller id). Edge weights are
/// `exp(-d^2 / (bandwidth * sigma^2))` with `sigma^2` the mean squared
/// distance over all retained edges, floored at `1e-12` so identical
/// features still produce weight 1.
pub fn build_knn_graph(vectors: &[[f64; 5]], cfg: &ClusterConfig) -> Result<AffinityGraph> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::TooFewNodes(n));
    }
    let k = cfg.k.min(n - 1).max(1);

    let mut nearest: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut sigma_sum = 0.0;
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(&vectors[i], &vectors[j]), j))
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cand.truncate(k);
        sigma_sum += cand.iter().map(|&(d, _)| d).sum::<f64>();
        nearest.push(cand.into_iter().map(|(d, j)| (j, d)).collect());
    }

    let sigma_sq = (sigma_sum / (n * k) as f64).max(1e-12);
    let denom = cfg.bandwidth * sigma_sq;
    let edges = nearest
        .into_iter()
        .map(|out| {
            out.into_iter()
                .map(|(dst, d)| (dst, (-d / denom).exp()))
                .collect()
        })
        .collect();
    AffinityGraph::from_edges(n, edges)
}

/// Assignment of superpixels to regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    region_of: Vec<u32>,
    region_count: usize,
}

impl RegionPartition {
    pub fn new(region_of: Vec<u32>) -> Result<Self> {
        let count = region_of.iter().map(|&r| r as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; count];
        for &r in &region_of {
            seen[r as usize] = true;
        }
        if let Some(hole) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!("region {hole} is empty")));
        }
        Ok(RegionPartition {
            region_of,
            region_count: count,
        })
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    /// Number of superpixels partitioned.
    pub fn superpixel_count(&self) -> usize {
        self.region_of.len()
    }

    pub fn region_of(&self, superpixel: usize) -> usize {
        self.region_of[superpixel] as usize
    }

    /// Superpixel ids of one region, ascending.
    pub fn superpixels_of(&self, region: usize) -> Vec<usize> {
        self.region_of
            .iter()
            .enumerate()
            .filter(|&(_, &r)| r as usize == region)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-pixel region ids, composing this partition with a labeling.
    pub fn pixel_region_map(&self, labeling: &SuperpixelLabeling) -> Vec<u32> {
        assert_eq!(
            labeling.count(),
            self.region_of.len(),
            "labeling and partition disagree on superpixel count"
        );
        labeling
            .labels()
            .iter()
            .map(|&l| self.region_of[l as usize])
            .collect()
    }

    /// Boolean mask of one region's pixels.
    pub fn region_mask(&self, labeling: &SuperpixelLabeling, region: usize) -> Vec<bool> {
        labeling
            .labels()
            .iter()
            .map(|&l| self.region_of[l as usize] as usize == region)
            .collect()
    }
}

/// One agglomerative merge, for the debug trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeStep {
    /// Surviving cluster id (the smaller of the pair).
    pub a: usize,
    /// Absorbed cluster id.
    pub b: usize,
    pub affinity: f64,
}

/// Runs the agglomerative clustering and returns the partition together
/// with the merge trace.
pub fn gdl_cluster_traced(
    graph: &AffinityGraph,
    cfg: &ClusterConfig,
) -> (RegionPartition, Vec<MergeStep>) {
    let n = graph.node_count();
    let mut cluster_of: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: BTreeSet<usize> = (0..n).collect();

    let mut acc_a_in = vec![0.0f64; n];
    let mut acc_a_out = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();

    // affinity(a, b) = sum over b-nodes of (weight in from a) * (weight
    // out to a) / |a|^2, plus the mirrored term.
    let affinity = |cluster_of: &[usize],
                    members: &[Vec<usize>],
                    acc_in: &mut Vec<f64>,
                    acc_out: &mut Vec<f64>,
                    touched: &mut Vec<usize>,
                    a: usize,
                    b: usize|
     -> f64 {
        for &i in &members[a] {
            for &(dst, w) in graph.out_edges(i) {
                if cluster_of[dst] == b {
                    if acc_in[dst] == 0.0 && acc_out[dst] == 0.0 {
                        touched.push(dst);
                    }
                    acc_in[dst] += w;
                }
            }
        }
        for &j in &members[b] {
            for &(dst, w) in graph.out_edges(j) {
                if cluster_of[dst] == a {
                    if acc_in[j] == 0.0 && acc_out[j] == 0.0 {
                        touched.push(j);
                    }
                    acc_out[j] += w;
                }
            }
        }
        let term_ab: f64 = members[b]
            .iter()
            .map(|&j| acc_in[j] * acc_out[j])
            .sum::<f64>()
            / (members[a].len() * members[a].len()) as f64;

        // Mirror with the roles swapped: per a-node traffic with b.
        for &t in touched.iter() {
            acc_in[t] = 0.0;
            acc_out[t] = 0.0;
        }
        touched.clear();
        for &j in &members[b] {
            for &(dst, w) in graph.out_edges(j) {
                if cluster_of[dst] == a {
                    if acc_in[dst] == 0.0 && acc_out[dst] == 0.0 {
                        touched.push(dst);
                    }
                    acc_in[dst] += w;
                }
            }
        }
        for &i in &members[a] {
            for &(dst, w) in graph.out_edges(i) {
                if cluster_of[dst] == b {
                    if acc_in[i] == 0.0 && acc_out[i] == 0.0 {
                        touched.push(i);
                    }
                    acc_out[i] += w;
                }
            }
        }
        let term_ba: f64 = members[a]
            .iter()
            .map(|&i| acc_in[i] * acc_out[i])
            .sum::<f64>()
            / (members[b].len() * members[b].len()) as f64;
        for &t in touched.iter() {
            acc_in[t] = 0.0;
            acc_out[t] = 0.0;
        }
        touched.clear();
        term_ab + term_ba
    };

    let floor = cfg.affinity_floor();
    let mut trace = Vec::new();

    // Pair affinities, recomputed lazily: only rows touching the merged
    // cluster change, so cache per ordered pair.
    let mut cache: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    let ids: Vec<usize> = active.iter().copied().collect();
    for (ai, &a) in ids.iter().enumerate() {
        for &b in &ids[ai + 1..] {
            let v = affinity(
                &cluster_of,
                &members,
                &mut acc_a_in,
                &mut acc_a_out,
                &mut touched,
                a,
                b,
            );
            if v > 0.0 {
                cache.insert((a, b), v);
            }
        }
    }

    while active.len() > 1 {
        // Highest-affinity active pair; ties take the smallest ids.
        let mut best: Option<((usize, usize), f64)> = None;
        for (&pair, &v) in &cache {
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((pair, v)),
            }
        }
        let Some(((a, b), v)) = best else {
            break;
        };
        if v < floor {
            break;
        }

        trace.push(MergeStep { a, b, affinity: v });
        let absorbed = std::mem::take(&mut members[b]);
        for &i in &absorbed {
            cluster_of[i] = a;
        }
        members[a].extend(absorbed);
        members[a].sort_unstable();
        active.remove(&b);

        // Drop stale entries and refresh the merged cluster's row.
        cache.retain(|&(x, y), _| x != a && y != a && x != b && y != b);
        for &other in active.iter() {
            if other == a {
                continue;
            }
            let (lo, hi) = (a.min(other), a.max(other));
            let v = affinity(
                &cluster_of,
                &members,
                &mut acc_a_in,
                &mut acc_a_out,
                &mut touched,
                lo,
                hi,
            );
            if v > 0.0 {
                cache.insert((lo, hi), v);
            }
        }
    }

    // Region ids follow ascending surviving cluster ids.
    let mut region_ids = std::collections::BTreeMap::new();
    for (next, &c) in active.iter().enumerate() {
        region_ids.insert(c, next as u32);
    }
    let region_of = cluster_of.iter().map(|&c| region_ids[&c]).collect();
    (
        RegionPartition::new(region_of).expect("active clusters are non-empty"),
        trace,
    )
}

/// [`gdl_cluster_traced`] without the trace.
pub fn gdl_cluster(graph: &AffinityGraph, cfg: &ClusterConfig) -> RegionPartition {
    gdl_cluster_traced(graph, cfg).0
}

/// Full region stage for one image: scaled features, neighbor graph,
/// clustering.
pub fn cluster_regions(
    features: &[SuperpixelFeature],
    width: usize,
    height: usize,
    cfg: &ClusterConfig,
) -> Result<(RegionPartition, Vec<MergeStep>)> {
    if features.len() == 1 {
        // A single superpixel is already a single region.
        return Ok((RegionPartition::new(vec![0])?, Vec::new()));
    }
    let vectors = feature_vectors(features, width, height);
    let graph = build_knn_graph(&vectors, cfg)?;
    Ok(gdl_cluster_traced(&graph, cfg))
}

/// Writes one merge per line: surviving id, absorbed id, affinity.
pub fn write_merge_trace(steps: &[MergeStep], mut w: impl Write) -> std::io::Result<()> {
    for s in steps {
        writeln!(w, "{} {} {:.9}", s.a, s.b, s.affinity)?;
    }
    Ok(())
}

/// Chamfer distance transform with 3/4 weights: per pixel, the weighted
/// grid distance to the nearest `false` cell, where everything outside
/// the image counts as `false`. Axial steps cost 3, diagonal steps 4.
pub fn chamfer_distance(mask: &[bool], width: usize, height: usize) -> Vec<u32> {
    assert_eq!(mask.len(), width * height);
    const FAR: u32 = u32::MAX / 2;
    let mut dist: Vec<u32> = mask.iter().map(|&m| if m { FAR } else { 0 }).collect();

    // Neighbors outside the image contribute their step cost directly.
    let get = |dist: &[u32], x: i64, y: i64| -> u32 {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            0
        } else {
            dist[y as usize * width + x as usize]
        }
    };

    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let i = y as usize * width + x as usize;
            if dist[i] == 0 {
                continue;
            }
            let mut d = dist[i];
            d = d.min(get(&dist, x - 1, y) + 3);
            d = d.min(get(&dist, x, y - 1) + 3);
            d = d.min(get(&dist, x - 1, y - 1) + 4);
            d = d.min(get(&dist, x + 1, y - 1) + 4);
            dist[i] = d;
        }
    }
    for y in (0..height as i64).rev() {
        for x in (0..width as i64).rev() {
            let i = y as usize * width + x as usize;
            if dist[i] == 0 {
                continue;
            }
            let mut d = dist[i];
            d = d.min(get(&dist, x + 1, y) + 3);
            d = d.min(get(&dist, x, y + 1) + 3);
            d = d.min(get(&dist, x + 1, y + 1) + 4);
            d = d.min(get(&dist, x - 1, y + 1) + 4);
            dist[i] = d;
        }
    }
    dist
}

/// Picks, for every region, up to `m` superpixels near the region's
/// medial axis.
///
/// Superpixels are ranked by the chamfer distance of the region mask at
/// their rounded mean coordinate (deepest first, ties to the smaller
/// id). The top `2m` form a pool from which `m` are sampled uniformly
/// without replacement; a region with at most `m` superpixels returns
/// all of them. Returned ids are ascending.
pub fn centerline_superpixels(
    partition: &RegionPartition,
    labeling: &SuperpixelLabeling,
    m: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let w = labeling.width();
    let h = labeling.height();

    let centroids = superpixel_centroids(labeling);
    let mut out = Vec::with_capacity(partition.region_count());
    for region in 0..partition.region_count() {
        let ids = partition.superpixels_of(region);
        if ids.len() <= m {
            out.push(ids);
            continue;
        }
        let mask = partition.region_mask(labeling, region);
        let dist = chamfer_distance(&mask, w, h);
        let mut ranked: Vec<(u32, usize)> = ids
            .iter()
            .map(|&id| {
                let (cx, cy) = centroids[id];
                (dist[cy * w + cx], id)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(2 * m);
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, ranked.len(), m)
            .iter()
            .map(|i| ranked[i].1)
            .collect();
        picked.sort_unstable();
        out.push(picked);
    }
    out
}

/// Rounded mean pixel coordinate of every superpixel, clamped into the
/// image.
pub fn superpixel_centroids(labeling: &SuperpixelLabeling) -> Vec<(usize, usize)> {
    let w = labeling.width();
    let h = labeling.height();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); labeling.count()];
    for y in 0..h {
        for x in 0..w {
            let id = labeling.label(x, y) as usize;
            sums[id].0 += x as f64;
            sums[id].1 += y as f64;
            sums[id].2 += 1;
        }
    }
    sums.iter()
        .map(|&(sx, sy, n)| {
            let cx = (sx / n as f64).round().clamp(0.0, (w - 1) as f64) as usize;
            let cy = (sy / n as f64).round().clamp(0.0, (h - 1) as f64) as usize;
            (cx, cy)
        })
        .collect()
}

/// Deterministic distinct color for region `id`.
fn region_color(id: u32) -> [u8; 3] {
    // Golden-angle hue walk keeps consecutive ids far apart.
    let hue = (id as f64 * 137.507_764) % 360.0;
    let (h6, s, v) = (hue / 60.0, 0.65f64, 0.95f64);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Writes the partition as a color PNG, one fixed palette color per
/// region.
pub fn export_regions_png(
    partition: &RegionPartition,
    labeling: &SuperpixelLabeling,
    path: &Path,
) -> Result<()> {
    let map = partition.pixel_region_map(labeling);
    let img = RasterImage::from_fn(labeling.width(), labeling.height(), |x, y| {
        region_color(map[y * labeling.width() + x])
    });
    crate::raster::save_image(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_prefers_nearer_nodes() {
        // Collinear points at 0, 1, 3: the middle links to the nearer end.
        let v = |x: f64| [0.0, 0.0, 0.0, x, 0.0];
        let cfg = ClusterConfig {
            k: 1,
            ..ClusterConfig::default()
        };
        let graph = build_knn_graph(&[v(0.0), v(1.0), v(3.0)], &cfg).unwrap();
        assert_eq!(graph.out_edges(1).len(), 1);
        assert_eq!(graph.out_edges(1)[0].0, 0);
    }

    #[test]
    fn identical_features_get_weight_one() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let cfg = ClusterConfig::default();
        let graph = build_knn_graph(&[v, v], &cfg).unwrap();
        assert!((graph.weight(0, 1) - 1.0).abs() < 1e-12);
        assert!((graph.weight(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn knn_requires_two_nodes() {
        let cfg = ClusterConfig::default();
        assert!(matches!(
            build_knn_graph(&[[0.0; 5]], &cfg),
            Err(Error::TooFewNodes(1))
        ));
    }

    #[test]
    fn zero_weights_never_merge() {
        let edges = vec![
            vec![(1, 0.0), (2, 0.0)],
            vec![(0, 0.0), (2, 0.0)],
            vec![(0, 0.0), (1, 0.0)],
        ];
        let graph = AffinityGraph::from_edges(3, edges).unwrap();
        let (partition, trace) = gdl_cluster_traced(&graph, &ClusterConfig::default());
        assert_eq!(partition.region_count(), 3);
        assert!(trace.is_empty());
    }

    #[test]
    fn strong_mutual_edges_merge() {
        // 0 and 1 love each other; 2 is isolated.
        let edges = vec![vec![(1, 1.0)], vec![(0, 1.0)], vec![(0, 0.0)]];
        let graph = AffinityGraph::from_edges(3, edges).unwrap();
        let (partition, trace) = gdl_cluster_traced(&graph, &ClusterConfig::default());
        assert_eq!(partition.region_count(), 2);
        assert_eq!(trace.len(), 1);
        assert_eq!((trace[0].a, trace[0].b), (0, 1));
        // Singleton affinity is twice the mutual weight product.
        assert!((trace[0].affinity - 2.0).abs() < 1e-12);
        assert_eq!(partition.region_of(0), partition.region_of(1));
        assert_ne!(partition.region_of(0), partition.region_of(2));
    }

    #[test]
    fn chamfer_of_ribbon_peaks_in_middle_row() {
        let (w, h) = (50, 5);
        let mask = vec![true; w * h];
        let dist = chamfer_distance(&mask, w, h);
        for x in 0..w {
            assert!(dist[2 * w + x] > dist[w + x].min(dist[3 * w + x]) || x < 2 || x + 2 >= w);
            assert_eq!(dist[x], 3.min(dist[x]));
        }
        // Middle row dominates both off-rows away from the ends.
        for x in 3..w - 3 {
            assert!(dist[2 * w + x] > dist[x]);
            assert!(dist[2 * w + x] > dist[4 * w + x]);
        }
    }

    #[test]
    fn centerline_returns_small_regions_whole() {
        let labeling = SuperpixelLabeling::new(6, 1, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let partition = RegionPartition::new(vec![0, 0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let picks = centerline_superpixels(&partition, &labeling, 5, &mut rng);
        assert_eq!(picks, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn merge_trace_is_plain_triples() {
        let steps = vec![MergeStep {
            a: 0,
            b: 3,
            affinity: 1.25,
        }];
        let mut buf = Vec::new();
        write_merge_trace(&steps, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 3 1.250000000\n");
    }
}
