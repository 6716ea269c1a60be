//! Image containers and pixel-level primitives: PNG decode/encode, sRGB to
//! CIELAB conversion, bilinear resampling, and Otsu's threshold.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    /// `data` is `r g b r g b ...` scanned left to right, top to bottom.
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                context: "RasterImage::new",
                expected: format!("{} bytes", width * height * 3),
                actual: format!("{} bytes", data.len()),
            });
        }
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RasterImage::new(width, height, data).expect("from_fn dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Channel means over the whole image, in display (gamma-encoded) space.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        [sum[0] / n, sum[1] / n, sum[2] / n]
    }

    pub fn to_planar(&self) -> PlanarImage {
        let mut planes = PlanarImage::zeros(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(x, y);
                for (c, &v) in px.iter().enumerate() {
                    planes.set(c, x, y, f64::from(v));
                }
            }
        }
        planes
    }

    /// Bilinear resample to `out_w` by `out_h`, rounding back to 8 bits.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Result<RasterImage> {
        let planes = resize_bilinear(&self.to_planar(), out_w, out_h)?;
        Ok(planes.to_raster())
    }
}

/// CIELAB image with `f64` channels, same layout conventions as
/// [`RasterImage`] but planar access by `(x, y)`.
#[derive(Debug, Clone)]
pub struct LabImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `[L, a, b]` at `(x, y)`.
    pub fn lab(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

/// Binary mask; every stored value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "GrayMask::new",
                expected: format!("{} values", width * height),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(GrayMask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        GrayMask::new(width, height, data).expect("from_fn mask")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Dense saliency prediction; every score lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "SaliencyMap::new",
                expected: format!("{} scores", width * height),
                actual: format!("{} scores", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("saliency score {v} outside [0, 1]")));
        }
        Ok(SaliencyMap {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        SaliencyMap::new(width, height, data).expect("from_fn map")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// 8-bit quantization used by thresholding and PNG export.
    pub fn quantized(&self, x: usize, y: usize) -> u8 {
        quantize(self.get(x, y))
    }

    /// Binarizes at quantized level `tau`: foreground where
    /// `round(255 * score) >= tau`.
    pub fn binarize(&self, tau: u8) -> GrayMask {
        GrayMask::from_fn(self.width, self.height, |x, y| self.quantized(x, y) >= tau)
    }

    /// Writes the map as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            px.0[0] = self.quantized(x as usize, y as usize);
        }
        buf.save(path).map_err(|e| encode_error(path, e))
    }

    /// Reads a saliency map back from a grayscale PNG; color files are
    /// reduced with the same luminance weights as masks.
    pub fn load_png(path: &Path) -> Result<SaliencyMap> {
        let gray = open_luma(path)?;
        let (w, h) = gray.dimensions();
        Ok(SaliencyMap::from_fn(w as usize, h as usize, |x, y| {
            gray.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        }))
    }
}

/// Planar float image, one contiguous plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PlanarImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        PlanarImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn fill(&mut self, per_channel: &[f64]) {
        assert_eq!(per_channel.len(), self.channels);
        for (c, &v) in per_channel.iter().enumerate() {
            let plane =
                &mut self.data[c * self.width * self.height..(c + 1) * self.width * self.height];
            plane.fill(v);
        }
    }

    /// Rounds three planes back into an 8-bit RGB image, clamping to
    /// `[0, 255]`.
    pub fn to_raster(&self) -> RasterImage {
        assert_eq!(self.channels, 3, "to_raster needs an RGB image");
        RasterImage::from_fn(self.width, self.height, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = self.get(c, x, y).round().clamp(0.0, 255.0) as u8;
            }
            px
        })
    }
}

/// Quantizes a `[0, 1]` score to the 8-bit level used everywhere a map
/// meets a threshold or a PNG.
pub fn quantize(score: f64) -> u8 {
    (255.0 * score).round() as u8
}

/// Rec. 601 luminance, rounded to 8 bits.
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

fn open_dynamic(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn open_luma(path: &Path) -> Result<image::GrayImage> {
    let dynamic = open_dynamic(path)?;
    let gray = match dynamic {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            let rgb = other.to_rgb8();
            let mut gray = image::GrayImage::new(rgb.width(), rgb.height());
            for (x, y, px) in rgb.enumerate_pixels() {
                gray.get_pixel_mut(x, y).0[0] = luminance(px.0[0], px.0[1], px.0[2]);
            }
            gray
        }
    };
    Ok(gray)
}

fn encode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Decodes a PNG (or other supported raster file) into 8-bit RGB.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    let rgb = open_dynamic(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    RasterImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Encodes an image as RGB PNG.
pub fn save_image(img: &RasterImage, path: &Path) -> Result<()> {
    let buf =
        image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
            .expect("raster buffer size");
    buf.save(path).map_err(|e| encode_error(path, e))
}

/// Default luminance cut for reading annotation masks.
pub const MASK_THRESHOLD_DEFAULT: u8 = 128;

/// Reads an annotation mask: luminance at or above `threshold` counts as
/// foreground.
pub fn load_mask(path: &Path, threshold: u8) -> Result<GrayMask> {
    let gray = open_luma(path)?;
    let (w, h) = gray.dimensions();
    GrayMask::new(
        w as usize,
        h as usize,
        gray.into_raw()
            .into_iter()
            .map(|v| (v >= threshold) as u8)
            .collect(),
    )
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// D65 reference white.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn srgb_decode(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB pixel (D65) to CIELAB.
pub fn srgb_to_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
    let lin = [srgb_decode(r), srgb_decode(g), srgb_decode(b)];
    let mut xyz = [0.0f64; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a whole image to CIELAB.
pub fn rgb_to_lab(img: &RasterImage) -> LabImage {
    let mut data = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.pixel(x, y);
            data.push(srgb_to_lab(r, g, b));
        }
    }
    LabImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Bilinear resampling with half-pixel sample centers. Equal input and
/// output sizes copy the image unchanged.
pub fn resize_bilinear(src: &PlanarImage, out_w: usize, out_h: usize) -> Result<PlanarImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::EmptyImage);
    }
    let (w, h) = (src.width(), src.height());
    let scale_x = w as f64 / out_w as f64;
    let scale_y = h as f64 / out_h as f64;
    let mut out = PlanarImage::zeros(out_w, out_h, src.channels());
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..src.channels() {
                let top = (1.0 - fx) * src.get(c, x0, y0) + fx * src.get(c, x1, y0);
                let bottom = (1.0 - fx) * src.get(c, x0, y1) + fx * src.get(c, x1, y1);
                out.set(c, ox, oy, (1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Ok(out)
}

/// Otsu's threshold over the 256-level quantization of a saliency map:
/// the smallest `tau` maximizing between-class variance of the split
/// into levels `< tau` and `>= tau`. A constant map has no valid split.
pub fn otsu_threshold(map: &SaliencyMap) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &s in map.data() {
        hist[quantize(s) as usize] += 1;
    }
    otsu_from_histogram(&hist)
}

/// Otsu's threshold on a prebuilt 256-bin histogram.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &n)| v as f64 * n as f64)
        .sum();

    let mut best_tau = None;
    let mut best_var = 0.0f64;
    let mut count_lo = 0u64;
    let mut sum_lo = 0.0f64;
    for tau in 0..=255usize {
        if tau > 0 {
            count_lo += hist[tau - 1];
            sum_lo += (tau - 1) as f64 * hist[tau - 1] as f64;
        }
        let count_hi = total - count_lo;
        if count_lo == 0 || count_hi == 0 {
            continue;
        }
        let w_lo = count_lo as f64 / total as f64;
        let w_hi = count_hi as f64 / total as f64;
        let mean_lo = sum_lo / count_lo as f64;
        let mean_hi = (total_sum - sum_lo) / count_hi as f64;
        let var = w_lo * w_hi * (mean_lo - mean_hi) * (mean_lo - mean_hi);
        if var > best_var {
            best_var = var;
            best_tau = Some(tau as u8);
        }
    }
    best_tau.ok_or(Error::ConstantMap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_of_primary_red_matches_reference() {
        let [l, a, b] = srgb_to_lab(255, 0, 0);
        assert!((l - 53.2329).abs() < 0.5, "L = {l}");
        assert!((a - 80.1093).abs() < 0.5, "a = {a}");
        assert!((b - 67.2201).abs() < 0.5, "b = {b}");
    }

    #[test]
    fn lab_of_white_and_black() {
        let [l, a, b] = srgb_to_lab(255, 255, 255);
        assert!((l - 100.0).abs() < 1e-3);
        assert!(a.abs() < 1e-3 && b.abs() < 1e-3);
        let [l, a, b] = srgb_to_lab(0, 0, 0);
        assert!(l.abs() < 1e-9 && a.abs() < 1e-9 && b.abs() < 1e-9);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = RasterImage::from_fn(7, 5, |x, y| [(x * 31) as u8, (y * 47) as u8, 200]);
        let out = img.resize(7, 5).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn resize_two_by_two_to_one_averages() {
        let img = RasterImage::new(2, 2, vec![10, 0, 0, 20, 0, 0, 30, 0, 0, 60, 0, 0]).unwrap();
        let out = resize_bilinear(&img.to_planar(), 1, 1).unwrap();
        assert!((out.get(0, 0, 0) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn otsu_splits_a_bimodal_map() {
        let map = SaliencyMap::from_fn(16, 4, |x, _| if x < 8 { 0.1 } else { 0.9 });
        let tau = otsu_threshold(&map).unwrap();
        let q_lo = quantize(0.1);
        let q_hi = quantize(0.9);
        assert!(tau > q_lo && tau <= q_hi, "tau = {tau}");
        // Ties resolve to the smallest threshold.
        assert_eq!(tau, q_lo + 1);
    }

    #[test]
    fn otsu_rejects_constant_maps() {
        let map = SaliencyMap::from_fn(8, 8, |_, _| 0.42);
        assert!(matches!(otsu_threshold(&map), Err(Error::ConstantMap)));
    }

    #[test]
    fn mask_values_are_validated() {
        assert!(GrayMask::new(2, 1, vec![0, 2]).is_err());
        assert!(GrayMask::new(2, 1, vec![0, 1]).is_ok());
    }

    #[test]
    fn saliency_scores_are_validated() {
        assert!(SaliencyMap::new(1, 2, vec![0.0, 1.01]).is_err());
        assert!(SaliencyMap::new(1, 2, vec![0.0, 1.0]).is_ok());
    }
}
