//! A small dense NCHW tensor engine: the forward and backward operators
//! the three networks need, the class-balanced cross-entropy loss,
//! SGD with momentum, parameter (de)serialization, and a
//! finite-difference gradient checker.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::GrayMask;

/// Element type of [`Tensor`]: `f32` for training, `f64` for
/// verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + num_traits::Float
    + num_traits::NumAssignOps
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense 4-D array in (batch, channel, row, column) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::DimensionMismatch {
                context: "Tensor::from_vec",
                expected: format!("{expect} values for {shape:?}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.offset(b, c, y, x);
        self.data[i] += v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape, other.shape, "tensor addition shape");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| v.to_f64()).collect(),
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Tensor<S> {
        Tensor {
            shape: t.shape,
            data: t.data.iter().map(|&v| S::from_f64(v)).collect(),
        }
    }
}

/// Convolution by cross-correlation. `weight` is `(outC, inC, kH, kW)`,
/// `bias` has one entry per output channel, and
/// `outH = (H + 2 pad - kH) / stride + 1`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let [n, in_c, h, w] = input.shape();
    let [out_c, k_in, kh, kw] = weight.shape();
    if k_in != in_c {
        return Err(Error::DimensionMismatch {
            context: "conv2d",
            expected: format!("{in_c} input channels"),
            actual: format!("kernel expects {k_in}"),
        });
    }
    if bias.len() != out_c {
        return Err(Error::DimensionMismatch {
            context: "conv2d",
            expected: format!("{out_c} bias entries"),
            actual: format!("{}", bias.len()),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::DimensionMismatch {
            context: "conv2d",
            expected: format!("input at least {kh}x{kw} after padding"),
            actual: format!("{h}x{w} with pad {pad}"),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    for b in 0..n {
        for (oc, &b0) in bias.iter().enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ic in 0..in_c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += input.get(b, ic, iy as usize, ix as usize)
                                    * weight.get(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights, and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Vec<S>) {
    let [n, in_c, h, w] = input.shape();
    let [out_c, _, kh, kw] = weight.shape();
    let [_, _, oh, ow] = grad_out.shape();

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = vec![S::zero(); out_c];

    for b in 0..n {
        for (oc, gb) in grad_b.iter_mut().enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.get(b, oc, oy, ox);
                    *gb += g;
                    for ic in 0..in_c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let iy = iy as usize;
                                let ix = ix as usize;
                                grad_w.add_at(oc, ic, ky, kx, g * input.get(b, ic, iy, ix));
                                grad_in.add_at(b, ic, iy, ix, g * weight.get(oc, ic, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Transposed convolution (the adjoint of [`conv2d`] with zero
/// padding). `weight` is `(inC, outC, kH, kW)` and
/// `outH = (H - 1) * stride + kH`.
pub fn transposed_conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    let [n, in_c, h, w] = input.shape();
    let [k_in, out_c, kh, kw] = weight.shape();
    if k_in != in_c {
        return Err(Error::DimensionMismatch {
            context: "transposed_conv2d",
            expected: format!("{in_c} input channels"),
            actual: format!("kernel expects {k_in}"),
        });
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    for b in 0..n {
        for ic in 0..in_c {
            for y in 0..h {
                for x in 0..w {
                    let v = input.get(b, ic, y, x);
                    for oc in 0..out_c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                out.add_at(
                                    b,
                                    oc,
                                    y * stride + ky,
                                    x * stride + kx,
                                    v * weight.get(ic, oc, ky, kx),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`transposed_conv2d`] with respect to input and weights.
pub fn transposed_conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let [n, in_c, h, w] = input.shape();
    let [_, out_c, kh, kw] = weight.shape();
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    for b in 0..n {
        for ic in 0..in_c {
            for y in 0..h {
                for x in 0..w {
                    let v = input.get(b, ic, y, x);
                    let mut acc = S::zero();
                    for oc in 0..out_c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let g = grad_out.get(b, oc, y * stride + ky, x * stride + kx);
                                acc += g * weight.get(ic, oc, ky, kx);
                                grad_w.add_at(ic, oc, ky, kx, g * v);
                            }
                        }
                    }
                    grad_in.set(b, ic, y, x, acc);
                }
            }
        }
    }
    (grad_in, grad_w)
}

/// Argmax bookkeeping for the pooling backward pass.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    /// Flat input offset of each output's maximum.
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd inputs are extended by
/// replicating the last row/column; ties pick the first element in
/// scan order, and replicated cells resolve to their source, so the
/// gradient always lands inside the real input.
pub fn max_pool2<S: Scalar>(input: &Tensor<S>) -> (Tensor<S>, PoolIndices) {
    let [n, c, h, w] = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let mut ai = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_off = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            // Clamping replicates the border for odd sizes.
                            let iy = (2 * oy + dy).min(h - 1);
                            let ix = (2 * ox + dx).min(w - 1);
                            let v = input.get(b, ch, iy, ix);
                            if v > best {
                                best = v;
                                best_off = ((b * c + ch) * h + iy) * w + ix;
                            }
                        }
                    }
                    out.set(b, ch, oy, ox, best);
                    argmax[ai] = best_off;
                    ai += 1;
                }
            }
        }
    }
    (
        out,
        PoolIndices {
            input_shape: input.shape(),
            argmax,
        },
    )
}

/// Routes pooled gradients back to each window's argmax.
pub fn max_pool2_backward<S: Scalar>(indices: &PoolIndices, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut grad_in = Tensor::zeros(indices.input_shape);
    for (i, &off) in indices.argmax.iter().enumerate() {
        grad_in.data_mut()[off] += grad_out.data()[i];
    }
    grad_in
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// `grad_out` masked to where the forward input was positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    assert_eq!(input.shape(), grad_out.shape());
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor {
        shape: input.shape(),
        data,
    }
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| S::one() / (S::one() + (-v).exp()))
}

/// Backward through the sigmoid given its forward output.
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    assert_eq!(output.shape(), grad_out.shape());
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (S::one() - y))
        .collect();
    Tensor {
        shape: output.shape(),
        data,
    }
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    assert!(!inputs.is_empty(), "concat of nothing");
    let [n, _, h, w] = inputs[0].shape();
    for t in inputs {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::DimensionMismatch {
                context: "concat_channels",
                expected: format!("batch {n}, {h}x{w}"),
                actual: format!("batch {tn}, {th}x{tw}"),
            });
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut out = Tensor::zeros([n, c_total, h, w]);
    for b in 0..n {
        let mut c_base = 0;
        for t in inputs {
            let c = t.shape()[1];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(b, c_base + ch, y, x, t.get(b, ch, y, x));
                    }
                }
            }
            c_base += c;
        }
    }
    Ok(out)
}

/// Splits a tensor back into channel groups; the inverse of
/// [`concat_channels`].
pub fn split_channels<S: Scalar>(input: &Tensor<S>, sizes: &[usize]) -> Vec<Tensor<S>> {
    let [n, c, h, w] = input.shape();
    assert_eq!(
        sizes.iter().sum::<usize>(),
        c,
        "split sizes must cover all channels"
    );
    let mut out = Vec::with_capacity(sizes.len());
    let mut c_base = 0;
    for &sz in sizes {
        let mut t = Tensor::zeros([n, sz, h, w]);
        for b in 0..n {
            for ch in 0..sz {
                for y in 0..h {
                    for x in 0..w {
                        t.set(b, ch, y, x, input.get(b, c_base + ch, y, x));
                    }
                }
            }
        }
        out.push(t);
        c_base += sz;
    }
    out
}

/// Keeps the centered `target_h` x `target_w` window.
pub fn crop_center<S: Scalar>(input: &Tensor<S>, target_h: usize, target_w: usize) -> Tensor<S> {
    let [n, c, h, w] = input.shape();
    assert!(target_h <= h && target_w <= w, "crop larger than input");
    let off_y = (h - target_h) / 2;
    let off_x = (w - target_w) / 2;
    let mut out = Tensor::zeros([n, c, target_h, target_w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..target_h {
                for x in 0..target_w {
                    out.set(b, ch, y, x, input.get(b, ch, y + off_y, x + off_x));
                }
            }
        }
    }
    out
}

/// Scatters a cropped gradient back into the uncropped shape (zeros
/// elsewhere).
pub fn crop_center_backward<S: Scalar>(grad_out: &Tensor<S>, full_shape: [usize; 4]) -> Tensor<S> {
    let [n, c, th, tw] = grad_out.shape();
    let [_, _, h, w] = full_shape;
    let off_y = (h - th) / 2;
    let off_x = (w - tw) / 2;
    let mut grad_in = Tensor::zeros(full_shape);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..th {
                for x in 0..tw {
                    grad_in.set(b, ch, y + off_y, x + off_x, grad_out.get(b, ch, y, x));
                }
            }
        }
    }
    grad_in
}

/// Probability clamp used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

/// Class-balanced cross-entropy over a probability map.
///
/// With `alpha` the background fraction of the ground truth, the loss
/// is `-alpha * sum ln p` over foreground minus
/// `(1 - alpha) * sum ln(1 - p)` over background; probabilities are
/// clamped to `[eps, 1-eps]`. Returns the loss and its gradient with
/// respect to the (unclamped) probabilities. An all-foreground mask
/// drives `alpha` to 0 and thus the loss to 0; callers that care warn.
pub fn balanced_xent_loss<S: Scalar>(pred: &Tensor<S>, gt: &GrayMask) -> Result<(f64, Tensor<S>)> {
    let [n, c, h, w] = pred.shape();
    if n != 1 || c != 1 || h != gt.height() || w != gt.width() {
        return Err(Error::DimensionMismatch {
            context: "balanced_xent_loss",
            expected: format!("1x1x{}x{} prediction", gt.height(), gt.width()),
            actual: format!("{:?}", pred.shape()),
        });
    }
    let pos = gt.positives();
    let total = gt.len();
    let alpha = (total - pos) as f64 / total as f64;

    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for y in 0..h {
        for x in 0..w {
            let p = pred
                .get(0, 0, y, x)
                .to_f64()
                .clamp(PROB_EPS, 1.0 - PROB_EPS);
            if gt.get(x, y) {
                loss -= alpha * p.ln();
                grad.set(0, 0, y, x, S::from_f64(-alpha / p));
            } else {
                loss -= (1.0 - alpha) * (1.0 - p).ln();
                grad.set(0, 0, y, x, S::from_f64((1.0 - alpha) / (1.0 - p)));
            }
        }
    }
    Ok((loss, grad))
}

/// Plain binary cross-entropy of a scalar prediction, for window-level
/// supervision. Returns the loss and `dL/dp`.
pub fn scalar_xent_loss(p: f64, label: bool) -> (f64, f64) {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        (-pc.ln(), -1.0 / pc)
    } else {
        (-(1.0 - pc).ln(), 1.0 / (1.0 - pc))
    }
}

/// Named parameter tensors with a format version tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

/// Current on-disk format version.
pub const PARAMS_VERSION: u32 = 1;

const PARAMS_MAGIC: &[u8; 4] = b"CRPW";

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Moves every entry of `other` in, prefixing names with
    /// `prefix` + `.`.
    pub fn adopt(&mut self, prefix: &str, other: ModelParams<S>) {
        for (name, t) in other.tensors {
            self.tensors.insert(format!("{prefix}.{name}"), t);
        }
    }

    /// Extracts the entries under `prefix` + `.`, stripping the prefix.
    pub fn extract(&self, prefix: &str) -> ModelParams<S> {
        let lead = format!("{prefix}.");
        let mut out = ModelParams::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::<T>::from_f64(&v.to_f64())))
                .collect(),
        }
    }

    /// Writes the binary parameter format: magic, version, tensor
    /// count, then per tensor its name, rank, dims, and raw
    /// little-endian `f32` data. The round trip is bit-exact for `f32`
    /// parameters.
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&4u32.to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        ModelParams::new()
    }
}

impl ModelParams<f32> {
    /// Reads the format written by [`ModelParams::save`].
    pub fn load(mut r: impl Read) -> Result<ModelParams<f32>> {
        fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
            r.read_exact(buf)
                .map_err(|_| Error::CorruptModel("unexpected end of file".into()))
        }
        fn read_u32(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            Ok(u32::from_le_bytes(b))
        }

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::CorruptModel("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PARAMS_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: PARAMS_VERSION,
            });
        }
        let count = read_u32(&mut r)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 16 {
                return Err(Error::CorruptModel(format!("name length {name_len}")));
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::CorruptModel("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank != 4 {
                return Err(Error::CorruptModel(format!("rank {rank}, expected 4")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(&mut r)? as usize;
            }
            let len: usize = shape.iter().product();
            if len > 1 << 28 {
                return Err(Error::CorruptModel(format!("tensor of {len} values")));
            }
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 4];
            for _ in 0..len {
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            if params.contains(&name) {
                return Err(Error::CorruptModel(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(params)
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct OptimState<S> {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        OptimState {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

///// One momentum step on every parameter present in `grads`:
/// `v <- momentum * v - lr * g`, then `w <- w + v`.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ModelParams<S>,
    state: &mut OptimState<S>,
) {
    let lr = S::from_f64(state.learning_rate);
    let mom = S::from_f64(state.momentum);
    for (name, g) in grads.iter() {
        let w = params.get_mut(name);
        assert_eq!(w.shape(), g.shape(), "gradient shape for {name}");
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((wv, vv), gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mom * *vv - lr * *gv;
            *wv += *vv;
        }
    }
}

/// One sampled parameter in a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Central-difference step size.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Verifies analytic gradients against central finite differences in
/// double precision.
///
/// Samples `sample_fraction` of all scalar parameters (at least one per
/// tensor), perturbs each by `±step`, and reports
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    params: &mut ModelParams<f64>,
    analytic: &ModelParams<f64>,
    mut loss_fn: impl FnMut(&ModelParams<f64>) -> f64,
    sample_fraction: f64,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    let mut entries = Vec::new();
    let mut max_rel_err = 0.0f64;
    for name in names {
        let len = params.get(&name).len();
        let samples = ((len as f64 * sample_fraction).ceil() as usize).clamp(1, len);
        let picked = rand::seq::index::sample(rng, len, samples);
        for index in picked.iter() {
            let orig = params.get(&name).data()[index];
            params.get_mut(&name).data_mut()[index] = orig + step;
            let up = loss_fn(params);
            params.get_mut(&name).data_mut()[index] = orig - step;
            let down = loss_fn(params);
            params.get_mut(&name).data_mut()[index] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic_v = analytic.get(&name).data()[index];
            let rel_err =
                (analytic_v - numeric).abs() / analytic_v.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel_err);
            entries.push(GradCheckEntry {
                name: name.clone(),
                index,
                analytic: analytic_v,
                numeric,
                rel_err,
            });
        }
    }
    GradCheckReport {
        entries,
        max_rel_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_ones_counts_window_overlap() {
        let input = Tensor::from_vec([1, 1, 3, 3], vec![1.0f64; 9]).unwrap();
        let kernel = Tensor::from_vec([1, 1, 3, 3], vec![1.0f64; 9]).unwrap();
        let out = conv2d(&input, &kernel, &[0.0], 1, 1).unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0, 1), 6.0);
        assert_eq!(out.get(0, 0, 1, 0), 6.0);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor([2, 3, 4, 5], &mut rng);
        let mut kernel = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            kernel.set(c, c, 0, 0, 1.0);
        }
        let out = conv2d(&input, &kernel, &[0.0; 3], 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor([2, 3, 8, 8], &mut rng);
        let kernel = rand_tensor([4, 3, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv2d(&input, &kernel, &bias, 1, 0).unwrap();

        // Straight quadruple loop, written independently of conv2d.
        for b in 0..2 {
            for oc in 0..4 {
                for oy in 0..6 {
                    for ox in 0..6 {
                        let mut acc = bias[oc];
                        for ic in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += input.get(b, ic, oy + ky, ox + kx)
                                        * kernel.get(oc, ic, ky, kx);
                                }
                            }
                        }
                        assert!((out.get(b, oc, oy, ox) - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn tconv_of_single_pixel_is_the_kernel() {
        let input = Tensor::from_vec([1, 1, 1, 1], vec![2.5f64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = rand_tensor([1, 1, 3, 3], &mut rng);
        let out = transposed_conv2d(&input, &kernel, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                assert!((out.get(0, 0, y, x) - 2.5 * kernel.get(0, 0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_and_tconv_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // <conv(x), y> must equal <x, tconv(y)> with the shared kernel
        // tensor, read as (outC, inC, ...) by conv and (inC, outC, ...)
        // by tconv. Sizes are chosen so the strided conv covers its
        // input exactly.
        let x = rand_tensor([1, 2, 7, 7], &mut rng);
        let kernel = rand_tensor([3, 2, 3, 3], &mut rng);
        let stride = 2;
        let cx = conv2d(&x, &kernel, &[0.0; 3], stride, 0).unwrap();
        let y = rand_tensor(cx.shape(), &mut rng);
        let ty = transposed_conv2d(&y, &kernel, stride).unwrap();
        assert_eq!(ty.shape(), x.shape());

        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-12);
    }

    #[test]
    fn pool_takes_window_max_and_routes_ties_first() {
        let input = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = max_pool2(&input);
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);

        let constant = Tensor::from_vec([1, 1, 2, 2], vec![7.0f64; 4]).unwrap();
        let (cout, cidx) = max_pool2(&constant);
        assert_eq!(cout.get(0, 0, 0, 0), 7.0);
        let g = Tensor::from_vec([1, 1, 1, 1], vec![1.0f64]).unwrap();
        let gin = max_pool2_backward(&cidx, &g);
        // Tie goes to the top-left element.
        assert_eq!(gin.data(), &[1.0, 0.0, 0.0, 0.0]);
        let gin = max_pool2_backward(&idx, &g);
        assert_eq!(gin.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_replicates_odd_edges() {
        let input = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let (out, _) = max_pool2(&input);
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert_eq!(out.get(0, 0, 0, 0), 5.0);
        assert_eq!(out.get(0, 0, 0, 1), 6.0);
        assert_eq!(out.get(0, 0, 1, 0), 8.0);
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
    }

    #[test]
    fn pool_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor([2, 3, 6, 8], &mut rng);
        let (out, _) = max_pool2(&input);
        for b in 0..2 {
            for c in 0..3 {
                for oy in 0..3 {
                    for ox in 0..4 {
                        let m = input
                            .get(b, c, 2 * oy, 2 * ox)
                            .max(input.get(b, c, 2 * oy, 2 * ox + 1))
                            .max(input.get(b, c, 2 * oy + 1, 2 * ox))
                            .max(input.get(b, c, 2 * oy + 1, 2 * ox + 1));
                        assert_eq!(out.get(b, c, oy, ox), m);
                    }
                }
            }
        }
    }

    #[test]
    fn activations_match_definitions() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let s = sigmoid(&Tensor::from_vec([1, 1, 1, 1], vec![0.0f64]).unwrap());
        assert!((s.get(0, 0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor([1, 2, 3, 3], &mut rng);
        let b = rand_tensor([1, 3, 3, 3], &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape()[1], 5);
        let parts = split_channels(&cat, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros([1, 1, 3, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn balanced_loss_on_half_probabilities() {
        // One salient pixel out of four, all predictions 0.5.
        let gt = GrayMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let pred = Tensor::from_vec([1, 1, 2, 2], vec![0.5f64; 4]).unwrap();
        let (loss, _) = balanced_xent_loss(&pred, &gt).unwrap();
        assert!((loss - 1.5 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn balanced_loss_is_tiny_on_perfect_prediction() {
        let gt = GrayMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let pred = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = balanced_xent_loss(&pred, &gt).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn balanced_loss_vanishes_without_background() {
        let gt = GrayMask::new(2, 1, vec![1, 1]).unwrap();
        let pred = Tensor::from_vec([1, 1, 1, 2], vec![0.3f64, 0.9]).unwrap();
        let (loss, _) = balanced_xent_loss(&pred, &gt).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn balanced_loss_label_complement_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt_data: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2u8)).collect();
        let pred_data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let gt = GrayMask::new(4, 3, gt_data.clone()).unwrap();
        let pred = Tensor::from_vec([1, 1, 3, 4], pred_data.clone()).unwrap();
        let (loss, _) = balanced_xent_loss(&pred, &gt).unwrap();

        let gt_c = GrayMask::new(4, 3, gt_data.iter().map(|v| 1 - v).collect()).unwrap();
        let pred_c =
            Tensor::from_vec([1, 1, 3, 4], pred_data.iter().map(|p| 1.0 - p).collect()).unwrap();
        let (loss_c, _) = balanced_xent_loss(&pred_c, &gt_c).unwrap();
        assert!((loss - loss_c).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_without_momentum_is_plain_descent() {
        let mut params = ModelParams::new();
        params.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 2.0]).unwrap(),
        );
        let mut grads = ModelParams::new();
        grads.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![0.5f64, -1.0]).unwrap(),
        );
        let mut state = OptimState::new(0.1, 0.0);
        sgd_step(&mut params, &grads, &mut state);
        let w = params.get("w").data();
        assert!((w[0] - 0.95).abs() < 1e-12);
        assert!((w[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_steps() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![1.0f64]).unwrap());
        let mut state = OptimState::new(0.1, 0.9);
        let mut grads = ModelParams::new();
        grads.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]).unwrap());
        sgd_step(&mut params, &grads, &mut state);
        // v1 = -0.2, w = 0.8
        grads.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![1.0f64]).unwrap());
        sgd_step(&mut params, &grads, &mut state);
        // v2 = 0.9 * -0.2 - 0.1 = -0.28, w = 0.52
        assert!((params.get("w").data()[0] - 0.52).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params_alone() {
        let mut params = ModelParams::new();
        params.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![3.0f64, -4.0]).unwrap(),
        );
        let mut grads = ModelParams::new();
        grads.insert("w", Tensor::zeros([1, 1, 1, 2]));
        let before = params.clone();
        let mut state = OptimState::new(0.5, 0.9);
        sgd_step(&mut params, &grads, &mut state);
        assert_eq!(params, before);
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let mut params: ModelParams<f32> = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (i, shape) in [[2, 3, 3, 3], [1, 1, 1, 4], [4, 1, 1, 1]]
            .iter()
            .enumerate()
        {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            params.insert(
                format!("t{i}.weight"),
                Tensor::from_vec(*shape, data).unwrap(),
            );
        }
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        let loaded = ModelParams::load(buf.as_slice()).unwrap();
        assert_eq!(params, loaded);

        // And the serialized form itself is stable.
        let mut buf2 = Vec::new();
        loaded.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn load_rejects_garbage_and_bad_versions() {
        assert!(matches!(
            ModelParams::load(&b"NOPE"[..]),
            Err(Error::CorruptModel(_))
        ));
        let mut buf = Vec::new();
        ModelParams::<f32>::new().save(&mut buf).unwrap();
        buf[4] = 99;
        assert!(matches!(
            ModelParams::load(buf.as_slice()),
            Err(Error::ModelVersion { found: 99, .. })
        ));
        // Truncation is caught.
        let mut buf = Vec::new();
        let mut p: ModelParams<f32> = ModelParams::new();
        p.insert("w", Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        p.save(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            ModelParams::load(buf.as_slice()),
            Err(Error::CorruptModel(_))
        ));
    }

    #[test]
    fn grad_check_accepts_a_linear_model() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![0.7f64]).unwrap());
        let mut analytic = ModelParams::new();
        analytic.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![3.0f64]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let report = grad_check(
            &mut params,
            &analytic,
            |p| 3.0 * p.get("w").data()[0] + 1.0,
            1.0,
            GRAD_CHECK_STEP,
            &mut rng,
        );
        assert!(report.max_rel_err < 1e-10, "err = {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_a_corrupted_gradient() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![0.7f64]).unwrap());
        let mut analytic = ModelParams::new();
        // Claim 4.5 where the true slope is 3.
        analytic.insert("w", Tensor::from_vec([1, 1, 1, 1], vec![4.5f64]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let report = grad_check(
            &mut params,
            &analytic,
            |p| 3.0 * p.get("w").data()[0],
            1.0,
            GRAD_CHECK_STEP,
            &mut rng,
        );
        assert!(report.max_rel_err > 1e-2);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor([1, 2, 5, 5], &mut rng);
        let kernel = rand_tensor([3, 2, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        // Scalar objective: sum of a fixed random projection.
        let proj = rand_tensor([1, 3, 3, 3], &mut rng);
        let loss = |inp: &Tensor<f64>, ker: &Tensor<f64>, bias: &[f64]| -> f64 {
            let out = conv2d(inp, ker, bias, 2, 1).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };

        let (grad_in, grad_w, grad_b) = conv2d_backward(&input, &kernel, 2, 1, &proj);

        let check = |analytic: f64, mut bump: Box<dyn FnMut(f64) -> f64>| {
            let step = 1e-6;
            let up = bump(step);
            let down = bump(-step);
            let numeric = (up - down) / (2.0 * step);
            assert!(
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8) < 1e-4,
                "analytic {analytic} vs numeric {numeric}"
            );
        };

        for idx in [0usize, 7, 23] {
            let input = input.clone();
            let kernel = kernel.clone();
            let bias = bias.clone();
            check(
                grad_in.data()[idx],
                Box::new(move |d| {
                    let mut t = input.clone();
                    t.data_mut()[idx] += d;
                    loss(&t, &kernel, &bias)
                }),
            );
        }
        for idx in [0usize, 11, 53] {
            let input = input.clone();
            let kernel = kernel.clone();
            let bias = bias.clone();
            check(
                grad_w.data()[idx],
                Box::new(move |d| {
                    let mut k = kernel.clone();
                    k.data_mut()[idx] += d;
                    loss(&input, &k, &bias)
                }),
            );
        }
        for idx in 0..3 {
            let input = input.clone();
            let kernel = kernel.clone();
            let bias = bias.clone();
            check(
                grad_b[idx],
                Box::new(move |d| {
                    let mut b = bias.clone();
                    b[idx] += d;
                    loss(&input, &kernel, &b)
                }),
            );
        }
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = rand_tensor([1, 2, 3, 3], &mut rng);
        let kernel = rand_tensor([2, 3, 4, 4], &mut rng);
        let out = transposed_conv2d(&input, &kernel, 2).unwrap();
        let proj = rand_tensor(out.shape(), &mut rng);
        let loss = |inp: &Tensor<f64>, ker: &Tensor<f64>| -> f64 {
            let out = transposed_conv2d(inp, ker, 2).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let (grad_in, grad_w) = transposed_conv2d_backward(&input, &kernel, 2, &proj);

        let step = 1e-6;
        for idx in [0usize, 8, 17] {
            let mut t = input.clone();
            t.data_mut()[idx] += step;
            let up = loss(&t, &kernel);
            t.data_mut()[idx] -= 2.0 * step;
            let down = loss(&t, &kernel);
            let numeric = (up - down) / (2.0 * step);
            let a = grad_in.data()[idx];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4);
        }
        for idx in [0usize, 31, 95] {
            let mut k = kernel.clone();
            k.data_mut()[idx] += step;
            let up = loss(&input, &k);
            k.data_mut()[idx] -= 2.0 * step;
            let down = loss(&input, &k);
            let numeric = (up - down) / (2.0 * step);
            let a = grad_w.data()[idx];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4);
        }
    }
}
