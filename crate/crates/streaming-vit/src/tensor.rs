//! Dense row-major tensors and the handful of kernels everything else is
//! built from: matmul, row softmax, layer norm, GELU, convolution and
//! transposed convolution.
//!
//! All kernels are sequential with a fixed iteration order, so identical
//! inputs give bit-identical outputs within one element type. Kernels that
//! multiply-accumulate report their work to a [`MacCounter`]; one MAC is one
//! scalar multiply-accumulate. Softmax, layer norm and activations do not
//! count as MACs; they report processed element counts on a separate
//! channel so complexity reports can list them without polluting MAC
//! totals.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Attribution label for counted work. The counter keeps one bucket per
/// stage so an instrumented run can be split into the same line items a
/// closed-form complexity report uses.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stage {
    PatchEmbed,
    SpatialAttention,
    /// Temporal cross-attention logits + aggregation only.
    TemporalCore,
    /// Temporal query/output projections and gate fusion.
    TemporalProj,
    Mlp,
    ResNet,
    Adaptor,
    Decoder,
    Other,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::PatchEmbed,
        Stage::SpatialAttention,
        Stage::TemporalCore,
        Stage::TemporalProj,
        Stage::Mlp,
        Stage::ResNet,
        Stage::Adaptor,
        Stage::Decoder,
        Stage::Other,
    ];

    pub fn index(self) -> usize {
        match self {
            Stage::PatchEmbed => 0,
            Stage::SpatialAttention => 1,
            Stage::TemporalCore => 2,
            Stage::TemporalProj => 3,
            Stage::Mlp => 4,
            Stage::ResNet => 5,
            Stage::Adaptor => 6,
            Stage::Decoder => 7,
            Stage::Other => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::PatchEmbed => "patch_embed",
            Stage::SpatialAttention => "spatial_attention",
            Stage::TemporalCore => "temporal_core",
            Stage::TemporalProj => "temporal_proj",
            Stage::Mlp => "mlp",
            Stage::ResNet => "resnet",
            Stage::Adaptor => "adaptor",
            Stage::Decoder => "decoder",
            Stage::Other => "other",
        }
    }
}

/// Multiply-accumulate counter with per-stage attribution.
///
/// Interior mutability keeps kernel signatures read-only; the counter is
/// not `Sync`, which matches its contract of belonging to a single
/// counting scope.
pub struct MacCounter {
    enabled: bool,
    macs: Cell<u64>,
    elems: Cell<u64>,
    stage: Cell<Stage>,
    buckets: [Cell<u64>; 9],
}

impl MacCounter {
    pub fn new(enabled: bool) -> MacCounter {
        MacCounter {
            enabled,
            macs: Cell::new(0),
            elems: Cell::new(0),
            stage: Cell::new(Stage::Other),
            buckets: std::array::from_fn(|_| Cell::new(0)),
        }
    }

    pub fn enabled() -> MacCounter {
        MacCounter::new(true)
    }

    pub fn disabled() -> MacCounter {
        MacCounter::new(false)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn add_macs(&self, n: u64) {
        if self.enabled {
            self.macs.set(self.macs.get() + n);
            let b = &self.buckets[self.stage.get().index()];
            b.set(b.get() + n);
        }
    }

    pub fn add_elems(&self, n: u64) {
        if self.enabled {
            self.elems.set(self.elems.get() + n);
        }
    }

    /// Folds work counted elsewhere into this counter under the given
    /// stage, e.g. when merging a sub-run's tally.
    pub fn add_macs_to_stage(&self, stage: Stage, n: u64) {
        if self.enabled {
            self.macs.set(self.macs.get() + n);
            let b = &self.buckets[stage.index()];
            b.set(b.get() + n);
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn elems(&self) -> u64 {
        self.elems.get()
    }

    pub fn stage_macs(&self, stage: Stage) -> u64 {
        self.buckets[stage.index()].get()
    }

    pub fn reset(&self) {
        self.macs.set(0);
        self.elems.set(0);
        for b in &self.buckets {
            b.set(0);
        }
    }

    /// Attribute counted work to `stage` until the guard drops.
    pub fn scope(&self, stage: Stage) -> StageScope<'_> {
        let prev = self.stage.replace(stage);
        StageScope { counter: self, prev }
    }
}

pub struct StageScope<'a> {
    counter: &'a MacCounter,
    prev: Stage,
}

impl Drop for StageScope<'_> {
    fn drop(&mut self) {
        self.counter.stage.set(self.prev);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} wants {want} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Tensor<T> {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim(op, format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::dim(op, format!("expected rank 4, got shape {:?}", self.shape))),
        }
    }

    /// Same backing data under a new shape of equal length.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::dim(
                "reshaped",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn bits_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, counter: &MacCounter) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..ka {
            let aip = ad[i * ka + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    counter.add_macs((m * ka * n) as u64);
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("transpose2")?;
    let ad = a.data();
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = ad[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Rows get max-subtracted before exponentiation so large logits stay
/// finite; the subtraction does not change the result in exact arithmetic.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>, counter: &MacCounter) -> Result<Tensor<T>> {
    let (r, c) = m.dims2("softmax_rows")?;
    if c == 0 {
        return Err(Error::dim("softmax_rows", "zero-width rows".to_string()));
    }
    let md = m.data();
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        let row = &md[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = T::ZERO;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    counter.add_elems((r * c) as u64);
    Tensor::from_vec(&[r, c], out)
}

/// The normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Normalizes over the trailing axis. Variance uses the 1/C convention;
/// a constant token therefore maps to `beta` exactly.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let c = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank 0 input".to_string()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    if c == 0 {
        return Err(Error::dim("layer_norm", "zero-width tokens".to_string()));
    }
    let tokens = x.len() / c;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(eps);
    let mut out = vec![T::ZERO; x.len()];
    for t in 0..tokens {
        let row = &xd[t * c..(t + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_c;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_c;
        let inv_std = T::ONE / (var + eps).sqrt();
        let orow = &mut out[t * c..(t + 1) * c];
        for j in 0..c {
            orow[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
        }
    }
    counter.add_elems(x.len() as u64);
    Tensor::from_vec(x.shape(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU; this form is canonical for the whole pipeline.
pub fn gelu<T: Scalar>(x: &Tensor<T>, counter: &MacCounter) -> Tensor<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    counter.add_elems(x.len() as u64);
    x.map(|v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_derivative<T: Scalar>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * v * sech2 * c * (T::ONE + three * a * v * v)
}

/// Convolution of `x` `[C_in, H, W]` with `k` `[C_out, C_in, kh, kw]`.
/// Padding is applied physically, so the MAC count is exactly
/// `C_out * H' * W' * C_in * kh * kw`. Output sizes must come out integral;
/// a remainder is a dimension error, not a silent floor.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (ci, h, w) = x.dims3("conv2d")?;
    let (co, kci, kh, kw) = k.dims4("conv2d")?;
    if kci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride 0".to_string()));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input {h}x{w} with pad {pad}, kernel {kh}x{kw}, stride {stride} \
                 has no integral output size"
            ),
        ));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;

    let mut padded = vec![T::ZERO; ci * hp * wp];
    let xd = x.data();
    for c in 0..ci {
        for y in 0..h {
            let src = &xd[c * h * w + y * w..c * h * w + y * w + w];
            let dst_base = c * hp * wp + (y + pad) * wp + pad;
            padded[dst_base..dst_base + w].copy_from_slice(src);
        }
    }

    let kd = k.data();
    let mut out = vec![T::ZERO; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for c in 0..ci {
                    for ky in 0..kh {
                        let prow = c * hp * wp + (oy * stride + ky) * wp + ox * stride;
                        let krow = ((o * ci + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += padded[prow + kx] * kd[krow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    counter.add_macs((co * oh * ow * ci * kh * kw) as u64);
    Tensor::from_vec(&[co, oh, ow], out)
}

/// Transposed convolution of `x` `[C_in, H, W]` with `k`
/// `[C_in, C_out, 2s, 2s]`, fixed to the upsampling conventions used here:
/// stride `s` in {2, 4}, kernel size `2s`, padding `s/2`, output
/// `[C_out, H*s, W*s]`. Scatters into a padded buffer so every kernel tap
/// executes and the MAC count is exactly `C_in * H * W * C_out * (2s)^2`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (ci, h, w) = x.dims3("conv2d_transpose")?;
    let (kci, co, kh, kw) = k.dims4("conv2d_transpose")?;
    if kci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if stride != 2 && stride != 4 {
        return Err(Error::dim(
            "conv2d_transpose",
            format!("stride {stride} unsupported, this op is fixed to strides 2 and 4"),
        ));
    }
    if kh != 2 * stride || kw != 2 * stride {
        return Err(Error::dim(
            "conv2d_transpose",
            format!("kernel {kh}x{kw} must be {0}x{0} for stride {stride}", 2 * stride),
        ));
    }
    let pad = stride / 2;
    let oh = h * stride;
    let ow = w * stride;
    let hp = oh + stride; // (h - 1) * s + 2s
    let wp = ow + stride;

    let xd = x.data();
    let kd = k.data();
    let mut padded = vec![T::ZERO; co * hp * wp];
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[(c * h + y) * w + xx];
                for o in 0..co {
                    let kbase = ((c * co + o) * kh) * kw;
                    let obase = o * hp * wp;
                    for ky in 0..kh {
                        let orow = obase + (y * stride + ky) * wp + xx * stride;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            padded[orow + kx] += v * kd[krow + kx];
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![T::ZERO; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            let src = o * hp * wp + (y + pad) * wp + pad;
            let dst = (o * oh + y) * ow;
            out[dst..dst + ow].copy_from_slice(&padded[src..src + ow]);
        }
    }
    counter.add_macs((ci * h * w * co * kh * kw) as u64);
    Tensor::from_vec(&[co, oh, ow], out)
}
