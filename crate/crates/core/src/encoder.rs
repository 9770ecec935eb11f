//! One-dimensional CNN feature extractor.
//!
//! The canonical network maps a 1 x 1000 segment to a 2304-dimensional
//! feature vector through six conv/ReLU stages, five 2x max-pools and a final
//! adaptive max-pool to 9 positions:
//!
//! ```text
//! Conv(1->8,k7)   ReLU Pool2   1000 -> 500
//! Conv(8->16,k7)  ReLU Pool2    500 -> 250
//! Conv(16->32,k5) ReLU Pool2    250 -> 125
//! Conv(32->64,k5) ReLU Pool2    125 -> 62
//! Conv(64->128,k3) ReLU Pool2    62 -> 31
//! Conv(128->256,k3) ReLU AdaptiveMaxPool(9) Flatten -> 256 * 9 = 2304
//! ```
//!
//! Convolutions use stride 1, cross-correlation and (by default) same
//! padding. Max-pool ties route to the lowest index. Backpropagation is
//! written by hand; [`Trace`] caches what the backward pass needs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, Reader, Writer};
use crate::compress::{PruneMask, QuantizedParams};
use crate::segment::Segment;
use crate::{FEATURE_DIM, SEGMENT_LEN};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {found} (this build reads up to {supported})")]
    VersionMismatch { found: u8, supported: u8 },
    #[error("model file checksum mismatch (corrupt or truncated)")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv1d { in_ch: usize, out_ch: usize, kernel: usize, same_padding: bool },
    Relu,
    MaxPool1d { window: usize, stride: usize },
    AdaptiveMaxPool1d { target_len: usize },
    Flatten,
}

/// Channels x length of an activation tensor, stored channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub ch: usize,
    pub len: usize,
}

impl Shape {
    pub fn size(&self) -> usize {
        self.ch * self.len
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    pad: usize,
    in_len: usize,
    out_len: usize,
}

/// A validated layer stack: every layer's input shape is known and the
/// flattened output has the declared size.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
}

impl Architecture {
    pub fn new(input_len: usize, layers: Vec<LayerSpec>, output_dim: usize) -> Result<Self, EncoderError> {
        let mismatch = |msg: String| Err(EncoderError::ShapeMismatch(msg));
        if input_len == 0 {
            return mismatch("input length must be positive".into());
        }
        if layers.last() != Some(&LayerSpec::Flatten) {
            return mismatch("architecture must end with Flatten".into());
        }
        let mut shapes = vec![Shape { ch: 1, len: input_len }];
        for (idx, layer) in layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match *layer {
                LayerSpec::Conv1d { in_ch, out_ch, kernel, same_padding } => {
                    if in_ch != cur.ch || out_ch == 0 || kernel == 0 {
                        return mismatch(format!("layer {idx}: conv expects {in_ch} channels, input has {}", cur.ch));
                    }
                    let len = if same_padding { cur.len } else { cur.len.checked_sub(kernel - 1).unwrap_or(0) };
                    if len == 0 {
                        return mismatch(format!("layer {idx}: kernel {kernel} longer than input {}", cur.len));
                    }
                    Shape { ch: out_ch, len }
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool1d { window, stride } => {
                    if window == 0 || stride == 0 || window > cur.len {
                        return mismatch(format!("layer {idx}: pool window {window} over length {}", cur.len));
                    }
                    Shape { ch: cur.ch, len: (cur.len - window) / stride + 1 }
                }
                LayerSpec::AdaptiveMaxPool1d { target_len } => {
                    if target_len == 0 || target_len > cur.len {
                        return mismatch(format!("layer {idx}: adaptive target {target_len} over length {}", cur.len));
                    }
                    Shape { ch: cur.ch, len: target_len }
                }
                LayerSpec::Flatten => {
                    if idx + 1 != layers.len() {
                        return mismatch("Flatten must be the last layer".into());
                    }
                    Shape { ch: 1, len: cur.size() }
                }
            };
            shapes.push(next);
        }
        let out = shapes.last().unwrap().len;
        if out != output_dim {
            return mismatch(format!("architecture yields {out} features, declared {output_dim}"));
        }
        Ok(Self { layers, shapes })
    }

    /// The six-stage network producing 2304 features from 1000 samples.
    pub fn canonical() -> Self {
        let conv = |in_ch, out_ch, kernel| LayerSpec::Conv1d { in_ch, out_ch, kernel, same_padding: true };
        let pool = LayerSpec::MaxPool1d { window: 2, stride: 2 };
        let mut layers = Vec::new();
        for (i, o, k) in [(1, 8, 7), (8, 16, 7), (16, 32, 5), (32, 64, 5), (64, 128, 3)] {
            layers.extend([conv(i, o, k), LayerSpec::Relu, pool]);
        }
        layers.extend([
            conv(128, 256, 3),
            LayerSpec::Relu,
            LayerSpec::AdaptiveMaxPool1d { target_len: 9 },
            LayerSpec::Flatten,
        ]);
        Self::new(SEGMENT_LEN, layers, FEATURE_DIM).expect("canonical architecture is consistent")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().len
    }

    /// Input shape of layer `idx` (index `layers().len()` gives the output).
    pub fn shape_at(&self, idx: usize) -> Shape {
        self.shapes[idx]
    }

    /// Indices into `layers()` of the convolutions, in order.
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, LayerSpec::Conv1d { .. }))
    }

    fn geom(&self, idx: usize) -> ConvGeom {
        let LayerSpec::Conv1d { in_ch, out_ch, kernel, same_padding } = self.layers[idx] else {
            unreachable!("geom on non-conv layer")
        };
        ConvGeom {
            in_ch,
            out_ch,
            kernel,
            pad: if same_padding { (kernel - 1) / 2 } else { 0 },
            in_len: self.shapes[idx].len,
            out_len: self.shapes[idx + 1].len,
        }
    }

    /// (output length, weight count) of every conv layer.
    pub fn conv_dims(&self) -> Vec<ConvDims> {
        self.conv_layers()
            .map(|(idx, _)| {
                let g = self.geom(idx);
                ConvDims { in_ch: g.in_ch, out_ch: g.out_ch, kernel: g.kernel, pad: g.pad, in_len: g.in_len, out_len: g.out_len }
            })
            .collect()
    }
}

/// Public view of one convolution's geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvDims {
    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel
    }

    /// Valid output positions for tap `k`: outputs `t` in the range read input `t + k - pad`.
    pub fn tap_range(&self, k: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = (self.out_len as isize).min(self.in_len as isize - shift).max(t0 as isize) as usize;
        (t0, t1, shift)
    }
}

/// Weights (out_ch x in_ch x kernel, row-major) and biases of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        Self { weight: vec![0.0; out_ch * in_ch * kernel], bias: vec![0.0; out_ch] }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    Full,
    /// Weights are integers `y` standing for `y / 2^n`.
    Quantized(QuantizedParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    arch: Architecture,
    params: Vec<ConvParams>,
    precision: Precision,
    mask: Option<PruneMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub record_id: String,
    pub subject_id: String,
    /// Fingerprint of the model that produced the vector, when known.
    pub model_fingerprint: Option<[u8; 32]>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

impl EncoderModel {
    /// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .conv_dims()
            .iter()
            .map(|d| {
                let fan_in = (d.in_ch * d.kernel) as f64;
                let fan_out = (d.out_ch * d.kernel) as f64;
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                let weight = (0..d.weight_count()).map(|_| rng.random_range(-bound..bound)).collect();
                ConvParams { weight, bias: vec![0.0; d.out_ch] }
            })
            .collect();
        Self { arch, params, precision: Precision::Full, mask: None }
    }

    pub fn canonical(seed: u64) -> Self {
        Self::init(Architecture::canonical(), seed)
    }

    /// Full-precision model from explicit parameters.
    pub fn from_params(arch: Architecture, params: Vec<ConvParams>) -> Result<Self, EncoderError> {
        let dims = arch.conv_dims();
        if dims.len() != params.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "{} conv layers but {} parameter sets",
                dims.len(),
                params.len()
            )));
        }
        for (i, (d, p)) in dims.iter().zip(&params).enumerate() {
            if p.weight.len() != d.weight_count() || p.bias.len() != d.out_ch {
                return Err(EncoderError::ShapeMismatch(format!("conv {i}: parameter sizes do not match geometry")));
            }
        }
        Ok(Self { arch, params, precision: Precision::Full, mask: None })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        params: Vec<ConvParams>,
        precision: Precision,
        mask: Option<PruneMask>,
    ) -> Result<Self, EncoderError> {
        let mut model = Self::from_params(arch, params)?;
        model.precision = precision;
        if let Some(m) = &mask {
            model.check_mask(m)?;
        }
        model.mask = mask;
        Ok(model)
    }

    fn check_mask(&self, mask: &PruneMask) -> Result<(), EncoderError> {
        if mask.layers.len() != self.params.len()
            || mask.layers.iter().zip(&self.params).any(|(m, p)| m.len() != p.weight.len())
        {
            return Err(EncoderError::ShapeMismatch("prune mask not congruent with weights".into()));
        }
        let violates = mask
            .layers
            .iter()
            .zip(&self.params)
            .any(|(m, p)| m.iter().zip(&p.weight).any(|(&keep, &w)| !keep && w != 0.0));
        if violates {
            return Err(EncoderError::ShapeMismatch("pruned entries must hold zero weights".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[ConvParams] {
        &self.params
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    pub fn is_full_precision(&self) -> bool {
        matches!(self.precision, Precision::Full)
    }

    /// Short label: `full`, `q8`, `pruned20`, `q8+pruned20`.
    pub fn precision_tag(&self) -> String {
        let base = match &self.precision {
            Precision::Full => None,
            Precision::Quantized(q) => Some(format!("q{}", q.n)),
        };
        let pruned = self.mask.as_ref().map(|m| format!("pruned{}", (m.sparsity * 100.0).round() as u32));
        match (base, pruned) {
            (None, None) => "full".into(),
            (Some(b), None) => b,
            (None, Some(p)) => p,
            (Some(b), Some(p)) => format!("{b}+{p}"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ConvParams::len).sum()
    }

    /// Mutable parameters for optimizers. Only valid on full-precision models;
    /// callers must keep masked weights at zero.
    pub(crate) fn params_mut(&mut self) -> &mut [ConvParams] {
        debug_assert!(self.is_full_precision());
        &mut self.params
    }

    pub(crate) fn set_mask(&mut self, mask: Option<PruneMask>) {
        if let Some(m) = &mask {
            for (p, keep) in self.params.iter_mut().zip(&m.layers) {
                for (w, &k) in p.weight.iter_mut().zip(keep) {
                    if !k {
                        *w = 0.0;
                    }
                }
            }
        }
        self.mask = mask;
    }

    pub fn forward_values(&self, input: &[f64]) -> Result<Vec<f64>, EncoderError> {
        self.check_input(input)?;
        let mut act = input.to_vec();
        let mut conv_idx = 0;
        for (idx, layer) in self.arch.layers.iter().enumerate() {
            let shape = self.arch.shapes[idx];
            act = match *layer {
                LayerSpec::Conv1d { .. } => {
                    let out = conv_forward(&act, self.arch.geom(idx), &self.params[conv_idx]);
                    conv_idx += 1;
                    out
                }
                LayerSpec::Relu => {
                    act.iter_mut().for_each(|v| *v = v.max(0.0));
                    act
                }
                LayerSpec::MaxPool1d { window, stride } => {
                    pool_forward(&act, shape, self.arch.shapes[idx + 1].len, |j| (j * stride, j * stride + window)).0
                }
                LayerSpec::AdaptiveMaxPool1d { target_len } => {
                    pool_forward(&act, shape, target_len, |j| adaptive_bin(j, shape.len, target_len)).0
                }
                LayerSpec::Flatten => act,
            };
        }
        Ok(act)
    }

    pub fn forward(&self, segment: &Segment) -> Result<FeatureVector, EncoderError> {
        Ok(FeatureVector {
            values: self.forward_values(segment.values())?,
            record_id: segment.record_id.clone(),
            subject_id: segment.subject_id.clone(),
            model_fingerprint: None,
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<(), EncoderError> {
        if input.len() != self.arch.input_len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "input has {} samples, model expects {}",
                input.len(),
                self.arch.input_len()
            )));
        }
        Ok(())
    }

    /// Forward pass that keeps the activations needed by [`Trace::backward`].
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace, EncoderError> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut act = input.to_vec();
        let mut conv_idx = 0;
        for (idx, layer) in self.arch.layers.iter().enumerate() {
            let shape = self.arch.shapes[idx];
            let (next, cache) = match *layer {
                LayerSpec::Conv1d { .. } => {
                    let out = conv_forward(&act, self.arch.geom(idx), &self.params[conv_idx]);
                    conv_idx += 1;
                    (out, Cache::Conv { input: act })
                }
                LayerSpec::Relu => {
                    let out = act.iter().map(|v| v.max(0.0)).collect();
                    (out, Cache::Relu { input: act })
                }
                LayerSpec::MaxPool1d { window, stride } => {
                    let (out, argmax) =
                        pool_forward(&act, shape, self.arch.shapes[idx + 1].len, |j| (j * stride, j * stride + window));
                    (out, Cache::Pool { argmax })
                }
                LayerSpec::AdaptiveMaxPool1d { target_len } => {
                    let (out, argmax) = pool_forward(&act, shape, target_len, |j| adaptive_bin(j, shape.len, target_len));
                    (out, Cache::Pool { argmax })
                }
                LayerSpec::Flatten => (act, Cache::Flatten),
            };
            caches.push(cache);
            act = next;
        }
        Ok(Trace { caches, output: act })
    }

    /// Parameter gradients of `upstream . forward(input)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients, EncoderError> {
        self.forward_trace(input)?.backward(self, upstream)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u8(MODEL_VERSION);
        w.u32(self.arch.input_len() as u32);
        w.u32(self.arch.output_dim() as u32);
        w.u32(self.arch.layers.len() as u32);
        for layer in &self.arch.layers {
            match *layer {
                LayerSpec::Conv1d { in_ch, out_ch, kernel, same_padding } => {
                    w.u8(0);
                    w.u32(in_ch as u32);
                    w.u32(out_ch as u32);
                    w.u32(kernel as u32);
                    w.u8(same_padding as u8);
                }
                LayerSpec::Relu => w.u8(1),
                LayerSpec::MaxPool1d { window, stride } => {
                    w.u8(2);
                    w.u32(window as u32);
                    w.u32(stride as u32);
                }
                LayerSpec::AdaptiveMaxPool1d { target_len } => {
                    w.u8(3);
                    w.u32(target_len as u32);
                }
                LayerSpec::Flatten => w.u8(4),
            }
        }
        match &self.precision {
            Precision::Full => w.u8(0),
            Precision::Quantized(q) => {
                w.u8(1);
                w.u8(q.n as u8);
            }
        }
        match &self.mask {
            None => w.u8(0),
            Some(m) => {
                w.u8(1);
                w.f64(m.sparsity);
                for layer in &m.layers {
                    for chunk in layer.chunks(8) {
                        let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &keep)| b | ((keep as u8) << i));
                        w.u8(byte);
                    }
                }
            }
        }
        match &self.precision {
            Precision::Full => {
                for p in &self.params {
                    p.weight.iter().chain(&p.bias).for_each(|&v| w.f64(v));
                }
            }
            Precision::Quantized(q) => {
                for layer in &q.layers {
                    layer.weight.iter().chain(&layer.bias).for_each(|&v| w.i64(v));
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, EncoderError> {
        if data.len() < MODEL_MAGIC.len() || &data[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(EncoderError::BadMagic);
        }
        match data.get(MODEL_MAGIC.len()) {
            Some(&v) if v > MODEL_VERSION || v == 0 => {
                return Err(EncoderError::VersionMismatch { found: v, supported: MODEL_VERSION })
            }
            _ => {}
        }
        let payload = codec::verify_crc(data).ok_or(EncoderError::ChecksumMismatch)?;
        let malformed = |what: &str| EncoderError::Malformed(what.to_string());
        let mut r = Reader::new(&payload[MODEL_MAGIC.len() + 1..]);
        let short = |_| malformed("unexpected end of payload");
        let input_len = r.u32().map_err(short)? as usize;
        let output_dim = r.u32().map_err(short)? as usize;
        let n_layers = r.u32().map_err(short)? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let layer = match r.u8().map_err(short)? {
                0 => LayerSpec::Conv1d {
                    in_ch: r.u32().map_err(short)? as usize,
                    out_ch: r.u32().map_err(short)? as usize,
                    kernel: r.u32().map_err(short)? as usize,
                    same_padding: r.u8().map_err(short)? != 0,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::MaxPool1d {
                    window: r.u32().map_err(short)? as usize,
                    stride: r.u32().map_err(short)? as usize,
                },
                3 => LayerSpec::AdaptiveMaxPool1d { target_len: r.u32().map_err(short)? as usize },
                4 => LayerSpec::Flatten,
                k => return Err(malformed(&format!("unknown layer kind {k}"))),
            };
            layers.push(layer);
        }
        let arch = Architecture::new(input_len, layers, output_dim)?;
        let dims = arch.conv_dims();
        let quant_n = match r.u8().map_err(short)? {
            0 => None,
            1 => Some(r.u8().map_err(short)? as u32),
            t => return Err(malformed(&format!("unknown precision tag {t}"))),
        };
        let mask = match r.u8().map_err(short)? {
            0 => None,
            1 => {
                let sparsity = r.f64().map_err(short)?;
                let layers = dims
                    .iter()
                    .map(|d| {
                        let n = d.weight_count();
                        let bytes = r.take(n.div_ceil(8)).map_err(short)?;
                        Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
                    })
                    .collect::<Result<Vec<Vec<bool>>, EncoderError>>()?;
                Some(PruneMask { sparsity, layers })
            }
            t => return Err(malformed(&format!("unknown mask flag {t}"))),
        };
        let model = match quant_n {
            None => {
                let params = dims
                    .iter()
                    .map(|d| {
                        let mut read = |count: usize| -> Result<Vec<f64>, EncoderError> {
                            (0..count).map(|_| r.f64().map_err(short)).collect()
                        };
                        Ok(ConvParams { weight: read(d.weight_count())?, bias: read(d.out_ch)? })
                    })
                    .collect::<Result<Vec<_>, EncoderError>>()?;
                Self::from_parts(arch, params, Precision::Full, mask)?
            }
            Some(n) => {
                let layers = dims
                    .iter()
                    .map(|d| {
                        let mut read = |count: usize| -> Result<Vec<i64>, EncoderError> {
                            (0..count).map(|_| r.i64().map_err(short)).collect()
                        };
                        Ok(crate::compress::QuantConv { weight: read(d.weight_count())?, bias: read(d.out_ch)? })
                    })
                    .collect::<Result<Vec<_>, EncoderError>>()?;
                let q = QuantizedParams { n, layers };
                let params = q.reconstruct();
                Self::from_parts(arch, params, Precision::Quantized(q), mask)?
            }
        };
        if !r.is_empty() {
            return Err(malformed("trailing bytes after payload"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(codec::write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"ECGA";
pub const MODEL_VERSION: u8 = 1;

/// A model paired with its fingerprint, for producing tagged feature vectors.
pub struct Embedder<'a> {
    model: &'a EncoderModel,
    fingerprint: [u8; 32],
}

impl<'a> Embedder<'a> {
    pub fn new(model: &'a EncoderModel) -> Self {
        Self { model, fingerprint: model.fingerprint() }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn model(&self) -> &EncoderModel {
        self.model
    }

    pub fn embed(&self, segment: &Segment) -> Result<FeatureVector, EncoderError> {
        let mut v = self.model.forward(segment)?;
        v.model_fingerprint = Some(self.fingerprint);
        Ok(v)
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Conv { input: Vec<f64> },
    Relu { input: Vec<f64> },
    Pool { argmax: Vec<usize> },
    Flatten,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output) to every
    /// convolution's weights and biases.
    pub fn backward(&self, model: &EncoderModel, upstream: &[f64]) -> Result<Gradients, EncoderError> {
        if upstream.len() != self.output.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.output.len()
            )));
        }
        let arch = &model.arch;
        let mut grads = Gradients::zeros_like(model);
        let mut grad = upstream.to_vec();
        let first_conv = arch.conv_layers().next().map(|(i, _)| i);
        let mut conv_idx = model.params.len();
        for idx in (0..arch.layers.len()).rev() {
            let in_shape = arch.shapes[idx];
            grad = match (&arch.layers[idx], &self.caches[idx]) {
                (LayerSpec::Conv1d { .. }, Cache::Conv { input }) => {
                    conv_idx -= 1;
                    let need_input_grad = Some(idx) != first_conv;
                    conv_backward(
                        input,
                        &grad,
                        arch.geom(idx),
                        &model.params[conv_idx],
                        &mut grads.layers[conv_idx],
                        need_input_grad,
                    )
                }
                (LayerSpec::Relu, Cache::Relu { input }) => {
                    grad.iter().zip(input).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()
                }
                (_, Cache::Pool { argmax }) => {
                    let mut out = vec![0.0; in_shape.size()];
                    for (g, &a) in grad.iter().zip(argmax) {
                        out[a] += g;
                    }
                    out
                }
                (LayerSpec::Flatten, Cache::Flatten) => grad,
                _ => unreachable!("trace does not match architecture"),
            };
            if conv_idx == 0 && Some(idx) == first_conv {
                break;
            }
        }
        Ok(grads)
    }
}

/// Gradients congruent with a model's convolution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvParams>,
}

impl Gradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            layers: model
                .params
                .iter()
                .map(|p| ConvParams { weight: vec![0.0; p.weight.len()], bias: vec![0.0; p.bias.len()] })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

fn adaptive_bin(j: usize, len: usize, target: usize) -> (usize, usize) {
    let start = j * len / target;
    let end = ((j + 1) * len).div_ceil(target);
    (start, end)
}

/// Channel-wise max over the windows produced by `bin`; ties keep the lowest index.
fn pool_forward(x: &[f64], shape: Shape, out_len: usize, bin: impl Fn(usize) -> (usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(shape.ch * out_len);
    let mut argmax = Vec::with_capacity(shape.ch * out_len);
    for c in 0..shape.ch {
        let base = c * shape.len;
        for j in 0..out_len {
            let (s, e) = bin(j);
            let mut best = base + s;
            for i in base + s + 1..base + e {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
    }
    (out, argmax)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}

fn tap_range(g: &ConvGeom, k: usize) -> (usize, usize, usize) {
    let shift = k as isize - g.pad as isize;
    let t0 = (-shift).max(0) as usize;
    let t1 = (g.out_len as isize).min(g.in_len as isize - shift).max(t0 as isize) as usize;
    (t0, t1, (t0 as isize + shift) as usize)
}

fn conv_forward(x: &[f64], g: ConvGeom, p: &ConvParams) -> Vec<f64> {
    let mut out = vec![0.0; g.out_ch * g.out_len];
    for (o, orow) in out.chunks_exact_mut(g.out_len).enumerate() {
        orow.fill(p.bias[o]);
        for i in 0..g.in_ch {
            let xrow = &x[i * g.in_len..(i + 1) * g.in_len];
            let wrow = &p.weight[(o * g.in_ch + i) * g.kernel..][..g.kernel];
            for (k, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (t0, t1, x0) = tap_range(&g, k);
                axpy(w, &xrow[x0..x0 + (t1 - t0)], &mut orow[t0..t1]);
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    grad_out: &[f64],
    g: ConvGeom,
    p: &ConvParams,
    acc: &mut ConvParams,
    need_input_grad: bool,
) -> Vec<f64> {
    let mut grad_in = if need_input_grad { vec![0.0; g.in_ch * g.in_len] } else { Vec::new() };
    for (o, grow) in grad_out.chunks_exact(g.out_len).enumerate() {
        acc.bias[o] += grow.iter().sum::<f64>();
        for i in 0..g.in_ch {
            let xrow = &x[i * g.in_len..(i + 1) * g.in_len];
            let base = (o * g.in_ch + i) * g.kernel;
            for k in 0..g.kernel {
                let (t0, t1, x0) = tap_range(&g, k);
                let n = t1 - t0;
                acc.weight[base + k] += dot(&grow[t0..t1], &xrow[x0..x0 + n]);
                let w = p.weight[base + k];
                if need_input_grad && w != 0.0 {
                    axpy(w, &grow[t0..t1], &mut grad_in[i * g.in_len + x0..i * g.in_len + x0 + n]);
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight-loop reference forward pass written without the slice tricks
    /// of the production path.
    fn oracle_forward(model: &EncoderModel, input: &[f64]) -> Vec<f64> {
        let arch = model.architecture();
        let mut act: Vec<Vec<f64>> = vec![input.to_vec()];
        let mut conv = 0;
        for layer in arch.layers() {
            act = match *layer {
                LayerSpec::Conv1d { in_ch, out_ch, kernel, same_padding } => {
                    let len = act[0].len();
                    let pad = if same_padding { (kernel - 1) / 2 } else { 0 };
                    let out_len = if same_padding { len } else { len - kernel + 1 };
                    let p = &model.params()[conv];
                    conv += 1;
                    let mut out = vec![vec![0.0; out_len]; out_ch];
                    for o in 0..out_ch {
                        for t in 0..out_len {
                            let mut s = p.bias[o];
                            for i in 0..in_ch {
                                for k in 0..kernel {
                                    let pos = t as i64 + k as i64 - pad as i64;
                                    if pos >= 0 && (pos as usize) < len {
                                        s += p.weight[o * in_ch * kernel + i * kernel + k] * act[i][pos as usize];
                                    }
                                }
                            }
                            out[o][t] = s;
                        }
                    }
                    out
                }
                LayerSpec::Relu => act.iter().map(|c| c.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect()).collect(),
                LayerSpec::MaxPool1d { window, stride } => act
                    .iter()
                    .map(|c| {
                        let n = (c.len() - window) / stride + 1;
                        (0..n).map(|j| c[j * stride..j * stride + window].iter().cloned().fold(f64::MIN, f64::max)).collect()
                    })
                    .collect(),
                LayerSpec::AdaptiveMaxPool1d { target_len } => act
                    .iter()
                    .map(|c| {
                        let l = c.len();
                        (0..target_len)
                            .map(|j| {
                                let s = (j * l) as f64 / target_len as f64;
                                let e = ((j + 1) * l) as f64 / target_len as f64;
                                c[s.floor() as usize..e.ceil() as usize].iter().cloned().fold(f64::MIN, f64::max)
                            })
                            .collect()
                    })
                    .collect(),
                LayerSpec::Flatten => vec![act.concat()],
            };
        }
        act.concat()
    }

    fn toy_arch() -> Architecture {
        Architecture::new(
            48,
            vec![
                LayerSpec::Conv1d { in_ch: 1, out_ch: 3, kernel: 5, same_padding: true },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { window: 2, stride: 2 },
                LayerSpec::Conv1d { in_ch: 3, out_ch: 4, kernel: 3, same_padding: false },
                LayerSpec::Relu,
                LayerSpec::AdaptiveMaxPool1d { target_len: 5 },
                LayerSpec::Flatten,
            ],
            20,
        )
        .unwrap()
    }

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn with_bias(mut model: EncoderModel, seed: u64) -> EncoderModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        model
    }

    #[test]
    fn canonical_shapes() {
        let arch = Architecture::canonical();
        assert_eq!(arch.output_dim(), 2304);
        let lens: Vec<usize> = arch.conv_dims().iter().map(|d| d.out_len).collect();
        assert_eq!(lens, vec![1000, 500, 250, 125, 62, 31]);
        let model = EncoderModel::canonical(1);
        assert_eq!(model.parameter_count(), 136_632 + 504);
    }

    #[test]
    fn wrong_declared_output_is_rejected() {
        let layers = Architecture::canonical().layers().to_vec();
        assert!(matches!(Architecture::new(1000, layers.clone(), 2034), Err(EncoderError::ShapeMismatch(_))));
        assert!(matches!(Architecture::new(100, layers, 2304), Err(EncoderError::ShapeMismatch(_))));
        let broken = vec![
            LayerSpec::Conv1d { in_ch: 1, out_ch: 4, kernel: 3, same_padding: true },
            LayerSpec::Conv1d { in_ch: 3, out_ch: 4, kernel: 3, same_padding: true },
            LayerSpec::Flatten,
        ];
        assert!(Architecture::new(10, broken, 40).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = Architecture::canonical();
        let params = arch.conv_dims().iter().map(|d| ConvParams::zeros(d.out_ch, d.in_ch, d.kernel)).collect();
        let model = EncoderModel::from_params(arch, params).unwrap();
        let out = model.forward_values(&random_input(1000, 3)).unwrap();
        assert_eq!(out.len(), 2304);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let arch = Architecture::new(
            1000,
            vec![LayerSpec::Conv1d { in_ch: 1, out_ch: 1, kernel: 1, same_padding: true }, LayerSpec::Flatten],
            1000,
        )
        .unwrap();
        let model = EncoderModel::from_params(arch, vec![ConvParams { weight: vec![1.0], bias: vec![0.0] }]).unwrap();
        let x = random_input(1000, 4);
        assert_eq!(model.forward_values(&x).unwrap(), x);
    }

    // Frozen outputs of `oracle_forward` for EncoderModel::canonical(2024)
    // on `golden_input()`: (index, value) pairs.
    const GOLDEN: [(usize, f64); 5] = [
        (0, 0.0),
        (500, 10.056877545028128),
        (1151, 0.5453792210415667),
        (1800, 26.768821793433368),
        (2303, 1.0965565703759037),
    ];

    fn golden_input() -> Vec<f64> {
        (0..1000).map(|i| 512.0 * ((i as f64) * 0.031).sin() * ((i as f64) * 0.0047).cos()).collect()
    }

    #[test]
    fn matches_straight_loop_oracle() {
        let model = with_bias(EncoderModel::canonical(2024), 9);
        let x = golden_input();
        let got = model.forward_values(&x).unwrap();
        let want = oracle_forward(&model, &x);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
        for (i, v) in GOLDEN {
            assert!((got[i] - v).abs() <= 1e-9 * v.abs().max(1.0), "index {i}: {} vs {v}", got[i]);
        }
    }

    #[test]
    fn toy_oracle_agreement() {
        let model = with_bias(EncoderModel::init(toy_arch(), 5), 6);
        let x = random_input(48, 7);
        let got = model.forward_values(&x).unwrap();
        let want = oracle_forward(&model, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn finite_difference_check(model: &EncoderModel, x: &[f64], upstream: &[f64]) {
        let analytic = model.backward(x, upstream).unwrap();
        let loss = |m: &EncoderModel| -> f64 {
            m.forward_values(x).unwrap().iter().zip(upstream).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-3;
        for layer in 0..model.params().len() {
            let count = model.params()[layer].len();
            for j in 0..count {
                let nw = model.params()[layer].weight.len();
                let nudged = |delta: f64| {
                    let mut m = model.clone();
                    let p = &mut m.params_mut()[layer];
                    if j < nw {
                        p.weight[j] += delta;
                    } else {
                        p.bias[j - nw] += delta;
                    }
                    m
                };
                let (plus, minus) = (nudged(eps), nudged(-eps));
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let a = if j < nw { analytic.layers[layer].weight[j] } else { analytic.layers[layer].bias[j - nw] };
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!((a - fd).abs() / denom < 1e-4, "layer {layer} param {j}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_every_layer_kind() {
        let model = with_bias(EncoderModel::init(toy_arch(), 11), 12);
        let x = random_input(48, 13);
        let up = random_input(20, 14);
        finite_difference_check(&model, &x, &up);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let arch = Architecture::new(
            4,
            vec![
                LayerSpec::Conv1d { in_ch: 1, out_ch: 1, kernel: 1, same_padding: true },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            4,
        )
        .unwrap();
        let model = EncoderModel::from_params(arch, vec![ConvParams { weight: vec![1.0], bias: vec![-10.0] }]).unwrap();
        let g = model.backward(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = EncoderModel::canonical(3);
        let g = model.backward(&golden_input(), &[0.0; 2304]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_rejects_wrong_upstream() {
        let model = EncoderModel::init(toy_arch(), 1);
        assert!(matches!(model.backward(&random_input(48, 1), &[0.0; 3]), Err(EncoderError::ShapeMismatch(_))));
        assert!(matches!(model.forward_values(&[0.0; 3]), Err(EncoderError::ShapeMismatch(_))));
    }

    #[test]
    fn pool_ties_route_to_lowest_index() {
        let arch = Architecture::new(
            4,
            vec![LayerSpec::MaxPool1d { window: 2, stride: 2 }, LayerSpec::Flatten],
            2,
        )
        .unwrap();
        let model = EncoderModel::from_params(arch, vec![]).unwrap();
        let trace = model.forward_trace(&[1.0, 1.0, 2.0, 2.0]).unwrap();
        let Cache::Pool { argmax } = &trace.caches[0] else { panic!() };
        assert_eq!(argmax, &vec![0, 2]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = with_bias(EncoderModel::canonical(77), 78);
        let bytes = model.to_bytes();
        let back = EncoderModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = EncoderModel::init(toy_arch(), 2).to_bytes();
        assert!(matches!(EncoderModel::from_bytes(&bytes[..bytes.len() - 7]), Err(EncoderError::ChecksumMismatch)));
        let mut future = bytes.clone();
        future[4] = MODEL_VERSION + 1;
        assert!(matches!(EncoderModel::from_bytes(&future), Err(EncoderError::VersionMismatch { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(EncoderModel::from_bytes(&magic), Err(EncoderError::BadMagic)));
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(EncoderModel::from_bytes(&flipped), Err(EncoderError::ChecksumMismatch)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn positively_homogeneous_without_clipping(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut model = EncoderModel::init(toy_arch(), seed);
            for p in model.params_mut() {
                p.weight.iter_mut().for_each(|w| *w = w.abs());
            }
            let x: Vec<f64> = random_input(48, seed + 1).iter().map(|v| v.abs()).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = model.forward_values(&scaled).unwrap();
            let b = model.forward_values(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - c * v).abs() <= 1e-12 * (c * v).abs().max(1e-12));
            }
        }
    }
}
