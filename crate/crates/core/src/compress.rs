//! Power-of-two weight quantization, multiplier-free integer inference,
//! magnitude pruning and an operation-count cost model.
//!
//! A weight `x` becomes the integer `y = round(2^n x)`. Multiplying an integer
//! activation `N` by `y / 2^n` then needs only shifts and adds: `N * y` is the
//! sum of `N << a` over the set bits `a` of `|y|`, negated when `y < 0`, and a
//! single right shift by `n` rescales each layer output.

use thiserror::Error;

use crate::encoder::{ConvDims, ConvParams, EncoderError, EncoderModel, FeatureVector, LayerSpec, Precision};
use crate::segment::Segment;

/// Fractional bits carried by integer activations in [`quantized_forward`].
pub const ACT_FRAC_BITS: u32 = 8;
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 24;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("quantization bits must be in {MIN_BITS}..={MAX_BITS}, got {0}")]
    InvalidBits(u32),
    #[error("sparsity must be in [0, 1), got {0}")]
    InvalidSparsity(f64),
    #[error("operation requires a full-precision model")]
    NotFullPrecision,
    #[error("operation requires a quantized model")]
    NotQuantized,
    #[error("weight {0} cannot be represented at this precision")]
    Unrepresentable(f64),
    #[error("accumulator overflow (64-bit signed)")]
    AccumulatorOverflow,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Integer `y` standing for `y / 2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizedWeight {
    pub y: i64,
    pub n: u32,
}

impl QuantizedWeight {
    /// `round(2^n x)` with halves rounded away from zero.
    pub fn from_real(x: f64, n: u32) -> Result<Self, CompressError> {
        let scaled = (x * (n as f64).exp2()).round();
        if !scaled.is_finite() || scaled.abs() >= 9.2e18 {
            return Err(CompressError::Unrepresentable(x));
        }
        Ok(Self { y: scaled as i64, n })
    }

    pub fn reconstruct(self) -> f64 {
        self.y as f64 / (self.n as f64).exp2()
    }

    /// Positions of the set bits of `|y|`, ascending.
    pub fn set_bits(self) -> Vec<u32> {
        let mut mag = self.y.unsigned_abs();
        let mut bits = Vec::with_capacity(mag.count_ones() as usize);
        while mag != 0 {
            let a = mag.trailing_zeros();
            bits.push(a);
            mag &= mag - 1;
        }
        bits
    }

    pub fn popcount(self) -> u32 {
        self.y.unsigned_abs().count_ones()
    }
}

/// Integer weights and biases of one convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantConv {
    pub weight: Vec<i64>,
    pub bias: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedParams {
    pub n: u32,
    pub layers: Vec<QuantConv>,
}

impl QuantizedParams {
    /// Real-valued parameters `y / 2^n`.
    pub fn reconstruct(&self) -> Vec<ConvParams> {
        let scale = (self.n as f64).exp2();
        self.layers
            .iter()
            .map(|l| ConvParams {
                weight: l.weight.iter().map(|&y| y as f64 / scale).collect(),
                bias: l.bias.iter().map(|&y| y as f64 / scale).collect(),
            })
            .collect()
    }
}

/// Per-layer keep flags (`true` = kept) congruent with the conv weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub sparsity: f64,
    pub layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn identity(model: &EncoderModel) -> Self {
        Self { sparsity: 0.0, layers: model.params().iter().map(|p| vec![true; p.weight.len()]).collect() }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn pruned(&self) -> usize {
        self.layers.iter().flatten().filter(|k| !**k).count()
    }

    /// Number of weights a mask of this sparsity removes: `ceil(s * total)`.
    pub fn target_count(sparsity: f64, total: usize) -> usize {
        ((sparsity * total as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Shift-add operations spent on one product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub shifts: u64,
    pub adds: u64,
    pub inversions: u64,
}

/// `N * y` computed from the binary expansion of `|y|`.
pub fn shift_add_multiply(n_val: i64, w: QuantizedWeight) -> Result<(i64, OpCount), CompressError> {
    let bits = w.set_bits();
    let mut acc: i128 = 0;
    for &a in &bits {
        acc += (n_val as i128) << a;
    }
    if w.y < 0 {
        acc = -acc;
    }
    let value = i64::try_from(acc).map_err(|_| CompressError::AccumulatorOverflow)?;
    let pc = bits.len() as u64;
    let ops = OpCount { shifts: pc, adds: pc.saturating_sub(1), inversions: (w.y < 0) as u64 };
    Ok((value, ops))
}

pub fn quantize_model(model: &EncoderModel, n: u32) -> Result<EncoderModel, CompressError> {
    if !(MIN_BITS..=MAX_BITS).contains(&n) {
        return Err(CompressError::InvalidBits(n));
    }
    if !model.is_full_precision() {
        return Err(CompressError::NotFullPrecision);
    }
    let q = |v: &[f64]| -> Result<Vec<i64>, CompressError> {
        v.iter().map(|&x| QuantizedWeight::from_real(x, n).map(|w| w.y)).collect()
    };
    let layers = model
        .params()
        .iter()
        .map(|p| Ok(QuantConv { weight: q(&p.weight)?, bias: q(&p.bias)? }))
        .collect::<Result<Vec<_>, CompressError>>()?;
    let qp = QuantizedParams { n, layers };
    let params = qp.reconstruct();
    Ok(EncoderModel::from_parts(
        model.architecture().clone(),
        params,
        Precision::Quantized(qp),
        model.mask().cloned(),
    )?)
}

/// Rounds `v / 2^n` to the nearest integer, halves away from zero.
fn rounding_shift(v: i64, n: u32) -> i64 {
    if n == 0 {
        return v;
    }
    let half = 1i64 << (n - 1);
    if v >= 0 {
        (v + half) >> n
    } else {
        -((-v + half) >> n)
    }
}

/// Integer-only forward pass of a quantized model.
///
/// Activations are integers with [`ACT_FRAC_BITS`] fractional bits; the input
/// is `round(x * 2^f)`. Each convolution accumulates `A * y` via shift-add
/// into `(b << f) + sum`, at scale `2^(n+f)`, then shifts right by `n` with
/// rounding. ReLU and pooling act directly on integers.
pub fn quantized_forward(model: &EncoderModel, segment: &Segment) -> Result<FeatureVector, CompressError> {
    let values = quantized_forward_values(model, segment.values())?;
    Ok(FeatureVector {
        values,
        record_id: segment.record_id.clone(),
        subject_id: segment.subject_id.clone(),
        model_fingerprint: None,
    })
}

pub fn quantized_forward_values(model: &EncoderModel, input: &[f64]) -> Result<Vec<f64>, CompressError> {
    let Precision::Quantized(qp) = model.precision() else {
        return Err(CompressError::NotQuantized);
    };
    let arch = model.architecture();
    if input.len() != arch.input_len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "input has {} samples, model expects {}",
            input.len(),
            arch.input_len()
        ))
        .into());
    }
    let f = ACT_FRAC_BITS;
    let act_scale = (f as f64).exp2();
    let mut act: Vec<i64> = input
        .iter()
        .map(|&x| {
            let v = (x * act_scale).round();
            if v.is_finite() && v.abs() < 9.2e18 {
                Ok(v as i64)
            } else {
                Err(CompressError::AccumulatorOverflow)
            }
        })
        .collect::<Result<_, _>>()?;
    let dims = arch.conv_dims();
    let mut conv = 0;
    for (idx, layer) in arch.layers().iter().enumerate() {
        let shape = arch.shape_at(idx);
        act = match *layer {
            LayerSpec::Conv1d { .. } => {
                let out = int_conv(&act, &dims[conv], &qp.layers[conv], qp.n, f)?;
                conv += 1;
                out
            }
            LayerSpec::Relu => act.into_iter().map(|v| v.max(0)).collect(),
            LayerSpec::MaxPool1d { window, stride } => {
                let out_len = arch.shape_at(idx + 1).len;
                int_pool(&act, shape.ch, shape.len, out_len, |j| (j * stride, j * stride + window))
            }
            LayerSpec::AdaptiveMaxPool1d { target_len } => int_pool(&act, shape.ch, shape.len, target_len, |j| {
                (j * shape.len / target_len, ((j + 1) * shape.len).div_ceil(target_len))
            }),
            LayerSpec::Flatten => act,
        };
    }
    Ok(act.into_iter().map(|v| v as f64 / act_scale).collect())
}

fn int_pool(x: &[i64], ch: usize, len: usize, out_len: usize, bin: impl Fn(usize) -> (usize, usize)) -> Vec<i64> {
    let mut out = Vec::with_capacity(ch * out_len);
    for c in 0..ch {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..out_len {
            let (s, e) = bin(j);
            out.push(*row[s..e].iter().max().expect("non-empty pooling window"));
        }
    }
    out
}

fn int_conv(x: &[i64], d: &ConvDims, q: &QuantConv, n: u32, f: u32) -> Result<Vec<i64>, CompressError> {
    // If the worst case cannot overflow, accumulate with plain shifts; otherwise
    // fall back to the checked per-product path.
    let max_act = x.iter().map(|v| v.unsigned_abs() as u128).max().unwrap_or(0);
    let fan: u128 = (0..d.out_ch)
        .map(|o| q.weight[o * d.in_ch * d.kernel..(o + 1) * d.in_ch * d.kernel].iter().map(|y| y.unsigned_abs() as u128).sum())
        .max()
        .unwrap_or(0);
    let max_bias = q.bias.iter().map(|b| (b.unsigned_abs() as u128) << f).max().unwrap_or(0);
    let safe = max_act * fan + max_bias < (1u128 << 62);

    let mut out = vec![0i64; d.out_ch * d.out_len];
    for (o, orow) in out.chunks_exact_mut(d.out_len).enumerate() {
        let bias = q.bias[o].checked_shl(f).filter(|v| v >> f == q.bias[o]).ok_or(CompressError::AccumulatorOverflow)?;
        orow.fill(bias);
        for i in 0..d.in_ch {
            let xrow = &x[i * d.in_len..(i + 1) * d.in_len];
            for k in 0..d.kernel {
                let y = q.weight[(o * d.in_ch + i) * d.kernel + k];
                if y == 0 {
                    continue;
                }
                let (t0, t1, shift) = d.tap_range(k);
                let x0 = (t0 as isize + shift) as usize;
                let xs = &xrow[x0..x0 + (t1 - t0)];
                let os = &mut orow[t0..t1];
                if safe {
                    let mut mag = y.unsigned_abs();
                    while mag != 0 {
                        let a = mag.trailing_zeros();
                        mag &= mag - 1;
                        if y > 0 {
                            os.iter_mut().zip(xs).for_each(|(acc, v)| *acc += v << a);
                        } else {
                            os.iter_mut().zip(xs).for_each(|(acc, v)| *acc -= v << a);
                        }
                    }
                } else {
                    let w = QuantizedWeight { y, n };
                    for (acc, &v) in os.iter_mut().zip(xs) {
                        let (p, _) = shift_add_multiply(v, w)?;
                        *acc = acc.checked_add(p).ok_or(CompressError::AccumulatorOverflow)?;
                    }
                }
            }
        }
        orow.iter_mut().for_each(|v| *v = rounding_shift(*v, n));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneCriterion {
    /// Each conv layer loses `floor(s * W_l)` of its smallest weights; the
    /// few remaining slots go to the globally smallest survivors.
    #[default]
    LayerBalanced,
    /// Smallest magnitudes across all conv weights.
    Global,
}

impl std::str::FromStr for PruneCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "layer" | "layer_balanced" | "layer-balanced" => Ok(Self::LayerBalanced),
            "global" => Ok(Self::Global),
            other => Err(format!("unknown prune criterion '{other}'")),
        }
    }
}

/// Magnitude mask with exactly `ceil(sparsity * W)` pruned weights. Entries
/// already masked by the model's current mask sort before equal magnitudes.
pub fn magnitude_mask(model: &EncoderModel, sparsity: f64, criterion: PruneCriterion) -> Result<PruneMask, CompressError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(CompressError::InvalidSparsity(sparsity));
    }
    let params = model.params();
    let total: usize = params.iter().map(|p| p.weight.len()).sum();
    let target = PruneMask::target_count(sparsity, total);
    let prev = model.mask();
    let key = |l: usize, j: usize| -> (f64, bool) {
        let was_kept = prev.map_or(true, |m| m.layers[l][j]);
        (params[l].weight[j].abs(), was_kept)
    };
    let order = |a: &(usize, usize), b: &(usize, usize)| {
        let (ka, kb) = (key(a.0, a.1), key(b.0, b.1));
        ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(a.cmp(b))
    };
    let mut layers: Vec<Vec<bool>> = params.iter().map(|p| vec![true; p.weight.len()]).collect();
    let mut remaining = target;
    if criterion == PruneCriterion::LayerBalanced {
        for (l, p) in params.iter().enumerate() {
            let quota = ((sparsity * p.weight.len() as f64) + 1e-9).floor() as usize;
            let quota = quota.min(remaining);
            let mut idx: Vec<(usize, usize)> = (0..p.weight.len()).map(|j| (l, j)).collect();
            idx.sort_by(order);
            for &(_, j) in &idx[..quota] {
                layers[l][j] = false;
            }
            remaining -= quota;
        }
    }
    if remaining > 0 {
        let mut idx: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(l, p)| (0..p.weight.len()).map(move |j| (l, j)))
            .filter(|&(l, j)| layers[l][j])
            .collect();
        idx.sort_by(order);
        for &(l, j) in &idx[..remaining] {
            layers[l][j] = false;
        }
    }
    Ok(PruneMask { sparsity, layers })
}

/// Applies a fresh magnitude mask; masked weights become exactly zero.
pub fn prune(
    model: &EncoderModel,
    sparsity: f64,
    criterion: PruneCriterion,
) -> Result<(EncoderModel, PruneMask), CompressError> {
    if !model.is_full_precision() {
        return Err(CompressError::NotFullPrecision);
    }
    let mask = magnitude_mask(model, sparsity, criterion)?;
    let mut out = model.clone();
    out.set_mask(if sparsity == 0.0 && model.mask().is_none() { None } else { Some(mask.clone()) });
    Ok((out, mask))
}

/// Gradual pruning during training: at the i-th of k milestones the
/// sparsity reaches `target * (i + 1) / k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub target: f64,
    pub milestones: Vec<usize>,
    pub criterion: PruneCriterion,
}

impl PruneSchedule {
    pub fn sparsity_at(&self, epoch: usize) -> Option<f64> {
        let k = self.milestones.len();
        self.milestones.iter().position(|&m| m == epoch).map(|i| self.target * (i + 1) as f64 / k as f64)
    }
}

/// Operation counts of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model_tag: String,
    pub mult: u64,
    pub inv: u64,
    pub shift: u64,
    pub add: u64,
}

impl CostReport {
    pub const MULT_CYCLES: u64 = 3;
    pub const INV_CYCLES: u64 = 1;
    pub const SHIFT_CYCLES: u64 = 1;
    pub const ADD_CYCLES: u64 = 1;
    pub const CSV_HEADER: &'static str = "model_tag,mult,inv,shift,add,cycles";

    pub fn cycles(&self) -> u64 {
        Self::MULT_CYCLES * self.mult + Self::INV_CYCLES * self.inv + Self::SHIFT_CYCLES * self.shift + Self::ADD_CYCLES * self.add
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.model_tag, self.mult, self.inv, self.shift, self.add, self.cycles())
    }
}

/// Counts every tap application, padded positions included. Biases cost one
/// add per output; ReLU, pooling and the rescale shift are not counted.
pub fn cost_report(model: &EncoderModel) -> CostReport {
    let dims = model.architecture().conv_dims();
    let mut r = CostReport { model_tag: model.precision_tag(), mult: 0, inv: 0, shift: 0, add: 0 };
    for (l, d) in dims.iter().enumerate() {
        let apps = d.out_len as u64;
        r.add += (d.out_ch * d.out_len) as u64;
        let keep = model.mask().map(|m| &m.layers[l]);
        for j in 0..d.weight_count() {
            if keep.is_some_and(|k| !k[j]) {
                continue;
            }
            match model.precision() {
                Precision::Full => {
                    r.mult += apps;
                    r.add += apps;
                }
                Precision::Quantized(q) => {
                    let y = q.layers[l].weight[j];
                    let pc = y.unsigned_abs().count_ones() as u64;
                    r.shift += pc * apps;
                    r.add += pc * apps;
                    r.inv += (y < 0) as u64 * apps;
                }
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantization_examples() {
        let w = QuantizedWeight::from_real(0.5, 3).unwrap();
        assert_eq!(w.y, 4);
        assert_eq!(w.reconstruct(), 0.5);
        let w = QuantizedWeight::from_real(0.7, 8).unwrap();
        assert_eq!(w.y, 179);
        assert_eq!(w.reconstruct(), 0.69921875);
        let w = QuantizedWeight::from_real(-0.3, 4).unwrap();
        assert_eq!(w.y, -5);
        assert_eq!(w.reconstruct(), -0.3125);
        // Exact halves go away from zero.
        assert_eq!(QuantizedWeight::from_real(0.375, 2).unwrap().y, 2);
        assert_eq!(QuantizedWeight::from_real(-0.375, 2).unwrap().y, -2);
    }

    #[test]
    fn shift_add_examples() {
        // 2 * 2^3 = 2 << 3
        let (v, ops) = shift_add_multiply(2, QuantizedWeight { y: 8, n: 0 }).unwrap();
        assert_eq!(v, 16);
        assert_eq!(ops, OpCount { shifts: 1, adds: 0, inversions: 0 });
        let (v, ops) = shift_add_multiply(12345, QuantizedWeight { y: 0, n: 4 }).unwrap();
        assert_eq!(v, 0);
        assert_eq!(ops, OpCount::default());
        let (v, ops) = shift_add_multiply(7, QuantizedWeight { y: -5, n: 4 }).unwrap();
        assert_eq!(v, 7 * -5);
        assert_eq!(ops, OpCount { shifts: 2, adds: 1, inversions: 1 });
    }

    #[test]
    fn shift_add_overflow() {
        assert!(matches!(
            shift_add_multiply(i64::MAX / 2, QuantizedWeight { y: 3, n: 0 }),
            Err(CompressError::AccumulatorOverflow)
        ));
        assert_eq!(shift_add_multiply(i64::MIN / 2, QuantizedWeight { y: 2, n: 0 }).unwrap().0, i64::MIN);
    }

    #[test]
    fn rounding_shift_is_half_away() {
        assert_eq!(rounding_shift(3, 1), 2);
        assert_eq!(rounding_shift(-3, 1), -2);
        assert_eq!(rounding_shift(5, 2), 1);
        assert_eq!(rounding_shift(-6, 2), -2);
    }

    fn toy_layer(weights: [f64; 3], bias: f64) -> EncoderModel {
        let arch = Architecture::new(
            10,
            vec![LayerSpec::Conv1d { in_ch: 1, out_ch: 1, kernel: 3, same_padding: true }, LayerSpec::Flatten],
            10,
        )
        .unwrap();
        EncoderModel::from_params(arch, vec![ConvParams { weight: weights.to_vec(), bias: vec![bias] }]).unwrap()
    }

    #[test]
    fn toy_layer_costs() {
        let full = cost_report(&toy_layer([0.3, -0.2, 0.1], 0.0));
        assert_eq!((full.mult, full.add, full.shift, full.inv), (30, 40, 0, 0));
        // 3/8, 5/8, 6/8 all have popcount 2 at n = 3.
        let q = quantize_model(&toy_layer([0.375, 0.625, 0.75], 0.125), 3).unwrap();
        let c = cost_report(&q);
        assert_eq!((c.mult, c.shift, c.add, c.inv), (0, 60, 70, 0));
        assert_eq!(c.cycles(), 130);
        assert_eq!(c.csv_row(), "q3,0,0,60,70,130");
    }

    #[test]
    fn pruned_taps_cost_nothing() {
        let model = toy_layer([0.1, 0.3, 0.2], 0.0);
        let base = cost_report(&model);
        let mut m = model.clone();
        m.set_mask(Some(PruneMask { sparsity: 0.5, layers: vec![vec![false, true, true]] }));
        let c = cost_report(&m);
        assert_eq!(c.mult, base.mult - 10);
        assert_eq!(c.add, base.add - 10);
    }

    #[test]
    fn selection_rule_on_ten_weights() {
        let arch = Architecture::new(
            10,
            vec![LayerSpec::Conv1d { in_ch: 1, out_ch: 1, kernel: 10, same_padding: true }, LayerSpec::Flatten],
            10,
        )
        .unwrap();
        let w = vec![5.0, -1.0, 3.0, -7.0, 2.0, -10.0, 9.0, -4.0, 6.0, -8.0];
        let model = EncoderModel::from_params(arch, vec![ConvParams { weight: w, bias: vec![0.0] }]).unwrap();
        for criterion in [PruneCriterion::Global, PruneCriterion::LayerBalanced] {
            let (pruned, mask) = prune(&model, 0.2, criterion).unwrap();
            assert_eq!(mask.layers[0].iter().filter(|k| !**k).count(), 2);
            assert!(!mask.layers[0][1] && !mask.layers[0][4]);
            assert_eq!(pruned.params()[0].weight[1], 0.0);
            assert_eq!(pruned.params()[0].weight[4], 0.0);
        }
        let (same, mask) = prune(&model, 0.0, PruneCriterion::Global).unwrap();
        assert_eq!(same, model);
        assert_eq!(mask.pruned(), 0);
    }

    #[test]
    fn canonical_prune_count_is_exact() {
        let model = EncoderModel::canonical(4);
        let total: usize = model.params().iter().map(|p| p.weight.len()).sum();
        for criterion in [PruneCriterion::Global, PruneCriterion::LayerBalanced] {
            let (pruned, mask) = prune(&model, 0.2, criterion).unwrap();
            assert_eq!(mask.pruned(), (0.2 * total as f64).ceil() as usize);
            let zeros = pruned.params().iter().flat_map(|p| &p.weight).filter(|w| **w == 0.0).count();
            assert_eq!(zeros, mask.pruned());
        }
    }

    #[test]
    fn layer_balanced_prune_meets_mult_reduction() {
        let model = EncoderModel::canonical(4);
        let base = cost_report(&model).mult as f64;
        for s in [0.1, 0.2, 0.5] {
            let (pruned, _) = prune(&model, s, PruneCriterion::LayerBalanced).unwrap();
            let reduction = 1.0 - cost_report(&pruned).mult as f64 / base;
            assert!(reduction >= s - 0.01, "s={s}: {reduction}");
        }
    }

    #[test]
    fn quantized_model_has_no_multiplications() {
        let q = quantize_model(&EncoderModel::canonical(8), 8).unwrap();
        let c = cost_report(&q);
        assert_eq!(c.mult, 0);
        assert!(c.shift > 0);
        assert_eq!(c.cycles(), c.inv + c.shift + c.add);
    }

    #[test]
    fn zero_model_quantized_forward_is_zero() {
        let arch = Architecture::canonical();
        let params = arch.conv_dims().iter().map(|d| ConvParams::zeros(d.out_ch, d.in_ch, d.kernel)).collect();
        let model = EncoderModel::from_params(arch, params).unwrap();
        let q = quantize_model(&model, 8).unwrap();
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.1).sin() * 400.0).collect();
        assert!(quantized_forward_values(&q, &x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quantized_forward_tracks_full_precision() {
        let model = EncoderModel::canonical(10);
        let x: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.05).sin() * 500.0).collect();
        let full = model.forward_values(&x).unwrap();
        let q = quantize_model(&model, 16).unwrap();
        let got = quantized_forward_values(&q, &x).unwrap();
        let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = full.iter().zip(&got).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale <= 2e-3, "relative error {}", err / scale);
    }

    #[test]
    fn quantize_rejects_bad_inputs() {
        let model = EncoderModel::canonical(1);
        assert!(matches!(quantize_model(&model, 1), Err(CompressError::InvalidBits(1))));
        let q = quantize_model(&model, 8).unwrap();
        assert!(matches!(quantize_model(&q, 8), Err(CompressError::NotFullPrecision)));
        assert!(matches!(quantized_forward_values(&model, &[0.0; 1000]), Err(CompressError::NotQuantized)));
        assert!(matches!(prune(&model, 1.0, PruneCriterion::Global), Err(CompressError::InvalidSparsity(_))));
    }

    #[test]
    fn schedule_ramps_to_target() {
        let s = PruneSchedule { target: 0.3, milestones: vec![10, 20, 30], criterion: PruneCriterion::Global };
        assert_eq!(s.sparsity_at(5), None);
        assert!((s.sparsity_at(10).unwrap() - 0.1).abs() < 1e-12);
        assert!((s.sparsity_at(30).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn cost_monotone_in_bits_and_sparsity() {
        let model = EncoderModel::canonical(12);
        let cycles: Vec<u64> =
            [4, 8, 16].iter().map(|&n| cost_report(&quantize_model(&model, n).unwrap()).cycles()).collect();
        assert!(cycles.windows(2).all(|w| w[0] <= w[1]), "{cycles:?}");
        let pruned: Vec<u64> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&s| cost_report(&prune(&model, s, PruneCriterion::LayerBalanced).unwrap().0).cycles())
            .collect();
        assert!(pruned.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn shift_add_is_exact(n in -(1i64 << 20)..=(1i64 << 20), y in -(1i64 << 12)..=(1i64 << 12)) {
            let (v, ops) = shift_add_multiply(n, QuantizedWeight { y, n: 0 }).unwrap();
            prop_assert_eq!(v, n * y);
            prop_assert_eq!(ops.shifts, y.unsigned_abs().count_ones() as u64);
        }

        #[test]
        fn reconstruction_error_bounded(x in -4.0f64..4.0, n in 2u32..=24) {
            let w = QuantizedWeight::from_real(x, n).unwrap();
            prop_assert!((x - w.reconstruct()).abs() <= (-(n as f64) - 1.0).exp2());
        }
    }

    #[test]
    fn random_prune_counts_within_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EncoderModel::canonical(5);
        for _ in 0..5 {
            let s: f64 = rng.random_range(0.0..0.9);
            let (_, mask) = prune(&model, s, PruneCriterion::LayerBalanced).unwrap();
            let want = (s * mask.total() as f64).ceil();
            assert!((mask.pruned() as f64 - want).abs() <= 1.0);
        }
    }
}
