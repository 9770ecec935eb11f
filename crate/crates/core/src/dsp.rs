//! Noise reduction, resampling, amplitude normalization and fiducial points.

use std::f64::consts::PI;

use thiserror::Error;

use crate::ingest::EcgRecord;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate (constant) signal")]
    DegenerateSignal,
    #[error("no R peaks found")]
    NoPeaksFound,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Butterworth band-pass design: `order` applies to each of the high-pass and
/// low-pass halves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { low_cut: 0.5, high_cut: 40.0, order: 4 }
    }
}

impl FilterSpec {
    pub fn validate(&self, fs: f64) -> Result<(), DspError> {
        if self.order == 0 {
            return Err(DspError::InvalidSpec("order must be positive".into()));
        }
        if !(0.0 < self.low_cut && self.low_cut < self.high_cut && self.high_cut < fs / 2.0) {
            return Err(DspError::InvalidSpec(format!(
                "need 0 < {} < {} < fs/2 = {}",
                self.low_cut,
                self.high_cut,
                fs / 2.0
            )));
        }
        Ok(())
    }
}

/// Normalized second-order section (a0 = 1). First-order sections keep b2 = a2 = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II state for a constant input `u` already at steady state.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b[2] * u - self.a[1] * y;
        let z1 = self.b[1] * u - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pass {
    Low,
    High,
}

fn butterworth(order: usize, cutoff: f64, fs: f64, pass: Pass) -> Vec<Biquad> {
    let w0 = 2.0 * PI * cutoff / fs;
    let (sin_w, cos_w) = w0.sin_cos();
    let mut out = Vec::with_capacity(order.div_ceil(2));
    for k in 0..order / 2 {
        // pole-pair quality factor of the analog Butterworth prototype
        let q = 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * order) as f64).sin());
        let alpha = sin_w / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = match pass {
            Pass::Low => [(1.0 - cos_w) / 2.0, 1.0 - cos_w, (1.0 - cos_w) / 2.0],
            Pass::High => [(1.0 + cos_w) / 2.0, -(1.0 + cos_w), (1.0 + cos_w) / 2.0],
        };
        out.push(Biquad {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos_w / a0, (1.0 - alpha) / a0],
        });
    }
    if order % 2 == 1 {
        let k = (w0 / 2.0).tan();
        let a1 = (k - 1.0) / (k + 1.0);
        let b = match pass {
            Pass::Low => [k / (1.0 + k), k / (1.0 + k), 0.0],
            Pass::High => [1.0 / (1.0 + k), -1.0 / (1.0 + k), 0.0],
        };
        out.push(Biquad { b, a: [a1, 0.0] });
    }
    out
}

/// Cascade of biquads applied forward and backward (zero phase).
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn bandpass(spec: &FilterSpec, fs: f64) -> Result<Self, DspError> {
        spec.validate(fs)?;
        let mut sections = butterworth(spec.order, spec.low_cut, fs, Pass::High);
        sections.extend(butterworth(spec.order, spec.high_cut, fs, Pass::Low));
        Ok(Self { sections })
    }

    pub fn lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Self, DspError> {
        if order == 0 || !(cutoff > 0.0 && cutoff < fs / 2.0) {
            return Err(DspError::InvalidSpec(format!("low-pass cutoff {cutoff} Hz at fs {fs}")));
        }
        Ok(Self { sections: butterworth(order, cutoff, fs, Pass::Low) })
    }

    /// Complex response of one forward pass at `freq` Hz, as (re, im).
    pub fn response(&self, freq: f64, fs: f64) -> (f64, f64) {
        let w = 2.0 * PI * freq / fs;
        // z^-1 = e^{-jw}
        let (z1r, z1i) = (w.cos(), -w.sin());
        let (z2r, z2i) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let mut acc = (1.0, 0.0);
        for s in &self.sections {
            let num = (s.b[0] + s.b[1] * z1r + s.b[2] * z2r, s.b[1] * z1i + s.b[2] * z2i);
            let den = (1.0 + s.a[0] * z1r + s.a[1] * z2r, s.a[0] * z1i + s.a[1] * z2i);
            let d2 = den.0 * den.0 + den.1 * den.1;
            let h = ((num.0 * den.0 + num.1 * den.1) / d2, (num.1 * den.0 - num.0 * den.1) / d2);
            acc = (acc.0 * h.0 - acc.1 * h.1, acc.0 * h.1 + acc.1 * h.0);
        }
        acc
    }

    /// Magnitude of the forward-backward response (the square of one pass).
    pub fn zero_phase_gain(&self, freq: f64, fs: f64) -> f64 {
        let (re, im) = self.response(freq, fs);
        re * re + im * im
    }

    fn forward(&self, x: &mut [f64]) {
        let mut u = x.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            s.run(x, s.steady_state(u));
            u *= s.dc_gain();
        }
    }

    /// Zero-phase filtering with odd-reflection padding and steady-state
    /// initial conditions at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.forward(&mut ext);
        ext.reverse();
        self.forward(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase Butterworth band-pass of a record.
pub fn bandpass(record: &EcgRecord, spec: &FilterSpec) -> Result<EcgRecord, DspError> {
    let filter = SosFilter::bandpass(spec, record.fs as f64)?;
    Ok(EcgRecord { samples: filter.filtfilt(&record.samples), ..record.clone() })
}

/// Linear-interpolation resampling of a sample sequence.
pub fn resample_samples(samples: &[f64], fs: f64, target_fs: f64) -> Vec<f64> {
    let out_len = ((samples.len() as f64) * target_fs / fs).round() as usize;
    resample_to_len(samples, out_len, fs / target_fs)
}

/// Resamples to exactly `out_len` points, the `j`-th taken at input position `j * step`.
fn resample_to_len(samples: &[f64], out_len: usize, step: f64) -> Vec<f64> {
    let last = samples.len().saturating_sub(1);
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(last);
            if i >= last {
                return samples[last];
            }
            let frac = pos - i as f64;
            samples[i] + frac * (samples[i + 1] - samples[i])
        })
        .collect()
}

/// Stretches or squeezes an arbitrary-length piece onto `out_len` points with
/// both endpoints preserved.
pub fn resample_piece(piece: &[f64], out_len: usize) -> Vec<f64> {
    if piece.len() == 1 || out_len == 1 {
        return vec![piece[0]; out_len];
    }
    let step = (piece.len() - 1) as f64 / (out_len - 1) as f64;
    resample_to_len(piece, out_len, step)
}

pub fn resample(record: &EcgRecord, target_fs: u32) -> Result<EcgRecord, DspError> {
    if target_fs == 0 {
        return Err(DspError::InvalidInput("target rate must be positive".into()));
    }
    if target_fs == record.fs {
        return Ok(record.clone());
    }
    Ok(EcgRecord {
        samples: resample_samples(&record.samples, record.fs as f64, target_fs as f64),
        fs: target_fs,
        ..record.clone()
    })
}

pub const NORM_HALF_RANGE: f64 = 512.0;

/// Min-max map onto [-512, 512]. Inputs already spanning exactly that range
/// are returned unchanged.
pub fn normalize(samples: &[f64]) -> Result<Vec<f64>, DspError> {
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) || !(max - min).is_finite() {
        return Err(DspError::DegenerateSignal);
    }
    if min == -NORM_HALF_RANGE && max == NORM_HALF_RANGE {
        return Ok(samples.to_vec());
    }
    let range = max - min;
    Ok(samples
        .iter()
        .map(|&v| (((v - min) / range) * 2.0 * NORM_HALF_RANGE - NORM_HALF_RANGE).clamp(-NORM_HALF_RANGE, NORM_HALF_RANGE))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakKind {
    R,
    P,
    T,
}

/// Strictly increasing sample positions of one fiducial kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakList {
    pub kind: PeakKind,
    pub indices: Vec<usize>,
    pub fs: u32,
}

impl PeakList {
    pub fn new(kind: PeakKind, indices: Vec<usize>, fs: u32) -> Result<Self, DspError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DspError::InvalidInput("peak indices must be strictly increasing".into()));
        }
        Ok(Self { kind, indices, fs })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Minimum spacing between consecutive R peaks.
pub const REFRACTORY_S: f64 = 0.2;

fn moving_average_centered(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let half = width / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

fn argmax_by<F: Fn(usize) -> f64>(range: std::ops::RangeInclusive<usize>, key: F) -> usize {
    let start = *range.start();
    range.fold(start, |best, i| if key(i) > key(best) { i } else { best })
}

struct Candidate {
    pos: usize,
    height: f64,
}

/// Pan-Tompkins QRS detection: 5-15 Hz band-pass, five-point derivative,
/// squaring, 150 ms moving-window integration, then dual adaptive thresholds
/// with search-back. Returned indices sit on the largest band-passed
/// excursion near each detection, on the record's own timebase.
pub fn detect_r_peaks(record: &EcgRecord) -> Result<PeakList, DspError> {
    let fs = record.fs as f64;
    let n = record.samples.len();
    if record.fs < 100 {
        return Err(DspError::InvalidInput(format!("detector needs fs >= 100, got {}", record.fs)));
    }
    if (n as f64) < 2.0 * fs {
        return Err(DspError::InvalidInput("detector needs at least 2 s of signal".into()));
    }

    let bp = SosFilter::bandpass(&FilterSpec { low_cut: 5.0, high_cut: 15.0, order: 2 }, fs)?
        .filtfilt(&record.samples);
    let mut deriv = vec![0.0; n];
    for i in 2..n - 2 {
        deriv[i] = (2.0 * bp[i + 1] + bp[i + 2] - bp[i - 2] - 2.0 * bp[i - 1]) * fs / 8.0;
    }
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let window = ((0.150 * fs).round() as usize).max(1);
    let mwi = moving_average_centered(&squared, window);

    let refractory = (REFRACTORY_S * fs).round() as usize;
    let mut candidates: Vec<Candidate> = Vec::new();
    for i in 1..n - 1 {
        if mwi[i] > 0.0 && mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] {
            match candidates.last_mut() {
                Some(last) if i - last.pos < refractory => {
                    if mwi[i] > last.height {
                        *last = Candidate { pos: i, height: mwi[i] };
                    }
                }
                _ => candidates.push(Candidate { pos: i, height: mwi[i] }),
            }
        }
    }
    if candidates.is_empty() {
        return Err(DspError::NoPeaksFound);
    }

    let learn = (2.0 * fs) as usize;
    let learn_max = mwi[..learn.min(n)].iter().cloned().fold(0.0, f64::max);
    let learn_mean = mwi[..learn.min(n)].iter().sum::<f64>() / learn.min(n) as f64;
    let mut spki = learn_max / 3.0;
    let mut npki = learn_mean / 2.0;
    let threshold = |spki: f64, npki: f64| npki + 0.25 * (spki - npki);

    let slope_window = (0.075 * fs).round() as usize;
    let max_slope = |pos: usize| -> f64 {
        let lo = pos.saturating_sub(slope_window);
        let hi = (pos + slope_window).min(n - 1);
        deriv[lo..=hi].iter().fold(0.0, |m, d| m.max(d.abs()))
    };

    let mut qrs: Vec<usize> = Vec::new(); // indices into `candidates`
    let mut is_qrs = vec![false; candidates.len()];
    let mut rr_history: Vec<f64> = Vec::new();
    let mut last_slope = 0.0;

    let rr_avg = |hist: &[f64]| -> f64 {
        if hist.is_empty() {
            1.0
        } else {
            let tail = &hist[hist.len().saturating_sub(8)..];
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    };

    let accept = |ci: usize,
                      qrs: &mut Vec<usize>,
                      is_qrs: &mut Vec<bool>,
                      rr_history: &mut Vec<f64>,
                      last_slope: &mut f64,
                      candidates: &[Candidate]| {
        let pos = candidates[ci].pos;
        if let Some(&prev) = qrs.last() {
            let prev_pos: usize = candidates[prev].pos;
            if pos > prev_pos {
                rr_history.push((pos - prev_pos) as f64 / fs);
            }
        }
        *last_slope = max_slope(pos);
        qrs.push(ci);
        is_qrs[ci] = true;
    };

    for ci in 0..=candidates.len() {
        let pos = candidates.get(ci).map_or(n, |c| c.pos);
        // search-back for a missed beat
        if let Some(&last) = qrs.last() {
            let last_pos = candidates[last].pos;
            let gap = (pos - last_pos) as f64 / fs;
            if gap > 1.66 * rr_avg(&rr_history) {
                let th2 = 0.5 * threshold(spki, npki);
                let best = (last + 1..ci)
                    .filter(|&j| !is_qrs[j] && candidates[j].pos >= last_pos + refractory)
                    .filter(|&j| candidates[j].height > th2)
                    .max_by(|&a, &b| candidates[a].height.total_cmp(&candidates[b].height));
                if let Some(j) = best {
                    spki = 0.25 * candidates[j].height + 0.75 * spki;
                    accept(j, &mut qrs, &mut is_qrs, &mut rr_history, &mut last_slope, &candidates);
                    qrs.sort_by_key(|&q| candidates[q].pos);
                }
            }
        }
        if ci == candidates.len() {
            break;
        }
        let height = candidates[ci].height;
        if height > threshold(spki, npki) {
            let t_wave = qrs.last().is_some_and(|&last| {
                let since = (pos - candidates[last].pos) as f64 / fs;
                since < 0.36 && max_slope(pos) < 0.5 * last_slope
            });
            if t_wave {
                npki = 0.125 * height + 0.875 * npki;
            } else {
                spki = 0.125 * height + 0.875 * spki;
                accept(ci, &mut qrs, &mut is_qrs, &mut rr_history, &mut last_slope, &candidates);
            }
        } else {
            npki = 0.125 * height + 0.875 * npki;
        }
    }

    let search = (0.075 * fs).round() as usize;
    let mut peaks: Vec<usize> = qrs
        .iter()
        .map(|&ci| {
            let pos = candidates[ci].pos;
            let lo = pos.saturating_sub(search);
            let hi = (pos + search).min(n - 1);
            argmax_by(lo..=hi, |i| bp[i].abs())
        })
        .collect();
    peaks.sort_unstable();
    peaks.dedup();

    let mut kept: Vec<usize> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match kept.last_mut() {
            Some(last) if p - *last < refractory => {
                if bp[p].abs() > bp[*last].abs() {
                    *last = p;
                }
            }
            _ => kept.push(p),
        }
    }
    if kept.is_empty() {
        return Err(DspError::NoPeaksFound);
    }
    PeakList::new(PeakKind::R, kept, record.fs)
}

/// Fiducials of one beat; P or T is `None` when its search window leaves the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeatFiducials {
    pub r: usize,
    pub p: Option<usize>,
    pub t: Option<usize>,
}

pub const P_WINDOW_S: (f64, f64) = (0.24, 0.06);
pub const T_WINDOW_S: (f64, f64) = (0.08, 0.40);

/// Window-search delineation around each R peak on a 15 Hz low-passed copy
/// of the record: P is the maximum in [r - 0.24 s, r - 0.06 s], T the largest
/// absolute excursion in [r + 0.08 s, r + 0.40 s].
pub fn delineate_beats(record: &EcgRecord, r_peaks: &PeakList) -> Vec<BeatFiducials> {
    let fs = record.fs as f64;
    let n = record.samples.len();
    let smooth = match SosFilter::lowpass(2, 15.0, fs) {
        Ok(f) => f.filtfilt(&record.samples),
        Err(_) => record.samples.clone(),
    };
    let secs = |s: f64| (s * fs).round() as usize;
    let (p_far, p_near) = (secs(P_WINDOW_S.0), secs(P_WINDOW_S.1));
    let (t_near, t_far) = (secs(T_WINDOW_S.0), secs(T_WINDOW_S.1));
    r_peaks
        .indices
        .iter()
        .map(|&r| {
            let p = (r >= p_far).then(|| argmax_by(r - p_far..=r - p_near, |i| smooth[i]));
            let t = (r + t_far < n).then(|| argmax_by(r + t_near..=r + t_far, |i| smooth[i].abs()));
            BeatFiducials { r, p, t }
        })
        .collect()
}

/// P and T peak lists; beats whose window leaves the record are omitted.
pub fn delineate_pt(record: &EcgRecord, r_peaks: &PeakList) -> Result<(PeakList, PeakList), DspError> {
    if r_peaks.is_empty() {
        return Err(DspError::InvalidInput("delineation needs at least one R peak".into()));
    }
    let beats = delineate_beats(record, r_peaks);
    let strictly = |v: Vec<usize>| {
        let mut v = v;
        v.dedup();
        v
    };
    let p = strictly(beats.iter().filter_map(|b| b.p).collect());
    let t = strictly(beats.iter().filter_map(|b| b.t).collect());
    Ok((PeakList::new(PeakKind::P, p, record.fs)?, PeakList::new(PeakKind::T, t, record.fs)?))
}
