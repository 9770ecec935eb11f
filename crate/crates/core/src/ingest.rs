//! Record loading (WFDB formats 16/212, CSV), synthetic ECG generation and
//! dataset catalogs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported WFDB storage format {0} (only 16 and 212 are supported)")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("signal file truncated: expected {expected} bytes, found {found}")]
    TruncatedSignal { expected: usize, found: usize },
    #[error("parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("record {record_id} too short: {len} samples at {fs} Hz (need at least 2 s)")]
    TooShort { record_id: String, len: usize, fs: u32 },
    #[error("invalid sampling rate {0}")]
    InvalidRate(u32),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("catalog: {0}")]
    Catalog(String),
}

impl IngestError {
    fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io { path: path.to_path_buf(), source }
    }
}

/// One lead of one ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub subject_id: String,
    pub samples: Vec<f64>,
    pub fs: u32,
    pub lead: String,
}

impl EcgRecord {
    /// Builds a record, rejecting a zero rate or anything shorter than two seconds.
    pub fn new(
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
        samples: Vec<f64>,
        fs: u32,
        lead: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let record_id = record_id.into();
        if fs == 0 {
            return Err(IngestError::InvalidRate(fs));
        }
        if samples.len() < 2 * fs as usize {
            return Err(IngestError::TooShort { record_id, len: samples.len(), fs });
        }
        Ok(Self { record_id, subject_id: subject_id.into(), samples, fs, lead: lead.into() })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.fs as f64
    }

    /// Copy of this record restricted to `range` (sample indices), without the
    /// two-second length check.
    pub fn slice(&self, range: std::ops::Range<usize>, suffix: &str) -> EcgRecord {
        EcgRecord {
            record_id: format!("{}{}", self.record_id, suffix),
            subject_id: self.subject_id.clone(),
            samples: self.samples[range].to_vec(),
            fs: self.fs,
            lead: self.lead.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// WFDB
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageFormat {
    Fmt16,
    Fmt212,
}

#[derive(Debug, Clone)]
struct SignalSpec {
    file: String,
    format: StorageFormat,
    gain: f64,
    baseline: f64,
    description: String,
}

#[derive(Debug, Clone)]
struct WfdbHeader {
    name: String,
    fs: u32,
    n_samples: Option<usize>,
    signals: Vec<SignalSpec>,
}

fn parse_format(token: &str) -> Result<StorageFormat, IngestError> {
    // format may carry suffixes: 212x2:3+10
    let digits: String = token.chars().take_while(|c| c.is_ascii_digit()).collect();
    match digits.as_str() {
        "16" => Ok(StorageFormat::Fmt16),
        "212" => Ok(StorageFormat::Fmt212),
        "" => Err(IngestError::MalformedHeader(format!("bad format field `{token}`"))),
        other => Err(IngestError::UnsupportedFormat(other.to_string())),
    }
}

fn leading_number(token: &str) -> Option<f64> {
    let end = token
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .unwrap_or(token.len());
    token[..end].parse().ok()
}

fn parse_header(text: &str) -> Result<WfdbHeader, IngestError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let record_line = lines
        .next()
        .ok_or_else(|| IngestError::MalformedHeader("empty header".into()))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(IngestError::MalformedHeader("record line needs name and signal count".into()));
    }
    let name = fields[0].split('/').next().unwrap_or(fields[0]).to_string();
    let n_sig: usize = fields[1]
        .parse()
        .map_err(|_| IngestError::MalformedHeader(format!("bad signal count `{}`", fields[1])))?;
    if n_sig == 0 {
        return Err(IngestError::MalformedHeader("record declares no signals".into()));
    }
    let fs = match fields.get(2) {
        Some(tok) => {
            let f = leading_number(tok.split('/').next().unwrap_or(tok))
                .ok_or_else(|| IngestError::MalformedHeader(format!("bad sampling frequency `{tok}`")))?;
            if !(f > 0.0) || !f.is_finite() {
                return Err(IngestError::MalformedHeader(format!("sampling frequency must be positive, got {f}")));
            }
            f.round() as u32
        }
        None => 250,
    };
    if fs == 0 {
        return Err(IngestError::MalformedHeader("sampling frequency rounds to zero".into()));
    }
    let n_samples = match fields.get(3) {
        Some(tok) => Some(
            tok.parse::<usize>()
                .map_err(|_| IngestError::MalformedHeader(format!("bad sample count `{tok}`")))?,
        ),
        None => None,
    };

    let mut signals = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        let line = lines
            .next()
            .ok_or_else(|| IngestError::MalformedHeader(format!("expected {n_sig} signal lines")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(IngestError::MalformedHeader(format!("signal line `{line}` too short")));
        }
        let format = parse_format(f[1])?;
        let adc_zero = f.get(4).and_then(|t| t.parse::<f64>().ok()).unwrap_or(0.0);
        let (gain, baseline) = match f.get(2) {
            Some(tok) => {
                let g = leading_number(tok)
                    .ok_or_else(|| IngestError::MalformedHeader(format!("bad gain `{tok}`")))?;
                let baseline = match (tok.find('('), tok.find(')')) {
                    (Some(a), Some(b)) if b > a => tok[a + 1..b]
                        .parse::<f64>()
                        .map_err(|_| IngestError::MalformedHeader(format!("bad baseline in `{tok}`")))?,
                    _ => adc_zero,
                };
                (if g == 0.0 { 200.0 } else { g }, baseline)
            }
            None => (200.0, adc_zero),
        };
        let description = if f.len() > 8 { f[8..].join(" ") } else { String::new() };
        signals.push(SignalSpec { file: f[0].to_string(), format, gain, baseline, description });
    }
    Ok(WfdbHeader { name, fs, n_samples, signals })
}

/// Decodes 16-bit little-endian two's complement samples.
pub fn decode_format16(bytes: &[u8], count: usize) -> Result<Vec<i32>, IngestError> {
    let need = count * 2;
    if bytes.len() < need {
        return Err(IngestError::TruncatedSignal { expected: need, found: bytes.len() });
    }
    Ok(bytes[..need]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
        .collect())
}

/// Decodes packed 12-bit samples: each 3-byte group holds two samples. The
/// first is the low byte plus the low nibble of byte 1; the second is the
/// high nibble of byte 1 plus byte 2. Both are sign-extended from 12 bits.
pub fn decode_format212(bytes: &[u8], count: usize) -> Result<Vec<i32>, IngestError> {
    let need = (count * 3).div_ceil(2);
    if bytes.len() < need {
        return Err(IngestError::TruncatedSignal { expected: need, found: bytes.len() });
    }
    let sign_extend = |v: u16| -> i32 { ((v as i32) << 20) >> 20 };
    let mut out = Vec::with_capacity(count);
    for group in bytes.chunks(3) {
        if out.len() == count {
            break;
        }
        let b0 = group[0] as u16;
        let b1 = *group.get(1).unwrap_or(&0) as u16;
        out.push(sign_extend(b0 | ((b1 & 0x0F) << 8)));
        if out.len() == count {
            break;
        }
        let b2 = group[2] as u16;
        out.push(sign_extend(b2 | ((b1 & 0xF0) << 4)));
    }
    Ok(out)
}

/// Loads every lead of a WFDB record as an independent [`EcgRecord`].
///
/// Subject ids default to the record name; catalogs override them.
pub fn load_wfdb_leads(header_path: &Path) -> Result<Vec<EcgRecord>, IngestError> {
    let text = fs::read_to_string(header_path).map_err(|e| IngestError::io(header_path, e))?;
    let header = parse_header(&text)?;
    let first = &header.signals[0];
    if header.signals.iter().any(|s| s.file != first.file || s.format != first.format) {
        return Err(IngestError::UnsupportedFormat(
            "signals split across files or mixed formats".into(),
        ));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let dat_path = dir.join(&first.file);
    let bytes = fs::read(&dat_path).map_err(|e| IngestError::io(&dat_path, e))?;
    let n_sig = header.signals.len();
    let n_frames = match header.n_samples {
        Some(n) => n,
        None => match first.format {
            StorageFormat::Fmt16 => bytes.len() / (2 * n_sig),
            StorageFormat::Fmt212 => bytes.len() * 2 / 3 / n_sig,
        },
    };
    let total = n_frames * n_sig;
    let raw = match first.format {
        StorageFormat::Fmt16 => decode_format16(&bytes, total)?,
        StorageFormat::Fmt212 => decode_format212(&bytes, total)?,
    };

    header
        .signals
        .iter()
        .enumerate()
        .map(|(lead_idx, spec)| {
            let samples = raw
                .iter()
                .skip(lead_idx)
                .step_by(n_sig)
                .map(|&v| (v as f64 - spec.baseline) / spec.gain)
                .collect();
            let lead = if spec.description.is_empty() {
                format!("sig{lead_idx}")
            } else {
                spec.description.clone()
            };
            let record_id = if n_sig == 1 {
                header.name.clone()
            } else {
                format!("{}/{}", header.name, lead)
            };
            EcgRecord::new(record_id, header.name.clone(), samples, header.fs, lead)
        })
        .collect()
}

/// Loads the first lead of a WFDB record.
pub fn load_wfdb(header_path: &Path) -> Result<EcgRecord, IngestError> {
    Ok(load_wfdb_leads(header_path)?.swap_remove(0))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Parses one value per line, or `t,value` with the value in the second column.
pub fn parse_csv(text: &str) -> Result<Vec<f64>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let field = match cols.len() {
            1 => cols[0],
            2 => cols[1],
            n => {
                return Err(IngestError::ParseError {
                    line: i + 1,
                    reason: format!("expected 1 or 2 columns, found {n}"),
                })
            }
        };
        let v: f64 = field.parse().map_err(|_| IngestError::ParseError {
            line: i + 1,
            reason: format!("`{field}` is not a number"),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Loads a CSV trace. The subject id is the file stem.
pub fn load_csv(path: &Path, fs: u32) -> Result<EcgRecord, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let samples = parse_csv(&text)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record").to_string();
    EcgRecord::new(stem.clone(), stem, samples, fs, "csv")
}

/// Writes one sample per line using the shortest representation that parses
/// back to the same `f64`.
pub fn write_csv(path: &Path, samples: &[f64]) -> Result<(), IngestError> {
    let mut text = String::with_capacity(samples.len() * 12);
    for v in samples {
        text.push_str(&format!("{v:?}\n"));
    }
    crate::codec::write_atomic(path, text.as_bytes()).map_err(|e| IngestError::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// One Gaussian bump of the beat template, positioned relative to the R peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub offset_s: f64,
    pub width_s: f64,
    pub amplitude_mv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubjectParams {
    pub p: Wave,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
    pub heart_rate_bpm: f64,
    pub heart_rate_jitter_bpm: f64,
    pub noise_rms_mv: f64,
}

impl Default for SyntheticSubjectParams {
    fn default() -> Self {
        Self {
            p: Wave { offset_s: -0.16, width_s: 0.025, amplitude_mv: 0.15 },
            q: Wave { offset_s: -0.025, width_s: 0.010, amplitude_mv: -0.10 },
            r: Wave { offset_s: 0.0, width_s: 0.010, amplitude_mv: 1.00 },
            s: Wave { offset_s: 0.025, width_s: 0.010, amplitude_mv: -0.25 },
            t: Wave { offset_s: 0.28, width_s: 0.040, amplitude_mv: 0.30 },
            heart_rate_bpm: 60.0,
            heart_rate_jitter_bpm: 0.0,
            noise_rms_mv: 0.0,
        }
    }
}

impl SyntheticSubjectParams {
    pub fn waves(&self) -> [Wave; 5] {
        [self.p, self.q, self.r, self.s, self.t]
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.waves().iter().any(|w| !(w.width_s > 0.0)) {
            return Err(IngestError::InvalidParams("wave widths must be positive".into()));
        }
        if !(40.0..=180.0).contains(&self.heart_rate_bpm) {
            return Err(IngestError::InvalidParams(format!(
                "heart rate {} bpm outside [40, 180]",
                self.heart_rate_bpm
            )));
        }
        if self.heart_rate_jitter_bpm < 0.0 || self.noise_rms_mv < 0.0 {
            return Err(IngestError::InvalidParams("jitter and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws a plausible individual: morphology and rate vary per subject,
    /// while P and T stay inside the physiological windows around R.
    pub fn random(rng: &mut impl Rng, noise_rms_mv: f64) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let r_amp = u(0.7, 1.6);
        let t_sign = if u(0.0, 1.0) < 0.15 { -1.0 } else { 1.0 };
        Self {
            p: Wave { offset_s: u(-0.20, -0.12), width_s: u(0.015, 0.035), amplitude_mv: u(0.05, 0.25) },
            q: Wave { offset_s: u(-0.035, -0.02), width_s: u(0.006, 0.014), amplitude_mv: -u(0.0, 0.25) },
            r: Wave { offset_s: 0.0, width_s: u(0.007, 0.016), amplitude_mv: r_amp },
            s: Wave { offset_s: u(0.02, 0.04), width_s: u(0.006, 0.016), amplitude_mv: -u(0.05, 0.5) },
            t: Wave { offset_s: u(0.20, 0.34), width_s: u(0.03, 0.06), amplitude_mv: t_sign * u(0.1, 0.5) },
            heart_rate_bpm: u(52.0, 95.0),
            heart_rate_jitter_bpm: u(1.0, 4.0),
            noise_rms_mv,
        }
    }
}

/// A synthetic record plus the ground-truth fiducial indices it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticRecord {
    pub record: EcgRecord,
    pub r_peaks: Vec<usize>,
    pub p_peaks: Vec<usize>,
    pub t_peaks: Vec<usize>,
}

/// Generates a trace as a sum of five Gaussian bumps per beat, repeated at
/// jittered RR intervals, plus white Gaussian noise.
pub fn synth_record(
    params: &SyntheticSubjectParams,
    duration_s: f64,
    fs: u32,
    seed: u64,
    subject_id: &str,
) -> Result<SyntheticRecord, IngestError> {
    params.validate()?;
    if !(duration_s >= 2.0) {
        return Err(IngestError::InvalidParams(format!("duration {duration_s} s below 2 s")));
    }
    if fs == 0 {
        return Err(IngestError::InvalidRate(fs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * fs as f64).round() as usize;
    let fsf = fs as f64;
    let mean_rr = 60.0 / params.heart_rate_bpm;
    let jitter = Normal::new(0.0, 1.0).unwrap();

    // beat times cover a margin on both sides so edge beats are partially visible
    let mut beats = Vec::new();
    let mut t = 0.25 + rng.random_range(0.0..0.75) * mean_rr - 2.0 * mean_rr;
    while t < duration_s + 1.0 {
        beats.push(t);
        let hr = (params.heart_rate_bpm + params.heart_rate_jitter_bpm * jitter.sample(&mut rng))
            .clamp(30.0, 200.0);
        t += 60.0 / hr;
    }

    let mut samples = vec![0.0; n];
    for &bt in &beats {
        for w in params.waves() {
            let center = bt + w.offset_s;
            let reach = 5.0 * w.width_s;
            let lo = (((center - reach) * fsf).floor().max(0.0)) as usize;
            let hi = (((center + reach) * fsf).ceil().max(0.0) as usize).min(n);
            for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                let z = (i as f64 / fsf - center) / w.width_s;
                *s += w.amplitude_mv * (-0.5 * z * z).exp();
            }
        }
    }
    if params.noise_rms_mv > 0.0 {
        let noise = Normal::new(0.0, params.noise_rms_mv).unwrap();
        for s in &mut samples {
            *s += noise.sample(&mut rng);
        }
    }

    let to_index = |time: f64| -> Option<usize> {
        let idx = (time * fsf).round();
        (idx >= 0.0 && (idx as usize) < n).then_some(idx as usize)
    };
    let r_peaks = beats.iter().filter_map(|&b| to_index(b)).collect();
    let p_peaks = beats.iter().filter_map(|&b| to_index(b + params.p.offset_s)).collect();
    let t_peaks = beats.iter().filter_map(|&b| to_index(b + params.t.offset_s)).collect();

    let record = EcgRecord::new(format!("{subject_id}/s{seed}"), subject_id, samples, fs, "synthetic")?;
    Ok(SyntheticRecord { record, r_peaks, p_peaks, t_peaks })
}

// ---------------------------------------------------------------------------
// Catalogs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Enroll,
}

impl std::str::FromStr for Split {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "enroll" => Ok(Split::Enroll),
            other => Err(IngestError::Catalog(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Enroll => "enroll",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    PtbLike,
    MitLike,
    EcgIdLike,
    Synthetic,
    Mixed,
}

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub record: EcgRecord,
    pub split: Split,
}

/// Records with their split assignment. Each record id appears once.
#[derive(Debug, Clone)]
pub struct DatasetCatalog {
    entries: Vec<CatalogEntry>,
    pub source: SourceTag,
}

impl DatasetCatalog {
    pub fn new(source: SourceTag) -> Self {
        Self { entries: Vec::new(), source }
    }

    pub fn push(&mut self, record: EcgRecord, split: Split) -> Result<(), IngestError> {
        if self.entries.iter().any(|e| e.record.record_id == record.record_id) {
            return Err(IngestError::Catalog(format!(
                "record `{}` already assigned to a split",
                record.record_id
            )));
        }
        self.entries.push(CatalogEntry { record, split });
        Ok(())
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &EcgRecord> {
        self.entries.iter().filter(move |e| e.split == split).map(|e| &e.record)
    }

    /// Records of `split` grouped by subject, in subject-id order.
    pub fn by_subject(&self, split: Split) -> BTreeMap<&str, Vec<&EcgRecord>> {
        let mut map: BTreeMap<&str, Vec<&EcgRecord>> = BTreeMap::new();
        for r in self.records(split) {
            map.entry(r.subject_id.as_str()).or_default().push(r);
        }
        map
    }

    /// Parses `record_path,subject_id,split[,fs]` lines. Relative paths resolve
    /// against the catalog's directory; `.hea` files load as WFDB (every lead
    /// becomes its own record), anything else as CSV at `fs` (default
    /// `csv_fs`).
    pub fn load(path: &Path, csv_fs: u32) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut catalog = DatasetCatalog::new(SourceTag::Mixed);
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(IngestError::ParseError {
                    line: i + 1,
                    reason: "expected record_path,subject_id,split[,fs]".into(),
                });
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(IngestError::Catalog(format!("line {}: `{}` listed twice", i + 1, cols[0])));
            }
            let split: Split = cols[2].parse()?;
            let fs = match cols.get(3) {
                Some(tok) => tok.parse().map_err(|_| IngestError::ParseError {
                    line: i + 1,
                    reason: format!("bad sampling rate `{tok}`"),
                })?,
                None => csv_fs,
            };
            let rec_path = base.join(cols[0]);
            let records = if rec_path.extension().is_some_and(|e| e == "hea") {
                load_wfdb_leads(&rec_path)?
            } else {
                vec![load_csv(&rec_path, fs)?]
            };
            for mut r in records {
                r.subject_id = cols[1].to_string();
                catalog.push(r, split)?;
            }
        }
        Ok(catalog)
    }
}

/// Settings for a synthetic cohort: one training and one test recording per
/// subject, generated with distinct seeds.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub subjects: usize,
    pub train_duration_s: f64,
    pub test_duration_s: f64,
    pub fs: u32,
    pub noise_rms_mv: f64,
    pub seed: u64,
}

impl Default for SyntheticCohort {
    fn default() -> Self {
        Self {
            subjects: 20,
            train_duration_s: 60.0,
            test_duration_s: 120.0,
            fs: 200,
            noise_rms_mv: 0.02,
            seed: 7,
        }
    }
}

impl SyntheticCohort {
    pub fn subject_params(&self) -> Vec<SyntheticSubjectParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.subjects)
            .map(|_| SyntheticSubjectParams::random(&mut rng, self.noise_rms_mv))
            .collect()
    }

    pub fn build(&self) -> Result<DatasetCatalog, IngestError> {
        let mut catalog = DatasetCatalog::new(SourceTag::Synthetic);
        for (i, params) in self.subject_params().iter().enumerate() {
            let subject = format!("subj{i:03}");
            let base = self.seed.wrapping_mul(1_000_003).wrapping_add(2 * i as u64);
            let train = synth_record(params, self.train_duration_s, self.fs, base, &subject)?;
            let test = synth_record(params, self.test_duration_s, self.fs, base + 1, &subject)?;
            catalog.push(train.record, Split::Train)?;
            catalog.push(test.record, Split::Test)?;
        }
        Ok(catalog)
    }
}
