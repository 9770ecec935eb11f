//! Fixed-length encoder inputs from three segmentation methods.
//!
//! * NPD: a random 1000-sample window of the 200 Hz trace.
//! * R2R: inter-R-peak pieces, each resampled to 200 samples, five consecutive
//!   pieces spliced together.
//! * P2T: P-peak to T-peak piece of each beat, same splicing.
//!
//! Every segment is min-max normalized onto [-512, 512].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{self, BeatFiducials, DspError, FilterSpec, PeakList};
use crate::ingest::EcgRecord;
use crate::{SEGMENT_LEN, TARGET_FS};

pub const PIECE_LEN: usize = 200;
pub const PIECES_PER_SEGMENT: usize = 5;
pub const DEFAULT_MAX_PIECE_LEN_S: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("record too short: {len} samples, need {need}")]
    RecordTooShort { len: usize, need: usize },
    #[error("too few usable beats: {found}, need {need}")]
    TooFewBeats { found: usize, need: usize },
    #[error("record must be at {expected} Hz, got {found} Hz")]
    WrongRate { expected: u32, found: u32 },
    #[error("invalid segment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentMethod {
    Npd,
    R2r,
    P2t,
}

impl FromStr for SegmentMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "npd" => Ok(Self::Npd),
            "r2r" => Ok(Self::R2r),
            "p2t" => Ok(Self::P2t),
            other => Err(format!("unknown segmentation method `{other}` (npd, r2r, p2t)")),
        }
    }
}

impl fmt::Display for SegmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Npd => "NPD",
            Self::R2r => "R2R",
            Self::P2t => "P2T",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    values: Vec<f64>,
    pub method: SegmentMethod,
    pub record_id: String,
    pub subject_id: String,
    pub piece_boundaries: Vec<usize>,
}

impl Segment {
    /// Checks length, amplitude range and piece layout.
    pub fn new(
        values: Vec<f64>,
        method: SegmentMethod,
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self, SegmentError> {
        if values.len() != SEGMENT_LEN {
            return Err(SegmentError::Invalid(format!("length {} != {SEGMENT_LEN}", values.len())));
        }
        if values.iter().any(|v| !(-dsp::NORM_HALF_RANGE..=dsp::NORM_HALF_RANGE).contains(v)) {
            return Err(SegmentError::Invalid("values outside [-512, 512]".into()));
        }
        let piece_boundaries = match method {
            SegmentMethod::Npd => Vec::new(),
            _ => (0..=PIECES_PER_SEGMENT).map(|i| i * PIECE_LEN).collect(),
        };
        Ok(Self { values, method, record_id: record_id.into(), subject_id: subject_id.into(), piece_boundaries })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn normalized_segment(raw: &[f64], method: SegmentMethod, record: &EcgRecord) -> Result<Segment, SegmentError> {
    Segment::new(dsp::normalize(raw)?, method, &record.record_id, &record.subject_id)
}

/// `count` random windows of a 200 Hz record, starts uniform in [0, len - 1000].
pub fn segment_npd(record: &EcgRecord, count: usize, rng_seed: u64) -> Result<Vec<Segment>, SegmentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count).map(|_| npd_window(record, &mut rng)).collect()
}

fn npd_window(record: &EcgRecord, rng: &mut impl Rng) -> Result<Segment, SegmentError> {
    if record.fs != TARGET_FS {
        return Err(SegmentError::WrongRate { expected: TARGET_FS, found: record.fs });
    }
    let len = record.samples.len();
    if len < SEGMENT_LEN {
        return Err(SegmentError::RecordTooShort { len, need: SEGMENT_LEN });
    }
    let start = rng.random_range(0..=len - SEGMENT_LEN);
    normalized_segment(&record.samples[start..start + SEGMENT_LEN], SegmentMethod::Npd, record)
}

/// Resamples each piece to 200 samples and splices sliding groups of five
/// (stride 1) into normalized segments.
fn splice_pieces(pieces: &[&[f64]], method: SegmentMethod, record: &EcgRecord) -> Result<Vec<Segment>, SegmentError> {
    if pieces.len() < PIECES_PER_SEGMENT {
        return Err(SegmentError::TooFewBeats { found: pieces.len(), need: PIECES_PER_SEGMENT });
    }
    let resampled: Vec<Vec<f64>> = pieces.iter().map(|p| dsp::resample_piece(p, PIECE_LEN)).collect();
    resampled
        .windows(PIECES_PER_SEGMENT)
        .map(|group| {
            let joined: Vec<f64> = group.concat();
            normalized_segment(&joined, method, record)
        })
        .collect()
}

/// R2R segmentation from known R peaks. Pieces longer than `max_piece_len_s`
/// are dropped before grouping, so groups are consecutive among survivors.
pub fn r2r_from_peaks(record: &EcgRecord, peaks: &PeakList, max_piece_len_s: f64) -> Result<Vec<Segment>, SegmentError> {
    if peaks.len() < PIECES_PER_SEGMENT + 1 {
        return Err(SegmentError::TooFewBeats { found: peaks.len(), need: PIECES_PER_SEGMENT + 1 });
    }
    let max_len = (max_piece_len_s * record.fs as f64).round() as usize;
    let pieces: Vec<&[f64]> = peaks
        .indices
        .windows(2)
        .filter(|w| w[1] - w[0] <= max_len)
        .map(|w| &record.samples[w[0]..w[1]])
        .collect();
    splice_pieces(&pieces, SegmentMethod::R2r, record)
}

pub fn segment_r2r(record: &EcgRecord, max_piece_len_s: f64) -> Result<Vec<Segment>, SegmentError> {
    let peaks = dsp::detect_r_peaks(record)?;
    r2r_from_peaks(record, &peaks, max_piece_len_s)
}

/// P2T segmentation from delineated beats; beats missing P or T are skipped.
pub fn p2t_from_beats(record: &EcgRecord, beats: &[BeatFiducials]) -> Result<Vec<Segment>, SegmentError> {
    let pieces: Vec<&[f64]> = beats
        .iter()
        .filter_map(|b| match (b.p, b.t) {
            (Some(p), Some(t)) if p < t => Some(&record.samples[p..=t]),
            _ => None,
        })
        .collect();
    splice_pieces(&pieces, SegmentMethod::P2t, record)
}

pub fn segment_p2t(record: &EcgRecord) -> Result<Vec<Segment>, SegmentError> {
    let peaks = dsp::detect_r_peaks(record)?;
    let beats = dsp::delineate_beats(record, &peaks);
    p2t_from_beats(record, &beats)
}

/// Noise reduction, resampling and segmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub filter: Option<FilterSpec>,
    pub method: SegmentMethod,
    pub max_piece_len_s: f64,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self { filter: Some(FilterSpec::default()), method: SegmentMethod::Npd, max_piece_len_s: DEFAULT_MAX_PIECE_LEN_S }
    }
}

impl Preprocessor {
    pub fn with_method(method: SegmentMethod) -> Self {
        Self { method, ..Self::default() }
    }

    /// Filtered, 200 Hz copy of a record.
    pub fn condition(&self, record: &EcgRecord) -> Result<EcgRecord, SegmentError> {
        let filtered = match &self.filter {
            Some(spec) => dsp::bandpass(record, spec)?,
            None => record.clone(),
        };
        Ok(dsp::resample(&filtered, TARGET_FS)?)
    }

    /// Conditions the record once and keeps what later sampling needs.
    pub fn prepare(&self, record: &EcgRecord) -> Result<PreparedRecord, SegmentError> {
        let conditioned = self.condition(record)?;
        let source = match self.method {
            SegmentMethod::Npd => {
                if conditioned.samples.len() < SEGMENT_LEN {
                    return Err(SegmentError::RecordTooShort { len: conditioned.samples.len(), need: SEGMENT_LEN });
                }
                Source::Windows(conditioned)
            }
            SegmentMethod::R2r => Source::Pool(segment_r2r(&conditioned, self.max_piece_len_s)?),
            SegmentMethod::P2t => Source::Pool(segment_p2t(&conditioned)?),
        };
        Ok(PreparedRecord { record_id: record.record_id.clone(), subject_id: record.subject_id.clone(), source })
    }
}

#[derive(Debug, Clone)]
enum Source {
    Windows(EcgRecord),
    Pool(Vec<Segment>),
}

/// A record ready for repeated random segment draws.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub record_id: String,
    pub subject_id: String,
    source: Source,
}

impl PreparedRecord {
    pub fn sample(&self, rng: &mut impl Rng) -> Segment {
        match &self.source {
            Source::Windows(rec) => npd_window(rec, rng).expect("prepared NPD record is long enough"),
            Source::Pool(pool) => pool[rng.random_range(0..pool.len())].clone(),
        }
    }

    /// `count` draws; pooled methods pick distinct segments while the pool allows.
    pub fn sample_n(&self, count: usize, rng: &mut impl Rng) -> Vec<Segment> {
        match &self.source {
            Source::Pool(pool) if pool.len() >= count => {
                index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i].clone()).collect()
            }
            _ => (0..count).map(|_| self.sample(rng)).collect(),
        }
    }

    /// Number of distinct segments for pooled methods; `None` for NPD.
    pub fn pool_size(&self) -> Option<usize> {
        match &self.source {
            Source::Windows(_) => None,
            Source::Pool(p) => Some(p.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::PeakKind;
    use crate::ingest::{synth_record, SyntheticSubjectParams};
    use proptest::prelude::*;

    fn ramp_record(len: usize) -> EcgRecord {
        let samples = (0..len).map(|i| ((i as f64) * 0.05).sin() + (i % 37) as f64 * 0.01).collect();
        EcgRecord::new("ramp", "s", samples, 200, "I").unwrap()
    }

    #[test]
    fn npd_counts_and_range() {
        let rec = ramp_record(2000);
        let segs = segment_npd(&rec, 3, 5).unwrap();
        assert_eq!(segs.len(), 3);
        for s in &segs {
            assert_eq!(s.values().len(), 1000);
            assert!(s.piece_boundaries.is_empty());
        }
        assert_eq!(segs, segment_npd(&rec, 3, 5).unwrap());
    }

    #[test]
    fn npd_short_record() {
        let mut rec = ramp_record(2000);
        rec.samples.truncate(999);
        assert_eq!(segment_npd(&rec, 1, 0), Err(SegmentError::RecordTooShort { len: 999, need: 1000 }));
    }

    #[test]
    fn npd_wrong_rate() {
        let mut rec = ramp_record(2000);
        rec.fs = 360;
        assert!(matches!(segment_npd(&rec, 1, 0), Err(SegmentError::WrongRate { .. })));
    }

    fn peaks(idx: Vec<usize>) -> PeakList {
        PeakList::new(PeakKind::R, idx, 200).unwrap()
    }

    #[test]
    fn r2r_sliding_groups() {
        let rec = ramp_record(3000);
        let p = peaks((0..11).map(|i| 100 + i * 200).collect());
        let segs = r2r_from_peaks(&rec, &p, 2.0).unwrap();
        assert_eq!(segs.len(), 6);
        assert_eq!(segs[0].piece_boundaries, vec![0, 200, 400, 600, 800, 1000]);
    }

    #[test]
    fn r2r_drops_long_piece_then_groups_survivors() {
        // piece #5 (between peaks 5 and 6) is 500 samples = 2.5 s
        let mut idx: Vec<usize> = (0..6).map(|i| 100 + i * 200).collect();
        let after = idx[5] + 500;
        idx.extend((0..5).map(|i| after + i * 200));
        let rec = ramp_record(4000);
        let segs = r2r_from_peaks(&rec, &peaks(idx), 2.0).unwrap();
        // 10 pieces, one dropped -> 9 survivors -> 5 sliding groups
        assert_eq!(segs.len(), 5);
    }

    #[test]
    fn r2r_too_few_peaks() {
        let rec = ramp_record(3000);
        assert!(matches!(
            r2r_from_peaks(&rec, &peaks(vec![100, 300, 500, 700]), 2.0),
            Err(SegmentError::TooFewBeats { .. })
        ));
    }

    fn beat(r: usize, p: Option<usize>, t: Option<usize>) -> BeatFiducials {
        BeatFiducials { r, p, t }
    }

    #[test]
    fn p2t_counts() {
        let rec = ramp_record(4000);
        let beats: Vec<_> = (0..9).map(|i| 200 + i * 200).map(|r| beat(r, Some(r - 30), Some(r + 55))).collect();
        assert_eq!(p2t_from_beats(&rec, &beats).unwrap().len(), 5);

        let mut with_gap = beats.clone();
        with_gap[0].p = None;
        assert_eq!(p2t_from_beats(&rec, &with_gap).unwrap().len(), 4);

        assert!(matches!(p2t_from_beats(&rec, &beats[..3]), Err(SegmentError::TooFewBeats { found: 3, .. })));
    }

    #[test]
    fn synthetic_record_through_all_methods() {
        let mut params = SyntheticSubjectParams::default();
        params.noise_rms_mv = 0.02;
        params.heart_rate_jitter_bpm = 2.0;
        let s = synth_record(&params, 30.0, 500, 3, "a").unwrap();
        for method in [SegmentMethod::Npd, SegmentMethod::R2r, SegmentMethod::P2t] {
            let prepared = Preprocessor::with_method(method).prepare(&s.record).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let segs = prepared.sample_n(4, &mut rng);
            assert_eq!(segs.len(), 4);
            assert!(segs.iter().all(|s| s.method == method));
            if method != SegmentMethod::Npd {
                // ~30 beats -> plenty of groups
                assert!(prepared.pool_size().unwrap() > 15);
            }
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("P2T".parse::<SegmentMethod>().unwrap(), SegmentMethod::P2t);
        assert!("xyz".parse::<SegmentMethod>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn segments_satisfy_invariants(seed in 0u64..1000, hr in 50.0f64..110.0, noise in 0.0f64..0.08) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = SyntheticSubjectParams::random(&mut rng, noise);
            params.heart_rate_bpm = hr;
            let s = synth_record(&params, 20.0, 200, seed, "p").unwrap();
            let conditioned = Preprocessor::default().condition(&s.record).unwrap();
            let npd = segment_npd(&conditioned, 5, seed).unwrap();
            for seg in npd {
                prop_assert_eq!(seg.values().len(), 1000);
                prop_assert!(seg.values().iter().all(|v| (-512.0..=512.0).contains(v)));
            }
            if let Ok(peaks) = dsp::detect_r_peaks(&conditioned) {
                let survivors = peaks.indices.windows(2).filter(|w| w[1] - w[0] <= 400).count();
                match r2r_from_peaks(&conditioned, &peaks, 2.0) {
                    Ok(segs) => {
                        prop_assert_eq!(segs.len(), survivors.saturating_sub(4));
                        for seg in segs {
                            prop_assert_eq!(seg.piece_boundaries.clone(), vec![0, 200, 400, 600, 800, 1000]);
                            prop_assert!(seg.values().iter().all(|v| (-512.0..=512.0).contains(v)));
                        }
                    }
                    Err(SegmentError::TooFewBeats { .. }) => prop_assert!(survivors < 5 || peaks.len() < 6),
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
                let beats = dsp::delineate_beats(&conditioned, &peaks);
                let complete = beats.iter().filter(|b| matches!((b.p, b.t), (Some(p), Some(t)) if p < t)).count();
                match p2t_from_beats(&conditioned, &beats) {
                    Ok(segs) => prop_assert_eq!(segs.len(), complete - 4),
                    Err(SegmentError::TooFewBeats { .. }) => prop_assert!(complete < 5),
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }
        }

        #[test]
        fn npd_windows_stay_inside(len in 1000usize..3000, count in 1usize..20, seed in 0u64..100) {
            // a strictly increasing ramp lets each window's start be recovered from its values
            let samples: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let rec = EcgRecord { record_id: "r".into(), subject_id: "s".into(), samples, fs: 200, lead: "I".into() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let seg = npd_window(&rec, &mut rng).unwrap();
                prop_assert_eq!(seg.values()[0], -512.0);
                prop_assert_eq!(seg.values()[999], 512.0);
            }
        }
    }
}
