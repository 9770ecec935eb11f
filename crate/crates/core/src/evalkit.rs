//! Authentication evaluation protocol.
//!
//! Every test subject takes a turn as the registered user. Its templates come
//! from the first half of its test records (or from its enroll-split records
//! when the catalog has them); genuine probes come from the other half.
//! Impostor probes are drawn from other subjects, uniformly by subject. Scores
//! are computed once; thresholds are applied afterwards, so sweeps are cheap
//! and monotone by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::authdb::{AuthError, TemplateDb};
use crate::encoder::{EncoderError, Embedder};
use crate::ingest::{DatasetCatalog, EcgRecord, Split};
use crate::metric::{MetricError, Threshold};
use crate::segment::{PreparedRecord, Preprocessor, SegmentError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 test subjects, found {0}")]
    InsufficientSubjects(usize),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("segmentation failed for {record}: {source}")]
    Segmentation { record: String, source: SegmentError },
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub enroll_segments: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { genuine_trials: 100, impostor_trials: 100, enroll_segments: 5, tau: 0.7, seed: 0 }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.genuine_trials == 0 || self.impostor_trials == 0 || self.enroll_segments == 0 {
            return Err(EvalError::InvalidConfig("trial and enrollment counts must be positive".into()));
        }
        Threshold::new(self.tau)?;
        Ok(())
    }
}

/// One probe scored against a registered user's templates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub registered: String,
    pub probe_subject: String,
    pub probe_record: String,
    pub score: f64,
}

/// Genuine and impostor scores of a whole protocol run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<Trial>,
    pub impostor: Vec<Trial>,
}

impl ScoreSet {
    pub fn confusion(&self, tau: f64) -> Confusion {
        let tp = self.genuine.iter().filter(|t| t.score > tau).count();
        let fp = self.impostor.iter().filter(|t| t.score > tau).count();
        Confusion { tp, fn_: self.genuine.len() - tp, fp, tn: self.impostor.len() - fp }
    }

    /// ROC points on `taus`, in the given order.
    pub fn roc(&self, taus: &[f64]) -> Vec<RocPoint> {
        taus.iter().map(|&tau| RocPoint::from_confusion(tau, &self.confusion(tau))).collect()
    }

    /// Empirical AUC: one ROC point per distinct score plus both extremes.
    pub fn auc(&self) -> f64 {
        let mut taus: Vec<f64> = self.genuine.iter().chain(&self.impostor).map(|t| t.score).collect();
        taus.push(-1.0);
        taus.push(2.0);
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        roc_auc(&self.roc(&taus))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion { tp: self.tp + other.tp, tn: self.tn + other.tn, fp: self.fp + other.fp, fn_: self.fn_ + other.fn_ }
    }

    /// Zero when nothing was accepted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn far(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn frr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
    pub tpr: f64,
    pub fpr: f64,
}

impl RocPoint {
    pub fn from_confusion(tau: f64, c: &Confusion) -> Self {
        Self { tau, far: c.far(), frr: c.frr(), tpr: c.recall(), fpr: c.far() }
    }
}

/// Trapezoidal area under (FPR, TPR), points sorted by FPR then TPR.
pub fn roc_auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Equal-error point on a swept grid, linearly interpolated between the two
/// grid points where `FAR - FRR` changes sign. Returns `(tau, rate)`.
pub fn equal_error_rate(points: &[RocPoint]) -> Option<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    for w in pts.windows(2) {
        let d0 = w[0].far - w[0].frr;
        let d1 = w[1].far - w[1].frr;
        if d0 == 0.0 {
            return Some((w[0].tau, w[0].far));
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            let tau = w[0].tau + t * (w[1].tau - w[0].tau);
            let rate = w[0].far + t * (w[1].far - w[0].far);
            return Some((tau, rate));
        }
    }
    None
}

/// `true` when FAR never rises and FRR never falls as tau grows.
pub fn sweep_is_monotone(points: &[RocPoint]) -> bool {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    pts.windows(2).all(|w| w[1].far <= w[0].far && w[1].frr >= w[0].frr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub subjects: usize,
    pub confusion: Confusion,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

impl EvalReport {
    pub fn from_scores(scores: &ScoreSet, tau: f64, taus: &[f64], subjects: usize) -> Self {
        Self { tau, subjects, confusion: scores.confusion(tau), roc: scores.roc(taus), auc: scores.auc() }
    }

    pub fn precision(&self) -> f64 {
        self.confusion.precision()
    }

    pub fn recall(&self) -> f64 {
        self.confusion.recall()
    }

    pub fn f1(&self) -> f64 {
        self.confusion.f1()
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    pub fn far(&self) -> f64 {
        self.confusion.far()
    }

    pub fn frr(&self) -> f64 {
        self.confusion.frr()
    }

    pub const CSV_HEADER: &'static str = "tau,subjects,tp,tn,fp,fn,precision,recall,f1,accuracy,far,frr,auc";

    pub fn csv(&self) -> String {
        let c = &self.confusion;
        format!(
            "{}\n{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            Self::CSV_HEADER,
            self.tau,
            self.subjects,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            self.precision(),
            self.recall(),
            self.f1(),
            self.accuracy(),
            self.far(),
            self.frr(),
            self.auc
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("tau,far,frr,tpr,fpr\n");
        for p in &self.roc {
            let _ = writeln!(out, "{:.4},{:.6},{:.6},{:.6},{:.6}", p.tau, p.far, p.frr, p.tpr, p.fpr);
        }
        out
    }

    pub fn table(&self) -> String {
        let c = &self.confusion;
        let mut out = String::new();
        let _ = writeln!(out, "subjects   {:>8}", self.subjects);
        let _ = writeln!(out, "tau        {:>8.3}", self.tau);
        let _ = writeln!(out, "TP/FN      {:>8} / {}", c.tp, c.fn_);
        let _ = writeln!(out, "TN/FP      {:>8} / {}", c.tn, c.fp);
        for (name, v) in [
            ("accuracy", self.accuracy()),
            ("precision", self.precision()),
            ("recall", self.recall()),
            ("f1", self.f1()),
            ("FAR", self.far()),
            ("FRR", self.frr()),
            ("AUC", self.auc),
        ] {
            let _ = writeln!(out, "{name:<10} {:>8.4}", v);
        }
        out
    }
}

/// Evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn tau_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

struct SubjectMaterial {
    enroll: Vec<PreparedRecord>,
    probe: Vec<PreparedRecord>,
}

fn halves(record: &EcgRecord) -> (EcgRecord, EcgRecord) {
    let mid = record.samples.len() / 2;
    (record.slice(0..mid, "/enroll"), record.slice(mid..record.samples.len(), "/probe"))
}

fn prepare(pre: &Preprocessor, record: &EcgRecord) -> Result<PreparedRecord, EvalError> {
    pre.prepare(record).map_err(|source| EvalError::Segmentation { record: record.record_id.clone(), source })
}

fn subject_material(catalog: &DatasetCatalog, pre: &Preprocessor) -> Result<BTreeMap<String, SubjectMaterial>, EvalError> {
    let enroll_split = catalog.by_subject(Split::Enroll);
    let mut out = BTreeMap::new();
    for (subject, records) in catalog.by_subject(Split::Test) {
        let material = match enroll_split.get(subject) {
            Some(enroll) => SubjectMaterial {
                enroll: enroll.iter().map(|r| prepare(pre, r)).collect::<Result<_, _>>()?,
                probe: records.iter().map(|r| prepare(pre, r)).collect::<Result<_, _>>()?,
            },
            None => {
                let mut enroll = Vec::new();
                let mut probe = Vec::new();
                for r in records {
                    let (a, b) = halves(r);
                    enroll.push(prepare(pre, &a)?);
                    probe.push(prepare(pre, &b)?);
                }
                SubjectMaterial { enroll, probe }
            }
        };
        out.insert(subject.to_string(), material);
    }
    Ok(out)
}

fn pick<'a>(records: &'a [PreparedRecord], rng: &mut impl Rng) -> &'a PreparedRecord {
    &records[rng.random_range(0..records.len())]
}

/// Per-subject random stream, independent of iteration order elsewhere.
fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Probes grouped in attempt groups of size `attempts` per trial.
struct Probes {
    genuine: Vec<Vec<(String, String, crate::encoder::FeatureVector)>>,
    impostor: Vec<Vec<(String, String, crate::encoder::FeatureVector)>>,
}

struct Protocol {
    db: TemplateDb,
    subjects: Vec<String>,
    probes: Vec<Probes>,
}

fn build_protocol(
    catalog: &DatasetCatalog,
    embedder: &Embedder<'_>,
    pre: &Preprocessor,
    cfg: &EvalConfig,
    attempts: usize,
) -> Result<Protocol, EvalError> {
    cfg.validate()?;
    let material = subject_material(catalog, pre)?;
    if material.len() < 2 {
        return Err(EvalError::InsufficientSubjects(material.len()));
    }
    let subjects: Vec<String> = material.keys().cloned().collect();
    let mut db = TemplateDb::for_embedder(embedder, Threshold::new(cfg.tau)?);
    let mut probes = Vec::with_capacity(subjects.len());
    for (idx, subject) in subjects.iter().enumerate() {
        let mut rng = subject_rng(cfg.seed, idx);
        let own = &material[subject];
        let mut enroll = Vec::with_capacity(cfg.enroll_segments);
        for i in 0..cfg.enroll_segments {
            // Spread enrollment across records, distinct windows per record.
            let rec = &own.enroll[i % own.enroll.len()];
            enroll.push(embedder.embed(&rec.sample(&mut rng))?);
        }
        db.enroll_vectors(subject, enroll)?;
        let draw = |pool: &[PreparedRecord], rng: &mut ChaCha8Rng| -> Result<_, EvalError> {
            let rec = pick(pool, rng);
            let seg = rec.sample(rng);
            Ok((seg.subject_id.clone(), seg.record_id.clone(), embedder.embed(&seg)?))
        };
        let genuine = (0..cfg.genuine_trials)
            .map(|_| (0..attempts).map(|_| draw(&own.probe, &mut rng)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let others: Vec<&String> = subjects.iter().filter(|s| *s != subject).collect();
        let impostor = (0..cfg.impostor_trials)
            .map(|_| {
                (0..attempts)
                    .map(|_| {
                        let other = others[rng.random_range(0..others.len())];
                        draw(&material[other].probe, &mut rng)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        probes.push(Probes { genuine, impostor });
    }
    Ok(Protocol { db, subjects, probes })
}

/// Scores every genuine and impostor probe once.
pub fn collect_scores(
    catalog: &DatasetCatalog,
    embedder: &Embedder<'_>,
    pre: &Preprocessor,
    cfg: &EvalConfig,
) -> Result<(ScoreSet, usize), EvalError> {
    let p = build_protocol(catalog, embedder, pre, cfg, 1)?;
    let mut scores = ScoreSet::default();
    for (subject, probes) in p.subjects.iter().zip(&p.probes) {
        for (groups, out) in [(&probes.genuine, &mut scores.genuine), (&probes.impostor, &mut scores.impostor)] {
            for group in groups {
                let (probe_subject, probe_record, v) = &group[0];
                out.push(Trial {
                    registered: subject.clone(),
                    probe_subject: probe_subject.clone(),
                    probe_record: probe_record.clone(),
                    score: p.db.score(subject, v)?.value(),
                });
            }
        }
    }
    Ok((scores, p.subjects.len()))
}

/// Full protocol at `cfg.tau`, with ROC points on `taus`.
pub fn run_protocol(
    catalog: &DatasetCatalog,
    embedder: &Embedder<'_>,
    pre: &Preprocessor,
    cfg: &EvalConfig,
    taus: &[f64],
) -> Result<EvalReport, EvalError> {
    let (scores, subjects) = collect_scores(catalog, embedder, pre, cfg)?;
    Ok(EvalReport::from_scores(&scores, cfg.tau, taus, subjects))
}

/// `(tau, FAR, FRR)` for each threshold, from a single scoring pass.
pub fn sweep_threshold(
    catalog: &DatasetCatalog,
    embedder: &Embedder<'_>,
    pre: &Preprocessor,
    cfg: &EvalConfig,
    taus: &[f64],
) -> Result<Vec<RocPoint>, EvalError> {
    let (scores, _) = collect_scores(catalog, embedder, pre, cfg)?;
    Ok(scores.roc(taus))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatRate {
    pub attempts: usize,
    pub genuine_accept: f64,
    pub impostor_accept: f64,
}

/// Accept rates for 1..=`max_attempts` repeats under any-success. Each trial
/// draws `max_attempts` probes; `k` attempts use the first `k` of them.
pub fn repeat_rates(
    catalog: &DatasetCatalog,
    embedder: &Embedder<'_>,
    pre: &Preprocessor,
    cfg: &EvalConfig,
    max_attempts: usize,
) -> Result<Vec<RepeatRate>, EvalError> {
    if max_attempts == 0 {
        return Err(EvalError::InvalidConfig("max_attempts must be positive".into()));
    }
    let p = build_protocol(catalog, embedder, pre, cfg, max_attempts)?;
    // best[k-1] per trial = best score over the first k attempts.
    let prefix_best = |subject: &str, groups: &[Vec<(String, String, crate::encoder::FeatureVector)>]| {
        groups
            .iter()
            .map(|g| {
                let mut best = f64::NEG_INFINITY;
                g.iter()
                    .map(|(_, _, v)| {
                        best = best.max(p.db.score(subject, v)?.value());
                        Ok(best)
                    })
                    .collect::<Result<Vec<f64>, EvalError>>()
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (subject, probes) in p.subjects.iter().zip(&p.probes) {
        genuine.extend(prefix_best(subject, &probes.genuine)?);
        impostor.extend(prefix_best(subject, &probes.impostor)?);
    }
    let rate = |trials: &[Vec<f64>], k: usize| {
        trials.iter().filter(|b| b[k - 1] > cfg.tau).count() as f64 / trials.len() as f64
    };
    Ok((1..=max_attempts)
        .map(|k| RepeatRate { attempts: k, genuine_accept: rate(&genuine, k), impostor_accept: rate(&impostor, k) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Architecture, ConvParams, EncoderModel};
    use crate::ingest::SyntheticCohort;

    fn trials(scores: &[f64]) -> Vec<Trial> {
        scores
            .iter()
            .map(|&score| Trial { registered: "a".into(), probe_subject: "b".into(), probe_record: "r".into(), score })
            .collect()
    }

    #[test]
    fn perfect_separator() {
        let s = ScoreSet { genuine: trials(&[1.0; 10]), impostor: trials(&[0.0; 10]) };
        let r = EvalReport::from_scores(&s, 0.7, &tau_grid(0.0, 1.0, 0.1), 1);
        assert_eq!(r.accuracy(), 1.0);
        assert_eq!(r.far(), 0.0);
        assert_eq!(r.frr(), 0.0);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn sweep_limits_and_monotonicity() {
        let s = ScoreSet { genuine: trials(&[0.9, 0.8, 0.75, 0.4]), impostor: trials(&[0.1, 0.3, 0.72, 0.5]) };
        let pts = s.roc(&tau_grid(0.0, 1.0, 0.05));
        assert_eq!(pts[0].far, 1.0);
        assert_eq!(pts[0].frr, 0.0);
        let last = pts.last().unwrap();
        assert_eq!((last.far, last.frr), (0.0, 1.0));
        assert!(sweep_is_monotone(&pts));
        let (tau, eer) = equal_error_rate(&pts).unwrap();
        assert!(tau > 0.0 && tau < 1.0 && eer > 0.0 && eer < 1.0);
    }

    #[test]
    fn metric_identities() {
        let c = Confusion { tp: 7, tn: 5, fp: 3, fn_: 2 };
        assert_eq!(c.precision(), 0.7);
        assert_eq!(c.recall(), 7.0 / 9.0);
        assert_eq!(c.accuracy(), 12.0 / 17.0);
        assert_eq!(c.far(), 3.0 / 8.0);
        assert_eq!(c.frr(), 2.0 / 9.0);
    }

    #[test]
    fn auc_examples() {
        let p = |fpr, tpr| RocPoint { tau: 0.0, far: fpr, frr: 1.0 - tpr, tpr, fpr };
        assert_eq!(roc_auc(&[p(0.0, 0.0), p(0.0, 1.0), p(1.0, 1.0)]), 1.0);
        assert_eq!(roc_auc(&[p(0.0, 0.0), p(1.0, 1.0)]), 0.5);
    }

    #[test]
    fn grid_has_expected_rows() {
        let g = tau_grid(0.5, 1.0, 0.1);
        assert_eq!(g, vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        let s = ScoreSet { genuine: trials(&[0.9]), impostor: trials(&[0.1]) };
        let r = EvalReport::from_scores(&s, 0.7, &g, 1);
        assert_eq!(r.roc_csv().lines().count(), 7);
    }

    fn cohort(subjects: usize) -> DatasetCatalog {
        SyntheticCohort { subjects, train_duration_s: 12.0, test_duration_s: 24.0, ..Default::default() }.build().unwrap()
    }

    #[test]
    fn protocol_counts_and_subject_separation() {
        let cat = cohort(3);
        let model = EncoderModel::canonical(1);
        let emb = Embedder::new(&model);
        let cfg = EvalConfig { genuine_trials: 4, impostor_trials: 4, enroll_segments: 2, ..Default::default() };
        let (scores, subjects) = collect_scores(&cat, &emb, &Preprocessor::default(), &cfg).unwrap();
        assert_eq!(subjects, 3);
        assert_eq!(scores.confusion(0.7).total(), 8 * 3);
        assert!(scores.impostor.iter().all(|t| t.probe_subject != t.registered));
        assert!(scores.genuine.iter().all(|t| t.probe_subject == t.registered && t.probe_record.ends_with("probe")));
        let again = collect_scores(&cat, &emb, &Preprocessor::default(), &cfg).unwrap().0;
        assert_eq!(again, scores);
    }

    #[test]
    fn repeat_rates_are_nested() {
        let cat = cohort(3);
        let model = EncoderModel::canonical(2);
        let emb = Embedder::new(&model);
        let cfg = EvalConfig { genuine_trials: 5, impostor_trials: 5, enroll_segments: 2, tau: 0.3, seed: 3 };
        let rates = repeat_rates(&cat, &emb, &Preprocessor::default(), &cfg, 3).unwrap();
        assert!(rates.windows(2).all(|w| w[1].genuine_accept >= w[0].genuine_accept));
        assert!(rates.windows(2).all(|w| w[1].impostor_accept >= w[0].impostor_accept));
    }

    #[test]
    fn too_few_subjects_and_degenerate_models() {
        let model = EncoderModel::canonical(1);
        let emb = Embedder::new(&model);
        let cfg = EvalConfig { genuine_trials: 2, impostor_trials: 2, enroll_segments: 1, ..Default::default() };
        let err = collect_scores(&cohort(1), &emb, &Preprocessor::default(), &cfg).unwrap_err();
        assert!(matches!(err, EvalError::InsufficientSubjects(1)));

        let arch = Architecture::canonical();
        let params = arch.conv_dims().iter().map(|d| ConvParams::zeros(d.out_ch, d.in_ch, d.kernel)).collect();
        let flat = EncoderModel::from_params(arch, params).unwrap();
        let emb = Embedder::new(&flat);
        let err = collect_scores(&cohort(2), &emb, &Preprocessor::default(), &cfg).unwrap_err();
        assert!(matches!(err, EvalError::Auth(AuthError::Metric(MetricError::DegenerateVector))));
    }
}
