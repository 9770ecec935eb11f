//! Enrollment template store and authentication decisions.
//!
//! A [`TemplateDb`] is bound to one model by fingerprint. Authentication is
//! 1:1: a probe is compared only with the claimed identity's templates and
//! the best (maximum) mapping score is thresholded.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::codec::{self, Reader, Writer};
use crate::encoder::{EncoderError, Embedder, FeatureVector};
use crate::metric::{self, Decision, MatchScore, MetricError, Threshold};
use crate::segment::Segment;
use crate::FEATURE_DIM;

pub const DB_MAGIC: &[u8; 4] = b"ECGT";
pub const DB_VERSION: u8 = 1;
pub const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("model fingerprint does not match the template database")]
    ModelMismatch,
    #[error("unknown identity '{0}'")]
    UnknownIdentity(String),
    #[error("feature vector has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no segments supplied")]
    NoSegments,
    #[error("attempts must be in 1..={MAX_ATTEMPTS}, got {0}")]
    InvalidPolicy(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a template database (bad magic)")]
    BadMagic,
    #[error("unsupported template database version {0}")]
    VersionMismatch(u8),
    #[error("template database checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed template database: {0}")]
    Malformed(String),
}

/// Repeat-authentication policy: accept if any of `attempts` probes is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthPolicy {
    attempts: usize,
}

impl AuthPolicy {
    pub fn new(attempts: usize) -> Result<Self, AuthError> {
        if (1..=MAX_ATTEMPTS).contains(&attempts) {
            Ok(Self { attempts })
        } else {
            Err(AuthError::InvalidPolicy(attempts))
        }
    }

    pub fn attempts(&self) -> usize {
        self.attempts
    }
}

impl Default for AuthPolicy {
    fn default() -> Self {
        Self { attempts: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuthResult {
    pub decision: Decision,
    pub score: MatchScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub decision: Decision,
    /// Best score of each attempt, in order.
    pub scores: Vec<MatchScore>,
}

impl RepeatResult {
    pub fn best(&self) -> MatchScore {
        self.scores.iter().copied().fold(MatchScore::new(0.0).unwrap(), |a, b| if b > a { b } else { a })
    }
}

/// Any-success aggregation over per-attempt scores.
pub fn any_success(scores: &[MatchScore], tau: Threshold) -> Decision {
    if scores.iter().any(|s| metric::decide(*s, tau).is_accept()) {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateDb {
    fingerprint: [u8; 32],
    tau: Threshold,
    entries: BTreeMap<String, Vec<FeatureVector>>,
}

impl TemplateDb {
    pub fn new(fingerprint: [u8; 32], tau: Threshold) -> Self {
        Self { fingerprint, tau, entries: BTreeMap::new() }
    }

    pub fn for_embedder(embedder: &Embedder<'_>, tau: Threshold) -> Self {
        Self::new(embedder.fingerprint(), tau)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn tau(&self) -> Threshold {
        self.tau
    }

    pub fn set_tau(&mut self, tau: Threshold) {
        self.tau = tau;
    }

    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn templates(&self, identity: &str) -> Option<&[FeatureVector]> {
        self.entries.get(identity).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_embedder(&self, embedder: &Embedder<'_>) -> Result<(), AuthError> {
        if embedder.fingerprint() != self.fingerprint {
            return Err(AuthError::ModelMismatch);
        }
        Ok(())
    }

    fn check_vector(&self, v: &FeatureVector) -> Result<(), AuthError> {
        if v.model_fingerprint != Some(self.fingerprint) {
            return Err(AuthError::ModelMismatch);
        }
        if v.dim() != FEATURE_DIM {
            return Err(AuthError::DimensionMismatch { expected: FEATURE_DIM, found: v.dim() });
        }
        Ok(())
    }

    /// Embeds and appends one template per segment; returns the new count.
    pub fn enroll(&mut self, identity: &str, segments: &[Segment], embedder: &Embedder<'_>) -> Result<usize, AuthError> {
        self.check_embedder(embedder)?;
        let vectors = segments.iter().map(|s| embedder.embed(s)).collect::<Result<Vec<_>, _>>()?;
        self.enroll_vectors(identity, vectors)
    }

    /// Appends pre-computed templates, all or nothing.
    pub fn enroll_vectors(&mut self, identity: &str, vectors: Vec<FeatureVector>) -> Result<usize, AuthError> {
        if vectors.is_empty() {
            return Err(AuthError::NoSegments);
        }
        for v in &vectors {
            self.check_vector(v)?;
            // A zero-variance template could never be matched.
            metric::pearson(&v.values, &v.values)?;
        }
        let list = self.entries.entry(identity.to_string()).or_default();
        list.extend(vectors);
        Ok(list.len())
    }

    /// Best mapping score of `probe` against the claimed identity's templates.
    pub fn score(&self, identity: &str, probe: &FeatureVector) -> Result<MatchScore, AuthError> {
        self.check_vector(probe)?;
        let templates = self.entries.get(identity).ok_or_else(|| AuthError::UnknownIdentity(identity.to_string()))?;
        let mut best = MatchScore::new(0.0).unwrap();
        for t in templates {
            let s = metric::mapping_score(&probe.values, &t.values)?;
            if s > best {
                best = s;
            }
        }
        Ok(best)
    }

    pub fn authenticate(&self, identity: &str, segment: &Segment, embedder: &Embedder<'_>) -> Result<AuthResult, AuthError> {
        self.authenticate_at(identity, segment, embedder, self.tau)
    }

    /// As [`authenticate`](Self::authenticate) with a per-call threshold.
    pub fn authenticate_at(
        &self,
        identity: &str,
        segment: &Segment,
        embedder: &Embedder<'_>,
        tau: Threshold,
    ) -> Result<AuthResult, AuthError> {
        self.check_embedder(embedder)?;
        if !self.entries.contains_key(identity) {
            return Err(AuthError::UnknownIdentity(identity.to_string()));
        }
        let score = self.score(identity, &embedder.embed(segment)?)?;
        Ok(AuthResult { decision: metric::decide(score, tau), score })
    }

    pub fn authenticate_repeat(
        &self,
        identity: &str,
        segments: &[Segment],
        embedder: &Embedder<'_>,
        policy: AuthPolicy,
    ) -> Result<RepeatResult, AuthError> {
        if segments.len() != policy.attempts() {
            return Err(AuthError::InvalidPolicy(segments.len()));
        }
        let scores = segments
            .iter()
            .map(|s| self.authenticate(identity, s, embedder).map(|r| r.score))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RepeatResult { decision: any_success(&scores, self.tau), scores })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DB_MAGIC);
        w.u8(DB_VERSION);
        w.bytes(&self.fingerprint);
        w.f64(self.tau.value());
        w.u32(self.entries.len() as u32);
        for (id, vectors) in &self.entries {
            w.str(id);
            w.u32(vectors.len() as u32);
            for v in vectors {
                w.str(&v.record_id);
                w.str(&v.subject_id);
                w.u32(v.values.len() as u32);
                v.values.iter().for_each(|&x| w.f64(x));
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, AuthError> {
        if data.len() < DB_MAGIC.len() || &data[..DB_MAGIC.len()] != DB_MAGIC {
            return Err(AuthError::BadMagic);
        }
        match data.get(DB_MAGIC.len()) {
            Some(&v) if v != DB_VERSION => return Err(AuthError::VersionMismatch(v)),
            _ => {}
        }
        let payload = codec::verify_crc(data).ok_or(AuthError::ChecksumMismatch)?;
        let short = |_| AuthError::Malformed("unexpected end of payload".into());
        let mut r = Reader::new(&payload[DB_MAGIC.len() + 1..]);
        let fingerprint: [u8; 32] = r.take(32).map_err(short)?.try_into().expect("32 bytes");
        let tau_raw = r.f64().map_err(short)?;
        let tau = Threshold::new(tau_raw).map_err(|_| AuthError::Malformed(format!("threshold {tau_raw}")))?;
        let mut db = Self::new(fingerprint, tau);
        for _ in 0..r.u32().map_err(short)? {
            let id = r.str().map_err(short)?;
            let count = r.u32().map_err(short)?;
            let mut vectors = Vec::new();
            for _ in 0..count {
                let record_id = r.str().map_err(short)?;
                let subject_id = r.str().map_err(short)?;
                let dim = r.u32().map_err(short)? as usize;
                let values = (0..dim).map(|_| r.f64().map_err(short)).collect::<Result<Vec<_>, _>>()?;
                vectors.push(FeatureVector { values, record_id, subject_id, model_fingerprint: Some(fingerprint) });
            }
            if db.entries.insert(id.clone(), vectors).is_some() {
                return Err(AuthError::Malformed(format!("duplicate identity '{id}'")));
            }
        }
        if !r.is_empty() {
            return Err(AuthError::Malformed("trailing bytes after payload".into()));
        }
        Ok(db)
    }

    pub fn persist(&self, path: &Path) -> Result<(), AuthError> {
        Ok(codec::write_atomic(path, &self.to_bytes())?)
    }

    pub fn restore(path: &Path) -> Result<Self, AuthError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
