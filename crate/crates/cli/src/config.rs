//! TOML configuration. Every section and key is optional; unknown keys are
//! rejected. Defaults match the desk-scale synthetic setup.

use std::path::{Path, PathBuf};

use ecg_auth::compress::{PruneCriterion, PruneSchedule};
use ecg_auth::dsp::FilterSpec;
use ecg_auth::evalkit::{tau_grid, EvalConfig};
use ecg_auth::ingest::{DatasetCatalog, SyntheticCohort};
use ecg_auth::segment::{Preprocessor, SegmentMethod};
use ecg_auth::trainer::{Framework, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Single source of randomness for every command.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub train: TrainSection,
    pub compress: CompressSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Catalog file (`record_path,subject_id,split[,fs]` lines). Without it a
    /// synthetic cohort is generated.
    pub catalog: Option<PathBuf>,
    /// Sampling rate assumed for CSV inputs that do not state one.
    pub csv_fs: u32,
    pub synthetic: SyntheticSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { catalog: None, csv_fs: 200, synthetic: SyntheticSection::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub subjects: usize,
    pub train_duration_s: f64,
    pub test_duration_s: f64,
    pub fs: u32,
    pub noise_rms_mv: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let c = SyntheticCohort::default();
        Self {
            subjects: c.subjects,
            train_duration_s: c.train_duration_s,
            test_duration_s: c.test_duration_s,
            fs: c.fs,
            noise_rms_mv: c.noise_rms_mv,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub filter: bool,
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
    /// `npd`, `r2r` or `p2t`.
    pub method: String,
    pub max_piece_len_s: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let f = FilterSpec::default();
        let p = Preprocessor::default();
        Self {
            filter: true,
            low_cut: f.low_cut,
            high_cut: f.high_cut,
            order: f.order,
            method: p.method.to_string(),
            max_piece_len_s: p.max_piece_len_s,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `triplet` or `siamese`.
    pub framework: String,
    pub batch_size: usize,
    pub segments_per_record: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub cosine: bool,
    /// Prune to this sparsity during training (0 disables).
    pub prune_target: f64,
    pub prune_milestones: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            framework: t.framework.to_string(),
            batch_size: t.batch_size,
            segments_per_record: t.segments_per_record,
            lambda: t.lambda,
            epochs: t.epochs,
            initial_lr: t.initial_lr,
            cosine: t.cosine,
            prune_target: 0.0,
            prune_milestones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressSection {
    pub n_bits: u32,
    pub sparsity: f64,
    /// `layer` (layer-balanced) or `global`.
    pub criterion: String,
}

impl Default for CompressSection {
    fn default() -> Self {
        Self { n_bits: 8, sparsity: 0.2, criterion: "layer".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tau: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_step: f64,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub enroll_segments: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            tau: e.tau,
            tau_min: 0.5,
            tau_max: 1.0,
            tau_step: 0.1,
            genuine_trials: e.genuine_trials,
            impostor_trials: e.impostor_trials,
            enroll_segments: e.enroll_segments,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn preprocessor(&self) -> Result<Preprocessor, String> {
        let p = &self.preprocess;
        let method: SegmentMethod = p.method.parse().map_err(|e| format!("preprocess.method: {e}"))?;
        let filter = p.filter.then_some(FilterSpec { low_cut: p.low_cut, high_cut: p.high_cut, order: p.order });
        Ok(Preprocessor { filter, method, max_piece_len_s: p.max_piece_len_s })
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = &self.train;
        let framework: Framework = t.framework.parse().map_err(|e| format!("train.framework: {e}"))?;
        let prune = (t.prune_target > 0.0).then(|| PruneSchedule {
            target: t.prune_target,
            milestones: if t.prune_milestones.is_empty() { vec![0] } else { t.prune_milestones.clone() },
            criterion: self.prune_criterion().unwrap_or_default(),
        });
        Ok(TrainConfig {
            framework,
            segmentation: self.preprocessor()?.method,
            batch_size: t.batch_size,
            segments_per_record: t.segments_per_record,
            lambda: t.lambda,
            epochs: t.epochs,
            initial_lr: t.initial_lr,
            cosine: t.cosine,
            rng_seed: self.seed,
            prune,
        })
    }

    pub fn prune_criterion(&self) -> Result<PruneCriterion, String> {
        self.compress.criterion.parse().map_err(|e| format!("compress.criterion: {e}"))
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            genuine_trials: e.genuine_trials,
            impostor_trials: e.impostor_trials,
            enroll_segments: e.enroll_segments,
            tau: e.tau,
            seed: self.seed,
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        tau_grid(self.eval.tau_min, self.eval.tau_max, self.eval.tau_step)
    }

    pub fn catalog(&self) -> Result<DatasetCatalog, String> {
        match &self.dataset.catalog {
            Some(path) => DatasetCatalog::load(path, self.dataset.csv_fs).map_err(|e| e.to_string()),
            None => {
                let s = &self.dataset.synthetic;
                SyntheticCohort {
                    subjects: s.subjects,
                    train_duration_s: s.train_duration_s,
                    test_duration_s: s.test_duration_s,
                    fs: s.fs,
                    noise_rms_mv: s.noise_rms_mv,
                    seed: self.seed,
                }
                .build()
                .map_err(|e| e.to_string())
            }
        }
    }
}
