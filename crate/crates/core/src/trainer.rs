//! Self-supervised contrastive training of the encoder.
//!
//! Pairing is by record: segments of the same record are positives, segments
//! of different records are negatives, whatever the subject. Two frameworks:
//!
//! * siamese: `m` records x `n` segments, all within-record pairs as
//!   positives, an equal number of cross-record pairs drawn without
//!   replacement as negatives, loss `max(0, mean d_P - mean d_N + lambda)`;
//! * triplet: per record an anchor and positive from the record and a
//!   negative from another random record, loss `sum_i max(0, d_P - d_N + lambda)`.
//!
//! Distances are `1 - |r|`. Parameters are updated with Adam under a
//! per-epoch cosine learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compress::{self, CompressError, PruneSchedule};
use crate::encoder::{ConvParams, EncoderError, EncoderModel, Gradients, Trace};
use crate::ingest::{DatasetCatalog, Split};
use crate::metric::{self, MetricError};
use crate::segment::{PreparedRecord, Preprocessor, SegmentError, SegmentMethod};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training records")]
    NoTrainingData,
    #[error("segmentation failed for {record}: {source}")]
    SegmentationFailed { record: String, source: SegmentError },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Compress(#[from] CompressError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    Siamese,
    Triplet,
}

impl FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "siamese" => Ok(Self::Siamese),
            "triplet" => Ok(Self::Triplet),
            other => Err(format!("unknown framework '{other}' (expected siamese or triplet)")),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Siamese => "siamese",
            Self::Triplet => "triplet",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub framework: Framework,
    pub segmentation: SegmentMethod,
    /// Records per batch (`m`).
    pub batch_size: usize,
    /// Segments drawn per record in the siamese framework (`n`).
    pub segments_per_record: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub cosine: bool,
    pub rng_seed: u64,
    pub prune: Option<PruneSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Triplet,
            segmentation: SegmentMethod::Npd,
            batch_size: 16,
            segments_per_record: 4,
            lambda: 0.7,
            epochs: 200,
            initial_lr: 1e-3,
            cosine: true,
            rng_seed: 0,
            prune: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.framework == Framework::Siamese && self.segments_per_record < 2 {
            return bad("segments_per_record must be at least 2");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (0, 1)");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive and finite");
        }
        if let Some(p) = &self.prune {
            if !(0.0..1.0).contains(&p.target) {
                return bad("prune target must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// `(N_pos, N_neg)` for `m` records of `n` segments each.
pub fn count_pairs(m: usize, n: usize) -> (usize, usize) {
    (m * n * (n - 1) / 2, m * (m - 1) * n * n / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletHardness {
    Easy,
    Hard,
    SemiHard,
}

/// `d_N <= d_P` is hard, `d_N >= d_P + lambda` is easy, anything between is semi-hard.
pub fn classify_triplet(d_p: f64, d_n: f64, lambda: f64) -> TripletHardness {
    if d_n <= d_p {
        TripletHardness::Hard
    } else if d_n >= d_p + lambda {
        TripletHardness::Easy
    } else {
        TripletHardness::SemiHard
    }
}

/// `lr0 (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

/// Index pairs into a flat list of `m * n` segments where record `i` owns
/// indices `i*n .. (i+1)*n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// All positive pairs plus `N_pos` negatives sampled without replacement.
pub fn plan_siamese_pairs(m: usize, n: usize, rng: &mut impl Rng) -> PairPlan {
    let mut positives = Vec::new();
    let mut all_neg = Vec::new();
    for a in 0..m * n {
        for b in a + 1..m * n {
            if a / n == b / n {
                positives.push((a, b));
            } else {
                all_neg.push((a, b));
            }
        }
    }
    let take = positives.len().min(all_neg.len());
    let mut picked = index::sample(rng, all_neg.len(), take).into_vec();
    picked.sort_unstable();
    let negatives = picked.into_iter().map(|i| all_neg[i]).collect();
    PairPlan { positives, negatives }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
}

fn embed_all(model: &EncoderModel, inputs: &[&[f64]]) -> Result<Vec<Trace>, EncoderError> {
    inputs.iter().map(|x| model.forward_trace(x)).collect()
}

fn backprop(model: &EncoderModel, traces: &[Trace], upstream: &[Vec<f64>]) -> Result<Gradients, EncoderError> {
    let mut total = Gradients::zeros_like(model);
    for (trace, up) in traces.iter().zip(upstream) {
        if up.iter().any(|g| *g != 0.0) {
            total.add_assign(&trace.backward(model, up)?);
        }
    }
    Ok(total)
}

fn degenerate(e: MetricError) -> StepFailure {
    StepFailure::NonFinite(format!("embedding distance undefined: {e}"))
}

/// Loss-level failures before they are tagged with epoch/batch.
#[derive(Debug)]
pub enum StepFailure {
    NonFinite(String),
    Encoder(EncoderError),
}

impl From<EncoderError> for StepFailure {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}

/// Siamese loss and parameter gradients for a given pair plan.
pub fn siamese_step(
    model: &EncoderModel,
    inputs: &[&[f64]],
    plan: &PairPlan,
    lambda: f64,
) -> Result<StepOutput, StepFailure> {
    let traces = embed_all(model, inputs)?;
    let dim = model.architecture().output_dim();
    let mut upstream = vec![vec![0.0; dim]; inputs.len()];
    let mut pair_terms = |pairs: &[(usize, usize)], weight: f64, grads: bool| -> Result<f64, StepFailure> {
        let mut sum = 0.0;
        for &(a, b) in pairs {
            let dg = metric::distance_with_grad(traces[a].output(), traces[b].output()).map_err(degenerate)?;
            sum += dg.distance;
            if grads {
                upstream[a].iter_mut().zip(&dg.grad_x).for_each(|(u, g)| *u += weight * g);
                upstream[b].iter_mut().zip(&dg.grad_y).for_each(|(u, g)| *u += weight * g);
            }
        }
        Ok(sum / pairs.len() as f64)
    };
    let np = plan.positives.len() as f64;
    let nn = plan.negatives.len() as f64;
    let mean_p = pair_terms(&plan.positives, 0.0, false)?;
    let mean_n = pair_terms(&plan.negatives, 0.0, false)?;
    let raw = mean_p - mean_n + lambda;
    if !raw.is_finite() {
        return Err(StepFailure::NonFinite(format!("loss is {raw}")));
    }
    if raw <= 0.0 {
        return Ok(StepOutput { loss: 0.0, grads: Gradients::zeros_like(model) });
    }
    pair_terms(&plan.positives, 1.0 / np, true)?;
    pair_terms(&plan.negatives, -1.0 / nn, true)?;
    let grads = backprop(model, &traces, &upstream)?;
    Ok(StepOutput { loss: raw, grads })
}

/// Triplet loss `sum_i max(0, d(a_i, p_i) - d(a_i, n_i) + lambda)` and gradients.
pub fn triplet_step(
    model: &EncoderModel,
    triplets: &[[&[f64]; 3]],
    lambda: f64,
) -> Result<(StepOutput, Vec<TripletHardness>), StepFailure> {
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut hardness = Vec::with_capacity(triplets.len());
    for t in triplets {
        let traces = embed_all(model, t)?;
        let dp = metric::distance_with_grad(traces[0].output(), traces[1].output()).map_err(degenerate)?;
        let dn = metric::distance_with_grad(traces[0].output(), traces[2].output()).map_err(degenerate)?;
        hardness.push(classify_triplet(dp.distance, dn.distance, lambda));
        let term = dp.distance - dn.distance + lambda;
        if !term.is_finite() {
            return Err(StepFailure::NonFinite(format!("triplet term is {term}")));
        }
        if term <= 0.0 {
            continue;
        }
        loss += term;
        let anchor: Vec<f64> = dp.grad_x.iter().zip(&dn.grad_x).map(|(a, b)| a - b).collect();
        let neg: Vec<f64> = dn.grad_y.iter().map(|g| -g).collect();
        total.add_assign(&backprop(model, &traces, &[anchor, dp.grad_y, neg])?);
    }
    Ok((StepOutput { loss, grads: total }, hardness))
}

/// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<ConvParams>,
    v: Vec<ConvParams>,
}

impl Adam {
    pub fn new(model: &EncoderModel) -> Self {
        let zeros: Vec<ConvParams> = Gradients::zeros_like(model).layers;
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut [ConvParams], grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (l, p) in params.iter_mut().enumerate() {
            update(&mut p.weight, &grads.layers[l].weight, &mut self.m[l].weight, &mut self.v[l].weight);
            update(&mut p.bias, &grads.layers[l].bias, &mut self.m[l].bias, &mut self.v[l].bias);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    /// `epoch,mean_loss,lr` rows with a header.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr\n");
        for s in &self.history {
            out.push_str(&format!("{},{:?},{:?}\n", s.epoch, s.mean_loss, s.lr));
        }
        out
    }
}

fn prepare_train(catalog: &DatasetCatalog, pre: &Preprocessor) -> Result<Vec<PreparedRecord>, TrainError> {
    catalog
        .records(Split::Train)
        .map(|r| {
            pre.prepare(r).map_err(|source| TrainError::SegmentationFailed { record: r.record_id.clone(), source })
        })
        .collect()
}

/// Shuffled record indices chunked into batches of `m`; a trailing
/// single-record chunk joins the previous batch.
fn batches(count: usize, m: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(m).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Trains `model` on the train split of `catalog`.
pub fn train(
    catalog: &DatasetCatalog,
    model: &EncoderModel,
    cfg: &TrainConfig,
    pre: &Preprocessor,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(catalog, model, cfg, pre, |_| {})
}

pub fn train_with_progress(
    catalog: &DatasetCatalog,
    model: &EncoderModel,
    cfg: &TrainConfig,
    pre: &Preprocessor,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if !model.is_full_precision() {
        return Err(TrainError::InvalidConfig("only full-precision models can be trained".into()));
    }
    let pre = Preprocessor { method: cfg.segmentation, ..pre.clone() };
    let records = prepare_train(catalog, &pre)?;
    if records.len() < 2 {
        return Err(TrainError::NoTrainingData);
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if let Some(schedule) = &cfg.prune {
            if let Some(s) = schedule.sparsity_at(epoch) {
                let mask = compress::magnitude_mask(&model, s, schedule.criterion)?;
                model.set_mask(Some(mask));
            }
        }
        let lr = if cfg.cosine { cosine_lr(cfg.initial_lr, epoch, cfg.epochs) } else { cfg.initial_lr };
        let mut losses = Vec::new();
        for (b, batch) in batches(records.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let tag = |failure: StepFailure| match failure {
                StepFailure::NonFinite(detail) => TrainError::NonFiniteLoss { epoch, batch: b, detail },
                StepFailure::Encoder(e) => TrainError::Encoder(e),
            };
            let mut out = match cfg.framework {
                Framework::Siamese => {
                    let n = cfg.segments_per_record;
                    let segs: Vec<_> = batch.iter().flat_map(|&i| records[i].sample_n(n, &mut rng)).collect();
                    let inputs: Vec<&[f64]> = segs.iter().map(|s| s.values()).collect();
                    let plan = plan_siamese_pairs(batch.len(), n, &mut rng);
                    siamese_step(&model, &inputs, &plan, cfg.lambda).map_err(tag)?
                }
                Framework::Triplet => {
                    let segs: Vec<_> = batch
                        .iter()
                        .map(|&i| {
                            let ap = records[i].sample_n(2, &mut rng);
                            let mut j = rng.random_range(0..records.len() - 1);
                            if j >= i {
                                j += 1;
                            }
                            let neg = records[j].sample(&mut rng);
                            [ap[0].clone(), ap[1].clone(), neg]
                        })
                        .collect();
                    let triplets: Vec<[&[f64]; 3]> =
                        segs.iter().map(|t| [t[0].values(), t[1].values(), t[2].values()]).collect();
                    triplet_step(&model, &triplets, cfg.lambda).map_err(tag)?.0
                }
            };
            if !out.grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, detail: "gradient is not finite".into() });
            }
            if let Some(mask) = model.mask() {
                for (g, keep) in out.grads.layers.iter_mut().zip(&mask.layers) {
                    g.weight.iter_mut().zip(keep).filter(|(_, k)| !**k).for_each(|(w, _)| *w = 0.0);
                }
            }
            adam.step(model.params_mut(), &out.grads, lr);
            let mask = model.mask().cloned();
            if mask.is_some() {
                model.set_mask(mask);
            }
            let finite = model.params().iter().all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()));
            if !finite {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, detail: "parameters diverged".into() });
            }
            losses.push(out.loss);
        }
        let stats = EpochStats { epoch, mean_loss: losses.iter().sum::<f64>() / losses.len() as f64, lr };
        progress(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Architecture, LayerSpec};
    use crate::ingest::SyntheticCohort;

    #[test]
    fn pair_counts_match_enumeration() {
        for m in 2..=8 {
            for n in 2..=8 {
                let mut pos = 0;
                let mut neg = 0;
                for a in 0..m * n {
                    for b in a + 1..m * n {
                        if a / n == b / n {
                            pos += 1;
                        } else {
                            neg += 1;
                        }
                    }
                }
                assert_eq!(count_pairs(m, n), (pos, neg));
            }
        }
        assert_eq!(count_pairs(4, 3), (12, 54));
        assert_eq!(count_pairs(2, 2), (2, 4));
    }

    #[test]
    fn hardness_boundaries() {
        assert_eq!(classify_triplet(0.1, 0.9, 0.7), TripletHardness::Easy);
        assert_eq!(classify_triplet(0.5, 0.4, 0.7), TripletHardness::Hard);
        assert_eq!(classify_triplet(0.2, 0.6, 0.7), TripletHardness::SemiHard);
        assert_eq!(classify_triplet(0.3, 0.3, 0.7), TripletHardness::Hard);
        assert_eq!(classify_triplet(0.25, 0.75, 0.5), TripletHardness::Easy);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 100), 0.05);
        assert!(cosine_lr(0.05, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.05, 50, 100) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn negatives_never_share_a_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 2..6 {
            for n in 2..5 {
                let plan = plan_siamese_pairs(m, n, &mut rng);
                assert_eq!(plan.positives.len(), count_pairs(m, n).0);
                assert_eq!(plan.negatives.len(), plan.positives.len());
                assert!(plan.negatives.iter().all(|(a, b)| a / n != b / n));
                let mut uniq = plan.negatives.clone();
                uniq.dedup();
                assert_eq!(uniq.len(), plan.negatives.len());
            }
        }
    }

    fn tiny_model(seed: u64) -> EncoderModel {
        let arch = Architecture::new(
            32,
            vec![
                LayerSpec::Conv1d { in_ch: 1, out_ch: 2, kernel: 3, same_padding: true },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { window: 2, stride: 2 },
                LayerSpec::Flatten,
            ],
            32,
        )
        .unwrap();
        EncoderModel::init(arch, seed)
    }

    fn inputs(count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identical_embeddings_give_lambda() {
        let model = tiny_model(1);
        let x = inputs(1, 2).remove(0);
        let all: Vec<&[f64]> = vec![&x; 4];
        let plan = plan_siamese_pairs(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let out = siamese_step(&model, &all, &plan, 0.7).unwrap();
        assert!((out.loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn siamese_loss_matches_direct_recomputation() {
        let model = tiny_model(3);
        let xs = inputs(6, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let plan = plan_siamese_pairs(3, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let out = siamese_step(&model, &refs, &plan, 0.9).unwrap();
        let emb: Vec<Vec<f64>> = xs.iter().map(|x| model.forward_values(x).unwrap()).collect();
        let d = |a: usize, b: usize| metric::distance(&emb[a], &emb[b]).unwrap();
        let mp = plan.positives.iter().map(|&(a, b)| d(a, b)).sum::<f64>() / plan.positives.len() as f64;
        let mn = plan.negatives.iter().map(|&(a, b)| d(a, b)).sum::<f64>() / plan.negatives.len() as f64;
        assert!((out.loss - (mp - mn + 0.9).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn triplet_hinge_and_sum() {
        let model = tiny_model(5);
        let xs = inputs(3, 6);
        let t = [xs[0].as_slice(), xs[1].as_slice(), xs[2].as_slice()];
        let emb: Vec<Vec<f64>> = xs.iter().map(|x| model.forward_values(x).unwrap()).collect();
        let dp = metric::distance(&emb[0], &emb[1]).unwrap();
        let dn = metric::distance(&emb[0], &emb[2]).unwrap();
        let (out, h) = triplet_step(&model, &[t, t], 0.6).unwrap();
        assert!((out.loss - 2.0 * (dp - dn + 0.6).max(0.0)).abs() < 1e-12);
        assert_eq!(h[0], classify_triplet(dp, dn, 0.6));
        // An identical anchor/positive with lambda close to zero leaves only -d_N.
        let same = [xs[0].as_slice(), xs[0].as_slice(), xs[2].as_slice()];
        let (out, _) = triplet_step(&model, &[same], 1e-12).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let model = tiny_model(7);
        let xs = inputs(4, 8);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let plan = PairPlan { positives: vec![(0, 1), (2, 3)], negatives: vec![(0, 2), (1, 3)] };
        let out = siamese_step(&model, &refs, &plan, 1e-9).unwrap();
        if out.loss == 0.0 {
            assert!(out.grads.is_zero());
        }
    }

    fn small_cohort(subjects: usize) -> DatasetCatalog {
        SyntheticCohort { subjects, train_duration_s: 20.0, test_duration_s: 20.0, ..Default::default() }.build().unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let cat = small_cohort(3);
        let model = EncoderModel::canonical(1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&cat, &model, &cfg, &Preprocessor::default()).unwrap();
        assert_eq!(out.model.to_bytes(), model.to_bytes());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cat = small_cohort(3);
        let model = EncoderModel::canonical(2);
        let cfg = TrainConfig { epochs: 2, rng_seed: 11, ..Default::default() };
        let a = train(&cat, &model, &cfg, &Preprocessor::default()).unwrap();
        let b = train(&cat, &model, &cfg, &Preprocessor::default()).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history_csv().lines().count(), 3);
    }

    #[test]
    fn pruned_entries_stay_zero_during_training() {
        let cat = small_cohort(3);
        let model = EncoderModel::canonical(3);
        let cfg = TrainConfig {
            epochs: 2,
            framework: Framework::Siamese,
            segments_per_record: 2,
            prune: Some(PruneSchedule {
                target: 0.3,
                milestones: vec![0],
                criterion: compress::PruneCriterion::LayerBalanced,
            }),
            ..Default::default()
        };
        let out = train(&cat, &model, &cfg, &Preprocessor::default()).unwrap();
        let mask = out.model.mask().expect("mask applied");
        for (p, keep) in out.model.params().iter().zip(&mask.layers) {
            for (w, k) in p.weight.iter().zip(keep) {
                if !k {
                    assert_eq!(*w, 0.0);
                }
            }
        }
        assert_eq!(mask.pruned(), compress::PruneMask::target_count(0.3, mask.total()));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lambda: 1.0, ..Default::default() },
            TrainConfig { framework: Framework::Siamese, segments_per_record: 1, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }
}
