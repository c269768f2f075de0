//! Adapter training against a cached teacher.

use serde::{Deserialize, Serialize};

use super::cache::{TeacherCache, TeacherCacheRecord};
use super::loss::topk_kl_node;
use crate::backbone::{forward, Backbone};
use crate::error::{Error, Result};
use crate::lexicon::{mark_decisive, weights_from_masks, MaskPair, Matcher, WeightProfile};
use crate::numeric::losses::weighted_ce;
use crate::numeric::{Adam, AdamConfig, GradTape, Matrix};
use crate::seed;
use crate::steering::AdapterSet;
use crate::synthtask::{query_tokens, CaseRecord, EOS};
use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight on the KL term; `1 − alpha` goes to weighted CE.
    pub alpha: f64,
    pub temperature: f64,
    /// Cached teacher logits per position.
    pub k: usize,
    pub shots: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: WeightProfile,
    /// Include the EOS position in the KL term.
    pub kl_on_eos: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.8,
            temperature: 2.0,
            k: 32,
            shots: 8,
            lr: 1e-4,
            epochs: 5,
            batch_size: 4,
            weights: WeightProfile::default(),
            kl_on_eos: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("distill.alpha", "must be in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("distill.temperature", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("distill.k", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("distill.lr", "must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("distill.epochs", "epochs and batch_size must be positive"));
        }
        self.weights.validate()
    }
}

/// One case ready for student training: query-only input, targets, masks and
/// the teacher record.
#[derive(Clone, Debug)]
pub struct PreparedCase<'c> {
    pub case_id: u64,
    /// `[BOS, COND, cond…, REPORT, report…]` without the final token.
    pub input: Vec<u32>,
    /// Row of the logits predicting the first report token.
    pub offset: usize,
    pub targets: Vec<usize>,
    pub masks: MaskPair,
    pub teacher: &'c TeacherCacheRecord,
}

impl PreparedCase<'_> {
    /// CE weights over every input row; rows before `offset` get weight 0.
    fn row_weights(&self, profile: &WeightProfile) -> (Vec<usize>, Vec<f64>) {
        let mut targets = vec![0usize; self.offset];
        targets.extend_from_slice(&self.targets);
        let mut w = vec![0.0; self.offset];
        w.extend(weights_from_masks(&self.masks, profile));
        (targets, w)
    }
}

/// Rejects a cache built for another dataset or with other settings.
pub fn check_cache(cache: &TeacherCache, dataset_id: u64, cfg: &DistillConfig) -> Result<()> {
    let mismatch = |what: &str, expected: String, found: String| {
        Err(Error::ArtifactMismatch {
            what: format!("teacher cache {what}"),
            expected,
            found,
        })
    };
    if cache.dataset_id != dataset_id {
        return mismatch("dataset id", format!("{dataset_id:016x}"), format!("{:016x}", cache.dataset_id));
    }
    if cache.k != cfg.k {
        return mismatch("K", cfg.k.to_string(), cache.k.to_string());
    }
    if cache.shots != cfg.shots {
        return mismatch("shots", cfg.shots.to_string(), cache.shots.to_string());
    }
    Ok(())
}

/// Pairs cases with their cached teacher records and decisive masks. Cases
/// without a record are skipped.
pub fn prepare<'c>(cases: &[CaseRecord], cache: &'c TeacherCache, matcher: &Matcher) -> Result<Vec<PreparedCase<'c>>> {
    let mut out = Vec::new();
    for c in cases {
        let Some(rec) = cache.get(c.id) else { continue };
        if rec.positions() != c.report.len() {
            return Err(Error::ArtifactMismatch {
                what: format!("teacher record for case {}", c.id),
                expected: format!("{} positions", c.report.len()),
                found: format!("{}", rec.positions()),
            });
        }
        let active: Vec<usize> = c.labels.clone();
        let masks = mark_decisive(&c.report, &active, matcher, EOS)?;
        let mut input = query_tokens(&c.condition);
        let offset = input.len() - 1;
        input.extend_from_slice(&c.report[..c.report.len() - 1]);
        out.push(PreparedCase {
            case_id: c.id,
            input,
            offset,
            targets: c.report.iter().map(|&t| t as usize).collect(),
            masks,
            teacher: rec,
        });
    }
    Ok(out)
}

/// Objective components of one case or averaged over several.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Total CE weight `Σ w`.
    pub weight_sum: f64,
    pub masses: SupervisionMass,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.loss += other.loss * scale;
        self.ce += other.ce * scale;
        self.kl += other.kl * scale;
        self.weight_sum += other.weight_sum * scale;
        self.masses.template += other.masses.template * scale;
        self.masses.path += other.masses.path * scale;
        self.masses.eos += other.masses.eos * scale;
    }
}

/// Builds the objective on a tape. Returns the loss node and its breakdown.
fn case_objective<'a>(
    tape: &mut GradTape<'a>,
    model: &'a Backbone,
    adapters: &'a AdapterSet,
    trainable: bool,
    case: &PreparedCase<'_>,
    cfg: &DistillConfig,
) -> Result<(crate::numeric::NodeId, LossBreakdown, Vec<crate::numeric::NodeId>)> {
    let bb = model.register(tape, false);
    let nodes = adapters.register(tape, trainable);
    let mut hook = adapters.tape_hook(&nodes);
    let logits = forward(tape, model, &bb, &case.input, &mut hook)?;
    let mut terms = Vec::new();
    let mut b = LossBreakdown::default();
    if cfg.alpha > 0.0 {
        let n = case.teacher.positions() - usize::from(!cfg.kl_on_eos);
        let (ids, tl) = (&case.teacher.ids[..n], &case.teacher.logits[..n]);
        let kl = topk_kl_node(tape, logits, case.offset, ids, tl, cfg.temperature)?;
        b.kl = tape.scalar(kl);
        terms.push((kl, cfg.alpha));
    }
    b.masses = supervision_mass([&case.masks], &cfg.weights);
    b.weight_sum = b.masses.total();
    if cfg.alpha < 1.0 {
        let (targets, weights) = case.row_weights(&cfg.weights);
        let ce = weighted_ce(tape, logits, &targets, &weights)?;
        b.ce = tape.scalar(ce);
        terms.push((ce, 1.0 - cfg.alpha));
    }
    let loss = tape.linear_combination(&terms)?;
    b.loss = tape.scalar(loss);
    Ok((loss, b, nodes))
}

/// Objective and gradients w.r.t. every adapter tensor, in [`AdapterSet::tensors`] order.
pub fn case_gradients(
    model: &Backbone,
    adapters: &AdapterSet,
    case: &PreparedCase<'_>,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut tape = GradTape::new();
    let (loss, b, nodes) = case_objective(&mut tape, model, adapters, true, case, cfg)?;
    tape.backward(loss)?;
    let grads = nodes
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.value(id).rows(), tape.value(id).cols()))
        })
        .collect();
    Ok((b, grads))
}

fn map_cases<T: Send>(cases: &[&PreparedCase<'_>], f: impl Fn(&PreparedCase<'_>) -> Result<T> + Sync) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cases.par_iter().map(|c| f(c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cases.iter().map(|c| f(c)).collect()
    }
}

/// Mean objective over `cases` without gradients.
pub fn evaluate_objective(
    model: &Backbone,
    adapters: &AdapterSet,
    cases: &[PreparedCase<'_>],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let refs: Vec<&PreparedCase<'_>> = cases.iter().collect();
    let parts = map_cases(&refs, |c| {
        let mut tape = GradTape::new();
        case_objective(&mut tape, model, adapters, false, c, cfg).map(|r| r.1)
    })?;
    let mut mean = LossBreakdown::default();
    let inv = 1.0 / parts.len() as f64;
    parts.iter().for_each(|p| mean.accumulate(p, inv));
    Ok(mean)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub train: LossBreakdown,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Validation objective before the first update, if validation cases
    /// were supplied.
    pub initial_val: Option<LossBreakdown>,
    pub final_val: Option<LossBreakdown>,
}

/// Trains `adapters` in place on `train` with the backbone frozen.
pub fn train_adapters(
    model: &Backbone,
    adapters: &mut AdapterSet,
    train: &[PreparedCase<'_>],
    val: &[PreparedCase<'_>],
    cfg: &DistillConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<DistillReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training cases with teacher records".into()));
    }
    let shapes: Vec<usize> = adapters.tensors().iter().map(|m| m.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let initial_val = if val.is_empty() {
        None
    } else {
        Some(evaluate_objective(model, adapters, val, cfg)?)
    };
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &format!("distill/epoch/{epoch}")));
        let mut epoch_sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedCase<'_>> = chunk.iter().map(|&i| &train[i]).collect();
            let results = map_cases(&batch, |c| case_gradients(model, adapters, c, cfg))?;
            let inv = 1.0 / batch.len() as f64;
            let mut mean = LossBreakdown::default();
            let mut grads: Vec<Matrix> = Vec::new();
            for (b, g) in results {
                mean.accumulate(&b, inv);
                if grads.is_empty() {
                    grads = g;
                    grads.iter_mut().for_each(|m| m.scale(inv));
                } else {
                    for (acc, mut x) in grads.iter_mut().zip(g) {
                        x.scale(inv);
                        acc.add_assign(&x);
                    }
                }
            }
            if !mean.loss.is_finite() {
                return Err(Error::Divergence { step, loss: mean.loss });
            }
            let grefs: Vec<&Matrix> = grads.iter().collect();
            adam.step_with_lr(&mut adapters.tensors_mut(), &grefs, cfg.lr);
            let log = StepLog {
                epoch,
                step,
                breakdown: mean,
            };
            on_step(&log);
            steps.push(log);
            epoch_sum.accumulate(&mean, batch.len() as f64 / train.len() as f64);
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_objective(model, adapters, val, cfg)?.loss)
        };
        log::info!("epoch {epoch}: train {:.4} val {:?}", epoch_sum.loss, val_loss);
        epochs.push(EpochLog {
            epoch,
            train: epoch_sum,
            val_loss,
        });
    }
    adapters.round_to_f32();
    let final_val = if val.is_empty() {
        None
    } else {
        Some(evaluate_objective(model, adapters, val, cfg)?)
    };
    Ok(DistillReport {
        steps,
        epochs,
        initial_val,
        final_val,
    })
}

/// CE weight mass per position category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisionMass {
    pub template: f64,
    pub path: f64,
    pub eos: f64,
}

impl SupervisionMass {
    pub fn total(&self) -> f64 {
        self.template + self.path + self.eos
    }

    /// `(path + eos) / total`.
    pub fn decisive_share(&self) -> f64 {
        (self.path + self.eos) / self.total()
    }
}

/// Masses summed over a set of references.
pub fn supervision_mass<'m>(masks: impl IntoIterator<Item = &'m MaskPair>, profile: &WeightProfile) -> SupervisionMass {
    let mut m = SupervisionMass::default();
    for mask in masks {
        for (&path, &eos) in mask.path.iter().zip(&mask.eos) {
            if eos {
                m.eos += profile.eos;
            } else if path {
                m.path += profile.path;
            } else {
                m.template += 1.0;
            }
        }
    }
    m
}
