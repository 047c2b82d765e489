//! Two-stage training loop.
//!
//! Stage 1 optimizes `L_C + λ·L_DSM + μ·L_DFA + γ·L_DC` with raw argmax
//! pseudo-labels. At the stage boundary the target label distribution is
//! estimated from confident pseudo-labels and the class weights are frozen.
//! Stage 2 optimizes the same objective with calibrated pseudo-labels.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{per_class_mean_accuracy, Evaluator};
use crate::kernel::{Sgd, Tape, Tensor, Var};
use crate::losses::{
    centroid_alignment_loss, cross_entropy, discriminative_alignment_loss, domain_adversarial_loss, CentroidBank,
    WeightedBatch,
};
use crate::lsc::{estimate_target_distribution, source_distribution, LabelShiftState, PseudoLabel};
use crate::model::{argmax, init_model, ModelConfig, ModelState};
use crate::synth::{BalancedBatches, DomainDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the centroid alignment loss.
    pub lambda: f64,
    /// Weight of the discriminative feature alignment loss.
    pub mu: f64,
    /// Weight of the domain adversarial loss.
    pub gamma: f64,
    pub h_m: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub confidence_threshold: f64,
    pub ema_coeff: f64,
    pub seed: u64,
    /// Ramp the reversal coefficient with `2/(1+exp(−10p)) − 1` instead of
    /// holding it at 1.
    pub grl_schedule: bool,
    /// Re-estimate the target distribution every this many stage-2 epochs;
    /// 0 keeps the stage-1 estimate.
    pub reestimate_period: usize,
    /// Use calibrated pseudo-labels in stage 2.
    pub label_shift_calibration: bool,
    /// In stage 2, weight target samples by the calibrated confidence
    /// `p(ŷᵐ|x)` rather than the raw `max p(y|x)`.
    pub calibrated_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            mu: 0.6,
            gamma: 1.0,
            h_m: 1.5,
            epochs: 20,
            pretrain_epochs: 3,
            batch_size: 50,
            lr0: 0.005,
            momentum: 0.9,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            confidence_threshold: 0.5,
            ema_coeff: 0.7,
            seed: 100,
            grl_schedule: false,
            reestimate_period: 0,
            label_shift_calibration: true,
            calibrated_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.pretrain_epochs > 0 && self.pretrain_epochs < self.epochs) {
            return bad(format!(
                "need 0 < pretrain_epochs < epochs, got {} and {}",
                self.pretrain_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr0 > 0 and momentum in [0, 1)".into());
        }
        if !(self.lr_alpha >= 0.0 && self.lr_beta >= 0.0) {
            return bad("lr_alpha and lr_beta must be non-negative".into());
        }
        if !(self.h_m > 0.0) {
            return bad(format!("h_m must be positive, got {}", self.h_m));
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0, 1)".into());
        }
        if !(self.ema_coeff > 0.0 && self.ema_coeff <= 1.0) {
            return bad("ema_coeff must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Annealed learning rate `lr0 / (1 + α·p)^β` at training progress `p`.
pub fn lr_schedule(lr0: f64, progress: f64, alpha: f64, beta: f64) -> f64 {
    lr0 / (1.0 + alpha * progress.clamp(0.0, 1.0)).powf(beta)
}

/// Gradient reversal ramp `2 / (1 + exp(−10p)) − 1`.
pub fn grl_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// Model, optimizer and centroid bank of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: Sgd,
    pub bank: CentroidBank,
}

impl TrainState {
    pub fn new(model_config: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = init_model(model_config, cfg.seed)?;
        Ok(Self {
            optimizer: Sgd::new(cfg.momentum)?,
            bank: CentroidBank::new(model_config.num_classes, model_config.bottleneck_dim, cfg.ema_coeff)?,
            model,
        })
    }
}

/// One source batch and one target batch of equal size.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
}

/// Pseudo-labels and sample weights held fixed instead of being derived
/// from the current model output. Used by gradient checks, where the
/// weights must not move with the perturbed parameters.
#[derive(Debug, Clone)]
pub struct FixedTargets {
    pub source_weights: Vec<f64>,
    pub target_labels: Vec<usize>,
    pub target_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub classification: f64,
    pub centroid: Option<f64>,
    pub discriminative: Option<f64>,
    pub domain: Option<f64>,
    pub total: f64,
    /// Target samples in the batch whose pseudo-label calibration changed.
    pub calibrated: usize,
}

/// The recorded objective of one step, before backward.
pub struct Objective {
    pub tape: Tape,
    pub total: Var,
    pub losses: StepLosses,
    pub bound: crate::model::BoundModel,
    pub pseudo: Vec<PseudoLabel>,
    pub source_weights: Vec<f64>,
}

/// Records the full training objective for one batch on a fresh tape.
///
/// Terms whose weight is zero are not computed at all.
pub fn compute_objective(
    model: &ModelState,
    bank: &mut CentroidBank,
    batch: &StepBatch,
    shift: Option<&LabelShiftState>,
    cfg: &TrainConfig,
    grl_coeff: f64,
    fixed: Option<&FixedTargets>,
) -> Result<Objective> {
    let num_classes = model.config().num_classes;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xs = tape.leaf(batch.source_x.clone());
    let xt = tape.leaf(batch.target_x.clone());
    let fs = bound.features(&mut tape, xs)?;
    let ft = bound.features(&mut tape, xt)?;
    let ps = bound.classify(&mut tape, fs)?;
    let pt = bound.classify(&mut tape, ft)?;

    let pt_value = tape.value(pt)?;
    let pseudo = match shift {
        Some(state) => state.calibrate(pt_value)?,
        None => (0..pt_value.rows())
            .map(|r| PseudoLabel::uncalibrated(pt_value.row(r)))
            .collect(),
    };
    let calibrated = pseudo.iter().filter(|p| p.is_calibrated()).count();

    let (source_weights, target_labels, target_weights) = match fixed {
        Some(f) => (
            f.source_weights.clone(),
            f.target_labels.clone(),
            f.target_weights.clone(),
        ),
        None => {
            let ps_value = tape.value(ps)?;
            let sw = (0..ps_value.rows())
                .map(|r| ps_value.row(r).iter().copied().fold(f64::MIN, f64::max))
                .collect();
            let labels = pseudo.iter().map(|p| p.calibrated_label).collect();
            let weights = pseudo
                .iter()
                .map(|p| {
                    if shift.is_some() && cfg.calibrated_weights {
                        p.calibrated_confidence
                    } else {
                        p.raw_confidence
                    }
                })
                .collect();
            (sw, labels, weights)
        }
    };

    let l_c = cross_entropy(&mut tape, ps, &batch.source_y)?;
    let mut total = l_c;
    let mut losses = StepLosses {
        classification: tape.value(l_c)?.item(),
        centroid: None,
        discriminative: None,
        domain: None,
        total: 0.0,
        calibrated,
    };

    if cfg.lambda > 0.0 || cfg.mu > 0.0 {
        let src = WeightedBatch::new(&tape, fs, batch.source_y.clone(), source_weights.clone(), num_classes)?;
        let tgt = WeightedBatch::new(&tape, ft, target_labels, target_weights, num_classes)?;
        if cfg.lambda > 0.0 {
            if let Some(l) = centroid_alignment_loss(&mut tape, bank, &src, &tgt)? {
                losses.centroid = Some(tape.value(l)?.item());
                let weighted = tape.scale(l, cfg.lambda)?;
                total = tape.add(total, weighted)?;
            }
        }
        if cfg.mu > 0.0 {
            if let Some(l) = discriminative_alignment_loss(&mut tape, &src, &tgt)? {
                losses.discriminative = Some(tape.value(l)?.item());
                let weighted = tape.scale(l, cfg.mu)?;
                total = tape.add(total, weighted)?;
            }
        }
    }
    if cfg.gamma > 0.0 {
        let ds = bound.discriminate(&mut tape, fs, grl_coeff)?;
        let dt = bound.discriminate(&mut tape, ft, grl_coeff)?;
        let l = domain_adversarial_loss(&mut tape, ds, dt)?;
        losses.domain = Some(tape.value(l)?.item());
        let weighted = tape.scale(l, cfg.gamma)?;
        total = tape.add(total, weighted)?;
    }
    losses.total = tape.value(total)?.item();

    Ok(Objective {
        tape,
        total,
        losses,
        bound,
        pseudo,
        source_weights,
    })
}

/// Forward, backward and one SGD update on a single batch pair.
pub fn train_step(
    state: &mut TrainState,
    batch: &StepBatch,
    shift: Option<&LabelShiftState>,
    cfg: &TrainConfig,
    lr: f64,
    grl_coeff: f64,
) -> Result<StepLosses> {
    let objective = compute_objective(&state.model, &mut state.bank, batch, shift, cfg, grl_coeff, None)?;
    if !objective.losses.total.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: 0,
            detail: format!("{:?}", objective.losses),
        });
    }
    let grads = objective.tape.backward(objective.total)?;
    state
        .model
        .accumulate_grads(&objective.tape, &objective.bound, &grads)?;
    state.optimizer.step(state.model.params_mut(), lr)?;
    Ok(objective.losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub learning_rate: f64,
    pub loss_classification: f64,
    pub loss_centroid: Option<f64>,
    pub loss_discriminative: Option<f64>,
    pub loss_domain: Option<f64>,
    pub loss_total: f64,
    /// Steps where the centroid or discriminative loss had no eligible terms.
    pub skipped_centroid_steps: usize,
    pub skipped_discriminative_steps: usize,
    /// Fraction of target samples whose pseudo-label calibration changes,
    /// measured on a full pass at the end of the epoch.
    pub calibrated_proportion: f64,
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub pseudo_accuracy_raw: Option<f64>,
    pub pseudo_accuracy_calibrated: Option<f64>,
    pub subset_accuracy_raw: Option<f64>,
    pub subset_accuracy_calibrated: Option<f64>,
    /// Error rate of the pseudo-labels actually used for training.
    pub false_pseudo_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ModelState,
    pub records: Vec<EpochRecord>,
    /// Label shift estimate from the stage boundary (or latest re-estimate).
    pub shift: LabelShiftState,
    /// Estimate taken at the stage boundary.
    pub initial_shift: LabelShiftState,
    pub final_pseudo: Vec<PseudoLabel>,
    pub final_predictions: Vec<usize>,
}

fn check_datasets(source: &DomainDataset, target: &DomainDataset, model: &ModelConfig) -> Result<()> {
    if source.labels().is_none() {
        return Err(Error::Config("source dataset must have visible labels".into()));
    }
    if source.feature_dim() != target.feature_dim() || source.num_classes() != target.num_classes() {
        return Err(Error::Config(format!(
            "source ({} dims, {} classes) and target ({} dims, {} classes) disagree",
            source.feature_dim(),
            source.num_classes(),
            target.feature_dim(),
            target.num_classes()
        )));
    }
    if model.input_dim != source.feature_dim() || model.num_classes != source.num_classes() {
        return Err(Error::Config("model config does not match the data".into()));
    }
    Ok(())
}

/// Batch sizes and step counts shared by every runner.
struct Schedule {
    batch: usize,
    steps_per_epoch: usize,
    total_steps: usize,
}

impl Schedule {
    fn new(target_len: usize, cfg: &TrainConfig) -> Self {
        let batch = cfg.batch_size.min(target_len);
        let steps_per_epoch = (target_len / batch).max(1);
        Self {
            batch,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
        }
    }

    fn lr(&self, step: usize, cfg: &TrainConfig) -> f64 {
        lr_schedule(
            cfg.lr0,
            step as f64 / self.total_steps as f64,
            cfg.lr_alpha,
            cfg.lr_beta,
        )
    }
}

fn source_sampler(source: &DomainDataset, batch: usize, cfg: &TrainConfig) -> Result<BalancedBatches> {
    crate::synth::balanced_source_batches(source, batch, cfg.seed.wrapping_add(1))
}

fn predictions(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row(r))).collect()
}

/// Full two-stage run. `evaluator`, when given, only feeds the records.
pub fn run(
    source: &DomainDataset,
    target: &DomainDataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    evaluator: Option<&Evaluator>,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_datasets(source, target, model_config)?;
    let source_labels = source.labels().expect("checked above");
    let num_classes = source.num_classes();

    let schedule = Schedule::new(target.len(), cfg);
    let mut sampler = source_sampler(source, schedule.batch, cfg)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut state = TrainState::new(model_config, cfg)?;
    let source_dist = source_distribution(source_labels, num_classes)?;

    let mut shift: Option<LabelShiftState> = None;
    let mut initial_shift = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let stage = if epoch <= cfg.pretrain_epochs { 1 } else { 2 };
        debug_assert!(stage == 2 || shift.is_none());
        let active = if cfg.label_shift_calibration {
            shift.as_ref()
        } else {
            None
        };
        order.shuffle(&mut shuffle_rng);

        let epoch_lr = schedule.lr(step, cfg);
        let mut sums = LossSums::default();
        for chunk in order.chunks_exact(schedule.batch).take(schedule.steps_per_epoch) {
            let src_idx = sampler.next_batch();
            let batch = StepBatch {
                source_x: source.features().select_rows(&src_idx),
                source_y: src_idx.iter().map(|&i| source_labels[i]).collect(),
                target_x: target.features().select_rows(chunk),
            };
            let grl = if cfg.grl_schedule {
                grl_ramp(step as f64 / schedule.total_steps as f64)
            } else {
                1.0
            };
            let lr = schedule.lr(step, cfg);
            let losses = train_step(&mut state, &batch, active, cfg, lr, grl).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{detail}; source rows {src_idx:?}; target rows {chunk:?}"),
                },
                other => other,
            })?;
            sums.add(&losses);
            step += 1;
        }

        let target_probs = state.model.predict_proba(target.features())?;
        if epoch == cfg.pretrain_epochs
            || (stage == 2
                && cfg.reestimate_period > 0
                && (epoch - cfg.pretrain_epochs).is_multiple_of(cfg.reestimate_period))
        {
            let raw: Vec<PseudoLabel> = (0..target_probs.rows())
                .map(|r| PseudoLabel::uncalibrated(target_probs.row(r)))
                .collect();
            let estimate = estimate_target_distribution(&raw, cfg.confidence_threshold, num_classes)?;
            let estimated = LabelShiftState::new(source_dist.clone(), estimate, cfg.h_m)?;
            info!(
                "epoch {epoch}: estimated target distribution {:?}",
                estimated.target_estimate
            );
            if initial_shift.is_none() {
                initial_shift = Some(estimated.clone());
            }
            shift = Some(estimated);
        }

        let record = epoch_record(
            epoch,
            stage,
            epoch_lr,
            &sums,
            &state.model,
            source,
            &target_probs,
            if stage == 2 { shift.as_ref() } else { None },
            cfg.label_shift_calibration,
            evaluator,
        )?;
        debug!("{record:?}");
        records.push(record);
    }

    let shift = shift.expect("stage boundary always estimates");
    let target_probs = state.model.predict_proba(target.features())?;
    let final_pseudo = shift.calibrate(&target_probs)?;
    Ok(RunOutput {
        model: state.model,
        records,
        initial_shift: initial_shift.expect("set with shift"),
        shift,
        final_pseudo,
        final_predictions: predictions(&target_probs),
    })
}

#[derive(Default)]
struct LossSums {
    steps: usize,
    classification: f64,
    total: f64,
    centroid: (f64, usize),
    discriminative: (f64, usize),
    domain: (f64, usize),
}

impl LossSums {
    fn add(&mut self, l: &StepLosses) {
        self.steps += 1;
        self.classification += l.classification;
        self.total += l.total;
        for (acc, v) in [
            (&mut self.centroid, l.centroid),
            (&mut self.discriminative, l.discriminative),
            (&mut self.domain, l.domain),
        ] {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }

    fn mean(acc: (f64, usize)) -> Option<f64> {
        (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn epoch_record(
    epoch: usize,
    stage: u8,
    learning_rate: f64,
    sums: &LossSums,
    model: &ModelState,
    source: &DomainDataset,
    target_probs: &Tensor,
    shift: Option<&LabelShiftState>,
    lsc_enabled: bool,
    evaluator: Option<&Evaluator>,
) -> Result<EpochRecord> {
    let pseudo: Vec<PseudoLabel> = match shift {
        Some(s) => s.calibrate(target_probs)?,
        None => (0..target_probs.rows())
            .map(|r| PseudoLabel::uncalibrated(target_probs.row(r)))
            .collect(),
    };
    let calibrated_proportion = pseudo.iter().filter(|p| p.is_calibrated()).count() as f64 / pseudo.len() as f64;

    let source_probs = model.predict_proba(source.features())?;
    let source_accuracy = per_class_mean_accuracy(
        &predictions(&source_probs),
        source.labels().expect("source labels are visible"),
        source.num_classes(),
    )?;

    let steps = sums.steps.max(1) as f64;
    let mut record = EpochRecord {
        epoch,
        stage,
        learning_rate,
        loss_classification: sums.classification / steps,
        loss_centroid: LossSums::mean(sums.centroid),
        loss_discriminative: LossSums::mean(sums.discriminative),
        loss_domain: LossSums::mean(sums.domain),
        loss_total: sums.total / steps,
        skipped_centroid_steps: sums.steps - sums.centroid.1,
        skipped_discriminative_steps: sums.steps - sums.discriminative.1,
        calibrated_proportion,
        source_accuracy,
        target_accuracy: None,
        pseudo_accuracy_raw: None,
        pseudo_accuracy_calibrated: None,
        subset_accuracy_raw: None,
        subset_accuracy_calibrated: None,
        false_pseudo_rate: None,
    };
    if let Some(ev) = evaluator {
        let audit = ev.audit(&pseudo)?;
        record.target_accuracy = Some(ev.per_class_mean_accuracy(&predictions(target_probs))?);
        record.pseudo_accuracy_raw = Some(audit.raw_accuracy);
        record.pseudo_accuracy_calibrated = Some(audit.calibrated_accuracy);
        record.subset_accuracy_raw = audit.subset_raw_accuracy;
        record.subset_accuracy_calibrated = audit.subset_calibrated_accuracy;
        let used = if shift.is_some() && lsc_enabled {
            audit.calibrated_accuracy
        } else {
            audit.raw_accuracy
        };
        record.false_pseudo_rate = Some(1.0 - used);
    }
    Ok(record)
}

/// Plain source cross-entropy training on the same schedule, sampler and
/// initialization as [`run`]. Returns the trained model.
pub fn run_source_only(
    source: &DomainDataset,
    target_len: usize,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ModelState> {
    cfg.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| Error::Config("source dataset must have visible labels".into()))?;
    let schedule = Schedule::new(target_len, cfg);
    let mut sampler = source_sampler(source, schedule.batch, cfg)?;
    let mut model = init_model(model_config, cfg.seed)?;
    let mut optimizer = Sgd::new(cfg.momentum)?;
    for step in 0..schedule.total_steps {
        let idx = sampler.next_batch();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(source.features().select_rows(&idx));
        let f = bound.features(&mut tape, x)?;
        let p = bound.classify(&mut tape, f)?;
        let loss = cross_entropy(&mut tape, p, &y)?;
        let value = tape.value(loss)?.item();
        if !value.is_finite() {
            let mut detail = String::new();
            let _ = write!(detail, "source-only loss {value}");
            return Err(Error::NonFinite {
                epoch: step / schedule.steps_per_epoch + 1,
                step,
                detail,
            });
        }
        let grads = tape.backward(loss)?;
        model.accumulate_grads(&tape, &bound, &grads)?;
        optimizer.step(model.params_mut(), schedule.lr(step, cfg))?;
    }
    Ok(model)
}
