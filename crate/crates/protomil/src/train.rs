//! Three-phase training: warmup with a frozen head, projection + head/
//! attention fine-tune cycles, then joint end-to-end epochs. Adam with
//! weight decay, one bag per optimization step, deterministic per seed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy_grad, total_loss_backward, LossConfig};
use crate::mil::attention::{attention_backward, attention_pool, AttentionGrads};
use crate::mil::types::{Bag, Label};
use crate::mil::{classify, forward_bag, positive_probability, Model, ModelGrads};
use crate::params::{grad_slices, param_slices_mut, ParamGroup};
use crate::proto_ops::project_prototypes;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Fixed at 1: one bag per optimization step.
    pub batch_size: usize,
    pub lr_warmup: f64,
    /// Per-epoch exponential decay factor for the warmup phase.
    pub warmup_gamma: f64,
    /// Constant learning rate for head/attention fine-tune epochs.
    pub lr_finetune: f64,
    pub lr_joint: f64,
    /// Step-schedule period (epochs) for the joint phase.
    pub joint_step_size: usize,
    /// Multiplier applied at each joint-phase step boundary.
    pub joint_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.001,
            batch_size: 1,
            lr_warmup: 1e-3,
            warmup_gamma: 0.95,
            lr_finetune: 2e-4,
            lr_joint: 1e-4,
            joint_step_size: 5,
            joint_gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(
                "batch_size is fixed at 1 (one bag per step)".into(),
            ));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0 <= v && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.weight_decay < 0.0 || self.joint_step_size == 0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Adam over a fixed set of parameter groups. Moment buffers are keyed to
/// the slice layout at construction, so a fresh optimizer is built per phase
/// (the active-prototype mask changes across phases).
pub struct Adam {
    groups: Vec<ParamGroup>,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(model: &mut Model, groups: &[ParamGroup], opt: &OptimizerConfig) -> Self {
        let mut m = Vec::new();
        for &g in groups {
            m.push(
                param_slices_mut(model, g)
                    .iter()
                    .map(|s| vec![0.0; s.len()])
                    .collect::<Vec<_>>(),
            );
        }
        let v = m.clone();
        Self {
            groups: groups.to_vec(),
            m,
            v,
            t: 0,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            weight_decay: opt.weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, &group) in self.groups.iter().enumerate() {
            let owned: Vec<Vec<f64>> = grad_slices(model, grads, group)
                .iter()
                .map(|s| s.to_vec())
                .collect();
            let mut params = param_slices_mut(model, group);
            assert_eq!(params.len(), owned.len(), "optimizer slice layout drift");
            for (si, slice) in params.iter_mut().enumerate() {
                let m = &mut self.m[gi][si];
                let v = &mut self.v[gi][si];
                let g = &owned[si];
                for i in 0..slice.len() {
                    let grad = g[i] + self.weight_decay * slice[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                    slice[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub joint_epochs: usize,
    /// Fine-tune epochs between projection events.
    pub projection_every: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(warmup: usize, finetune: usize, joint: usize, seed: u64) -> Self {
        Self {
            warmup_epochs: warmup,
            finetune_epochs: finetune,
            joint_epochs: joint,
            projection_every: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs + self.finetune_epochs + self.joint_epochs == 0 {
            return Err(Error::InvariantViolation(
                "schedule must contain at least one epoch".into(),
            ));
        }
        if self.projection_every == 0 {
            return Err(Error::Config("projection_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub learning_rate: f64,
    pub mean_cross_entropy: f64,
    pub mean_cluster: f64,
    pub mean_separation: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub epoch: usize,
    pub prototypes_changed: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub projections: Vec<ProjectionEvent>,
    pub phase_seconds: Vec<(String, f64)>,
}

impl TrainReport {
    /// One JSON object per line, one line per epoch record.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(
                &serde_json::to_string(rec)
                    .map_err(|e| Error::Schema(format!("train report: {e}")))?,
            );
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Positive-class probability and label for every bag, in input order.
pub fn score_bags(model: &Model, bags: &[Bag]) -> Result<Vec<(f64, Label)>> {
    bags.iter()
        .map(|bag| {
            let (trace, _) = forward_bag(model, bag)?;
            Ok((positive_probability(&trace.logits), bag.label))
        })
        .collect()
}

fn check_finite(total: f64, epoch: usize, bag_id: &str) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalAbort {
            epoch,
            bag_id: bag_id.to_string(),
        })
    }
}

fn shuffled_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Run full forward/backward epochs over `groups`, with a per-epoch learning
/// rate from `lr_at`. Epoch numbering starts at `epoch_base` in the report.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model,
    bags: &[Bag],
    groups: &[ParamGroup],
    epochs: usize,
    phase: &str,
    epoch_base: usize,
    lr_at: &dyn Fn(usize) -> f64,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    opt.validate()?;
    loss.validate()?;
    let mut adam = Adam::new(model, groups, opt);
    for e in 0..epochs {
        let lr = lr_at(e);
        let order = shuffled_order(bags.len(), rng);
        let mut sums = [0.0f64; 4];
        for &bi in &order {
            let bag = &bags[bi];
            let (trace, cache) = forward_bag(model, bag)?;
            check_finite(trace.logits[0] + trace.logits[1], epoch_base + e, &bag.id)?;
            let mut grads = ModelGrads::zeros_like(model);
            let breakdown = total_loss_backward(model, bag, &trace, &cache, loss, &mut grads)?;
            check_finite(breakdown.total, epoch_base + e, &bag.id)?;
            sums[0] += breakdown.cross_entropy;
            sums[1] += breakdown.cluster;
            sums[2] += breakdown.separation;
            sums[3] += breakdown.total;
            adam.step(model, &grads, lr);
        }
        let k = bags.len() as f64;
        report.epochs.push(EpochRecord {
            epoch: epoch_base + e,
            phase: phase.to_string(),
            learning_rate: lr,
            mean_cross_entropy: sums[0] / k,
            mean_cluster: sums[1] / k,
            mean_separation: sums[2] / k,
            mean_total: sums[3] / k,
        });
    }
    Ok(())
}

/// Warmup: encoder, prototypes and attention train; the head stays frozen.
pub fn run_warmup(
    model: &mut Model,
    bags: &[Bag],
    schedule: &TrainSchedule,
    opt: &OptimizerConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    run_epochs(
        model,
        bags,
        &[ParamGroup::Encoder, ParamGroup::Prototypes, ParamGroup::Attention],
        schedule.warmup_epochs,
        "warmup",
        0,
        &|e| opt.lr_warmup * opt.warmup_gamma.powi(e as i32),
        opt,
        loss,
        &mut rng,
        &mut report,
    )?;
    Ok(report)
}

/// Fine-tune attention and head with the encoder and prototypes frozen.
///
/// Because the frozen parts never move, each bag's similarity vectors and
/// per-instance minimum distances are computed once up front; the epochs
/// then run on those cached values. Gradients match the full backward pass
/// restricted to the attention/head groups exactly.
pub fn run_head_finetune(
    model: &mut Model,
    bags: &[Bag],
    epochs: usize,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainReport> {
    run_head_finetune_inner(model, bags, epochs, opt, &LossConfig::default(), seed, 0)
        .map(|(r, _)| r)
}

struct FrozenBag {
    h: Vec<Array1<f64>>,
    /// Per instance: (min same-class d², min other-class d²).
    mins: Vec<(f64, f64)>,
}

fn class_min(
    maps: &[ndarray::Array2<f64>],
    model: &Model,
    class: Label,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for (j, proto) in model.bank.prototypes.iter().enumerate() {
        if !proto.active || proto.class != class {
            continue;
        }
        for &d2 in &maps[j] {
            best = best.min(d2);
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::InvariantViolation(format!(
            "no active prototype of class {class:?}"
        )))
    }
}

fn run_head_finetune_inner(
    model: &mut Model,
    bags: &[Bag],
    epochs: usize,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    seed: u64,
    epoch_base: usize,
) -> Result<(TrainReport, usize)> {
    let mut report = TrainReport::default();
    if epochs == 0 {
        return Ok((report, epoch_base));
    }
    opt.validate()?;
    loss.validate()?;
    let mut frozen = Vec::with_capacity(bags.len());
    for bag in bags {
        let (trace, _) = forward_bag(model, bag)?;
        let mins = (0..bag.instances.len())
            .map(|i| {
                Ok((
                    class_min(&trace.distance_maps[i], model, bag.label)?,
                    class_min(&trace.distance_maps[i], model, bag.label.other())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        frozen.push(FrozenBag {
            h: trace.similarity_vectors,
            mins,
        });
    }
    let groups = [ParamGroup::Attention, ParamGroup::Head];
    let mut adam = Adam::new(model, &groups, opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in 0..epochs {
        let order = shuffled_order(bags.len(), &mut rng);
        let mut sums = [0.0f64; 4];
        for &bi in &order {
            let bag = &bags[bi];
            let fz = &frozen[bi];
            let k = bag.instances.len() as f64;
            let (h_bag, weights, cache) = attention_pool(&fz.h, &model.attention)?;
            let logits = classify(&h_bag, &model.head)?;
            check_finite(logits[0] + logits[1], epoch_base + e, &bag.id)?;
            let ce = crate::losses::cross_entropy(&logits, bag.label)?;
            let cluster: f64 =
                weights.iter().zip(&fz.mins).map(|(a, m)| a * m.0).sum::<f64>() / k;
            let separation: f64 =
                -weights.iter().zip(&fz.mins).map(|(a, m)| a * m.1).sum::<f64>() / k;
            let total = ce + loss.lambda1 * cluster + loss.lambda2 * separation;
            check_finite(total, epoch_base + e, &bag.id)?;
            sums[0] += ce;
            sums[1] += cluster;
            sums[2] += separation;
            sums[3] += total;

            let dlogits = cross_entropy_grad(&logits, bag.label);
            let mut grads = ModelGrads::zeros_like(model);
            let mut dh_bag = Array1::zeros(h_bag.len());
            for (r, &dl) in dlogits.iter().enumerate() {
                for (c, g) in grads.head.row_mut(r).iter_mut().enumerate() {
                    *g += dl * h_bag[c];
                }
                dh_bag.scaled_add(dl, &model.head.weights.row(r));
            }
            let da_direct = Array1::from_iter(
                fz.mins
                    .iter()
                    .map(|m| (loss.lambda1 * m.0 - loss.lambda2 * m.1) / k),
            );
            let mut att_grads = AttentionGrads::zeros_like(&model.attention);
            attention_backward(
                &fz.h,
                &model.attention,
                &cache,
                &dh_bag,
                Some(&da_direct),
                &mut att_grads,
            );
            grads.attention = att_grads;
            adam.step(model, &grads, opt.lr_finetune);
        }
        let n = bags.len() as f64;
        report.epochs.push(EpochRecord {
            epoch: epoch_base + e,
            phase: "finetune".to_string(),
            learning_rate: opt.lr_finetune,
            mean_cross_entropy: sums[0] / n,
            mean_cluster: sums[1] / n,
            mean_separation: sums[2] / n,
            mean_total: sums[3] / n,
        });
    }
    Ok((report, epoch_base + epochs))
}

/// Full protocol: warmup → repeat {project → head/attention fine-tune} →
/// joint end-to-end epochs. Deterministic given the schedule seed.
pub fn run_full_training(
    model: &mut Model,
    bags: &[Bag],
    schedule: &TrainSchedule,
    opt: &OptimizerConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    schedule.validate()?;
    opt.validate()?;
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut epoch = 0usize;

    let t0 = Instant::now();
    run_epochs(
        model,
        bags,
        &[ParamGroup::Encoder, ParamGroup::Prototypes, ParamGroup::Attention],
        schedule.warmup_epochs,
        "warmup",
        epoch,
        &|e| opt.lr_warmup * opt.warmup_gamma.powi(e as i32),
        opt,
        loss,
        &mut rng,
        &mut report,
    )?;
    epoch += schedule.warmup_epochs;
    report
        .phase_seconds
        .push(("warmup".into(), t0.elapsed().as_secs_f64()));

    let t1 = Instant::now();
    let mut remaining = schedule.finetune_epochs;
    while remaining > 0 {
        let changed = project_prototypes(model, bags)?;
        report.projections.push(ProjectionEvent {
            epoch,
            prototypes_changed: changed,
        });
        let chunk = remaining.min(schedule.projection_every);
        // Derive the chunk's shuffle stream from the shared run RNG so the
        // whole run stays a pure function of the seed.
        let chunk_seed = rand::RngCore::next_u64(&mut rng);
        let (chunk_report, next_epoch) =
            run_head_finetune_inner(model, bags, chunk, opt, loss, chunk_seed, epoch)?;
        report.epochs.extend(chunk_report.epochs);
        epoch = next_epoch;
        remaining -= chunk;
    }
    report
        .phase_seconds
        .push(("finetune".into(), t1.elapsed().as_secs_f64()));

    let t2 = Instant::now();
    let mut done = 0usize;
    while done < schedule.joint_epochs {
        let chunk = (schedule.joint_epochs - done).min(schedule.projection_every);
        run_epochs(
            model,
            bags,
            &[
                ParamGroup::Encoder,
                ParamGroup::Prototypes,
                ParamGroup::Attention,
                ParamGroup::Head,
            ],
            chunk,
            "joint",
            epoch,
            // The step schedule counts epochs within the joint phase as a
            // whole, independent of projection chunking.
            &|e| {
                opt.lr_joint
                    * opt
                        .joint_gamma
                        .powi(((done + e) / opt.joint_step_size) as i32)
            },
            opt,
            loss,
            &mut rng,
            &mut report,
        )?;
        epoch += chunk;
        done += chunk;
        // Projection after every projection_every joint epochs keeps the
        // final model's prototypes on actual training patches, which the
        // neighbor census and pruning rely on.
        if done % schedule.projection_every == 0 || done == schedule.joint_epochs {
            let changed = project_prototypes(model, bags)?;
            report.projections.push(ProjectionEvent {
                epoch,
                prototypes_changed: changed,
            });
        }
    }
    report
        .phase_seconds
        .push(("joint".into(), t2.elapsed().as_secs_f64()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_embedding_bags;
    use crate::mil::ModelConfig;

    fn toy_setup(num_bags: usize, seed: u64) -> (Model, Vec<Bag>) {
        let bags = generate_synthetic_embedding_bags(num_bags, 4, seed).unwrap();
        let mut config = ModelConfig::embedding_default(4);
        config.prototypes_per_class = 2;
        config.attention_hidden_dim = 8;
        (Model::init(config, seed).unwrap(), bags)
    }

    fn head_bits(model: &Model) -> Vec<u64> {
        model.head.weights.iter().map(|v| v.to_bits()).collect()
    }

    fn encoder_and_proto_bits(model: &Model) -> Vec<u64> {
        let mut out = Vec::new();
        for p in &model.bank.prototypes {
            out.extend(p.vector.iter().map(|v| v.to_bits()));
        }
        out
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut model, bags) = toy_setup(4, 1);
        let before = head_bits(&model);
        let schedule = TrainSchedule {
            warmup_epochs: 0,
            ..TrainSchedule::new(0, 0, 1, 1)
        };
        run_warmup(&mut model, &bags, &schedule, &OptimizerConfig::default(), &LossConfig::default())
            .unwrap();
        run_head_finetune(&mut model, &bags, 0, &OptimizerConfig::default(), 1).unwrap();
        assert_eq!(head_bits(&model), before);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (mut model, bags) = toy_setup(2, 2);
        let opt = OptimizerConfig {
            lr_warmup: 0.0,
            warmup_gamma: 1.0,
            ..OptimizerConfig::default()
        };
        let before = encoder_and_proto_bits(&model);
        let schedule = TrainSchedule::new(1, 0, 0, 3);
        run_warmup(&mut model, &bags, &schedule, &opt, &LossConfig::default()).unwrap();
        assert_eq!(encoder_and_proto_bits(&model), before);
    }

    #[test]
    fn warmup_keeps_head_bit_identical() {
        let (mut model, bags) = toy_setup(6, 4);
        let before = head_bits(&model);
        let schedule = TrainSchedule::new(2, 0, 0, 5);
        run_warmup(&mut model, &bags, &schedule, &OptimizerConfig::default(), &LossConfig::default())
            .unwrap();
        assert_eq!(head_bits(&model), before, "head moved during warmup");
    }

    #[test]
    fn finetune_keeps_encoder_and_prototypes_bit_identical() {
        let (mut model, bags) = toy_setup(6, 7);
        let before = encoder_and_proto_bits(&model);
        run_head_finetune(&mut model, &bags, 3, &OptimizerConfig::default(), 7).unwrap();
        assert_eq!(encoder_and_proto_bits(&model), before);
    }

    #[test]
    fn finetune_reduces_cross_entropy_on_separable_data() {
        let (mut model, bags) = toy_setup(10, 9);
        let initial = mean_ce(&model, &bags);
        let report =
            run_head_finetune(&mut model, &bags, 15, &OptimizerConfig::default(), 9).unwrap();
        let last = report.epochs.last().unwrap();
        assert!(
            last.mean_cross_entropy < initial,
            "CE {initial} -> {}",
            last.mean_cross_entropy
        );
    }

    fn mean_ce(model: &Model, bags: &[Bag]) -> f64 {
        bags.iter()
            .map(|b| {
                let (trace, _) = forward_bag(model, b).unwrap();
                crate::losses::cross_entropy(&trace.logits, b.label).unwrap()
            })
            .sum::<f64>()
            / bags.len() as f64
    }

    #[test]
    fn finetune_matches_restricted_full_backward() {
        // One epoch of the cached fine-tune path must equal one epoch of the
        // general backward pass with only attention/head groups stepped.
        let (model0, bags) = toy_setup(6, 12);
        let opt = OptimizerConfig::default();
        let loss = LossConfig::default();

        let mut fast = model0.clone();
        run_head_finetune_inner(&mut fast, &bags, 1, &opt, &loss, 77, 0).unwrap();

        let mut slow = model0.clone();
        let groups = [ParamGroup::Attention, ParamGroup::Head];
        let mut adam = Adam::new(&mut slow, &groups, &opt);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &bi in &shuffled_order(bags.len(), &mut rng) {
            let bag = &bags[bi];
            let (trace, cache) = forward_bag(&slow, bag).unwrap();
            let mut grads = ModelGrads::zeros_like(&slow);
            total_loss_backward(&slow, bag, &trace, &cache, &loss, &mut grads).unwrap();
            adam.step(&mut slow, &grads, opt.lr_finetune);
        }
        for (a, b) in fast
            .attention
            .w
            .iter()
            .chain(fast.head.weights.iter())
            .zip(slow.attention.w.iter().chain(slow.head.weights.iter()))
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_training_is_deterministic() {
        let (model0, bags) = toy_setup(6, 33);
        let schedule = TrainSchedule {
            projection_every: 2,
            ..TrainSchedule::new(2, 3, 2, 33)
        };
        let opt = OptimizerConfig::default();
        let loss = LossConfig::default();
        let mut m1 = model0.clone();
        let r1 = run_full_training(&mut m1, &bags, &schedule, &opt, &loss).unwrap();
        let mut m2 = model0.clone();
        let r2 = run_full_training(&mut m2, &bags, &schedule, &opt, &loss).unwrap();
        assert_eq!(encoder_and_proto_bits(&m1), encoder_and_proto_bits(&m2));
        assert_eq!(head_bits(&m1), head_bits(&m2));
        assert_eq!(r1.epochs.len(), r2.epochs.len());
        for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
            assert_eq!(a.mean_total.to_bits(), b.mean_total.to_bits());
        }
        // Epoch numbering is monotone and phases appear in order.
        for (i, rec) in r1.epochs.iter().enumerate() {
            assert_eq!(rec.epoch, i);
        }
        // Two fine-tune chunk projections plus the end-of-joint projection.
        assert_eq!(r1.projections.len(), 3);
        // After projection, prototypes carry provenance.
        for p in m1.bank.prototypes.iter().filter(|p| p.active) {
            assert!(p.provenance.is_some());
        }
    }

    #[test]
    fn all_zero_schedule_rejected() {
        let schedule = TrainSchedule::new(0, 0, 0, 1);
        assert!(matches!(
            schedule.validate(),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn nan_aborts_with_context() {
        let (mut model, bags) = toy_setup(2, 14);
        model.head.weights[[0, 0]] = f64::NAN;
        let schedule = TrainSchedule::new(0, 0, 1, 14);
        let err = run_full_training(
            &mut model,
            &bags,
            &schedule,
            &OptimizerConfig::default(),
            &LossConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { .. }));
    }

    #[test]
    fn report_jsonl_round_trips() {
        let (mut model, bags) = toy_setup(2, 15);
        let schedule = TrainSchedule::new(1, 0, 0, 15);
        let report = run_warmup(
            &mut model,
            &bags,
            &schedule,
            &OptimizerConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        report.save_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec: EpochRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 0);
        assert_eq!(rec.phase, "warmup");
    }
}
