//! Training objective: softmax cross-entropy plus attention-weighted
//! cluster and separation costs over prototype-patch distances.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::attention::attention_backward;
use crate::mil::encoder::encode_backward;
use crate::mil::similarity::{accumulate_window_d2_grad, similarity_backward};
use crate::mil::{Bag, BagCache, BagForwardTrace, Label, Model, ModelGrads, PrototypeBank};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// When true, attention weights are treated as constants inside the
    /// cluster and separation costs.
    pub attention_detached: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.8,
            lambda2: 0.08,
            attention_detached: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite())
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(Error::Config(
                "loss lambdas must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub total: f64,
}

/// Softmax cross-entropy of a two-logit vector against a binary label.
pub fn cross_entropy(logits: &[f64; 2], label: Label) -> Result<f64> {
    if !logits[0].is_finite() || !logits[1].is_finite() {
        return Err(Error::InvalidInput("logits must be finite".into()));
    }
    let m = logits[0].max(logits[1]);
    let log_z = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    Ok(log_z - logits[label.index()])
}

/// d(cross_entropy)/d(logits) = softmax(logits) - one_hot(label).
pub fn cross_entropy_grad(logits: &[f64; 2], label: Label) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let mut g = [e0 / z, e1 / z];
    g[label.index()] -= 1.0;
    g
}

/// Per-instance inner double-min of the distance maps over the given
/// prototype class; returns (value, prototype index, window).
fn inner_min(
    trace: &BagForwardTrace,
    bank: &PrototypeBank,
    instance: usize,
    class: Label,
) -> Option<(f64, usize, (usize, usize))> {
    let mut best: Option<(f64, usize, (usize, usize))> = None;
    for (j, proto) in bank.prototypes.iter().enumerate() {
        if !proto.active || proto.class != class {
            continue;
        }
        let map = &trace.distance_maps[instance][j];
        for ((r, c), &d2) in map.indexed_iter() {
            if best.map_or(true, |(b, _, _)| d2 < b) {
                best = Some((d2, j, (r, c)));
            }
        }
    }
    best
}

/// Attention-weighted cluster cost:
/// (1/k) sum_i a_i min_{j in class(y)} min_z |z - p_j|^2.
pub fn cluster_loss(trace: &BagForwardTrace, bag_label: Label, bank: &PrototypeBank) -> Result<f64> {
    if bank.active_count_of(bag_label) == 0 {
        return Err(Error::InvariantViolation(format!(
            "cluster loss needs an active prototype of class {:?}",
            bag_label
        )));
    }
    let k = trace.similarity_vectors.len();
    let mut acc = 0.0;
    for i in 0..k {
        let (m, _, _) = inner_min(trace, bank, i, bag_label).expect("active same-class prototype");
        acc += trace.attention_weights[i] * m;
    }
    Ok(acc / k as f64)
}

/// Attention-weighted separation cost over the complementary prototype
/// set, negated: always <= 0.
pub fn separation_loss(
    trace: &BagForwardTrace,
    bag_label: Label,
    bank: &PrototypeBank,
) -> Result<f64> {
    let other = bag_label.other();
    if bank.active_count_of(other) == 0 {
        return Err(Error::InvariantViolation(format!(
            "separation loss needs an active prototype of class {:?}",
            other
        )));
    }
    let k = trace.similarity_vectors.len();
    let mut acc = 0.0;
    for i in 0..k {
        let (m, _, _) = inner_min(trace, bank, i, other).expect("active other-class prototype");
        acc += trace.attention_weights[i] * m;
    }
    Ok(-acc / k as f64)
}

pub fn total_loss(
    trace: &BagForwardTrace,
    bag_label: Label,
    bank: &PrototypeBank,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let ce = cross_entropy(&trace.logits, bag_label)?;
    let cluster = cluster_loss(trace, bag_label, bank)?;
    let separation = separation_loss(trace, bag_label, bank)?;
    Ok(LossBreakdown {
        cross_entropy: ce,
        cluster,
        separation,
        total: ce + config.lambda1 * cluster + config.lambda2 * separation,
    })
}

/// Full backward pass of the total loss through the model for one bag.
/// Accumulates into `grads` so a caller can batch bags if desired.
pub fn total_loss_backward(
    model: &Model,
    bag: &Bag,
    trace: &BagForwardTrace,
    cache: &BagCache,
    config: &LossConfig,
    grads: &mut ModelGrads,
) -> Result<LossBreakdown> {
    let breakdown = total_loss(trace, bag.label, &model.bank, config)?;
    let k = bag.len() as f64;

    // cross-entropy -> logits -> head, h_bag
    let dlogits = cross_entropy_grad(&trace.logits, bag.label);
    for cls in 0..2 {
        grads.head.row_mut(cls).scaled_add(dlogits[cls], &trace.h_bag);
    }
    let mut dh_bag = Array1::zeros(trace.h_bag.len());
    for cls in 0..2 {
        dh_bag.scaled_add(dlogits[cls], &model.head.weights.row(cls));
    }

    // cluster / separation: gradients into attention weights and into the
    // argmin windows of the distance maps
    let mut da_direct = Array1::zeros(bag.len());
    let mut dgrids: Vec<ndarray::Array3<f64>> = trace
        .patch_grids
        .iter()
        .map(|g| ndarray::Array3::zeros(g.values.dim()))
        .collect();
    for i in 0..bag.len() {
        for (class, lambda, sign) in [
            (bag.label, config.lambda1, 1.0),
            (bag.label.other(), config.lambda2, -1.0),
        ] {
            let (m, j, (r, c)) =
                inner_min(trace, &model.bank, i, class).expect("class floor checked");
            let coeff = sign * lambda / k;
            if !config.attention_detached {
                da_direct[i] += coeff * m;
            }
            let dd2 = coeff * trace.attention_weights[i];
            accumulate_window_d2_grad(
                &trace.patch_grids[i],
                &model.bank.prototypes[j].vector,
                r,
                c,
                dd2,
                &mut dgrids[i],
                &mut grads.prototypes[j],
            );
        }
    }

    // attention pooling backward
    let dh = attention_backward(
        &trace.similarity_vectors,
        &model.attention,
        &cache.attn,
        &dh_bag,
        Some(&da_direct),
        &mut grads.attention,
    );

    // similarity + encoder backward per instance
    let eps = model.config.similarity_epsilon;
    for i in 0..bag.len() {
        similarity_backward(
            &trace.patch_grids[i],
            &model.bank,
            &cache.sims[i],
            eps,
            &dh[i],
            &mut dgrids[i],
            &mut grads.prototypes,
        );
        encode_backward(
            &model.encoder,
            &cache.encoder_caches[i],
            &dgrids[i],
            &mut grads.encoder,
        );
    }
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::types::{PatchGrid, Prototype};
    use ndarray::{arr1, Array2, Array3};

    fn toy_trace_and_bank() -> (BagForwardTrace, PrototypeBank) {
        // 2 instances, 2 prototypes (neg, pos), 1x1x1 vectors, grids 1x1x1
        let bank = PrototypeBank {
            prototypes: vec![
                Prototype {
                    vector: Array3::from_elem((1, 1, 1), 0.2),
                    class: Label::Negative,
                    provenance: None,
                    active: true,
                },
                Prototype {
                    vector: Array3::from_elem((1, 1, 1), 0.9),
                    class: Label::Positive,
                    provenance: None,
                    active: true,
                },
            ],
        };
        let grids = vec![0.1, 0.8];
        let mut distance_maps = Vec::new();
        let mut patch_grids = Vec::new();
        for (i, g) in grids.iter().enumerate() {
            let maps: Vec<Array2<f64>> = bank
                .prototypes
                .iter()
                .map(|p| {
                    let d = g - p.vector[[0, 0, 0]];
                    Array2::from_elem((1, 1), d * d)
                })
                .collect();
            distance_maps.push(maps);
            patch_grids.push(PatchGrid {
                values: Array3::from_elem((1, 1, 1), *g),
                instance_index: i,
            });
        }
        let trace = BagForwardTrace {
            patch_grids,
            similarity_vectors: vec![arr1(&[1.0, 0.5]), arr1(&[0.3, 2.0])],
            activation_maps: vec![vec![], vec![]],
            distance_maps,
            attention_weights: arr1(&[0.25, 0.75]),
            h_bag: arr1(&[0.475, 1.625]),
            logits: [0.3, -0.2],
        };
        (trace, bank)
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let v = cross_entropy(&[0.0, 0.0], Label::Positive).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct() {
        let v = cross_entropy(&[-50.0, 50.0], Label::Positive).unwrap();
        assert!(v >= 0.0 && v < 1e-12);
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        // logits [1.2, -0.3], label 0
        let v = cross_entropy(&[1.2, -0.3], Label::Negative).unwrap();
        let z = (1.2f64).exp() + (-0.3f64).exp();
        let oracle = -((1.2f64).exp() / z).ln();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn cluster_zero_when_patch_equals_prototype() {
        let (mut trace, bank) = toy_trace_and_bank();
        // make every instance contain a patch equal to the positive prototype
        for maps in &mut trace.distance_maps {
            maps[1] = Array2::from_elem((1, 1), 0.0);
        }
        let v = cluster_loss(&trace, Label::Positive, &bank).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_instance_cluster_is_squared_distance() {
        let (mut trace, bank) = toy_trace_and_bank();
        trace.similarity_vectors.truncate(1);
        trace.distance_maps.truncate(1);
        trace.patch_grids.truncate(1);
        trace.attention_weights = arr1(&[1.0]);
        // nearest positive prototype at distance 0.8 (0.1 vs 0.9)
        let v = cluster_loss(&trace, Label::Positive, &bank).unwrap();
        assert!((v - 0.8 * 0.8).abs() < 1e-12);
        let s = separation_loss(&trace, Label::Positive, &bank).unwrap();
        assert!((s + 0.1 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn brute_force_oracle_three_instances() {
        // independent triple-nested scan over (instance, prototype, window)
        let (trace, bank) = toy_trace_and_bank();
        for label in [Label::Negative, Label::Positive] {
            let k = trace.similarity_vectors.len();
            let mut expect_cluster = 0.0;
            let mut expect_sep = 0.0;
            for i in 0..k {
                for (target, acc) in [(label, &mut expect_cluster), (label.other(), &mut expect_sep)]
                {
                    let mut best = f64::INFINITY;
                    for (j, p) in bank.prototypes.iter().enumerate() {
                        if p.class != target || !p.active {
                            continue;
                        }
                        for &d2 in trace.distance_maps[i][j].iter() {
                            if d2 < best {
                                best = d2;
                            }
                        }
                    }
                    *acc += trace.attention_weights[i] * best;
                }
            }
            expect_cluster /= k as f64;
            expect_sep = -expect_sep / k as f64;
            assert_eq!(cluster_loss(&trace, label, &bank).unwrap(), expect_cluster);
            assert_eq!(separation_loss(&trace, label, &bank).unwrap(), expect_sep);
        }
    }

    #[test]
    fn missing_class_prototype_is_invariant_violation() {
        let (trace, mut bank) = toy_trace_and_bank();
        bank.prototypes[1].active = false;
        assert!(cluster_loss(&trace, Label::Positive, &bank).is_err());
        assert!(separation_loss(&trace, Label::Negative, &bank).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let (trace, bank) = toy_trace_and_bank();
        let cfg = LossConfig {
            lambda1: 0.8,
            lambda2: 0.08,
            attention_detached: false,
        };
        let b = total_loss(&trace, Label::Positive, &bank, &cfg).unwrap();
        assert!(
            (b.total - (b.cross_entropy + 0.8 * b.cluster + 0.08 * b.separation)).abs() < 1e-6
        );
        let zero = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            attention_detached: false,
        };
        let b0 = total_loss(&trace, Label::Positive, &bank, &zero).unwrap();
        assert_eq!(b0.total, b0.cross_entropy);
    }

    #[test]
    fn known_component_arithmetic() {
        // components (0.7, 0.2, -0.1) with lambdas (0.8, 0.08)
        let total: f64 = 0.7 + 0.8 * 0.2 + 0.08 * (-0.1);
        assert!((total - 0.852).abs() < 1e-12);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let (trace, bank) = toy_trace_and_bank();
        let mut permuted = trace.clone();
        permuted.similarity_vectors.reverse();
        permuted.distance_maps.reverse();
        permuted.patch_grids.reverse();
        permuted.attention_weights = arr1(&[0.75, 0.25]);
        for label in [Label::Negative, Label::Positive] {
            let a = cluster_loss(&trace, label, &bank).unwrap();
            let b = cluster_loss(&permuted, label, &bank).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }
}
