//! Prototype projection onto nearest same-class training patches, the
//! k-nearest-patch census, and census-driven pruning with a head/attention
//! fine-tune afterwards.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, Metrics};
use crate::mil::encoder::encode_forward;
use crate::mil::types::{Bag, Label, Provenance};
use crate::mil::Model;
use crate::train::{run_head_finetune, score_bags, OptimizerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    pub k_neighbors: usize,
    /// Maximum fraction of prototypes removed.
    pub max_removal_fraction: f64,
    pub finetune_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 6,
            max_removal_fraction: 0.40,
            finetune_epochs: 20,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::InvalidInput("k_neighbors must be ≥ 1".into()));
        }
        if !(self.max_removal_fraction > 0.0 && self.max_removal_fraction < 1.0) {
            return Err(Error::InvalidInput(
                "max_removal_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Walk every patch window of every instance of every bag in lexicographic
/// (bag order, instance, row, col) order.
fn for_each_patch<F>(model: &Model, bags: &[Bag], mut visit: F) -> Result<()>
where
    F: FnMut(&Array3<f64>, &Provenance, Label) -> Result<()>,
{
    let (_, ph, pw) = model.bank.proto_shape();
    for bag in bags {
        for (i, instance) in bag.instances.iter().enumerate() {
            let (grid, _cache) = encode_forward(&model.encoder, &model.config.encoder, instance)?;
            let (_, gh, gw) = grid.dim();
            if gh < ph || gw < pw {
                return Err(Error::ShapeMismatch(format!(
                    "patch grid {gh}x{gw} smaller than prototype {ph}x{pw}"
                )));
            }
            for r in 0..=(gh - ph) {
                for c in 0..=(gw - pw) {
                    let patch = grid.slice(s![.., r..r + ph, c..c + pw]).to_owned();
                    let prov = Provenance {
                        bag_id: bag.id.clone(),
                        instance_index: i,
                        patch_row: r,
                        patch_col: c,
                    };
                    visit(&patch, &prov, bag.label)?;
                }
            }
        }
    }
    Ok(())
}

fn patch_d2(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Replace every active prototype with its nearest training patch drawn from
/// bags of the prototype's class. Ties resolve to the lexicographically first
/// patch, so a second call is a no-op. Returns how many prototype vectors
/// changed.
pub fn project_prototypes(model: &mut Model, bags: &[Bag]) -> Result<usize> {
    for class in [Label::Negative, Label::Positive] {
        if model.bank.active_count_of(class) > 0 && !bags.iter().any(|b| b.label == class) {
            return Err(Error::InvalidInput(format!(
                "projection needs at least one bag of class {:?}",
                class
            )));
        }
    }
    let mut best: Vec<Option<(f64, Array3<f64>, Provenance)>> = vec![None; model.bank.len()];
    for_each_patch(model, bags, |patch, prov, label| {
        for (j, proto) in model.bank.prototypes.iter().enumerate() {
            if !proto.active || proto.class != label {
                continue;
            }
            let d2 = patch_d2(patch, &proto.vector);
            if best[j].as_ref().map_or(true, |(b, _, _)| d2 < *b) {
                best[j] = Some((d2, patch.clone(), prov.clone()));
            }
        }
        Ok(())
    })?;
    let mut changed = 0;
    for (j, slot) in best.into_iter().enumerate() {
        if let Some((_, patch, prov)) = slot {
            let proto = &mut model.bank.prototypes[j];
            if proto.vector != patch {
                changed += 1;
            }
            proto.vector = patch;
            proto.provenance = Some(prov);
        }
    }
    Ok(changed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Neighbor {
    pub provenance: Provenance,
    pub bag_label: u8,
    pub d2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusEntry {
    pub prototype_index: usize,
    pub prototype_class: u8,
    /// k nearest training patches, nearest first.
    pub neighbors: Vec<Neighbor>,
    pub own_class_count: usize,
    pub other_class_count: usize,
}

fn prov_key(p: &Provenance) -> (&str, usize, usize, usize) {
    (&p.bag_id, p.instance_index, p.patch_row, p.patch_col)
}

/// For each active prototype, find its k nearest training patches across ALL
/// bags. Each neighbor carries its bag's label. Ties in distance break by
/// (bag_id, instance_index, row, col) lexicographic order.
pub fn prototype_neighbor_census(
    model: &Model,
    bags: &[Bag],
    k_neighbors: usize,
) -> Result<Vec<CensusEntry>> {
    if k_neighbors == 0 {
        return Err(Error::InvalidInput("k_neighbors must be ≥ 1".into()));
    }
    let active: Vec<usize> = model.bank.active_indices();
    let mut heaps: Vec<Vec<Neighbor>> = vec![Vec::with_capacity(k_neighbors + 1); active.len()];
    let mut total_patches = 0usize;
    for_each_patch(model, bags, |patch, prov, label| {
        total_patches += 1;
        for (slot, &j) in active.iter().enumerate() {
            let d2 = patch_d2(patch, &model.bank.prototypes[j].vector);
            let heap = &mut heaps[slot];
            // Patches arrive in lexicographic order, so within equal d2 the
            // earlier key is already in place; insert strictly before any
            // larger d2 only.
            let pos = heap.partition_point(|n| {
                n.d2 < d2 || (n.d2 == d2 && prov_key(&n.provenance) < prov_key(prov))
            });
            if pos < k_neighbors {
                heap.insert(
                    pos,
                    Neighbor {
                        provenance: prov.clone(),
                        bag_label: label.index() as u8,
                        d2,
                    },
                );
                heap.truncate(k_neighbors);
            }
        }
        Ok(())
    })?;
    if total_patches < k_neighbors {
        return Err(Error::InvalidInput(format!(
            "census needs ≥ {k_neighbors} patches, dataset has {total_patches}"
        )));
    }
    Ok(active
        .iter()
        .zip(heaps)
        .map(|(&j, neighbors)| {
            let class = model.bank.prototypes[j].class;
            let own = neighbors
                .iter()
                .filter(|n| n.bag_label == class.index() as u8)
                .count();
            CensusEntry {
                prototype_index: j,
                prototype_class: class.index() as u8,
                other_class_count: neighbors.len() - own,
                own_class_count: own,
                neighbors,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub format_version: u32,
    pub census: Vec<CensusEntry>,
    /// Selected own-class neighbor threshold; `None` when no feasible r
    /// exists (in which case nothing was pruned).
    pub chosen_r: Option<usize>,
    pub removed_indices: Vec<usize>,
    pub active_before: usize,
    pub active_after: usize,
    pub metrics_before: Metrics,
    pub metrics_after: Metrics,
}

/// Deactivate prototypes whose own-class neighbor count falls below an
/// automatically chosen threshold r, then fine-tune attention and head.
///
/// r is the largest integer in [1, k] whose removal set stays within
/// ⌊l · total⌋ prototypes and leaves each class with ≥ 1 survivor.
pub fn prune_prototypes(
    model: &mut Model,
    bags: &[Bag],
    config: &PruneConfig,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<PruneReport> {
    config.validate()?;
    let census = prototype_neighbor_census(model, bags, config.k_neighbors)?;
    let active_before = model.bank.active_count();
    let cap = (config.max_removal_fraction * active_before as f64).floor() as usize;
    let metrics_before = compute_metrics(&score_bags(model, bags)?)?;

    let mut chosen_r = None;
    let mut removal: Vec<usize> = Vec::new();
    for r in (1..=config.k_neighbors).rev() {
        let candidate: Vec<usize> = census
            .iter()
            .filter(|e| e.own_class_count < r)
            .map(|e| e.prototype_index)
            .collect();
        let survives = |class: Label| {
            census
                .iter()
                .filter(|e| e.prototype_class == class.index() as u8)
                .any(|e| !candidate.contains(&e.prototype_index))
        };
        if candidate.len() <= cap && survives(Label::Negative) && survives(Label::Positive) {
            chosen_r = Some(r);
            removal = candidate;
            break;
        }
    }
    for &j in &removal {
        model.bank.prototypes[j].active = false;
    }
    if chosen_r.is_some() && config.finetune_epochs > 0 {
        run_head_finetune(model, bags, config.finetune_epochs, opt, seed)?;
    }
    let metrics_after = compute_metrics(&score_bags(model, bags)?)?;
    Ok(PruneReport {
        format_version: 1,
        census,
        chosen_r,
        active_before,
        active_after: model.bank.active_count(),
        removed_indices: removal,
        metrics_before,
        metrics_after,
    })
}
