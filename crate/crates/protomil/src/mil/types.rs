//! Core data types of the model: bags, instances, patch grids, prototypes,
//! attention parameters and the classifier head.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary bag label. Index 0 is the negative class, index 1 the positive
/// class, everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(Error::InvalidInput(format!(
                "label must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

/// One element of a bag: either raw pixels (channels x height x width, all
/// values in [0,1]) or a precomputed embedding vector. Exactly one of the
/// two is present by construction.
#[derive(Debug, Clone)]
pub enum InstanceData {
    Pixels(Array3<f64>),
    Embedding(Array1<f64>),
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub data: InstanceData,
}

impl Instance {
    pub fn from_pixels(pixels: Array3<f64>) -> Result<Self> {
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "instance pixels must lie in [0,1]".into(),
            ));
        }
        Ok(Instance {
            data: InstanceData::Pixels(pixels),
        })
    }

    pub fn from_embedding(embedding: Array1<f64>) -> Result<Self> {
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "instance embedding must be finite".into(),
            ));
        }
        Ok(Instance {
            data: InstanceData::Embedding(embedding),
        })
    }

    pub fn pixels(&self) -> Option<&Array3<f64>> {
        match &self.data {
            InstanceData::Pixels(p) => Some(p),
            InstanceData::Embedding(_) => None,
        }
    }

    pub fn embedding(&self) -> Option<&Array1<f64>> {
        match &self.data {
            InstanceData::Embedding(e) => Some(e),
            InstanceData::Pixels(_) => None,
        }
    }
}

/// A bag of instances with one binary label.
#[derive(Debug, Clone)]
pub struct Bag {
    pub id: String,
    pub label: Label,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: Label, instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidInput("bag must contain >= 1 instance".into()));
        }
        Ok(Bag {
            id: id.into(),
            label,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Bag-level label from (hidden) instance labels: positive iff any
/// instance is positive.
pub fn bag_label_from_instances(instance_labels: &[u8]) -> Result<Label> {
    if instance_labels.is_empty() {
        return Err(Error::InvalidInput(
            "bag label needs at least one instance label".into(),
        ));
    }
    for &l in instance_labels {
        if l > 1 {
            return Err(Error::InvalidInput(format!(
                "instance labels must be 0 or 1, got {l}"
            )));
        }
    }
    if instance_labels.iter().any(|&l| l == 1) {
        Ok(Label::Positive)
    } else {
        Ok(Label::Negative)
    }
}

/// Spatial grid of latent vectors produced by the encoder for one instance
/// (depth x rows x cols).
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub values: Array3<f64>,
    pub instance_index: usize,
}

impl PatchGrid {
    pub fn depth(&self) -> usize {
        self.values.dim().0
    }
    pub fn rows(&self) -> usize {
        self.values.dim().1
    }
    pub fn cols(&self) -> usize {
        self.values.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    SmallConv,
    Resnet18Conv,
    IdentityPassthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: EncoderArch,
    /// Channel count of the two 1x1 add-on convolutions; equals the
    /// prototype depth D. The final add-on layer always ends in a sigmoid.
    pub addon_depth: usize,
}

impl EncoderConfig {
    pub fn small_conv(addon_depth: usize) -> Self {
        EncoderConfig {
            architecture: EncoderArch::SmallConv,
            addon_depth,
        }
    }

    pub fn identity_passthrough(embedding_dim: usize) -> Self {
        EncoderConfig {
            architecture: EncoderArch::IdentityPassthrough,
            addon_depth: embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.addon_depth == 0 {
            return Err(Error::Config("addon_depth must be positive".into()));
        }
        Ok(())
    }
}

/// Where a projected prototype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub bag_id: String,
    pub instance_index: usize,
    pub patch_row: usize,
    pub patch_col: usize,
}

/// A learnable latent tensor (depth x h x w) with a class assignment.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub vector: Array3<f64>,
    pub class: Label,
    pub provenance: Option<Provenance>,
    pub active: bool,
}

/// The prototype layer. Indices are stable across pruning: pruned entries
/// are flagged inactive, never removed.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub prototypes: Vec<Prototype>,
}

impl PrototypeBank {
    pub fn new(prototypes: Vec<Prototype>) -> Result<Self> {
        let bank = PrototypeBank { prototypes };
        bank.check_class_floor()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.prototypes.iter().filter(|p| p.active).count()
    }

    pub fn active_count_of(&self, class: Label) -> usize {
        self.prototypes
            .iter()
            .filter(|p| p.active && p.class == class)
            .count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.prototypes.len())
            .filter(|&j| self.prototypes[j].active)
            .collect()
    }

    pub fn check_class_floor(&self) -> Result<()> {
        for class in [Label::Negative, Label::Positive] {
            if self.active_count_of(class) == 0 {
                return Err(Error::InvariantViolation(format!(
                    "prototype bank has no active prototype for class {:?}",
                    class
                )));
            }
        }
        Ok(())
    }

    pub fn proto_shape(&self) -> (usize, usize, usize) {
        self.prototypes[0].vector.dim()
    }
}

/// Parameters of gated attention pooling: w (L), V (L x M), U (L x M).
/// M is the total prototype count (inactive entries are zero-masked so M
/// never changes after pruning).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
}

impl AttentionParams {
    pub fn hidden_dim(&self) -> usize {
        self.w.len()
    }
    pub fn input_dim(&self) -> usize {
        self.v.dim().1
    }
}

/// Final linear layer, no bias: (num_classes x num_prototypes).
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
}

impl ClassifierHead {
    /// The positive-reasoning initialization: 1.0 on own-class entries,
    /// -0.5 on cross-class entries.
    pub fn init_for(bank: &PrototypeBank) -> Self {
        let m = bank.len();
        let mut weights = Array2::zeros((2, m));
        for (j, proto) in bank.prototypes.iter().enumerate() {
            for class_idx in 0..2 {
                weights[[class_idx, j]] = if proto.class.index() == class_idx {
                    1.0
                } else {
                    -0.5
                };
            }
        }
        ClassifierHead { weights }
    }
}

/// Everything forward_bag computes for one bag, kept for losses,
/// explanations and tests.
#[derive(Debug, Clone)]
pub struct BagForwardTrace {
    pub patch_grids: Vec<PatchGrid>,
    /// Per instance, length = total prototype count; inactive entries are 0.
    pub similarity_vectors: Vec<Array1<f64>>,
    /// activation_maps[i][j]: similarity map of prototype j over instance
    /// i's patch windows ((Hp-h+1) x (Wp-w+1)); empty for inactive j.
    pub activation_maps: Vec<Vec<Array2<f64>>>,
    /// Squared L2 distance per window, aligned with activation_maps; the
    /// cluster and separation losses min-pool these.
    pub distance_maps: Vec<Vec<Array2<f64>>>,
    pub attention_weights: Array1<f64>,
    pub h_bag: Array1<f64>,
    pub logits: [f64; 2],
}
