//! The assembled model and the full differentiable forward pass:
//! encoder -> prototype similarities -> attention pooling -> classifier.

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_pool, AttentionCache, AttentionGrads};
use super::encoder::{encode_forward, EncoderCache, EncoderGrads, EncoderParams};
use super::similarity::{prototype_similarities, SimilarityResult, DEFAULT_EPSILON};
use super::types::*;
use crate::error::{Error, Result};

/// Everything needed to build a fresh model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototypes_per_class: usize,
    /// Prototype spatial extent (depth is the encoder's addon_depth).
    pub proto_rows: usize,
    pub proto_cols: usize,
    pub attention_hidden_dim: usize,
    pub similarity_epsilon: f64,
}

impl ModelConfig {
    pub fn mnist_default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::small_conv(64),
            prototypes_per_class: 10,
            proto_rows: 2,
            proto_cols: 2,
            attention_hidden_dim: 128,
            similarity_epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn embedding_default(dim: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::identity_passthrough(dim),
            prototypes_per_class: 10,
            proto_rows: 1,
            proto_cols: 1,
            attention_hidden_dim: 128,
            similarity_epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prototypes_per_class == 0 {
            return Err(Error::Config("need >= 1 prototype per class".into()));
        }
        if self.proto_rows == 0 || self.proto_cols == 0 {
            return Err(Error::Config("prototype extent must be positive".into()));
        }
        if self.attention_hidden_dim == 0 {
            return Err(Error::Config("attention hidden dim must be positive".into()));
        }
        if !(self.similarity_epsilon > 0.0 && self.similarity_epsilon < 1.0) {
            return Err(Error::Config(
                "similarity epsilon must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub bank: PrototypeBank,
    pub attention: AttentionParams,
    pub head: ClassifierHead,
}

impl Model {
    /// Deterministic initialization: prototypes uniform in [0,1] (the
    /// encoder's sigmoid output range), head in the 1.0 / -0.5 pattern.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(&config.encoder, seed)?;
        let depth = config.encoder.addon_depth;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut prototypes = Vec::with_capacity(config.prototypes_per_class * 2);
        for class in [Label::Negative, Label::Positive] {
            for _ in 0..config.prototypes_per_class {
                prototypes.push(Prototype {
                    vector: Array3::from_shape_fn(
                        (depth, config.proto_rows, config.proto_cols),
                        |_| rng.random_range(0.0..1.0),
                    ),
                    class,
                    provenance: None,
                    active: true,
                });
            }
        }
        let bank = PrototypeBank::new(prototypes)?;
        let attention = AttentionParams::init(
            config.attention_hidden_dim,
            bank.len(),
            seed.wrapping_add(2),
        );
        let head = ClassifierHead::init_for(&bank);
        Ok(Model {
            config,
            encoder,
            bank,
            attention,
            head,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.bank.len()
    }
}

/// Linear classification of a bag vector; entries of inactive prototypes
/// are expected to be zero already.
pub fn classify(h_bag: &Array1<f64>, head: &ClassifierHead) -> Result<[f64; 2]> {
    if h_bag.len() != head.weights.dim().1 {
        return Err(Error::ShapeMismatch(format!(
            "h_bag length {} vs head width {}",
            h_bag.len(),
            head.weights.dim().1
        )));
    }
    let logits = head.weights.dot(h_bag);
    Ok([logits[0], logits[1]])
}

/// Intermediates kept alive for the backward pass.
pub struct BagCache {
    pub encoder_caches: Vec<EncoderCache>,
    pub sims: Vec<SimilarityResult>,
    pub attn: AttentionCache,
}

pub fn forward_bag(model: &Model, bag: &Bag) -> Result<(BagForwardTrace, BagCache)> {
    model.bank.check_class_floor()?;
    let eps = model.config.similarity_epsilon;
    let mut patch_grids = Vec::with_capacity(bag.len());
    let mut encoder_caches = Vec::with_capacity(bag.len());
    let mut sims = Vec::with_capacity(bag.len());
    for (i, instance) in bag.instances.iter().enumerate() {
        let (values, cache) = encode_forward(&model.encoder, &model.config.encoder, instance)?;
        let grid = PatchGrid {
            values,
            instance_index: i,
        };
        let sim = prototype_similarities(&grid, &model.bank, eps)?;
        patch_grids.push(grid);
        encoder_caches.push(cache);
        sims.push(sim);
    }
    let h: Vec<Array1<f64>> = sims.iter().map(|s| s.scores.clone()).collect();
    let (h_bag, attention_weights, attn) = attention_pool(&h, &model.attention)?;
    let logits = classify(&h_bag, &model.head)?;
    debug_assert!((attention_weights.sum() - 1.0).abs() < 1e-6);
    let trace = BagForwardTrace {
        patch_grids,
        similarity_vectors: h,
        activation_maps: sims.iter().map(|s| s.maps.clone()).collect(),
        distance_maps: sims.iter().map(|s| s.d2_maps.clone()).collect(),
        attention_weights,
        h_bag,
        logits,
    };
    Ok((
        trace,
        BagCache {
            encoder_caches,
            sims,
            attn,
        },
    ))
}

/// Positive-class probability from a trace's logits.
pub fn positive_probability(logits: &[f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Gradient of every trainable tensor in the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub prototypes: Vec<Array3<f64>>,
    pub attention: AttentionGrads,
    pub head: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            encoder: EncoderGrads::zeros_like(&model.encoder),
            prototypes: model
                .bank
                .prototypes
                .iter()
                .map(|p| Array3::zeros(p.vector.dim()))
                .collect(),
            attention: AttentionGrads::zeros_like(&model.attention),
            head: Array2::zeros(model.head.weights.dim()),
        }
    }
}
