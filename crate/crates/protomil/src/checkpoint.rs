//! Checkpoint directory format: a JSON manifest describing shapes, class
//! assignments and active flags, plus one raw tensor file per parameter
//! tensor. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::conv::{Conv1x1, ConvLayer};
use crate::mil::encoder::{EncoderParams, ResBlock, ResnetParams, SmallConvParams};
use crate::mil::types::*;
use crate::mil::{Model, ModelConfig};
use crate::tensorio;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PrototypeMeta {
    class: u8,
    active: bool,
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    prototypes: Vec<PrototypeMeta>,
    per_class_active: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    file: String,
    dims: Vec<usize>,
}

fn encoder_tensors(p: &EncoderParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    fn conv(name: &str, l: &ConvLayer) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            (
                format!("{name}_w"),
                vec![l.weight.dim().0, l.weight.dim().1],
                l.weight.iter().cloned().collect(),
            ),
            (
                format!("{name}_b"),
                vec![l.bias.len()],
                l.bias.to_vec(),
            ),
        ]
    }
    fn c1x1(name: &str, l: &Conv1x1) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            (
                format!("{name}_w"),
                vec![l.weight.dim().0, l.weight.dim().1],
                l.weight.iter().cloned().collect(),
            ),
            (
                format!("{name}_b"),
                vec![l.bias.len()],
                l.bias.to_vec(),
            ),
        ]
    }
    match p {
        EncoderParams::SmallConv(p) => [
            conv("encoder_conv1", &p.conv1),
            conv("encoder_conv2", &p.conv2),
            c1x1("encoder_addon1", &p.addon1),
            c1x1("encoder_addon2", &p.addon2),
        ]
        .concat(),
        EncoderParams::Resnet(p) => [
            conv("encoder_stem", &p.stem),
            conv("encoder_b1a", &p.block1.conv_a),
            conv("encoder_b1b", &p.block1.conv_b),
            c1x1("encoder_expand", &p.expand),
            conv("encoder_b2a", &p.block2.conv_a),
            conv("encoder_b2b", &p.block2.conv_b),
            c1x1("encoder_addon1", &p.addon1),
            c1x1("encoder_addon2", &p.addon2),
        ]
        .concat(),
        EncoderParams::Identity { .. } => vec![],
    }
}

/// Save a model into `dir` (created if absent).
pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = encoder_tensors(&model.encoder);
    let (pd, ph, pw) = model.bank.proto_shape();
    let mut proto_data = Vec::with_capacity(model.bank.len() * pd * ph * pw);
    for p in &model.bank.prototypes {
        proto_data.extend(p.vector.iter());
    }
    tensors.push((
        "prototypes".into(),
        vec![model.bank.len(), pd, ph, pw],
        proto_data,
    ));
    tensors.push((
        "attention_w".into(),
        vec![model.attention.w.len()],
        model.attention.w.to_vec(),
    ));
    tensors.push((
        "attention_v".into(),
        vec![model.attention.v.dim().0, model.attention.v.dim().1],
        model.attention.v.iter().cloned().collect(),
    ));
    tensors.push((
        "attention_u".into(),
        vec![model.attention.u.dim().0, model.attention.u.dim().1],
        model.attention.u.iter().cloned().collect(),
    ));
    tensors.push((
        "head_weights".into(),
        vec![model.head.weights.dim().0, model.head.weights.dim().1],
        model.head.weights.iter().cloned().collect(),
    ));

    let mut metas = Vec::new();
    for (name, dims, data) in &tensors {
        let file = format!("{name}.pmtn");
        tensorio::write_tensor(&dir.join(&file), dims, data)?;
        metas.push(TensorMeta {
            name: name.clone(),
            file,
            dims: dims.clone(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: metas,
        prototypes: model
            .bank
            .prototypes
            .iter()
            .map(|p| PrototypeMeta {
                class: p.class.index() as u8,
                active: p.active,
                provenance: p.provenance.clone(),
            })
            .collect(),
        per_class_active: [
            model.bank.active_count_of(Label::Negative),
            model.bank.active_count_of(Label::Positive),
        ],
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| Error::io(dir.join("manifest.json"), e))
}

struct TensorStore {
    dir: PathBuf,
    metas: Vec<TensorMeta>,
}

impl TensorStore {
    fn load(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let meta = self
            .metas
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Schema(format!("checkpoint missing tensor {name}")))?;
        let (dims, data) = tensorio::read_tensor(&self.dir.join(&meta.file))?;
        if dims != meta.dims {
            return Err(Error::Schema(format!(
                "tensor {name}: manifest dims {:?} vs file dims {:?}",
                meta.dims, dims
            )));
        }
        Ok((dims, data))
    }

    fn load2(&self, name: &str) -> Result<Array2<f64>> {
        let (dims, data) = self.load(name)?;
        if dims.len() != 2 {
            return Err(Error::Schema(format!("tensor {name} must be rank 2")));
        }
        Array2::from_shape_vec((dims[0], dims[1]), data)
            .map_err(|e| Error::Schema(format!("tensor {name}: {e}")))
    }

    fn load1(&self, name: &str) -> Result<Array1<f64>> {
        let (dims, data) = self.load(name)?;
        if dims.len() != 1 {
            return Err(Error::Schema(format!("tensor {name} must be rank 1")));
        }
        Ok(Array1::from_vec(data))
    }

    fn load_conv(&self, name: &str, in_channels: usize, kernel: usize) -> Result<ConvLayer> {
        Ok(ConvLayer {
            weight: self.load2(&format!("{name}_w"))?,
            bias: self.load1(&format!("{name}_b"))?,
            in_channels,
            kernel,
        })
    }

    fn load_1x1(&self, name: &str) -> Result<Conv1x1> {
        Ok(Conv1x1 {
            weight: self.load2(&format!("{name}_w"))?,
            bias: self.load1(&format!("{name}_b"))?,
        })
    }
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| Error::Schema(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let store = TensorStore {
        dir: dir.to_path_buf(),
        metas: manifest.tensors,
    };
    let config = manifest.config;
    let encoder = match config.encoder.architecture {
        EncoderArch::SmallConv => EncoderParams::SmallConv(SmallConvParams {
            conv1: store.load_conv("encoder_conv1", 1, 5)?,
            conv2: store.load_conv("encoder_conv2", 16, 5)?,
            addon1: store.load_1x1("encoder_addon1")?,
            addon2: store.load_1x1("encoder_addon2")?,
        }),
        EncoderArch::Resnet18Conv => EncoderParams::Resnet(ResnetParams {
            stem: store.load_conv("encoder_stem", 1, 3)?,
            block1: ResBlock {
                conv_a: store.load_conv("encoder_b1a", 16, 3)?,
                conv_b: store.load_conv("encoder_b1b", 16, 3)?,
            },
            expand: store.load_1x1("encoder_expand")?,
            block2: ResBlock {
                conv_a: store.load_conv("encoder_b2a", 32, 3)?,
                conv_b: store.load_conv("encoder_b2b", 32, 3)?,
            },
            addon1: store.load_1x1("encoder_addon1")?,
            addon2: store.load_1x1("encoder_addon2")?,
        }),
        EncoderArch::IdentityPassthrough => EncoderParams::Identity {
            dim: config.encoder.addon_depth,
        },
    };
    let (dims, data) = store.load("prototypes")?;
    if dims.len() != 4 || dims[0] != manifest.prototypes.len() {
        return Err(Error::Schema("prototype tensor shape mismatch".into()));
    }
    let (n, pd, ph, pw) = (dims[0], dims[1], dims[2], dims[3]);
    let stride = pd * ph * pw;
    let mut prototypes = Vec::with_capacity(n);
    for (j, meta) in manifest.prototypes.iter().enumerate() {
        let vector = Array3::from_shape_vec(
            (pd, ph, pw),
            data[j * stride..(j + 1) * stride].to_vec(),
        )
        .map_err(|e| Error::Schema(format!("prototype {j}: {e}")))?;
        prototypes.push(Prototype {
            vector,
            class: Label::from_u8(meta.class)?,
            provenance: meta.provenance.clone(),
            active: meta.active,
        });
    }
    let bank = PrototypeBank::new(prototypes)?;
    let attention = AttentionParams {
        w: store.load1("attention_w")?,
        v: store.load2("attention_v")?,
        u: store.load2("attention_u")?,
    };
    let head = ClassifierHead {
        weights: store.load2("head_weights")?,
    };
    if attention.input_dim() != bank.len() || head.weights.dim().1 != bank.len() {
        return Err(Error::Schema(
            "attention/head width does not match prototype count".into(),
        ));
    }
    Ok(Model {
        config,
        encoder,
        bank,
        attention,
        head,
    })
}
