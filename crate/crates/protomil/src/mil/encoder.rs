//! Instance encoders: the desk-scale small_conv CNN, a reduced
//! residual encoder trained from scratch, and the identity passthrough for
//! precomputed embeddings. All encoders end in a sigmoid so patch grids
//! live in [0,1].

use ndarray::{Array, Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::conv::*;
use super::types::{EncoderArch, EncoderConfig, Instance, InstanceData};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SmallConvParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub addon1: Conv1x1,
    pub addon2: Conv1x1,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv_a: ConvLayer,
    pub conv_b: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct ResnetParams {
    pub stem: ConvLayer,
    pub block1: ResBlock,
    pub expand: Conv1x1,
    pub block2: ResBlock,
    pub addon1: Conv1x1,
    pub addon2: Conv1x1,
}

#[derive(Debug, Clone)]
pub enum EncoderParams {
    SmallConv(SmallConvParams),
    Resnet(ResnetParams),
    Identity { dim: usize },
}

fn he_conv(rng: &mut impl Rng, out_ch: usize, in_ch: usize, k: usize) -> ConvLayer {
    let fan_in = (in_ch * k * k) as f64;
    let limit = (6.0 / fan_in).sqrt();
    ConvLayer {
        weight: Array::from_shape_fn((out_ch, in_ch * k * k), |_| rng.random_range(-limit..limit)),
        bias: Array1::zeros(out_ch),
        in_channels: in_ch,
        kernel: k,
    }
}

fn he_1x1(rng: &mut impl Rng, out_ch: usize, in_ch: usize) -> Conv1x1 {
    let limit = (6.0 / in_ch as f64).sqrt();
    Conv1x1 {
        weight: Array::from_shape_fn((out_ch, in_ch), |_| rng.random_range(-limit..limit)),
        bias: Array1::zeros(out_ch),
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.addon_depth;
        match config.architecture {
            EncoderArch::SmallConv => Ok(EncoderParams::SmallConv(SmallConvParams {
                conv1: he_conv(&mut rng, 16, 1, 5),
                conv2: he_conv(&mut rng, 32, 16, 5),
                addon1: he_1x1(&mut rng, d, 32),
                addon2: he_1x1(&mut rng, d, d),
            })),
            EncoderArch::Resnet18Conv => Ok(EncoderParams::Resnet(ResnetParams {
                stem: he_conv(&mut rng, 16, 1, 3),
                block1: ResBlock {
                    conv_a: he_conv(&mut rng, 16, 16, 3),
                    conv_b: he_conv(&mut rng, 16, 16, 3),
                },
                expand: he_1x1(&mut rng, 32, 16),
                block2: ResBlock {
                    conv_a: he_conv(&mut rng, 32, 32, 3),
                    conv_b: he_conv(&mut rng, 32, 32, 3),
                },
                addon1: he_1x1(&mut rng, d, 32),
                addon2: he_1x1(&mut rng, d, d),
            })),
            EncoderArch::IdentityPassthrough => Ok(EncoderParams::Identity { dim: d }),
        }
    }

    pub fn output_depth(&self, config: &EncoderConfig) -> usize {
        match self {
            EncoderParams::Identity { dim } => *dim,
            _ => config.addon_depth,
        }
    }
}

fn pad1(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array3::zeros((c, h + 2, w + 2));
    out.slice_mut(ndarray::s![.., 1..h + 1, 1..w + 1])
        .assign(input);
    out
}

fn unpad1(dpadded: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = dpadded.dim();
    dpadded
        .slice(ndarray::s![.., 1..h - 1, 1..w - 1])
        .to_owned()
}

/// Intermediate activations retained for the backward pass.
pub enum EncoderCache {
    SmallConv(Box<SmallConvCache>),
    Resnet(Box<ResnetCache>),
    Identity,
}

pub struct SmallConvCache {
    pub c1: ConvCache,
    pub a1: Array3<f64>, // relu(conv1)
    pub p1: PoolCache,
    pub p1_out: Array3<f64>,
    pub c2: ConvCache,
    pub a2: Array3<f64>,
    pub p2: PoolCache,
    pub p2_out: Array3<f64>,
    pub p3: PoolCache,
    pub p3_out: Array3<f64>,
    pub ad1_out: Array3<f64>, // relu(addon1)
    pub grid: Array3<f64>,    // sigmoid(addon2)
}

pub struct ResBlockCache {
    pub input: Array3<f64>,
    pub ca: ConvCache,
    pub a: Array3<f64>,
    pub cb: ConvCache,
    pub out: Array3<f64>,
}

pub struct ResnetCache {
    pub stem_c: ConvCache,
    pub stem_a: Array3<f64>,
    pub pool0: PoolCache,
    pub pool0_out: Array3<f64>,
    pub b1: ResBlockCache,
    pub pool1: PoolCache,
    pub pool1_out: Array3<f64>,
    pub expand_out: Array3<f64>,
    pub b2: ResBlockCache,
    pub pool2: PoolCache,
    pub pool2_out: Array3<f64>,
    pub ad1_out: Array3<f64>,
    pub grid: Array3<f64>,
}

fn resblock_forward(block: &ResBlock, input: &Array3<f64>) -> (Array3<f64>, ResBlockCache) {
    let (mut a, ca) = conv_forward(&block.conv_a, &pad1(input));
    relu_forward(&mut a);
    let (z, cb) = conv_forward(&block.conv_b, &pad1(&a));
    let mut out = z + input;
    relu_forward(&mut out);
    (
        out.clone(),
        ResBlockCache {
            input: input.clone(),
            ca,
            a,
            cb,
            out,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn resblock_backward(
    block: &ResBlock,
    cache: &ResBlockCache,
    dout: &Array3<f64>,
    dca_w: &mut Array2<f64>,
    dca_b: &mut Array1<f64>,
    dcb_w: &mut Array2<f64>,
    dcb_b: &mut Array1<f64>,
) -> Array3<f64> {
    let mut dsum = dout.clone();
    relu_backward(&cache.out, &mut dsum);
    // branch through conv_b
    let da_pad = conv_backward(&block.conv_b, &cache.cb, &dsum, dcb_w, dcb_b);
    let mut da = unpad1(&da_pad);
    relu_backward(&cache.a, &mut da);
    let dx_pad = conv_backward(&block.conv_a, &cache.ca, &da, dca_w, dca_b);
    // skip connection
    unpad1(&dx_pad) + &dsum
}

/// Encode one instance into a patch grid; values land in [0,1].
pub fn encode_forward(
    params: &EncoderParams,
    config: &EncoderConfig,
    instance: &Instance,
) -> Result<(Array3<f64>, EncoderCache)> {
    match (params, &instance.data) {
        (EncoderParams::Identity { dim }, InstanceData::Embedding(e)) => {
            if e.len() != *dim {
                return Err(Error::Config(format!(
                    "identity passthrough expects embedding dim {}, got {}",
                    dim,
                    e.len()
                )));
            }
            let grid = e
                .clone()
                .into_shape_with_order((*dim, 1, 1))
                .expect("embedding reshape");
            Ok((grid, EncoderCache::Identity))
        }
        (EncoderParams::Identity { .. }, InstanceData::Pixels(_)) => Err(Error::Config(
            "identity_passthrough requires precomputed embeddings, got pixels".into(),
        )),
        (_, InstanceData::Embedding(_)) => Err(Error::Config(
            "convolutional encoder requires pixel instances, got an embedding".into(),
        )),
        (EncoderParams::SmallConv(p), InstanceData::Pixels(x)) => {
            let (c, h, w) = x.dim();
            if c != 1 || h != 28 || w != 28 {
                return Err(Error::Config(format!(
                    "small_conv expects 1x28x28 input, got {}x{}x{}",
                    c, h, w
                )));
            }
            debug_assert_eq!(config.architecture, EncoderArch::SmallConv);
            let (mut a1, c1) = conv_forward(&p.conv1, x);
            relu_forward(&mut a1);
            let (p1_out, p1) = maxpool2_forward(&a1);
            let (mut a2, c2) = conv_forward(&p.conv2, &p1_out);
            relu_forward(&mut a2);
            let (p2_out, p2) = maxpool2_forward(&a2);
            let (p3_out, p3) = maxpool2_forward(&p2_out);
            let mut ad1_out = conv1x1_forward(&p.addon1, &p3_out);
            relu_forward(&mut ad1_out);
            let mut grid = conv1x1_forward(&p.addon2, &ad1_out);
            sigmoid_forward(&mut grid);
            Ok((
                grid.clone(),
                EncoderCache::SmallConv(Box::new(SmallConvCache {
                    c1,
                    a1,
                    p1,
                    p1_out,
                    c2,
                    a2,
                    p2,
                    p2_out,
                    p3,
                    p3_out,
                    ad1_out,
                    grid,
                })),
            ))
        }
        (EncoderParams::Resnet(p), InstanceData::Pixels(x)) => {
            let (mut stem_a, stem_c) = conv_forward(&p.stem, &pad1(x));
            relu_forward(&mut stem_a);
            let (pool0_out, pool0) = maxpool2_forward(&stem_a);
            let (b1_out, b1) = resblock_forward(&p.block1, &pool0_out);
            let (pool1_out, pool1) = maxpool2_forward(&b1_out);
            let mut expand_out = conv1x1_forward(&p.expand, &pool1_out);
            relu_forward(&mut expand_out);
            let (b2_out, b2) = resblock_forward(&p.block2, &expand_out);
            let (pool2_out, pool2) = maxpool2_forward(&b2_out);
            let mut ad1_out = conv1x1_forward(&p.addon1, &pool2_out);
            relu_forward(&mut ad1_out);
            let mut grid = conv1x1_forward(&p.addon2, &ad1_out);
            sigmoid_forward(&mut grid);
            Ok((
                grid.clone(),
                EncoderCache::Resnet(Box::new(ResnetCache {
                    stem_c,
                    stem_a,
                    pool0,
                    pool0_out,
                    b1,
                    pool1,
                    pool1_out,
                    expand_out,
                    b2,
                    pool2,
                    pool2_out,
                    ad1_out,
                    grid,
                })),
            ))
        }
    }
}

/// Gradients of every encoder tensor, mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub enum EncoderGrads {
    SmallConv {
        conv1_w: Array2<f64>,
        conv1_b: Array1<f64>,
        conv2_w: Array2<f64>,
        conv2_b: Array1<f64>,
        addon1_w: Array2<f64>,
        addon1_b: Array1<f64>,
        addon2_w: Array2<f64>,
        addon2_b: Array1<f64>,
    },
    Resnet {
        stem_w: Array2<f64>,
        stem_b: Array1<f64>,
        b1a_w: Array2<f64>,
        b1a_b: Array1<f64>,
        b1b_w: Array2<f64>,
        b1b_b: Array1<f64>,
        expand_w: Array2<f64>,
        expand_b: Array1<f64>,
        b2a_w: Array2<f64>,
        b2a_b: Array1<f64>,
        b2b_w: Array2<f64>,
        b2b_b: Array1<f64>,
        addon1_w: Array2<f64>,
        addon1_b: Array1<f64>,
        addon2_w: Array2<f64>,
        addon2_b: Array1<f64>,
    },
    Identity,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        match params {
            EncoderParams::SmallConv(p) => EncoderGrads::SmallConv {
                conv1_w: Array2::zeros(p.conv1.weight.dim()),
                conv1_b: Array1::zeros(p.conv1.bias.len()),
                conv2_w: Array2::zeros(p.conv2.weight.dim()),
                conv2_b: Array1::zeros(p.conv2.bias.len()),
                addon1_w: Array2::zeros(p.addon1.weight.dim()),
                addon1_b: Array1::zeros(p.addon1.bias.len()),
                addon2_w: Array2::zeros(p.addon2.weight.dim()),
                addon2_b: Array1::zeros(p.addon2.bias.len()),
            },
            EncoderParams::Resnet(p) => EncoderGrads::Resnet {
                stem_w: Array2::zeros(p.stem.weight.dim()),
                stem_b: Array1::zeros(p.stem.bias.len()),
                b1a_w: Array2::zeros(p.block1.conv_a.weight.dim()),
                b1a_b: Array1::zeros(p.block1.conv_a.bias.len()),
                b1b_w: Array2::zeros(p.block1.conv_b.weight.dim()),
                b1b_b: Array1::zeros(p.block1.conv_b.bias.len()),
                expand_w: Array2::zeros(p.expand.weight.dim()),
                expand_b: Array1::zeros(p.expand.bias.len()),
                b2a_w: Array2::zeros(p.block2.conv_a.weight.dim()),
                b2a_b: Array1::zeros(p.block2.conv_a.bias.len()),
                b2b_w: Array2::zeros(p.block2.conv_b.weight.dim()),
                b2b_b: Array1::zeros(p.block2.conv_b.bias.len()),
                addon1_w: Array2::zeros(p.addon1.weight.dim()),
                addon1_b: Array1::zeros(p.addon1.bias.len()),
                addon2_w: Array2::zeros(p.addon2.weight.dim()),
                addon2_b: Array1::zeros(p.addon2.bias.len()),
            },
            EncoderParams::Identity { .. } => EncoderGrads::Identity,
        }
    }
}

/// Backpropagate a patch-grid gradient through the encoder, accumulating
/// into `grads`. The gradient w.r.t. the instance itself is discarded.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    dgrid: &Array3<f64>,
    grads: &mut EncoderGrads,
) {
    match (params, cache, grads) {
        (EncoderParams::Identity { .. }, EncoderCache::Identity, EncoderGrads::Identity) => {}
        (
            EncoderParams::SmallConv(p),
            EncoderCache::SmallConv(c),
            EncoderGrads::SmallConv {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                addon1_w,
                addon1_b,
                addon2_w,
                addon2_b,
            },
        ) => {
            let mut d = dgrid.clone();
            sigmoid_backward(&c.grid, &mut d);
            let mut d = conv1x1_backward(&p.addon2, &c.ad1_out, &d, addon2_w, addon2_b);
            relu_backward(&c.ad1_out, &mut d);
            let d = conv1x1_backward(&p.addon1, &c.p3_out, &d, addon1_w, addon1_b);
            let d = maxpool2_backward(&c.p3, &d);
            let mut d = maxpool2_backward(&c.p2, &d);
            relu_backward(&c.a2, &mut d);
            let d = conv_backward(&p.conv2, &c.c2, &d, conv2_w, conv2_b);
            let mut d = maxpool2_backward(&c.p1, &d);
            relu_backward(&c.a1, &mut d);
            let _ = conv_backward(&p.conv1, &c.c1, &d, conv1_w, conv1_b);
        }
        (
            EncoderParams::Resnet(p),
            EncoderCache::Resnet(c),
            EncoderGrads::Resnet {
                stem_w,
                stem_b,
                b1a_w,
                b1a_b,
                b1b_w,
                b1b_b,
                expand_w,
                expand_b,
                b2a_w,
                b2a_b,
                b2b_w,
                b2b_b,
                addon1_w,
                addon1_b,
                addon2_w,
                addon2_b,
            },
        ) => {
            let mut d = dgrid.clone();
            sigmoid_backward(&c.grid, &mut d);
            let mut d = conv1x1_backward(&p.addon2, &c.ad1_out, &d, addon2_w, addon2_b);
            relu_backward(&c.ad1_out, &mut d);
            let d = conv1x1_backward(&p.addon1, &c.pool2_out, &d, addon1_w, addon1_b);
            let d = maxpool2_backward(&c.pool2, &d);
            let mut d = resblock_backward(&p.block2, &c.b2, &d, b2a_w, b2a_b, b2b_w, b2b_b);
            relu_backward(&c.expand_out, &mut d);
            let d = conv1x1_backward(&p.expand, &c.pool1_out, &d, expand_w, expand_b);
            let d = maxpool2_backward(&c.pool1, &d);
            let d = resblock_backward(&p.block1, &c.b1, &d, b1a_w, b1a_b, b1b_w, b1b_b);
            let mut d = maxpool2_backward(&c.pool0, &d);
            relu_backward(&c.stem_a, &mut d);
            let _ = conv_backward(&p.stem, &c.stem_c, &d, stem_w, stem_b);
        }
        _ => unreachable!("encoder params, cache and grads variants must agree"),
    }
}
