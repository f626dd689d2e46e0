//! Flat views over the model's trainable tensors, grouped by the training
//! phases that freeze or update them together.

use crate::mil::encoder::{EncoderGrads, EncoderParams};
use crate::mil::{Model, ModelGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Prototypes,
    Attention,
    Head,
}

pub const ALL_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Encoder,
    ParamGroup::Prototypes,
    ParamGroup::Attention,
    ParamGroup::Head,
];

fn encoder_slices_mut(p: &mut EncoderParams) -> Vec<&mut [f64]> {
    match p {
        EncoderParams::SmallConv(p) => vec![
            p.conv1.weight.as_slice_mut().unwrap(),
            p.conv1.bias.as_slice_mut().unwrap(),
            p.conv2.weight.as_slice_mut().unwrap(),
            p.conv2.bias.as_slice_mut().unwrap(),
            p.addon1.weight.as_slice_mut().unwrap(),
            p.addon1.bias.as_slice_mut().unwrap(),
            p.addon2.weight.as_slice_mut().unwrap(),
            p.addon2.bias.as_slice_mut().unwrap(),
        ],
        EncoderParams::Resnet(p) => vec![
            p.stem.weight.as_slice_mut().unwrap(),
            p.stem.bias.as_slice_mut().unwrap(),
            p.block1.conv_a.weight.as_slice_mut().unwrap(),
            p.block1.conv_a.bias.as_slice_mut().unwrap(),
            p.block1.conv_b.weight.as_slice_mut().unwrap(),
            p.block1.conv_b.bias.as_slice_mut().unwrap(),
            p.expand.weight.as_slice_mut().unwrap(),
            p.expand.bias.as_slice_mut().unwrap(),
            p.block2.conv_a.weight.as_slice_mut().unwrap(),
            p.block2.conv_a.bias.as_slice_mut().unwrap(),
            p.block2.conv_b.weight.as_slice_mut().unwrap(),
            p.block2.conv_b.bias.as_slice_mut().unwrap(),
            p.addon1.weight.as_slice_mut().unwrap(),
            p.addon1.bias.as_slice_mut().unwrap(),
            p.addon2.weight.as_slice_mut().unwrap(),
            p.addon2.bias.as_slice_mut().unwrap(),
        ],
        EncoderParams::Identity { .. } => vec![],
    }
}

fn encoder_grad_slices(g: &EncoderGrads) -> Vec<&[f64]> {
    match g {
        EncoderGrads::SmallConv {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            addon1_w,
            addon1_b,
            addon2_w,
            addon2_b,
        } => vec![
            conv1_w.as_slice().unwrap(),
            conv1_b.as_slice().unwrap(),
            conv2_w.as_slice().unwrap(),
            conv2_b.as_slice().unwrap(),
            addon1_w.as_slice().unwrap(),
            addon1_b.as_slice().unwrap(),
            addon2_w.as_slice().unwrap(),
            addon2_b.as_slice().unwrap(),
        ],
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
        } => vec![
            stem_w.as_slice().unwrap(),
            stem_b.as_slice().unwrap(),
            b1a_w.as_slice().unwrap(),
            b1a_b.as_slice().unwrap(),
            b1b_w.as_slice().unwrap(),
            b1b_b.as_slice().unwrap(),
            expand_w.as_slice().unwrap(),
            expand_b.as_slice().unwrap(),
            b2a_w.as_slice().unwrap(),
            b2a_b.as_slice().unwrap(),
            b2b_w.as_slice().unwrap(),
            b2b_b.as_slice().unwrap(),
            addon1_w.as_slice().unwrap(),
            addon1_b.as_slice().unwrap(),
            addon2_w.as_slice().unwrap(),
            addon2_b.as_slice().unwrap(),
        ],
        EncoderGrads::Identity => vec![],
    }
}

/// Mutable slices of one parameter group, in a fixed deterministic order.
/// Only active prototypes are exposed: inactive ones never move.
pub fn param_slices_mut(model: &mut Model, group: ParamGroup) -> Vec<&mut [f64]> {
    match group {
        ParamGroup::Encoder => encoder_slices_mut(&mut model.encoder),
        ParamGroup::Prototypes => model
            .bank
            .prototypes
            .iter_mut()
            .filter(|p| p.active)
            .map(|p| p.vector.as_slice_mut().unwrap())
            .collect(),
        ParamGroup::Attention => vec![
            model.attention.w.as_slice_mut().unwrap(),
            model.attention.v.as_slice_mut().unwrap(),
            model.attention.u.as_slice_mut().unwrap(),
        ],
        ParamGroup::Head => vec![model.head.weights.as_slice_mut().unwrap()],
    }
}

/// Gradient slices aligned with [`param_slices_mut`]. The `model` supplies
/// the activity mask so both sides stay in lockstep.
pub fn grad_slices<'a>(model: &Model, grads: &'a ModelGrads, group: ParamGroup) -> Vec<&'a [f64]> {
    match group {
        ParamGroup::Encoder => encoder_grad_slices(&grads.encoder),
        ParamGroup::Prototypes => grads
            .prototypes
            .iter()
            .zip(model.bank.prototypes.iter())
            .filter(|(_, p)| p.active)
            .map(|(g, _)| g.as_slice().unwrap())
            .collect(),
        ParamGroup::Attention => vec![
            grads.attention.w.as_slice().unwrap(),
            grads.attention.v.as_slice().unwrap(),
            grads.attention.u.as_slice().unwrap(),
        ],
        ParamGroup::Head => vec![grads.head.as_slice().unwrap()],
    }
}

pub fn group_numel(model: &Model, group: ParamGroup) -> usize {
    match group {
        ParamGroup::Encoder => match &model.encoder {
            EncoderParams::SmallConv(p) => {
                p.conv1.weight.len()
                    + p.conv1.bias.len()
                    + p.conv2.weight.len()
                    + p.conv2.bias.len()
                    + p.addon1.weight.len()
                    + p.addon1.bias.len()
                    + p.addon2.weight.len()
                    + p.addon2.bias.len()
            }
            EncoderParams::Resnet(p) => {
                p.stem.weight.len()
                    + p.stem.bias.len()
                    + p.block1.conv_a.weight.len()
                    + p.block1.conv_a.bias.len()
                    + p.block1.conv_b.weight.len()
                    + p.block1.conv_b.bias.len()
                    + p.expand.weight.len()
                    + p.expand.bias.len()
                    + p.block2.conv_a.weight.len()
                    + p.block2.conv_a.bias.len()
                    + p.block2.conv_b.weight.len()
                    + p.block2.conv_b.bias.len()
                    + p.addon1.weight.len()
                    + p.addon1.bias.len()
                    + p.addon2.weight.len()
                    + p.addon2.bias.len()
            }
            EncoderParams::Identity { .. } => 0,
        },
        ParamGroup::Prototypes => model
            .bank
            .prototypes
            .iter()
            .filter(|p| p.active)
            .map(|p| p.vector.len())
            .sum(),
        ParamGroup::Attention => {
            model.attention.w.len() + model.attention.v.len() + model.attention.u.len()
        }
        ParamGroup::Head => model.head.weights.len(),
    }
}
