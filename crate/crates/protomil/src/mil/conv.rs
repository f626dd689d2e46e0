//! Convolution, pooling and activation primitives with explicit backward
//! passes. Convolutions are valid (no padding), stride 1, lowered to GEMM
//! through im2col.

use ndarray::{Array1, Array2, Array3};

/// Weights of one conv layer, flattened to (out_channels, in_channels*k*k).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }
}

pub fn im2col(input: &Array3<f64>, kernel: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let oh = h - kernel + 1;
    let ow = w - kernel + 1;
    let mut cols = Array2::zeros((c * kernel * kernel, oh * ow));
    let in_slice = input.as_slice().expect("contiguous input");
    for ch in 0..c {
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = (ch * kernel + kr) * kernel + kc;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous row");
                for r in 0..oh {
                    let src = ch * h * w + (r + kr) * w + kc;
                    out_slice[r * ow..(r + 1) * ow]
                        .copy_from_slice(&in_slice[src..src + ow]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, c: usize, h: usize, w: usize, kernel: usize) -> Array3<f64> {
    let oh = h - kernel + 1;
    let ow = w - kernel + 1;
    let mut dinput = Array3::zeros((c, h, w));
    let din = dinput.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = (ch * kernel + kr) * kernel + kc;
                let drow = dcols.row(row);
                let drow = drow.as_slice().expect("contiguous row");
                for r in 0..oh {
                    let dst = ch * h * w + (r + kr) * w + kc;
                    for cix in 0..ow {
                        din[dst + cix] += drow[r * ow + cix];
                    }
                }
            }
        }
    }
    dinput
}

pub struct ConvCache {
    pub cols: Array2<f64>,
    pub in_shape: (usize, usize, usize),
}

pub fn conv_forward(layer: &ConvLayer, input: &Array3<f64>) -> (Array3<f64>, ConvCache) {
    let (c, h, w) = input.dim();
    debug_assert_eq!(c, layer.in_channels);
    let k = layer.kernel;
    let oh = h - k + 1;
    let ow = w - k + 1;
    let cols = im2col(input, k);
    let mut out = layer.weight.dot(&cols); // (O, oh*ow)
    for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
        row += b;
    }
    let out3 = out
        .into_shape_with_order((layer.out_channels(), oh, ow))
        .expect("conv output reshape");
    (
        out3,
        ConvCache {
            cols,
            in_shape: (c, h, w),
        },
    )
}

/// Returns the gradient w.r.t. the layer input; accumulates into dweight
/// and dbias.
pub fn conv_backward(
    layer: &ConvLayer,
    cache: &ConvCache,
    dout: &Array3<f64>,
    dweight: &mut Array2<f64>,
    dbias: &mut Array1<f64>,
) -> Array3<f64> {
    let (o, oh, ow) = dout.dim();
    let dout2 = dout
        .view()
        .into_shape_with_order((o, oh * ow))
        .expect("dout reshape");
    *dweight += &dout2.dot(&cache.cols.t());
    for (db, row) in dbias.iter_mut().zip(dout2.rows()) {
        *db += row.sum();
    }
    let dcols = layer.weight.t().dot(&dout2);
    let (c, h, w) = cache.in_shape;
    col2im(&dcols, c, h, w, layer.kernel)
}

/// 1x1 convolution: a per-pixel linear map (O x C) over a (C, H, W) grid.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn conv1x1_forward(layer: &Conv1x1, input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let flat = input
        .view()
        .into_shape_with_order((c, h * w))
        .expect("1x1 reshape");
    let mut out = layer.weight.dot(&flat);
    for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
        row += b;
    }
    out.into_shape_with_order((layer.weight.dim().0, h, w))
        .expect("1x1 out reshape")
}

pub fn conv1x1_backward(
    layer: &Conv1x1,
    input: &Array3<f64>,
    dout: &Array3<f64>,
    dweight: &mut Array2<f64>,
    dbias: &mut Array1<f64>,
) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (o, _, _) = dout.dim();
    let flat_in = input
        .view()
        .into_shape_with_order((c, h * w))
        .expect("reshape");
    let flat_dout = dout
        .view()
        .into_shape_with_order((o, h * w))
        .expect("reshape");
    *dweight += &flat_dout.dot(&flat_in.t());
    for (db, row) in dbias.iter_mut().zip(flat_dout.rows()) {
        *db += row.sum();
    }
    layer
        .weight
        .t()
        .dot(&flat_dout)
        .into_shape_with_order((c, h, w))
        .expect("reshape")
}

pub struct PoolCache {
    pub argmax: Vec<usize>,
    pub in_shape: (usize, usize, usize),
}

/// 2x2 max pooling, stride 2; trailing odd rows/cols are dropped.
pub fn maxpool2_forward(input: &Array3<f64>) -> (Array3<f64>, PoolCache) {
    let (c, h, w) = input.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = vec![0usize; c * oh * ow];
    let inp = input.as_slice().expect("contiguous");
    for ch in 0..c {
        for r in 0..oh {
            for cx in 0..ow {
                let base = ch * h * w + 2 * r * w + 2 * cx;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if inp[i] > inp[best] {
                        best = i;
                    }
                }
                out[[ch, r, cx]] = inp[best];
                argmax[(ch * oh + r) * ow + cx] = best;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: (c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, dout: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = cache.in_shape;
    let mut dinput = Array3::zeros((c, h, w));
    let din = dinput.as_slice_mut().expect("contiguous");
    for (&idx, &g) in cache.argmax.iter().zip(dout.iter()) {
        din[idx] += g;
    }
    dinput
}

pub fn relu_forward(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// dx = dout where the forward output was > 0.
pub fn relu_backward(out: &Array3<f64>, dout: &mut Array3<f64>) {
    ndarray::Zip::from(dout).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid_forward(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

pub fn sigmoid_backward(out: &Array3<f64>, dout: &mut Array3<f64>) {
    ndarray::Zip::from(dout).and(out).for_each(|d, &o| {
        *d *= o * (1.0 - o);
    });
}
