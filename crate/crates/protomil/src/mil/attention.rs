//! Gated attention pooling: a_i = softmax_i( w^T (tanh(V h_i) * sigm(U h_i)) ),
//! h_bag = sum_i a_i h_i.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::types::AttentionParams;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 128;

impl AttentionParams {
    /// Xavier-style uniform init in [-1/sqrt(M), 1/sqrt(M)].
    pub fn init(hidden_dim: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = 1.0 / (input_dim as f64).sqrt();
        let wlimit = 1.0 / (hidden_dim as f64).sqrt();
        AttentionParams {
            w: Array1::from_shape_fn(hidden_dim, |_| rng.random_range(-wlimit..wlimit)),
            v: Array2::from_shape_fn((hidden_dim, input_dim), |_| {
                rng.random_range(-limit..limit)
            }),
            u: Array2::from_shape_fn((hidden_dim, input_dim), |_| {
                rng.random_range(-limit..limit)
            }),
        }
    }
}

pub struct AttentionCache {
    /// tanh(V h_i) per instance.
    pub tanh_out: Vec<Array1<f64>>,
    /// sigm(U h_i) per instance.
    pub sigm_out: Vec<Array1<f64>>,
    pub weights: Array1<f64>,
}

/// Returns (h_bag, attention weights, cache).
pub fn attention_pool(
    h: &[Array1<f64>],
    params: &AttentionParams,
) -> Result<(Array1<f64>, Array1<f64>, AttentionCache)> {
    if h.is_empty() {
        return Err(Error::InvalidInput(
            "attention pooling needs a nonempty bag".into(),
        ));
    }
    let m = params.input_dim();
    for (i, hi) in h.iter().enumerate() {
        if hi.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "similarity vector {} has length {}, attention expects {}",
                i,
                hi.len(),
                m
            )));
        }
    }
    let k = h.len();
    let mut tanh_out = Vec::with_capacity(k);
    let mut sigm_out = Vec::with_capacity(k);
    let mut scores = Array1::zeros(k);
    for (i, hi) in h.iter().enumerate() {
        let t = params.v.dot(hi).mapv(f64::tanh);
        let s = params.u.dot(hi).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        scores[i] = params.w.iter().zip(t.iter().zip(s.iter())).map(|(w, (t, s))| w * t * s).sum();
        tanh_out.push(t);
        sigm_out.push(s);
    }
    // stable softmax over instances
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|x| (x - max).exp());
    let weights = &exp / exp.sum();
    let mut h_bag = Array1::zeros(m);
    for (i, hi) in h.iter().enumerate() {
        h_bag.scaled_add(weights[i], hi);
    }
    let cache = AttentionCache {
        tanh_out,
        sigm_out,
        weights: weights.clone(),
    };
    Ok((h_bag, weights, cache))
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
}

impl AttentionGrads {
    pub fn zeros_like(params: &AttentionParams) -> Self {
        AttentionGrads {
            w: Array1::zeros(params.w.len()),
            v: Array2::zeros(params.v.dim()),
            u: Array2::zeros(params.u.dim()),
        }
    }
}

/// Backward through pooling. `dh_bag` is the gradient w.r.t. the bag
/// vector; `dweights_direct` carries any gradient reaching the attention
/// weights from elsewhere (the attention-weighted losses). Returns dL/dh_i
/// and accumulates parameter gradients.
pub fn attention_backward(
    h: &[Array1<f64>],
    params: &AttentionParams,
    cache: &AttentionCache,
    dh_bag: &Array1<f64>,
    dweights_direct: Option<&Array1<f64>>,
    grads: &mut AttentionGrads,
) -> Vec<Array1<f64>> {
    let k = h.len();
    let a = &cache.weights;
    // dL/da_i from h_bag = sum a_i h_i, plus any direct contribution
    let mut da = Array1::zeros(k);
    for i in 0..k {
        da[i] = dh_bag.dot(&h[i]);
    }
    if let Some(direct) = dweights_direct {
        da += direct;
    }
    // softmax backward: ds_i = a_i (da_i - sum_j a_j da_j)
    let inner: f64 = a.iter().zip(da.iter()).map(|(a, d)| a * d).sum();
    let dscore = Array1::from_shape_fn(k, |i| a[i] * (da[i] - inner));

    let mut dh = vec![Array1::zeros(h[0].len()); k];
    for i in 0..k {
        // h_bag path
        dh[i].scaled_add(a[i], dh_bag);
        if dscore[i] == 0.0 {
            continue;
        }
        let t = &cache.tanh_out[i];
        let s = &cache.sigm_out[i];
        // score_i = w . (t * s)
        let gate = t * s;
        grads.w.scaled_add(dscore[i], &gate);
        let dgate = params.w.mapv(|w| w * dscore[i]);
        let dpre_v = &dgate * s * &t.mapv(|t| 1.0 - t * t);
        let dpre_u = &dgate * t * &s.mapv(|s| s * (1.0 - s));
        // outer products into V, U; chain into h_i
        for (l, (&dv, &du)) in dpre_v.iter().zip(dpre_u.iter()).enumerate() {
            if dv != 0.0 {
                grads.v.row_mut(l).scaled_add(dv, &h[i]);
            }
            if du != 0.0 {
                grads.u.row_mut(l).scaled_add(du, &h[i]);
            }
        }
        dh[i] += &params.v.t().dot(&dpre_v);
        dh[i] += &params.u.t().dot(&dpre_u);
    }
    dh
}
