//! Prototype similarity layer: squared L2 distances between each prototype
//! and every patch window, mapped through the log activation
//! `log((d^2+1)/(d^2+eps))` and reduced by global max pooling.

use ndarray::{Array1, Array2, Array3};

use super::types::{PatchGrid, PrototypeBank};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-4;

pub fn activation(d2: f64, epsilon: f64) -> f64 {
    ((d2 + 1.0) / (d2 + epsilon)).ln()
}

/// d(activation)/d(d^2).
pub fn activation_grad(d2: f64, epsilon: f64) -> f64 {
    1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon)
}

/// Per-instance output of the similarity layer. Vectors are indexed by the
/// full prototype list; inactive prototypes score 0 and carry empty maps.
#[derive(Debug, Clone)]
pub struct SimilarityResult {
    pub scores: Array1<f64>,
    /// Activation maps, (Hp-h+1) x (Wp-w+1) per active prototype.
    pub maps: Vec<Array2<f64>>,
    /// Squared-distance maps aligned with `maps` (kept for the cluster and
    /// separation losses, which min-pool the same distances).
    pub d2_maps: Vec<Array2<f64>>,
    /// Window with the minimal distance (= maximal score) per prototype.
    pub best_window: Vec<(usize, usize)>,
}

/// Squared L2 distance between `proto` and the grid window at (r0, c0),
/// via the expansion |z|^2 - 2<z,p> + |p|^2, clamped at 0.
fn window_d2(
    grid: &Array3<f64>,
    proto: &Array3<f64>,
    r0: usize,
    c0: usize,
    proto_sq: f64,
) -> f64 {
    let (d, h, w) = proto.dim();
    let mut z_sq = 0.0;
    let mut dot = 0.0;
    for ch in 0..d {
        for r in 0..h {
            for c in 0..w {
                let z = grid[[ch, r0 + r, c0 + c]];
                z_sq += z * z;
                dot += z * proto[[ch, r, c]];
            }
        }
    }
    (z_sq - 2.0 * dot + proto_sq).max(0.0)
}

pub fn prototype_similarities(
    grid: &PatchGrid,
    bank: &PrototypeBank,
    epsilon: f64,
) -> Result<SimilarityResult> {
    let (gd, gh, gw) = grid.values.dim();
    let m = bank.len();
    let mut scores = Array1::zeros(m);
    let mut maps = vec![Array2::zeros((0, 0)); m];
    let mut d2_maps = vec![Array2::zeros((0, 0)); m];
    let mut best_window = vec![(0usize, 0usize); m];
    for (j, proto) in bank.prototypes.iter().enumerate() {
        if !proto.active {
            continue;
        }
        let (pd, ph, pw) = proto.vector.dim();
        if pd != gd || ph > gh || pw > gw {
            return Err(Error::ShapeMismatch(format!(
                "prototype {} is {}x{}x{} but grid is {}x{}x{}",
                j, pd, ph, pw, gd, gh, gw
            )));
        }
        let (mh, mw) = (gh - ph + 1, gw - pw + 1);
        let proto_sq: f64 = proto.vector.iter().map(|v| v * v).sum();
        let mut d2_map = Array2::zeros((mh, mw));
        let mut map = Array2::zeros((mh, mw));
        let mut best = (0, 0);
        let mut best_d2 = f64::INFINITY;
        for r in 0..mh {
            for c in 0..mw {
                let d2 = window_d2(&grid.values, &proto.vector, r, c, proto_sq);
                d2_map[[r, c]] = d2;
                map[[r, c]] = activation(d2, epsilon);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = (r, c);
                }
            }
        }
        scores[j] = map[best];
        best_window[j] = best;
        maps[j] = map;
        d2_maps[j] = d2_map;
    }
    Ok(SimilarityResult {
        scores,
        maps,
        d2_maps,
        best_window,
    })
}

/// Backward through the max-pooled similarity scores. `dscores` is the
/// gradient w.r.t. the per-prototype pooled scores; gradients flow into the
/// grid and into each active prototype at its best window.
pub fn similarity_backward(
    grid: &PatchGrid,
    bank: &PrototypeBank,
    result: &SimilarityResult,
    epsilon: f64,
    dscores: &Array1<f64>,
    dgrid: &mut Array3<f64>,
    dprotos: &mut [Array3<f64>],
) {
    for (j, proto) in bank.prototypes.iter().enumerate() {
        if !proto.active || dscores[j] == 0.0 {
            continue;
        }
        let (r0, c0) = result.best_window[j];
        let d2 = result.d2_maps[j][[r0, c0]];
        let dd2 = dscores[j] * activation_grad(d2, epsilon);
        accumulate_window_d2_grad(grid, &proto.vector, r0, c0, dd2, dgrid, &mut dprotos[j]);
    }
}

/// Gradient of a single window's squared distance: d(d2)/dz = 2(z-p),
/// d(d2)/dp = 2(p-z), scaled by `dd2`.
pub fn accumulate_window_d2_grad(
    grid: &PatchGrid,
    proto: &Array3<f64>,
    r0: usize,
    c0: usize,
    dd2: f64,
    dgrid: &mut Array3<f64>,
    dproto: &mut Array3<f64>,
) {
    let (d, h, w) = proto.dim();
    for ch in 0..d {
        for r in 0..h {
            for c in 0..w {
                let z = grid.values[[ch, r0 + r, c0 + c]];
                let p = proto[[ch, r, c]];
                let g = 2.0 * (z - p) * dd2;
                dgrid[[ch, r0 + r, c0 + c]] += g;
                dproto[[ch, r, c]] -= g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::types::{Label, Prototype};
    use ndarray::{arr1, Array3};

    fn bank_of(vectors: Vec<Array3<f64>>, classes: Vec<Label>) -> PrototypeBank {
        let prototypes = vectors
            .into_iter()
            .zip(classes)
            .map(|(vector, class)| Prototype {
                vector,
                class,
                provenance: None,
                active: true,
            })
            .collect();
        PrototypeBank { prototypes }
    }

    #[test]
    fn identical_window_scores_minus_log_epsilon() {
        // patch window identical to the prototype: d2 = 0, score = -ln(eps)
        let grid = PatchGrid {
            values: Array3::from_shape_fn((2, 2, 2), |(d, r, c)| (d + r + c) as f64 * 0.1),
            instance_index: 0,
        };
        let bank = bank_of(
            vec![grid.values.clone(), Array3::zeros((2, 2, 2))],
            vec![Label::Positive, Label::Negative],
        );
        let res = prototype_similarities(&grid, &bank, 1e-4).unwrap();
        let expect = -(1e-4f64).ln();
        assert!((res.scores[0] - expect).abs() < 1e-9);
        assert!((expect - 9.2103).abs() < 1e-4);
    }

    #[test]
    fn distant_prototype_scores_near_zero() {
        let grid = PatchGrid {
            values: Array3::zeros((1, 1, 1)),
            instance_index: 0,
        };
        let far = Array3::from_elem((1, 1, 1), 1e6);
        let bank = bank_of(
            vec![far, Array3::zeros((1, 1, 1))],
            vec![Label::Positive, Label::Negative],
        );
        let res = prototype_similarities(&grid, &bank, 1e-4).unwrap();
        assert!(res.scores[0] > 0.0);
        assert!(res.scores[0] < 1e-9);
    }

    #[test]
    fn max_pool_picks_smallest_distance_window() {
        // 1x2x2 grid, 1x1x1 prototype: hand-set distances 1.0, 0.5, 2.0, 0.3
        // around prototype value 0 -> expect score log((0.09+1)/(0.09+eps))
        let grid = PatchGrid {
            values: Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.5, 2.0, 0.3]).unwrap(),
            instance_index: 0,
        };
        let bank = bank_of(
            vec![Array3::zeros((1, 1, 1)), Array3::zeros((1, 1, 1))],
            vec![Label::Positive, Label::Negative],
        );
        let eps = 1e-4;
        let res = prototype_similarities(&grid, &bank, eps).unwrap();
        // brute-force oracle over every window
        let oracle = [1.0f64, 0.5, 2.0, 0.3]
            .iter()
            .map(|d| activation(d * d, eps))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.scores[0], oracle);
        assert!((res.scores[0] - ((0.09 + 1.0) / (0.09 + eps)).ln()).abs() < 1e-12);
        assert_eq!(res.best_window[0], (1, 1));
        assert_eq!(res.maps[0].dim(), (2, 2));
    }

    #[test]
    fn inactive_prototypes_score_zero_with_empty_maps() {
        let grid = PatchGrid {
            values: Array3::from_elem((1, 2, 2), 0.5),
            instance_index: 0,
        };
        let mut bank = bank_of(
            vec![
                Array3::zeros((1, 1, 1)),
                Array3::zeros((1, 1, 1)),
                Array3::from_elem((1, 1, 1), 1.0),
            ],
            vec![Label::Positive, Label::Negative, Label::Positive],
        );
        bank.prototypes[2].active = false;
        let res = prototype_similarities(&grid, &bank, 1e-4).unwrap();
        assert_eq!(res.scores[2], 0.0);
        assert_eq!(res.maps[2].len(), 0);
        assert!(res.scores[0] > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let grid = PatchGrid {
            values: Array3::zeros((2, 2, 2)),
            instance_index: 0,
        };
        let bank = bank_of(
            vec![Array3::zeros((3, 1, 1)), Array3::zeros((3, 1, 1))],
            vec![Label::Positive, Label::Negative],
        );
        assert!(prototype_similarities(&grid, &bank, 1e-4).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut grid = PatchGrid {
            values: Array3::from_shape_vec(
                (2, 2, 2),
                vec![0.1, 0.9, 0.4, 0.3, 0.7, 0.2, 0.8, 0.6],
            )
            .unwrap(),
            instance_index: 0,
        };
        let bank = bank_of(
            vec![
                Array3::from_shape_vec((2, 1, 1), vec![0.5, 0.1]).unwrap(),
                Array3::from_shape_vec((2, 1, 1), vec![0.3, 0.85]).unwrap(),
            ],
            vec![Label::Positive, Label::Negative],
        );
        let eps = 1e-4;
        let res = prototype_similarities(&grid, &bank, eps).unwrap();
        let dscores = arr1(&[1.0, -0.5]);
        let mut dgrid = Array3::zeros(grid.values.dim());
        let mut dprotos = vec![Array3::zeros((2, 1, 1)), Array3::zeros((2, 1, 1))];
        similarity_backward(&grid, &bank, &res, eps, &dscores, &mut dgrid, &mut dprotos);

        let h = 1e-6;
        let objective = |g: &PatchGrid, b: &PrototypeBank| {
            let r = prototype_similarities(g, b, eps).unwrap();
            r.scores[0] - 0.5 * r.scores[1]
        };
        for idx in [(0, 0, 0), (1, 1, 1)] {
            let orig = grid.values[idx];
            grid.values[idx] = orig + h;
            let lp = objective(&grid, &bank);
            grid.values[idx] = orig - h;
            let lm = objective(&grid, &bank);
            grid.values[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - dgrid[idx]).abs() / fd.abs().max(1e-8) < 1e-4,
                "grid fd {fd} vs analytic {}",
                dgrid[idx]
            );
        }
        let mut bank2 = bank.clone();
        let orig = bank2.prototypes[0].vector[[0, 0, 0]];
        bank2.prototypes[0].vector[[0, 0, 0]] = orig + h;
        let lp = objective(&grid, &bank2);
        bank2.prototypes[0].vector[[0, 0, 0]] = orig - h;
        let lm = objective(&grid, &bank2);
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - dprotos[0][[0, 0, 0]]).abs() / fd.abs().max(1e-8) < 1e-4);
    }
}
