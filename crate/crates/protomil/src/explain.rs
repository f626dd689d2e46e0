//! Explanation artifacts: per-bag similarity matrices over the most-attended
//! instances, heatmap rendering with a fixed in-repo colormap, and the
//! activation-crop rule for prototype self-visualization.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::types::{BagForwardTrace, InstanceData, Label, Provenance};
use crate::mil::{Bag, Model};
use crate::proto_ops::CensusEntry;

pub const EXPLANATION_VERSION: u32 = 1;

/// 16-anchor viridis-style lookup table; linear interpolation in between.
/// Shipped in-repo so renders are bit-exact across environments.
const COLORMAP: [[u8; 3]; 16] = [
    [68, 1, 84],
    [72, 26, 108],
    [71, 47, 125],
    [65, 68, 135],
    [57, 86, 140],
    [49, 104, 142],
    [42, 120, 142],
    [35, 136, 142],
    [31, 152, 139],
    [34, 168, 132],
    [53, 183, 121],
    [84, 197, 104],
    [122, 209, 81],
    [165, 219, 54],
    [210, 226, 27],
    [253, 231, 37],
];

/// Map a value in [0, 1] to an RGB color.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 15.0;
    let lo = v.floor() as usize;
    let hi = (lo + 1).min(15);
    let t = v - lo as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let a = COLORMAP[lo][ch] as f64;
        let b = COLORMAP[hi][ch] as f64;
        out[ch] = (a + t * (b - a)).round() as u8;
    }
    out
}

/// Bilinear upsampling of a small map to (out_h, out_w).
pub fn bilinear_upsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (mh, mw) = map.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        for c in 0..out_w {
            let sy = ((r as f64 + 0.5) * mh as f64 / out_h as f64 - 0.5)
                .clamp(0.0, (mh - 1) as f64);
            let sx = ((c as f64 + 0.5) * mw as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (mw - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(mh - 1), (x0 + 1).min(mw - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            out[[r, c]] = map[[y0, x0]] * (1.0 - ty) * (1.0 - tx)
                + map[[y0, x1]] * (1.0 - ty) * tx
                + map[[y1, x0]] * ty * (1.0 - tx)
                + map[[y1, x1]] * ty * tx;
        }
    }
    out
}

/// Bounding box (row0, row1, col0, col1), inclusive, of the region where the
/// map exceeds its 95th percentile. Used to crop prototype source regions.
pub fn activation_crop_bounds(map: &Array2<f64>) -> (usize, usize, usize, usize) {
    let mut sorted: Vec<f64> = map.iter().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() as f64 - 1.0) * 0.95).floor() as usize;
    let threshold = sorted[idx];
    let (h, w) = map.dim();
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for ((r, c), &v) in map.indexed_iter() {
        if v >= threshold {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    (r0, r1, c0, c1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestPatchRef {
    pub provenance: Provenance,
    pub bag_label: u8,
    pub d2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRow {
    pub prototype_index: usize,
    pub class: u8,
    /// Up to three nearest training patches from the census.
    pub nearest_patches: Vec<NearestPatchRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceColumn {
    pub instance_index: usize,
    pub attention_weight: f64,
    /// Grayscale pixels (rows of columns) when the bag is pixel-modality.
    pub image: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationCell {
    pub score: f64,
    /// Prototype activation over the instance's patch windows.
    pub activation_map: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMatrix {
    pub format_version: u32,
    pub bag_id: String,
    pub bag_label: u8,
    /// Columns ordered by descending attention weight.
    pub columns: Vec<InstanceColumn>,
    /// Rows: all active prototypes, negative class first, then positive.
    pub rows: Vec<PrototypeRow>,
    /// cells[row][column].
    pub cells: Vec<Vec<ExplanationCell>>,
}

fn map_to_vecs(map: &Array2<f64>) -> Vec<Vec<f64>> {
    map.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Assemble the explanation matrix for one bag: the `top_n` most-attended
/// instances against every active prototype. Every number is copied from the
/// forward trace or the census; nothing is recomputed.
pub fn build_explanation(
    trace: &BagForwardTrace,
    bag: &Bag,
    model: &Model,
    census: &[CensusEntry],
    top_n: usize,
) -> Result<ExplanationMatrix> {
    if trace.similarity_vectors.len() != bag.instances.len() {
        return Err(Error::ShapeMismatch(
            "trace does not match bag instance count".into(),
        ));
    }
    let n = top_n.max(1).min(bag.instances.len());
    let mut order: Vec<usize> = (0..bag.instances.len()).collect();
    order.sort_by(|&a, &b| {
        trace.attention_weights[b]
            .total_cmp(&trace.attention_weights[a])
            .then(a.cmp(&b))
    });
    order.truncate(n);

    let columns = order
        .iter()
        .map(|&i| InstanceColumn {
            instance_index: i,
            attention_weight: trace.attention_weights[i],
            image: match &bag.instances[i].data {
                InstanceData::Pixels(px) => {
                    let (_, h, w) = px.dim();
                    Some(
                        (0..h)
                            .map(|r| (0..w).map(|c| px[[0, r, c]]).collect())
                            .collect(),
                    )
                }
                InstanceData::Embedding(_) => None,
            },
        })
        .collect();

    let mut proto_order: Vec<usize> = model.bank.active_indices();
    proto_order.sort_by_key(|&j| (model.bank.prototypes[j].class.index(), j));
    let rows = proto_order
        .iter()
        .map(|&j| {
            let entry = census
                .iter()
                .find(|e| e.prototype_index == j)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("census has no entry for prototype {j}"))
                })?;
            Ok(PrototypeRow {
                prototype_index: j,
                class: model.bank.prototypes[j].class.index() as u8,
                nearest_patches: entry
                    .neighbors
                    .iter()
                    .take(3)
                    .map(|nb| NearestPatchRef {
                        provenance: nb.provenance.clone(),
                        bag_label: nb.bag_label,
                        d2: nb.d2,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cells = proto_order
        .iter()
        .map(|&j| {
            order
                .iter()
                .map(|&i| ExplanationCell {
                    score: trace.similarity_vectors[i][j],
                    activation_map: map_to_vecs(&trace.activation_maps[i][j]),
                })
                .collect()
        })
        .collect();

    Ok(ExplanationMatrix {
        format_version: EXPLANATION_VERSION,
        bag_id: bag.id.clone(),
        bag_label: bag.label.index() as u8,
        columns,
        rows,
        cells,
    })
}

fn blend_cell(image: &Array2<f64>, map: &Array2<f64>, alpha: f64) -> Vec<[u8; 3]> {
    let (h, w) = image.dim();
    let heat = bilinear_upsample(map, h, w);
    // Normalize the heatmap over this cell; a flat map renders as zero heat.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &heat {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gray = image[[r, c]].clamp(0.0, 1.0) * 255.0;
            let color = colormap((heat[[r, c]] - lo) / span);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                px[ch] = ((1.0 - alpha) * gray + alpha * color[ch] as f64).round() as u8;
            }
            out.push(px);
        }
    }
    out
}

const CELL_PAD: usize = 2;
const HEAT_ALPHA: f64 = 0.45;

/// Render the composite raster (rows = prototypes, columns = instances) plus
/// a machine-readable JSON twin. Returns the two file paths.
pub fn render_explanation(
    matrix: &ExplanationMatrix,
    out_dir: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join(format!("explanation-{}.json", matrix.bag_id));
    let json = serde_json::to_string_pretty(matrix)
        .map_err(|e| Error::Schema(format!("explanation serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let first_image = matrix
        .columns
        .first()
        .and_then(|c| c.image.as_ref())
        .ok_or_else(|| {
            Error::InvalidInput(
                "rendering requires pixel-modality instances (JSON twin was written)".into(),
            )
        })?;
    let (ih, iw) = (first_image.len(), first_image[0].len());
    let (nrows, ncols) = (matrix.rows.len(), matrix.columns.len());
    let width = ncols * iw + (ncols + 1) * CELL_PAD;
    let height = nrows * ih + (nrows + 1) * CELL_PAD;
    let mut canvas = vec![255u8; width * height * 3];

    for (ri, _row) in matrix.rows.iter().enumerate() {
        for (ci, col) in matrix.columns.iter().enumerate() {
            let image_vec = col.image.as_ref().ok_or_else(|| {
                Error::InvalidInput("mixed pixel/embedding columns".into())
            })?;
            let image = Array2::from_shape_fn((ih, iw), |(r, c)| image_vec[r][c]);
            let cell = &matrix.cells[ri][ci];
            let mh = cell.activation_map.len();
            let mw = cell.activation_map.first().map_or(0, |r| r.len());
            if mh == 0 || mw == 0 {
                continue;
            }
            let map = Array2::from_shape_fn((mh, mw), |(r, c)| cell.activation_map[r][c]);
            let pixels = blend_cell(&image, &map, HEAT_ALPHA);
            let y0 = CELL_PAD + ri * (ih + CELL_PAD);
            let x0 = CELL_PAD + ci * (iw + CELL_PAD);
            for r in 0..ih {
                for c in 0..iw {
                    let dst = ((y0 + r) * width + x0 + c) * 3;
                    canvas[dst..dst + 3].copy_from_slice(&pixels[r * iw + c]);
                }
            }
        }
    }

    let png_path = out_dir.join(format!("explanation-{}.png", matrix.bag_id));
    let file = File::create(&png_path).map_err(|e| Error::io(&png_path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Schema(format!("png header: {e}")))?;
    writer
        .write_image_data(&canvas)
        .map_err(|e| Error::Schema(format!("png payload: {e}")))?;
    Ok((png_path, json_path))
}

/// Crop a source image around the activation region above the map's 95th
/// percentile (upsampled to image resolution first).
pub fn prototype_crop(image: &Array2<f64>, map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    let heat = bilinear_upsample(map, h, w);
    let (r0, r1, c0, c1) = activation_crop_bounds(&heat);
    image
        .slice(ndarray::s![r0..=r1, c0..=c1])
        .to_owned()
}

/// Convenience label accessor for report text.
pub fn class_name(label: Label) -> &'static str {
    match label {
        Label::Negative => "negative",
        Label::Positive => "positive",
    }
}
