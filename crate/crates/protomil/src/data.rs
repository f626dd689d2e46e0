//! Dataset plumbing: MNIST-style IDX ingestion, a deterministic synthetic
//! digit corpus for self-contained runs, MNIST-Bags generation, bag-dataset
//! manifests (pixels or embeddings), and stratified cross-validation splits.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::types::{Bag, Instance, InstanceData, Label};
use crate::tensorio;

pub const MANIFEST_VERSION: u32 = 1;
pub const IMAGE_SIDE: usize = 28;

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl std::io::Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Read an IDX image file (u8 pixels) into per-image byte planes.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<u8>>, usize, usize)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Schema(format!(
            "{}: bad IDX image magic {magic:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let rows = read_u32_be(&mut r, path)? as usize;
    let cols = read_u32_be(&mut r, path)? as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf = vec![0u8; rows * cols];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        images.push(buf);
    }
    Ok((images, rows, cols))
}

/// Read an IDX label file (one u8 per image).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Schema(format!(
            "{}: bad IDX label magic {magic:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|e| Error::io(path, e))?;
    Ok(labels)
}

pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let hdr = [
        IDX_IMAGES_MAGIC.to_be_bytes(),
        (images.len() as u32).to_be_bytes(),
        (rows as u32).to_be_bytes(),
        (cols as u32).to_be_bytes(),
    ]
    .concat();
    w.write_all(&hdr).map_err(|e| Error::io(path, e))?;
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "image has {} bytes, expected {}",
                img.len(),
                rows * cols
            )));
        }
        w.write_all(img).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let hdr = [
        IDX_LABELS_MAGIC.to_be_bytes(),
        (labels.len() as u32).to_be_bytes(),
    ]
    .concat();
    w.write_all(&hdr).map_err(|e| Error::io(path, e))?;
    w.write_all(labels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Digit image pool
// ---------------------------------------------------------------------------

/// A labeled pool of grayscale digit images, pixels scaled to [0, 1].
///
/// Pixel values pass through f32 so that the raw-tensor manifest format
/// round-trips bit-exactly.
pub struct DigitPool {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<u8>,
}

const IMAGE_FILE_NAMES: [&str; 2] = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"];
const LABEL_FILE_NAMES: [&str; 2] = ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"];

fn find_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    for n in names {
        let p = dir.join(n);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::MissingFile(dir.join(names[0])))
}

impl DigitPool {
    /// Load from a directory containing standard IDX train files.
    pub fn load(source: &Path) -> Result<Self> {
        let img_path = find_existing(source, &IMAGE_FILE_NAMES)?;
        let lbl_path = find_existing(source, &LABEL_FILE_NAMES)?;
        let (raw, rows, cols) = read_idx_images(&img_path)?;
        let labels = read_idx_labels(&lbl_path)?;
        if raw.len() != labels.len() {
            return Err(Error::Schema(format!(
                "{} images vs {} labels",
                raw.len(),
                labels.len()
            )));
        }
        let images = raw
            .into_iter()
            .map(|bytes| {
                Array3::from_shape_vec(
                    (1, rows, cols),
                    bytes
                        .iter()
                        .map(|&b| (b as f32 / 255.0) as f64)
                        .collect(),
                )
                .expect("shape consistent by construction")
            })
            .collect();
        Ok(Self { images, labels })
    }
}

// ---------------------------------------------------------------------------
// Synthetic digit corpus
// ---------------------------------------------------------------------------

/// Seven-segment endpoints in glyph coordinates (x right, y down, unit box).
const SEG_PTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.25, 0.18), (0.75, 0.18)), // A top
    ((0.75, 0.18), (0.75, 0.50)), // B upper right
    ((0.75, 0.50), (0.75, 0.82)), // C lower right
    ((0.25, 0.82), (0.75, 0.82)), // D bottom
    ((0.25, 0.50), (0.25, 0.82)), // E lower left
    ((0.25, 0.18), (0.25, 0.50)), // F upper left
    ((0.25, 0.50), (0.75, 0.50)), // G middle
];

/// Active segments per digit (classic seven-segment encoding).
const DIGIT_SEGS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 2, 3, 4],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn point_segment_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// Render one jittered stroke digit as a 28×28 grayscale byte plane.
///
/// Each render draws an independent handwriting style — slant, anisotropic
/// scale, stroke width, per-segment endpoint wobble and ink intensity, plus
/// pixel-level grain — so no two images of the same digit are near-duplicates
/// and the corpus spans a broad appearance manifold per class.
pub fn render_digit(digit: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    assert!(digit < 10);
    let theta: f64 = rng.random_range(-0.15..0.15);
    let shear: f64 = rng.random_range(-0.30..0.30);
    let scale_x: f64 = rng.random_range(0.78..1.12);
    let scale_y: f64 = rng.random_range(0.78..1.12);
    let tx: f64 = rng.random_range(-1.5..1.5);
    let ty: f64 = rng.random_range(-1.5..1.5);
    let sigma: f64 = rng.random_range(0.7..1.6);
    let amp: f64 = rng.random_range(0.80..1.0);
    let (sin_t, cos_t) = theta.sin_cos();
    let side = IMAGE_SIDE as f64;
    let center = side / 2.0;
    // Transform glyph coordinates into pixel space.
    let map = |x: f64, y: f64| {
        let (gx, gy) = (x - 0.5 + shear * (0.5 - y), y - 0.5);
        let (rx, ry) = (gx * cos_t - gy * sin_t, gx * sin_t + gy * cos_t);
        (
            center + scale_x * side * 0.85 * rx + tx,
            center + scale_y * side * 0.85 * ry + ty,
        )
    };
    let segs: Vec<_> = DIGIT_SEGS[digit as usize]
        .iter()
        .map(|&s| {
            let (a, b) = SEG_PTS[s];
            let wob = |p: (f64, f64), rng: &mut ChaCha8Rng| {
                (
                    p.0 + rng.random_range(-0.035..0.035),
                    p.1 + rng.random_range(-0.035..0.035),
                )
            };
            let (a, b) = (wob(a, rng), wob(b, rng));
            let ink: f64 = rng.random_range(0.75..1.0);
            (map(a.0, a.1), map(b.0, b.1), ink)
        })
        .collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut v: f64 = 0.0;
            for &(a, b, ink) in &segs {
                let d2 = point_segment_dist2(px, py, a, b);
                v = v.max(amp * ink * (-d2 * inv).exp());
            }
            let grain: f64 = rng.random_range(-10.0..10.0);
            out[row * IMAGE_SIDE + col] =
                (v * 255.0 + grain).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Generate a synthetic digit corpus (uniform digit distribution, shuffled
/// order) and write it to `out_dir` as standard IDX train files.
pub fn generate_digit_corpus(out_dir: &Path, images_per_digit: usize, seed: u64) -> Result<()> {
    if images_per_digit == 0 {
        return Err(Error::InvalidInput("images_per_digit must be ≥ 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..10u8)
        .flat_map(|d| std::iter::repeat(d).take(images_per_digit))
        .collect();
    labels.shuffle(&mut rng);
    let images: Vec<Vec<u8>> = labels.iter().map(|&d| render_digit(d, &mut rng)).collect();
    write_idx_images(
        &out_dir.join(IMAGE_FILE_NAMES[0]),
        &images,
        IMAGE_SIDE,
        IMAGE_SIDE,
    )?;
    write_idx_labels(&out_dir.join(LABEL_FILE_NAMES[0]), &labels)
}

// ---------------------------------------------------------------------------
// MNIST-Bags generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MnistBagsConfig {
    pub num_bags: usize,
    pub mean_size: f64,
    pub std_size: f64,
    pub positive_digit: u8,
    pub seed: u64,
    pub source: PathBuf,
}

impl MnistBagsConfig {
    pub fn new(num_bags: usize, seed: u64, source: PathBuf) -> Self {
        Self {
            num_bags,
            mean_size: 100.0,
            std_size: 20.0,
            positive_digit: 9,
            seed,
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bags == 0 || self.num_bags % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "num_bags must be a positive even number, got {}",
                self.num_bags
            )));
        }
        if !(self.std_size > 0.0) || !(self.mean_size > 0.0) {
            return Err(Error::InvalidInput(
                "bag size mean and std must be positive".into(),
            ));
        }
        if self.positive_digit > 9 {
            return Err(Error::InvalidInput("positive_digit must be 0–9".into()));
        }
        Ok(())
    }
}

/// Generate bags one at a time (ordered by bag index), handing each bag and
/// its instance digit labels to `sink`. Deterministic per seed.
pub fn generate_mnist_bags_streaming<F>(
    config: &MnistBagsConfig,
    pool: &DigitPool,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(Bag, &[u8]) -> Result<()>,
{
    config.validate()?;
    let positive_digit = config.positive_digit;
    let non_positive: Vec<usize> = pool
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != positive_digit)
        .map(|(i, _)| i)
        .collect();
    let has_positive = pool.labels.iter().any(|&l| l == positive_digit);
    if !has_positive || non_positive.is_empty() {
        return Err(Error::InvalidInput(format!(
            "source pool must contain digit {positive_digit} and at least one other digit"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size_dist = Normal::new(config.mean_size, config.std_size)
        .map_err(|e| Error::InvalidInput(format!("bag size distribution: {e}")))?;
    for bag_index in 0..config.num_bags {
        let label = if bag_index % 2 == 0 {
            Label::Negative
        } else {
            Label::Positive
        };
        let size = (size_dist.sample(&mut rng).round() as i64).max(1) as usize;
        let picks: Vec<usize> = match label {
            Label::Negative => (0..size)
                .map(|_| non_positive[rng.random_range(0..non_positive.len())])
                .collect(),
            Label::Positive => loop {
                let candidate: Vec<usize> = (0..size)
                    .map(|_| rng.random_range(0..pool.images.len()))
                    .collect();
                if candidate.iter().any(|&i| pool.labels[i] == positive_digit) {
                    break candidate;
                }
            },
        };
        let digits: Vec<u8> = picks.iter().map(|&i| pool.labels[i]).collect();
        let instances = picks
            .iter()
            .map(|&i| Instance::from_pixels(pool.images[i].clone()))
            .collect::<Result<Vec<_>>>()?;
        let bag = Bag::new(format!("bag-{bag_index:05}"), label, instances)?;
        sink(bag, &digits)?;
    }
    Ok(())
}

/// Generate the full MNIST-Bags dataset in memory.
pub fn generate_mnist_bags(config: &MnistBagsConfig) -> Result<Vec<Bag>> {
    let pool = DigitPool::load(&config.source)?;
    let mut bags = Vec::with_capacity(config.num_bags);
    generate_mnist_bags_streaming(config, &pool, |bag, _| {
        bags.push(bag);
        Ok(())
    })?;
    Ok(bags)
}

// ---------------------------------------------------------------------------
// Synthetic embedding bags (for smoke runs)
// ---------------------------------------------------------------------------

/// Generate embedding-modality bags where positive bags contain at least one
/// instance drawn near a designated signal direction. All coordinates lie in
/// [0, 1] and pass through f32 for round-trip stability.
pub fn generate_synthetic_embedding_bags(
    num_bags: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<Bag>> {
    if num_bags == 0 || num_bags % 2 != 0 {
        return Err(Error::InvalidInput(
            "num_bags must be a positive even number".into(),
        ));
    }
    if dim == 0 {
        return Err(Error::InvalidInput("dim must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |signal: bool, rng: &mut ChaCha8Rng| -> Array1<f64> {
        Array1::from_iter((0..dim).map(|d| {
            let base: f64 = if signal && d < dim.div_ceil(4) {
                0.85
            } else {
                0.25
            };
            let v = (base + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
            (v as f32) as f64
        }))
    };
    let mut bags = Vec::with_capacity(num_bags);
    for bag_index in 0..num_bags {
        let label = if bag_index % 2 == 0 {
            Label::Negative
        } else {
            Label::Positive
        };
        let size = rng.random_range(5..=20);
        let mut instances = Vec::with_capacity(size);
        for k in 0..size {
            let signal = label == Label::Positive && (k == 0 || rng.random_range(0.0..1.0) < 0.25);
            instances.push(Instance::from_embedding(sample(signal, &mut rng))?);
        }
        bags.push(Bag::new(format!("bag-{bag_index:05}"), label, instances)?);
    }
    Ok(bags)
}

// ---------------------------------------------------------------------------
// Bag dataset manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Pixels,
    Embeddings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelEncoding {
    RawTensor,
    Png,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestBag {
    id: String,
    label: u8,
    instances: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BagDatasetManifest {
    pub format_version: u32,
    pub modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    bags: Vec<ManifestBag>,
}

fn instance_modality(inst: &Instance) -> Modality {
    match inst.data {
        InstanceData::Pixels(_) => Modality::Pixels,
        InstanceData::Embedding(_) => Modality::Embeddings,
    }
}

fn write_png_gray(path: &Path, values: &Array3<f64>) -> Result<()> {
    let (_, h, w) = values.dim();
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Schema(format!("{}: png header: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Schema(format!("{}: png payload: {e}", path.display())))
}

fn read_png_gray(path: &Path) -> Result<Array3<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Schema(format!("{}: png decode: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Schema(format!("{}: png frame: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Schema(format!(
            "{}: expected 8-bit grayscale PNG",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h]
        .iter()
        .map(|&b| (b as f32 / 255.0) as f64)
        .collect();
    Array3::from_shape_vec((1, h, w), data)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Write bags plus a manifest.json into `dir`. All bags must share one
/// modality; embedding bags must share one dimension.
pub fn save_bag_dataset(dir: &Path, bags: &[Bag], pixel_encoding: PixelEncoding) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::InvalidInput("cannot save an empty bag list".into()));
    }
    let modality = instance_modality(&bags[0].instances[0]);
    let mut embedding_dim = None;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest_bags = Vec::with_capacity(bags.len());
    for bag in bags {
        let bag_dir = dir.join(&bag.id);
        fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
        let mut refs = Vec::with_capacity(bag.instances.len());
        for (k, inst) in bag.instances.iter().enumerate() {
            if instance_modality(inst) != modality {
                return Err(Error::Schema(format!(
                    "bag {}: mixed instance modalities",
                    bag.id
                )));
            }
            let rel = match &inst.data {
                InstanceData::Pixels(values) => match pixel_encoding {
                    PixelEncoding::RawTensor => {
                        let rel = format!("{}/inst-{k:04}.pmtn", bag.id);
                        let (c, h, w) = values.dim();
                        tensorio::write_tensor(
                            &dir.join(&rel),
                            &[c, h, w],
                            values.as_slice().expect("standard layout"),
                        )?;
                        rel
                    }
                    PixelEncoding::Png => {
                        let rel = format!("{}/inst-{k:04}.png", bag.id);
                        write_png_gray(&dir.join(&rel), values)?;
                        rel
                    }
                },
                InstanceData::Embedding(values) => {
                    match embedding_dim {
                        None => embedding_dim = Some(values.len()),
                        Some(d) if d != values.len() => {
                            return Err(Error::DimensionMismatch(format!(
                                "bag {}: embedding dim {} vs {}",
                                bag.id,
                                values.len(),
                                d
                            )))
                        }
                        _ => {}
                    }
                    let rel = format!("{}/inst-{k:04}.pmtn", bag.id);
                    tensorio::write_tensor(
                        &dir.join(&rel),
                        &[values.len()],
                        values.as_slice().expect("standard layout"),
                    )?;
                    rel
                }
            };
            refs.push(rel);
        }
        manifest_bags.push(ManifestBag {
            id: bag.id.clone(),
            label: bag.label.index() as u8,
            instances: refs,
        });
    }
    let manifest = BagDatasetManifest {
        format_version: MANIFEST_VERSION,
        modality,
        embedding_dim,
        bags: manifest_bags,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Load a bag dataset. `path` may be the manifest file or its directory.
pub fn load_bag_dataset(path: &Path) -> Result<Vec<Bag>> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: BagDatasetManifest =
        serde_json::from_str(&raw).map_err(|e| Error::Schema(format!("manifest parse: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Schema(format!(
            "unsupported manifest format version {}",
            manifest.format_version
        )));
    }
    if manifest.bags.is_empty() {
        return Err(Error::Schema("manifest contains no bags".into()));
    }
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for mb in &manifest.bags {
        if mb.label > 1 {
            return Err(Error::Schema(format!(
                "bag {}: label {} not in {{0,1}}",
                mb.id, mb.label
            )));
        }
        let label = Label::from_u8(mb.label)?;
        let mut instances = Vec::with_capacity(mb.instances.len());
        for rel in &mb.instances {
            let file = base.join(rel);
            if !file.is_file() {
                return Err(Error::MissingFile(file));
            }
            let inst = match manifest.modality {
                Modality::Pixels => {
                    let values = if rel.ends_with(".png") {
                        read_png_gray(&file)?
                    } else {
                        let (dims, data) = tensorio::read_tensor(&file)?;
                        if dims.len() != 3 {
                            return Err(Error::DimensionMismatch(format!(
                                "{}: pixel tensor must be rank 3, got rank {}",
                                file.display(),
                                dims.len()
                            )));
                        }
                        Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                            .expect("shape consistent by construction")
                    };
                    Instance::from_pixels(values)?
                }
                Modality::Embeddings => {
                    let (dims, data) = tensorio::read_tensor(&file)?;
                    if dims.len() != 1 {
                        return Err(Error::DimensionMismatch(format!(
                            "{}: embedding tensor must be rank 1, got rank {}",
                            file.display(),
                            dims.len()
                        )));
                    }
                    if let Some(d) = manifest.embedding_dim {
                        if dims[0] != d {
                            return Err(Error::DimensionMismatch(format!(
                                "{}: embedding dim {} vs declared {}",
                                file.display(),
                                dims[0],
                                d
                            )));
                        }
                    }
                    Instance::from_embedding(Array1::from_vec(data))?
                }
            };
            instances.push(inst);
        }
        bags.push(Bag::new(mb.id.clone(), label, instances)?);
    }
    Ok(bags)
}

// ---------------------------------------------------------------------------
// Cross-validation splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSplit {
    pub fold_of: BTreeMap<String, usize>,
    pub num_folds: usize,
    pub repeat: usize,
    pub seed: u64,
}

impl CvSplit {
    pub fn test_indices(&self, bags: &[Bag], fold: usize) -> Vec<usize> {
        (0..bags.len())
            .filter(|&i| self.fold_of[&bags[i].id] == fold)
            .collect()
    }

    pub fn train_indices(&self, bags: &[Bag], fold: usize) -> Vec<usize> {
        (0..bags.len())
            .filter(|&i| self.fold_of[&bags[i].id] != fold)
            .collect()
    }
}

/// Stratified k-fold assignments, one `CvSplit` per repeat.
pub fn make_cv_splits(
    bags: &[Bag],
    num_folds: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<CvSplit>> {
    if num_folds < 2 {
        return Err(Error::InvalidInput("num_folds must be ≥ 2".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be ≥ 1".into()));
    }
    let per_class: [Vec<usize>; 2] = {
        let mut neg = Vec::new();
        let mut pos = Vec::new();
        for (i, b) in bags.iter().enumerate() {
            match b.label {
                Label::Negative => neg.push(i),
                Label::Positive => pos.push(i),
            }
        }
        [neg, pos]
    };
    for class in &per_class {
        if class.len() < num_folds {
            return Err(Error::InvalidInput(format!(
                "stratification infeasible: a class has {} bags for {} folds",
                class.len(),
                num_folds
            )));
        }
    }
    let mut splits = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(repeat as u64));
        let mut fold_of = BTreeMap::new();
        for class in &per_class {
            let mut order = class.clone();
            order.shuffle(&mut rng);
            for (pos, &bag_idx) in order.iter().enumerate() {
                fold_of.insert(bags[bag_idx].id.clone(), pos % num_folds);
            }
        }
        splits.push(CvSplit {
            fold_of,
            num_folds,
            repeat,
            seed,
        });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pool_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        generate_digit_corpus(dir.path(), 20, 11).unwrap();
        dir
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![vec![0u8; 4], vec![255u8, 1, 2, 3]];
        let labels = vec![7u8, 9];
        write_idx_images(&dir.path().join("imgs"), &images, 2, 2).unwrap();
        write_idx_labels(&dir.path().join("lbls"), &labels).unwrap();
        let (back, rows, cols) = read_idx_images(&dir.path().join("imgs")).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(back, images);
        assert_eq!(read_idx_labels(&dir.path().join("lbls")).unwrap(), labels);
    }

    #[test]
    fn corpus_is_uniform_and_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_digit_corpus(d1.path(), 5, 3).unwrap();
        generate_digit_corpus(d2.path(), 5, 3).unwrap();
        let a = fs::read(d1.path().join(IMAGE_FILE_NAMES[0])).unwrap();
        let b = fs::read(d2.path().join(IMAGE_FILE_NAMES[0])).unwrap();
        assert_eq!(a, b);
        let labels = read_idx_labels(&d1.path().join(LABEL_FILE_NAMES[0])).unwrap();
        for d in 0..10u8 {
            assert_eq!(labels.iter().filter(|&&l| l == d).count(), 5);
        }
    }

    #[test]
    fn bags_respect_label_rule_exhaustively() {
        let dir = toy_pool_dir();
        let pool = DigitPool::load(dir.path()).unwrap();
        let config = MnistBagsConfig::new(20, 5, dir.path().to_path_buf());
        let mut positives = 0;
        generate_mnist_bags_streaming(&config, &pool, |bag, digits| {
            let nines = digits.iter().filter(|&&d| d == 9).count();
            match bag.label {
                Label::Positive => {
                    assert!(nines >= 1, "positive bag without a 9");
                    positives += 1;
                }
                Label::Negative => assert_eq!(nines, 0, "negative bag with a 9"),
            }
            assert_eq!(bag.instances.len(), digits.len());
            Ok(())
        })
        .unwrap();
        assert_eq!(positives, 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = toy_pool_dir();
        let config = MnistBagsConfig::new(6, 42, dir.path().to_path_buf());
        let a = generate_mnist_bags(&config).unwrap();
        let b = generate_mnist_bags(&config).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.instances.len(), y.instances.len());
            for (ix, iy) in x.instances.iter().zip(&y.instances) {
                match (&ix.data, &iy.data) {
                    (InstanceData::Pixels(px), InstanceData::Pixels(py)) => assert_eq!(px, py),
                    _ => panic!("expected pixel instances"),
                }
            }
        }
    }

    #[test]
    fn odd_num_bags_rejected() {
        let config = MnistBagsConfig::new(5, 1, PathBuf::from("/tmp"));
        assert!(matches!(config.validate(), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn manifest_round_trip_pixels_bit_exact() {
        let dir = toy_pool_dir();
        let config = MnistBagsConfig::new(4, 8, dir.path().to_path_buf());
        let bags = generate_mnist_bags(&config).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_bag_dataset(out.path(), &bags, PixelEncoding::RawTensor).unwrap();
        let loaded = load_bag_dataset(out.path()).unwrap();
        assert_eq!(loaded.len(), bags.len());
        for (a, b) in bags.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                match (&ia.data, &ib.data) {
                    (InstanceData::Pixels(pa), InstanceData::Pixels(pb)) => {
                        assert_eq!(pa, pb, "pixel data must round trip bit-exactly")
                    }
                    _ => panic!("expected pixel instances"),
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip_png() {
        let dir = toy_pool_dir();
        let config = MnistBagsConfig::new(2, 8, dir.path().to_path_buf());
        let bags = generate_mnist_bags(&config).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_bag_dataset(out.path(), &bags, PixelEncoding::Png).unwrap();
        let loaded = load_bag_dataset(out.path()).unwrap();
        // PNG quantizes to u8; our pool pixels are already u8/255, so the
        // round trip is exact here too.
        for (a, b) in bags.iter().zip(&loaded) {
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                match (&ia.data, &ib.data) {
                    (InstanceData::Pixels(pa), InstanceData::Pixels(pb)) => assert_eq!(pa, pb),
                    _ => panic!("expected pixel instances"),
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip_embeddings() {
        let bags = generate_synthetic_embedding_bags(4, 16, 2).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_bag_dataset(out.path(), &bags, PixelEncoding::RawTensor).unwrap();
        let loaded = load_bag_dataset(out.path()).unwrap();
        for (a, b) in bags.iter().zip(&loaded) {
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                match (&ia.data, &ib.data) {
                    (InstanceData::Embedding(ea), InstanceData::Embedding(eb)) => {
                        assert_eq!(ea, eb)
                    }
                    _ => panic!("expected embedding instances"),
                }
            }
        }
    }

    #[test]
    fn load_errors_are_distinct_kinds() {
        assert!(matches!(
            load_bag_dataset(Path::new("/nope/manifest.json")),
            Err(Error::MissingFile(_))
        ));
        let out = tempfile::tempdir().unwrap();
        fs::write(out.path().join("manifest.json"), "{not json").unwrap();
        assert!(matches!(
            load_bag_dataset(out.path()),
            Err(Error::Schema(_))
        ));
        // Dimension mismatch: embedding manifest pointing at a rank-3 tensor.
        let out2 = tempfile::tempdir().unwrap();
        tensorio::write_tensor(&out2.path().join("x.pmtn"), &[1, 2, 2], &[0.0; 4]).unwrap();
        fs::write(
            out2.path().join("manifest.json"),
            r#"{"format_version":1,"modality":"embeddings","embedding_dim":4,
                "bags":[{"id":"b","label":1,"instances":["x.pmtn"]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_bag_dataset(out2.path()),
            Err(Error::DimensionMismatch(_))
        ));
        // Missing instance file.
        let out3 = tempfile::tempdir().unwrap();
        fs::write(
            out3.path().join("manifest.json"),
            r#"{"format_version":1,"modality":"pixels",
                "bags":[{"id":"b","label":0,"instances":["gone.pmtn"]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_bag_dataset(out3.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn cv_splits_partition_and_stratify() {
        let bags = generate_synthetic_embedding_bags(40, 4, 9).unwrap();
        let splits = make_cv_splits(&bags, 10, 5, 77).unwrap();
        assert_eq!(splits.len(), 5);
        for split in &splits {
            let mut seen = vec![false; bags.len()];
            for fold in 0..10 {
                let test = split.test_indices(&bags, fold);
                let train = split.train_indices(&bags, fold);
                assert_eq!(test.len() + train.len(), bags.len());
                let pos = test.iter().filter(|&&i| bags[i].label == Label::Positive).count();
                let neg = test.len() - pos;
                assert!((pos as i64 - neg as i64).abs() <= 1, "fold not stratified");
                for &i in &test {
                    assert!(!seen[i], "bag in two folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "folds do not cover all bags");
        }
        let again = make_cv_splits(&bags, 10, 5, 77).unwrap();
        for (a, b) in splits.iter().zip(&again) {
            assert_eq!(a.fold_of, b.fold_of);
        }
    }

    #[test]
    fn cv_split_infeasible_errors() {
        let bags = generate_synthetic_embedding_bags(4, 4, 1).unwrap();
        assert!(make_cv_splits(&bags, 3, 1, 0).is_err());
    }

    #[test]
    fn bag_size_distribution_smoke() {
        let dir = toy_pool_dir();
        let pool = DigitPool::load(dir.path()).unwrap();
        let mut config = MnistBagsConfig::new(200, 123, dir.path().to_path_buf());
        config.mean_size = 20.0;
        config.std_size = 5.0;
        let mut sizes = Vec::new();
        generate_mnist_bags_streaming(&config, &pool, |bag, _| {
            sizes.push(bag.instances.len() as f64);
            Ok(())
        })
        .unwrap();
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        assert!((mean - 20.0).abs() < 2.0, "mean {mean}");
    }
}
