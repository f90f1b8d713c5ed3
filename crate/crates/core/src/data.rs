//! Vertically partitioned datasets: every client holds a column block of the
//! same rows, and all parties share the label vector.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::Matrix;
use crate::{Error, Result};

const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic {
        seed: u64,
        separation: f64,
    },
    Csv {
        path: String,
        sha256: String,
    },
    Images {
        height: usize,
        width: usize,
        source: String,
    },
}

#[derive(Debug, Clone)]
pub struct VerticalDataset {
    /// Per-client `N x D_k` feature blocks, row-aligned.
    pub features: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub provenance: Provenance,
}

impl VerticalDataset {
    pub fn clients(&self) -> usize {
        self.features.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.features.iter().map(Matrix::cols).collect()
    }

    /// Standardizes every column with mean and population standard deviation
    /// taken over the training rows only. Constant columns are only centered.
    pub fn standardize(&mut self) {
        let train = &self.train;
        for block in &mut self.features {
            for c in 0..block.cols() {
                let n = train.len().max(1) as f64;
                let mean = train.iter().map(|&r| block.get(r, c)).sum::<f64>() / n;
                let var = train.iter().map(|&r| (block.get(r, c) - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                for r in 0..block.rows() {
                    block.set(r, c, (block.get(r, c) - mean) / sd);
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if let Some(bad) = self.features.iter().position(|f| f.rows() != n) {
            return Err(Error::Data(format!(
                "client {} has {} rows, labels have {n}",
                bad + 1,
                self.features[bad].rows()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Data(format!("label {y} outside {} classes", self.classes)));
        }
        Ok(())
    }
}

/// Splits `0..n` into sorted, disjoint `(train, test)` index lists from one
/// seeded permutation. Depends only on `seed`, `n` and `test_fraction`.
pub fn train_test_split(seed: u64, n: usize, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::field(
            "dataset.test_fraction",
            format!("must lie in [0, 1), got {test_fraction}"),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Column counts for `d` features over `k` contiguous blocks; the remainder
/// goes to the last client.
pub fn block_widths(d: usize, k: usize) -> Vec<usize> {
    let base = d / k;
    let mut w = vec![base; k];
    w[k - 1] += d - base * k;
    w
}

/// Class-mean separation in units of the per-feature noise sd.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Difficulty {
    Named(DifficultyLevel),
    Separation(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyLevel {
    Trivial,
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn separation(self) -> f64 {
        match self {
            Difficulty::Named(DifficultyLevel::Trivial) => 10.0,
            Difficulty::Named(DifficultyLevel::Easy) => 4.0,
            Difficulty::Named(DifficultyLevel::Medium) => 2.5,
            Difficulty::Named(DifficultyLevel::Hard) => 1.5,
            Difficulty::Separation(s) => s,
        }
    }
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty::Named(DifficultyLevel::Medium)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub difficulty: Difficulty,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_n() -> usize {
    2000
}
fn default_d() -> usize {
    64
}
fn default_classes() -> usize {
    4
}
pub(crate) fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: default_n(),
            d: default_d(),
            classes: default_classes(),
            difficulty: Difficulty::default(),
            test_fraction: default_test_fraction(),
        }
    }
}

/// Gaussian class-conditional clusters split into `k` contiguous column
/// blocks. Class means are orthonormalized random directions scaled so every
/// pair of means sits `separation` apart (when `classes <= d`); noise is unit
/// variance. Columns are standardized on the training split.
pub fn synth_classification(seed: u64, k: usize, spec: &SynthSpec) -> Result<VerticalDataset> {
    let SynthSpec {
        n,
        d,
        classes,
        difficulty,
        test_fraction,
    } = *spec;
    if k == 0 {
        return Err(Error::field("k", "need at least one client"));
    }
    if classes < 2 {
        return Err(Error::field("dataset.classes", "need at least two classes"));
    }
    if d < k {
        return Err(Error::field(
            "dataset.d",
            format!("{d} features cannot cover {k} clients"),
        ));
    }
    if n < 2 * classes {
        return Err(Error::field(
            "dataset.n",
            format!("need at least {} samples for {classes} classes", 2 * classes),
        ));
    }
    let separation = difficulty.separation();
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::field(
            "dataset.difficulty",
            format!("separation must be finite and non-negative, got {separation}"),
        ));
    }
    let mut rng = stream_rng(seed, DATA_STREAM);

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if means.len() < d {
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        means.push(v);
    }
    let scale = separation / std::f64::consts::SQRT_2;

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let widths = block_widths(d, k);
    let mut features: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(n, w)).collect();
    for (r, &y) in labels.iter().enumerate() {
        let mut col = 0;
        for block in &mut features {
            for (c, v) in block.row_mut(r).iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = scale * means[y][col + c] + noise;
            }
            col += block.cols();
        }
    }
    let (train, test) = train_test_split(seed, n, test_fraction)?;
    let mut ds = VerticalDataset {
        features,
        labels,
        classes,
        train,
        test,
        provenance: Provenance::Synthetic { seed, separation },
    };
    ds.standardize();
    Ok(ds)
}

/// Options for [`csv_ingest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub path: String,
    pub label_column: String,
    /// Column names held by each client, in client order.
    pub clients: Vec<Vec<String>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

/// Factorizes label strings to class indices: numeric order when every label
/// parses as a number, lexical order otherwise.
fn factorize(raw: &[String]) -> (Vec<usize>, usize) {
    let numeric: Option<Vec<f64>> = raw.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    let mut uniq: Vec<&String> = raw
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(nums) = numeric {
        let lookup: HashMap<&String, f64> = raw.iter().zip(nums).collect();
        uniq.sort_by(|a, b| lookup[a].total_cmp(&lookup[b]));
    }
    let index: HashMap<&String, usize> = uniq.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    (raw.iter().map(|s| index[s]).collect(), uniq.len())
}

/// Reads a headered CSV, assigns columns to clients and standardizes features
/// on the training split.
pub fn csv_ingest(spec: &CsvSpec, seed: u64) -> Result<VerticalDataset> {
    let bytes = std::fs::read(&spec.path).map_err(|e| Error::Data(format!("{}: {e}", spec.path)))?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let mut ds = csv_from_reader(bytes.as_slice(), spec, seed)?;
    ds.provenance = Provenance::Csv {
        path: spec.path.clone(),
        sha256,
    };
    Ok(ds)
}

fn csv_from_reader<R: std::io::Read>(reader: R, spec: &CsvSpec, seed: u64) -> Result<VerticalDataset> {
    if spec.clients.is_empty() {
        return Err(Error::field("dataset.clients", "no client column assignment given"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: file is empty", spec.path)));
    }
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
    };
    let label_idx = position(&spec.label_column)?;
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut client_idx: Vec<Vec<usize>> = Vec::with_capacity(spec.clients.len());
    for (k, cols) in spec.clients.iter().enumerate() {
        if cols.is_empty() {
            return Err(Error::field(format!("dataset.clients[{k}]"), "client has no columns"));
        }
        let mut idx = Vec::with_capacity(cols.len());
        for name in cols {
            let i = position(name)?;
            if i == label_idx {
                return Err(Error::Data(format!("column '{name}' is the label column")));
            }
            if let Some(prev) = owner.insert(i, k) {
                return Err(Error::Data(format!(
                    "column '{name}' assigned twice (clients {} and {})",
                    prev + 1,
                    k + 1
                )));
            }
            idx.push(i);
        }
        client_idx.push(idx);
    }
    if let Some(free) = (0..header.len()).find(|i| *i != label_idx && !owner.contains_key(i)) {
        return Err(Error::Data(format!(
            "column '{}' is not assigned to any client",
            header[free]
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let parsed: Option<Vec<f64>> = (0..header.len())
            .filter(|&c| c != label_idx)
            .map(|c| {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        match (parsed, rec.get(label_idx)) {
            (Some(vals), Some(label)) if !label.trim().is_empty() => {
                rows.push(vals);
                raw_labels.push(label.trim().to_string());
            }
            _ => bad_rows.push(line),
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Data(format!(
            "non-numeric or missing values on line(s) {bad_rows:?}"
        )));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", spec.path)));
    }
    // `rows` holds non-label columns in header order.
    let compact: HashMap<usize, usize> = (0..header.len())
        .filter(|&c| c != label_idx)
        .enumerate()
        .map(|(pos, c)| (c, pos))
        .collect();
    let n = rows.len();
    let features = client_idx
        .iter()
        .map(|cols| {
            let mut m = Matrix::zeros(n, cols.len());
            for (r, row) in rows.iter().enumerate() {
                for (j, c) in cols.iter().enumerate() {
                    m.set(r, j, row[compact[c]]);
                }
            }
            m
        })
        .collect();
    let (labels, classes) = factorize(&raw_labels);
    let (train, test) = train_test_split(seed, n, spec.test_fraction)?;
    let mut ds = VerticalDataset {
        features,
        labels,
        classes,
        train,
        test,
        provenance: Provenance::Csv {
            path: spec.path.clone(),
            sha256: String::new(),
        },
    };
    ds.validate()?;
    ds.standardize();
    Ok(ds)
}

/// Splits flat row-major `height x width` images into four quadrant clients:
/// top-left, top-right, bottom-left, bottom-right. Pixels are not rescaled.
pub fn quadrant_split(
    images: &Matrix,
    labels: Vec<usize>,
    height: usize,
    width: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<VerticalDataset> {
    if height == 0 || width == 0 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::field(
            "dataset.height/width",
            format!("image dimensions {height}x{width} must be even and positive"),
        ));
    }
    if images.cols() != height * width {
        return Err(Error::Shape(format!(
            "rows have {} pixels, expected {}",
            images.cols(),
            height * width
        )));
    }
    if labels.len() != images.rows() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let (hh, hw) = (height / 2, width / 2);
    let n = images.rows();
    let mut features = vec![Matrix::zeros(n, hh * hw); 4];
    for r in 0..n {
        let px = images.row(r);
        for (q, block) in features.iter_mut().enumerate() {
            let (r0, c0) = ((q / 2) * hh, (q % 2) * hw);
            let out = block.row_mut(r);
            for i in 0..hh {
                out[i * hw..(i + 1) * hw].copy_from_slice(&px[(r0 + i) * width + c0..(r0 + i) * width + c0 + hw]);
            }
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (train, test) = train_test_split(seed, n, test_fraction)?;
    let ds = VerticalDataset {
        features,
        labels,
        classes,
        train,
        test,
        provenance: Provenance::Images {
            height,
            width,
            source: "memory".into(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Inverse of [`quadrant_split`] on the four feature blocks.
pub fn reassemble_quadrants(blocks: &[Matrix], height: usize, width: usize) -> Result<Matrix> {
    if blocks.len() != 4 {
        return Err(Error::Shape(format!(
            "expected 4 quadrant blocks, got {}",
            blocks.len()
        )));
    }
    let (hh, hw) = (height / 2, width / 2);
    let n = blocks[0].rows();
    let mut out = Matrix::zeros(n, height * width);
    for r in 0..n {
        let px = out.row_mut(r);
        for (q, block) in blocks.iter().enumerate() {
            let (r0, c0) = ((q / 2) * hh, (q % 2) * hw);
            let src = block.row(r);
            for i in 0..hh {
                px[(r0 + i) * width + c0..(r0 + i) * width + c0 + hw].copy_from_slice(&src[i * hw..(i + 1) * hw]);
            }
        }
    }
    Ok(out)
}

/// Synthetic grayscale images: each class lights up its own randomly placed
/// square patch over Gaussian background noise.
pub fn synth_images(seed: u64, n: usize, height: usize, width: usize, classes: usize) -> Result<(Matrix, Vec<usize>)> {
    if classes < 2 || n < 2 * classes {
        return Err(Error::field(
            "dataset",
            format!("need >= 2 classes and >= {} images", 2 * classes.max(2)),
        ));
    }
    let mut rng = stream_rng(seed, DATA_STREAM);
    let side = (height.min(width) / 3).max(1);
    let anchors: Vec<(usize, usize)> = (0..classes)
        .map(|_| (rng.random_range(0..=height - side), rng.random_range(0..=width - side)))
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Matrix::zeros(n, height * width);
    for (r, &y) in labels.iter().enumerate() {
        let (ar, ac) = anchors[y];
        for (p, v) in images.row_mut(r).iter_mut().enumerate() {
            let (i, j) = (p / width, p % width);
            let lit = (ar..ar + side).contains(&i) && (ac..ac + side).contains(&j);
            let noise: f64 = rng.sample(StandardNormal);
            *v = if lit { 1.0 } else { 0.0 } + 0.5 * noise;
        }
    }
    Ok((images, labels))
}

/// Reads a headered CSV of flat images: one label column plus `height*width`
/// pixel columns in row-major order.
pub fn read_image_csv(path: &str, label_column: &str, height: usize, width: usize) -> Result<(Matrix, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{path}: {e}")))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("column '{label_column}' not found in header")))?;
    if header.len() - 1 != height * width {
        return Err(Error::Data(format!(
            "{} pixel columns, expected {}",
            header.len() - 1,
            height * width
        )));
    }
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let px: Option<Vec<f64>> = (0..header.len())
            .filter(|&c| c != label_idx)
            .map(|c| rec.get(c).and_then(|s| s.trim().parse::<f64>().ok()))
            .collect();
        match px {
            Some(px) => {
                data.extend(px);
                raw_labels.push(rec.get(label_idx).unwrap_or_default().trim().to_string());
            }
            None => bad_rows.push(i + 2),
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Data(format!(
            "non-numeric or missing values on line(s) {bad_rows:?}"
        )));
    }
    if raw_labels.is_empty() {
        return Err(Error::Data(format!("{path}: no data rows")));
    }
    let (labels, _) = factorize(&raw_labels);
    Ok((Matrix::from_vec(raw_labels.len(), height * width, data)?, labels))
}

/// Loads an image file as a quadrant dataset, tagging provenance with its path.
pub fn quadrant_from_csv(
    path: &Path,
    label_column: &str,
    height: usize,
    width: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<VerticalDataset> {
    let p = path.to_string_lossy().into_owned();
    let (images, labels) = read_image_csv(&p, label_column, height, width)?;
    let mut ds = quadrant_split(&images, labels, height, width, seed, test_fraction)?;
    ds.provenance = Provenance::Images {
        height,
        width,
        source: p,
    };
    Ok(ds)
}
