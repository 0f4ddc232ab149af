//! Synthetic multimodal data, label-noise injection, splits, and dataset
//! file I/O.
//!
//! Synthetic features are additive class-prototype mixtures: a sample's
//! feature in each modality is the sum of its active classes' prototypes
//! plus Gaussian noise, so partial label overlap produces intermediate
//! feature similarity by construction.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

const BINARY_MAGIC: &[u8; 4] = b"SCBF";
const BINARY_VERSION: u16 = 1;

/// Which split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Retrieval,
}

/// How labels are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScheme {
    /// For each selected sample, every active label is replaced by a
    /// uniformly chosen different class; row cardinality is preserved.
    SymmetricInstance,
}

/// Noise injection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
    pub scheme: NoiseScheme,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            rate: 0.0,
            seed: 0,
            scheme: NoiseScheme::SymmetricInstance,
        }
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Scale of the per-class prototype vectors.
    pub prototype_separation: f64,
    /// Standard deviation of the additive within-class noise.
    pub noise_std: f64,
    /// Probability that a sample's text feature is built from the same
    /// classes as its image feature (vs an uncorrelated draw).
    pub cross_modal_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            num_classes: 10,
            image_dim: 64,
            text_dim: 32,
            min_labels: 1,
            max_labels: 3,
            prototype_separation: 1.0,
            noise_std: 1.5,
            cross_modal_correlation: 0.95,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.num_classes == 0 || self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::config("all synthetic dataset counts must be positive"));
        }
        if self.min_labels < 1 {
            return Err(Error::config("min_labels must be at least 1"));
        }
        if self.max_labels < self.min_labels {
            return Err(Error::config("max_labels must be at least min_labels"));
        }
        if self.max_labels > self.num_classes {
            return Err(Error::config(format!(
                "max_labels {} exceeds num_classes {}",
                self.max_labels, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.cross_modal_correlation) {
            return Err(Error::config("cross_modal_correlation must be in [0, 1]"));
        }
        if self.prototype_separation < 0.0 || self.noise_std < 0.0 {
            return Err(Error::config("separation and noise_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Image and text features with clean (and optionally corrupted) labels
/// and per-sample split assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub image: Matrix,
    pub text: Matrix,
    pub clean_labels: Matrix,
    pub noisy_labels: Option<Matrix>,
    pub noise_mask: Option<Vec<bool>>,
    pub splits: Vec<Split>,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.clean_labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.clean_labels.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.image.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text.cols()
    }

    /// Labels used for training: corrupted if noise was injected.
    pub fn training_labels(&self) -> &Matrix {
        self.noisy_labels.as_ref().unwrap_or(&self.clean_labels)
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Histogram of label cardinalities, indexed by active-label count.
    pub fn cardinality_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes() + 1];
        for i in 0..self.len() {
            let k = self
                .clean_labels
                .row(i)
                .iter()
                .filter(|&&v| v != 0.0)
                .count();
            hist[k] += 1;
        }
        hist
    }

    /// Checks structural invariants; used after file loads.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.image.rows() != n || self.text.rows() != n || self.splits.len() != n {
            return Err(Error::shape(
                "feature, label, and split row counts disagree",
            ));
        }
        for i in 0..n {
            let row = self.clean_labels.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::config(format!("labels must be 0/1, sample {i}")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::config(format!("sample {i} has no active label")));
            }
        }
        if let Some(mask) = &self.noise_mask {
            if mask.len() != n {
                return Err(Error::shape("noise mask length mismatch"));
            }
        }
        Ok(())
    }

    /// Deterministic disjoint split assignment covering every sample.
    ///
    /// Rounded `query_fraction * n` samples become queries, then
    /// `retrieval_fraction * n` become the retrieval set, the remainder
    /// trains.
    pub fn assign_splits(
        &mut self,
        query_fraction: f64,
        retrieval_fraction: f64,
        seed: u64,
    ) -> Result<()> {
        if query_fraction <= 0.0 || retrieval_fraction <= 0.0 {
            return Err(Error::config("split fractions must be positive"));
        }
        if query_fraction + retrieval_fraction > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "split fractions sum to {} > 1",
                query_fraction + retrieval_fraction
            )));
        }
        let n = self.len();
        let n_query = ((query_fraction * n as f64).round() as usize).min(n);
        let n_retrieval = ((retrieval_fraction * n as f64).round() as usize).min(n - n_query);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            self.splits[i] = if pos < n_query {
                Split::Query
            } else if pos < n_query + n_retrieval {
                Split::Retrieval
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    /// Corrupts labels of train-split samples according to `spec`,
    /// leaving `clean_labels` untouched.
    pub fn inject_noise(&mut self, spec: &NoiseSpec) -> Result<()> {
        let eligible = self.indices_of(Split::Train);
        let (noisy, mask) = corrupt_labels(&self.clean_labels, &eligible, spec)?;
        self.noisy_labels = Some(noisy);
        self.noise_mask = Some(mask);
        Ok(())
    }
}

/// Symmetric instance-level corruption: exactly `round(rate * eligible)`
/// rows are selected; in each, every active label moves to a uniformly
/// chosen different class, keeping row cardinality and guaranteeing the
/// corrupted row differs from the original.
pub fn corrupt_labels(
    labels: &Matrix,
    eligible: &[usize],
    spec: &NoiseSpec,
) -> Result<(Matrix, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config(format!(
            "noise rate {} outside [0, 1]",
            spec.rate
        )));
    }
    let NoiseScheme::SymmetricInstance = spec.scheme;
    let num_classes = labels.cols();
    let count = (spec.rate * eligible.len() as f64).round() as usize;
    let mut noisy = labels.clone();
    let mut mask = vec![false; labels.rows()];
    if count == 0 {
        return Ok((noisy, mask));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Rows with every class active cannot change under a
    // cardinality-preserving scheme.
    let corruptible: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&i| labels.row(i).iter().filter(|&&v| v != 0.0).count() < num_classes)
        .collect();
    if corruptible.len() < count {
        return Err(Error::config(format!(
            "cannot corrupt {count} rows: only {} rows have spare classes",
            corruptible.len()
        )));
    }
    let mut order = corruptible;
    order.shuffle(&mut rng);
    for &row in order.iter().take(count) {
        let original: Vec<usize> = labels
            .row(row)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(c, _)| c)
            .collect();
        let replacement = draw_replacement(&original, num_classes, &mut rng);
        for c in 0..num_classes {
            noisy.set(row, c, 0.0);
        }
        for &c in &replacement {
            noisy.set(row, c, 1.0);
        }
        mask[row] = true;
    }
    Ok((noisy, mask))
}

fn draw_replacement(original: &[usize], num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    for _ in 0..16 {
        let mut replacement: Vec<usize> = Vec::with_capacity(original.len());
        for &orig in original {
            let choices: Vec<usize> = (0..num_classes)
                .filter(|c| *c != orig && !replacement.contains(c))
                .collect();
            replacement.push(choices[rng.random_range(0..choices.len())]);
        }
        let mut sorted = replacement.clone();
        sorted.sort_unstable();
        if sorted != original {
            return replacement;
        }
    }
    // All retries reproduced the original set as a permutation; force a
    // class outside it (one exists because the row is corruptible).
    let mut replacement: Vec<usize> = original.to_vec();
    let fresh = (0..num_classes)
        .find(|c| !original.contains(c))
        .expect("corruptible row has a spare class");
    replacement[0] = fresh;
    replacement
}

/// Generates an additive prototype-mixture dataset, deterministic in
/// `spec.seed`. All samples start in the train split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let gauss_matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64| {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let v: f64 = normal.sample(rng);
                v * scale
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("gaussian samples are finite")
    };

    let image_protos = gauss_matrix(&mut rng, spec.num_classes, spec.image_dim, spec.prototype_separation);
    let text_protos = gauss_matrix(&mut rng, spec.num_classes, spec.text_dim, spec.prototype_separation);

    let draw_label_set = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let k = rng.random_range(spec.min_labels..=spec.max_labels);
        let mut classes: Vec<usize> = (0..spec.num_classes).collect();
        classes.shuffle(rng);
        classes.truncate(k);
        // Fixed summation order keeps equal label sets bitwise equal.
        classes.sort_unstable();
        classes
    };

    let mut image = Matrix::zeros(spec.n, spec.image_dim);
    let mut text = Matrix::zeros(spec.n, spec.text_dim);
    let mut labels = Matrix::zeros(spec.n, spec.num_classes);

    for i in 0..spec.n {
        let active = draw_label_set(&mut rng);
        for &c in &active {
            labels.set(i, c, 1.0);
        }
        for &c in &active {
            for (v, p) in image.row_mut(i).iter_mut().zip(image_protos.row(c)) {
                *v += p;
            }
        }
        for v in image.row_mut(i) {
            let noise: f64 = normal.sample(&mut rng);
            *v += noise * spec.noise_std;
        }
        let text_classes = if rng.random_range(0.0..1.0) < spec.cross_modal_correlation {
            active
        } else {
            draw_label_set(&mut rng)
        };
        for &c in &text_classes {
            for (v, p) in text.row_mut(i).iter_mut().zip(text_protos.row(c)) {
                *v += p;
            }
        }
        for v in text.row_mut(i) {
            let noise: f64 = normal.sample(&mut rng);
            *v += noise * spec.noise_std;
        }
    }

    Ok(MultimodalDataset {
        image,
        text,
        clean_labels: labels,
        noisy_labels: None,
        noise_mask: None,
        splits: vec![Split::Train; spec.n],
    })
}

/// On-disk encodings of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Text,
    Binary,
}

/// Writes features and clean labels in the requested format.
pub fn save_features(dataset: &MultimodalDataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Text => save_text(dataset, path),
        FileFormat::Binary => save_binary(dataset, path),
    }
}

/// Loads a dataset file, auto-detecting the binary magic. All samples are
/// placed in the train split; invariants are validated.
pub fn load_features(path: &Path) -> Result<MultimodalDataset> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    let is_binary = match file.read_exact(&mut magic) {
        Ok(()) => &magic == BINARY_MAGIC,
        Err(_) => false,
    };
    drop(file);
    let dataset = if is_binary {
        load_binary(path)?
    } else {
        load_text(path)?
    };
    dataset.validate()?;
    Ok(dataset)
}

fn save_text(dataset: &MultimodalDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {} {}\n",
        dataset.len(),
        dataset.num_classes(),
        dataset.image_dim(),
        dataset.text_dim()
    ));
    for i in 0..dataset.len() {
        let labels: Vec<String> = dataset
            .clean_labels
            .row(i)
            .iter()
            .map(|&v| format!("{}", v as u8))
            .collect();
        let image: Vec<String> = dataset.image.row(i).iter().map(|v| format!("{v}")).collect();
        let text: Vec<String> = dataset.text.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&labels.join(" "));
        out.push_str(" | ");
        out.push_str(&image.join(" "));
        out.push_str(" | ");
        out.push_str(&text.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_text(path: &Path) -> Result<MultimodalDataset> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, 1, format!("header: {e}")))?;
    let [n, c, d1, d2] = dims[..] else {
        return Err(parse_err(path, 1, "header must be `n C D1 D2`"));
    };

    let mut labels = Matrix::zeros(n, c);
    let mut image = Matrix::zeros(n, d1);
    let mut text = Matrix::zeros(n, d2);
    let mut row = 0usize;
    for (lineno, line) in lines {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(parse_err(
                path,
                lineno,
                format!("more than the {n} data rows declared in the header"),
            ));
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 `|`-separated fields, got {}", fields.len()),
            ));
        }
        parse_floats_into(fields[0], labels.row_mut(row), "labels", path, lineno)?;
        for (j, &v) in labels.row(row).iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("label {j} is {v}, labels must be 0 or 1"),
                ));
            }
        }
        parse_floats_into(fields[1], image.row_mut(row), "image features", path, lineno)?;
        parse_floats_into(fields[2], text.row_mut(row), "text features", path, lineno)?;
        row += 1;
    }
    if row != n {
        return Err(parse_err(
            path,
            row + 1,
            format!("header declares {n} rows but file has {row}"),
        ));
    }
    Ok(MultimodalDataset {
        image,
        text,
        clean_labels: labels,
        noisy_labels: None,
        noise_mask: None,
        splits: vec![Split::Train; n],
    })
}

fn parse_floats_into(
    field: &str,
    target: &mut [f64],
    what: &str,
    path: &Path,
    lineno: usize,
) -> Result<()> {
    let mut count = 0usize;
    for token in field.split_whitespace() {
        if count >= target.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("{what}: more than {} values", target.len()),
            ));
        }
        let v: f64 = token
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("{what} value {}: {e}", count + 1)))?;
        if !v.is_finite() {
            return Err(parse_err(
                path,
                lineno,
                format!("{what} value {} is not finite", count + 1),
            ));
        }
        target[count] = v;
        count += 1;
    }
    if count != target.len() {
        return Err(parse_err(
            path,
            lineno,
            format!("{what}: expected {} values, got {count}", target.len()),
        ));
    }
    Ok(())
}

fn save_binary(dataset: &MultimodalDataset, path: &Path) -> Result<()> {
    let (n, c) = dataset.clean_labels.shape();
    let (d1, d2) = (dataset.image_dim(), dataset.text_dim());
    if c > u16::MAX as usize || d1 > u16::MAX as usize || d2 > u16::MAX as usize {
        return Err(Error::config("binary format caps C/D1/D2 at 65535"));
    }
    if n > u32::MAX as usize {
        return Err(Error::config("binary format caps n at u32::MAX"));
    }
    let mut out = Vec::with_capacity(16 + n * (c + d1 + d2) * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&(d1 as u16).to_le_bytes());
    out.extend_from_slice(&(d2 as u16).to_le_bytes());
    for i in 0..n {
        for &v in dataset.clean_labels.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in dataset.image.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in dataset.text.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn load_binary(path: &Path) -> Result<MultimodalDataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != BINARY_MAGIC {
        return Err(parse_err(path, 0, "missing binary header magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BINARY_VERSION {
        return Err(parse_err(path, 0, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let c = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let d1 = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let d2 = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let expected = 16 + n * (c + d1 + d2) * 8;
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            0,
            format!("expected {expected} bytes for {n} samples, got {}", bytes.len()),
        ));
    }
    let mut cursor = 16usize;
    let mut read_row = |target: &mut [f64]| {
        for v in target.iter_mut() {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&bytes[cursor..cursor + 8]);
            *v = f64::from_le_bytes(raw);
            cursor += 8;
        }
    };
    let mut labels = Matrix::zeros(n, c);
    let mut image = Matrix::zeros(n, d1);
    let mut text = Matrix::zeros(n, d2);
    for i in 0..n {
        read_row(labels.row_mut(i));
        read_row(image.row_mut(i));
        read_row(text.row_mut(i));
    }
    Ok(MultimodalDataset {
        image,
        text,
        clean_labels: labels,
        noisy_labels: None,
        noise_mask: None,
        splits: vec![Split::Train; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n: 60,
            num_classes: 5,
            image_dim: 8,
            text_dim: 6,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 10,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_spec_ties_features_to_labels() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            cross_modal_correlation: 1.0,
            n: 80,
            ..tiny_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                if ds.clean_labels.row(i) == ds.clean_labels.row(j) {
                    assert_eq!(ds.image.row(i), ds.image.row(j));
                    assert_eq!(ds.text.row(i), ds.text.row(j));
                }
            }
        }
    }

    #[test]
    fn every_sample_has_an_active_label() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        ds.validate().unwrap();
        let hist = ds.cardinality_histogram();
        assert_eq!(hist[0], 0);
        assert_eq!(hist.iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_spec();
        spec.max_labels = 6;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = tiny_spec();
        spec.min_labels = 0;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let mut ds = generate_synthetic(&tiny_spec()).unwrap();
        ds.assign_splits(0.1, 0.4, 3).unwrap();
        let q = ds.indices_of(Split::Query);
        let r = ds.indices_of(Split::Retrieval);
        let t = ds.indices_of(Split::Train);
        assert_eq!(q.len(), 6);
        assert_eq!(r.len(), 24);
        assert_eq!(q.len() + r.len() + t.len(), ds.len());
        assert!(q.iter().all(|i| !r.contains(i) && !t.contains(i)));

        let mut ds2 = generate_synthetic(&tiny_spec()).unwrap();
        ds2.assign_splits(0.1, 0.4, 3).unwrap();
        assert_eq!(ds.splits, ds2.splits);
    }

    #[test]
    fn full_coverage_split_leaves_no_train() {
        let mut ds = generate_synthetic(&SyntheticSpec {
            n: 1000,
            ..tiny_spec()
        })
        .unwrap();
        ds.assign_splits(0.1, 0.9, 1).unwrap();
        assert_eq!(ds.indices_of(Split::Query).len(), 100);
        assert_eq!(ds.indices_of(Split::Retrieval).len(), 900);
        assert!(ds.indices_of(Split::Train).is_empty());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let mut ds = generate_synthetic(&tiny_spec()).unwrap();
        assert!(ds.assign_splits(0.6, 0.6, 1).is_err());
        assert!(ds.assign_splits(0.0, 0.5, 1).is_err());
    }

    #[test]
    fn zero_rate_noise_is_identity() {
        let mut ds = generate_synthetic(&tiny_spec()).unwrap();
        ds.inject_noise(&NoiseSpec::default()).unwrap();
        assert_eq!(ds.noisy_labels.as_ref().unwrap(), &ds.clean_labels);
        assert!(ds.noise_mask.as_ref().unwrap().iter().all(|&m| !m));
    }

    #[test]
    fn full_rate_binary_single_label_flips_every_row() {
        let labels = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = NoiseSpec {
            rate: 1.0,
            seed: 5,
            scheme: NoiseScheme::SymmetricInstance,
        };
        let (noisy, mask) = corrupt_labels(&labels, &[0, 1, 2, 3], &spec).unwrap();
        assert!(mask.iter().all(|&m| m));
        for i in 0..4 {
            assert_eq!(noisy.get(i, 0), 1.0 - labels.get(i, 0));
            assert_eq!(noisy.get(i, 1), 1.0 - labels.get(i, 1));
        }
    }

    #[test]
    fn half_rate_corrupts_exactly_half_and_preserves_cardinality() {
        let spec = SyntheticSpec {
            n: 1000,
            ..tiny_spec()
        };
        let mut ds = generate_synthetic(&spec).unwrap();
        ds.assign_splits(0.1, 0.4, 7).unwrap();
        let clean = ds.clean_labels.clone();
        ds.inject_noise(&NoiseSpec {
            rate: 0.5,
            seed: 11,
            scheme: NoiseScheme::SymmetricInstance,
        })
        .unwrap();
        let mask = ds.noise_mask.as_ref().unwrap();
        let noisy = ds.noisy_labels.as_ref().unwrap();
        let train = ds.indices_of(Split::Train);
        let masked: Vec<usize> = (0..ds.len()).filter(|&i| mask[i]).collect();
        assert_eq!(masked.len(), train.len() / 2);
        assert!(masked.iter().all(|i| train.contains(i)));
        assert_eq!(ds.clean_labels, clean);
        for i in 0..ds.len() {
            let card = |m: &Matrix| m.row(i).iter().filter(|&&v| v != 0.0).count();
            assert_eq!(card(noisy), card(&ds.clean_labels), "cardinality changed at {i}");
            if mask[i] {
                assert_ne!(noisy.row(i), ds.clean_labels.row(i), "masked row {i} unchanged");
            } else {
                assert_eq!(noisy.row(i), ds.clean_labels.row(i), "unmasked row {i} changed");
            }
        }
    }

    #[test]
    fn noise_rate_outside_unit_interval_is_rejected() {
        let labels = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let spec = NoiseSpec {
            rate: 1.5,
            ..Default::default()
        };
        assert!(corrupt_labels(&labels, &[0], &spec).is_err());
    }

    #[test]
    fn linear_probe_recovers_labels_from_clean_features() {
        // Hand-rolled logistic regression as an independent check that the
        // default generator leaves enough signal in the features.
        let spec = SyntheticSpec {
            n: 1000,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (n, d) = ds.image.shape();
        let c = ds.num_classes();
        let mut w = vec![0.0; d * c];
        let mut b = vec![0.0; c];
        let lr = 0.5;
        for _ in 0..300 {
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            for i in 0..n {
                let x = ds.image.row(i);
                let y = ds.clean_labels.row(i);
                for cc in 0..c {
                    let logit: f64 =
                        x.iter().enumerate().map(|(j, &v)| v * w[j * c + cc]).sum::<f64>() + b[cc];
                    let err = 1.0 / (1.0 + (-logit).exp()) - y[cc];
                    for (j, &v) in x.iter().enumerate() {
                        gw[j * c + cc] += err * v / n as f64;
                    }
                    gb[cc] += err / n as f64;
                }
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= lr * g;
            }
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= lr * g;
            }
        }
        let mut correct = 0usize;
        for i in 0..n {
            let x = ds.image.row(i);
            let y = ds.clean_labels.row(i);
            for cc in 0..c {
                let logit: f64 =
                    x.iter().enumerate().map(|(j, &v)| v * w[j * c + cc]).sum::<f64>() + b[cc];
                if (logit > 0.0) == (y[cc] != 0.0) {
                    correct += 1;
                }
            }
        }
        let accuracy = correct as f64 / (n * c) as f64;
        assert!(accuracy > 0.9, "per-label probe accuracy {accuracy} too low");
    }

    #[test]
    fn text_round_trip_preserves_everything() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let dir = std::env::temp_dir().join("scbch-dataset-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.txt");
        save_features(&ds, &path, FileFormat::Text).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.image, ds.image);
        assert_eq!(loaded.text, ds.text);
        assert_eq!(loaded.clean_labels, ds.clean_labels);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn binary_round_trip_preserves_everything() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let dir = std::env::temp_dir().join("scbch-dataset-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");
        save_features(&ds, &path, FileFormat::Binary).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.image, ds.image);
        assert_eq!(loaded.text, ds.text);
        assert_eq!(loaded.clean_labels, ds.clean_labels);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_and_inconsistent_files_are_parse_errors() {
        let dir = std::env::temp_dir().join("scbch-dataset-test");
        fs::create_dir_all(&dir).unwrap();

        let path = dir.join("short.txt");
        fs::write(&path, "5 2 2 2\n1 0 | 0.1 0.2 | 0.3 0.4\n").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Parse { .. })));

        let path = dir.join("badlabel.txt");
        fs::write(&path, "1 2 1 1\n2 0 | 0.1 | 0.3\n").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Parse { .. })));

        let path = dir.join("badfield.txt");
        fs::write(&path, "1 2 1 1\n1 0 | 0.1 0.9 | 0.3\n").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Parse { .. })));

        let path = dir.join("trunc.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BINARY_MAGIC);
        bytes.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 24]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Parse { .. })));
    }
}
