//! Dataset loading, preprocessing and synthetic generators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature matrix with optional per-row class and domain labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domains: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        domains: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        for (what, v) in [("labels", &labels), ("domains", &domains)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Data(format!("{} {what} for {n} rows", v.len())));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            domains,
        })
    }

    pub fn unlabeled(features: Tensor) -> Self {
        Self {
            features,
            labels: None,
            domains: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `1 + max label`, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn num_domains(&self) -> usize {
        self.domains
            .as_ref()
            .and_then(|d| d.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect();
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(pick),
            domains: self.domains.as_ref().map(pick),
        }
    }

    /// Rows whose domain label equals `domain`.
    pub fn domain(&self, domain: usize) -> Self {
        let idx: Vec<usize> = match &self.domains {
            Some(d) => (0..self.len()).filter(|&i| d[i] == domain).collect(),
            None => Vec::new(),
        };
        self.select(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let join = |a: &Option<Vec<usize>>, b: &Option<Vec<usize>>| match (a, b) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        Self::new(
            self.features.vstack(&other.features)?,
            join(&self.labels, &other.labels),
            join(&self.domains, &other.domains),
        )
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!("truncated header while reading {what}"),
        })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file into a `count x (rows*cols)` tensor scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic number {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(Error::Parse {
            offset: 16 + body.len(),
            message: format!(
                "truncated pixel data: {count} images of {pixels} bytes need {} bytes, found {}",
                count * pixels,
                body.len()
            ),
        });
    }
    let data = body[..count * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Tensor::from_vec(count, pixels, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic number {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Parse {
            offset: 8 + body.len(),
            message: format!("truncated labels: expected {count}, found {}", body.len()),
        });
    }
    Ok(body[..count].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image file and its label file (MNIST layout).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let features = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != features.rows() {
        return Err(Error::Parse {
            offset: 4,
            message: format!(
                "label file holds {} items but image file holds {}",
                labels.len(),
                features.rows()
            ),
        });
    }
    Dataset::new(features, Some(labels), None)
}

/// One pre-counted document.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub label: usize,
    pub terms: Vec<(String, f64)>,
}

/// Bag-of-words corpus, one document per line:
/// `label<TAB>term:count term:count ...`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn parse(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                offset: start,
                message,
            };
            let (label, rest) = line
                .split_once('\t')
                .ok_or_else(|| err("missing tab after label".into()))?;
            let label = label
                .trim()
                .parse::<usize>()
                .map_err(|e| err(format!("bad label {label:?}: {e}")))?;
            let mut terms = Vec::new();
            for tok in rest.split_whitespace() {
                let (term, count) = tok
                    .rsplit_once(':')
                    .ok_or_else(|| err(format!("token {tok:?} is not term:count")))?;
                let count = count
                    .parse::<f64>()
                    .map_err(|e| err(format!("bad count in {tok:?}: {e}")))?;
                if !(count >= 0.0 && count.is_finite()) {
                    return Err(err(format!("negative or non-finite count in {tok:?}")));
                }
                terms.push((term.to_string(), count));
            }
            docs.push(Document { label, terms });
        }
        Ok(Self { docs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Term to column map over one or more corpora, in sorted term order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let mut terms: BTreeMap<String, usize> = BTreeMap::new();
        for c in corpora {
            for d in &c.docs {
                for (t, _) in &d.terms {
                    terms.entry(t.clone()).or_insert(0);
                }
            }
        }
        for (i, v) in terms.values_mut().enumerate() {
            *v = i;
        }
        Self { index: terms }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn column(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Raw count matrix of `corpus` over this vocabulary, with document labels.
    /// Terms outside the vocabulary are ignored.
    pub fn counts(&self, corpus: &Corpus) -> Dataset {
        let mut features = Tensor::zeros(corpus.len(), self.len());
        for (r, d) in corpus.docs.iter().enumerate() {
            for (t, c) in &d.terms {
                if let Some(col) = self.column(t) {
                    let v = features.get(r, col) + c;
                    features.set(r, col, v);
                }
            }
        }
        let labels = corpus.docs.iter().map(|d| d.label).collect();
        Dataset {
            features,
            labels: Some(labels),
            domains: None,
        }
    }
}

/// Columns whose corpus-wide count reaches `min_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabFilter {
    pub min_count: f64,
    /// retained term -> output column
    pub columns: BTreeMap<String, usize>,
    source_columns: Vec<usize>,
}

impl VocabFilter {
    pub fn fit(counts: &Dataset, vocab: &Vocabulary, min_count: f64) -> Result<Self> {
        if counts.dim() != vocab.len() {
            return Err(Error::dim(
                "vocab_filter",
                format!("{} count columns for {} terms", counts.dim(), vocab.len()),
            ));
        }
        let totals = counts.features.column_sums();
        let mut columns = BTreeMap::new();
        let mut source_columns = Vec::new();
        for (term, col) in vocab.terms().zip(0..) {
            if totals.data()[col] >= min_count {
                columns.insert(term.to_string(), source_columns.len());
                source_columns.push(col);
            }
        }
        Ok(Self {
            min_count,
            columns,
            source_columns,
        })
    }

    pub fn len(&self) -> usize {
        self.source_columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_columns.is_empty()
    }

    /// Word-count features restricted to the retained terms.
    pub fn apply(&self, counts: &Dataset) -> Result<Dataset> {
        let max = self.source_columns.iter().max().copied().unwrap_or(0);
        if !self.is_empty() && max >= counts.dim() {
            return Err(Error::dim(
                "vocab_filter",
                format!(
                    "filter expects at least {} columns, got {}",
                    max + 1,
                    counts.dim()
                ),
            ));
        }
        let mut features = Tensor::zeros(counts.len(), self.len());
        for r in 0..counts.len() {
            let src = counts.features.row(r);
            for (dst, &c) in features.row_mut(r).iter_mut().zip(&self.source_columns) {
                *dst = src[c];
            }
        }
        Dataset::new(features, counts.labels.clone(), counts.domains.clone())
    }
}

/// Drops filtered-out columns, weights each count by `ln(N_docs / df)` and
/// L2-normalizes every non-zero row.
pub fn tfidf(counts: &Dataset, filter: &VocabFilter) -> Result<Dataset> {
    if filter.is_empty() {
        return Err(Error::Data(format!(
            "no term reaches the minimum count of {}",
            filter.min_count
        )));
    }
    if counts.features.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Data("negative term count".into()));
    }
    let mut kept = filter.apply(counts)?;
    let n_docs = kept.len() as f64;
    let x = &mut kept.features;
    let df: Vec<usize> = (0..x.cols())
        .map(|c| (0..x.rows()).filter(|&r| x.get(r, c) > 0.0).count())
        .collect();
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| {
            if d == 0 {
                0.0
            } else {
                (n_docs / d as f64).ln()
            }
        })
        .collect();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        for (v, w) in row.iter_mut().zip(&idf) {
            *v *= w;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Disjoint shuffled train/valid/test partition.
pub fn split<R: Rng + ?Sized>(
    data: &Dataset,
    sizes: SplitSizes,
    rng: &mut R,
) -> Result<(Dataset, Dataset, Dataset)> {
    let total = sizes.train + sizes.valid + sizes.test;
    if total > data.len() {
        return Err(Error::Usage(format!(
            "split of {total} rows requested from {} rows",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let (train, rest) = idx.split_at(sizes.train);
    let (valid, rest) = rest.split_at(sizes.valid);
    let test = &rest[..sizes.test];
    Ok((data.select(train), data.select(valid), data.select(test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BernoulliZero,
}

/// Input corruption: each coordinate is zeroed independently with probability `rate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub rate: f64,
}

impl CorruptionSpec {
    pub fn bernoulli(rate: f64) -> Self {
        Self {
            kind: CorruptionKind::BernoulliZero,
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "corruption rate {} not in [0, 1]",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Zeroes entries independently; survivors are left untouched (no rescaling).
pub fn corrupt<R: Rng + ?Sized>(x: &Tensor, spec: &CorruptionSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    if spec.rate == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        if rng.random::<f64>() < spec.rate {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Parameters of the synthetic dataset generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    /// Two Gaussian classes at `±separation/2` along the first axis. The
    /// source domain (0) is drawn as is; the target domain (1) is the same
    /// distribution rotated by `rotation_deg` in the first two axes and then
    /// translated by `translation` along the second axis.
    TwoDomainBlobs {
        dim: usize,
        per_class: usize,
        separation: f64,
        noise: f64,
        rotation_deg: f64,
        translation: f64,
    },
    /// `classes` cluster centers ~ N(0, class_spread²), `domains` offset
    /// vectors ~ N(0, domain_shift²); a sample is center + offset + N(0, noise²).
    /// With `shift_dims = k` the offsets live in the first `k` coordinates
    /// only, so every domain varies along the same few directions.
    FiveShiftDomains {
        dim: usize,
        classes: usize,
        domains: usize,
        per_cell: usize,
        class_spread: f64,
        domain_shift: f64,
        noise: f64,
        #[serde(default)]
        shift_dims: Option<usize>,
    },
    /// `components` isotropic Gaussians with std `noise` whose means are
    /// evenly spaced on a circle of `radius` (starting at `(radius, 0)`).
    Ring2d {
        n: usize,
        components: usize,
        radius: f64,
        noise: f64,
    },
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws a synthetic dataset. Class labels, when meaningful, are in
/// `labels`; domain labels are in `domains`.
pub fn synth_domains<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    match *spec {
        SynthSpec::TwoDomainBlobs {
            dim,
            per_class,
            separation,
            noise,
            rotation_deg,
            translation,
        } => {
            if dim < 2 || per_class == 0 {
                return Err(Error::Config(
                    "two_domain_blobs needs dim >= 2 and per_class >= 1".into(),
                ));
            }
            let (sin, cos) = rotation_deg.to_radians().sin_cos();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            let mut domains = Vec::new();
            for domain in 0..2 {
                for class in 0..2 {
                    let center = if class == 0 {
                        -separation / 2.0
                    } else {
                        separation / 2.0
                    };
                    for _ in 0..per_class {
                        let mut x: Vec<f64> = (0..dim).map(|_| noise * normal(rng)).collect();
                        x[0] += center;
                        if domain == 1 {
                            let (a, b) = (x[0], x[1]);
                            x[0] = cos * a - sin * b;
                            x[1] = sin * a + cos * b + translation;
                        }
                        rows.push(x);
                        labels.push(class);
                        domains.push(domain);
                    }
                }
            }
            Dataset::new(Tensor::from_rows(&rows)?, Some(labels), Some(domains))
        }
        SynthSpec::FiveShiftDomains {
            dim,
            classes,
            domains: n_domains,
            per_cell,
            class_spread,
            domain_shift,
            noise,
            shift_dims,
        } => {
            if dim == 0 || classes == 0 || n_domains == 0 || per_cell == 0 {
                return Err(Error::Config(
                    "five_shift_domains sizes must be positive".into(),
                ));
            }
            let shift_dims = shift_dims.unwrap_or(dim);
            if shift_dims > dim {
                return Err(Error::Config(format!(
                    "shift_dims {shift_dims} exceeds dim {dim}"
                )));
            }
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| class_spread * normal(rng)).collect())
                .collect();
            let offsets: Vec<Vec<f64>> = (0..n_domains)
                .map(|_| {
                    (0..dim)
                        .map(|k| {
                            if k < shift_dims {
                                domain_shift * normal(rng)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            let mut domains = Vec::new();
            for (d, off) in offsets.iter().enumerate() {
                for (c, center) in centers.iter().enumerate() {
                    for _ in 0..per_cell {
                        rows.push(
                            (0..dim)
                                .map(|k| center[k] + off[k] + noise * normal(rng))
                                .collect::<Vec<_>>(),
                        );
                        labels.push(c);
                        domains.push(d);
                    }
                }
            }
            Dataset::new(Tensor::from_rows(&rows)?, Some(labels), Some(domains))
        }
        SynthSpec::Ring2d {
            n,
            components,
            radius,
            noise,
        } => {
            if components == 0 {
                return Err(Error::Config("ring2d needs at least one component".into()));
            }
            let mut data = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..components);
                let angle = 2.0 * PI * k as f64 / components as f64;
                data.push(radius * angle.cos() + noise * normal(rng));
                data.push(radius * angle.sin() + noise * normal(rng));
                labels.push(k);
            }
            Dataset::new(Tensor::from_vec(n, 2, data)?, Some(labels), None)
        }
    }
}

/// Reads a header-less CSV of doubles, one row per line.
pub fn parse_csv_matrix(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    offset: start,
                    message: format!("bad number {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    offset: start,
                    message: format!("row has {} fields, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_csv_matrix(&std::fs::read_to_string(path)?)
}

pub fn format_csv_matrix(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
