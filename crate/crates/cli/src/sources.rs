//! Turns the `data` section of a config into the tensors a trainer takes.

use std::path::Path;

use mmd_repr::data::{
    parse_csv_matrix, parse_idx_images, parse_idx_labels, split, synth_domains, tfidf, Corpus,
    Dataset, SynthSpec, VocabFilter, Vocabulary, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use mmd_repr::experiments::{DaData, InvariantData};
use mmd_repr::rng::{stream, streams};
use mmd_repr::{Error, Tensor};

use crate::config::{DaSource, GmmnSource, ImageSource, InvariantSource, TextFeatures};
use crate::error::{CliError, CliResult};

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn magic(bytes: &[u8]) -> Option<u32> {
    bytes
        .get(..4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Names the file in parse errors.
fn in_file<T>(path: &Path, r: mmd_repr::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => CliError::Usage(format!(
            "{}: parse error at byte {offset}: {message}",
            path.display()
        )),
        Error::Data(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

/// An IDX image file (pixels scaled to `[0, 1]`) or a header-less CSV matrix.
pub fn load_matrix(path: &Path) -> CliResult<Tensor> {
    let bytes = read_bytes(path)?;
    if magic(&bytes) == Some(IDX_IMAGES_MAGIC) {
        return in_file(path, parse_idx_images(&bytes));
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        CliError::Usage(format!(
            "{}: neither IDX images nor CSV text",
            path.display()
        ))
    })?;
    in_file(path, parse_csv_matrix(&text))
}

/// An IDX label file or a one-column CSV of non-negative integers.
pub fn load_labels(path: &Path) -> CliResult<Vec<usize>> {
    let bytes = read_bytes(path)?;
    if magic(&bytes) == Some(IDX_LABELS_MAGIC) {
        return in_file(path, parse_idx_labels(&bytes));
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        CliError::Usage(format!(
            "{}: neither IDX labels nor CSV text",
            path.display()
        ))
    })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>().map_err(|_| {
                CliError::Usage(format!(
                    "{}: line {}: {l:?} is not a label",
                    path.display(),
                    i + 1
                ))
            })
        })
        .collect()
}

fn rows(data: &Dataset, range: std::ops::Range<usize>) -> Dataset {
    data.select(&range.collect::<Vec<_>>())
}

fn alternate(data: &Dataset, parity: usize) -> Dataset {
    data.select(&(parity..data.len()).step_by(2).collect::<Vec<_>>())
}

/// Source/target splits for the domain adaptation trainer.
pub fn da_data(source: &DaSource, seed: u64) -> CliResult<DaData> {
    match source {
        DaSource::Synth { spec } => {
            let all = synth_domains(spec, &mut stream(seed, streams::DATA))?;
            if all.num_domains() < 2 {
                return Err(CliError::Usage(
                    "synthetic data must have a source and a target domain".into(),
                ));
            }
            let (src, tgt) = (all.domain(0), all.domain(1));
            Ok(DaData {
                source_train: alternate(&src, 0),
                source_valid: alternate(&src, 1),
                target_train: alternate(&tgt, 0).without_labels(),
                target_test: Some(alternate(&tgt, 1)),
            })
        }
        DaSource::Text {
            source,
            target,
            min_count,
            features,
            source_split,
            target_split,
        } => {
            let src = in_file(source, Corpus::parse(&read_text(source)?))?;
            let tgt = in_file(target, Corpus::parse(&read_text(target)?))?;
            let vocab = Vocabulary::build([&src, &tgt]);
            let pooled = vocab.counts(&src).concat(&vocab.counts(&tgt))?;
            let filter = VocabFilter::fit(&pooled, &vocab, *min_count)?;
            let pooled = match features {
                TextFeatures::Tfidf => tfidf(&pooled, &filter)?,
                TextFeatures::Counts => filter.apply(&pooled)?,
            };
            let n_src = src.len();
            let src = rows(&pooled, 0..n_src);
            let tgt = rows(&pooled, n_src..pooled.len());
            let mut rng = stream(seed, streams::DATA);
            let (s_train, s_valid, _) = split(&src, *source_split, &mut rng)?;
            let (t_train, _, t_test) = split(&tgt, *target_split, &mut rng)?;
            Ok(DaData {
                source_train: s_train,
                source_valid: s_valid,
                target_train: t_train.without_labels(),
                target_test: (!t_test.is_empty()).then_some(t_test),
            })
        }
    }
}

fn labeled_csv(path: &Path) -> CliResult<Dataset> {
    let m = load_matrix(path)?;
    if m.cols() < 3 {
        return Err(CliError::Usage(format!(
            "{}: expected columns label, domain, features...",
            path.display()
        )));
    }
    let as_index = |v: f64, what: &str| -> CliResult<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CliError::Usage(format!(
                "{}: {what} {v} is not a non-negative integer",
                path.display()
            )))
        }
    };
    let mut labels = Vec::with_capacity(m.rows());
    let mut domains = Vec::with_capacity(m.rows());
    let mut features = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        labels.push(as_index(row[0], "label")?);
        domains.push(as_index(row[1], "domain")?);
        features.push(row[2..].to_vec());
    }
    Ok(Dataset::new(
        Tensor::from_rows(&features)?,
        Some(labels),
        Some(domains),
    )?)
}

/// Multi-domain training rows and held-out test rows.
pub fn invariant_data(source: &InvariantSource, seed: u64) -> CliResult<InvariantData> {
    match source {
        InvariantSource::Synth {
            spec,
            train_domains,
        } => {
            let SynthSpec::FiveShiftDomains { domains, .. } = spec else {
                return Err(CliError::Usage(
                    "invariant synthetic data must be five_shift_domains".into(),
                ));
            };
            if *train_domains == 0 || train_domains >= domains {
                return Err(CliError::Usage(format!(
                    "train_domains must be between 1 and {}",
                    domains - 1
                )));
            }
            let all = synth_domains(spec, &mut stream(seed, streams::DATA))?;
            let d = all.domains.as_ref().expect("synthetic domains are labeled");
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..all.len()).partition(|&i| d[i] < *train_domains);
            Ok(InvariantData {
                train: all.select(&train),
                test: all.select(&test),
            })
        }
        InvariantSource::Csv { train, test } => Ok(InvariantData {
            train: labeled_csv(train)?,
            test: labeled_csv(test)?,
        }),
    }
}

/// Training pixels and labeled held-out images.
pub fn image_data(source: &ImageSource) -> CliResult<(Tensor, Dataset)> {
    let images = load_matrix(&source.images)?;
    let labels = load_labels(&source.labels)?;
    let all = Dataset::new(images, Some(labels), None)?;
    let need = source.train_rows + source.heldout_rows;
    if source.train_rows == 0 || need > all.len() {
        return Err(CliError::Usage(format!(
            "{} training + {} held-out rows requested from {} images",
            source.train_rows,
            source.heldout_rows,
            all.len()
        )));
    }
    let train = rows(&all, 0..source.train_rows).features;
    Ok((train, rows(&all, source.train_rows..need)))
}

/// Training and held-out rows for the generator.
pub fn gmmn_data(source: &GmmnSource, seed: u64) -> CliResult<(Tensor, Tensor)> {
    match source {
        GmmnSource::Idx {
            images,
            train_rows,
            heldout_rows,
        } => {
            let all = load_matrix(images)?;
            let need = train_rows + heldout_rows;
            if need > all.rows() {
                return Err(CliError::Usage(format!(
                    "{need} rows requested from {} images",
                    all.rows()
                )));
            }
            let pick = |r: std::ops::Range<usize>| all.select_rows(&r.collect::<Vec<_>>());
            Ok((pick(0..*train_rows), pick(*train_rows..need)))
        }
        GmmnSource::Synth { spec, heldout_rows } => {
            let mut rng = stream(seed, streams::DATA);
            let train = synth_domains(spec, &mut rng)?.features;
            let heldout = synth_domains(spec, &mut rng)?.features;
            let keep = (*heldout_rows).min(heldout.rows());
            Ok((train, heldout.select_rows(&(0..keep).collect::<Vec<_>>())))
        }
    }
}
