//! The census income table: 8 categorical and 6 integer attributes plus a
//! binary salary label, encoded to 104 numeric features.

use std::path::Path;

use super::{digest_bytes, read_file, split, Dataset, DatasetKind, Features, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attribute names in column order, with whether each is categorical.
const SCHEMA: [(&str, bool); 14] = [
    ("age", false),
    ("workclass", true),
    ("fnlwgt", false),
    ("education", true),
    ("education-num", false),
    ("marital-status", true),
    ("occupation", true),
    ("relationship", true),
    ("race", true),
    ("sex", true),
    ("capital-gain", false),
    ("capital-loss", false),
    ("hours-per-week", false),
    ("native-country", true),
];

pub const ADULT_CATEGORICAL: [&str; 8] = [
    "workclass",
    "education",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "native-country",
];
pub const ADULT_INTEGER: [&str; 6] = [
    "age",
    "fnlwgt",
    "education-num",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
];
/// Category counts after null rows are removed, in [`ADULT_CATEGORICAL`] order.
const CARDINALITY: [usize; 8] = [7, 16, 7, 14, 6, 5, 2, 41];
pub const ADULT_FEATURES: usize = 104;

const LABEL_NAMES: [&str; 4] = ["salary", "income", "class", "label"];

#[derive(Clone, Debug, PartialEq)]
pub struct AdultRecord {
    /// In [`ADULT_CATEGORICAL`] order.
    pub categorical: Vec<String>,
    /// In [`ADULT_INTEGER`] order.
    pub integer: Vec<f64>,
    /// 1 for `>50K`.
    pub label: usize,
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['_', ' '], "-")
}

/// Reads the header-led CSV, dropping every row that contains a `?` field.
/// Values are trimmed and a trailing `.` on the label is ignored.
pub fn read_csv_records(path: &Path) -> Result<Vec<AdultRecord>> {
    let bytes = read_file(path)?;
    parse_records(&bytes, path)
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<Vec<AdultRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .flexible(true)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, Some(1), e.to_string()))?
        .iter()
        .map(normalize)
        .collect();
    let column = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::SchemaDrift {
            attribute: name.to_string(),
            detail: "missing column".into(),
        })
    };
    for (name, _) in SCHEMA {
        column(name)?;
    }
    let cat_cols: Vec<usize> = ADULT_CATEGORICAL.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let int_cols: Vec<usize> = ADULT_INTEGER.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let label_col = LABEL_NAMES
        .iter()
        .find_map(|l| header.iter().position(|h| h == l))
        .ok_or_else(|| Error::SchemaDrift {
            attribute: "salary".into(),
            detail: "missing label column".into(),
        })?;

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(path, e.position().map(|p| p.line() as usize), e.to_string()))?;
        let line = row.position().map(|p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("{} fields, header has {}", row.len(), header.len()),
            ));
        }
        if row.iter().any(|f| f == "?") {
            continue;
        }
        let integer = int_cols
            .iter()
            .zip(ADULT_INTEGER)
            .map(|(&c, name)| {
                row[c]
                    .parse::<i64>()
                    .map(|v| v as f64)
                    .map_err(|_| Error::parse(path, line, format!("`{name}` is not an integer: {:?}", &row[c])))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = match row[label_col].trim_end_matches('.') {
            ">50K" => 1,
            "<=50K" => 0,
            other => return Err(Error::parse(path, line, format!("unknown salary label {other:?}"))),
        };
        out.push(AdultRecord {
            categorical: cat_cols.iter().map(|&c| row[c].to_string()).collect(),
            integer,
            label,
        });
    }
    Ok(out)
}

/// Category vocabularies in first-appearance order.
fn vocabularies(records: &[AdultRecord]) -> Vec<Vec<String>> {
    let mut vocab: Vec<Vec<String>> = vec![Vec::new(); ADULT_CATEGORICAL.len()];
    for r in records {
        for (v, value) in vocab.iter_mut().zip(&r.categorical) {
            if !v.contains(value) {
                v.push(value.clone());
            }
        }
    }
    vocab
}

fn check_vocab(vocab: &[Vec<String>]) -> Result<()> {
    let width: usize = vocab.iter().map(Vec::len).sum::<usize>() + ADULT_INTEGER.len();
    if width == ADULT_FEATURES {
        return Ok(());
    }
    let (k, v) = vocab
        .iter()
        .enumerate()
        .find(|(k, v)| v.len() != CARDINALITY[*k])
        .expect("some attribute differs when the width is wrong");
    Err(Error::SchemaDrift {
        attribute: ADULT_CATEGORICAL[k].to_string(),
        detail: format!(
            "{} categories where {} are expected ({width} features instead of {ADULT_FEATURES})",
            v.len(),
            CARDINALITY[k]
        ),
    })
}

/// One-hot and raw-integer encoding in schema column order, plus the
/// vocabularies used. Integers are left unstandardized.
pub fn encode_adult(records: &[AdultRecord], vocab: Option<&[Vec<String>]>) -> Result<(Tensor, Vec<Vec<String>>)> {
    let vocab = match vocab {
        Some(v) => v.to_vec(),
        None => vocabularies(records),
    };
    let width: usize = vocab.iter().map(Vec::len).sum::<usize>() + ADULT_INTEGER.len();
    let mut data = Vec::with_capacity(records.len() * width);
    for r in records {
        let (mut c, mut i) = (0, 0);
        for (_, categorical) in SCHEMA {
            if categorical {
                let pos = vocab[c].iter().position(|v| *v == r.categorical[c]).ok_or_else(|| Error::SchemaDrift {
                    attribute: ADULT_CATEGORICAL[c].to_string(),
                    detail: format!("unseen category {:?}", r.categorical[c]),
                })?;
                let base = data.len();
                data.resize(base + vocab[c].len(), 0.0);
                data[base + pos] = 1.0;
                c += 1;
            } else {
                data.push(r.integer[i]);
                i += 1;
            }
        }
    }
    let t = Tensor::new(vec![records.len().max(1), width], data)?;
    Ok((t, vocab))
}

/// Column offsets of the integer attributes in the encoded layout.
fn integer_columns(vocab: &[Vec<String>]) -> Vec<usize> {
    let mut cols = Vec::new();
    let (mut offset, mut c) = (0, 0);
    for (_, categorical) in SCHEMA {
        if categorical {
            offset += vocab[c].len();
            c += 1;
        } else {
            cols.push(offset);
            offset += 1;
        }
    }
    cols
}

/// Standardizes the integer columns with statistics from `train` rows only.
fn standardize(x: &mut Tensor, cols: &[usize], train: &[usize]) {
    let w = x.row_len();
    for &c in cols {
        let vals: Vec<f64> = train.iter().map(|&i| x.data()[i * w + c]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let data = x.data_mut();
        for r in 0..data.len() / w {
            data[r * w + c] = (data[r * w + c] - mean) / sd;
        }
    }
}

fn vocab_digest(raw: &[&[u8]], vocab: &[Vec<String>]) -> String {
    let order = vocab.iter().map(|v| v.join("\u{1f}")).collect::<Vec<_>>().join("\u{1e}");
    let mut chunks: Vec<&[u8]> = vec![b"adult-v1"];
    chunks.extend_from_slice(raw);
    chunks.push(order.as_bytes());
    digest_bytes(chunks)
}

fn build(x: Tensor, labels: Vec<usize>, source: String, digest: String) -> Result<Dataset> {
    Dataset::new(
        DatasetKind::Tabular,
        Features::Dense(x),
        labels,
        None,
        2,
        Provenance { source, digest },
    )
}

/// One file: stratified 2/3 – 1/3 split with seed 0.
pub fn load_tabular_csv(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let records = parse_records(&bytes, path)?;
    if records.len() < 2 {
        return Err(Error::parse(path, None, "fewer than two usable rows"));
    }
    let vocab = vocabularies(&records);
    check_vocab(&vocab)?;
    let (x, vocab) = encode_adult(&records, Some(&vocab))?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let digest = vocab_digest(&[&bytes], &vocab);
    let mut d = split(build(x, labels, path.display().to_string(), digest)?, &[2.0 / 3.0, 1.0 / 3.0], 0)?;
    let train = d.split("train")?.to_vec();
    if let Features::Dense(x) = &mut d.features {
        standardize(x, &integer_columns(&vocab), &train);
    }
    Ok(d)
}

/// Official-style train and test files; categories come from the train file.
pub fn load_tabular_csv_pair(train_path: &Path, test_path: &Path) -> Result<Dataset> {
    let train_bytes = read_file(train_path)?;
    let test_bytes = read_file(test_path)?;
    let train = parse_records(&train_bytes, train_path)?;
    let test = parse_records(&test_bytes, test_path)?;
    let vocab = vocabularies(&train);
    check_vocab(&vocab)?;
    let all: Vec<AdultRecord> = train.iter().chain(&test).cloned().collect();
    let (mut x, vocab) = encode_adult(&all, Some(&vocab))?;
    let n_train = train.len();
    let train_idx: Vec<usize> = (0..n_train).collect();
    standardize(&mut x, &integer_columns(&vocab), &train_idx);
    let labels = all.iter().map(|r| r.label).collect();
    let digest = vocab_digest(&[&train_bytes, &test_bytes], &vocab);
    let source = format!("{};{}", train_path.display(), test_path.display());
    let mut d = build(x, labels, source, digest)?;
    d.splits.insert("train".into(), train_idx);
    d.splits.insert("test".into(), (n_train..all.len()).collect());
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,capital-gain,capital-loss,hours-per-week,native-country,salary\n";

    #[test]
    fn null_rows_are_dropped() {
        let body = format!(
            "{HEADER}39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n\
             50, ?, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K\n\
             38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, >50K.\n"
        );
        let recs = parse_records(body.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].label, 1);
        assert_eq!(recs[0].categorical[0], "State-gov");
        assert_eq!(recs[1].integer[1], 215646.0);
    }

    #[test]
    fn bad_integer_is_a_parse_error() {
        let body = format!(
            "{HEADER}x39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n"
        );
        let err = parse_records(body.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn missing_column_names_the_attribute() {
        let err = parse_records(b"age,workclass\n1,a\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::SchemaDrift { ref attribute, .. } if attribute == "fnlwgt"));
    }

    #[test]
    fn small_vocabulary_is_schema_drift() {
        let body = format!(
            "{HEADER}39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n"
        );
        let recs = parse_records(body.as_bytes(), Path::new("mem")).unwrap();
        let err = check_vocab(&vocabularies(&recs)).unwrap_err();
        assert!(matches!(err, Error::SchemaDrift { ref attribute, .. } if attribute == "workclass"));
    }

    #[test]
    fn encoding_layout() {
        let recs = vec![
            AdultRecord {
                categorical: ["a", "b", "c", "d", "e", "f", "g", "h"].map(String::from).to_vec(),
                integer: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                label: 0,
            },
            AdultRecord {
                categorical: ["a2", "b", "c", "d", "e", "f", "g", "h"].map(String::from).to_vec(),
                integer: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                label: 1,
            },
        ];
        let (x, vocab) = encode_adult(&recs, None).unwrap();
        assert_eq!(x.shape(), &[2, 15]);
        // age, workclass (2), fnlwgt, ...
        assert_eq!(&x.row(1)[..4], &[1.0, 0.0, 1.0, 2.0]);
        assert_eq!(integer_columns(&vocab), vec![0, 3, 5, 11, 12, 13]);
    }
}
