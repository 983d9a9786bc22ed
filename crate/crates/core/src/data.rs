//! Dataset ingestion, stratified splitting and mini-batching.
//!
//! The canonical on-disk format is a UTF-8 CSV with a header row: a `domain`
//! column (1-based), a `label` column (0/1) and one integer column per
//! declared feature field. Category id 0 is reserved in every field for
//! out-of-vocabulary values; ids outside `[1, vocab)` are mapped to it.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id for categories outside the vocabulary.
pub const OOV_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    /// Number of ids including the reserved OOV id 0.
    pub vocab: usize,
}

/// Raw values of one column that all map to the same domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainMapping {
    pub values: Vec<i64>,
    pub domain: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRule {
    pub column: String,
    pub map: Vec<DomainMapping>,
}

impl DomainRule {
    pub fn domain_of(&self, value: i64) -> Option<u32> {
        self.map
            .iter()
            .find(|m| m.values.contains(&value))
            .map(|m| m.domain)
    }
}

/// `label = 1` iff the column value is at least `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub column: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_domains: u32,
    pub fields: Vec<FieldSpec>,
    /// Used when the CSV has no `domain` column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_rule: Option<DomainRule>,
    /// Used when the CSV has no `label` column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rule: Option<LabelRule>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("data.spec.num_domains", "must be at least 1"));
        }
        if self.fields.is_empty() {
            return Err(Error::config("data.spec.fields", "at least one feature field is required"));
        }
        for f in &self.fields {
            if f.vocab < 2 {
                return Err(Error::config(
                    format!("data.spec.fields.{}", f.name),
                    "vocab must be at least 2 (OOV id plus one category)",
                ));
            }
            if f.name == "domain" || f.name == "label" {
                return Err(Error::config("data.spec.fields", format!("`{}` is a reserved column name", f.name)));
            }
        }
        if let Some(rule) = &self.domain_rule {
            for m in &rule.map {
                if m.domain == 0 || m.domain > self.num_domains {
                    return Err(Error::config(
                        "data.spec.domain_rule",
                        format!("domain {} outside [1, {}]", m.domain, self.num_domains),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec =
            toml::from_str(text).map_err(|e| Error::config("data.spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read dataset spec {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// One row: `(field index, category id)` pairs, a 1-based domain and a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub features: Vec<(usize, u32)>,
    pub domain: u32,
    pub label: u8,
}

/// Column-oriented, immutable collection of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    features: Vec<u32>,
    domains: Vec<u32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, features: Vec<u32>, domains: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        spec.validate()?;
        let f = spec.num_fields();
        if features.len() != domains.len() * f || labels.len() != domains.len() {
            return Err(Error::Data(format!(
                "inconsistent columns: {} feature ids, {} domains, {} labels for {f} fields",
                features.len(),
                domains.len(),
                labels.len()
            )));
        }
        for (i, &d) in domains.iter().enumerate() {
            if d == 0 || d > spec.num_domains {
                return Err(Error::Data(format!(
                    "instance {i}: domain {d} outside [1, {}]",
                    spec.num_domains
                )));
            }
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Data(format!("instance {i}: label {} is not binary", labels[i])));
        }
        for (j, row) in features.chunks(f.max(1)).enumerate() {
            for (k, &id) in row.iter().enumerate() {
                if id as usize >= spec.fields[k].vocab {
                    return Err(Error::Lookup {
                        field: spec.fields[k].name.clone(),
                        id,
                        vocab: spec.fields[k].vocab,
                    });
                }
            }
            let _ = j;
        }
        Ok(Self {
            spec,
            features,
            domains,
            labels,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.spec.num_fields()
    }

    pub fn features(&self, i: usize) -> &[u32] {
        let f = self.num_fields();
        &self.features[i * f..(i + 1) * f]
    }

    pub fn domain(&self, i: usize) -> u32 {
        self.domains[i]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn domains(&self) -> &[u32] {
        &self.domains
    }

    pub fn instance(&self, i: usize) -> Instance {
        Instance {
            features: self.features(i).iter().copied().enumerate().collect(),
            domain: self.domains[i],
            label: self.labels[i],
        }
    }

    /// Instance counts per domain, indexed by `domain - 1`.
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_domains as usize];
        for &d in &self.domains {
            counts[d as usize - 1] += 1;
        }
        counts
    }

    /// New dataset holding the given rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let f = self.num_fields();
        let mut features = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            features.extend_from_slice(self.features(r));
        }
        Dataset {
            spec: self.spec.clone(),
            features,
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["domain".to_string(), "label".to_string()];
        header.extend(self.spec.fields.iter().map(|f| f.name.clone()));
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            record.clear();
            record.push(self.domains[i].to_string());
            record.push(self.labels[i].to_string());
            record.extend(self.features(i).iter().map(|id| id.to_string()));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Reads a canonical CSV file.
pub fn load_csv(path: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    load_csv_from(file, spec)
}

pub fn load_csv_from<R: Read>(reader: R, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);

    let field_cols = spec
        .fields
        .iter()
        .map(|f| {
            column(&f.name).ok_or_else(|| Error::config("data.csv", format!("missing column `{}`", f.name)))
        })
        .collect::<Result<Vec<_>>>()?;

    enum DomainSource<'a> {
        Column(usize),
        Rule(usize, &'a DomainRule),
    }
    let domain_src = match (column("domain"), &spec.domain_rule) {
        (Some(c), _) => DomainSource::Column(c),
        (None, Some(rule)) => DomainSource::Rule(
            column(&rule.column).ok_or_else(|| {
                Error::config("data.csv", format!("missing domain rule column `{}`", rule.column))
            })?,
            rule,
        ),
        (None, None) => return Err(Error::config("data.csv", "missing column `domain` and no domain rule")),
    };
    enum LabelSource<'a> {
        Column(usize),
        Rule(usize, &'a LabelRule),
    }
    let label_src = match (column("label"), &spec.label_rule) {
        (Some(c), _) => LabelSource::Column(c),
        (None, Some(rule)) => LabelSource::Rule(
            column(&rule.column).ok_or_else(|| {
                Error::config("data.csv", format!("missing label rule column `{}`", rule.column))
            })?,
            rule,
        ),
        (None, None) => return Err(Error::config("data.csv", "missing column `label` and no label rule")),
    };

    let mut features = Vec::new();
    let mut domains = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = i + 2;
        let record = record.map_err(csv_err)?;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let parse_int = |c: usize| -> Result<i64> {
            cell(c).parse::<i64>().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("`{}` is not an integer", cell(c)),
            })
        };
        let domain = match domain_src {
            DomainSource::Column(c) => {
                let d = parse_int(c)?;
                if d < 1 || d > spec.num_domains as i64 {
                    return Err(Error::Data(format!(
                        "row {row}: domain {d} outside [1, {}]",
                        spec.num_domains
                    )));
                }
                d as u32
            }
            DomainSource::Rule(c, rule) => {
                let v = parse_int(c)?;
                rule.domain_of(v).ok_or_else(|| {
                    Error::Data(format!(
                        "row {row}: value {v} of `{}` has no domain mapping",
                        rule.column
                    ))
                })?
            }
        };
        let label = match label_src {
            LabelSource::Column(c) => match parse_int(c)? {
                0 => 0,
                1 => 1,
                other => {
                    return Err(Error::Parse {
                        row,
                        column: "label".into(),
                        message: format!("label {other} is not 0 or 1"),
                    })
                }
            },
            LabelSource::Rule(c, rule) => {
                let v: f64 = cell(c).parse().map_err(|_| Error::Parse {
                    row,
                    column: rule.column.clone(),
                    message: format!("`{}` is not a number", cell(c)),
                })?;
                u8::from(v >= rule.threshold)
            }
        };
        for (k, &c) in field_cols.iter().enumerate() {
            let raw = parse_int(c)?;
            let vocab = spec.fields[k].vocab as i64;
            features.push(if raw >= 1 && raw < vocab { raw as u32 } else { OOV_ID });
        }
        domains.push(domain);
        labels.push(label);
    }
    Dataset::new(spec.clone(), features, domains, labels)
}

/// Dense 1-based ids for the distinct raw values of one column.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `value`, assigning the next free id on first sight.
    pub fn insert(&mut self, value: &str) -> u32 {
        if let Some(&id) = self.index.get(value) {
            return id;
        }
        self.values.push(value.to_string());
        let id = self.values.len() as u32;
        self.index.insert(value.to_string(), id);
        id
    }

    /// Id of a known value, or [`OOV_ID`].
    pub fn encode(&self, value: &str) -> u32 {
        self.index.get(value).copied().unwrap_or(OOV_ID)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        if id == OOV_ID {
            return None;
        }
        self.values.get(id as usize - 1).map(String::as_str)
    }

    /// Table size including the OOV slot.
    pub fn size(&self) -> usize {
        self.values.len() + 1
    }
}

/// Seeded random split, stratified by domain.
///
/// Within each domain, `round(r_train · n)` instances go to train,
/// `round(r_valid · n)` to validation and the rest to test. Each split keeps
/// the original row order.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "data.split",
            format!("ratios {ratios:?} must be non-negative and sum to 1"),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); dataset.spec.num_domains as usize];
    for i in 0..dataset.len() {
        by_domain[dataset.domain(i) as usize - 1].push(i);
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut rows in by_domain {
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_train = ((rt * n as f64).round() as usize).min(n);
        let n_valid = ((rv * n as f64).round() as usize).min(n - n_train);
        train.extend_from_slice(&rows[..n_train]);
        valid.extend_from_slice(&rows[n_train..n_train + n_valid]);
        test.extend_from_slice(&rows[n_train + n_valid..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&valid), dataset.subset(&test)))
}

/// The instances of one domain inside a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGroup {
    pub domain: u32,
    /// Positions within the batch, ascending.
    pub positions: Vec<usize>,
    /// Category ids, `positions.len() × num_fields`, row-major.
    pub ids: Vec<u32>,
    pub labels: Vec<f64>,
}

impl DomainGroup {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A mini-batch grouped by domain. `groups[d - 1]` holds domain `d`, possibly
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Dataset row of each batch position.
    pub rows: Vec<usize>,
    pub labels: Vec<f64>,
    pub num_fields: usize,
    pub groups: Vec<DomainGroup>,
}

impl Batch {
    pub fn from_rows(dataset: &Dataset, rows: &[usize]) -> Batch {
        let f = dataset.num_fields();
        let mut groups: Vec<DomainGroup> = (1..=dataset.spec.num_domains)
            .map(|domain| DomainGroup {
                domain,
                positions: Vec::new(),
                ids: Vec::new(),
                labels: Vec::new(),
            })
            .collect();
        for (pos, &r) in rows.iter().enumerate() {
            let g = &mut groups[dataset.domain(r) as usize - 1];
            g.positions.push(pos);
            g.ids.extend_from_slice(dataset.features(r));
            g.labels.push(f64::from(dataset.label(r)));
        }
        Batch {
            rows: rows.to_vec(),
            labels: rows.iter().map(|&r| f64::from(dataset.label(r))).collect(),
            num_fields: f,
            groups,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Iterator over the mini-batches of one epoch.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = Batch::from_rows(self.dataset, &self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// One shuffled pass over `dataset`; the order depends only on
/// `(seed, epoch)`. The final batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Batches in dataset order, for evaluation.
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("train.eval_batch_size", "must be at least 1"));
    }
    Ok(Batches {
        dataset,
        order: (0..dataset.len()).collect(),
        batch_size,
        cursor: 0,
    })
}
