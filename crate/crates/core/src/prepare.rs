//! Raw dataset conversion into the canonical CSV layout.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec, DomainMapping, DomainRule, FieldSpec, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub instances: usize,
    pub num_domains: u32,
    /// Vocabulary of the label-bearing field `x1`, OOV slot included.
    pub key_vocab: usize,
    /// Number of uninformative fields.
    pub noise_fields: usize,
    pub noise_vocab: usize,
    /// Probability of flipping each label.
    pub label_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            instances: 10_000,
            num_domains: 3,
            key_vocab: 11,
            noise_fields: 2,
            noise_vocab: 8,
            label_noise: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> DatasetSpec {
        let mut fields = vec![FieldSpec {
            name: "x1".into(),
            vocab: self.key_vocab,
        }];
        for i in 0..self.noise_fields {
            fields.push(FieldSpec {
                name: format!("x{}", i + 2),
                vocab: self.noise_vocab,
            });
        }
        DatasetSpec {
            num_domains: self.num_domains,
            fields,
            domain_rule: None,
            label_rule: None,
        }
    }
}

/// Domains drawn uniformly; `label = parity(x1) XOR parity(domain)`, each
/// label flipped with probability `label_noise`.
pub fn synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if config.instances == 0 {
        return Err(Error::config("synthetic.instances", "must be positive"));
    }
    if config.key_vocab < 3 {
        return Err(Error::config("synthetic.key_vocab", "needs at least two non-OOV values"));
    }
    if !(0.0..=0.5).contains(&config.label_noise) {
        return Err(Error::config("synthetic.label_noise", "must lie in [0, 0.5]"));
    }
    let spec = config.spec();
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.instances;
    let f = spec.num_fields();
    let mut features = Vec::with_capacity(n * f);
    let mut domains = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let d = rng.gen_range(1..=config.num_domains);
        let x1 = rng.gen_range(1..config.key_vocab as u32);
        features.push(x1);
        for _ in 0..config.noise_fields {
            features.push(rng.gen_range(1..config.noise_vocab as u32));
        }
        let mut y = ((x1 % 2) ^ (d % 2)) as u8;
        if config.label_noise > 0.0 && rng.gen_bool(config.label_noise) {
            y ^= 1;
        }
        domains.push(d);
        labels.push(y);
    }
    Dataset::new(spec, features, domains, labels)
}

/// Age code to domain: {1, 18} → 1, {25} → 2, {35, 45, 50, 56} → 3.
pub fn movielens_age_rule() -> DomainRule {
    DomainRule {
        column: "age".into(),
        map: vec![
            DomainMapping {
                values: vec![1, 18],
                domain: 1,
            },
            DomainMapping {
                values: vec![25],
                domain: 2,
            },
            DomainMapping {
                values: vec![35, 45, 50, 56],
                domain: 3,
            },
        ],
    }
}

/// Ratings at or above this value are positives.
pub const MOVIELENS_POSITIVE_RATING: u32 = 4;

pub const MOVIELENS_FIELDS: [&str; 9] = [
    "user_id",
    "gender",
    "age",
    "occupation",
    "zip",
    "zip_prefix",
    "zip_region",
    "movie_id",
    "genre",
];

/// Reads a `::`-separated file, decoding bytes as Latin-1.
fn read_dat(path: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let text: String = bytes.iter().map(|&b| b as char).collect();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split("::").map(str::to_string).collect();
        if cells.len() != columns {
            return Err(Error::Parse {
                row: i + 1,
                column: name,
                message: format!("expected {columns} `::`-separated columns, found {}", cells.len()),
            });
        }
        rows.push(cells);
    }
    Ok(rows)
}

struct User {
    gender: String,
    age: i64,
    occupation: String,
    zip: String,
}

/// Converts the MovieLens-1M `ratings.dat`, `users.dat` and `movies.dat` in
/// `raw_dir` into a dataset with one row per rating.
pub fn movielens(raw_dir: &Path) -> Result<Dataset> {
    let users = read_dat(&raw_dir.join("users.dat"), 5)?;
    let movies = read_dat(&raw_dir.join("movies.dat"), 3)?;
    let ratings = read_dat(&raw_dir.join("ratings.dat"), 4)?;
    let int = |s: &str, row: usize, column: &str| -> Result<i64> {
        s.trim().parse().map_err(|_| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{s}` is not an integer"),
        })
    };

    let mut user_map = HashMap::new();
    for (i, u) in users.iter().enumerate() {
        user_map.insert(
            u[0].clone(),
            User {
                gender: u[1].clone(),
                age: int(&u[2], i + 1, "users.dat age")?,
                occupation: u[3].clone(),
                zip: u[4].clone(),
            },
        );
    }
    let mut genre_map = HashMap::new();
    for m in &movies {
        let first = m[2].split('|').next().unwrap_or("").to_string();
        genre_map.insert(m[0].clone(), first);
    }

    let rule = movielens_age_rule();
    let mut vocabs: Vec<Vocabulary> = (0..MOVIELENS_FIELDS.len()).map(|_| Vocabulary::new()).collect();
    let mut features = Vec::with_capacity(ratings.len() * MOVIELENS_FIELDS.len());
    let mut domains = Vec::with_capacity(ratings.len());
    let mut labels = Vec::with_capacity(ratings.len());
    for (i, r) in ratings.iter().enumerate() {
        let row = i + 1;
        let user = user_map
            .get(&r[0])
            .ok_or_else(|| Error::Data(format!("ratings.dat row {row}: unknown user {}", r[0])))?;
        let genre = genre_map
            .get(&r[1])
            .ok_or_else(|| Error::Data(format!("ratings.dat row {row}: unknown movie {}", r[1])))?;
        let rating = int(&r[2], row, "ratings.dat rating")?;
        let domain = rule
            .domain_of(user.age)
            .ok_or_else(|| Error::Data(format!("user {}: age code {} has no domain", r[0], user.age)))?;
        let zip = user.zip.trim();
        let prefix: String = zip.chars().take(3).collect();
        let region: String = zip.chars().take(1).collect();
        let age = user.age.to_string();
        let values = [
            r[0].as_str(),
            user.gender.as_str(),
            age.as_str(),
            user.occupation.as_str(),
            zip,
            prefix.as_str(),
            region.as_str(),
            r[1].as_str(),
            genre.as_str(),
        ];
        for (v, value) in vocabs.iter_mut().zip(values) {
            features.push(v.insert(value));
        }
        domains.push(domain);
        labels.push(u8::from(rating >= MOVIELENS_POSITIVE_RATING as i64));
    }
    let spec = DatasetSpec {
        num_domains: 3,
        fields: MOVIELENS_FIELDS
            .iter()
            .zip(&vocabs)
            .map(|(name, v)| FieldSpec {
                name: name.to_string(),
                vocab: v.size().max(2),
            })
            .collect(),
        domain_rule: None,
        label_rule: None,
    };
    Dataset::new(spec, features, domains, labels)
}

/// Writes `<stem>.csv` and its `<stem>.spec.toml` sidecar.
pub fn write_prepared(dataset: &Dataset, csv_path: &Path) -> Result<std::path::PathBuf> {
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    dataset.write_csv(csv_path)?;
    let spec_path = spec_path_for(csv_path);
    std::fs::write(&spec_path, dataset.spec().to_toml())?;
    Ok(spec_path)
}

pub fn spec_path_for(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("spec.toml")
}
