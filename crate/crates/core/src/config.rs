//! Experiment configuration.
//!
//! Every omitted value is filled in on load, and [`ExperimentConfig::to_toml`]
//! writes the fully resolved form, which loads back unchanged. Defaults follow
//! the MovieLens settings; DCN and Wide & Deep get their own hyper-network
//! defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::NormConfig;
use crate::backbone::{BackboneKind, BackboneSpec};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, HyperConfig, ModelConfig, Sharing};
use crate::optim::AdamConfig;
use crate::prepare::spec_path_for;
use crate::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 2023;

/// Environment variable that overrides `output.dir`.
pub const OUT_ENV: &str = "HAMUR_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Canonical CSV file.
    pub path: PathBuf,
    pub spec: DatasetSpec,
    /// Train/validation/test ratios.
    pub split: [f64; 3],
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub domain_feature: bool,
    pub sharing: Sharing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub backbone: BackboneSpec,
    pub adapter: AdapterConfig,
    pub hyper: HyperConfig,
    pub train: TrainConfig,
    pub optim: AdamConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    data: Option<RawData>,
    model: Option<RawModel>,
    backbone: Option<RawBackbone>,
    adapter: Option<RawAdapter>,
    hyper: Option<RawHyper>,
    train: Option<TrainConfig>,
    optim: Option<AdamConfig>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: Option<PathBuf>,
    spec: Option<DatasetSpec>,
    spec_path: Option<PathBuf>,
    split: Option<[f64; 3]>,
    split_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    embedding_dim: Option<usize>,
    domain_feature: Option<bool>,
    sharing: Option<Sharing>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackbone {
    kind: Option<BackboneKind>,
    hidden: Option<Vec<usize>>,
    cross_layers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdapter {
    enabled: Option<bool>,
    bottleneck: Option<usize>,
    sites: Option<Vec<usize>>,
    norm: Option<NormConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    hidden: Option<usize>,
    rank: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Hyper-network `(m, k)` defaults per backbone kind.
pub fn default_hyper(kind: BackboneKind) -> HyperConfig {
    match kind {
        BackboneKind::Mlp => HyperConfig { hidden: 64, rank: 35 },
        BackboneKind::Dcn => HyperConfig { hidden: 128, rank: 30 },
        BackboneKind::WideDeep => HyperConfig { hidden: 128, rank: 45 },
    }
}

/// Between the last and penultimate hidden layers; after the first layer for
/// a one-layer backbone.
pub fn default_sites(hidden: &[usize]) -> Vec<usize> {
    vec![hidden.len().saturating_sub(1).max(1)]
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses `text`; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().to_string())
                .map(|line| format!("line {line}"))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        let data = raw.data.unwrap_or_default();
        let path = resolve_path(
            base_dir,
            &data.path.ok_or_else(|| Error::config("data.path", "is required"))?,
        );
        let spec = match (data.spec, data.spec_path) {
            (Some(_), Some(_)) => {
                return Err(Error::config("data.spec", "give either an inline spec or spec_path, not both"))
            }
            (Some(spec), None) => spec,
            (None, Some(p)) => DatasetSpec::load(&resolve_path(base_dir, &p))?,
            (None, None) => {
                let sidecar = spec_path_for(&path);
                if !sidecar.exists() {
                    return Err(Error::Data(format!(
                        "no data.spec given and no sidecar {} found",
                        sidecar.display()
                    )));
                }
                DatasetSpec::load(&sidecar)?
            }
        };
        let model = raw.model.unwrap_or_default();
        let bb = raw.backbone.unwrap_or_default();
        let kind = bb.kind.unwrap_or(BackboneKind::Mlp);
        let hidden = bb.hidden.unwrap_or_else(|| vec![256, 128]);
        let cross_layers = bb
            .cross_layers
            .unwrap_or(if kind == BackboneKind::Dcn { 2 } else { 0 });
        let ad = raw.adapter.unwrap_or_default();
        let hy = raw.hyper.unwrap_or_default();
        let hyper_default = default_hyper(kind);
        let output_dir = match std::env::var_os(OUT_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => resolve_path(
                base_dir,
                &raw.output
                    .and_then(|o| o.dir)
                    .unwrap_or_else(|| PathBuf::from("runs").join(kind.name())),
            ),
        };
        let config = ExperimentConfig {
            seed: raw.seed.unwrap_or(DEFAULT_SEED),
            data: DataConfig {
                path,
                spec,
                split: data.split.unwrap_or([0.8, 0.1, 0.1]),
                split_seed: data.split_seed.unwrap_or(DEFAULT_SEED),
            },
            model: ModelSection {
                embedding_dim: model.embedding_dim.unwrap_or(16),
                domain_feature: model.domain_feature.unwrap_or(true),
                sharing: model.sharing.unwrap_or(Sharing::PerDomain),
            },
            adapter: AdapterConfig {
                enabled: ad.enabled.unwrap_or(true),
                bottleneck: ad.bottleneck.unwrap_or(32),
                sites: ad.sites.unwrap_or_else(|| default_sites(&hidden)),
                norm: ad.norm.unwrap_or_default(),
            },
            backbone: BackboneSpec {
                kind,
                hidden,
                cross_layers,
            },
            hyper: HyperConfig {
                hidden: hy.hidden.unwrap_or(hyper_default.hidden),
                rank: hy.rank.unwrap_or(hyper_default.rank),
            },
            train: raw.train.unwrap_or_default(),
            optim: raw.optim.unwrap_or_default(),
            output: OutputConfig { dir: output_dir },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", "ratios must be non-negative and sum to 1"));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be positive"));
        }
        self.train.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optim.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optim.beta2", "must lie in [0, 1)"));
        }
        if o.eps <= 0.0 {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_domains: self.data.spec.num_domains,
            fields: self.data.spec.fields.clone(),
            embedding_dim: self.model.embedding_dim,
            domain_feature: self.model.domain_feature,
            sharing: self.model.sharing,
            backbone: self.backbone.clone(),
            adapter: self.adapter.clone(),
            hyper: self.hyper,
        }
    }

    /// Fully resolved configuration text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}
