//! The assembled multi-domain model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCell, BatchStats, DomainNorm, Mode, NormConfig};
use crate::backbone::{Backbone, BackboneKind, BackboneSpec};
use crate::data::{sequential_batches, Batch, Dataset, FieldSpec};
use crate::embedding::Embeddings;
use crate::error::{Error, Result};
use crate::hyper::{HyperNetwork, LowRankFactors};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Predictions are clipped to `[CLIP, 1 − CLIP]` before taking logs.
pub const CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One backbone per domain.
    PerDomain,
    /// A single backbone serves every domain.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub enabled: bool,
    /// Bottleneck width `s`.
    pub bottleneck: usize,
    /// Hidden-layer indices (1-based) followed by an adapter.
    pub sites: Vec<usize>,
    #[serde(default)]
    pub norm: NormConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Hidden width `m`.
    pub hidden: usize,
    /// Representation matrix size `k`.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_domains: u32,
    pub fields: Vec<FieldSpec>,
    pub embedding_dim: usize,
    /// Embed the domain indicator as an extra field.
    pub domain_feature: bool,
    pub sharing: Sharing,
    pub backbone: BackboneSpec,
    pub adapter: AdapterConfig,
    pub hyper: HyperConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("model.num_domains", "must be at least 1"));
        }
        if self.fields.is_empty() {
            return Err(Error::config("data.spec.fields", "at least one feature field is required"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be positive"));
        }
        self.backbone.validate()?;
        if self.adapter.enabled {
            if self.hyper.hidden == 0 {
                return Err(Error::config("hyper.hidden", "must be positive"));
            }
            if self.hyper.rank == 0 {
                return Err(Error::config("hyper.rank", "must be positive"));
            }
            if self.adapter.bottleneck == 0 {
                return Err(Error::config("adapter.bottleneck", "must be positive"));
            }
            if self.adapter.sites.is_empty() {
                return Err(Error::config("adapter.sites", "enabled adapters need at least one site"));
            }
            if self.adapter.sites.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("adapter.sites", "sites must be strictly increasing"));
            }
            for &site in &self.adapter.sites {
                let h = self.backbone.site_width(site)?;
                if self.adapter.bottleneck >= h {
                    return Err(Error::config(
                        "adapter.bottleneck",
                        format!("bottleneck {} must be below site {site} width {h}", self.adapter.bottleneck),
                    ));
                }
            }
            let norm = &self.adapter.norm;
            if !(0.0..1.0).contains(&norm.momentum) {
                return Err(Error::config("adapter.norm.momentum", "must lie in [0, 1)"));
            }
            if norm.eps <= 0.0 {
                return Err(Error::config("adapter.norm.eps", "must be positive"));
            }
        }
        Ok(())
    }

    /// Number of embedded fields, the domain field included.
    pub fn embedded_fields(&self) -> usize {
        self.fields.len() + usize::from(self.domain_feature)
    }

    pub fn embedding_width(&self) -> usize {
        self.embedded_fields() * self.embedding_dim
    }

    pub fn num_backbones(&self) -> usize {
        match self.sharing {
            Sharing::PerDomain => self.num_domains as usize,
            Sharing::Shared => 1,
        }
    }

    /// Trainable scalar count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let e = self.embedding_dim;
        let w0 = self.embedding_width();
        let mut emb: usize = self.fields.iter().map(|f| f.vocab * e).sum();
        if self.domain_feature {
            emb += (self.num_domains as usize + 1) * e;
        }
        let mut backbone = 0;
        let mut width = w0;
        for &h in &self.backbone.hidden {
            backbone += width * h + h;
            width = h;
        }
        backbone += match self.backbone.kind {
            BackboneKind::Mlp => width + 1,
            BackboneKind::Dcn => self.backbone.cross_layers * 2 * w0 + (width + w0) + 1,
            BackboneKind::WideDeep => width + 1 + self.fields.iter().map(|f| f.vocab).sum::<usize>() + 1,
        };
        let mut total = emb + backbone * self.num_backbones();
        if self.adapter.enabled {
            let (m, k, s) = (self.hyper.hidden, self.hyper.rank, self.adapter.bottleneck);
            total += w0 * m + m + m * k * k + k * k;
            let per_domain: usize = self
                .adapter
                .sites
                .iter()
                .map(|&site| {
                    let h = self.backbone.hidden[site - 1];
                    2 * (s * k + k * h) + 2 * h
                })
                .sum();
            total += per_domain * self.num_domains as usize;
        }
        total
    }
}

/// Running-stat update produced by a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub domain: u32,
    pub site: usize,
    pub stats: BatchStats,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    /// Probabilities in batch order, `B × 1`.
    pub probs: Var,
    pub stats: Vec<StatUpdate>,
}

impl Forward {
    pub fn predictions(&self) -> &[f64] {
        self.tape.value(self.probs).data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamurModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: Embeddings,
    pub backbones: Vec<Backbone>,
    pub hyper: Option<HyperNetwork>,
    /// `adapters[d - 1][j]` sits at `config.adapter.sites[j]` for domain `d`.
    pub adapters: Vec<Vec<AdapterCell>>,
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

impl HamurModel {
    /// Embeddings, backbones, hyper-network and factors draw from separate
    /// random streams, so a model with adapters shares its embedding and
    /// backbone initialization with the same-seed model without them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut fields: Vec<(String, usize)> = config.fields.iter().map(|f| (f.name.clone(), f.vocab)).collect();
        if config.domain_feature {
            fields.push(("domain".into(), config.num_domains as usize + 1));
        }
        let embeddings = Embeddings::new(&mut store, &fields, config.embedding_dim, &mut stream(seed, 0));
        let vocabs: Vec<usize> = config.fields.iter().map(|f| f.vocab).collect();
        let mut rng = stream(seed, 1);
        let backbones = (0..config.num_backbones())
            .map(|i| {
                let prefix = match config.sharing {
                    Sharing::PerDomain => format!("backbone.d{}", i + 1),
                    Sharing::Shared => "backbone.shared".to_string(),
                };
                Backbone::new(&mut store, &prefix, &config.backbone, embeddings.output_width(), &vocabs, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (hyper, adapters) = if config.adapter.enabled {
            let hyper = HyperNetwork::new(
                &mut store,
                embeddings.output_width(),
                config.hyper.hidden,
                config.hyper.rank,
                &mut stream(seed, 2),
            );
            let mut rng = stream(seed, 3);
            let adapters = (1..=config.num_domains)
                .map(|d| {
                    config
                        .adapter
                        .sites
                        .iter()
                        .map(|&site| {
                            let h = config.backbone.hidden[site - 1];
                            let prefix = format!("adapter.d{d}.site{site}");
                            AdapterCell {
                                factors: LowRankFactors::new(
                                    &mut store,
                                    &prefix,
                                    config.hyper.rank,
                                    config.adapter.bottleneck,
                                    h,
                                    &mut rng,
                                ),
                                norm: DomainNorm::new(&mut store, &prefix, h),
                            }
                        })
                        .collect()
                })
                .collect();
            (Some(hyper), adapters)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            config,
            store,
            embeddings,
            backbones,
            hyper,
            adapters,
        })
    }

    pub fn backbone_for(&self, domain: u32) -> &Backbone {
        match self.config.sharing {
            Sharing::PerDomain => &self.backbones[domain as usize - 1],
            Sharing::Shared => &self.backbones[0],
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.num_fields != self.config.fields.len() {
            return Err(Error::Data(format!(
                "batch has {} fields, model expects {}",
                batch.num_fields,
                self.config.fields.len()
            )));
        }
        if batch.groups.len() > self.config.num_domains as usize {
            return Err(Error::Data(format!(
                "batch has {} domain groups, model serves {}",
                batch.groups.len(),
                self.config.num_domains
            )));
        }
        for g in &batch.groups {
            if g.domain == 0 || g.domain > self.config.num_domains {
                return Err(Error::Data(format!(
                    "domain {} outside [1, {}]",
                    g.domain, self.config.num_domains
                )));
            }
        }
        Ok(())
    }

    /// Probabilities (`rows × 1`) for `rows` instances of one domain.
    fn forward_domain(
        &self,
        tape: &mut Tape,
        domain: u32,
        ids: &[u32],
        rows: usize,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let f = self.config.fields.len();
        let embed_ids: Vec<u32> = if self.config.domain_feature {
            let mut out = Vec::with_capacity(rows * (f + 1));
            for r in 0..rows {
                out.extend_from_slice(&ids[r * f..(r + 1) * f]);
                out.push(domain);
            }
            out
        } else {
            ids.to_vec()
        };
        let z = self.embeddings.embed(tape, &self.store, &embed_ids, rows)?;
        let backbone = self.backbone_for(domain);
        let logit = match &self.hyper {
            Some(hyper) => {
                let rep = hyper.represent(tape, &self.store, z)?;
                let cells = &self.adapters[domain as usize - 1];
                let sites = &self.config.adapter.sites;
                let norm = &self.config.adapter.norm;
                let store = &self.store;
                backbone.forward(tape, store, z, ids, &mut |tape, layer, h| {
                    match sites.iter().position(|&s| s == layer) {
                        Some(j) => {
                            let (y, st) = cells[j].forward(tape, store, h, rep, mode, norm)?;
                            if let Some(st) = st {
                                stats.push(StatUpdate {
                                    domain,
                                    site: j,
                                    stats: st,
                                });
                            }
                            Ok(y)
                        }
                        None => Ok(h),
                    }
                })?
            }
            None => backbone.forward_plain(tape, &self.store, z, ids)?,
        };
        tape.sigmoid(logit)
    }

    /// Runs every domain sub-batch through its own pipeline and scatters the
    /// probabilities back into batch order.
    pub fn forward_batch(&self, batch: &Batch, mode: Mode) -> Result<Forward> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut stats = Vec::new();
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(batch.len());
        for g in batch.groups.iter().filter(|g| !g.is_empty()) {
            parts.push(self.forward_domain(&mut tape, g.domain, &g.ids, g.len(), mode, &mut stats)?);
            order.extend_from_slice(&g.positions);
        }
        if order.len() != batch.len() {
            return Err(Error::Data("domain groups do not cover the batch".into()));
        }
        let probs = if parts.is_empty() {
            tape.constant(Tensor::zeros([0, 1]))
        } else {
            let stacked = tape.concat_rows(&parts)?;
            let mut inverse = vec![0; order.len()];
            for (i, &p) in order.iter().enumerate() {
                inverse[p] = i;
            }
            tape.gather_rows(stacked, inverse)?
        };
        Ok(Forward { tape, probs, stats })
    }

    /// Folds running statistics from a training forward pass into the model.
    pub fn apply_stats(&mut self, updates: &[StatUpdate]) -> Result<()> {
        let norm = self.config.adapter.norm;
        for u in updates {
            self.adapters[u.domain as usize - 1][u.site].norm.update(&u.stats, &norm)?;
        }
        Ok(())
    }

    /// One optimisation step on `batch`; returns the mean loss before the
    /// update.
    pub fn train_step(&mut self, batch: &Batch, adam: &mut AdamState) -> Result<f64> {
        let mut fwd = self.forward_batch(batch, Mode::Train)?;
        let labels = fwd.tape.constant(Tensor::new([batch.len(), 1], batch.labels.clone())?);
        let loss = bce_loss(&mut fwd.tape, fwd.probs, labels)?;
        let value = fwd.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = fwd.tape.backward(loss)?;
        let grads = fwd.tape.param_grads(&mut grads, self.store.len());
        adam_step(&mut self.store, &grads, adam)?;
        self.apply_stats(&fwd.stats)?;
        Ok(value)
    }

    /// Eval-mode probabilities for every instance, in dataset order.
    pub fn predict(&self, dataset: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(dataset.len());
        for batch in sequential_batches(dataset, batch_size)? {
            let fwd = self.forward_batch(&batch, Mode::Eval)?;
            out.extend_from_slice(fwd.predictions());
        }
        Ok(out)
    }

    /// Sets γ and β of every adapter to zero.
    pub fn zero_adapter_norms(&mut self) {
        for cells in &self.adapters {
            for c in cells {
                let w = c.norm.width();
                *self.store.get_mut(c.norm.gamma) = Tensor::zeros([w]);
                *self.store.get_mut(c.norm.beta) = Tensor::zeros([w]);
            }
        }
    }
}

/// Mean binary cross-entropy with predictions clipped to `[CLIP, 1 − CLIP]`.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: Var) -> Result<Var> {
    if tape.shape(probs) != tape.shape(labels) {
        return Err(Error::shape("bce_loss", tape.shape(probs), tape.shape(labels)));
    }
    if tape.value(probs).is_empty() {
        return Err(Error::Precondition("bce_loss on an empty batch".into()));
    }
    let p = tape.clip(probs, CLIP, 1.0 - CLIP)?;
    let log_p = tape.log(p)?;
    let neg = tape.mul_scalar(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let neg_y = tape.mul_scalar(labels, -1.0)?;
    let one_minus_y = tape.add_scalar(neg_y, 1.0)?;
    let a = tape.mul(labels, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll)?;
    tape.mul_scalar(mean, -1.0)
}
