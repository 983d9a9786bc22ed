//! MLP, DCN and Wide & Deep backbones with adapter hook points.
//!
//! Hidden layer `p` (1-based) is followed by a hook that may replace its
//! output; adapter sites are expressed as those indices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Dcn,
    WideDeep,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Mlp => "mlp",
            BackboneKind::Dcn => "dcn",
            BackboneKind::WideDeep => "wide_deep",
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BackboneKind::Mlp),
            "dcn" => Ok(BackboneKind::Dcn),
            "wide_deep" => Ok(BackboneKind::WideDeep),
            other => Err(Error::config("backbone.kind", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Widths of the hidden layers of the MLP or deep tower.
    pub hidden: Vec<usize>,
    /// Cross layers (DCN only).
    #[serde(default)]
    pub cross_layers: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("backbone.hidden", "needs at least one layer, all widths positive"));
        }
        if self.kind == BackboneKind::Dcn && self.cross_layers == 0 {
            return Err(Error::config("backbone.cross_layers", "dcn needs at least one cross layer"));
        }
        Ok(())
    }

    /// Output width of hidden layer `site` (1-based).
    pub fn site_width(&self, site: usize) -> Result<usize> {
        if site == 0 || site > self.hidden.len() {
            return Err(Error::config(
                "adapter.sites",
                format!("site {site} outside [1, {}]", self.hidden.len()),
            ));
        }
        Ok(self.hidden[site - 1])
    }
}

/// Affine layer `x·W + b`, `W` drawn from `±1/√in`, `b` zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::uniform([input, output], 1.0 / (input as f64).sqrt(), rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros([output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        let b = tape.broadcast_rows(b, rows)?;
        tape.add(y, b)
    }
}

/// `x_{l+1} = x_0 ⊙ (x_l · w) + b + x_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl CrossLayer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x0: Var, xl: Var) -> Result<Var> {
        let (rows, width) = tape.value(x0).dims2()?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let s = tape.matmul(xl, w)?;
        let s = tape.broadcast_cols(s, width)?;
        let y = tape.mul(x0, s)?;
        let b = tape.broadcast_rows(b, rows)?;
        let y = tape.add(y, b)?;
        tape.add(y, xl)
    }
}

/// Per-field scalar weights over the raw categorical ids, plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WideLinear {
    pub tables: Vec<ParamId>,
    pub bias: ParamId,
}

impl WideLinear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32], rows: usize) -> Result<Var> {
        let f = self.tables.len();
        if ids.len() != rows * f {
            return Err(Error::shape("wide", &[ids.len()], &[rows, f]));
        }
        let bias = tape.param(store, self.bias);
        let mut acc = tape.broadcast_rows(bias, rows)?;
        for (k, &id) in self.tables.iter().enumerate() {
            let table = tape.param(store, id);
            let vocab = store.get(id).shape()[0];
            let idx: Vec<usize> = (0..rows).map(|r| ids[r * f + k] as usize).collect();
            if let Some(&bad) = idx.iter().find(|&&i| i >= vocab) {
                return Err(Error::Lookup {
                    field: store.name(id).to_string(),
                    id: bad as u32,
                    vocab,
                });
            }
            let w = tape.gather_rows(table, idx)?;
            acc = tape.add(acc, w)?;
        }
        Ok(acc)
    }
}

/// Hook called after every hidden layer with its 1-based index.
pub type Hook<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Var> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub layers: Vec<Dense>,
    pub cross: Vec<CrossLayer>,
    pub wide: Option<WideLinear>,
    pub output: Dense,
}

impl Backbone {
    /// `input` is the embedding width; `vocabs` are the raw field vocabularies
    /// feeding the wide part.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &BackboneSpec,
        input: usize,
        vocabs: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden.len());
        let mut width = input;
        for (i, &h) in spec.hidden.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{prefix}.layer{}", i + 1), width, h, rng));
            width = h;
        }
        let mut cross = Vec::new();
        let mut wide = None;
        let head_in = match spec.kind {
            BackboneKind::Mlp => width,
            BackboneKind::Dcn => {
                for l in 0..spec.cross_layers {
                    let bound = 1.0 / (input as f64).sqrt();
                    cross.push(CrossLayer {
                        w: store.add(format!("{prefix}.cross{}.w", l + 1), Tensor::uniform([input, 1], bound, rng)),
                        b: store.add(format!("{prefix}.cross{}.b", l + 1), Tensor::zeros([input])),
                    });
                }
                width + input
            }
            BackboneKind::WideDeep => {
                let tables = vocabs
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| store.add(format!("{prefix}.wide{}", k + 1), Tensor::zeros([v, 1])))
                    .collect();
                wide = Some(WideLinear {
                    tables,
                    bias: store.add(format!("{prefix}.wide_bias"), Tensor::zeros([1])),
                });
                width
            }
        };
        let output = Dense::new(store, &format!("{prefix}.output"), head_in, 1, rng);
        Ok(Self {
            kind: spec.kind,
            layers,
            cross,
            wide,
            output,
        })
    }

    /// Logits (`rows × 1`) for embeddings `x` and raw ids `ids`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ids: &[u32],
        hook: &mut Hook<'_>,
    ) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            h = tape.relu(h)?;
            h = hook(tape, i + 1, h)?;
        }
        match self.kind {
            BackboneKind::Mlp => self.output.forward(tape, store, h),
            BackboneKind::Dcn => {
                let mut xl = x;
                for c in &self.cross {
                    xl = c.forward(tape, store, x, xl)?;
                }
                let joined = tape.concat_cols(&[xl, h])?;
                self.output.forward(tape, store, joined)
            }
            BackboneKind::WideDeep => {
                let deep = self.output.forward(tape, store, h)?;
                let wide = self
                    .wide
                    .as_ref()
                    .expect("wide part exists for wide_deep")
                    .forward(tape, store, ids, rows)?;
                tape.add(deep, wide)
            }
        }
    }

    pub fn forward_plain(&self, tape: &mut Tape, store: &ParamStore, x: Var, ids: &[u32]) -> Result<Var> {
        self.forward(tape, store, x, ids, &mut |_, _, h| Ok(h))
    }

    /// Every parameter owned by this backbone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in self.layers.iter().chain(std::iter::once(&self.output)) {
            ids.extend([d.w, d.b]);
        }
        for c in &self.cross {
            ids.extend([c.w, c.b]);
        }
        if let Some(w) = &self.wide {
            ids.extend(w.tables.iter().copied());
            ids.push(w.bias);
        }
        ids
    }
}
