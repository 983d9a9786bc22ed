//! Domain-specific adapter cell with domain normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::LowRankFactors;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
    pub eps: f64,
    /// Stop gradients through the batch mean and variance.
    pub detach_stats: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            eps: 1e-5,
            detach_stats: false,
        }
    }
}

/// Statistics of one training sub-batch, to be folded into running stats
/// once the step is done.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-domain scale/shift and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl DomainNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([width])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([width])),
            running_mean: Tensor::zeros([width]),
            running_var: Tensor::ones([width]),
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// `running ← ρ·running + (1 − ρ)·batch`.
    pub fn update(&mut self, stats: &BatchStats, config: &NormConfig) -> Result<()> {
        if stats.mean.shape() != self.running_mean.shape() || stats.var.shape() != self.running_var.shape() {
            return Err(Error::shape("running stats", stats.mean.shape(), self.running_mean.shape()));
        }
        let rho = config.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = rho * *r + (1.0 - rho) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = rho * *r + (1.0 - rho) * b;
        }
        Ok(())
    }
}

/// `γ ⊙ (x − μ)/√(σ² + ε) + β`. Train mode takes μ, σ² from `x` and returns
/// them; eval mode uses the running statistics. An empty train sub-batch is
/// passed through untouched with no statistics.
pub fn domain_norm(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    norm: &DomainNorm,
    mode: Mode,
    config: &NormConfig,
) -> Result<(Var, Option<BatchStats>)> {
    let (b, h) = tape.value(x).dims2()?;
    if h != norm.width() {
        return Err(Error::shape("domain_norm", &[b, h], &[b, norm.width()]));
    }
    if b == 0 {
        return Ok((x, None));
    }
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let (mut mean, mut var) = tape.batch_stats(x)?;
            let stats = BatchStats {
                mean: tape.value(mean).clone(),
                var: tape.value(var).clone(),
            };
            if config.detach_stats {
                mean = tape.detach(mean)?;
                var = tape.detach(var)?;
            }
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            tape.constant(norm.running_mean.clone()),
            tape.constant(norm.running_var.clone()),
            None,
        ),
    };
    let mean = tape.broadcast_rows(mean, b)?;
    let centered = tape.sub(x, mean)?;
    let std = tape.add_scalar(var, config.eps)?;
    let std = tape.sqrt(std)?;
    let std = tape.broadcast_rows(std, b)?;
    let normed = tape.div(centered, std)?;
    let gamma = tape.param(store, norm.gamma);
    let gamma = tape.broadcast_rows(gamma, b)?;
    let beta = tape.param(store, norm.beta);
    let beta = tape.broadcast_rows(beta, b)?;
    let scaled = tape.mul(normed, gamma)?;
    Ok((tape.add(scaled, beta)?, stats))
}

/// `DN(V_i · σ(U_i · x_i)) + x_i` with explicit per-instance weights
/// `U` (`b × s × h`) and `V` (`b × h × s`).
#[allow(clippy::too_many_arguments)]
pub fn adapter_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    u: Var,
    v: Var,
    norm: &DomainNorm,
    mode: Mode,
    config: &NormConfig,
) -> Result<(Var, Option<BatchStats>)> {
    let (b, h) = tape.value(x).dims2()?;
    let (bu, s, hu) = tape.value(u).dims3()?;
    let (bv, hv, sv) = tape.value(v).dims3()?;
    if bu != b || hu != h {
        return Err(Error::shape("adapter U", &[bu, s, hu], &[b, s, h]));
    }
    if bv != b || hv != h || sv != s {
        return Err(Error::shape("adapter V", &[bv, hv, sv], &[b, h, s]));
    }
    let xc = tape.reshape(x, [b, h, 1])?;
    let down = tape.bmm(u, xc)?;
    let act = tape.sigmoid(down)?;
    let up = tape.bmm(v, act)?;
    let up = tape.reshape(up, [b, h])?;
    let (normed, stats) = domain_norm(tape, store, up, norm, mode, config)?;
    Ok((tape.add(normed, x)?, stats))
}

/// One adapter at one backbone site for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCell {
    pub factors: LowRankFactors,
    pub norm: DomainNorm,
}

impl AdapterCell {
    /// Same result as [`adapter_forward`] on the generated weights, computed
    /// without materialising them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rep: Var,
        mode: Mode,
        config: &NormConfig,
    ) -> Result<(Var, Option<BatchStats>)> {
        let down = self.factors.down(tape, store, rep, x)?;
        let act = tape.sigmoid(down)?;
        let up = self.factors.up(tape, store, rep, act)?;
        let (normed, stats) = domain_norm(tape, store, up, &self.norm, mode, config)?;
        Ok((tape.add(normed, x)?, stats))
    }
}
