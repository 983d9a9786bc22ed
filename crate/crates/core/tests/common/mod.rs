#![allow(dead_code)]

pub mod oracle;

use hamur_core::adapter::NormConfig;
use hamur_core::backbone::{BackboneKind, BackboneSpec};
use hamur_core::data::{Batch, Dataset, DatasetSpec, FieldSpec};
use hamur_core::model::{AdapterConfig, HamurModel, HyperConfig, ModelConfig, Sharing};
use hamur_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
/// Gradients with both norms below this are compared absolutely.
pub const ZERO_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Central differences of `f` with respect to every entry of every input.
pub fn finite_diff(mut f: impl FnMut(&[Tensor]) -> f64, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

pub fn rel_error(a: &Tensor, n: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(n.data()));
    if scale < ZERO_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn toy_spec(domains: u32) -> DatasetSpec {
    DatasetSpec {
        num_domains: domains,
        fields: vec![
            FieldSpec {
                name: "a".into(),
                vocab: 5,
            },
            FieldSpec {
                name: "b".into(),
                vocab: 4,
            },
        ],
        domain_rule: None,
        label_rule: None,
    }
}

/// Small model: e=4, k=3, s=2, h=6.
pub fn toy_config(kind: BackboneKind, domains: u32, adapters: bool) -> ModelConfig {
    let spec = toy_spec(domains);
    ModelConfig {
        num_domains: domains,
        fields: spec.fields,
        embedding_dim: 4,
        domain_feature: true,
        sharing: Sharing::PerDomain,
        backbone: BackboneSpec {
            kind,
            hidden: vec![6, 6],
            cross_layers: 2,
        },
        adapter: AdapterConfig {
            enabled: adapters,
            bottleneck: 2,
            sites: vec![1],
            norm: NormConfig::default(),
        },
        hyper: HyperConfig { hidden: 5, rank: 3 },
    }
}

pub fn toy_dataset(n: usize, domains: u32, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let spec = toy_spec(domains);
    let features = (0..n).flat_map(|_| [r.gen_range(0..5u32), r.gen_range(0..4u32)]).collect();
    let doms = (0..n).map(|i| (i as u32 % domains) + 1).collect();
    let labels = (0..n).map(|_| r.gen_range(0..2u8)).collect();
    Dataset::new(spec, features, doms, labels).unwrap()
}

pub fn whole_batch(ds: &Dataset) -> Batch {
    Batch::from_rows(ds, &(0..ds.len()).collect::<Vec<_>>())
}

/// Replaces every parameter by a random draw in [-1, 1) so no pre-activation
/// sits on a ReLU kink and every path carries gradient.
pub fn randomize(model: &mut HamurModel, seed: u64) {
    let mut r = rng(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let shape = model.store.get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        *model.store.get_mut(id) = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    }
}

/// Copies every parameter of `src` whose name also exists in `dst`.
pub fn copy_shared_params(src: &HamurModel, dst: &mut HamurModel) -> usize {
    let mut copied = 0;
    for (dst_id, name) in dst.store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if let Some((_, p)) = src.store.iter().find(|(_, p)| p.name == name) {
            *dst.store.get_mut(dst_id) = p.value.clone();
            copied += 1;
        }
    }
    copied
}

/// Random running statistics, variances in [0.5, 2).
pub fn randomize_running_stats(model: &mut HamurModel, seed: u64) {
    let mut r = rng(seed);
    for cells in &mut model.adapters {
        for c in cells {
            let w = c.norm.width();
            c.norm.running_mean = Tensor::new([w], (0..w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            c.norm.running_var = Tensor::new([w], (0..w).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap();
        }
    }
}

/// Safety factor on the per-evaluation rounding error of a composed loss.
pub const ROUNDOFF_FACTOR: f64 = 10.0;

/// Norm bound on the central-difference rounding error for a tensor of `n`
/// entries: `ROUNDOFF_FACTOR · ε · |loss| · √n / FD_STEP`.
pub fn roundoff_bound(loss: f64, n: usize) -> f64 {
    ROUNDOFF_FACTOR * f64::EPSILON * loss.abs() * (n as f64).sqrt() / FD_STEP
}

/// Tensors whose gradient norm is at least `roundoff_bound / FD_TOL` are held
/// to `FD_TOL` relative error; smaller ones to `roundoff_bound` absolutely.
pub struct ModelGradCheck {
    pub worst_rel: f64,
    /// Largest ratio of absolute error to its roundoff bound.
    pub worst_abs_small: f64,
    pub resolvable: usize,
    pub small: usize,
}

impl ModelGradCheck {
    pub fn passes(&self) -> bool {
        self.worst_rel < FD_TOL && self.worst_abs_small <= 1.0
    }
}

fn toy_loss(model: &HamurModel, batch: &Batch) -> f64 {
    use hamur_core::adapter::Mode;
    let mut fwd = model.forward_batch(batch, Mode::Train).unwrap();
    let y = fwd.tape.constant(Tensor::new([batch.len(), 1], batch.labels.clone()).unwrap());
    let l = hamur_core::model::bce_loss(&mut fwd.tape, fwd.probs, y).unwrap();
    fwd.tape.value(l).data()[0]
}

/// Train-mode BCE gradients of a randomized toy model (B = 5, D = 2) against
/// central differences, tensor by tensor.
pub fn check_model_gradients(kind: BackboneKind, seed: u64) -> ModelGradCheck {
    use hamur_core::adapter::Mode;
    let mut model = HamurModel::new(toy_config(kind, 2, true), seed).unwrap();
    randomize(&mut model, seed);
    let ds = toy_dataset(5, 2, seed);
    let batch = whole_batch(&ds);

    let mut fwd = model.forward_batch(&batch, Mode::Train).unwrap();
    let y = fwd.tape.constant(Tensor::new([5, 1], batch.labels.clone()).unwrap());
    let l = hamur_core::model::bce_loss(&mut fwd.tape, fwd.probs, y).unwrap();
    let loss = fwd.tape.value(l).data()[0];
    let mut g = fwd.tape.backward(l).unwrap();
    let grads = fwd.tape.param_grads(&mut g, model.store.len());

    let mut out = ModelGradCheck {
        worst_rel: 0.0,
        worst_abs_small: 0.0,
        resolvable: 0,
        small: 0,
    };
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (i, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let value = model.store.get(id).clone();
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut probe = model.clone();
        let numeric = finite_diff(
            |xs| {
                *probe.store.get_mut(id) = xs[0].clone();
                toy_loss(&probe, &batch)
            },
            &[value],
        )
        .remove(0);
        let bound = roundoff_bound(loss, analytic.len());
        if norm(analytic.data()).max(norm(numeric.data())) * FD_TOL >= bound {
            out.resolvable += 1;
            out.worst_rel = out.worst_rel.max(rel_error(&analytic, &numeric));
        } else {
            out.small += 1;
            let diff: Vec<f64> = analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b).collect();
            out.worst_abs_small = out.worst_abs_small.max(norm(&diff) / bound);
        }
    }
    out
}
