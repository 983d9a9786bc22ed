//! Straight-line per-instance forward pass over plain vectors, written
//! independently of the tape.

use hamur_core::backbone::{BackboneKind, Dense};
use hamur_core::model::HamurModel;
use hamur_core::params::ParamStore;

/// `a (m×k) · b (k×n)` by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(store: &ParamStore, d: &Dense, x: &[f64]) -> Vec<f64> {
    let w = store.get(d.w);
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    let mut y = naive_matmul(x, w.data(), 1, inp, out);
    for (v, b) in y.iter_mut().zip(store.get(d.b).data()) {
        *v += b;
    }
    y
}

/// Eval-mode click probability of one instance.
pub fn predict_one(model: &HamurModel, ids: &[u32], domain: u32) -> f64 {
    let store = &model.store;
    let cfg = &model.config;
    let mut all_ids = ids.to_vec();
    if cfg.domain_feature {
        all_ids.push(domain);
    }
    let mut z = Vec::new();
    for (t, &id) in model.embeddings.tables.iter().zip(&all_ids) {
        let row = id as usize * t.dim;
        z.extend_from_slice(&store.get(t.id).data()[row..row + t.dim]);
    }

    let rep = model.hyper.as_ref().map(|hn| {
        let w1 = store.get(hn.w1).data();
        let mut hidden = naive_matmul(&z, w1, 1, hn.input, hn.hidden);
        for (v, b) in hidden.iter_mut().zip(store.get(hn.b1).data()) {
            *v = (*v + b).max(0.0);
        }
        let mut out = naive_matmul(&hidden, store.get(hn.w2).data(), 1, hn.hidden, hn.rank * hn.rank);
        for (v, b) in out.iter_mut().zip(store.get(hn.b2).data()) {
            *v += b;
        }
        out
    });

    let bb = model.backbone_for(domain);
    let mut h = z.clone();
    for (i, layer) in bb.layers.iter().enumerate() {
        h = dense(store, layer, &h).into_iter().map(|v| v.max(0.0)).collect();
        let layer_no = i + 1;
        let Some(rep) = &rep else { continue };
        let Some(j) = cfg.adapter.sites.iter().position(|&s| s == layer_no) else { continue };
        let cell = &model.adapters[domain as usize - 1][j];
        let f = &cell.factors;
        let (k, s, w) = (f.rank, f.bottleneck, f.width);
        let u = naive_matmul(&naive_matmul(store.get(f.u_left).data(), rep, s, k, k), store.get(f.u_right).data(), s, k, w);
        let v = naive_matmul(&naive_matmul(store.get(f.v_left).data(), rep, w, k, k), store.get(f.v_right).data(), w, k, s);
        let act: Vec<f64> = naive_matmul(&u, &h, s, w, 1).into_iter().map(sigmoid).collect();
        let up = naive_matmul(&v, &act, w, s, 1);
        let gamma = store.get(cell.norm.gamma).data();
        let beta = store.get(cell.norm.beta).data();
        let mean = cell.norm.running_mean.data();
        let var = cell.norm.running_var.data();
        let eps = cfg.adapter.norm.eps;
        for c in 0..w {
            h[c] += gamma[c] * (up[c] - mean[c]) / (var[c] + eps).sqrt() + beta[c];
        }
    }

    let logit = match bb.kind {
        BackboneKind::Mlp => dense(store, &bb.output, &h)[0],
        BackboneKind::Dcn => {
            let mut xl = z.clone();
            for c in &bb.cross {
                let dot: f64 = xl.iter().zip(store.get(c.w).data()).map(|(a, b)| a * b).sum();
                xl = (0..z.len()).map(|i| z[i] * dot + store.get(c.b).data()[i] + xl[i]).collect();
            }
            xl.extend_from_slice(&h);
            dense(store, &bb.output, &xl)[0]
        }
        BackboneKind::WideDeep => {
            let wide = bb.wide.as_ref().unwrap();
            let mut w = store.get(wide.bias).data()[0];
            for (t, &id) in wide.tables.iter().zip(ids) {
                w += store.get(*t).data()[id as usize];
            }
            dense(store, &bb.output, &h)[0] + w
        }
    };
    sigmoid(logit)
}
