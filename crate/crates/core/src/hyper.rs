//! Shared hyper-network and per-domain low-rank factors.
//!
//! The hyper-network maps an instance embedding `z` to a `k × k`
//! representation matrix `I`. Adapter weights are then
//! `U = W_ul · I · W_ur` (`s × h`, down-projection) and
//! `V = W_vl · I · W_vr` (`h × s`, up-projection).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetwork {
    pub input: usize,
    pub hidden: usize,
    pub rank: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HyperNetwork {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, hidden: usize, rank: usize, rng: &mut R) -> Self {
        let out = rank * rank;
        Self {
            input,
            hidden,
            rank,
            w1: store.add("hyper.w1", Tensor::uniform([input, hidden], 1.0 / (input as f64).sqrt(), rng)),
            b1: store.add("hyper.b1", Tensor::zeros([hidden])),
            w2: store.add("hyper.w2", Tensor::uniform([hidden, out], 1.0 / (hidden as f64).sqrt(), rng)),
            b2: store.add("hyper.b2", Tensor::zeros([out])),
        }
    }

    /// Number of values emitted per instance.
    pub fn output_len(&self) -> usize {
        self.rank * self.rank
    }

    /// `relu(z·W1 + b1)·W2 + b2`, reshaped row-major to `B × k × k`.
    pub fn represent(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (b, width) = tape.value(z).dims2()?;
        if width != self.input {
            return Err(Error::shape("represent", &[b, width], &[b, self.input]));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(z, w1)?;
        let b1 = tape.broadcast_rows(b1, b)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w2)?;
        let b2 = tape.broadcast_rows(b2, b)?;
        let out = tape.add(out, b2)?;
        tape.reshape(out, [b, self.rank, self.rank])
    }
}

/// Factors for one (domain, adapter site) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub rank: usize,
    pub bottleneck: usize,
    pub width: usize,
    /// `s × k`
    pub u_left: ParamId,
    /// `k × h`
    pub u_right: ParamId,
    /// `h × k`
    pub v_left: ParamId,
    /// `k × s`
    pub v_right: ParamId,
}

impl LowRankFactors {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        bottleneck: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (rank as f64).sqrt();
        let (k, s, h) = (rank, bottleneck, width);
        Self {
            rank,
            bottleneck,
            width,
            u_left: store.add(format!("{prefix}.u_left"), Tensor::uniform([s, k], bound, rng)),
            u_right: store.add(format!("{prefix}.u_right"), Tensor::uniform([k, h], bound, rng)),
            v_left: store.add(format!("{prefix}.v_left"), Tensor::uniform([h, k], bound, rng)),
            v_right: store.add(format!("{prefix}.v_right"), Tensor::uniform([k, s], bound, rng)),
        }
    }

    fn check_rep(&self, tape: &Tape, rep: Var) -> Result<usize> {
        let (b, k1, k2) = tape.value(rep).dims3()?;
        if k1 != self.rank || k2 != self.rank {
            return Err(Error::shape("low-rank factors", &[b, k1, k2], &[b, self.rank, self.rank]));
        }
        Ok(b)
    }

    /// Materialises `U` (`B × s × h`) and `V` (`B × h × s`) for every instance.
    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, rep: Var) -> Result<(Var, Var)> {
        let b = self.check_rep(tape, rep)?;
        let ul = tape.param(store, self.u_left);
        let ur = tape.param(store, self.u_right);
        let vl = tape.param(store, self.v_left);
        let vr = tape.param(store, self.v_right);
        let u = triple(tape, rep, ul, ur, b, self.rank)?;
        let v = triple(tape, rep, vl, vr, b, self.rank)?;
        Ok((u, v))
    }

    /// `W_ul · I_i · W_ur · x_i` for every row `x_i` of `x` (`B × h`), without
    /// forming `U`. Returns `B × s`.
    pub fn down(&self, tape: &mut Tape, store: &ParamStore, rep: Var, x: Var) -> Result<Var> {
        let ul = tape.param(store, self.u_left);
        let ur = tape.param(store, self.u_right);
        self.apply(tape, rep, ul, ur, x, self.width)
    }

    /// `W_vl · I_i · W_vr · y_i` for every row `y_i` of `y` (`B × s`). Returns
    /// `B × h`.
    pub fn up(&self, tape: &mut Tape, store: &ParamStore, rep: Var, y: Var) -> Result<Var> {
        let vl = tape.param(store, self.v_left);
        let vr = tape.param(store, self.v_right);
        self.apply(tape, rep, vl, vr, y, self.bottleneck)
    }

    fn apply(&self, tape: &mut Tape, rep: Var, left: Var, right: Var, x: Var, in_width: usize) -> Result<Var> {
        let b = self.check_rep(tape, rep)?;
        let (rows, w) = tape.value(x).dims2()?;
        if rows != b || w != in_width {
            return Err(Error::shape("adapter projection", &[rows, w], &[b, in_width]));
        }
        let k = self.rank;
        let t = tape.matmul_nt(x, right)?;
        let t = tape.reshape(t, [b, k, 1])?;
        let t = tape.bmm(rep, t)?;
        let t = tape.reshape(t, [b, k])?;
        tape.matmul_nt(t, left)
    }
}

/// `left · I_i · right` for each of the `b` matrices in `rep`.
fn triple(tape: &mut Tape, rep: Var, left: Var, right: Var, b: usize, k: usize) -> Result<Var> {
    let out_rows = tape.shape(left)[0];
    let out_cols = tape.shape(right)[1];
    let flat = tape.reshape(rep, [b * k, k])?;
    let ir = tape.matmul(flat, right)?;
    let ir = tape.reshape(ir, [b, k, out_cols])?;
    let irt = tape.transpose(ir)?;
    let irt = tape.reshape(irt, [b * out_cols, k])?;
    let prod_t = tape.matmul_nt(irt, left)?;
    let prod_t = tape.reshape(prod_t, [b, out_cols, out_rows])?;
    tape.transpose(prod_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, finite_diff, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(input: usize, hidden: usize, rank: usize) -> (ParamStore, HyperNetwork) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = HyperNetwork::new(&mut store, input, hidden, rank, &mut rng);
        (store, h)
    }

    #[test]
    fn zero_input_and_biases_give_zero_matrix() {
        let (store, h) = setup(4, 5, 3);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([2, 4]));
        let rep = h.represent(&mut tape, &store, z).unwrap();
        assert_eq!(tape.shape(rep), &[2, 3, 3]);
        assert!(tape.value(rep).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reshape_is_row_major() {
        // Route the hidden layer so h = [1, 2, 3, 4] exactly.
        let (mut store, h) = setup(1, 1, 2);
        *store.get_mut(h.w1) = Tensor::new([1, 1], vec![1.0]).unwrap();
        *store.get_mut(h.w2) = Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new([1, 1], vec![1.0]).unwrap());
        let rep = h.represent(&mut tape, &store, z).unwrap();
        assert_eq!(tape.value(rep).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(rep).shape(), &[1, 2, 2]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (store, h) = setup(4, 5, 3);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(h.represent(&mut tape, &store, z), Err(Error::Shape { .. })));
    }

    #[test]
    fn represent_gradient_wrt_w1() {
        let (store, h) = setup(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_tensor(&[2, 3], &mut rng);
        let weights = random_tensor(&[2, 2, 2], &mut rng);
        let loss = |w1: &Tensor| -> (f64, Option<Tensor>) {
            let mut s = store.clone();
            *s.get_mut(h.w1) = w1.clone();
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let rep = h.represent(&mut tape, &s, zv).unwrap();
            let wv = tape.constant(weights.clone());
            let prod = tape.mul(rep, wv).unwrap();
            let l = tape.sum(prod).unwrap();
            let mut g = tape.backward(l).unwrap();
            let w1v = tape.param(&s, h.w1);
            (tape.value(l).data()[0], g.take(w1v))
        };
        let w1 = store.get(h.w1).clone();
        let analytic = loss(&w1).1.unwrap();
        let numeric = finite_diff(|x| loss(&x[0]).0, &[w1]);
        assert_grad_close("w1", &analytic, &numeric[0]);
    }

    #[test]
    fn identity_representation_returns_right_factor() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LowRankFactors::new(&mut store, "f", 3, 3, 3, &mut rng);
        let eye = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut(f.u_left) = eye.clone();
        let mut tape = Tape::new();
        let rep = tape.constant(eye.reshaped([1, 3, 3]).unwrap());
        let (u, _) = f.generate(&mut tape, &store, rep).unwrap();
        assert_eq!(tape.value(u).data(), store.get(f.u_right).data());
    }

    #[test]
    fn zero_representation_annihilates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LowRankFactors::new(&mut store, "f", 2, 3, 4, &mut rng);
        let mut tape = Tape::new();
        let rep = tape.constant(Tensor::zeros([2, 2, 2]));
        let (u, v) = f.generate(&mut tape, &store, rep).unwrap();
        assert_eq!(tape.shape(u), &[2, 3, 4]);
        assert_eq!(tape.shape(v), &[2, 4, 3]);
        assert!(tape.value(u).data().iter().chain(tape.value(v).data()).all(|&x| x == 0.0));
    }

    #[test]
    fn generation_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = LowRankFactors::new(&mut store, "f", 2, 2, 3, &mut rng);
        let rep0 = random_tensor(&[2, 2, 2], &mut rng);
        let wu = random_tensor(&[2, 2, 3], &mut rng);
        let wv = random_tensor(&[2, 3, 2], &mut rng);
        let ids = [f.u_left, f.u_right, f.v_left, f.v_right];
        let run = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut s = store.clone();
            for (id, t) in ids.iter().zip(&inputs[1..]) {
                *s.get_mut(*id) = t.clone();
            }
            let mut tape = Tape::new();
            let rep = tape.leaf(inputs[0].clone(), true);
            let (u, v) = f.generate(&mut tape, &s, rep).unwrap();
            let a = tape.constant(wu.clone());
            let b = tape.constant(wv.clone());
            let pu = tape.mul(u, a).unwrap();
            let pv = tape.mul(v, b).unwrap();
            let su = tape.sum(pu).unwrap();
            let sv = tape.sum(pv).unwrap();
            let l = tape.add(su, sv).unwrap();
            let mut g = tape.backward(l).unwrap();
            let mut grads = vec![g.take(rep).unwrap()];
            for id in ids {
                let var = tape.param(&s, id);
                grads.push(g.take(var).unwrap());
            }
            (tape.value(l).data()[0], grads)
        };
        let mut inputs = vec![rep0];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let analytic = run(&inputs).1;
        let numeric = finite_diff(|x| run(x).0, &inputs);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert_grad_close(&format!("input {i}"), a, n);
        }
    }
}
