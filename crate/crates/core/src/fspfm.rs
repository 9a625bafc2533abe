//! Feature-space pose frontalization: gated residual blocks driven by
//! pose-embedding soft gates, plus the attention layer used during
//! fine-tuning.
//!
//! The frontalized feature is
//!   f + T1(f) .* P1(theta) + T2(f) .* P2(theta)
//! where T1, T2 are two-layer residual perceptrons on the face feature and
//! P1, P2 map the pose embedding to per-dimension sigmoid gates.

use rand::Rng;

use crate::error::Result;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamStore, Tensor};

/// Register a two-layer perceptron `{prefix}.l1` / `{prefix}.l2` with
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init. `zero_final` zeroes the
/// second layer so the block contributes nothing until trained.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    zero_final: bool,
    seed: u64,
) -> Result<()> {
    let mut r = rng::stream(seed, 0x4D4C50);
    let mut layer = |name: String, rows: usize, cols: usize, zero: bool| -> (String, Tensor, Tensor) {
        let bound = 1.0 / (cols as f64).sqrt();
        let w: Vec<f64> = (0..rows * cols)
            .map(|_| if zero { 0.0 } else { r.random_range(-bound..=bound) })
            .collect();
        let b = vec![0.0; rows];
        (
            name,
            Tensor::new(vec![rows, cols], w).expect("mlp layer shape"),
            Tensor::vector(b),
        )
    };
    for (name, w, b) in [
        layer(format!("{prefix}.l1"), hidden, in_dim, false),
        layer(format!("{prefix}.l2"), out_dim, hidden, zero_final),
    ] {
        store.insert(&format!("{name}.W"), w)?;
        store.insert(&format!("{name}.b"), b)?;
    }
    Ok(())
}

/// affine -> relu -> affine, with an optional sigmoid on the output.
pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    sigmoid_out: bool,
) -> Result<NodeId> {
    let h = tape.affine(store, &format!("{prefix}.l1"), x)?;
    let h = tape.relu(h);
    let y = tape.affine(store, &format!("{prefix}.l2"), h)?;
    if sigmoid_out {
        tape.sigmoid(y)
    } else {
        Ok(y)
    }
}

/// Parameter-name handle for one FSPFM instance living under `prefix`.
#[derive(Debug, Clone)]
pub struct Fspfm {
    pub prefix: String,
    pub feature_dim: usize,
    pub pose_dim: usize,
}

impl Fspfm {
    pub fn new(prefix: &str, feature_dim: usize, pose_dim: usize) -> Self {
        Fspfm {
            prefix: prefix.to_string(),
            feature_dim,
            pose_dim,
        }
    }

    /// Residual output layers start at zero, so frontalize is exactly the
    /// identity map on fresh parameters.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let (d, p) = (self.feature_dim, self.pose_dim);
        init_mlp(store, &format!("{}.t1", self.prefix), d, d, d, true, rng::mix(seed, 1))?;
        init_mlp(store, &format!("{}.t2", self.prefix), d, d, d, true, rng::mix(seed, 2))?;
        init_mlp(store, &format!("{}.p1", self.prefix), p, d, d, false, rng::mix(seed, 3))?;
        init_mlp(store, &format!("{}.p2", self.prefix), p, d, d, false, rng::mix(seed, 4))?;
        Ok(())
    }

    pub fn residual_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        which: usize,
        f: NodeId,
    ) -> Result<NodeId> {
        mlp_forward(tape, store, &format!("{}.t{which}", self.prefix), f, false)
    }

    pub fn pose_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        which: usize,
        theta: NodeId,
    ) -> Result<NodeId> {
        mlp_forward(tape, store, &format!("{}.p{which}", self.prefix), theta, true)
    }

    /// f + T1(f) .* P1(theta) + T2(f) .* P2(theta)
    pub fn frontalize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: NodeId,
        theta: NodeId,
    ) -> Result<NodeId> {
        let t1 = self.residual_block(tape, store, 1, f)?;
        let g1 = self.pose_gate(tape, store, 1, theta)?;
        let r1 = tape.hadamard(t1, g1)?;
        let t2 = self.residual_block(tape, store, 2, f)?;
        let g2 = self.pose_gate(tape, store, 2, theta)?;
        let r2 = tape.hadamard(t2, g2)?;
        let res = tape.add(r1, r2)?;
        tape.add(f, res)
    }
}

/// Attention layer on the frontal branch: a two-layer perceptron with
/// sigmoid output, one weight per feature dimension.
#[derive(Debug, Clone)]
pub struct Attention {
    pub prefix: String,
    pub feature_dim: usize,
}

impl Attention {
    pub fn new(prefix: &str, feature_dim: usize) -> Self {
        Attention {
            prefix: prefix.to_string(),
            feature_dim,
        }
    }

    /// The output layer starts at zero, so the fresh attention is the
    /// uniform vector 0.5 — a pure rescaling of the frontal feature that
    /// cosine scoring ignores, rather than a random re-weighting the
    /// profile branch would be trained to imitate.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let d = self.feature_dim;
        init_mlp(store, &self.prefix, d, d, d, true, rng::mix(seed, 5))
    }

    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, f: NodeId) -> Result<NodeId> {
        mlp_forward(tape, store, &self.prefix, f, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vec(seed: u64, n: usize) -> Tensor {
        let mut r = rng::stream(seed, 0xF00D);
        Tensor::vector((0..n).map(|_| rng::gauss(&mut r)).collect())
    }

    fn fresh(d: usize, p: usize, seed: u64) -> (ParamStore, Fspfm) {
        let mut store = ParamStore::new();
        let fspfm = Fspfm::new("fspfm", d, p);
        fspfm.init(&mut store, seed).unwrap();
        (store, fspfm)
    }

    #[test]
    fn identity_at_init() {
        let (store, fspfm) = fresh(8, 4, 42);
        for trial in 0..50 {
            let mut tape = Tape::new();
            let f = tape.constant(random_vec(trial, 8)).unwrap();
            let theta = tape.constant(random_vec(trial + 1000, 4)).unwrap();
            let out = fspfm.frontalize(&mut tape, &store, f, theta).unwrap();
            assert_eq!(tape.value(out).data(), tape.value(f).data());
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let (a, _) = fresh(8, 4, 7);
        let (b, _) = fresh(8, 4, 7);
        for (name, ea) in a.iter() {
            let eb = b.get(name).unwrap();
            assert_eq!(ea.value.data(), eb.value.data());
        }
        // hidden-layer weights within +-1/sqrt(fan_in)
        let w = &a.get("fspfm.t1.l1.W").unwrap().value;
        let bound = 1.0 / (8f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let w = &a.get("fspfm.p1.l1.W").unwrap().value;
        let bound = 1.0 / (4f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn pose_gate_zero_final_gives_half() {
        let (mut store, fspfm) = fresh(8, 4, 3);
        let entry = store.get_mut("fspfm.p1.l2.W").unwrap();
        entry.value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let theta = tape.constant(random_vec(9, 4)).unwrap();
        let g = fspfm.pose_gate(&mut tape, &store, 1, theta).unwrap();
        assert!(tape.value(g).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn pose_gate_saturates_near_zero() {
        let (mut store, fspfm) = fresh(8, 4, 3);
        // strongly negative output weights over a guaranteed-positive
        // hidden layer drive the sigmoid toward zero
        store.get_mut("fspfm.p1.l1.W").unwrap().value.data_mut().fill(1.0);
        store.get_mut("fspfm.p1.l2.W").unwrap().value.data_mut().fill(-20.0);
        let mut tape = Tape::new();
        let theta = tape.constant(Tensor::vector(vec![0.3, 0.1, 0.2, 0.4])).unwrap();
        let g = fspfm.pose_gate(&mut tape, &store, 1, theta).unwrap();
        assert!(tape.value(g).data().iter().all(|v| *v > 0.0 && *v < 1e-8));
    }

    #[test]
    fn gate_annihilation_keeps_feature() {
        let (mut store, fspfm) = fresh(8, 4, 3);
        // train-like residuals: un-zero the T output layers
        store.get_mut("fspfm.t1.l2.W").unwrap().value.data_mut().fill(0.3);
        store.get_mut("fspfm.t2.l2.W").unwrap().value.data_mut().fill(-0.2);
        // force gates shut
        for p in ["p1", "p2"] {
            store
                .get_mut(&format!("fspfm.{p}.l1.W"))
                .unwrap()
                .value
                .data_mut()
                .fill(1.0);
            store
                .get_mut(&format!("fspfm.{p}.l2.W"))
                .unwrap()
                .value
                .data_mut()
                .fill(-20.0);
        }
        let mut tape = Tape::new();
        let f = tape.constant(random_vec(4, 8)).unwrap();
        let theta = tape.constant(Tensor::vector(vec![0.5, 0.2, 0.4, 0.1])).unwrap();
        let out = fspfm.frontalize(&mut tape, &store, f, theta).unwrap();
        let t1 = fspfm.residual_block(&mut tape, &store, 1, f).unwrap();
        let t2 = fspfm.residual_block(&mut tape, &store, 2, f).unwrap();
        let budget = tape.value(t1).norm() + tape.value(t2).norm();
        let drift: f64 = tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(f).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(drift < 1e-6 * budget, "drift {drift} vs budget {budget}");
    }

    #[test]
    fn residual_decomposition_matches_primitives() {
        let (mut store, fspfm) = fresh(8, 4, 12);
        // random residual weights so the decomposition is non-trivial
        let mut r = rng::stream(77, 0);
        for name in ["fspfm.t1.l2.W", "fspfm.t2.l2.W"] {
            for v in store.get_mut(name).unwrap().value.data_mut() {
                *v = 0.2 * rng::gauss(&mut r);
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(random_vec(21, 8)).unwrap();
        let theta = tape.constant(random_vec(22, 4)).unwrap();
        let out = fspfm.frontalize(&mut tape, &store, f, theta).unwrap();
        // recompute from the primitive ops
        let t1 = fspfm.residual_block(&mut tape, &store, 1, f).unwrap();
        let g1 = fspfm.pose_gate(&mut tape, &store, 1, theta).unwrap();
        let t2 = fspfm.residual_block(&mut tape, &store, 2, f).unwrap();
        let g2 = fspfm.pose_gate(&mut tape, &store, 2, theta).unwrap();
        let h1 = tape.hadamard(t1, g1).unwrap();
        let h2 = tape.hadamard(t2, g2).unwrap();
        for i in 0..8 {
            let expect = tape.value(f).data()[i]
                + tape.value(h1).data()[i]
                + tape.value(h2).data()[i];
            let got = tape.value(out).data()[i];
            assert!((got - expect).abs() <= 1e-12, "component {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn attention_weights_in_unit_interval() {
        let mut store = ParamStore::new();
        let att = Attention::new("att", 8);
        att.init(&mut store, 5).unwrap();
        for trial in 0..1000 {
            let mut tape = Tape::new();
            let f = tape.constant(random_vec(trial, 8)).unwrap();
            let w = att.weights(&mut tape, &store, f).unwrap();
            assert!(tape.value(w).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn attention_zero_final_gives_half() {
        let mut store = ParamStore::new();
        let att = Attention::new("att", 8);
        att.init(&mut store, 5).unwrap();
        store.get_mut("att.l2.W").unwrap().value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let f = tape.constant(random_vec(1, 8)).unwrap();
        let w = att.weights(&mut tape, &store, f).unwrap();
        assert!(tape.value(w).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn mlp_matches_step_by_step_composition() {
        let mut store = ParamStore::new();
        init_mlp(&mut store, "g", 4, 6, 3, false, 31).unwrap();
        let x = random_vec(8, 4);
        // independent recomputation with plain loops
        let w1 = store.get("g.l1.W").unwrap().value.clone();
        let b1 = store.get("g.l1.b").unwrap().value.clone();
        let w2 = store.get("g.l2.W").unwrap().value.clone();
        let b2 = store.get("g.l2.b").unwrap().value.clone();
        let mut h = vec![0.0; 6];
        for i in 0..6 {
            let mut acc = b1.data()[i];
            for j in 0..4 {
                acc += w1.data()[i * 4 + j] * x.data()[j];
            }
            h[i] = acc.max(0.0);
        }
        let mut y = vec![0.0; 3];
        for i in 0..3 {
            let mut acc = b2.data()[i];
            for j in 0..6 {
                acc += w2.data()[i * 6 + j] * h[j];
            }
            y[i] = 1.0 / (1.0 + (-acc).exp());
        }
        let mut tape = Tape::new();
        let xn = tape.constant(x).unwrap();
        let out = mlp_forward(&mut tape, &store, "g", xn, true).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_identity_passthrough() {
        let mut store = ParamStore::new();
        let fspfm = Fspfm::new("m", 3, 2);
        fspfm.init(&mut store, 1).unwrap();
        // identity-configured layers: l1 = I, l2 = I
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.get_mut("m.t1.l1.W").unwrap().value = eye.clone();
        store.get_mut("m.t1.l2.W").unwrap().value = eye;
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::vector(vec![0.5, 0.0, 2.0])).unwrap();
        let out = fspfm.residual_block(&mut tape, &store, 1, f).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let (store, fspfm) = fresh(8, 4, 1);
        let mut tape = Tape::new();
        let bad = tape.constant(random_vec(1, 5)).unwrap();
        let err = fspfm.residual_block(&mut tape, &store, 1, bad).unwrap_err();
        assert_eq!(err.class(), "shape");
    }
}
