//! Central finite-difference checks for every trainable composite.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fspfm::{init_mlp, mlp_forward, Attention, Fspfm};
use crate::losses::{ada_loss, total_loss, ArcFaceHead};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CompositeReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl CompositeReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// Relative disagreement between two gradient vectors:
/// ||a - b|| / max(||a||, ||b||, 1).
pub fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1.0)
}

/// Check one composite: analytic gradients from a backward pass against
/// central finite differences of the rebuilt forward pass, per parameter
/// tensor; returns the worst relative error across tensors.
pub fn check_composite<F>(store: &mut ParamStore, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, e)| !e.frozen)
        .map(|(n, e)| (n.to_string(), e.grad.data().to_vec()))
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        tape.value(loss).scalar_value()
    };

    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        let len = grad.len();
        let mut fd = vec![0.0; len];
        for i in 0..len {
            let orig = store.get(name)?.value.data()[i];
            store.get_mut(name)?.value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(name)?.value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(name)?.value.data_mut()[i] = orig;
            fd[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        let e = rel_err(grad, &fd);
        if std::env::var_os("FSPFM_GRADCHECK_DEBUG").is_some() {
            eprintln!("  tensor {name}: rel_err {e:.3e}");
        }
        worst = worst.max(e);
    }
    store.zero_grads();
    Ok(worst)
}

fn check_dims() -> Config {
    Config {
        num_identities: 4,
        samples_per_identity: 2,
        observation_dim: 10,
        pose_dim: 4,
        hidden_dim: 8,
        feature_dim: 6,
        eval_identities: 2,
        eval_samples_per_identity: 2,
        ..Config::default()
    }
}

fn random_vec(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng::gauss(r)).collect())
}

struct Fixture {
    store: ParamStore,
    cfg: Config,
    observations: Vec<Tensor>,
    thetas: Vec<Tensor>,
    labels: Vec<usize>,
}

// Finite differences straddle the ReLU kink when a hidden pre-activation
// sits within the step size of zero, so fixtures keep a safety margin.
const KINK_MARGIN: f64 = 1e-4;

fn hidden_preactivations(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Vec<f64>> {
    let w = &store.get(&format!("{prefix}.l1.W"))?.value;
    let b = &store.get(&format!("{prefix}.l1.b"))?.value;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &w.data()[i * n..(i + 1) * n];
        out.push(b.data()[i] + row.iter().zip(x.data()).map(|(a, c)| a * c).sum::<f64>());
    }
    Ok(out)
}

fn relu_margin(
    store: &ParamStore,
    observations: &[Tensor],
    thetas: &[Tensor],
) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let mut visit = |zs: Vec<f64>| {
        for z in zs {
            margin = margin.min(z.abs());
        }
    };
    for obs in observations {
        let pre = hidden_preactivations(store, "extractor", obs)?;
        let hidden: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
        visit(pre);
        let w = &store.get("extractor.l2.W")?.value;
        let b = &store.get("extractor.l2.b")?.value;
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let f = Tensor::vector(
            (0..m)
                .map(|i| {
                    b.data()[i]
                        + w.data()[i * n..(i + 1) * n]
                            .iter()
                            .zip(&hidden)
                            .map(|(a, c)| a * c)
                            .sum::<f64>()
                })
                .collect(),
        );
        for prefix in ["fspfm.t1", "fspfm.t2", "attention"] {
            visit(hidden_preactivations(store, prefix, &f)?);
        }
    }
    for theta in thetas {
        for prefix in ["fspfm.p1", "fspfm.p2"] {
            visit(hidden_preactivations(store, prefix, theta)?);
        }
    }
    Ok(margin)
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = check_dims();
    let mut store = ParamStore::new();
    init_mlp(
        &mut store,
        "extractor",
        cfg.observation_dim,
        cfg.hidden_dim,
        cfg.feature_dim,
        false,
        rng::mix(seed, 1),
    )?;
    let fspfm = Fspfm::new("fspfm", cfg.feature_dim, cfg.pose_dim);
    fspfm.init(&mut store, rng::mix(seed, 2))?;
    // un-zero the residual output layers so their gradients are generic
    let mut r = rng::stream(seed, 3);
    for name in ["fspfm.t1.l2.W", "fspfm.t2.l2.W", "fspfm.t1.l2.b", "fspfm.t2.l2.b"] {
        for v in store.get_mut(name)?.value.data_mut() {
            *v = 0.3 * rng::gauss(&mut r);
        }
    }
    Attention::new("attention", cfg.feature_dim).init(&mut store, rng::mix(seed, 4))?;
    ArcFaceHead::new("head.W", cfg.num_identities, cfg.feature_dim, cfg.arcface_s, cfg.arcface_m)?
        .init(&mut store, rng::mix(seed, 5))?;
    let batch = 3;
    let labels = (0..batch).map(|i| i % cfg.num_identities).collect();
    // resample inputs until every hidden pre-activation clears the kink
    for attempt in 0..64u64 {
        let mut r = rng::stream(seed, 6 + attempt);
        let observations: Vec<Tensor> =
            (0..batch).map(|_| random_vec(&mut r, cfg.observation_dim)).collect();
        let thetas: Vec<Tensor> = (0..batch).map(|_| random_vec(&mut r, cfg.pose_dim)).collect();
        if relu_margin(&store, &observations, &thetas)? > KINK_MARGIN {
            return Ok(Fixture { store, cfg, observations, thetas, labels });
        }
    }
    Err(Error::Numeric(format!(
        "gradcheck fixture for seed {seed}: no input draw cleared the relu kink margin"
    )))
}

/// Finite-difference checks for every trainable composite path.
pub fn gradcheck_all(seed: u64) -> Result<Vec<CompositeReport>> {
    let Fixture { mut store, cfg, observations, thetas, labels } = fixture(seed)?;
    let fspfm = Fspfm::new("fspfm", cfg.feature_dim, cfg.pose_dim);
    let attention = Attention::new("attention", cfg.feature_dim);
    let head = ArcFaceHead::new(
        "head.W",
        cfg.num_identities,
        cfg.feature_dim,
        cfg.arcface_s,
        cfg.arcface_m,
    )?;
    let lambda = cfg.lambda;

    let frontalized = |tape: &mut Tape, store: &ParamStore, obs: &Tensor, theta: &Tensor| {
        let x = tape.constant(obs.clone())?;
        let f = mlp_forward(tape, store, "extractor", x, false)?;
        let t = tape.constant(theta.clone())?;
        fspfm.frontalize(tape, store, f, t)
    };

    let mut reports = Vec::new();
    {
        let obs = observations[0].clone();
        let theta = thetas[0].clone();
        let err = check_composite(&mut store, |tape, store| {
            let out = frontalized(tape, store, &obs, &theta)?;
            Ok(tape.sum_squares(out))
        })?;
        reports.push(CompositeReport { name: "frontalize-path".into(), max_rel_err: err });
    }
    {
        let obs = observations[1].clone();
        let err = check_composite(&mut store, |tape, store| {
            let x = tape.constant(obs.clone())?;
            let f = mlp_forward(tape, store, "extractor", x, false)?;
            let w = attention.weights(tape, store, f)?;
            let weighted = tape.hadamard(f, w)?;
            Ok(tape.sum_squares(weighted))
        })?;
        reports.push(CompositeReport { name: "attention-path".into(), max_rel_err: err });
    }
    {
        let (obs, thetas, labels) = (observations.clone(), thetas.clone(), labels.clone());
        let err = check_composite(&mut store, |tape, store| {
            let mut feats = Vec::new();
            for (o, t) in obs.iter().zip(&thetas) {
                feats.push(frontalized(tape, store, o, t)?);
            }
            head.loss(tape, store, &feats, &labels)
        })?;
        reports.push(CompositeReport { name: "arcface".into(), max_rel_err: err });
    }
    {
        let (obs, thetas) = (observations.clone(), thetas.clone());
        let err = check_composite(&mut store, |tape, store| {
            let mut u = Vec::new();
            let mut v = Vec::new();
            for (i, (o, t)) in obs.iter().zip(&thetas).enumerate() {
                let x = tape.constant(o.clone())?;
                let f = mlp_forward(tape, store, "extractor", x, false)?;
                let am = attention.weights(tape, store, f)?;
                let uf = frontalized(tape, store, &obs[(i + 1) % obs.len()], t)?;
                u.push(tape.hadamard(uf, am)?);
                v.push(frontalized(tape, store, o, t)?);
            }
            ada_loss(tape, &u, &v)
        })?;
        reports.push(CompositeReport { name: "ada".into(), max_rel_err: err });
    }
    {
        let (obs, thetas, labels) = (observations.clone(), thetas.clone(), labels.clone());
        let err = check_composite(&mut store, |tape, store| {
            let mut u = Vec::new();
            let mut v = Vec::new();
            for (o, t) in obs.iter().zip(&thetas) {
                let x = tape.constant(o.clone())?;
                let f = mlp_forward(tape, store, "extractor", x, false)?;
                let am = attention.weights(tape, store, f)?;
                let tnode = tape.constant(t.clone())?;
                let fr = fspfm.frontalize(tape, store, f, tnode)?;
                u.push(tape.hadamard(fr, am)?);
                v.push(frontalized(tape, store, o, t)?);
            }
            let l_arc = head.loss(tape, store, &v, &labels)?;
            let l_ada = ada_loss(tape, &u, &v)?;
            total_loss(tape, l_arc, l_ada, lambda)
        })?;
        reports.push(CompositeReport { name: "total".into(), max_rel_err: err });
    }
    Ok(reports)
}

pub fn render_report(reports: &[CompositeReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "composite.{} max_rel_err = {:.3e} [{}]\n",
            r.name,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}
