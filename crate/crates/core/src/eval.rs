//! Verification protocol: cosine scoring and 10-fold threshold selection.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fspfm::Fspfm;
use crate::rng;
use crate::synth::{Dataset, PairKind, PairSet, Sample, World, POSE_NOISE_SIGMA};
use crate::tape::Tape;
use crate::tensor::{ParamStore, Tensor};

/// Parameter-name prefixes identifying one network inside a store.
#[derive(Debug, Clone)]
pub struct EvalNet {
    pub extractor_prefix: String,
    pub fspfm_prefix: String,
}

impl EvalNet {
    pub fn stage1() -> Self {
        EvalNet {
            extractor_prefix: "extractor".into(),
            fspfm_prefix: "fspfm".into(),
        }
    }

    /// Profile-branch network of a stage-2 store (shared frozen extractor,
    /// fine-tuned frontalization).
    pub fn stage2_pnet() -> Self {
        EvalNet {
            extractor_prefix: "pnet.extractor".into(),
            fspfm_prefix: "pnet.fspfm".into(),
        }
    }

    /// Frontal-branch network of a stage-2 store (frozen extractor and
    /// frozen pre-trained frontalization).
    pub fn stage2_fnet() -> Self {
        EvalNet {
            extractor_prefix: "fnet.extractor".into(),
            fspfm_prefix: "fnet.fspfm".into(),
        }
    }
}

/// Deployment routing: frontal captures go through the frontal branch,
/// profiles through the profile branch. Stage-1 stores have one network,
/// so both routes coincide.
#[derive(Debug, Clone)]
pub struct EvalNets {
    pub frontal: EvalNet,
    pub profile: EvalNet,
}

impl EvalNets {
    pub fn stage1() -> Self {
        EvalNets { frontal: EvalNet::stage1(), profile: EvalNet::stage1() }
    }

    pub fn stage2() -> Self {
        EvalNets { frontal: EvalNet::stage2_fnet(), profile: EvalNet::stage2_pnet() }
    }

    pub fn pick(&self, sample: &Sample) -> &EvalNet {
        if sample.pose.is_frontal() {
            &self.frontal
        } else {
            &self.profile
        }
    }
}

/// Extractor output, optionally frontalized with the sample's own pose
/// embedding. Pure function of (store, sample).
pub fn embed(
    store: &ParamStore,
    net: &EvalNet,
    world: &World,
    cfg: &Config,
    sample: &Sample,
    use_fspfm: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.observation.clone())?;
    let f = crate::fspfm::mlp_forward(&mut tape, store, &net.extractor_prefix, x, false)?;
    let out = if use_fspfm {
        let fspfm = Fspfm::new(&net.fspfm_prefix, cfg.feature_dim, cfg.pose_dim);
        let theta = tape.constant(world.pose_embed(&sample.pose, POSE_NOISE_SIGMA).feature)?;
        fspfm.frontalize(&mut tape, store, f, theta)?
    } else {
        f
    };
    Ok(tape.value(out).clone())
}

pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine: zero vector".into()));
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Cosine scores for every pair in order.
pub fn score_pairs(
    store: &ParamStore,
    nets: &EvalNets,
    world: &World,
    cfg: &Config,
    dataset: &Dataset,
    pairs: &PairSet,
    use_fspfm: bool,
) -> Result<Vec<f64>> {
    // embed each referenced sample once
    let mut needed: Vec<usize> = pairs
        .pairs
        .iter()
        .flat_map(|p| [p.a, p.b])
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let mut cache = std::collections::HashMap::new();
    for &i in &needed {
        let sample = &dataset.samples[i];
        cache.insert(
            i,
            embed(store, nets.pick(sample), world, cfg, sample, use_fspfm)?,
        );
    }
    pairs
        .pairs
        .iter()
        .map(|p| cosine(&cache[&p.a], &cache[&p.b]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct VerificationResult {
    pub split: String,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
}

/// Accuracy of the rule "genuine iff score >= t" on the given subset.
fn accuracy_at(scores: &[f64], genuine: &[bool], idxs: &[usize], t: f64) -> f64 {
    let correct = idxs
        .iter()
        .filter(|&&i| (scores[i] >= t) == genuine[i])
        .count();
    correct as f64 / idxs.len() as f64
}

/// Exact-maximizer threshold over the candidate scores of the training
/// folds (plus a sentinel above the maximum, so "reject everything" is
/// reachable). Ties resolve to the smallest threshold.
fn best_threshold(scores: &[f64], genuine: &[bool], train: &[usize]) -> f64 {
    let mut candidates: Vec<f64> = train.iter().map(|&i| scores[i]).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let sentinel = candidates.last().copied().unwrap_or(0.0) + 1.0;
    candidates.push(sentinel);
    let mut best_t = candidates[0];
    let mut best_acc = -1.0;
    for &t in &candidates {
        let acc = accuracy_at(scores, genuine, train, t);
        if acc > best_acc {
            best_acc = acc;
            best_t = t;
        }
    }
    best_t
}

/// LFW-style protocol: a seeded shuffle, ten contiguous folds, per-fold
/// threshold chosen on the other nine.
pub fn verify_10fold(
    pairs: &PairSet,
    scores: &[f64],
    seed: u64,
    split: &str,
) -> Result<VerificationResult> {
    if pairs.kind != PairKind::Verification {
        return Err(Error::Contract("verify_10fold needs verification pairs".into()));
    }
    if scores.len() != pairs.pairs.len() {
        return Err(Error::Contract(format!(
            "verify_10fold: {} scores for {} pairs",
            scores.len(),
            pairs.pairs.len()
        )));
    }
    let n = scores.len();
    if n < 10 {
        return Err(Error::Contract(format!("verify_10fold needs >= 10 pairs, got {n}")));
    }
    let genuine: Vec<bool> = pairs.pairs.iter().map(|p| p.genuine).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0xF01D);
    rng::shuffle(&mut r, &mut order);
    // contiguous folds over the shuffled order; sizes differ by at most 1
    let base = n / 10;
    let extra = n % 10;
    let mut folds: Vec<Vec<usize>> = Vec::with_capacity(10);
    let mut cursor = 0;
    for k in 0..10 {
        let size = base + usize::from(k < extra);
        folds.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    let mut fold_accuracies = Vec::with_capacity(10);
    let mut fold_thresholds = Vec::with_capacity(10);
    for k in 0..10 {
        let train: Vec<usize> = (0..10)
            .filter(|&j| j != k)
            .flat_map(|j| folds[j].iter().copied())
            .collect();
        let t = best_threshold(scores, &genuine, &train);
        fold_thresholds.push(t);
        fold_accuracies.push(accuracy_at(scores, &genuine, &folds[k], t));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / 10.0;
    Ok(VerificationResult {
        split: split.to_string(),
        mean_accuracy,
        fold_accuracies,
        fold_thresholds,
    })
}

/// Table 1 style row: which pipeline pieces were active, and the
/// accuracies on both splits.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub fspfm: bool,
    pub ft: bool,
    pub ada: bool,
    pub frontal_accuracy: f64,
    pub cross_pose_accuracy: f64,
}

fn flag(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

/// Machine-readable key-value schema followed by an aligned text table.
pub fn render_ablation_report(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let _ = writeln!(out, "row.{i}.name = {}", row.name);
        let _ = writeln!(out, "row.{i}.fspfm = {}", row.fspfm);
        let _ = writeln!(out, "row.{i}.ft = {}", row.ft);
        let _ = writeln!(out, "row.{i}.ada = {}", row.ada);
        let _ = writeln!(out, "row.{i}.frontal_accuracy = {:.4}", row.frontal_accuracy);
        let _ = writeln!(out, "row.{i}.cross_pose_accuracy = {:.4}", row.cross_pose_accuracy);
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<16} {:>5} {:>3} {:>3} {:>9} {:>11}",
        "arm", "FSPFM", "FT", "ADA", "frontal", "cross-pose"
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>3} {:>3} {:>9.4} {:>11.4}",
            row.name,
            flag(row.fspfm),
            flag(row.ft),
            flag(row.ada),
            row.frontal_accuracy,
            row.cross_pose_accuracy
        );
    }
    out
}

pub fn render_verification_report(results: &[VerificationResult]) -> String {
    let mut out = String::new();
    for res in results {
        let _ = writeln!(out, "split.{}.mean_accuracy = {:.4}", res.split, res.mean_accuracy);
        for (k, (acc, t)) in res
            .fold_accuracies
            .iter()
            .zip(&res.fold_thresholds)
            .enumerate()
        {
            let _ = writeln!(out, "split.{}.fold.{k}.accuracy = {acc:.4}", res.split);
            let _ = writeln!(out, "split.{}.fold.{k}.threshold = {t:.6}", res.split);
        }
    }
    out
}
