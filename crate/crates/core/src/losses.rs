//! Recognition and adaptation losses.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamStore, Tensor};

/// Additive angular margin head. Class weight rows are L2-normalized at
/// logit time, so the stored matrix scale is irrelevant.
#[derive(Debug, Clone)]
pub struct ArcFaceHead {
    pub weight_name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub fn new(weight_name: &str, num_classes: usize, feature_dim: usize, scale: f64, margin: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::Config(format!("arcface scale must be positive, got {scale}")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!(
                "arcface margin must be in [0, pi/2), got {margin}"
            )));
        }
        Ok(ArcFaceHead {
            weight_name: weight_name.to_string(),
            num_classes,
            feature_dim,
            scale,
            margin,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let bound = 1.0 / (self.feature_dim as f64).sqrt();
        let mut r = rng::stream(seed, 0xA3C);
        let data: Vec<f64> = (0..self.num_classes * self.feature_dim)
            .map(|_| {
                use rand::Rng;
                r.random_range(-bound..=bound)
            })
            .collect();
        store.insert(
            &self.weight_name,
            Tensor::new(vec![self.num_classes, self.feature_dim], data)?,
        )
    }

    /// Mean over the batch of the margin-adjusted cross-entropy.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[NodeId],
        labels: &[usize],
    ) -> Result<NodeId> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Contract(format!(
                "arcface: {} features vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let w = tape.param(store, &self.weight_name)?;
        let mut per_sample = Vec::with_capacity(features.len());
        for (&f, &label) in features.iter().zip(labels) {
            if label >= self.num_classes {
                return Err(Error::Contract(format!(
                    "label {label} out of range for {} classes",
                    self.num_classes
                )));
            }
            let cos = tape.cosine_logits(w, f)?;
            per_sample.push(tape.arc_margin_ce(cos, label, self.scale, self.margin)?);
        }
        tape.mean(per_sample)
    }
}

/// (1/N) sum of squared L2 distances between paired batches. Divides by
/// the batch size only, not by the feature dimension.
pub fn ada_loss(tape: &mut Tape, u_batch: &[NodeId], v_batch: &[NodeId]) -> Result<NodeId> {
    if u_batch.len() != v_batch.len() || u_batch.is_empty() {
        return Err(Error::Contract(format!(
            "ada_loss: batch lengths {} vs {}",
            u_batch.len(),
            v_batch.len()
        )));
    }
    let mut terms = Vec::with_capacity(u_batch.len());
    for (&u, &v) in u_batch.iter().zip(v_batch) {
        let diff = tape.sub(u, v)?;
        terms.push(tape.sum_squares(diff));
    }
    tape.mean(terms)
}

/// l_arc + lambda * l_ada
pub fn total_loss(tape: &mut Tape, l_arc: NodeId, l_ada: NodeId, lambda: f64) -> Result<NodeId> {
    let scaled = tape.scale(l_ada, lambda);
    tape.add(l_arc, scaled)
}
