//! Two-stage training: pre-train the extractor + frontalization + head on
//! all samples, then pair-wise fine-tuning where only the profile-branch
//! frontalization and the frontal-branch attention layer move.

use crate::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fspfm::{init_mlp, mlp_forward, Attention, Fspfm};
use crate::losses::{ada_loss, total_loss, ArcFaceHead};
use crate::rng;
use crate::synth::{Dataset, PairKind, PairSet, POSE_NOISE_SIGMA};
use crate::tape::{NodeId, Tape};
use crate::tensor::ParamStore;

const TAG_INIT_EXTRACTOR: u64 = 0x101;
const TAG_INIT_FSPFM: u64 = 0x102;
const TAG_INIT_HEAD: u64 = 0x103;
const TAG_INIT_ATTENTION: u64 = 0x104;
const TAG_SHUFFLE_S1: u64 = 0x105;
const TAG_SHUFFLE_S2: u64 = 0x106;

/// Per-epoch mean losses, for convergence assertions and reports.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_total: Vec<f64>,
    pub epoch_ada: Vec<f64>,
}

/// Stage-1 learning rate: base * factor^(number of decay epochs <= epoch).
pub fn lr_schedule(epoch: usize, cfg: &Config) -> Result<f64> {
    if epoch >= cfg.stage1_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside stage-1 range 0..{}",
            cfg.stage1_epochs
        )));
    }
    let hits = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.stage1_lr * cfg.decay_factor.powi(hits as i32))
}

fn extractor_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    mlp_forward(tape, store, prefix, x, false)
}

fn head_for(cfg: &Config) -> Result<ArcFaceHead> {
    ArcFaceHead::new(
        "head.W",
        cfg.num_identities,
        cfg.feature_dim,
        cfg.arcface_s,
        cfg.arcface_m,
    )
}

/// Initialize the stage-1 parameter store: extractor, FSPFM, head.
pub fn init_stage1(cfg: &Config) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_mlp(
        &mut store,
        "extractor",
        cfg.observation_dim,
        cfg.hidden_dim,
        cfg.feature_dim,
        false,
        rng::mix(cfg.seed, TAG_INIT_EXTRACTOR),
    )?;
    let fspfm = Fspfm::new("fspfm", cfg.feature_dim, cfg.pose_dim);
    fspfm.init(&mut store, rng::mix(cfg.seed, TAG_INIT_FSPFM))?;
    head_for(cfg)?.init(&mut store, rng::mix(cfg.seed, TAG_INIT_HEAD))?;
    Ok(store)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOptions {
    /// Apply the frontalization module during pre-training (ablation rows
    /// without it train the plain extractor + head).
    pub use_fspfm: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { use_fspfm: true }
    }
}

/// Stage 1: optimize the recognition loss over (optionally frontalized)
/// features of every sample, frontal and profile alike.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &Config,
    opts: PretrainOptions,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Contract("pretrain: empty dataset".into()));
    }
    if dataset.spec.observation_dim != cfg.observation_dim
        || dataset.spec.pose_dim != cfg.pose_dim
    {
        return Err(Error::Shape(format!(
            "dataset dims (D={}, p={}) do not match config (D={}, p={})",
            dataset.spec.observation_dim, dataset.spec.pose_dim, cfg.observation_dim, cfg.pose_dim
        )));
    }
    let world = dataset.world();
    let head = head_for(cfg)?;
    let fspfm = Fspfm::new("fspfm", cfg.feature_dim, cfg.pose_dim);
    let mut store = init_stage1(cfg)?;
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    for epoch in 0..cfg.stage1_epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut shuffler = rng::stream(cfg.seed, rng::mix(TAG_SHUFFLE_S1, epoch as u64));
        rng::shuffle(&mut shuffler, &mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let mut features = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &dataset.samples[i];
                let x = tape.constant(sample.observation.clone())?;
                let f = extractor_forward(&mut tape, &store, "extractor", x)?;
                let f = if opts.use_fspfm {
                    let theta = tape
                        .constant(world.pose_embed(&sample.pose, POSE_NOISE_SIGMA).feature)?;
                    fspfm.frontalize(&mut tape, &store, f, theta)?
                } else {
                    f
                };
                features.push(f);
                labels.push(sample.identity);
            }
            let loss = head.loss(&mut tape, &store, &features, &labels)?;
            let value = tape.value(loss).scalar_value()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretrain diverged at epoch {epoch}: loss = {value}"
                )));
            }
            tape.backward(loss, &mut store)?;
            store.sgd_step(lr, cfg.momentum)?;
            epoch_loss += value;
            batches += 1.0;
        }
        log.epoch_total.push(epoch_loss / batches);
    }

    Ok((
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Pretrain,
                config_digest: cfg.digest(),
                seed: cfg.seed,
                epoch: cfg.stage1_epochs,
                fspfm_enabled: opts.use_fspfm,
            },
            store,
        },
        log,
    ))
}

/// Build the stage-2 parameter store from a stage-1 checkpoint: F-Net and
/// P-Net inherit identical weights, F-Net gains a fresh attention layer,
/// and everything except P-Net's frontalization and F-Net's attention is
/// frozen.
pub fn clone_nets(ckpt: &Checkpoint, cfg: &Config) -> Result<ParamStore> {
    if ckpt.meta.stage != Stage::Pretrain {
        return Err(Error::Contract(
            "clone_nets requires a stage-1 (pretrain) checkpoint".into(),
        ));
    }
    let mut store = ParamStore::new();
    for net in ["fnet", "pnet"] {
        for (name, entry) in ckpt.store.iter() {
            if name.starts_with("extractor.") || name.starts_with("fspfm.") {
                store.insert(&format!("{net}.{name}"), entry.value.clone())?;
            }
        }
        if net == "fnet" {
            let attention = Attention::new("fnet.attention", cfg.feature_dim);
            attention.init(&mut store, rng::mix(cfg.seed, TAG_INIT_ATTENTION))?;
        }
    }
    store.insert("head.W", ckpt.store.get("head.W")?.value.clone())?;
    store.set_frozen_prefix("", true);
    store.set_frozen_prefix("pnet.fspfm.", false);
    store.set_frozen_prefix("fnet.attention.", false);
    Ok(store)
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    /// With attention disabled the frontal branch is used as-is
    /// (equivalent to an all-ones weight vector), turning the adaptation
    /// term into a plain mean-squared alignment.
    pub attention_enabled: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions { attention_enabled: true }
    }
}

/// Stage 2: pair-wise fine-tuning with the combined recognition +
/// adaptation objective at fixed learning rate.
pub fn finetune(
    mut store: ParamStore,
    dataset: &Dataset,
    pairs: &PairSet,
    cfg: &Config,
    opts: FinetuneOptions,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if pairs.kind != PairKind::Finetune {
        return Err(Error::Contract("finetune requires a finetune pair set".into()));
    }
    if pairs.pairs.is_empty() {
        return Err(Error::Contract("finetune: empty pair set".into()));
    }
    for required in ["pnet.fspfm.t1.l1.W", "fnet.attention.l1.W", "head.W"] {
        if !store.contains(required) {
            return Err(Error::Contract(format!(
                "finetune store missing '{required}'; run clone_nets first"
            )));
        }
    }
    let world = dataset.world();
    let head = head_for(cfg)?;
    let fspfm_f = Fspfm::new("fnet.fspfm", cfg.feature_dim, cfg.pose_dim);
    let fspfm_p = Fspfm::new("pnet.fspfm", cfg.feature_dim, cfg.pose_dim);
    let attention = Attention::new("fnet.attention", cfg.feature_dim);

    // snapshot of everything frozen, to enforce the contract afterwards
    let frozen_before: Vec<(String, Vec<u64>)> = store
        .iter()
        .filter(|(_, e)| e.frozen)
        .map(|(n, e)| (n.to_string(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..pairs.pairs.len()).collect();
    for epoch in 0..cfg.stage2_epochs {
        let mut shuffler = rng::stream(cfg.seed, rng::mix(TAG_SHUFFLE_S2, epoch as u64));
        rng::shuffle(&mut shuffler, &mut order);
        let mut epoch_total = 0.0;
        let mut epoch_ada = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.stage2_batch) {
            let mut tape = Tape::new();
            let mut u_batch = Vec::with_capacity(chunk.len());
            let mut v_batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = &pairs.pairs[i];
                let frontal = &dataset.samples[pair.a];
                let profile = &dataset.samples[pair.b];
                // frontal branch: frozen extractor + frozen frontalization,
                // weighted by the trainable attention layer
                let xf = tape.constant(frontal.observation.clone())?;
                let ff = extractor_forward(&mut tape, &store, "fnet.extractor", xf)?;
                let theta_f = tape
                    .constant(world.pose_embed(&frontal.pose, POSE_NOISE_SIGMA).feature)?;
                let uf = fspfm_f.frontalize(&mut tape, &store, ff, theta_f)?;
                let u = if opts.attention_enabled {
                    let am = attention.weights(&mut tape, &store, ff)?;
                    tape.hadamard(uf, am)?
                } else {
                    uf
                };
                // profile branch: frozen extractor + trainable frontalization
                let xp = tape.constant(profile.observation.clone())?;
                let fp = extractor_forward(&mut tape, &store, "pnet.extractor", xp)?;
                let theta_p = tape
                    .constant(world.pose_embed(&profile.pose, POSE_NOISE_SIGMA).feature)?;
                let v = fspfm_p.frontalize(&mut tape, &store, fp, theta_p)?;
                u_batch.push(u);
                v_batch.push(v);
                labels.push(profile.identity);
            }
            let l_arc = head.loss(&mut tape, &store, &v_batch, &labels)?;
            let l_ada = ada_loss(&mut tape, &u_batch, &v_batch)?;
            let loss = total_loss(&mut tape, l_arc, l_ada, cfg.lambda)?;
            let total = tape.value(loss).scalar_value()?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "finetune diverged at epoch {epoch}: loss = {total}"
                )));
            }
            epoch_ada += tape.value(l_ada).scalar_value()?;
            epoch_total += total;
            batches += 1.0;
            tape.backward(loss, &mut store)?;
            store.sgd_step(cfg.stage2_lr, cfg.momentum)?;
        }
        log.epoch_total.push(epoch_total / batches);
        log.epoch_ada.push(epoch_ada / batches);
    }

    for (name, before) in &frozen_before {
        let after = &store.get(name)?.value;
        let same = after.len() == before.len()
            && after.data().iter().zip(before).all(|(v, b)| v.to_bits() == *b);
        if !same {
            return Err(Error::Contract(format!(
                "frozen parameter '{name}' changed during finetune"
            )));
        }
    }

    Ok((
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Finetune,
                config_digest: cfg.digest(),
                seed: cfg.seed,
                epoch: cfg.stage2_epochs,
                fspfm_enabled: true,
            },
            store,
        },
        log,
    ))
}
