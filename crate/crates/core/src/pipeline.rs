//! End-to-end arms: data generation, the two training stages, and the
//! evaluation splits, composed the way the ablation table needs them.

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    score_pairs, verify_10fold, AblationRow, EvalNets, VerificationResult,
};
use crate::rng;
use crate::synth::{
    make_dataset, make_finetune_pairs, make_verification_pairs, Dataset, Split,
    PROFILE_MIN_ANGLE,
};
use crate::train::{clone_nets, finetune, pretrain, FinetuneOptions, PretrainOptions};

const TAG_PAIR_SEED: u64 = 0xEE;
const TAG_FOLD_SEED: u64 = 0xFD;

/// The five rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Frontal-only training data, plain extractor.
    Baseline,
    /// Adds the synthetic profile observations, still no frontalization.
    SyntheticData,
    /// Frontalization module trained end-to-end in stage 1.
    Fspfm,
    /// Stage-2 fine-tuning with the plain alignment loss.
    Finetune,
    /// Stage-2 fine-tuning with the attention-guided alignment loss.
    FinetuneAda,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Baseline,
        Arm::SyntheticData,
        Arm::Fspfm,
        Arm::Finetune,
        Arm::FinetuneAda,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::SyntheticData => "+synthetic-data",
            Arm::Fspfm => "+fspfm",
            Arm::Finetune => "+finetune",
            Arm::FinetuneAda => "+finetune+ada",
        }
    }

    pub fn uses_fspfm(&self) -> bool {
        !matches!(self, Arm::Baseline | Arm::SyntheticData)
    }

    pub fn uses_finetune(&self) -> bool {
        matches!(self, Arm::Finetune | Arm::FinetuneAda)
    }

    pub fn uses_ada(&self) -> bool {
        matches!(self, Arm::FinetuneAda)
    }
}

pub struct ArmResult {
    pub arm: Arm,
    pub checkpoint: Checkpoint,
    pub frontal: VerificationResult,
    pub cross_pose: VerificationResult,
}

impl ArmResult {
    pub fn row(&self) -> AblationRow {
        AblationRow {
            name: self.arm.name().to_string(),
            fspfm: self.arm.uses_fspfm(),
            ft: self.arm.uses_finetune(),
            ada: self.arm.uses_ada(),
            frontal_accuracy: self.frontal.mean_accuracy,
            cross_pose_accuracy: self.cross_pose.mean_accuracy,
        }
    }
}

/// Train one arm on the given training data.
pub fn train_arm(train: &Dataset, cfg: &Config, arm: Arm) -> Result<Checkpoint> {
    let stage1_data = if arm == Arm::Baseline {
        let frontal = train.frontal_only();
        if frontal.samples.is_empty() {
            return Err(Error::Contract("baseline arm: no frontal samples".into()));
        }
        frontal
    } else {
        train.clone()
    };
    let (ckpt, _) = pretrain(
        &stage1_data,
        cfg,
        PretrainOptions { use_fspfm: arm.uses_fspfm() },
    )?;
    if !arm.uses_finetune() {
        return Ok(ckpt);
    }
    let store = clone_nets(&ckpt, cfg)?;
    let pairs = make_finetune_pairs(train, PROFILE_MIN_ANGLE)?;
    let (ckpt, _) = finetune(
        store,
        train,
        &pairs,
        cfg,
        FinetuneOptions { attention_enabled: arm.uses_ada() },
    )?;
    Ok(ckpt)
}

/// Evaluate a checkpoint on both verification splits of the held-out set.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    eval_data: &Dataset,
    cfg: &Config,
    use_fspfm: bool,
) -> Result<(VerificationResult, VerificationResult)> {
    let nets = match ckpt.meta.stage {
        Stage::Pretrain => EvalNets::stage1(),
        Stage::Finetune => EvalNets::stage2(),
    };
    let world = eval_data.world();
    let pair_seed = rng::mix(cfg.seed, TAG_PAIR_SEED);
    let fold_seed = rng::mix(cfg.seed, TAG_FOLD_SEED);
    let mut results = Vec::with_capacity(2);
    for (split, name) in [(Split::FrontalFrontal, "frontal"), (Split::CrossPose, "cross_pose")] {
        let pairs = make_verification_pairs(eval_data, split, cfg.n_pairs, pair_seed)?;
        let scores = score_pairs(&ckpt.store, &nets, &world, cfg, eval_data, &pairs, use_fspfm)?;
        results.push(verify_10fold(&pairs, &scores, fold_seed, name)?);
    }
    let cross = results.pop().unwrap();
    let frontal = results.pop().unwrap();
    Ok((frontal, cross))
}

/// Run one ablation arm end to end: train on the training identities,
/// evaluate on the held-out identities.
pub fn run_arm(cfg: &Config, arm: Arm) -> Result<ArmResult> {
    let train = make_dataset(&cfg.train_spec())?;
    let eval_data = make_dataset(&cfg.eval_spec())?;
    let checkpoint = train_arm(&train, cfg, arm)?;
    let (frontal, cross_pose) =
        evaluate_checkpoint(&checkpoint, &eval_data, cfg, arm.uses_fspfm())?;
    Ok(ArmResult { arm, checkpoint, frontal, cross_pose })
}

/// All five rows, sharing one training and one evaluation dataset.
pub fn run_ablation(cfg: &Config) -> Result<Vec<ArmResult>> {
    let train = make_dataset(&cfg.train_spec())?;
    let eval_data = make_dataset(&cfg.eval_spec())?;
    Arm::ALL
        .iter()
        .map(|&arm| {
            let checkpoint = train_arm(&train, cfg, arm)?;
            let (frontal, cross_pose) =
                evaluate_checkpoint(&checkpoint, &eval_data, cfg, arm.uses_fspfm())?;
            Ok(ArmResult { arm, checkpoint, frontal, cross_pose })
        })
        .collect()
}

/// Mean frontalization displacement |frontalize(f, theta) - f| over
/// synthesized captures of the evaluation identities at a fixed pose,
/// measured through the same branch that serves that pose at deployment.
pub fn mean_frontalization_shift(
    ckpt: &Checkpoint,
    eval_data: &Dataset,
    cfg: &Config,
    pose: &crate::synth::Pose,
) -> Result<f64> {
    let nets = match ckpt.meta.stage {
        Stage::Pretrain => EvalNets::stage1(),
        Stage::Finetune => EvalNets::stage2(),
    };
    let world = eval_data.world();
    let mut total = 0.0;
    let mut count = 0.0;
    for identity in 0..eval_data.spec.num_identities {
        let z = crate::synth::identity_latent(&eval_data.spec, identity);
        let obs = world.observe(
            &z,
            pose,
            eval_data.spec.occlusion_strength,
            eval_data.spec.noise_sigma,
            rng::mix(eval_data.spec.seed, 0x515F + identity as u64),
        )?;
        let sample = crate::synth::Sample { observation: obs, identity, pose: *pose };
        let net = nets.pick(&sample);
        let raw = crate::eval::embed(&ckpt.store, net, &world, cfg, &sample, false)?;
        let fronted = crate::eval::embed(&ckpt.store, net, &world, cfg, &sample, true)?;
        let shift: f64 = raw
            .data()
            .iter()
            .zip(fronted.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += shift;
        count += 1.0;
    }
    Ok(total / count)
}
