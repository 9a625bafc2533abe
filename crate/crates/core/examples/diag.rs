//! Diagnostic harness for tuning the free dataset/model knobs.

use fspfm_core::checkpoint::Stage;
use fspfm_core::config::Config;
use fspfm_core::eval::{score_pairs, verify_10fold, EvalNets};
use fspfm_core::pipeline::{self, Arm};
use fspfm_core::rng;
use fspfm_core::synth::{
    make_dataset, make_finetune_pairs, make_verification_pairs, Pose, Split, PROFILE_MIN_ANGLE,
};
use fspfm_core::train::{clone_nets, finetune, pretrain, FinetuneOptions, PretrainOptions};

fn gi_means(scores: &[f64], pairs: &fspfm_core::synth::PairSet) -> (f64, f64) {
    let half = pairs.pairs.len() as f64 / 2.0;
    let g = scores
        .iter()
        .zip(&pairs.pairs)
        .filter(|(_, p)| p.genuine)
        .map(|(s, _)| s)
        .sum::<f64>()
        / half;
    let i = scores
        .iter()
        .zip(&pairs.pairs)
        .filter(|(_, p)| !p.genuine)
        .map(|(s, _)| s)
        .sum::<f64>()
        / half;
    (g, i)
}

fn main() {
    let mut cfg = Config::default();
    let mut quick = false;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--quick" {
            quick = true;
            continue;
        }
        let v = args.next().unwrap();
        match a.as_str() {
            "--spi" => cfg.samples_per_identity = v.parse().unwrap(),
            "--hidden" => cfg.hidden_dim = v.parse().unwrap(),
            "--eval-spi" => cfg.eval_samples_per_identity = v.parse().unwrap(),
            "--n-pairs" => cfg.n_pairs = v.parse().unwrap(),
            "--data-seed" => cfg.data_seed = v.parse().unwrap(),
            "--stage2-lr" => cfg.stage2_lr = v.parse().unwrap(),
            "--stage2-batch" => cfg.stage2_batch = v.parse().unwrap(),
            "--stage2-epochs" => cfg.stage2_epochs = v.parse().unwrap(),
            "--arcface-s" => cfg.arcface_s = v.parse().unwrap(),
            "--arcface-m" => cfg.arcface_m = v.parse().unwrap(),
            "--stage1-lr" => cfg.stage1_lr = v.parse().unwrap(),
            other => panic!("unknown flag {other}"),
        }
    }
    println!(
        "spi={} hidden={} eval_spi={} n_pairs={} data_seed={} s2lr={} s2e={}",
        cfg.samples_per_identity,
        cfg.hidden_dim,
        cfg.eval_samples_per_identity,
        cfg.n_pairs,
        cfg.data_seed,
        cfg.stage2_lr,
        cfg.stage2_epochs
    );

    let eval_data = make_dataset(&cfg.eval_spec()).unwrap();
    let pair_seed = rng::mix(cfg.seed, 0xEE);
    let fold_seed = rng::mix(cfg.seed, 0xFD);

    // raw-observation shortcut floor
    for (split, name) in [(Split::FrontalFrontal, "frontal"), (Split::CrossPose, "cross")] {
        let pairs = make_verification_pairs(&eval_data, split, cfg.n_pairs, pair_seed).unwrap();
        let scores: Vec<f64> = pairs
            .pairs
            .iter()
            .map(|p| {
                fspfm_core::eval::cosine(
                    &eval_data.samples[p.a].observation,
                    &eval_data.samples[p.b].observation,
                )
                .unwrap()
            })
            .collect();
        let res = verify_10fold(&pairs, &scores, fold_seed, name).unwrap();
        let (g, i) = gi_means(&scores, &pairs);
        println!("raw {name}: acc {:.4}  g/i {g:.3}/{i:.3}", res.mean_accuracy);
    }

    // untrained extractor: how much structure survives a random init
    {
        let store = fspfm_core::train::init_stage1(&cfg).unwrap();
        let world = eval_data.world();
        let pairs = make_verification_pairs(&eval_data, Split::CrossPose, cfg.n_pairs, pair_seed)
            .unwrap();
        let scores =
            score_pairs(&store, &EvalNets::stage1(), &world, &cfg, &eval_data, &pairs, false)
                .unwrap();
        let res = verify_10fold(&pairs, &scores, fold_seed, "init").unwrap();
        let (g, i) = gi_means(&scores, &pairs);
        println!("init cross: acc {:.4}  g/i {g:.3}/{i:.3}", res.mean_accuracy);
    }

    let train = make_dataset(&cfg.train_spec()).unwrap();
    for arm in [Arm::Baseline, Arm::SyntheticData, Arm::Fspfm, Arm::Finetune, Arm::FinetuneAda] {
        if quick && arm.uses_finetune() {
            continue;
        }
        let t0 = std::time::Instant::now();
        let stage1_data = if arm == Arm::Baseline { train.frontal_only() } else { train.clone() };
        let (ckpt, s1log) =
            pretrain(&stage1_data, &cfg, PretrainOptions { use_fspfm: arm.uses_fspfm() }).unwrap();
        let s1 = format!(
            " s1 {:.3}->{:.3}",
            s1log.epoch_total.first().unwrap(),
            s1log.epoch_total.last().unwrap()
        );
        let (ckpt, s2log) = if arm.uses_finetune() {
            let store = clone_nets(&ckpt, &cfg).unwrap();
            let pairs = make_finetune_pairs(&train, PROFILE_MIN_ANGLE).unwrap();
            let (c, l) = finetune(
                store,
                &train,
                &pairs,
                &cfg,
                FinetuneOptions { attention_enabled: arm.uses_ada() },
            )
            .unwrap();
            (c, Some(l))
        } else {
            (ckpt, None)
        };
        let (frontal, cross) =
            pipeline::evaluate_checkpoint(&ckpt, &eval_data, &cfg, arm.uses_fspfm()).unwrap();

        // genuine/impostor cosine means on the cross split
        let net = match ckpt.meta.stage {
            Stage::Pretrain => EvalNets::stage1(),
            Stage::Finetune => EvalNets::stage2(),
        };
        let world = eval_data.world();
        let pairs = make_verification_pairs(&eval_data, Split::CrossPose, cfg.n_pairs, pair_seed)
            .unwrap();
        let scores =
            score_pairs(&ckpt.store, &net, &world, &cfg, &eval_data, &pairs, arm.uses_fspfm())
                .unwrap();
        let (gmean, imean) = gi_means(&scores, &pairs);
        let (mut nf, mut np, mut cf, mut cp) = (0.0, 0.0, 0.0, 0.0);
        for s in &eval_data.samples {
            let e = fspfm_core::eval::embed(
                &ckpt.store,
                net.pick(s),
                &world,
                &cfg,
                s,
                arm.uses_fspfm(),
            )
            .unwrap();
            if s.pose.is_frontal() {
                nf += e.norm();
                cf += 1.0;
            } else {
                np += e.norm();
                cp += 1.0;
            }
        }
        let norms = format!(" |f|/|p| {:.2}/{:.2}", nf / cf, np / cp);

        let ada = s2log
            .map(|l| {
                format!(
                    " ada {:.4}->{:.4}",
                    l.epoch_ada.first().unwrap(),
                    l.epoch_ada.last().unwrap()
                )
            })
            .unwrap_or_default();
        let shift = if arm.uses_fspfm() {
            let f = pipeline::mean_frontalization_shift(&ckpt, &eval_data, &cfg, &Pose::frontal())
                .unwrap();
            let p = pipeline::mean_frontalization_shift(
                &ckpt,
                &eval_data,
                &cfg,
                &Pose::new(90.0, 0.0, 0.0).unwrap(),
            )
            .unwrap();
            format!(" shift f {f:.3} p {p:.3} ratio {:.2}", p / f)
        } else {
            String::new()
        };
        println!(
            "{:<16} frontal {:.4} cross {:.4}  g/i {gmean:.3}/{imean:.3}{norms}{s1}{ada}{shift}  [{:.0}s]",
            arm.name(),
            frontal.mean_accuracy,
            cross.mean_accuracy,
            t0.elapsed().as_secs_f64()
        );
    }
}
