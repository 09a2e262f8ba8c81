//! Trainer hyperparameter scout: runs the end-to-end training check for a
//! list of `LR,DECAY,BATCH` triples and reports mAP lift and how monotone
//! the per-stage loss traces are.
//!
//! Usage: cargo run -p odgi-core --example calibrate -- 0.1,0.05,50 0.2,0.02,25

use std::time::Instant;

use odgi_core::evalmetrics::evaluate_pipeline;
use odgi_core::pipeline::{scene_inputs, PipelineConfig};
use odgi_core::synthdata::{generate, Clustering, SceneGenConfig};
use odgi_core::training::{train_two_stage, TrainConfig, TwoStageModel};
use odgi_core::transition::TransitionConfig;

fn monotone_fraction(losses: &[f64]) -> f64 {
    if losses.len() < 2 {
        return 1.0;
    }
    let ok = losses.windows(2).filter(|w| w[1] <= w[0] + 1e-9).count();
    ok as f64 / (losses.len() - 1) as f64
}

fn worst_jump(losses: &[f64]) -> f64 {
    losses.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn main() {
    let candidates: Vec<(f64, f64, usize, f64)> = std::env::args()
        .skip(1)
        .map(|arg| {
            let parts: Vec<&str> = arg.split(',').collect();
            assert_eq!(parts.len(), 4, "expected LR,DECAY,BATCH,LR2SCALE, got {arg}");
            (
                parts[0].parse().expect("lr"),
                parts[1].parse().expect("decay"),
                parts[2].parse().expect("batch"),
                parts[3].parse().expect("lr2 scale"),
            )
        })
        .collect();

    let gen = SceneGenConfig {
        seed: 42,
        mean_objects: 2.0,
        mean_area_fraction: 0.01,
        clustering: Clustering::None,
        image_size_px: 512,
        min_separation: 0.25,
        max_cluster_size: 0,
        cluster_min_distance: 0.0,
    };
    let pairs = generate(&gen, 500).unwrap();
    let (scenes, images): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let inputs = scene_inputs(&scenes, Some(&images));

    let eval_cfg = PipelineConfig::with_resolutions(
        &[512, 256],
        TransitionConfig::new(0.15, 0.7, 0.5, 3).unwrap(),
    )
    .unwrap();

    let untrained = TwoStageModel::init(512, 256, 0).unwrap();
    let t = Instant::now();
    let map_before = evaluate_pipeline(&eval_cfg, &[&untrained.stage1, &untrained.stage2], &inputs)
        .unwrap()
        .report
        .map50;
    println!("untrained mAP@0.5 = {map_before:.4}  (eval took {:.1?})", t.elapsed());

    let single_cfg = PipelineConfig::single_stage(512).unwrap();

    for (lr, decay, batch, lr2) in candidates {
        let tcfg = TrainConfig {
            epochs: 50,
            learning_rate: lr,
            lr_decay: decay,
            batch_size: batch,
            stage2_lr_scale: lr2,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let run = train_two_stage(512, 256, &scenes, &images, &tcfg).unwrap();
        let train_time = t.elapsed();
        let t = Instant::now();
        let map_after =
            evaluate_pipeline(&eval_cfg, &[&run.model.stage1, &run.model.stage2], &inputs)
                .unwrap()
                .report
                .map50;
        let map_single = evaluate_pipeline(&single_cfg, &[&run.model.stage1], &inputs)
            .unwrap()
            .report
            .map50;
        let eval_time = t.elapsed();

        let s1: Vec<f64> = run.history.iter().map(|e| e.stage1_loss).collect();
        let s2: Vec<f64> = run.history.iter().filter_map(|e| e.stage2_loss).collect();
        if std::env::var_os("CAL_TRACE").is_some() {
            let fmt = |v: &[f64]| {
                v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
            };
            println!("  s1 trace: {}", fmt(&s1));
            println!("  s2 trace: {}", fmt(&s2));
            let counts: Vec<String> =
                run.history.iter().map(|e| e.stage2_samples.to_string()).collect();
            println!("  s2 samples: {}", counts.join(" "));
        }
        println!(
            "lr {lr:<6} decay {decay:<5} batch {batch:<4} lr2 {lr2:<5} | mAP {map_after:.4} (gain {:+.4}, stage1-only {map_single:.4}) | \
             mono s1 {:.2} (worst +{:.2e}) s2 {:.2} (worst +{:.2e}) | s1 {:.4}->{:.4} s2 {:.4}->{:.4} | train {:.1?} eval {:.1?}",
            map_after - map_before,
            monotone_fraction(&s1),
            worst_jump(&s1),
            monotone_fraction(&s2),
            worst_jump(&s2),
            s1.first().unwrap(),
            s1.last().unwrap(),
            s2.first().unwrap_or(&f64::NAN),
            s2.last().unwrap_or(&f64::NAN),
            train_time,
            eval_time,
        );
    }
}
