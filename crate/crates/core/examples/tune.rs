//! Scratch harness for picking planted-recovery hyperparameters.

use std::time::Instant;

use vidalign_core::config::ModelConfig;
use vidalign_core::dataset::SamplingMode;
use vidalign_core::retrieval::{evaluate_retrieval, EvalOptions, RetrievalDirection};
use vidalign_core::synthetic::{
    generate_planted_dataset, planted_alignment_accuracy, PlantedDataset, PlantedParams,
};
use vidalign_core::training::{fit, RegionSelection, Schedule, TrainOptions};

struct Knobs {
    sigma: f64,
    dropout: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            sigma: 0.05,
            dropout: 0.0,
        }
    }
}

fn run(
    planted: &PlantedDataset,
    seed: u64,
    epochs: usize,
    lr: f64,
    batch: usize,
    use_local: bool,
    use_refinement: bool,
    knobs: &Knobs,
) -> (f64, f64, f64, f64) {
    let train = planted.to_dataset(&planted.train).unwrap();
    let test = planted.to_dataset(&planted.test).unwrap();
    let mut config = ModelConfig::desk(train.vocab.id_space());
    config.use_local_losses = use_local;
    config.use_refinement = use_refinement;
    config.sigma = knobs.sigma;
    config.dropout = knobs.dropout;
    let schedule = Schedule {
        base_lr: lr,
        decay_epochs: vec![],
        decay_factor: 0.1,
        total_epochs: epochs,
    };
    let opts = TrainOptions {
        batch_size: batch,
        seed,
        num_frames: 1,
        frame_mode: SamplingMode::Random,
        selection: RegionSelection::Sorted,
    };
    let t0 = Instant::now();
    let result = fit(&train, &config, &schedule, &opts, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let report = evaluate_retrieval(
        &result.store,
        &config,
        &test,
        RetrievalDirection::T2v,
        &EvalOptions::default(),
    )
    .unwrap();
    let train_report = evaluate_retrieval(
        &result.store,
        &config,
        &train,
        RetrievalDirection::T2v,
        &EvalOptions::default(),
    )
    .unwrap();
    // component breakdown on test
    let (videos, texts) = vidalign_core::retrieval::encode_split(
        &result.store, &config, &test, 8,
    )
    .unwrap();
    let bundle = vidalign_core::alignment::compute_bundle(
        &videos,
        &texts,
        vidalign_core::alignment::LossFlags::default(),
    )
    .unwrap();
    let b = bundle.batch_size();
    let mut global_hits = 0;
    let mut local_hits = 0;
    for q in 0..b {
        let gscores: Vec<f64> = (0..b).map(|g| bundle.s_global.at(g, q)).collect();
        let lscores: Vec<f64> = (0..b).map(|g| bundle.s_local_l2v.at(q, g)).collect();
        if vidalign_core::retrieval::rank_of_truth(&gscores, q) == 1 {
            global_hits += 1;
        }
        if vidalign_core::retrieval::rank_of_truth(&lscores, q) == 1 {
            local_hits += 1;
        }
    }
    let truth = PlantedDataset::truth_map(&planted.test);
    let acc = planted_alignment_accuracy(&result.store, &config, &test, &truth).unwrap();
    let first = result.log.first().unwrap().terms.total;
    let last = result.log.last().unwrap().terms.total;
    println!(
        "seed {seed} ep {epochs} lr {lr} b {batch} local {use_local} ref {use_refinement}: \
         loss {first:.2}->{last:.3}  testR@1 {:.1} (g {:.1} l {:.1})  trainR@1 {:.1}  MedR {:.1}  align {acc:.1}  ({train_secs:.1}s)",
        report.r1,
        100.0 * global_hits as f64 / b as f64,
        100.0 * local_hits as f64 / b as f64,
        train_report.r1,
        report.med_r
    );
    (report.r1, acc, last, train_secs)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("full");

    let params = PlantedParams::default();
    let planted = generate_planted_dataset(&params).unwrap();

    match mode {
        "full" => {
            for lr in [3e-4, 1e-3] {
                for batch in [16, 32, 64] {
                    run(&planted, 0, 200, lr, batch, true, true, &Knobs::default());
                }
            }
        }
        "knobs" => {
            for sigma in [0.05, 0.1, 0.2] {
                for dropout in [0.0, 0.1] {
                    run(
                        &planted,
                        0,
                        200,
                        3e-4,
                        32,
                        true,
                        true,
                        &Knobs { sigma, dropout },
                    );
                }
            }
        }
        "pool" => {
            for n_concepts in [32, 48, 64] {
                let mut p = PlantedParams::default();
                p.n_concepts = n_concepts;
                let planted = generate_planted_dataset(&p).unwrap();
                println!("--- n_concepts {n_concepts}");
                for (sigma, dropout, lr) in
                    [(0.1, 0.0, 3e-4), (0.1, 0.05, 3e-4), (0.1, 0.0, 5e-4)]
                {
                    run(&planted, 0, 200, lr, 32, true, true, &Knobs { sigma, dropout });
                }
            }
        }
        "one" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
            let sigma: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
            let dropout: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);
            run(
                &planted,
                0,
                epochs,
                lr,
                batch,
                true,
                true,
                &Knobs { sigma, dropout },
            );
        }
        "ablate" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
            let mut full_r1 = vec![];
            let mut base_r1 = vec![];
            let mut ref_acc = vec![];
            let mut noref_acc = vec![];
            let knobs = Knobs::default();
            for seed in 0..5 {
                let (r1, acc, _, _) = run(&planted, seed, epochs, lr, batch, true, true, &knobs);
                full_r1.push(r1);
                ref_acc.push(acc);
                let (r1b, _, _, _) = run(&planted, seed, epochs, lr, batch, false, true, &knobs);
                base_r1.push(r1b);
                let (_, accn, _, _) = run(&planted, seed, epochs, lr, batch, true, false, &knobs);
                noref_acc.push(accn);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "MEANS: full R@1 {:.1} vs base R@1 {:.1} | refine acc {:.1} vs noref acc {:.1}",
                mean(&full_r1),
                mean(&base_r1),
                mean(&ref_acc),
                mean(&noref_acc)
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
