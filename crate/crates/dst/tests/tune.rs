//! Scratch probe for picking the default-corpus epoch budget. Not part of
//! the suite; run with `cargo test --test tune -- --nocapture --ignored`.

use std::time::Instant;

use dst::radar::RadarConfig;
use dst::train::{simulate_corpus, train, SplitSpec, TrainConfig};

#[test]
#[ignore]
fn probe_learning_trajectory() {
    let radar = RadarConfig::default();
    let t0 = Instant::now();
    let corpus = simulate_corpus(&radar, 10, 1, false).unwrap();
    println!("corpus: {} windows in {:.1} s", corpus.n_windows(), t0.elapsed().as_secs_f64());

    for epochs in [2usize, 3] {
        let cfg = TrainConfig {
            epochs,
            repeats: 2,
            split: SplitSpec::Random { test_fraction: 0.2 },
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let out = train(&corpus, &cfg).unwrap();
        println!(
            "epochs={epochs}: acc={:.4}±{:.4} f1={:.4} auc={:?} in {:.1} s",
            out.report.acc,
            out.report.acc_sd,
            out.report.f1,
            out.report.auc,
            t.elapsed().as_secs_f64()
        );
        for r in &out.report.repeats {
            println!(
                "  seed {}: acc={:.4} auc={:?} losses={:?}",
                r.seed, r.acc, r.auc, r.epoch_losses
            );
        }
    }
}
