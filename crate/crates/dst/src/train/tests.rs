use std::sync::OnceLock;

use super::*;
use crate::model::prepare_session;
use crate::radar::{sample_physique, synth_window, CirWindow};

/// Hand-built micro corpus: user 0 holds blocks [calm, stress, calm], user 1
/// holds [stress, calm]; calm and stressed vitals are well separated.
fn micro_corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| build_corpus(&[&[false, true, false], &[true, false]], true))
}

fn build_corpus(user_blocks: &[&[bool]], with_estimates: bool) -> Corpus {
    let radar = RadarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let users = user_blocks
        .iter()
        .enumerate()
        .map(|(u, blocks)| {
            let mut subj = sample_physique(&radar, &mut rng);
            subj.motion_level = 0.0;
            let mut windows: Vec<CirWindow> = Vec::new();
            for (b, &stressed) in blocks.iter().enumerate() {
                for i in 0..BPTT_LEN {
                    let jitter = (i % 5) as f64;
                    subj.stressed = stressed;
                    subj.hr_bpm = if stressed { 104.0 + jitter } else { 66.0 + jitter };
                    subj.rr_bpm = if stressed { 21.0 } else { 14.0 };
                    let seed = 7000 + (u * 100 + b * BPTT_LEN + i) as u64;
                    let mut w = synth_window(&radar, &subj, seed).unwrap();
                    w.session_id = u as u32;
                    w.t0 = (b * BPTT_LEN + i) as f64 * radar.stride_s;
                    windows.push(w);
                }
            }
            let session = Session {
                total_windows: windows.len(),
                excluded: 0,
                session_id: u as u32,
                windows,
            };
            UserData {
                user_id: u as u32,
                sessions: vec![
                    prepare_session(&radar, u as u32, &session, with_estimates).unwrap(),
                ],
            }
        })
        .collect();
    Corpus { radar, users }
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        repeats: 1,
        split: SplitSpec::Random { test_fraction: 0.25 },
        ..TrainConfig::default()
    }
}

#[test]
fn random_split_is_block_granular_and_seeded() {
    let corpus = micro_corpus();
    let spec = SplitSpec::Random { test_fraction: 0.2 };
    let a = make_split(corpus, &spec, 11).unwrap();
    let b = make_split(corpus, &spec, 11).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.train.len() + a.test.len(), 5);
    assert_eq!(a.test.len(), 1);
    for t in &a.test {
        assert!(!a.train.contains(t));
    }
    // Every referenced block is a full 20-window slice.
    for &b in a.train.iter().chain(&a.test) {
        assert_eq!(block_windows(corpus, b).len(), BPTT_LEN);
    }
    assert!(matches!(
        make_split(corpus, &SplitSpec::Random { test_fraction: 1.5 }, 0),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn per_user_split_keeps_users_exclusive() {
    let corpus = micro_corpus();
    let spec = SplitSpec::PerUser { train_users: vec![0], test_users: vec![1] };
    let s = make_split(corpus, &spec, 0).unwrap();
    assert_eq!(s.train.len(), 3);
    assert_eq!(s.test.len(), 2);
    assert!(s.train.iter().all(|b| corpus.users[b.user].user_id == 0));
    assert!(s.test.iter().all(|b| corpus.users[b.user].user_id == 1));

    let overlap = SplitSpec::PerUser { train_users: vec![0, 1], test_users: vec![1] };
    assert!(make_split(corpus, &overlap, 0).is_err());
    let unknown = SplitSpec::PerUser { train_users: vec![0], test_users: vec![9] };
    assert!(make_split(corpus, &unknown, 0).is_err());
    let empty = SplitSpec::PerUser { train_users: vec![], test_users: vec![1] };
    assert!(make_split(corpus, &empty, 0).is_err());
}

#[test]
fn single_class_training_split_is_rejected_before_training() {
    // User 0 is all calm, so training on it alone cannot proceed.
    let corpus = build_corpus(&[&[false], &[true, false]], false);
    let cfg = TrainConfig {
        split: SplitSpec::PerUser { train_users: vec![0], test_users: vec![1] },
        ..fast_cfg()
    };
    match train(&corpus, &cfg) {
        Err(TrainError::Config(msg)) => assert!(msg.contains("single class"), "{msg}"),
        Err(other) => panic!("expected degenerate-split error, got {other}"),
        Ok(_) => panic!("expected degenerate-split error, got a successful run"),
    }
}

#[test]
fn training_is_bit_deterministic() {
    let corpus = micro_corpus();
    let cfg = TrainConfig { repeats: 2, ..fast_cfg() };
    let a = train(corpus, &cfg).unwrap();
    let b = train(corpus, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.repeats.len(), 2);
    // Each repeat held out one 20-window block.
    assert_eq!(a.report.confusion.total(), 2 * BPTT_LEN as u32);
    for r in &a.report.repeats {
        assert_eq!(r.epoch_losses.len(), cfg.epochs);
    }
    // The kept parameter store reproduces too.
    let ka: Vec<f32> = a.store.iter().flat_map(|e| e.value().to_vec()).collect();
    let kb: Vec<f32> = b.store.iter().flat_map(|e| e.value().to_vec()).collect();
    assert_eq!(ka, kb);
}

#[test]
fn overfitting_one_batch_strictly_reduces_the_loss() {
    // One fixed 40-window batch (two chained blocks). Between updates the
    // batch loss is re-measured without dropout, so the recorded sequence is
    // a deterministic objective rather than a noisy per-epoch estimate.
    let corpus = build_corpus(&[&[false, true]], false);
    let blocks = all_blocks(&corpus);
    assert_eq!(blocks.len(), 2);
    let mut master = ChaCha8Rng::seed_from_u64(41);
    let mut store: ParamStore<f32> = ParamStore::new();
    let model =
        DstModel::new(&mut store, &mut master, ModelConfig::default(), &corpus.radar).unwrap();
    let sites = model.bn_sites();
    // Bias-corrected Adam moves every coordinate by roughly `lr` at first, so
    // a conservative step keeps the five-epoch descent monotone.
    let adam = AdamConfig { lr: 3e-4, ..AdamConfig::default() };

    let batch_loss = |store: &ParamStore<f32>| -> f64 {
        let (probs, labels) = predict_blocks(&model, store, &corpus, &blocks).unwrap();
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        metrics::bce_loss(&[(&probs, &targets)]).unwrap()
    };

    let mut losses = vec![batch_loss(&store)];
    for _ in 0..5 {
        let mut accums: Vec<BnAccum> = sites.iter().map(|s| BnAccum::new(s.width)).collect();
        let mut carry = None;
        for &b in &blocks {
            let windows = block_windows(&corpus, b);
            let (_, next) = train_block(
                &model,
                &mut store,
                windows,
                carry.take(),
                master.gen(),
                1.0 / blocks.len() as f64,
                &mut accums,
            )
            .unwrap();
            carry = Some(next);
        }
        adam_step(&mut store, &adam).unwrap();
        for (site, acc) in sites.iter().zip(&accums) {
            update_running_stats(&mut store, site, acc).unwrap();
        }
        losses.push(batch_loss(&store));
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
}

#[test]
fn whole_corpus_evaluation_covers_every_window() {
    let corpus = micro_corpus();
    let out = train(corpus, &fast_cfg()).unwrap();
    let blocks = all_blocks(corpus);
    assert_eq!(blocks.len(), 5);
    let m = evaluate_blocks(&out.model, &out.store, corpus, &blocks, 0.5).unwrap();
    assert_eq!(m.confusion.total() as usize, corpus.n_windows());
}

#[test]
fn ablation_produces_seven_rows_and_full_matches_standalone() {
    let corpus = micro_corpus();
    let cfg = fast_cfg();
    let rows = run_ablation(corpus, &cfg).unwrap();
    assert_eq!(rows.len(), 7);
    let labels: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(
        labels,
        DstVariant::ALL.map(|v| v.label()).to_vec(),
    );
    let standalone = train(corpus, &cfg).unwrap().report;
    assert_eq!(rows[0], standalone);

    let csv = ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().nth(1).unwrap().starts_with("full,"));

    // A corpus without estimates cannot run the spectral-sem row.
    let bare = build_corpus(&[&[false, true]], false);
    assert!(run_ablation(&bare, &cfg).is_err());
}

#[test]
fn architecture_sweep_retrains_on_the_given_corpus() {
    let corpus = micro_corpus();
    let cfg = fast_cfg();
    let points = run_sweep(&corpus.radar, Some(corpus), SweepAxis::NHead, &[2.0, 4.0], 1, 0, &cfg)
        .unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0].value, 2.0);
    let csv = sweep_csv(SweepAxis::NHead, &points);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("n_head,2,"));

    assert!(run_sweep(&corpus.radar, Some(corpus), SweepAxis::NHead, &[2.5], 1, 0, &cfg).is_err());
    assert!(run_sweep(&corpus.radar, None, SweepAxis::NCnn, &[1.0], 1, 0, &cfg).is_err());
    assert!(run_sweep(&corpus.radar, Some(corpus), SweepAxis::Distance, &[], 1, 0, &cfg).is_err());
    assert_eq!("distance".parse::<SweepAxis>().unwrap(), SweepAxis::Distance);
    assert!("frobnicate".parse::<SweepAxis>().is_err());
}

#[test]
fn config_validation_names_the_problem() {
    let corpus = micro_corpus();
    let bad = TrainConfig { lr: 0.0, ..fast_cfg() };
    assert!(matches!(train(corpus, &bad), Err(TrainError::Config(_))));
    let bad = TrainConfig { epochs: 0, ..fast_cfg() };
    assert!(matches!(train(corpus, &bad), Err(TrainError::Config(_))));
    let bad = TrainConfig { threshold: 1.0, ..fast_cfg() };
    assert!(matches!(train(corpus, &bad), Err(TrainError::Config(_))));
}
