//! Training harness: corpus assembly, dataset splitting, the optimization
//! loop with truncated unrolling, repeated-seed aggregation, and the ablation
//! and sweep runners.
//!
//! One batch is a group of chronologically adjacent 20-window blocks from a
//! single session; the recurrent state is carried by value across a session's
//! blocks and reset at session starts. Gradients from the blocks of one batch
//! are accumulated, scaled to the mean-over-sequences loss, and applied with
//! one optimizer step; normalization statistics refresh from the batch's
//! tapped pre-normalization activations.

pub mod metrics;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mfm::{update_running_stats, BnAccum};
use crate::model::{DstModel, DstVariant, ModelConfig, WindowFeatures};
use crate::radar::{synth_session, sweep_dataset, RadarConfig, Session, SimError, SweepFactor};
use crate::stm::BPTT_LEN;
use crate::tensor::{adam_step, AdamConfig, Graph, ParamStore, Tensor, TensorError};

pub use metrics::{
    auc, auc_pairwise, bce_loss, compute_metrics, Confusion, EvalReport, MetricsEntry,
    RepeatReport,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

// ── Corpus ──

/// One subject's sessions, windows preprocessed and in chronological order.
#[derive(Debug)]
pub struct UserData {
    pub user_id: u32,
    pub sessions: Vec<Vec<WindowFeatures<f32>>>,
}

#[derive(Debug)]
pub struct Corpus {
    pub radar: RadarConfig,
    pub users: Vec<UserData>,
}

impl Corpus {
    pub fn n_windows(&self) -> usize {
        self.users
            .iter()
            .flat_map(|u| u.sessions.iter())
            .map(Vec::len)
            .sum()
    }

    pub fn has_estimates(&self) -> bool {
        self.users
            .iter()
            .flat_map(|u| u.sessions.iter().flatten())
            .all(|w| w.est.is_some())
    }
}

/// Simulate `n_subjects` full sessions (one per subject) and preprocess them.
pub fn simulate_corpus(
    radar: &RadarConfig,
    n_subjects: usize,
    seed: u64,
    with_estimates: bool,
) -> Result<Corpus, TrainError> {
    let mut users = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let session = synth_session(radar, s as u32, seed.wrapping_add(s as u64))?;
        users.push(UserData {
            user_id: s as u32,
            sessions: vec![prepare(radar, s as u32, &session, with_estimates)?],
        });
    }
    Ok(Corpus { radar: radar.clone(), users })
}

/// Preprocess already simulated sessions; each session is its own user.
pub fn corpus_from_sessions(
    radar: &RadarConfig,
    sessions: &[Session],
    with_estimates: bool,
) -> Result<Corpus, TrainError> {
    let users = sessions
        .iter()
        .map(|s| {
            Ok(UserData {
                user_id: s.session_id,
                sessions: vec![prepare(radar, s.session_id, s, with_estimates)?],
            })
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(Corpus { radar: radar.clone(), users })
}

fn prepare(
    radar: &RadarConfig,
    user_id: u32,
    session: &Session,
    with_estimates: bool,
) -> Result<Vec<WindowFeatures<f32>>, SimError> {
    crate::model::prepare_session(radar, user_id, session, with_estimates)
}

// ── Splits ──

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Block-granular random holdout.
    Random { test_fraction: f64 },
    /// Whole users held out.
    PerUser { train_users: Vec<u32>, test_users: Vec<u32> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Random { test_fraction: 0.2 }
    }
}

/// One 20-window block of one session, by corpus indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockRef {
    pub user: usize,
    pub session: usize,
    pub block: usize,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<BlockRef>,
    pub test: Vec<BlockRef>,
}

fn enumerate_blocks(corpus: &Corpus) -> Vec<BlockRef> {
    let mut out = Vec::new();
    for (u, user) in corpus.users.iter().enumerate() {
        for (s, sess) in user.sessions.iter().enumerate() {
            for b in 0..sess.len().div_ceil(BPTT_LEN) {
                out.push(BlockRef { user: u, session: s, block: b });
            }
        }
    }
    out
}

fn block_windows<'a>(corpus: &'a Corpus, b: BlockRef) -> &'a [WindowFeatures<f32>] {
    let sess = &corpus.users[b.user].sessions[b.session];
    let lo = b.block * BPTT_LEN;
    let hi = ((b.block + 1) * BPTT_LEN).min(sess.len());
    &sess[lo..hi]
}

pub fn make_split(corpus: &Corpus, spec: &SplitSpec, seed: u64) -> Result<Split, TrainError> {
    let all = enumerate_blocks(corpus);
    match spec {
        SplitSpec::Random { test_fraction } => {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(TrainError::Config(format!(
                    "test_fraction {test_fraction} outside (0, 1)"
                )));
            }
            if all.len() < 2 {
                return Err(TrainError::Config("need at least two blocks to split".into()));
            }
            let mut shuffled = all.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let n_test = ((all.len() as f64 * test_fraction).round() as usize)
                .clamp(1, all.len() - 1);
            let mut test: Vec<BlockRef> = shuffled[..n_test].to_vec();
            let mut train: Vec<BlockRef> = shuffled[n_test..].to_vec();
            test.sort();
            train.sort();
            Ok(Split { train, test })
        }
        SplitSpec::PerUser { train_users, test_users } => {
            if train_users.is_empty() || test_users.is_empty() {
                return Err(TrainError::Config("both user lists must be non-empty".into()));
            }
            if train_users.iter().any(|u| test_users.contains(u)) {
                return Err(TrainError::Config("user lists overlap".into()));
            }
            let known = |id: &u32| corpus.users.iter().any(|u| u.user_id == *id);
            if let Some(bad) = train_users.iter().chain(test_users).find(|u| !known(u)) {
                return Err(TrainError::Config(format!("unknown user {bad}")));
            }
            let bucket = |ids: &[u32]| -> Vec<BlockRef> {
                all.iter()
                    .copied()
                    .filter(|b| ids.contains(&corpus.users[b.user].user_id))
                    .collect()
            };
            Ok(Split { train: bucket(train_users), test: bucket(test_users) })
        }
    }
}

fn ensure_both_classes(corpus: &Corpus, blocks: &[BlockRef]) -> Result<(), TrainError> {
    let mut seen = [false, false];
    for &b in blocks {
        for w in block_windows(corpus, b) {
            seen[usize::from(w.label != 0)] = true;
        }
    }
    if seen[0] && seen[1] {
        Ok(())
    } else {
        Err(TrainError::Config(
            "degenerate split: training blocks hold a single class".into(),
        ))
    }
}

// ── Configuration ──

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub repeats: usize,
    pub split: SplitSpec,
    pub threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 40,
            epochs: 50,
            seed: 7,
            repeats: 5,
            split: SplitSpec::default(),
            threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs, repeats, and batch_size must be at least 1".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TrainError::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Blocks per optimizer step.
    fn blocks_per_batch(&self) -> usize {
        (self.batch_size / BPTT_LEN).max(1)
    }
}

// ── Training ──

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub model: DstModel,
    pub report: EvalReport,
}

/// Train `cfg.repeats` times with derived seeds, aggregate the held-out
/// metrics, and keep the parameters of the best-accuracy repeat (first on
/// ties).
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut best: Option<(f64, ParamStore<f32>, DstModel)> = None;
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let (store, model, report) = train_repeat(corpus, cfg, seed)?;
        if best.as_ref().is_none_or(|(acc, ..)| report.acc > *acc) {
            best = Some((report.acc, store, model));
        }
        repeats.push(report);
    }
    let (_, store, model) = best.expect("at least one repeat");
    let report = EvalReport::aggregate(cfg.model.variant.label(), repeats)?;
    Ok(TrainOutcome { store, model, report })
}

fn train_repeat(
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamStore<f32>, DstModel, RepeatReport), TrainError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let split_seed: u64 = master.gen();
    let split = make_split(corpus, &cfg.split, split_seed)?;
    ensure_both_classes(corpus, &split.train)?;
    if cfg.model.variant == DstVariant::SpectralSem && !corpus.has_estimates() {
        return Err(TrainError::Config(
            "spectral-sem needs a corpus prepared with band-peak estimates".into(),
        ));
    }

    let mut store: ParamStore<f32> = ParamStore::new();
    let model = DstModel::new(&mut store, &mut master, cfg.model, &corpus.radar)?;
    let sites = model.bn_sites();
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        // Per-session groups in chronological block order; group order is
        // reshuffled every epoch.
        let mut groups: Vec<Vec<BlockRef>> = Vec::new();
        for &b in &split.train {
            match groups.last_mut() {
                Some(g) if g[0].user == b.user && g[0].session == b.session => g.push(b),
                _ => groups.push(vec![b]),
            }
        }
        let shuffle_seed: u64 = master.gen();
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut loss_sum = 0.0;
        let mut n_windows = 0usize;
        for group in &groups {
            let mut carry: Option<(Vec<f32>, Vec<f32>)> = None;
            for batch in group.chunks(cfg.blocks_per_batch()) {
                let mut accums: Vec<BnAccum> =
                    sites.iter().map(|s| BnAccum::new(s.width)).collect();
                for &block in batch {
                    let dropout_seed: u64 = master.gen();
                    let windows = block_windows(corpus, block);
                    let (loss, next) = train_block(
                        &model,
                        &mut store,
                        windows,
                        carry.take(),
                        dropout_seed,
                        1.0 / batch.len() as f64,
                        &mut accums,
                    )?;
                    carry = Some(next);
                    loss_sum += loss;
                    n_windows += windows.len();
                }
                adam_step(&mut store, &adam)?;
                for (site, acc) in sites.iter().zip(&accums) {
                    if acc.count > 0 {
                        update_running_stats(&mut store, site, acc)?;
                    }
                }
            }
        }
        epoch_losses.push(loss_sum / n_windows as f64);
    }

    let (probs, labels) = predict_blocks(&model, &store, corpus, &split.test)?;
    let m = compute_metrics(&probs, &labels, cfg.threshold)?;
    let report = RepeatReport {
        seed,
        acc: m.acc,
        f1: m.f1,
        auc: m.auc,
        confusion: m.confusion,
        epoch_losses,
    };
    Ok((store, model, report))
}

/// One unrolled block: forward, tap harvest, backward, gradient deposit.
/// Returns the summed cross-entropy and the detached recurrent state.
fn train_block(
    model: &DstModel,
    store: &mut ParamStore<f32>,
    windows: &[WindowFeatures<f32>],
    carry: Option<(Vec<f32>, Vec<f32>)>,
    dropout_seed: u64,
    loss_scale: f64,
    accums: &mut [BnAccum],
) -> Result<(f64, (Vec<f32>, Vec<f32>)), TrainError> {
    let mut g: Graph<f32> = Graph::training(dropout_seed);
    let mut state = model.stm.init_state(&mut g);
    if let Some((h, c)) = carry {
        state.h = g.constant(Tensor::new(vec![h.len()], h)?);
        state.c = g.constant(Tensor::new(vec![c.len()], c)?);
    }
    let mut taps = Vec::new();
    let mut ys = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(windows.len());
    for feat in windows {
        let p = model.step(&mut g, store, feat, &mut state, Some(&mut taps))?;
        ys.push(g.slice1(p, 1, 1)?);
        labels.push(feat.label as f32);
    }
    let y = g.concat_last(&ys)?;
    let loss = g.bce_sum(y, labels)?;
    let scaled = g.scale(loss, loss_scale)?;

    // Values are harvested before backward retires the interior nodes.
    let loss_val = f64::from(g.data(loss)[0]);
    if !loss_val.is_finite() {
        return Err(TensorError::NonFinite("training loss".into()).into());
    }
    for &(site, node) in &taps {
        accums[site].add(g.data(node));
    }
    let next = (g.data(state.h).to_vec(), g.data(state.c).to_vec());

    g.backward(scaled)?;
    store.accumulate_grads(g.take_param_grads());
    Ok((loss_val, next))
}

// ── Evaluation ──

/// Merge a block set into maximal chronological runs and trace each run from
/// the zero state. Returns (probabilities, labels) in run order.
fn predict_blocks(
    model: &DstModel,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    blocks: &[BlockRef],
) -> Result<(Vec<f64>, Vec<u8>), TrainError> {
    let mut sorted = blocks.to_vec();
    sorted.sort();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len()
            && sorted[j].user == sorted[i].user
            && sorted[j].session == sorted[i].session
            && sorted[j].block == sorted[j - 1].block + 1
        {
            j += 1;
        }
        let feats: Vec<&WindowFeatures<f32>> = sorted[i..j]
            .iter()
            .flat_map(|&b| block_windows(corpus, b).iter())
            .collect();
        let trace = model.trace_windows(store, &feats, 0.5)?;
        probs.extend(trace.probs);
        labels.extend(feats.iter().map(|f| f.label));
        i = j;
    }
    Ok((probs, labels))
}

/// Public evaluation entry: metrics of a trained model over a block set.
pub fn evaluate_blocks(
    model: &DstModel,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    blocks: &[BlockRef],
    threshold: f64,
) -> Result<MetricsEntry, TrainError> {
    let (probs, labels) = predict_blocks(model, store, corpus, blocks)?;
    compute_metrics(&probs, &labels, threshold)
}

/// Every block of the corpus, for whole-dataset evaluation.
pub fn all_blocks(corpus: &Corpus) -> Vec<BlockRef> {
    enumerate_blocks(corpus)
}

// ── Ablation ──

/// Train every variant with shared seeds; row order follows
/// `DstVariant::ALL`.
pub fn run_ablation(corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<EvalReport>, TrainError> {
    if !corpus.has_estimates() {
        return Err(TrainError::Config(
            "ablation includes spectral-sem: prepare the corpus with estimates".into(),
        ));
    }
    DstVariant::ALL
        .iter()
        .map(|&variant| {
            let mut c = cfg.clone();
            c.model.variant = variant;
            train(corpus, &c).map(|o| o.report)
        })
        .collect()
}

pub fn ablation_csv(rows: &[EvalReport]) -> String {
    let mut out = String::from("variant,acc,acc_sd,f1,f1_sd,auc,auc_sd,tp,fp,tn,fn\n");
    let fmt = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.acc,
            r.acc_sd,
            r.f1,
            r.f1_sd,
            fmt(r.auc),
            fmt(r.auc_sd),
            r.confusion.tp,
            r.confusion.fp,
            r.confusion.tn,
            r.confusion.fn_,
        ));
    }
    out
}

// ── Sweeps ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Distance,
    Angle,
    NCnn,
    NHead,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Distance => "distance",
            SweepAxis::Angle => "angle",
            SweepAxis::NCnn => "n_cnn",
            SweepAxis::NHead => "n_head",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distance" => Ok(SweepAxis::Distance),
            "angle" => Ok(SweepAxis::Angle),
            "n_cnn" => Ok(SweepAxis::NCnn),
            "n_head" => Ok(SweepAxis::NHead),
            other => Err(format!(
                "unknown sweep axis '{other}' (expected distance|angle|n_cnn|n_head)"
            )),
        }
    }
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
}

/// Sweep one factor. Distance/angle sweeps regenerate matched corpora (same
/// subjects and seeds, only the factor forced); architecture sweeps retrain
/// on the supplied corpus.
pub fn run_sweep(
    radar: &RadarConfig,
    corpus: Option<&Corpus>,
    axis: SweepAxis,
    values: &[f64],
    sessions_per_value: usize,
    sim_seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<SweepPoint>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let with_est = cfg.model.variant == DstVariant::SpectralSem;
    match axis {
        SweepAxis::Distance | SweepAxis::Angle => {
            let factor = if axis == SweepAxis::Distance {
                SweepFactor::Distance
            } else {
                SweepFactor::Angle
            };
            let groups = sweep_dataset(radar, factor, values, sessions_per_value, sim_seed)?;
            groups
                .iter()
                .map(|g| {
                    let corpus = corpus_from_sessions(radar, &g.sessions, with_est)?;
                    let report = train(&corpus, cfg)?.report;
                    Ok(SweepPoint { value: g.value, report })
                })
                .collect()
        }
        SweepAxis::NCnn | SweepAxis::NHead => {
            let corpus = corpus.ok_or_else(|| {
                TrainError::Config("architecture sweeps need a prepared corpus".into())
            })?;
            values
                .iter()
                .map(|&v| {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(TrainError::Config(format!(
                            "{} value {v} must be a positive integer",
                            axis.label()
                        )));
                    }
                    let mut c = cfg.clone();
                    match axis {
                        SweepAxis::NCnn => c.model.n_cnn = v as usize,
                        SweepAxis::NHead => c.model.n_head = v as usize,
                        _ => unreachable!(),
                    }
                    let report = train(corpus, &c)?.report;
                    Ok(SweepPoint { value: v, report })
                })
                .collect()
        }
    }
}

pub fn sweep_csv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut out = String::from("factor,value,acc,acc_sd,f1,f1_sd,auc,auc_sd\n");
    let fmt = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            axis.label(),
            p.value,
            p.report.acc,
            p.report.acc_sd,
            p.report.f1,
            p.report.f1_sd,
            fmt(p.report.auc),
            fmt(p.report.auc_sd),
        ));
    }
    out
}

#[cfg(test)]
mod tests;
