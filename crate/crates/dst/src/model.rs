//! End-to-end network: extraction, fusion, tracing, plus the variant
//! switchboard the ablation study selects from.
//!
//! A window flows through one extraction branch (learned attention network or
//! the band-peak estimator head), the fusion network, and one tracing step.
//! Training unrolls `step` over short chronological chunks in one graph;
//! evaluation runs a graph per window and carries the recurrent state values
//! across graph boundaries, which is exact because eval graphs hold no
//! stochastic nodes.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::mfm::{BnSite, MfmNet, MfmVariant, F_DIM};
use crate::radar::{estimate_vitals, CirWindow, RadarConfig, Session, SimError};
use crate::sem::{normalize_estimates, SemHyper, SemInput, SemNet, SemOut, SpectralSem};
use crate::stm::{StmNet, StmState, StmVariant, StressTrace};
use crate::tensor::{Graph, NodeId, ParamStore, Real, Tensor, TensorError};

// ── Variants ──

/// The full network and the six ablated forms of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DstVariant {
    Full,
    /// Learned extraction replaced by the band-peak estimator head.
    SpectralSem,
    /// Heart stream removed from the fusion.
    NoHr,
    /// Respiration stream removed from the fusion.
    NoRr,
    /// Cross and residual connections removed.
    NoXconnRconn,
    /// RF stream and all its connections removed.
    NoRfXconnRconn,
    /// Recurrent tracing head replaced by a per-step linear classifier.
    NoLstm,
}

impl DstVariant {
    pub const ALL: [DstVariant; 7] = [
        DstVariant::Full,
        DstVariant::SpectralSem,
        DstVariant::NoHr,
        DstVariant::NoRr,
        DstVariant::NoXconnRconn,
        DstVariant::NoRfXconnRconn,
        DstVariant::NoLstm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DstVariant::Full => "full",
            DstVariant::SpectralSem => "spectral-sem",
            DstVariant::NoHr => "no-hr",
            DstVariant::NoRr => "no-rr",
            DstVariant::NoXconnRconn => "no-xconn-rconn",
            DstVariant::NoRfXconnRconn => "no-rf-xconn-rconn",
            DstVariant::NoLstm => "no-lstm",
        }
    }

    fn mfm_variant(self) -> MfmVariant {
        match self {
            DstVariant::NoHr => MfmVariant::NoHr,
            DstVariant::NoRr => MfmVariant::NoRr,
            DstVariant::NoXconnRconn => MfmVariant::NoXconnRconn,
            DstVariant::NoRfXconnRconn => MfmVariant::NoRfXconnRconn,
            _ => MfmVariant::Full,
        }
    }

    fn stm_variant(self) -> StmVariant {
        match self {
            DstVariant::NoLstm => StmVariant::Linear,
            _ => StmVariant::Lstm,
        }
    }

    fn uses_learned_sem(self) -> bool {
        self != DstVariant::SpectralSem
    }
}

impl FromStr for DstVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DstVariant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = DstVariant::ALL.iter().map(|v| v.label()).collect();
                format!("unknown variant '{s}' (expected one of {})", names.join("|"))
            })
    }
}

/// Architecture knobs; the sweep harness varies `n_cnn`/`n_head`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: DstVariant,
    pub n_cnn: usize,
    pub n_head: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = SemHyper::default();
        ModelConfig { variant: DstVariant::Full, n_cnn: h.n_cnn, n_head: h.n_head }
    }
}

// ── Cached per-window features ──

/// Everything the network needs for one window, precomputed once per corpus.
#[derive(Debug, Clone)]
pub struct WindowFeatures<T> {
    pub sem: SemInput<T>,
    /// Band-peak (hr_bpm, rr_bpm), present when prepared with estimates.
    pub est: Option<(f64, f64)>,
    pub label: u8,
    pub user_id: u32,
    pub session_id: u32,
    pub t0: f64,
}

impl<T: Real> WindowFeatures<T> {
    pub fn from_window(
        cfg: &RadarConfig,
        user_id: u32,
        w: &CirWindow,
        with_estimates: bool,
    ) -> Result<Self, SimError> {
        let est = if with_estimates {
            let v = estimate_vitals(cfg, w)?;
            Some((v.hr_bpm, v.rr_bpm))
        } else {
            None
        };
        Ok(WindowFeatures {
            sem: SemInput::from_window(cfg, w)?,
            est,
            label: w.label,
            user_id,
            session_id: w.session_id,
            t0: w.t0,
        })
    }
}

/// Preprocess a whole session, keeping chronological order.
pub fn prepare_session<T: Real>(
    cfg: &RadarConfig,
    user_id: u32,
    session: &Session,
    with_estimates: bool,
) -> Result<Vec<WindowFeatures<T>>, SimError> {
    session
        .windows
        .iter()
        .map(|w| WindowFeatures::from_window(cfg, user_id, w, with_estimates))
        .collect()
}

// ── Model ──

#[derive(Debug, Clone)]
enum SemBranch {
    Learned(SemNet),
    Spectral(SpectralSem),
}

#[derive(Debug, Clone)]
pub struct DstModel {
    pub config: ModelConfig,
    sem: SemBranch,
    pub mfm: MfmNet,
    pub stm: StmNet,
}

impl DstModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        config: ModelConfig,
        radar: &RadarConfig,
    ) -> Result<Self, TensorError> {
        let hyper = SemHyper {
            n_cnn: config.n_cnn,
            n_head: config.n_head,
            ..SemHyper::default()
        };
        let sem = if config.variant.uses_learned_sem() {
            SemBranch::Learned(SemNet::new(store, rng, radar, hyper)?)
        } else {
            SemBranch::Spectral(SpectralSem::new(store, rng, hyper.out_dim)?)
        };
        let mfm = MfmNet::new(store, rng, config.variant.mfm_variant())?;
        let stm = StmNet::new(store, rng, config.variant.stm_variant(), F_DIM)?;
        // When the fusion drops a stream, the matching extraction head feeds
        // nothing; freeze it so the optimizer does not expect gradients.
        let dropped_head = match config.variant {
            DstVariant::NoHr => Some("sem.hr"),
            DstVariant::NoRr => Some("sem.rr"),
            _ => None,
        };
        if let Some(head) = dropped_head {
            for part in ["w", "b"] {
                let id = store.id(&format!("{head}.{part}"))?;
                store.set_trainable(id, false);
            }
        }
        Ok(DstModel { config, sem, mfm, stm })
    }

    /// Normalization sites whose running statistics the trainer refreshes.
    pub fn bn_sites(&self) -> Vec<BnSite> {
        self.mfm.bn_sites()
    }

    fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feat: &WindowFeatures<T>,
    ) -> Result<SemOut, TensorError> {
        match &self.sem {
            SemBranch::Learned(net) => net.forward(g, store, &feat.sem),
            SemBranch::Spectral(net) => {
                let (hr, rr) = feat.est.ok_or_else(|| TensorError::Geometry {
                    op: "model",
                    msg: "window was prepared without band-peak estimates".to_string(),
                })?;
                net.forward(g, store, normalize_estimates(hr, rr), &feat.sem)
            }
        }
    }

    /// One window through extraction, fusion, and tracing. Returns the
    /// two-class probabilities; pre-normalization taps are appended for the
    /// trainer's statistics refresh when a sink is supplied.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feat: &WindowFeatures<T>,
        state: &mut StmState,
        taps: Option<&mut Vec<(usize, NodeId)>>,
    ) -> Result<NodeId, TensorError> {
        let sem_out = self.extract(g, store, feat)?;
        let fused = self
            .mfm
            .forward(g, store, sem_out.v_hr, sem_out.v_rr, sem_out.x_rf)?;
        if let Some(sink) = taps {
            sink.extend(fused.bn_taps);
        }
        self.stm.step(g, store, fused.f, state)
    }

    /// Evaluate one window in its own graph, reading and updating a recurrent
    /// state carried by value (`None` = rest state). Returns the stress
    /// probability, so callers can stream long sessions window by window.
    pub fn trace_one<T: Real>(
        &self,
        store: &ParamStore<T>,
        feat: &WindowFeatures<T>,
        carried: &mut Option<(Vec<T>, Vec<T>)>,
    ) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let mut state = self.stm.init_state(&mut g);
        if let Some((h, c)) = carried {
            state.h = g.constant(Tensor::new(vec![h.len()], h.clone())?);
            state.c = g.constant(Tensor::new(vec![c.len()], c.clone())?);
        }
        let p = self.step(&mut g, store, feat, &mut state, None)?;
        g.check_finite(p, "model.trace")?;
        *carried = Some((g.data(state.h).to_vec(), g.data(state.c).to_vec()));
        Ok(g.data(p)[1].to_f64())
    }

    /// Unrolls a window sequence in one graph with a summed cross-entropy
    /// loss, the shape training uses. Exposed for gradient checking.
    pub fn unrolled_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: &[WindowFeatures<T>],
    ) -> Result<NodeId, TensorError> {
        let mut state = self.stm.init_state(g);
        let mut ys = Vec::with_capacity(feats.len());
        let mut labels = Vec::with_capacity(feats.len());
        for feat in feats {
            let p = self.step(g, store, feat, &mut state, None)?;
            ys.push(g.slice1(p, 1, 1)?);
            labels.push(T::from_f64(f64::from(feat.label)));
        }
        let y = g.concat_last(&ys)?;
        g.bce_sum(y, labels)
    }

    /// Evaluate a chronological run of windows; one graph per window with the
    /// recurrent state carried by value.
    pub fn trace_windows<T: Real>(
        &self,
        store: &ParamStore<T>,
        feats: &[&WindowFeatures<T>],
        threshold: f64,
    ) -> Result<StressTrace, TensorError> {
        if feats.is_empty() {
            return Err(TensorError::Geometry {
                op: "model.trace",
                msg: "empty window run".to_string(),
            });
        }
        let mut carried: Option<(Vec<T>, Vec<T>)> = None;
        let mut probs = Vec::with_capacity(feats.len());
        for feat in feats {
            probs.push(self.trace_one(store, feat, &mut carried)?);
        }
        Ok(StressTrace::new(probs, threshold))
    }
}

/// Whole-pipeline gradient check: `n_windows` synthetic windows unrolled
/// through extraction, fusion, and the recurrent head in one 64-bit graph
/// under the training loss, finite differences against the backward pass.
///
/// The coarse default probe step can straddle a rectifier kink somewhere in a
/// network this deep, so the step is pinned at 1e-6 (well below typical
/// pre-activation magnitudes, far above f64 roundoff).
pub fn composition_grad_check(
    n_windows: usize,
    max_coords_per_leaf: Option<usize>,
) -> Result<crate::tensor::GradCheckReport, TensorError> {
    use crate::radar::{sample_physique, synth_window};
    use rand::SeedableRng;

    let radar = RadarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD57);
    let mut subj = sample_physique(&radar, &mut rng);
    let sim = |e: SimError| TensorError::Geometry { op: "composition", msg: e.to_string() };
    let mut feats: Vec<WindowFeatures<f64>> = Vec::with_capacity(n_windows);
    for i in 0..n_windows {
        subj.stressed = i % 2 == 1;
        let w = synth_window(&radar, &subj, 7100 + i as u64).map_err(sim)?;
        feats.push(WindowFeatures::from_window(&radar, 0, &w, false).map_err(sim)?);
    }

    let mut store: ParamStore<f64> = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(0xD58);
    let model = DstModel::new(&mut store, &mut init, ModelConfig::default(), &radar)?;
    let build = move |g: &mut Graph<f64>| model.unrolled_loss(g, &store, &feats);
    let cfg = crate::tensor::GradCheckConfig {
        step: 1e-6,
        max_coords_per_leaf,
        ..crate::tensor::GradCheckConfig::default()
    };
    crate::tensor::grad_check(&build, &cfg)
}
