//! Multimodal fusion: the heart stream, respiration stream, and RF embedding
//! are processed in five stages. Stage 1 projects each input; stages 2 and 4
//! exchange information between the 1D streams and the RF tensor in both
//! directions (plus re-injection of the original inputs through linear
//! residual projections); stages 3 and 5 process each stream further and
//! fuse everything into one 192-wide vector.
//!
//! Normalization uses running per-channel statistics held in the parameter
//! store as non-trainable entries; graphs treat them as constants, and the
//! trainer refreshes them between batches from activations tapped during the
//! forward pass.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Real, Tensor, TensorError};

// ── Stage geometry (fixed fusion table) ──

/// Width of each 1D input vector.
pub const IN_1D: usize = 64;
/// RF embedding extents: frames x range bins x (re, im).
pub const RF_IN: [usize; 3] = [150, 96, 2];
/// Stage-1 1D width and RF channel count.
pub const S1_1D: usize = 32;
pub const S1_RF_C: usize = 8;
/// After the first 2x2 max-pool.
pub const P1: [usize; 2] = [75, 48];
/// Stage-2 exchange: message width, deconv source extents, deconv stride.
pub const S2_MSG: usize = 32;
pub const S2_SRC: [usize; 2] = [16, 12];
pub const S2_STRIDE: (usize, usize) = (5, 4);
/// RF channels after the stage-2 concatenation.
pub const S2_RF_C: usize = 16;
/// Stage-2 1D width: own + message + peer.
pub const S2_1D: usize = 96;
/// Stage-3 widths and the second pool output.
pub const S3_1D: usize = 64;
pub const S3_RF_C: usize = 24;
pub const P2: [usize; 2] = [37, 24];
/// Stage-4 exchange: message width, deconv source extents, deconv stride.
pub const S4_MSG: usize = 64;
pub const S4_SRC: [usize; 2] = [8, 5];
pub const S4_STRIDE: (usize, usize) = (5, 5);
/// RF channels after the stage-4 concatenation and the 1D width.
pub const S4_RF_C: usize = 72;
pub const S4_1D: usize = 192;
/// Per-stream width after stage 5 and the fused dimension.
pub const S5_OUT: usize = 64;
pub const F_DIM: usize = 192;
/// Widened stage-5 output when the RF stream is absent (2 x 96 = 192).
pub const S5_OUT_WIDE: usize = 96;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DROPOUT_POOL: f64 = 0.25;
pub const DROPOUT_FIRST_FC: f64 = 0.5;

// ── Variants ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfmVariant {
    /// All three streams with cross and residual connections.
    Full,
    /// Heart stream removed; its slots are zero-filled.
    NoHr,
    /// Respiration stream removed; its slots are zero-filled.
    NoRr,
    /// Cross and residual connections removed; the RF stream and the 1D
    /// streams never exchange information before the final fusion.
    NoXconnRconn,
    /// Additionally removes the RF stream; the two 1D streams widen their
    /// final layer so the fused vector keeps its dimension.
    NoRfXconnRconn,
}

impl MfmVariant {
    pub fn has_hr(self) -> bool {
        self != MfmVariant::NoHr
    }
    pub fn has_rr(self) -> bool {
        self != MfmVariant::NoRr
    }
    pub fn has_rf(self) -> bool {
        self != MfmVariant::NoRfXconnRconn
    }
    pub fn has_exchange(self) -> bool {
        !matches!(self, MfmVariant::NoXconnRconn | MfmVariant::NoRfXconnRconn)
    }

    pub fn name(self) -> &'static str {
        match self {
            MfmVariant::Full => "full",
            MfmVariant::NoHr => "no_hr",
            MfmVariant::NoRr => "no_rr",
            MfmVariant::NoXconnRconn => "no_xconn_rconn",
            MfmVariant::NoRfXconnRconn => "no_rf_xconn_rconn",
        }
    }
}

impl std::str::FromStr for MfmVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(MfmVariant::Full),
            "no_hr" => Ok(MfmVariant::NoHr),
            "no_rr" => Ok(MfmVariant::NoRr),
            "no_xconn_rconn" => Ok(MfmVariant::NoXconnRconn),
            "no_rf_xconn_rconn" => Ok(MfmVariant::NoRfXconnRconn),
            other => Err(format!(
                "unknown fusion variant `{other}` (expected full, no_hr, no_rr, \
                 no_xconn_rconn, or no_rf_xconn_rconn)"
            )),
        }
    }
}

// ── Parameter bundles ──

#[derive(Debug, Clone, Copy)]
struct Fc {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    k: ParamId,
    b: ParamId,
}

/// Linear 1D-to-RF projection: FC, reshape to a small plane, deconv up to
/// the stage's RF extents.
#[derive(Debug, Clone, Copy)]
struct Proj {
    fc: Fc,
    k: ParamId,
}

/// RF-to-1D message: 1x1 conv, flatten, FC. Linear end to end so that zero
/// weights reduce the message to the FC bias exactly.
#[derive(Debug, Clone, Copy)]
struct Msg {
    conv: ConvP,
    fc: Fc,
}

/// One normalization site: learnable gain/shift plus running statistics
/// stored as non-trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct BnSite {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub r_mean: ParamId,
    pub r_var: ParamId,
    pub width: usize,
}

impl BnSite {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
    ) -> Result<Self, TensorError> {
        Ok(BnSite {
            gamma: store.add_const(&format!("{name}.g"), vec![width], 1.0, true)?,
            beta: store.add_zeros(&format!("{name}.b"), vec![width], true)?,
            r_mean: store.add_zeros(&format!("{name}.rm"), vec![width], false)?,
            r_var: store.add_const(&format!("{name}.rv"), vec![width], 1.0, false)?,
            width,
        })
    }

    /// Normalize with the running statistics (constants in the graph), then
    /// apply the learnable gain and shift.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mean = store.value(self.r_mean).to_vec();
        let inv_std: Vec<T> = store
            .value(self.r_var)
            .iter()
            .map(|&v| T::from_f64(1.0 / (v.to_f64() + BN_EPS).sqrt()))
            .collect();
        let n = g.norm_channels(x, mean, inv_std)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_channels(n, gamma)?;
        g.add_bias(scaled, beta)
    }
}

/// Per-channel activation statistics gathered over a batch of forwards.
#[derive(Debug, Clone)]
pub struct BnAccum {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub count: usize,
}

impl BnAccum {
    pub fn new(width: usize) -> Self {
        BnAccum {
            sum: vec![0.0; width],
            sum_sq: vec![0.0; width],
            count: 0,
        }
    }

    /// Fold in one activation tensor whose last axis is the channel axis.
    pub fn add<T: Real>(&mut self, data: &[T]) {
        let c = self.sum.len();
        for chunk in data.chunks_exact(c) {
            for (i, &v) in chunk.iter().enumerate() {
                let v = v.to_f64();
                self.sum[i] += v;
                self.sum_sq[i] += v * v;
            }
        }
        self.count += data.len() / c;
    }
}

/// Blend the batch statistics into the running ones.
pub fn update_running_stats<T: Real>(
    store: &mut ParamStore<T>,
    site: &BnSite,
    acc: &BnAccum,
) -> Result<(), TensorError> {
    if acc.count == 0 {
        return Ok(());
    }
    let n = acc.count as f64;
    let mut mean = store.value(site.r_mean).to_vec();
    let mut var = store.value(site.r_var).to_vec();
    for i in 0..site.width {
        let bm = acc.sum[i] / n;
        let bv = (acc.sum_sq[i] / n - bm * bm).max(0.0);
        mean[i] = T::from_f64(mean[i].to_f64() * (1.0 - BN_MOMENTUM) + bm * BN_MOMENTUM);
        var[i] = T::from_f64(var[i].to_f64() * (1.0 - BN_MOMENTUM) + bv * BN_MOMENTUM);
    }
    store.set_value(site.r_mean, mean)?;
    store.set_value(site.r_var, var)?;
    Ok(())
}

// ── The fusion network ──

/// One exchange stage's parameters (shared message, per-stream projections).
#[derive(Debug, Clone)]
struct Exchange {
    msg: Msg,
    cross_hr: Option<Proj>,
    cross_rr: Option<Proj>,
    res_hr: Option<Proj>,
    res_rr: Option<Proj>,
    res_rf2hr: Option<Fc>,
    res_rf2rr: Option<Fc>,
}

#[derive(Debug, Clone)]
struct TriPath {
    s1_hr: Option<Fc>,
    s1_rr: Option<Fc>,
    s1_rf: ConvP,
    bn_hr: Option<BnSite>,
    bn_rr: Option<BnSite>,
    bn_rf: BnSite,
    ex_a: Option<Exchange>,
    ex_b: Option<Exchange>,
    s3_hr: Option<Fc>,
    s3_rr: Option<Fc>,
    s3_rf: ConvP,
    s5_hr: Option<Fc>,
    s5_rr: Option<Fc>,
    s5_rf: Fc,
}

#[derive(Debug, Clone)]
struct DuoPath {
    s1_hr: Fc,
    s1_rr: Fc,
    bn_hr: BnSite,
    bn_rr: BnSite,
    s3_hr: Fc,
    s3_rr: Fc,
    s5_hr: Fc,
    s5_rr: Fc,
}

#[derive(Debug, Clone)]
enum Arch {
    Tri(TriPath),
    Duo(DuoPath),
}

#[derive(Debug, Clone)]
pub struct MfmNet {
    pub variant: MfmVariant,
    arch: Arch,
    bn_f: BnSite,
    final_fc: Fc,
}

/// Fusion output plus the pre-normalization activations each normalization
/// site saw, so the trainer can refresh running statistics.
#[derive(Debug, Clone)]
pub struct MfmOut {
    pub f: NodeId,
    pub bn_taps: Vec<(usize, NodeId)>,
}

/// Named stage outputs recorded during a traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct StageTrace {
    pub entries: Vec<(&'static str, NodeId)>,
}

impl StageTrace {
    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.entries.iter().find(|(n, _)| *n == name).map(|&(_, id)| id)
    }
}

fn fc<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<Fc, TensorError> {
    Ok(Fc {
        w: store.add_uniform(&format!("{name}.w"), vec![din, dout], din, rng)?,
        b: store.add_zeros(&format!("{name}.b"), vec![dout], true)?,
    })
}

fn conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Result<ConvP, TensorError> {
    Ok(ConvP {
        k: store.add_uniform(&format!("{name}.k"), vec![kh, kw, cin, cout], kh * kw * cin, rng)?,
        b: store.add_zeros(&format!("{name}.b"), vec![cout], true)?,
    })
}

/// FC din -> src_h*src_w, deconv kernel [src_h, src_w, 1, cout].
fn proj<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    src: [usize; 2],
    cout: usize,
) -> Result<Proj, TensorError> {
    Ok(Proj {
        fc: fc(store, rng, name, din, src[0] * src[1])?,
        k: store.add_uniform(
            &format!("{name}.k"),
            vec![src[0], src[1], 1, cout],
            src[0] * src[1],
            rng,
        )?,
    })
}

fn msg<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
    cells: usize,
    dout: usize,
) -> Result<Msg, TensorError> {
    Ok(Msg {
        conv: conv(store, rng, &format!("{name}.conv"), 1, 1, c, c)?,
        fc: fc(store, rng, &format!("{name}.fc"), cells * c, dout)?,
    })
}

fn exchange<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    tag: &str,
    variant: MfmVariant,
    rf_c: usize,
    rf_cells: usize,
    stream_w: usize,
    msg_w: usize,
    src: [usize; 2],
    map_c: usize,
    res_in: usize,
) -> Result<Exchange, TensorError> {
    let mk_proj = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, din| {
        proj(store, rng, &name, din, src, map_c)
    };
    Ok(Exchange {
        msg: msg(store, rng, &format!("{tag}.msg"), rf_c, rf_cells, msg_w)?,
        cross_hr: variant
            .has_hr()
            .then(|| mk_proj(store, rng, format!("{tag}.cross.hr"), stream_w))
            .transpose()?,
        cross_rr: variant
            .has_rr()
            .then(|| mk_proj(store, rng, format!("{tag}.cross.rr"), stream_w))
            .transpose()?,
        res_hr: variant
            .has_hr()
            .then(|| mk_proj(store, rng, format!("{tag}.res.hr"), IN_1D))
            .transpose()?,
        res_rr: variant
            .has_rr()
            .then(|| mk_proj(store, rng, format!("{tag}.res.rr"), IN_1D))
            .transpose()?,
        res_rf2hr: variant
            .has_hr()
            .then(|| fc(store, rng, &format!("{tag}.res.rf2hr"), res_in, stream_w))
            .transpose()?,
        res_rf2rr: variant
            .has_rr()
            .then(|| fc(store, rng, &format!("{tag}.res.rf2rr"), res_in, stream_w))
            .transpose()?,
    })
}

impl MfmNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        variant: MfmVariant,
    ) -> Result<Self, TensorError> {
        let bn_f = BnSite::new(store, "mfm.bn.f", F_DIM)?;
        let final_fc = fc(store, rng, "mfm.final", F_DIM, F_DIM)?;
        let arch = if variant.has_rf() {
            let s1_hr = variant
                .has_hr()
                .then(|| fc(store, rng, "mfm.s1.hr", IN_1D, S1_1D))
                .transpose()?;
            let s1_rr = variant
                .has_rr()
                .then(|| fc(store, rng, "mfm.s1.rr", IN_1D, S1_1D))
                .transpose()?;
            let s1_rf = conv(store, rng, "mfm.s1.rf", 3, 3, RF_IN[2], S1_RF_C)?;
            let bn_hr = variant
                .has_hr()
                .then(|| BnSite::new(store, "mfm.bn.hr", S1_1D))
                .transpose()?;
            let bn_rr = variant
                .has_rr()
                .then(|| BnSite::new(store, "mfm.bn.rr", S1_1D))
                .transpose()?;
            let bn_rf = BnSite::new(store, "mfm.bn.rf", S1_RF_C)?;
            let (ex_a, ex_b) = if variant.has_exchange() {
                (
                    Some(exchange(
                        store,
                        rng,
                        "mfm.s2",
                        variant,
                        S1_RF_C,
                        P1[0] * P1[1],
                        S1_1D,
                        S2_MSG,
                        S2_SRC,
                        S1_RF_C,
                        P1[0] * P1[1] * RF_IN[2],
                    )?),
                    Some(exchange(
                        store,
                        rng,
                        "mfm.s4",
                        variant,
                        S3_RF_C,
                        P2[0] * P2[1],
                        S3_1D,
                        S4_MSG,
                        S4_SRC,
                        S3_RF_C,
                        P2[0] * P2[1] * RF_IN[2],
                    )?),
                )
            } else {
                (None, None)
            };
            Arch::Tri(TriPath {
                s1_hr,
                s1_rr,
                s1_rf,
                bn_hr,
                bn_rr,
                bn_rf,
                ex_a,
                ex_b,
                s3_hr: variant
                    .has_hr()
                    .then(|| fc(store, rng, "mfm.s3.hr", S2_1D, S3_1D))
                    .transpose()?,
                s3_rr: variant
                    .has_rr()
                    .then(|| fc(store, rng, "mfm.s3.rr", S2_1D, S3_1D))
                    .transpose()?,
                s3_rf: conv(store, rng, "mfm.s3.rf", 3, 3, S2_RF_C, S3_RF_C)?,
                s5_hr: variant
                    .has_hr()
                    .then(|| fc(store, rng, "mfm.s5.hr", S4_1D, S5_OUT))
                    .transpose()?,
                s5_rr: variant
                    .has_rr()
                    .then(|| fc(store, rng, "mfm.s5.rr", S4_1D, S5_OUT))
                    .transpose()?,
                s5_rf: fc(
                    store,
                    rng,
                    "mfm.s5.rf",
                    P2[0] * P2[1] * S4_RF_C,
                    S5_OUT,
                )?,
            })
        } else {
            Arch::Duo(DuoPath {
                s1_hr: fc(store, rng, "mfm.s1.hr", IN_1D, S1_1D)?,
                s1_rr: fc(store, rng, "mfm.s1.rr", IN_1D, S1_1D)?,
                bn_hr: BnSite::new(store, "mfm.bn.hr", S1_1D)?,
                bn_rr: BnSite::new(store, "mfm.bn.rr", S1_1D)?,
                s3_hr: fc(store, rng, "mfm.s3.hr", 2 * S1_1D, S3_1D)?,
                s3_rr: fc(store, rng, "mfm.s3.rr", 2 * S1_1D, S3_1D)?,
                s5_hr: fc(store, rng, "mfm.s5.hr", 2 * S3_1D, S5_OUT_WIDE)?,
                s5_rr: fc(store, rng, "mfm.s5.rr", 2 * S3_1D, S5_OUT_WIDE)?,
            })
        };
        Ok(MfmNet {
            variant,
            arch,
            bn_f,
            final_fc,
        })
    }

    /// Normalization sites in tap order; tap indices in [`MfmOut`] refer to
    /// this list.
    pub fn bn_sites(&self) -> Vec<BnSite> {
        let mut sites = Vec::new();
        match &self.arch {
            Arch::Tri(t) => {
                sites.extend(t.bn_hr);
                sites.extend(t.bn_rr);
                sites.push(t.bn_rf);
            }
            Arch::Duo(d) => {
                sites.push(d.bn_hr);
                sites.push(d.bn_rr);
            }
        }
        sites.push(self.bn_f);
        sites
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v_hr: NodeId,
        v_rr: NodeId,
        x_rf: NodeId,
    ) -> Result<MfmOut, TensorError> {
        self.forward_inner(g, store, v_hr, v_rr, x_rf, None)
    }

    pub fn forward_traced<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v_hr: NodeId,
        v_rr: NodeId,
        x_rf: NodeId,
        trace: &mut StageTrace,
    ) -> Result<MfmOut, TensorError> {
        self.forward_inner(g, store, v_hr, v_rr, x_rf, Some(trace))
    }

    fn forward_inner<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v_hr: NodeId,
        v_rr: NodeId,
        x_rf: NodeId,
        mut trace: Option<&mut StageTrace>,
    ) -> Result<MfmOut, TensorError> {
        if g.shape(v_hr) != [IN_1D] || g.shape(v_rr) != [IN_1D] {
            return Err(TensorError::Geometry {
                op: "mfm",
                msg: format!(
                    "1D inputs must be {IN_1D}-wide, got {:?} and {:?}",
                    g.shape(v_hr),
                    g.shape(v_rr)
                ),
            });
        }
        if g.shape(x_rf) != RF_IN {
            return Err(TensorError::Geometry {
                op: "mfm",
                msg: format!("RF input must be {RF_IN:?}, got {:?}", g.shape(x_rf)),
            });
        }
        let mut taps = Vec::new();

        // Tap indices follow bn_sites() ordering.
        let mut next_site = 0usize;
        let mut site_idx = |present: bool| {
            let idx = next_site;
            if present {
                next_site += 1;
            }
            idx
        };

        let (vh, vr, vf) = match &self.arch {
            Arch::Tri(t) => {
                // Stage 1: project each present stream.
                let hr_site = site_idx(t.bn_hr.is_some());
                let rr_site = site_idx(t.bn_rr.is_some());
                let rf_site = site_idx(true);
                let one_d = |g: &mut Graph<T>,
                             taps: &mut Vec<(usize, NodeId)>,
                             f: &Fc,
                             bn: &BnSite,
                             site: usize,
                             x: NodeId|
                 -> Result<NodeId, TensorError> {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let y = g.dense_vec(x, w, Some(b))?;
                    taps.push((site, y));
                    let y = bn.apply(g, store, y)?;
                    let y = g.relu(y)?;
                    g.dropout(y, DROPOUT_FIRST_FC)
                };
                let hr1 = match (&t.s1_hr, &t.bn_hr) {
                    (Some(f), Some(bn)) => Some(one_d(g, &mut taps, f, bn, hr_site, v_hr)?),
                    _ => None,
                };
                let rr1 = match (&t.s1_rr, &t.bn_rr) {
                    (Some(f), Some(bn)) => Some(one_d(g, &mut taps, f, bn, rr_site, v_rr)?),
                    _ => None,
                };
                let k = g.param(store, t.s1_rf.k);
                let b = g.param(store, t.s1_rf.b);
                let c1 = g.conv2d(x_rf, k, Some(b), crate::tensor::Padding::Same, (1, 1), false)?;
                taps.push((rf_site, c1));
                let c1 = t.bn_rf.apply(g, store, c1)?;
                let c1 = g.relu(c1)?;
                rec_trace(&mut trace, "s1.conv", c1);
                let p1 = g.maxpool2(c1)?;
                let rf1 = g.dropout(p1, DROPOUT_POOL)?;
                if let Some(h) = hr1 {
                    rec_trace(&mut trace, "s1.hr", h);
                }
                if let Some(r) = rr1 {
                    rec_trace(&mut trace, "s1.rr", r);
                }
                rec_trace(&mut trace, "s1.rf", rf1);

                // Stage 2 exchange: residual re-injection, then crossing.
                let (hr2, rr2, rf2) = self.exchange_stage(
                    g,
                    store,
                    t.ex_a.as_ref(),
                    hr1,
                    rr1,
                    rf1,
                    ExchangeGeo {
                        stream_w: S1_1D,
                        msg_w: S2_MSG,
                        src: S2_SRC,
                        stride: S2_STRIDE,
                        out_hw: (P1[0], P1[1]),
                        map_c: S1_RF_C,
                        sum_maps: true,
                        pools: 1,
                    },
                    v_hr,
                    v_rr,
                    x_rf,
                    &mut trace,
                    "s2",
                )?;

                // Stage 3.
                let s3_1d = |g: &mut Graph<T>, f: &Fc, x: NodeId| {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let y = g.dense_vec(x, w, Some(b))?;
                    g.relu(y)
                };
                let hr3 = match (&t.s3_hr, hr2) {
                    (Some(f), Some(x)) => Some(s3_1d(g, f, x)?),
                    _ => None,
                };
                let rr3 = match (&t.s3_rr, rr2) {
                    (Some(f), Some(x)) => Some(s3_1d(g, f, x)?),
                    _ => None,
                };
                let k = g.param(store, t.s3_rf.k);
                let b = g.param(store, t.s3_rf.b);
                let c3 = g.conv2d(rf2, k, Some(b), crate::tensor::Padding::Same, (1, 1), true)?;
                rec_trace(&mut trace, "s3.conv", c3);
                let p3 = g.maxpool2(c3)?;
                let rf3 = g.dropout(p3, DROPOUT_POOL)?;
                if let Some(h) = hr3 {
                    rec_trace(&mut trace, "s3.hr", h);
                }
                if let Some(r) = rr3 {
                    rec_trace(&mut trace, "s3.rr", r);
                }
                rec_trace(&mut trace, "s3.rf", rf3);

                // Stage 4 exchange.
                let (hr4, rr4, rf4) = self.exchange_stage(
                    g,
                    store,
                    t.ex_b.as_ref(),
                    hr3,
                    rr3,
                    rf3,
                    ExchangeGeo {
                        stream_w: S3_1D,
                        msg_w: S4_MSG,
                        src: S4_SRC,
                        stride: S4_STRIDE,
                        out_hw: (P2[0], P2[1]),
                        map_c: S3_RF_C,
                        sum_maps: false,
                        pools: 2,
                    },
                    v_hr,
                    v_rr,
                    x_rf,
                    &mut trace,
                    "s4",
                )?;

                // Stage 5.
                let s5_1d = |g: &mut Graph<T>, f: &Fc, x: NodeId| {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let y = g.dense_vec(x, w, Some(b))?;
                    g.relu(y)
                };
                let vh = match (&t.s5_hr, hr4) {
                    (Some(f), Some(x)) => s5_1d(g, f, x)?,
                    _ => g.constant(Tensor::zeros(vec![S5_OUT])),
                };
                let vr = match (&t.s5_rr, rr4) {
                    (Some(f), Some(x)) => s5_1d(g, f, x)?,
                    _ => g.constant(Tensor::zeros(vec![S5_OUT])),
                };
                let w = g.param(store, t.s5_rf.w);
                let b = g.param(store, t.s5_rf.b);
                let y = g.dense_vec(rf4, w, Some(b))?;
                let vf = g.relu(y)?;
                (vh, vr, Some(vf))
            }
            Arch::Duo(d) => {
                let hr_site = site_idx(true);
                let rr_site = site_idx(true);
                let one_d = |g: &mut Graph<T>,
                             taps: &mut Vec<(usize, NodeId)>,
                             f: &Fc,
                             bn: &BnSite,
                             site: usize,
                             x: NodeId|
                 -> Result<NodeId, TensorError> {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let y = g.dense_vec(x, w, Some(b))?;
                    taps.push((site, y));
                    let y = bn.apply(g, store, y)?;
                    let y = g.relu(y)?;
                    g.dropout(y, DROPOUT_FIRST_FC)
                };
                let hr1 = one_d(g, &mut taps, &d.s1_hr, &d.bn_hr, hr_site, v_hr)?;
                let rr1 = one_d(g, &mut taps, &d.s1_rr, &d.bn_rr, rr_site, v_rr)?;
                rec_trace(&mut trace, "s1.hr", hr1);
                rec_trace(&mut trace, "s1.rr", rr1);
                let hr2 = g.concat_last(&[hr1, rr1])?;
                let rr2 = g.concat_last(&[rr1, hr1])?;
                let dense_relu = |g: &mut Graph<T>, f: &Fc, x: NodeId| {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let y = g.dense_vec(x, w, Some(b))?;
                    g.relu(y)
                };
                let hr3 = dense_relu(g, &d.s3_hr, hr2)?;
                let rr3 = dense_relu(g, &d.s3_rr, rr2)?;
                let hr4 = g.concat_last(&[hr3, rr3])?;
                let rr4 = g.concat_last(&[rr3, hr3])?;
                let vh = dense_relu(g, &d.s5_hr, hr4)?;
                let vr = dense_relu(g, &d.s5_rr, rr4)?;
                (vh, vr, None)
            }
        };

        // Fused vector: respiration, heart, then RF.
        let mut parts = vec![vr, vh];
        if let Some(vf) = vf {
            parts.push(vf);
        }
        let f_pre = g.concat_last(&parts)?;
        rec_trace(&mut trace, "f_pre", f_pre);
        let f_site = site_idx(true);
        taps.push((f_site, f_pre));
        let f_bn = self.bn_f.apply(g, store, f_pre)?;
        let w = g.param(store, self.final_fc.w);
        let b = g.param(store, self.final_fc.b);
        let f = g.dense_vec(f_bn, w, Some(b))?;
        rec_trace(&mut trace, "f", f);
        Ok(MfmOut { f, bn_taps: taps })
    }

    /// One exchange stage. Residual projections of the ORIGINAL inputs are
    /// added to every present stream first; cross projections of the updated
    /// streams and the shared RF message are then concatenated per the stage
    /// table. Absent streams and absent exchanges contribute zeros so the
    /// output geometry never changes (except the dropped RF-map slots at
    /// stage 2, where present maps are summed).
    #[allow(clippy::too_many_arguments)]
    fn exchange_stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ex: Option<&Exchange>,
        hr: Option<NodeId>,
        rr: Option<NodeId>,
        rf: NodeId,
        geo: ExchangeGeo,
        v_hr: NodeId,
        v_rr: NodeId,
        x_rf: NodeId,
        trace: &mut Option<&mut StageTrace>,
        tag: &'static str,
    ) -> Result<(Option<NodeId>, Option<NodeId>, NodeId), TensorError> {
        let run_proj = |g: &mut Graph<T>, p: &Proj, x: NodeId| -> Result<NodeId, TensorError> {
            let w = g.param(store, p.fc.w);
            let b = g.param(store, p.fc.b);
            let y = g.dense_vec(x, w, Some(b))?;
            let plane = g.reshape(y, vec![geo.src[0], geo.src[1], 1])?;
            let k = g.param(store, p.k);
            g.deconv2d(plane, k, None, geo.stride, geo.out_hw, false)
        };

        // Residual re-injection (original inputs, linear projections).
        let mut rf_res = rf;
        if let Some(ex) = ex {
            if let Some(p) = &ex.res_hr {
                let m = run_proj(g, p, v_hr)?;
                rf_res = g.add(rf_res, m)?;
            }
            if let Some(p) = &ex.res_rr {
                let m = run_proj(g, p, v_rr)?;
                rf_res = g.add(rf_res, m)?;
            }
        }
        let pooled_orig = if ex.map(|e| e.res_rf2hr.is_some() || e.res_rf2rr.is_some())
            == Some(true)
        {
            let mut p = x_rf;
            for _ in 0..geo.pools {
                p = g.maxpool2(p)?;
            }
            Some(p)
        } else {
            None
        };
        let add_1d_res = |g: &mut Graph<T>,
                          cur: Option<NodeId>,
                          f: Option<&Fc>|
         -> Result<Option<NodeId>, TensorError> {
            match (cur, f, pooled_orig) {
                (Some(x), Some(f), Some(p)) => {
                    let w = g.param(store, f.w);
                    let b = g.param(store, f.b);
                    let r = g.dense_vec(p, w, Some(b))?;
                    Ok(Some(g.add(x, r)?))
                }
                _ => Ok(cur),
            }
        };
        let hr_res = add_1d_res(g, hr, ex.and_then(|e| e.res_rf2hr.as_ref()))?;
        let rr_res = add_1d_res(g, rr, ex.and_then(|e| e.res_rf2rr.as_ref()))?;
        if let Some(h) = hr_res {
            rec_trace(trace, trace_name(tag, "hr_res"), h);
        }
        if let Some(r) = rr_res {
            rec_trace(trace, trace_name(tag, "rr_res"), r);
        }
        rec_trace(trace, trace_name(tag, "rf_res"), rf_res);

        // RF -> 1D message (shared by both streams).
        let m = match ex {
            Some(ex) => {
                let k = g.param(store, ex.msg.conv.k);
                let b = g.param(store, ex.msg.conv.b);
                let c = g.conv2d(rf_res, k, Some(b), crate::tensor::Padding::Same, (1, 1), false)?;
                let w = g.param(store, ex.msg.fc.w);
                let fb = g.param(store, ex.msg.fc.b);
                g.dense_vec(c, w, Some(fb))?
            }
            None => g.constant(Tensor::zeros(vec![geo.msg_w])),
        };
        rec_trace(trace, trace_name(tag, "msg"), m);

        // 1D -> RF cross maps from the updated streams.
        let hr_map = match (ex.and_then(|e| e.cross_hr.as_ref()), hr_res) {
            (Some(p), Some(x)) => Some(run_proj(g, p, x)?),
            _ => None,
        };
        let rr_map = match (ex.and_then(|e| e.cross_rr.as_ref()), rr_res) {
            (Some(p), Some(x)) => Some(run_proj(g, p, x)?),
            _ => None,
        };
        let zero_map =
            |g: &mut Graph<T>| g.constant(Tensor::zeros(vec![geo.out_hw.0, geo.out_hw.1, geo.map_c]));
        let rf_next = if geo.sum_maps {
            let appended = match (hr_map, rr_map) {
                (Some(a), Some(b)) => g.add(a, b)?,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => zero_map(g),
            };
            g.concat_last(&[rf_res, appended])?
        } else {
            let a = hr_map.map_or_else(|| Ok(zero_map(g)), Ok::<_, TensorError>)?;
            let b = rr_map.map_or_else(|| Ok(zero_map(g)), Ok::<_, TensorError>)?;
            g.concat_last(&[rf_res, a, b])?
        };
        rec_trace(trace, trace_name(tag, "rf"), rf_next);

        // 1D: own + message + peer, with zeros for absent slots (the message
        // node is already a zero constant when no exchange is present).
        let zero_stream = |g: &mut Graph<T>| g.constant(Tensor::zeros(vec![geo.stream_w]));
        let widen = |g: &mut Graph<T>,
                     own: Option<NodeId>,
                     peer: Option<NodeId>|
         -> Result<Option<NodeId>, TensorError> {
            let Some(own) = own else { return Ok(None) };
            let peer_slot = peer.map_or_else(|| Ok(zero_stream(g)), Ok::<_, TensorError>)?;
            Ok(Some(g.concat_last(&[own, m, peer_slot])?))
        };
        let hr_next = widen(g, hr_res, rr_res)?;
        let rr_next = widen(g, rr_res, hr_res)?;
        if let Some(h) = hr_next {
            rec_trace(trace, trace_name(tag, "hr"), h);
        }
        if let Some(r) = rr_next {
            rec_trace(trace, trace_name(tag, "rr"), r);
        }
        Ok((hr_next, rr_next, rf_next))
    }
}

/// Exchange-stage geometry derived from the stage table.
#[derive(Debug, Clone, Copy)]
struct ExchangeGeo {
    stream_w: usize,
    msg_w: usize,
    src: [usize; 2],
    stride: (usize, usize),
    out_hw: (usize, usize),
    map_c: usize,
    sum_maps: bool,
    pools: usize,
}

fn rec_trace(trace: &mut Option<&mut StageTrace>, name: &'static str, id: NodeId) {
    if let Some(t) = trace.as_deref_mut() {
        t.entries.push((name, id));
    }
}

/// Static trace-entry names for the two exchange stages.
fn trace_name(tag: &'static str, suffix: &'static str) -> &'static str {
    match (tag, suffix) {
        ("s2", "hr_res") => "s2.hr_res",
        ("s2", "rr_res") => "s2.rr_res",
        ("s2", "rf_res") => "s2.rf_res",
        ("s2", "msg") => "s2.msg",
        ("s2", "rf") => "s2.rf",
        ("s2", "hr") => "s2.hr",
        ("s2", "rr") => "s2.rr",
        ("s4", "hr_res") => "s4.hr_res",
        ("s4", "rr_res") => "s4.rr_res",
        ("s4", "rf_res") => "s4.rf_res",
        ("s4", "msg") => "s4.msg",
        ("s4", "rf") => "s4.rf",
        ("s4", "hr") => "s4.hr",
        ("s4", "rr") => "s4.rr",
        _ => unreachable!("unnamed trace point {tag}.{suffix}"),
    }
}
