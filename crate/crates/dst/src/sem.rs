//! Signal extraction: turn one raw CIR window into the three modality
//! inputs. Background is removed by per-bin slow-time mean subtraction, the
//! window is gain-normalized to unit RMS (per-window automatic gain control,
//! so near and far subjects present comparable magnitudes), the slow-time
//! axis is group-averaged down to L frames, and three views are built: xt
//! (per-frame magnitudes), xf (per-frame one-sided fast-time spectra) and
//! the RF embedding (real/imaginary channels). Two small 1D conv stacks pool
//! xt and xf into per-frame vectors, multi-head self-attention mixes the
//! frames, and two dense heads read out the heart and respiration
//! representations.

use std::sync::Arc;

use num_complex::Complex;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::radar::{CirWindow, RadarConfig, SimError, C32};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Real, Tensor, TensorError};

// ── Preprocessing ──

/// Subtract each range bin's slow-time mean (static background) from every
/// frame. Input is row-major [frames x bins].
pub fn remove_background(cir: &[C32], bins: usize) -> Vec<Complex<f64>> {
    let frames = cir.len() / bins;
    let mut mean = vec![Complex::new(0.0f64, 0.0); bins];
    for t in 0..frames {
        for b in 0..bins {
            let c = cir[t * bins + b];
            mean[b] += Complex::new(c.re as f64, c.im as f64);
        }
    }
    for m in mean.iter_mut() {
        *m /= frames as f64;
    }
    let mut out = Vec::with_capacity(cir.len());
    for t in 0..frames {
        for b in 0..bins {
            let c = cir[t * bins + b];
            out.push(Complex::new(c.re as f64, c.im as f64) - mean[b]);
        }
    }
    out
}

/// Per-window automatic gain control: rescale to unit RMS so feature
/// magnitudes do not carry the inverse-square distance envelope. Noise is
/// rescaled along with the signal, so far subjects stay harder — only the
/// nuisance gain is removed.
pub fn normalize_gain(mut denoised: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
    let n = denoised.len().max(1);
    let rms = (denoised.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64).sqrt();
    if rms > 1e-12 {
        for c in denoised.iter_mut() {
            *c /= rms;
        }
    }
    denoised
}

/// Average consecutive groups of `factor` frames down to L rows.
fn downsample_slow(
    denoised: &[Complex<f64>],
    bins: usize,
    factor: usize,
) -> Vec<Complex<f64>> {
    let frames = denoised.len() / bins;
    let l = frames / factor;
    let mut out = vec![Complex::new(0.0, 0.0); l * bins];
    for g in 0..l {
        for t in 0..factor {
            let row = &denoised[(g * factor + t) * bins..(g * factor + t + 1) * bins];
            for (o, &v) in out[g * bins..(g + 1) * bins].iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out[g * bins..(g + 1) * bins].iter_mut() {
            *o /= factor as f64;
        }
    }
    out
}

/// Time-domain magnitudes [L x M] and one-sided fast-time spectral
/// magnitudes [L x N], N = floor(M/2) + 1.
#[derive(Debug, Clone)]
pub struct TimeFreq {
    pub xt: Vec<f64>,
    pub xf: Vec<f64>,
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

pub fn make_time_freq(
    denoised: &[Complex<f64>],
    cfg: &RadarConfig,
) -> Result<TimeFreq, SimError> {
    let m = cfg.range_bins;
    let frames = denoised.len() / m;
    if frames % cfg.slow_time_downsample != 0 {
        return Err(SimError::Config(format!(
            "{} frames not divisible by slow_time_downsample {}",
            frames, cfg.slow_time_downsample
        )));
    }
    let slow = downsample_slow(denoised, m, cfg.slow_time_downsample);
    let l = frames / cfg.slow_time_downsample;
    let n = m / 2 + 1;
    let mut xt = Vec::with_capacity(l * m);
    let mut xf = Vec::with_capacity(l * n);
    let fft = FftPlanner::new().plan_fft_forward(m);
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    // Unitary 1/sqrt(M) scaling keeps spectral magnitudes on the same
    // footing as the time-domain view.
    let unit = 1.0 / (m as f64).sqrt();
    for row in 0..l {
        let r = &slow[row * m..(row + 1) * m];
        xt.extend(r.iter().map(|c| c.norm()));
        buf.copy_from_slice(r);
        fft.process(&mut buf);
        xf.extend(buf[..n].iter().map(|c| c.norm() * unit));
    }
    Ok(TimeFreq { xt, xf, l, m, n })
}

/// Real and imaginary channels of the downsampled CIR, [L x M x 2].
pub fn make_rf_embedding(
    denoised: &[Complex<f64>],
    cfg: &RadarConfig,
) -> Result<Vec<f64>, SimError> {
    let m = cfg.range_bins;
    let frames = denoised.len() / m;
    if frames % cfg.slow_time_downsample != 0 {
        return Err(SimError::Config(format!(
            "{} frames not divisible by slow_time_downsample {}",
            frames, cfg.slow_time_downsample
        )));
    }
    let slow = downsample_slow(denoised, m, cfg.slow_time_downsample);
    let mut rf = Vec::with_capacity(slow.len() * 2);
    for c in &slow {
        rf.push(c.re);
        rf.push(c.im);
    }
    Ok(rf)
}

/// Preprocessed, precision-cast inputs for one window, shared so many
/// graphs can reference them without copying.
#[derive(Debug, Clone)]
pub struct SemInput<T> {
    pub xt: Arc<Vec<T>>,
    pub xf: Arc<Vec<T>>,
    pub rf: Arc<Vec<T>>,
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

impl<T: Real> SemInput<T> {
    pub fn from_window(cfg: &RadarConfig, w: &CirWindow) -> Result<Self, SimError> {
        if !w.all_finite() {
            return Err(SimError::Validation("window contains non-finite samples".into()));
        }
        let denoised = normalize_gain(remove_background(&w.cir, cfg.range_bins));
        let tf = make_time_freq(&denoised, cfg)?;
        let rf = make_rf_embedding(&denoised, cfg)?;
        let cast = |v: Vec<f64>| Arc::new(v.into_iter().map(T::from_f64).collect::<Vec<T>>());
        Ok(SemInput {
            xt: cast(tf.xt),
            xf: cast(tf.xf),
            rf: cast(rf),
            l: tf.l,
            m: tf.m,
            n: tf.n,
        })
    }
}

// ── Extraction network ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemHyper {
    /// Conv layers per stream.
    pub n_cnn: usize,
    /// Attention heads.
    pub n_head: usize,
    /// Channels per conv stream (C = C').
    pub channels: usize,
    /// Conv kernel width.
    pub kernel: usize,
    /// Output width of v_hr and v_rr.
    pub out_dim: usize,
}

impl Default for SemHyper {
    fn default() -> Self {
        SemHyper {
            n_cnn: 1,
            n_head: 4,
            channels: 32,
            kernel: 5,
            out_dim: 64,
        }
    }
}

/// Both modality heads plus the pass-through RF embedding.
#[derive(Debug, Clone, Copy)]
pub struct SemOut {
    pub v_hr: NodeId,
    pub v_rr: NodeId,
    pub x_rf: NodeId,
}

#[derive(Debug, Clone)]
pub struct SemNet {
    pub hyper: SemHyper,
    l: usize,
    t_convs: Vec<(ParamId, ParamId)>,
    f_convs: Vec<(ParamId, ParamId)>,
    heads: Vec<[ParamId; 3]>,
    wo: ParamId,
    hr: (ParamId, ParamId),
    rr: (ParamId, ParamId),
}

impl SemNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &RadarConfig,
        hyper: SemHyper,
    ) -> Result<Self, TensorError> {
        let d = 2 * hyper.channels;
        if hyper.n_cnn == 0 || hyper.n_head == 0 || d % hyper.n_head != 0 {
            return Err(TensorError::Geometry {
                op: "sem",
                msg: format!(
                    "need n_cnn >= 1 and n_head dividing {} (got n_cnn {}, n_head {})",
                    d, hyper.n_cnn, hyper.n_head
                ),
            });
        }
        let l = cfg.slow_len();
        let (k, c) = (hyper.kernel, hyper.channels);
        let stream = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, tag: &str| {
            let mut convs = Vec::new();
            for i in 0..hyper.n_cnn {
                let cin = if i == 0 { 1 } else { c };
                let kern = store.add_uniform(
                    &format!("sem.{tag}.conv{i}.k"),
                    vec![k, cin, c],
                    k * cin,
                    rng,
                )?;
                let bias = store.add_zeros(&format!("sem.{tag}.conv{i}.b"), vec![c], true)?;
                convs.push((kern, bias));
            }
            Ok::<_, TensorError>(convs)
        };
        let t_convs = stream(store, rng, "t")?;
        let f_convs = stream(store, rng, "f")?;
        let dk = d / hyper.n_head;
        let mut heads = Vec::new();
        for h in 0..hyper.n_head {
            let q = store.add_uniform(&format!("sem.attn{h}.wq"), vec![d, dk], d, rng)?;
            let kk = store.add_uniform(&format!("sem.attn{h}.wk"), vec![d, dk], d, rng)?;
            let v = store.add_uniform(&format!("sem.attn{h}.wv"), vec![d, dk], d, rng)?;
            heads.push([q, kk, v]);
        }
        let wo = store.add_uniform("sem.attn.wo", vec![d, d], d, rng)?;
        let hr = (
            store.add_uniform("sem.hr.w", vec![l, hyper.out_dim], l, rng)?,
            store.add_zeros("sem.hr.b", vec![hyper.out_dim], true)?,
        );
        let rr = (
            store.add_uniform("sem.rr.w", vec![l, hyper.out_dim], l, rng)?,
            store.add_zeros("sem.rr.b", vec![hyper.out_dim], true)?,
        );
        Ok(SemNet {
            hyper,
            l,
            t_convs,
            f_convs,
            heads,
            wo,
            hr,
            rr,
        })
    }

    /// Conv stacks + global max-pool per stream, concatenated to [L x 2C].
    pub fn encode_time_freq<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xt: NodeId,
        xf: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mut pooled = Vec::new();
        for (x, convs) in [(xt, &self.t_convs), (xf, &self.f_convs)] {
            let mut cur = x;
            for &(k, b) in convs {
                let kn = g.param(store, k);
                let bn = g.param(store, b);
                cur = g.conv1d(cur, kn, Some(bn), true)?;
            }
            pooled.push(g.max_over_width(cur)?);
        }
        g.concat_last(&pooled)
    }

    /// Multi-head scaled dot-product self-attention over the L frames.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let d = 2 * self.hyper.channels;
        let dk = d / self.hyper.n_head;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::new();
        for ids in &self.heads {
            let [wq, wk, wv] = ids.map(|p| g.param(store, p));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, v)?);
        }
        let cat = g.concat_last(&outs)?;
        let wo = g.param(store, self.wo);
        g.matmul(cat, wo)
    }

    /// Mean over the feature axis, then the two dense ReLU heads.
    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attended: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let v_tf = g.row_mean(attended)?;
        let head = |g: &mut Graph<T>, (w, b): (ParamId, ParamId)| {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.dense_vec(v_tf, wn, Some(bn))?;
            g.relu(y)
        };
        Ok((head(g, self.hr)?, head(g, self.rr)?))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &SemInput<T>,
    ) -> Result<SemOut, TensorError> {
        let (l, m, n) = (input.l, input.m, input.n);
        if l != self.l {
            return Err(TensorError::Geometry {
                op: "sem",
                msg: format!("input has {} frames, network was built for {}", l, self.l),
            });
        }
        let xt = g.constant_shared(vec![l, m, 1], input.xt.clone());
        let xf = g.constant_shared(vec![l, n, 1], input.xf.clone());
        let x_rf = g.constant_shared(vec![l, m, 2], input.rf.clone());
        let tf = self.encode_time_freq(g, store, xt, xf)?;
        let att = self.attend(g, store, tf)?;
        let (v_hr, v_rr) = self.extract(g, store, att)?;
        Ok(SemOut { v_hr, v_rr, x_rf })
    }
}

/// Estimator-driven replacement for the learned extraction: band-peak
/// heart/respiration scalars, normalized, expanded by small dense layers.
#[derive(Debug, Clone)]
pub struct SpectralSem {
    hr: (ParamId, ParamId),
    rr: (ParamId, ParamId),
    out_dim: usize,
}

/// Normalize estimator outputs to roughly unit scale around the class split.
pub fn normalize_estimates(hr_bpm: f64, rr_bpm: f64) -> (f64, f64) {
    ((hr_bpm - 82.5) / 25.0, (rr_bpm - 17.5) / 6.0)
}

impl SpectralSem {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        out_dim: usize,
    ) -> Result<Self, TensorError> {
        Ok(SpectralSem {
            hr: (
                store.add_uniform("ssem.hr.w", vec![1, out_dim], 1, rng)?,
                store.add_zeros("ssem.hr.b", vec![out_dim], true)?,
            ),
            rr: (
                store.add_uniform("ssem.rr.w", vec![1, out_dim], 1, rng)?,
                store.add_zeros("ssem.rr.b", vec![out_dim], true)?,
            ),
            out_dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        est: (f64, f64),
        input: &SemInput<T>,
    ) -> Result<SemOut, TensorError> {
        let x_rf = g.constant_shared(vec![input.l, input.m, 2], input.rf.clone());
        let head = |g: &mut Graph<T>, (w, b): (ParamId, ParamId), v: f64| {
            let x = g.constant(Tensor::new(vec![1], vec![T::from_f64(v)])?);
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.dense_vec(x, wn, Some(bn))?;
            g.relu(y)
        };
        let v_hr = head(g, self.hr, est.0)?;
        let v_rr = head(g, self.rr, est.1)?;
        debug_assert_eq!(g.shape(v_hr), [self.out_dim]);
        Ok(SemOut { v_hr, v_rr, x_rf })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::{synth_window, SubjectState};
    use crate::tensor::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};

    fn fft_row_full(row: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let mut buf = row.to_vec();
        FftPlanner::new().plan_fft_forward(row.len()).process(&mut buf);
        buf
    }

    fn naive_dft(row: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let m = row.len();
        (0..m)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (t, &v) in row.iter().enumerate() {
                    let ang = -std::f64::consts::TAU * (k * t) as f64 / m as f64;
                    acc += v * Complex::new(ang.cos(), ang.sin());
                }
                acc
            })
            .collect()
    }

    #[test]
    fn background_removal_annihilates_constants_and_zeroes_means() {
        let bins = 8;
        let frames = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Pure clutter vanishes.
        let clutter: Vec<C32> = (0..bins)
            .map(|_| C32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let cir: Vec<C32> = (0..frames).flat_map(|_| clutter.clone()).collect();
        for v in remove_background(&cir, bins) {
            assert!(v.norm() < 1e-6);
        }
        // Random input: per-bin slow-time means land on zero.
        let cir: Vec<C32> = (0..frames * bins)
            .map(|_| C32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let out = remove_background(&cir, bins);
        for b in 0..bins {
            let mean: Complex<f64> =
                (0..frames).map(|t| out[t * bins + b]).sum::<Complex<f64>>() / frames as f64;
            assert!(mean.norm() < 1e-9);
        }
    }

    #[test]
    fn background_removal_keeps_a_full_cycle_tone_exactly() {
        let bins = 4;
        let frames = 16;
        let clutter = C32::new(0.7, -0.3);
        let tone = |t: usize| {
            let ang = std::f64::consts::TAU * 3.0 * t as f64 / frames as f64;
            Complex::new(0.5 * ang.cos(), 0.5 * ang.sin())
        };
        let mut cir = Vec::new();
        for t in 0..frames {
            for b in 0..bins {
                let v = if b == 1 { tone(t) } else { Complex::new(0.0, 0.0) };
                cir.push(C32::new(v.re as f32 + clutter.re, v.im as f32 + clutter.im));
            }
        }
        let out = remove_background(&cir, bins);
        for t in 0..frames {
            assert!((out[t * bins + 1] - tone(t)).norm() < 1e-6);
            assert!(out[t * bins + 0].norm() < 1e-6);
        }
    }

    #[test]
    fn fft_matches_naive_dft_up_to_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [8usize, 96, 256] {
            let row: Vec<Complex<f64>> = (0..m)
                .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let ours = fft_row_full(&row);
            let naive = naive_dft(&row);
            for (a, b) in ours.iter().zip(&naive) {
                assert!((a - b).norm() < 1e-9, "m={m}");
            }
            // Parseval over the full spectrum.
            let te: f64 = row.iter().map(|c| c.norm_sqr()).sum();
            let fe: f64 = naive.iter().map(|c| c.norm_sqr()).sum::<f64>() / m as f64;
            assert!((te - fe).abs() < 1e-9 * te.max(1.0));
        }
    }

    #[test]
    fn time_freq_shapes_zeros_and_sinusoid_peak() {
        let cfg = RadarConfig::default();
        let frames = cfg.frames_per_window();
        let m = cfg.range_bins;
        let zeros = vec![Complex::new(0.0, 0.0); frames * m];
        let tf = make_time_freq(&zeros, &cfg).unwrap();
        assert_eq!((tf.l, tf.m, tf.n), (150, 96, 49));
        assert!(tf.xt.iter().chain(&tf.xf).all(|&v| v == 0.0));
        // A pure fast-time complex sinusoid at bin frequency 7 peaks at 7.
        let k0 = 7usize;
        let row: Vec<Complex<f64>> = (0..m)
            .map(|b| {
                let ang = std::f64::consts::TAU * (k0 * b) as f64 / m as f64;
                Complex::new(ang.cos(), ang.sin())
            })
            .collect();
        let cir: Vec<Complex<f64>> = (0..frames).flat_map(|_| row.clone()).collect();
        let tf = make_time_freq(&cir, &cfg).unwrap();
        for l in 0..tf.l {
            let spec = &tf.xf[l * tf.n..(l + 1) * tf.n];
            let peak = (0..tf.n).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
            assert_eq!(peak, k0);
        }
    }

    #[test]
    fn rf_embedding_is_consistent_with_xt() {
        let cfg = RadarConfig::default();
        let subj = SubjectState {
            hr_bpm: 70.0,
            rr_bpm: 14.0,
            hr_amp_m: 4e-4,
            rr_amp_m: 6e-3,
            distance_m: 1.0,
            angle_deg: 5.0,
            motion_level: 0.3,
            stressed: false,
        };
        let w = synth_window(&cfg, &subj, 21).unwrap();
        let denoised = remove_background(&w.cir, cfg.range_bins);
        let tf = make_time_freq(&denoised, &cfg).unwrap();
        let rf = make_rf_embedding(&denoised, &cfg).unwrap();
        assert_eq!(rf.len(), 150 * 96 * 2);
        for i in 0..tf.xt.len() {
            let mag = rf[2 * i].hypot(rf[2 * i + 1]);
            assert!((mag - tf.xt[i]).abs() < 1e-12);
        }
        // Purely real input leaves the imaginary channel empty.
        let real: Vec<Complex<f64>> =
            denoised.iter().map(|c| Complex::new(c.re, 0.0)).collect();
        let rf = make_rf_embedding(&real, &cfg).unwrap();
        assert!(rf.iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }

    fn test_input(seed: u64) -> SemInput<f64> {
        let cfg = RadarConfig::default();
        let subj = SubjectState {
            hr_bpm: 75.0,
            rr_bpm: 16.0,
            hr_amp_m: 4e-4,
            rr_amp_m: 6e-3,
            distance_m: 1.0,
            angle_deg: 0.0,
            motion_level: 0.2,
            stressed: false,
        };
        let w = synth_window(&cfg, &subj, seed).unwrap();
        SemInput::from_window(&cfg, &w).unwrap()
    }

    #[test]
    fn forward_shapes_match_defaults() {
        let cfg = RadarConfig::default();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SemNet::new(&mut store, &mut rng, &cfg, SemHyper::default()).unwrap();
        let input = test_input(2);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &store, &input).unwrap();
        assert_eq!(g.shape(out.v_hr), [64]);
        assert_eq!(g.shape(out.v_rr), [64]);
        assert_eq!(g.shape(out.x_rf), [150, 96, 2]);
        g.check_finite(out.v_hr, "v_hr").unwrap();
    }

    #[test]
    fn head_count_must_divide_width() {
        let cfg = RadarConfig::default();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad = SemHyper {
            n_head: 5,
            ..SemHyper::default()
        };
        assert!(SemNet::new(&mut store, &mut rng, &cfg, bad).is_err());
    }

    #[test]
    fn zero_biases_and_zero_input_give_zero_heads() {
        let cfg = RadarConfig::default();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = SemNet::new(&mut store, &mut rng, &cfg, SemHyper::default()).unwrap();
        let zero = SemInput {
            xt: Arc::new(vec![0.0; 150 * 96]),
            xf: Arc::new(vec![0.0; 150 * 49]),
            rf: Arc::new(vec![0.0; 150 * 96 * 2]),
            l: 150,
            m: 96,
            n: 49,
        };
        let mut g = Graph::new();
        let out = net.forward(&mut g, &store, &zero).unwrap();
        assert!(g.data(out.v_hr).iter().all(|&v| v == 0.0));
        assert!(g.data(out.v_rr).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RadarConfig::default();
        let net = SemNet::new(&mut store, &mut rng, &cfg, SemHyper::default()).unwrap();
        let (l, d) = (10usize, 64usize);
        let x: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Rotate rows by 3.
        let perm: Vec<usize> = (0..l).map(|i| (i + 3) % l).collect();
        let mut xp = vec![0.0; l * d];
        for (i, &p) in perm.iter().enumerate() {
            xp[i * d..(i + 1) * d].copy_from_slice(&x[p * d..(p + 1) * d]);
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![l, d], x).unwrap());
        let b = g.constant(Tensor::new(vec![l, d], xp).unwrap());
        let ya = net.attend(&mut g, &store, a).unwrap();
        let yb = net.attend(&mut g, &store, b).unwrap();
        let (da, db) = (g.data(ya).to_vec(), g.data(yb).to_vec());
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((db[i * d + c] - da[p * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_attention_reduces_to_value_projection() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = RadarConfig::default();
        let net = SemNet::new(&mut store, &mut rng, &cfg, SemHyper::default()).unwrap();
        let d = 64usize;
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xn = g.constant(Tensor::new(vec![1, d], x.clone()).unwrap());
        let y = net.attend(&mut g, &store, xn).unwrap();
        // With one row the attention weight is 1: output = (x Wv heads) Wo.
        let mut v = Vec::new();
        for ids in &net.heads {
            let wv = store.value(ids[2]);
            let dk = d / net.hyper.n_head;
            for c in 0..dk {
                v.push((0..d).map(|r| x[r] * wv[r * dk + c]).sum::<f64>());
            }
        }
        let wo = store.value(net.wo);
        for c in 0..d {
            let want: f64 = (0..d).map(|r| v[r] * wo[r * d + c]).sum();
            assert!((g.data(y)[c] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_variant_expands_estimates() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ssem = SpectralSem::new(&mut store, &mut rng, 64).unwrap();
        let input = test_input(3);
        let mut g = Graph::new();
        let (hn, rn) = normalize_estimates(95.0, 20.0);
        let out = ssem.forward(&mut g, &store, (hn, rn), &input).unwrap();
        assert_eq!(g.shape(out.v_hr), [64]);
        assert_eq!(g.shape(out.x_rf), [150, 96, 2]);
    }

    #[test]
    fn whole_extraction_network_passes_gradient_check() {
        let cfg = RadarConfig::default();
        let input = test_input(12);
        let build = move |g: &mut Graph<f64>| {
            // Rebuilt identically on every replay; parameters enter the graph
            // as leaves, so the checker can nudge them one coordinate at a time.
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let net = SemNet::new(&mut store, &mut rng, &cfg, SemHyper::default())?;
            let out = net.forward(g, &store, &input)?;
            let h = g.concat_last(&[out.v_hr, out.v_rr])?;
            g.sum_all(h)
        };
        let cfg_gc = GradCheckConfig {
            max_coords_per_leaf: Some(2),
            ..GradCheckConfig::default()
        };
        let report = grad_check(&build, &cfg_gc).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
