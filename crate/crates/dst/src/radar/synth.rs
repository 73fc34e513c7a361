//! Window and session synthesis.
//!
//! Chest displacement is a two-tone sum (respiration + heartbeat) with a
//! slow sinusoidal heart-rate modulation whose depth halves under stress,
//! a shallower respiration amplitude during stress segments,
//! plus occasional band-limited motion bursts. The return at the subject's
//! range bin is `env(m) * exp(j*4*pi*(distance + d(t))/lambda)` with a
//! Gaussian pulse envelope across neighbouring bins, inverse-square amplitude
//! in distance, static per-bin clutter, and white complex noise whose level
//! is referenced to the 1 m return (so far subjects really are harder).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    segment_at, session_duration_s, CirWindow, RadarConfig, Session, SimError, SubjectState,
    TaskKind, C32,
};

/// Gaussian pulse envelope width across range bins.
const PULSE_SIGMA_BINS: f64 = 1.0;
/// Heart-rate modulation: a whole number of cycles per default window (so
/// window-mean rate equals the base rate exactly) with sidelines landing on
/// the analysis window's spectral null rather than inside its main lobe.
const HRV_HZ: f64 = 0.4;
const HRV_DEPTH_CALM: f64 = 0.02;
const HRV_DEPTH_STRESS: f64 = 0.01;
/// Stress shifts breathing toward faster, shallower thoracic movement; this
/// scales the respiration displacement amplitude during stress segments.
const RR_DEPTH_STRESS: f64 = 0.55;
/// Peak motion-burst displacement at motion_level 1, metres.
const MOTION_PEAK_M: f64 = 0.005;
/// Raised-cosine half-width for segment transitions, seconds.
const RAMP_HALF_S: f64 = 10.0;

// ── Physiology draws ──

fn draw_hr(rng: &mut ChaCha8Rng, stressed: bool) -> f64 {
    if stressed {
        rng.gen_range(85.0..110.0)
    } else {
        rng.gen_range(60.0..80.0)
    }
}

fn draw_rr(rng: &mut ChaCha8Rng, stressed: bool) -> f64 {
    if stressed {
        rng.gen_range(18.0..25.0)
    } else {
        rng.gen_range(12.0..17.0)
    }
}

/// Draw per-subject physical attributes; vitals start from the calm
/// distributions so the result is a complete valid state.
pub fn sample_physique(cfg: &RadarConfig, rng: &mut ChaCha8Rng) -> SubjectState {
    let s = SubjectState {
        hr_bpm: draw_hr(rng, false),
        rr_bpm: draw_rr(rng, false),
        hr_amp_m: rng.gen_range(3e-4..5e-4),
        rr_amp_m: rng.gen_range(4e-3..8e-3),
        distance_m: rng.gen_range(0.6..1.5),
        angle_deg: rng.gen_range(0.0..20.0),
        motion_level: rng.gen_range(0.1..0.4),
        stressed: false,
    };
    debug_assert!(s.validate(cfg).is_ok());
    s
}

// ── Signal assembly ──

fn draw_clutter(cfg: &RadarConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let s = cfg.clutter_scale / 2f64.sqrt();
    (0..cfg.range_bins)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            (s * re, s * im)
        })
        .collect()
}

/// Occasional smoothed random-walk bursts over `frames` samples.
fn motion_track(
    frames: usize,
    fps: usize,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut track = vec![0.0; frames];
    if level <= 0.0 {
        return track;
    }
    // One candidate burst per 10 s slot (a lone window gets one slot).
    let slot = 10 * fps;
    let slots = frames.div_ceil(slot);
    for si in 0..slots {
        let p = if slots == 1 { 0.5 * level } else { 0.8 * level / 10.0 };
        if rng.gen::<f64>() >= p {
            continue;
        }
        let dur = (rng.gen_range(1.5..4.0) * fps as f64) as usize;
        let slot_len = slot.min(frames - si * slot);
        if dur + 1 >= slot_len {
            continue;
        }
        let start = si * slot + rng.gen_range(0..slot_len - dur);
        let amp = MOTION_PEAK_M * level * rng.gen_range(0.5..1.0);
        // Random walk, box-smoothed, Hann-tapered, peak-normalized.
        let mut walk = vec![0.0f64; dur];
        let mut acc = 0.0;
        for w in walk.iter_mut() {
            acc += rng.sample::<f64, _>(StandardNormal);
            *w = acc;
        }
        let half = (fps / 4).max(1);
        let smooth: Vec<f64> = (0..dur)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(dur);
                walk[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        let peak = smooth.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
        for (i, &v) in smooth.iter().enumerate() {
            let hann = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / dur as f64).cos();
            track[start + i] += amp * hann * v / peak;
        }
    }
    track
}

/// Render raw CIR frames for a displacement series.
fn fill_cir(
    cfg: &RadarConfig,
    distance_m: f64,
    disp: &[f64],
    clutter: &[(f64, f64)],
    noise: &mut ChaCha8Rng,
) -> Vec<C32> {
    let m = cfg.range_bins;
    let lambda = cfg.wavelength_m();
    let r_frac = distance_m / cfg.range_res_m();
    let amp = distance_m.powi(-2);
    let env: Vec<f64> = (0..m)
        .map(|b| {
            let z = (b as f64 - r_frac) / PULSE_SIGMA_BINS;
            amp * (-0.5 * z * z).exp()
        })
        .collect();
    let sigma = if cfg.snr_db.is_finite() {
        10f64.powf(-cfg.snr_db / 20.0) / 2f64.sqrt()
    } else {
        0.0
    };
    let four_pi = 4.0 * std::f64::consts::PI;
    let mut cir = Vec::with_capacity(disp.len() * m);
    for &d in disp {
        let theta = four_pi * (distance_m + d) / lambda;
        let (s, c) = theta.sin_cos();
        for b in 0..m {
            let mut re = env[b] * c + clutter[b].0;
            let mut im = env[b] * s + clutter[b].1;
            if sigma > 0.0 {
                re += sigma * noise.sample::<f64, _>(StandardNormal);
                im += sigma * noise.sample::<f64, _>(StandardNormal);
            }
            cir.push(C32::new(re as f32, im as f32));
        }
    }
    cir
}

/// Integrate instantaneous vital frequencies into displacement samples.
/// Returns (displacement, mean hr bpm, mean rr bpm) over the span.
#[allow(clippy::too_many_arguments)]
fn displacement(
    frames: usize,
    fps: usize,
    t_start: f64,
    hr_hz: &dyn Fn(f64) -> f64,
    rr_hz: &dyn Fn(f64) -> f64,
    hrv_depth: &dyn Fn(f64) -> f64,
    rr_amp: &dyn Fn(f64) -> f64,
    phases: (f64, f64, f64),
    a_h: f64,
    motion: &[f64],
) -> (Vec<f64>, f64, f64) {
    let dt = 1.0 / fps as f64;
    let (mut th_r, mut th_h, ph_hrv) = phases;
    let mut disp = Vec::with_capacity(frames);
    let (mut hr_sum, mut rr_sum) = (0.0, 0.0);
    for i in 0..frames {
        let t = t_start + i as f64 * dt;
        let fr = rr_hz(t);
        let fh = hr_hz(t)
            * (1.0 + hrv_depth(t) * (std::f64::consts::TAU * HRV_HZ * t + ph_hrv).sin());
        hr_sum += fh;
        rr_sum += fr;
        disp.push(rr_amp(t) * th_r.sin() + a_h * th_h.sin() + motion[i]);
        th_r += std::f64::consts::TAU * fr * dt;
        th_h += std::f64::consts::TAU * fh * dt;
    }
    let n = frames as f64;
    (disp, 60.0 * hr_sum / n, 60.0 * rr_sum / n)
}

fn check_bin(cfg: &RadarConfig, distance_m: f64) -> Result<usize, SimError> {
    let m0 = (distance_m / cfg.range_res_m()).round() as i64;
    if m0 < 0 || m0 >= cfg.range_bins as i64 {
        return Err(SimError::Range(format!(
            "target bin {} outside [0, {})",
            m0, cfg.range_bins
        )));
    }
    Ok(m0 as usize)
}

/// Synthesize one standalone window for a fixed subject state.
pub fn synth_window(
    cfg: &RadarConfig,
    subj: &SubjectState,
    seed: u64,
) -> Result<CirWindow, SimError> {
    cfg.validate()?;
    subj.validate(cfg)?;
    check_bin(cfg, subj.distance_m)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut ph_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut cl_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut mo_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut no_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let frames = cfg.frames_per_window();
    let phases = (
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let clutter = draw_clutter(cfg, &mut cl_rng);
    let motion = motion_track(frames, cfg.fps, subj.motion_level, &mut mo_rng);
    let depth = if subj.stressed { HRV_DEPTH_STRESS } else { HRV_DEPTH_CALM };
    let a_r = subj.rr_amp_m
        * subj.angle_deg.to_radians().cos()
        * if subj.stressed { RR_DEPTH_STRESS } else { 1.0 };
    let (disp, hr_mean, rr_mean) = displacement(
        frames,
        cfg.fps,
        0.0,
        &|_| subj.hr_bpm / 60.0,
        &|_| subj.rr_bpm / 60.0,
        &|_| depth,
        &|_| a_r,
        phases,
        subj.hr_amp_m,
        &motion,
    );
    let cir = fill_cir(cfg, subj.distance_m, &disp, &clutter, &mut no_rng);
    Ok(CirWindow {
        cir,
        label: subj.stressed as u8,
        truth: SubjectState {
            hr_bpm: hr_mean,
            rr_bpm: rr_mean,
            ..*subj
        },
        session_id: 0,
        t0: 0.0,
    })
}

// ── Sessions ──

/// Per-segment piecewise values with raised-cosine ramps at boundaries.
struct Track {
    bounds: Vec<f64>,
    vals: Vec<f64>,
}

impl Track {
    fn at(&self, t: f64) -> f64 {
        let n = self.vals.len();
        let mut idx = n - 1;
        for i in 0..n {
            if t < self.bounds[i + 1] {
                idx = i;
                break;
            }
        }
        // Blend across the nearest boundary when inside the ramp.
        for b in 1..n {
            let d = t - self.bounds[b];
            if d.abs() < RAMP_HALF_S {
                let w = 0.5 - 0.5
                    * (std::f64::consts::PI * (d + RAMP_HALF_S) / (2.0 * RAMP_HALF_S)).cos();
                return self.vals[b - 1] + (self.vals[b] - self.vals[b - 1]) * w;
            }
        }
        self.vals[idx]
    }
}

fn synth_session_inner(
    cfg: &RadarConfig,
    session_id: u32,
    seed: u64,
    physique: Option<SubjectState>,
) -> Result<Session, SimError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut subj_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut track_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut cl_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut mo_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let noise_base: u64 = master.gen();
    let mut ph_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let phys = match physique {
        Some(p) => {
            p.validate(cfg)?;
            // Keep the stream position identical to the unforced path.
            let _ = sample_physique(cfg, &mut subj_rng);
            p
        }
        None => sample_physique(cfg, &mut subj_rng),
    };
    check_bin(cfg, phys.distance_m)?;

    let segs = super::SESSION_SEGMENTS;
    let mut bounds = vec![0.0];
    for &(_, d) in &segs {
        bounds.push(bounds.last().unwrap() + d);
    }
    let stressed = |k: TaskKind| k == TaskKind::Stress;
    let hr = Track {
        bounds: bounds.clone(),
        vals: segs.iter().map(|&(k, _)| draw_hr(&mut track_rng, stressed(k))).collect(),
    };
    let rr = Track {
        bounds: bounds.clone(),
        vals: segs.iter().map(|&(k, _)| draw_rr(&mut track_rng, stressed(k))).collect(),
    };
    let depth = Track {
        bounds: bounds.clone(),
        vals: segs
            .iter()
            .map(|&(k, _)| if stressed(k) { HRV_DEPTH_STRESS } else { HRV_DEPTH_CALM })
            .collect(),
    };
    let breath = Track {
        bounds: bounds.clone(),
        vals: segs
            .iter()
            .map(|&(k, _)| if stressed(k) { RR_DEPTH_STRESS } else { 1.0 })
            .collect(),
    };

    let total_s = session_duration_s();
    let frames_total = (total_s * cfg.fps as f64).round() as usize;
    let clutter = draw_clutter(cfg, &mut cl_rng);
    let motion = motion_track(frames_total, cfg.fps, phys.motion_level, &mut mo_rng);
    let phases = (
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
        ph_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let a_r = phys.rr_amp_m * phys.angle_deg.to_radians().cos();
    let (disp, _, _) = displacement(
        frames_total,
        cfg.fps,
        0.0,
        &|t| hr.at(t) / 60.0,
        &|t| rr.at(t) / 60.0,
        &|t| depth.at(t),
        &|t| a_r * breath.at(t),
        phases,
        phys.hr_amp_m,
        &motion,
    );

    let frames_w = cfg.frames_per_window();
    let n_windows = ((total_s - cfg.window_s) / cfg.stride_s).floor() as usize + 1;
    let mut windows = Vec::new();
    let mut excluded = 0usize;
    for w in 0..n_windows {
        let t0 = w as f64 * cfg.stride_s;
        let kind = segment_at(t0, cfg.window_s);
        let (label, is_stress) = match kind {
            Some(TaskKind::NonStress) => (0u8, false),
            Some(TaskKind::Stress) => (1u8, true),
            _ => {
                excluded += 1;
                continue;
            }
        };
        let f0 = (t0 * cfg.fps as f64).round() as usize;
        let slice = &disp[f0..f0 + frames_w];
        let mut no_rng = ChaCha8Rng::seed_from_u64(noise_base.wrapping_add(w as u64));
        let cir = fill_cir(cfg, phys.distance_m, slice, &clutter, &mut no_rng);
        let dt = 1.0 / cfg.fps as f64;
        let (mut hr_sum, mut rr_sum) = (0.0, 0.0);
        for i in 0..frames_w {
            let t = t0 + i as f64 * dt;
            rr_sum += rr.at(t);
            hr_sum += hr.at(t)
                * (1.0 + depth.at(t) * (std::f64::consts::TAU * HRV_HZ * t + phases.2).sin());
        }
        windows.push(CirWindow {
            cir,
            label,
            truth: SubjectState {
                hr_bpm: hr_sum / frames_w as f64,
                rr_bpm: rr_sum / frames_w as f64,
                stressed: is_stress,
                ..phys
            },
            session_id,
            t0,
        });
    }
    Ok(Session {
        windows,
        total_windows: n_windows,
        excluded,
        session_id,
    })
}

/// Run the full stress-induction timeline for one subject.
pub fn synth_session(cfg: &RadarConfig, session_id: u32, seed: u64) -> Result<Session, SimError> {
    synth_session_inner(cfg, session_id, seed, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFactor {
    Distance,
    Angle,
}

#[derive(Debug)]
pub struct SweepGroup {
    pub factor: SweepFactor,
    pub value: f64,
    pub sessions: Vec<Session>,
}

/// One dataset group per swept value; groups share subjects and seeds so
/// they differ only through the swept factor.
pub fn sweep_dataset(
    cfg: &RadarConfig,
    factor: SweepFactor,
    values: &[f64],
    sessions_per_value: usize,
    seed: u64,
) -> Result<Vec<SweepGroup>, SimError> {
    cfg.validate()?;
    let mut groups = Vec::with_capacity(values.len());
    for (vi, &value) in values.iter().enumerate() {
        match factor {
            SweepFactor::Distance => {
                if !(0.3..=3.0).contains(&value) {
                    return Err(SimError::Validation(format!(
                        "distance {value} outside sensing range 0.3..=3.0"
                    )));
                }
                check_bin(cfg, value)?;
            }
            SweepFactor::Angle => {
                if !(0.0..cfg.fov_deg / 2.0).contains(&value) {
                    return Err(SimError::Validation(format!(
                        "angle {value} outside [0, fov/2 = {})",
                        cfg.fov_deg / 2.0
                    )));
                }
            }
        }
        let mut sessions = Vec::with_capacity(sessions_per_value);
        for s in 0..sessions_per_value {
            let sess_seed = seed.wrapping_add(s as u64);
            let mut subj_rng = {
                // Reproduce the physique the unforced session would draw,
                // then pin the swept factor on top of it.
                let mut master = ChaCha8Rng::seed_from_u64(sess_seed);
                ChaCha8Rng::seed_from_u64(master.gen())
            };
            let mut phys = sample_physique(cfg, &mut subj_rng);
            match factor {
                SweepFactor::Distance => phys.distance_m = value,
                SweepFactor::Angle => phys.angle_deg = value,
            }
            let id = (vi * sessions_per_value + s) as u32;
            sessions.push(synth_session_inner(cfg, id, sess_seed, Some(phys))?);
        }
        groups.push(SweepGroup {
            factor,
            value,
            sessions,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_cfg() -> RadarConfig {
        RadarConfig {
            snr_db: f64::INFINITY,
            clutter_scale: 0.0,
            ..RadarConfig::default()
        }
    }

    fn still_subject(distance_m: f64) -> SubjectState {
        SubjectState {
            hr_bpm: 72.0,
            rr_bpm: 15.0,
            hr_amp_m: 4e-4,
            rr_amp_m: 6e-3,
            distance_m,
            angle_deg: 0.0,
            motion_level: 0.0,
            stressed: false,
        }
    }

    #[test]
    fn clean_window_is_pure_phase_modulation_at_target_bin() {
        let cfg = clean_cfg();
        let subj = still_subject(1.0);
        let w = synth_window(&cfg, &subj, 7).unwrap();
        assert!(w.all_finite());
        let m0 = (subj.distance_m / cfg.range_res_m()).round() as usize;
        // Constant magnitude across slow time: modulation lives in phase only.
        let mags: Vec<f64> = (0..cfg.frames_per_window())
            .map(|t| {
                let c = w.cir[t * cfg.range_bins + m0];
                (c.re as f64).hypot(c.im as f64)
            })
            .collect();
        let (lo, hi) = mags
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!((hi - lo) / hi < 1e-5, "magnitude wobble {lo}..{hi}");
        // Truth equals the requested vitals: the rate modulation averages
        // out over the exact cycle the window covers.
        assert!((w.truth.hr_bpm - 72.0).abs() < 1e-9);
        assert!((w.truth.rr_bpm - 15.0).abs() < 1e-9);
    }

    #[test]
    fn amplitude_follows_inverse_square_in_distance() {
        let cfg = clean_cfg();
        let dr = cfg.range_res_m();
        // Distances at exact bin centres so envelope sampling cancels.
        let near = synth_window(&cfg, &still_subject(10.0 * dr), 3).unwrap();
        let far = synth_window(&cfg, &still_subject(20.0 * dr), 3).unwrap();
        let peak = |w: &CirWindow| {
            (0..cfg.range_bins)
                .map(|b| {
                    let c = w.cir[b];
                    (c.re as f64).hypot(c.im as f64)
                })
                .fold(f64::MIN, f64::max)
        };
        let ratio = peak(&near) / peak(&far);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn same_seed_reproduces_window_exactly() {
        let cfg = RadarConfig::default();
        let subj = SubjectState {
            motion_level: 0.5,
            ..still_subject(1.2)
        };
        let a = synth_window(&cfg, &subj, 99).unwrap();
        let b = synth_window(&cfg, &subj, 99).unwrap();
        assert_eq!(a, b);
        let c = synth_window(&cfg, &subj, 100).unwrap();
        assert_ne!(a.cir, c.cir);
    }

    #[test]
    fn per_bin_difference_between_cluttered_and_clean_is_the_static_clutter() {
        let base = clean_cfg();
        let cluttered = RadarConfig {
            clutter_scale: 0.5,
            ..base.clone()
        };
        let subj = still_subject(1.0);
        let w0 = synth_window(&base, &subj, 11).unwrap();
        let w1 = synth_window(&cluttered, &subj, 11).unwrap();
        let m = base.range_bins;
        // The difference must be constant down slow time: clutter is static.
        for b in 0..m {
            let d0 = w1.cir[b] - w0.cir[b];
            for t in 1..base.frames_per_window() {
                let d = w1.cir[t * m + b] - w0.cir[t * m + b];
                assert!((d - d0).norm() < 1e-4);
            }
        }
        // And per-bin slow-time means of the cluttered window sit on the
        // clutter constants wherever the target envelope has died off.
        let frames = base.frames_per_window();
        for b in 0..m {
            let mean = (0..frames)
                .map(|t| w1.cir[t * m + b])
                .fold(C32::new(0.0, 0.0), |a, c| a + c)
                / frames as f32;
            let d0 = w1.cir[b] - w0.cir[b];
            let r_frac = subj.distance_m / base.range_res_m();
            if (b as f64 - r_frac).abs() > 8.0 {
                assert!((mean - d0).norm() < 1e-4, "bin {b}");
            }
        }
    }

    #[test]
    fn session_matches_timeline_arithmetic() {
        let cfg = RadarConfig::default();
        let s = synth_session(&cfg, 1, 42).unwrap();
        assert_eq!(s.total_windows, 312);
        assert_eq!(s.excluded, 72);
        assert_eq!(s.windows.len(), 240);
        let zeros = s.windows.iter().filter(|w| w.label == 0).count();
        let ones = s.windows.iter().filter(|w| w.label == 1).count();
        assert_eq!((zeros, ones), (120, 120));
        for w in &s.windows {
            assert_eq!(w.label == 1, w.truth.stressed);
        }
    }

    #[test]
    fn stress_windows_have_elevated_vitals_on_average() {
        let cfg = RadarConfig::default();
        let s = synth_session(&cfg, 1, 7).unwrap();
        let mean = |label: u8, f: &dyn Fn(&SubjectState) -> f64| {
            let sel: Vec<f64> =
                s.windows.iter().filter(|w| w.label == label).map(|w| f(&w.truth)).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        assert!(mean(1, &|t| t.hr_bpm) > mean(0, &|t| t.hr_bpm));
        assert!(mean(1, &|t| t.rr_bpm) > mean(0, &|t| t.rr_bpm));
    }

    #[test]
    fn sweep_groups_share_everything_but_the_factor() {
        let cfg = RadarConfig {
            stride_s: 5.0,
            ..RadarConfig::default()
        };
        let groups =
            sweep_dataset(&cfg, SweepFactor::Distance, &[0.5, 2.5], 1, 5).unwrap();
        assert_eq!(groups.len(), 2);
        let (a, b) = (&groups[0].sessions[0], &groups[1].sessions[0]);
        assert_eq!(a.windows.len(), b.windows.len());
        for (wa, wb) in a.windows.iter().zip(&b.windows) {
            assert_eq!(wa.truth.angle_deg, wb.truth.angle_deg);
            assert_eq!(wa.truth.hr_bpm, wb.truth.hr_bpm);
            assert!((wa.truth.distance_m - 0.5).abs() < 1e-12);
            assert!((wb.truth.distance_m - 2.5).abs() < 1e-12);
        }
        // Determinism across calls.
        let again = sweep_dataset(&cfg, SweepFactor::Distance, &[0.5, 2.5], 1, 5).unwrap();
        assert_eq!(again[0].sessions[0].windows, groups[0].sessions[0].windows);
        // Invalid factor values are rejected before any synthesis.
        assert!(sweep_dataset(&cfg, SweepFactor::Distance, &[5.0], 1, 5).is_err());
        assert!(sweep_dataset(&cfg, SweepFactor::Angle, &[60.0], 1, 5).is_err());
    }
}
