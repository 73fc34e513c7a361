//! Model-free vital-sign estimation from a raw CIR window.
//!
//! The target bin is the one with the largest slow-time variance. Static
//! background is removed by an algebraic circle fit (the modulated return
//! traces a circular arc around the clutter constant; a plain slow-time
//! mean would sit inside the arc and warp the phase). The unwrapped phase
//! of the recentred series is proportional to chest displacement; Hann-
//! windowed zero-padded FFT peaks in the respiration and heart bands, with
//! parabolic refinement, give the two rates. The respiration fundamental
//! and its second harmonic are regressed out before the heart search so
//! their window leakage cannot masquerade as a heartbeat.

use std::sync::{Arc, OnceLock};

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{CirWindow, RadarConfig, SimError};

/// Respiration search band, Hz.
pub const RR_BAND_HZ: (f64, f64) = (0.1, 0.5);
/// Heart search band, Hz.
pub const HR_BAND_HZ: (f64, f64) = (0.8, 3.0);

const NFFT: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitalsEstimate {
    pub hr_bpm: f64,
    pub rr_bpm: f64,
    /// Range bin the estimate was read from.
    pub bin: usize,
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(NFFT)).clone()
}

/// Hann-window, zero-pad, FFT; return the refined peak frequency in `band`.
fn band_peak(signal: &[f64], fs: f64, band: (f64, f64)) -> Option<f64> {
    let n = signal.len();
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for (i, &v) in signal.iter().enumerate() {
        let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos();
        buf[i] = Complex::new(v * w, 0.0);
    }
    fft_plan().process(&mut buf);
    let df = fs / NFFT as f64;
    let lo = (band.0 / df).ceil() as usize;
    let hi = ((band.1 / df).floor() as usize).min(NFFT / 2);
    if lo + 1 >= hi {
        return None;
    }
    let mag = |k: usize| buf[k].norm();
    let mut best = lo;
    for k in lo..=hi {
        if mag(k) > mag(best) {
            best = k;
        }
    }
    if mag(best) <= 0.0 {
        return None;
    }
    // Log-parabolic refinement over the three bins around the peak.
    let k = best.clamp(1, NFFT / 2 - 1);
    let (a, b, c) = (mag(k - 1).max(1e-300).ln(), mag(k).max(1e-300).ln(), mag(k + 1).max(1e-300).ln());
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() < 1e-30 { 0.0 } else { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) };
    Some((k as f64 + delta) * df)
}

/// Respiration rates leave barely more than one cycle in a window, where a
/// windowed-FFT peak is biased toward DC by its own image. Scanning a fine
/// frequency grid for the sinusoid (plus offset) with the largest least-
/// squares fit energy measures the same band peak without that bias.
fn matched_tone(signal: &[f64], fs: f64, band: (f64, f64)) -> Option<f64> {
    let step = 0.002;
    let mut grid = Vec::new();
    let mut f = band.0;
    while f <= band.1 + 1e-12 {
        grid.push(f);
        f += step;
    }
    let energy = |f: f64| {
        let mut g = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for (i, &x) in signal.iter().enumerate() {
            let (s, c) = (std::f64::consts::TAU * f * i as f64 / fs).sin_cos();
            let row = [1.0, c, s];
            for p in 0..3 {
                for q in 0..3 {
                    g[p][q] += row[p] * row[q];
                }
                b[p] += row[p] * x;
            }
        }
        let mut a: Vec<Vec<f64>> = g.iter().map(|r| r.to_vec()).collect();
        let mut rhs = b.to_vec();
        if !solve(&mut a, &mut rhs) {
            return 0.0;
        }
        (0..3).map(|i| rhs[i] * b[i]).sum::<f64>()
    };
    let es: Vec<f64> = grid.iter().map(|&f| energy(f)).collect();
    let k = (0..grid.len()).max_by(|&a, &b| es[a].total_cmp(&es[b]))?;
    if es[k] <= 0.0 {
        return None;
    }
    if k == 0 || k + 1 == grid.len() {
        return Some(grid[k]);
    }
    let (a, b, c) = (es[k - 1], es[k], es[k + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() < 1e-30 { 0.0 } else { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) };
    Some(grid[k] + delta * step)
}

/// Least-squares circle centre of complex points (Kasa algebraic fit).
fn circle_centre(z: &[(f64, f64)]) -> (f64, f64) {
    let n = z.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sxr, mut syr, mut sr) = (0.0, 0.0, 0.0);
    for &(x, y) in z {
        let r = x * x + y * y;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        sxr += x * r;
        syr += y * r;
        sr += r;
    }
    // Normal equations for |z|^2 = 2ax + 2by + d.
    let m = [
        [2.0 * sxx, 2.0 * sxy, sx],
        [2.0 * sxy, 2.0 * syy, sy],
        [2.0 * sx, 2.0 * sy, n],
    ];
    let rhs = [sxr, syr, sr];
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&m);
    let scale = sxx + syy;
    if d.abs() < 1e-12 * scale.max(1e-30).powi(3) {
        return (0.0, 0.0);
    }
    let col = |j: usize| {
        let mut mm = m;
        for i in 0..3 {
            mm[i][j] = rhs[i];
        }
        det3(&mm) / d
    };
    (col(0), col(1))
}

/// Solve a small dense system in place (partial pivoting).
fn solve(a: &mut [Vec<f64>], b: &mut [f64]) -> bool {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).fold(col, |p, r| if a[r][col].abs() > a[p][col].abs() { r } else { p });
        if a[piv][col].abs() < 1e-12 {
            return false;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for c in col + 1..n {
            v -= a[col][c] * b[c];
        }
        b[col] = v / a[col][col];
    }
    true
}

/// Regress out `const + fundamental + second harmonic` at frequency f.
fn remove_tone(signal: &mut [f64], fs: f64, f: f64) {
    let n = signal.len();
    let basis: Vec<[f64; 5]> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let (s1, c1) = (std::f64::consts::TAU * f * t).sin_cos();
            let (s2, c2) = (2.0 * std::f64::consts::TAU * f * t).sin_cos();
            [1.0, c1, s1, c2, s2]
        })
        .collect();
    let mut ata = vec![vec![0.0; 5]; 5];
    let mut atb = vec![0.0; 5];
    for (row, &y) in basis.iter().zip(signal.iter()) {
        for i in 0..5 {
            for j in 0..5 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    if !solve(&mut ata, &mut atb) {
        return;
    }
    for (v, row) in signal.iter_mut().zip(&basis) {
        for i in 0..5 {
            *v -= atb[i] * row[i];
        }
    }
}

/// Estimate heart and respiration rates from one raw window.
pub fn estimate_vitals(cfg: &RadarConfig, w: &CirWindow) -> Result<VitalsEstimate, SimError> {
    let m = cfg.range_bins;
    let frames = w.cir.len() / m;
    if frames < 16 || w.cir.len() % m != 0 {
        return Err(SimError::Validation(format!(
            "window of {} samples too short for {} bins",
            w.cir.len(),
            m
        )));
    }
    // Target bin: largest slow-time variance.
    let mut best = (0usize, -1.0f64);
    for b in 0..m {
        let (mut sr, mut si, mut sq) = (0.0f64, 0.0f64, 0.0f64);
        for t in 0..frames {
            let c = w.cir[t * m + b];
            let (re, im) = (c.re as f64, c.im as f64);
            sr += re;
            si += im;
            sq += re * re + im * im;
        }
        let n = frames as f64;
        let var = sq / n - (sr / n).powi(2) - (si / n).powi(2);
        if var > best.1 {
            best = (b, var);
        }
    }
    let bin = best.0;
    let pts: Vec<(f64, f64)> = (0..frames)
        .map(|t| {
            let c = w.cir[t * m + bin];
            (c.re as f64, c.im as f64)
        })
        .collect();
    let (cx, cy) = circle_centre(&pts);
    // Unwrap the recentred phase.
    let mut phase = Vec::with_capacity(frames);
    let mut prev = 0.0f64;
    let mut offset = 0.0f64;
    for (i, &(x, y)) in pts.iter().enumerate() {
        let raw = (y - cy).atan2(x - cx);
        if i > 0 {
            let mut d = raw - prev;
            while d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
                offset -= std::f64::consts::TAU;
            }
            while d < -std::f64::consts::PI {
                d += std::f64::consts::TAU;
                offset += std::f64::consts::TAU;
            }
        }
        prev = raw;
        phase.push(raw + offset);
    }
    let mean = phase.iter().sum::<f64>() / frames as f64;
    for p in phase.iter_mut() {
        *p -= mean;
    }
    let fs = cfg.fps as f64;
    let f_rr = matched_tone(&phase, fs, RR_BAND_HZ)
        .ok_or_else(|| SimError::Validation("no respiration peak in band".into()))?;
    remove_tone(&mut phase, fs, f_rr);
    let f_hr = band_peak(&phase, fs, HR_BAND_HZ)
        .ok_or_else(|| SimError::Validation("no heart peak in band".into()))?;
    Ok(VitalsEstimate {
        hr_bpm: 60.0 * f_hr,
        rr_bpm: 60.0 * f_rr,
        bin,
    })
}
