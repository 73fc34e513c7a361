//! Dataset persistence.
//!
//! Layout, all little-endian: magic "DSTC", version u16, the radar config
//! (carrier f64, bandwidth f64, fps u32, fov f64, range_bins u32, window_s
//! f64, stride_s f64, slow_time_downsample u32, snr_db f64, clutter_scale
//! f64), window count u32, then per window: label u8, session_id u32, t0
//! f64, the truth record as eight f64 (hr, rr, hr_amp, rr_amp, distance,
//! angle, motion_level, stressed as 0/1), and the CIR as interleaved re/im
//! f32 row-major [frames x range_bins]. A sidecar manifest is plain
//! `key=value` text. Round-trips are byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{CirWindow, RadarConfig, SimError, SubjectState, C32};

const MAGIC: &[u8; 4] = b"DSTC";
const VERSION: u16 = 1;

// ── Writing ──

/// Incremental writer so multi-gigabyte corpora never sit in memory.
pub struct DatasetWriter {
    out: BufWriter<File>,
    cfg: RadarConfig,
    count: u32,
}

impl DatasetWriter {
    pub fn create(path: &Path, cfg: &RadarConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&cfg.carrier_hz.to_le_bytes())?;
        out.write_all(&cfg.bandwidth_hz.to_le_bytes())?;
        out.write_all(&(cfg.fps as u32).to_le_bytes())?;
        out.write_all(&cfg.fov_deg.to_le_bytes())?;
        out.write_all(&(cfg.range_bins as u32).to_le_bytes())?;
        out.write_all(&cfg.window_s.to_le_bytes())?;
        out.write_all(&cfg.stride_s.to_le_bytes())?;
        out.write_all(&(cfg.slow_time_downsample as u32).to_le_bytes())?;
        out.write_all(&cfg.snr_db.to_le_bytes())?;
        out.write_all(&cfg.clutter_scale.to_le_bytes())?;
        // Count is patched on finish.
        out.write_all(&0u32.to_le_bytes())?;
        Ok(DatasetWriter {
            out,
            cfg: cfg.clone(),
            count: 0,
        })
    }

    pub fn add(&mut self, w: &CirWindow) -> Result<(), SimError> {
        let expect = self.cfg.frames_per_window() * self.cfg.range_bins;
        if w.cir.len() != expect {
            return Err(SimError::Format(format!(
                "window has {} samples, config implies {}",
                w.cir.len(),
                expect
            )));
        }
        self.out.write_all(&[w.label])?;
        self.out.write_all(&w.session_id.to_le_bytes())?;
        self.out.write_all(&w.t0.to_le_bytes())?;
        let t = &w.truth;
        for v in [
            t.hr_bpm,
            t.rr_bpm,
            t.hr_amp_m,
            t.rr_amp_m,
            t.distance_m,
            t.angle_deg,
            t.motion_level,
            t.stressed as u8 as f64,
        ] {
            self.out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(w.cir.len() * 8);
        for c in &w.cir {
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u32, SimError> {
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| SimError::Format(e.to_string()))?;
        file.seek(SeekFrom::Start((MAGIC.len() + 2 + 8 * 7 + 4 * 3) as u64))?;
        file.write_all(&self.count.to_le_bytes())?;
        file.sync_all()?;
        Ok(self.count)
    }
}

/// Write a whole in-memory dataset in one call.
pub fn write_dataset(
    path: &Path,
    cfg: &RadarConfig,
    windows: &[CirWindow],
) -> Result<(), SimError> {
    let mut w = DatasetWriter::create(path, cfg)?;
    for win in windows {
        w.add(win)?;
    }
    w.finish()?;
    Ok(())
}

/// Plain `key=value` sidecar, one entry per line, keys in given order.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<(), SimError> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

// ── Reading ──

#[derive(Debug)]
pub struct DatasetReader {
    inp: BufReader<File>,
    pub cfg: RadarConfig,
    pub count: u32,
    read: u32,
}

fn take<const N: usize>(inp: &mut impl Read, what: &str) -> Result<[u8; N], SimError> {
    let mut buf = [0u8; N];
    inp.read_exact(&mut buf)
        .map_err(|_| SimError::Format(format!("truncated while reading {what}")))?;
    Ok(buf)
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, SimError> {
        let mut inp = BufReader::new(File::open(path)?);
        if &take::<4>(&mut inp, "magic")? != MAGIC {
            return Err(SimError::Format("bad magic, not a dataset file".into()));
        }
        let version = u16::from_le_bytes(take(&mut inp, "version")?);
        if version != VERSION {
            return Err(SimError::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let cfg = RadarConfig {
            carrier_hz: f64::from_le_bytes(take(&mut inp, "carrier")?),
            bandwidth_hz: f64::from_le_bytes(take(&mut inp, "bandwidth")?),
            fps: u32::from_le_bytes(take(&mut inp, "fps")?) as usize,
            fov_deg: f64::from_le_bytes(take(&mut inp, "fov")?),
            range_bins: u32::from_le_bytes(take(&mut inp, "range_bins")?) as usize,
            window_s: f64::from_le_bytes(take(&mut inp, "window_s")?),
            stride_s: f64::from_le_bytes(take(&mut inp, "stride_s")?),
            slow_time_downsample: u32::from_le_bytes(take(&mut inp, "downsample")?) as usize,
            snr_db: f64::from_le_bytes(take(&mut inp, "snr_db")?),
            clutter_scale: f64::from_le_bytes(take(&mut inp, "clutter_scale")?),
        };
        cfg.validate()?;
        let count = u32::from_le_bytes(take(&mut inp, "count")?);
        Ok(DatasetReader {
            inp,
            cfg,
            count,
            read: 0,
        })
    }

    /// Next window, or None past the recorded count.
    pub fn next_window(&mut self) -> Result<Option<CirWindow>, SimError> {
        if self.read == self.count {
            // The count must be exact: trailing bytes are corruption.
            let mut probe = [0u8; 1];
            if self.inp.read(&mut probe)? != 0 {
                return Err(SimError::Format("trailing bytes after final window".into()));
            }
            return Ok(None);
        }
        let label = take::<1>(&mut self.inp, "label")?[0];
        if label > 1 {
            return Err(SimError::Format(format!("label {label} not 0 or 1")));
        }
        let session_id = u32::from_le_bytes(take(&mut self.inp, "session_id")?);
        let t0 = f64::from_le_bytes(take(&mut self.inp, "t0")?);
        let mut t = [0f64; 8];
        for (i, v) in t.iter_mut().enumerate() {
            *v = f64::from_le_bytes(take(&mut self.inp, &format!("truth[{i}]"))?);
        }
        let truth = SubjectState {
            hr_bpm: t[0],
            rr_bpm: t[1],
            hr_amp_m: t[2],
            rr_amp_m: t[3],
            distance_m: t[4],
            angle_deg: t[5],
            motion_level: t[6],
            stressed: t[7] != 0.0,
        };
        let n = self.cfg.frames_per_window() * self.cfg.range_bins;
        let mut raw = vec![0u8; n * 8];
        self.inp
            .read_exact(&mut raw)
            .map_err(|_| SimError::Format(format!("truncated CIR in window {}", self.read)))?;
        let cir: Vec<C32> = raw
            .chunks_exact(8)
            .map(|b| {
                C32::new(
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                    f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                )
            })
            .collect();
        self.read += 1;
        Ok(Some(CirWindow {
            cir,
            label,
            truth,
            session_id,
            t0,
        }))
    }
}

/// Read a whole dataset into memory.
pub fn read_dataset(path: &Path) -> Result<(RadarConfig, Vec<CirWindow>), SimError> {
    let mut r = DatasetReader::open(path)?;
    let mut windows = Vec::with_capacity(r.count as usize);
    while let Some(w) = r.next_window()? {
        windows.push(w);
    }
    Ok((r.cfg.clone(), windows))
}

#[cfg(test)]
mod tests {
    use super::super::synth_window;
    use super::*;

    fn tiny_cfg() -> RadarConfig {
        RadarConfig {
            fps: 50,
            range_bins: 32,
            window_s: 2.0,
            stride_s: 2.0,
            slow_time_downsample: 5,
            ..RadarConfig::default()
        }
    }

    fn some_windows(cfg: &RadarConfig) -> Vec<CirWindow> {
        let subj = SubjectState {
            hr_bpm: 70.0,
            rr_bpm: 14.0,
            hr_amp_m: 4e-4,
            rr_amp_m: 6e-3,
            distance_m: 1.0,
            angle_deg: 5.0,
            motion_level: 0.2,
            stressed: false,
        };
        (0..3)
            .map(|i| {
                let mut w = synth_window(cfg, &subj, i).unwrap();
                w.session_id = 9;
                w.t0 = i as f64 * 2.0;
                w.label = (i % 2) as u8;
                w
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let windows = some_windows(&cfg);
        let p1 = dir.path().join("a.dstc");
        let p2 = dir.path().join("b.dstc");
        write_dataset(&p1, &cfg, &windows).unwrap();
        let (cfg2, back) = read_dataset(&p1).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.len(), windows.len());
        write_dataset(&p2, &cfg2, &back).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn truth_and_samples_survive_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let windows = some_windows(&cfg);
        let p = dir.path().join("d.dstc");
        write_dataset(&p, &cfg, &windows).unwrap();
        let (_, back) = read_dataset(&p).unwrap();
        for (a, b) in windows.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let windows = some_windows(&cfg);
        let p = dir.path().join("t.dstc");
        write_dataset(&p, &cfg, &windows).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.dstc");
        std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        let mut r = DatasetReader::open(&cut).unwrap();
        let mut last = Ok(None);
        for _ in 0..=r.count {
            last = r.next_window();
            if last.is_err() {
                break;
            }
        }
        let msg = format!("{}", last.unwrap_err());
        assert!(msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dstc");
        std::fs::write(&p, b"NOPEnope").unwrap();
        let err = DatasetReader::open(&p).unwrap_err();
        assert!(format!("{err}").contains("magic"));
    }

    #[test]
    fn manifest_is_plain_ordered_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.manifest");
        write_manifest(
            &p,
            &[
                ("seed".into(), "42".into()),
                ("sessions".into(), "10".into()),
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "seed=42\nsessions=10\n");
    }
}
