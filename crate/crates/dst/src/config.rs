//! Plain-text configuration files and `key=value` overrides.
//!
//! The format is deliberately minimal: one `key=value` per line, `#` starts a
//! comment, blank lines are ignored. Unknown keys are rejected by name and
//! malformed lines are reported with their line number. An empty file (or no
//! file at all) yields the documented defaults.
//!
//! Recognized keys:
//!
//! | key             | default   | meaning                                        |
//! |-----------------|-----------|------------------------------------------------|
//! | `carrier_hz`    | 7.3e9     | radar carrier frequency                        |
//! | `bandwidth_hz`  | 1.4e9     | radar bandwidth (sets range resolution)        |
//! | `fps`           | 150       | frames per second (slow-time rate)             |
//! | `fov_deg`       | 65        | field of view (subjects sit inside fov/2)      |
//! | `range_bins`    | 96        | fast-time samples per frame                    |
//! | `window_s`      | 5         | window width, seconds                          |
//! | `stride_s`      | 5         | window stride, seconds                         |
//! | `downsample`    | 5         | slow-time group-averaging factor               |
//! | `snr_db`        | 15        | noise level (`inf` disables noise)             |
//! | `clutter_scale` | 0.5       | static clutter amplitude (0 disables)          |
//! | `lr`            | 0.001     | Adam learning rate                             |
//! | `batch`         | 40        | windows per optimizer step                     |
//! | `epochs`        | 50        | training epochs                                |
//! | `seed`          | 7         | base training seed                             |
//! | `repeats`       | 5         | training repeats (seed, seed+1, ...)           |
//! | `threshold`     | 0.5       | stress decision threshold                      |
//! | `test_fraction` | 0.2       | random holdout fraction (block-granular)       |
//! | `train_users`   | —         | comma list; switches to a per-user split       |
//! | `test_users`    | —         | comma list; switches to a per-user split       |
//! | `variant`       | full      | model variant (`full`, `no-hr`, ...)           |
//! | `n_cnn`         | 32        | extraction conv filters per stream             |
//! | `n_head`        | 4         | extraction attention heads                     |
//! | `subjects`      | 10        | simulated subjects (one session each)          |
//! | `sim_seed`      | 1         | base simulation seed                           |
//! | `sweep_sessions`| 4         | sessions per swept value                       |

use std::path::Path;

use crate::model::DstVariant;
use crate::radar::RadarConfig;
use crate::train::{SplitSpec, TrainConfig};

/// Everything the command-line tool can be told through a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub radar: RadarConfig,
    pub train: TrainConfig,
    /// Simulated subjects for `simulate`/`train` corpora (one session each).
    pub subjects: usize,
    /// Base seed for simulation (session s uses `sim_seed + s`).
    pub sim_seed: u64,
    /// Sessions generated per swept value in distance/angle sweeps.
    pub sweep_sessions: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            radar: RadarConfig::default(),
            train: TrainConfig::default(),
            subjects: 10,
            sim_seed: 1,
            sweep_sessions: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("override `{raw}`: {msg}")]
    Override { raw: String, msg: String },
}

/// Parses a config file. An empty file yields `AppConfig::default()`.
pub fn load_config(path: &Path) -> Result<AppConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut cfg = AppConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Line {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
        set_key(&mut cfg, key.trim(), value.trim())
            .map_err(|msg| ConfigError::Line { line: i + 1, msg })?;
    }
    Ok(cfg)
}

/// Applies `key=value` overrides on top of an already loaded config.
pub fn apply_overrides(cfg: &mut AppConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for raw in overrides {
        let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::Override {
            raw: raw.clone(),
            msg: "expected key=value".to_string(),
        })?;
        set_key(cfg, key.trim(), value.trim()).map_err(|msg| ConfigError::Override {
            raw: raw.clone(),
            msg,
        })?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for {key}: {e}"))
}

fn parse_users(key: &str, value: &str) -> Result<Vec<u32>, String> {
    value
        .split(',')
        .map(|s| parse::<u32>(key, s.trim()))
        .collect()
}

enum Side {
    Train,
    Test,
}

fn set_users(split: &mut SplitSpec, side: Side, users: Vec<u32>) {
    if let SplitSpec::PerUser { train_users, test_users } = split {
        match side {
            Side::Train => *train_users = users,
            Side::Test => *test_users = users,
        }
    } else {
        *split = match side {
            Side::Train => SplitSpec::PerUser { train_users: users, test_users: vec![] },
            Side::Test => SplitSpec::PerUser { train_users: vec![], test_users: users },
        };
    }
}

/// Applies one key. Both the file loader and the override flag funnel through
/// here, so the two paths accept exactly the same vocabulary.
fn set_key(cfg: &mut AppConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "carrier_hz" => cfg.radar.carrier_hz = parse(key, value)?,
        "bandwidth_hz" => cfg.radar.bandwidth_hz = parse(key, value)?,
        "fps" => cfg.radar.fps = parse(key, value)?,
        "fov_deg" => cfg.radar.fov_deg = parse(key, value)?,
        "range_bins" => cfg.radar.range_bins = parse(key, value)?,
        "window_s" => cfg.radar.window_s = parse(key, value)?,
        "stride_s" => cfg.radar.stride_s = parse(key, value)?,
        "downsample" => cfg.radar.slow_time_downsample = parse(key, value)?,
        "snr_db" => cfg.radar.snr_db = parse(key, value)?,
        "clutter_scale" => cfg.radar.clutter_scale = parse(key, value)?,
        "lr" => cfg.train.lr = parse(key, value)?,
        "batch" => cfg.train.batch_size = parse(key, value)?,
        "epochs" => cfg.train.epochs = parse(key, value)?,
        "seed" => cfg.train.seed = parse(key, value)?,
        "repeats" => cfg.train.repeats = parse(key, value)?,
        "threshold" => cfg.train.threshold = parse(key, value)?,
        "test_fraction" => {
            cfg.train.split = SplitSpec::Random { test_fraction: parse(key, value)? }
        }
        "train_users" => set_users(&mut cfg.train.split, Side::Train, parse_users(key, value)?),
        "test_users" => set_users(&mut cfg.train.split, Side::Test, parse_users(key, value)?),
        "variant" => cfg.train.model.variant = parse::<DstVariant>(key, value)?,
        "n_cnn" => cfg.train.model.n_cnn = parse(key, value)?,
        "n_head" => cfg.train.model.n_head = parse(key, value)?,
        "subjects" => cfg.subjects = parse(key, value)?,
        "sim_seed" => cfg.sim_seed = parse(key, value)?,
        "sweep_sessions" => cfg.sweep_sessions = parse(key, value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_documented_defaults() {
        let f = write_cfg("");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch_size, 40);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.radar.fps, 150);
    }

    #[test]
    fn comments_blanks_and_whitespace_are_tolerated() {
        let f = write_cfg("# radar\n\n  lr = 0.01  # tuned\nsnr_db=inf\n");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert!(cfg.radar.snr_db.is_infinite());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let f = write_cfg("lr=0.01\nfrobnicate=1\n");
        let err = load_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("unknown key `frobnicate`"), "{err}");
    }

    #[test]
    fn malformed_values_report_line_and_key() {
        let f = write_cfg("\n\nlr=abc\n");
        let err = load_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("for lr"), "{err}");

        let f = write_cfg("just words\n");
        let err = load_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("key=value"), "{err}");
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let f = write_cfg("lr=0.05\nepochs=3\n");
        let mut cfg = load_config(f.path()).unwrap();
        apply_overrides(&mut cfg, &["lr=0.01".into(), "variant=no-hr".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.model.variant, DstVariant::NoHr);

        let err = apply_overrides(&mut cfg, &["lr".into()]).unwrap_err().to_string();
        assert!(err.contains("`lr`") && err.contains("key=value"), "{err}");
        let err = apply_overrides(&mut cfg, &["zap=1".into()]).unwrap_err().to_string();
        assert!(err.contains("unknown key `zap`"), "{err}");
    }

    #[test]
    fn user_lists_switch_to_a_per_user_split() {
        let f = write_cfg("train_users=0,1, 2\ntest_users=3\n");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(
            cfg.train.split,
            SplitSpec::PerUser { train_users: vec![0, 1, 2], test_users: vec![3] }
        );
        // Last writer wins between the two split styles.
        let f = write_cfg("train_users=0\ntest_users=1\ntest_fraction=0.3\n");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg.train.split, SplitSpec::Random { test_fraction: 0.3 });
    }

    #[test]
    fn missing_file_is_a_single_line_error() {
        let err = load_config(Path::new("/nonexistent/nope.cfg")).unwrap_err().to_string();
        assert!(err.contains("cannot read config"), "{err}");
        assert!(!err.contains('\n'));
    }
}
