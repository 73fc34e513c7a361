//! Command-line entry point: simulation, training, evaluation, streaming
//! trace output, ablations, sweeps, and the gradient self-check.
//!
//! Exit statuses: 0 success, 1 runtime error, 2 usage error. Every error path
//! prints a single-line diagnostic on stderr. Data outputs (JSON, CSV) go to
//! stdout unless `--out` redirects them into files, so progress notes are
//! kept on stderr.

use std::collections::BTreeMap;
use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{apply_overrides, load_config, AppConfig};
use crate::model::{DstModel, DstVariant, WindowFeatures};
use crate::radar::{
    read_dataset, synth_session, CirWindow, DatasetWriter, RadarConfig, Session,
};
use crate::tensor::{load_checkpoint, save_checkpoint, standard_op_checks, ParamStore};
use crate::train::{
    ablation_csv, all_blocks, corpus_from_sessions, evaluate_blocks, run_ablation, run_sweep,
    simulate_corpus, sweep_csv, train, Corpus, SweepAxis,
};

// ── Argument parsing ──

#[derive(Parser)]
#[command(
    name = "dst",
    about = "Radar stress-tracing pipeline: simulate, train, evaluate, trace",
    disable_help_subcommand = true
)]
struct Argv {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate labeled radar sessions into a dataset file
    Simulate {
        /// Config file (key=value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (receives dataset.dstc)
        #[arg(long)]
        out: PathBuf,
        /// Config override, e.g. --override subjects=2 (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the network; writes checkpoint and report when --out is given
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train on an existing dataset instead of simulating one
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (checkpoint.dstw, report.json, report.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset; prints metrics JSON
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Replay a dataset chronologically, streaming the stress trace as CSV
    Trace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (receives trace.csv); default streams to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train every model variant and report the comparison table
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (receives ablation.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Retrain across one swept factor and report the curve
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus for architecture sweeps (n_cnn/n_head); optional otherwise
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Swept factor: distance|angle|n_cnn|n_head
        #[arg(long)]
        factor: SweepAxis,
        /// Comma-separated factor values, e.g. 0.5,1.5,2.5
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Output directory (receives sweep.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check analytic gradients of every op and the whole network
    Gradcheck,
}

/// Which subcommand was requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Eval,
    Trace,
    Ablate,
    Sweep,
    Gradcheck,
}

/// Fully parsed command line: one command plus its paths and overrides.
#[derive(Debug)]
pub struct CliConfig {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Sweep-only: the factor and its values.
    pub factor: Option<SweepAxis>,
    pub values: Vec<f64>,
}

/// A rejected command line: the message to print and the exit status.
/// `code` 0 carries help/version text bound for stdout.
#[derive(Debug)]
pub struct ParseFailure {
    pub code: i32,
    pub message: String,
}

/// Parses arguments (program name excluded). Unknown flags or commands fail
/// with a usage error, exit status 2.
pub fn parse_cli(args: impl IntoIterator<Item = String>) -> Result<CliConfig, ParseFailure> {
    let argv = std::iter::once("dst".to_string()).chain(args);
    let parsed = Argv::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            ParseFailure { code: 0, message: e.render().to_string() }
        }
        _ => ParseFailure {
            code: 2,
            message: e
                .render()
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("error: invalid arguments")
                .to_string(),
        },
    })?;

    let mut cli = CliConfig {
        command: Command::Gradcheck,
        config_path: None,
        dataset_path: None,
        checkpoint_path: None,
        output_dir: None,
        overrides: Vec::new(),
        factor: None,
        values: Vec::new(),
    };
    match parsed.cmd {
        Cmd::Simulate { config, out, overrides } => {
            cli.command = Command::Simulate;
            cli.config_path = config;
            cli.output_dir = Some(out);
            cli.overrides = overrides;
        }
        Cmd::Train { config, dataset, out, overrides } => {
            cli.command = Command::Train;
            cli.config_path = config;
            cli.dataset_path = dataset;
            cli.output_dir = out;
            cli.overrides = overrides;
        }
        Cmd::Eval { config, dataset, checkpoint, out, overrides } => {
            cli.command = Command::Eval;
            cli.config_path = config;
            cli.dataset_path = Some(dataset);
            cli.checkpoint_path = Some(checkpoint);
            cli.output_dir = out;
            cli.overrides = overrides;
        }
        Cmd::Trace { config, dataset, checkpoint, out, overrides } => {
            cli.command = Command::Trace;
            cli.config_path = config;
            cli.dataset_path = Some(dataset);
            cli.checkpoint_path = Some(checkpoint);
            cli.output_dir = out;
            cli.overrides = overrides;
        }
        Cmd::Ablate { config, dataset, out, overrides } => {
            cli.command = Command::Ablate;
            cli.config_path = config;
            cli.dataset_path = dataset;
            cli.output_dir = out;
            cli.overrides = overrides;
        }
        Cmd::Sweep { config, dataset, factor, values, out, overrides } => {
            cli.command = Command::Sweep;
            cli.config_path = config;
            cli.dataset_path = dataset;
            cli.output_dir = out;
            cli.overrides = overrides;
            cli.factor = Some(factor);
            cli.values = values;
        }
        Cmd::Gradcheck => cli.command = Command::Gradcheck,
    }
    Ok(cli)
}

/// Entry point used by the binary. Returns the process exit status.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match parse_cli(args) {
        Ok(cli) => cli,
        Err(pf) => {
            if pf.code == 0 {
                println!("{}", pf.message);
            } else {
                eprintln!("{}", pf.message);
            }
            return pf.code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

type RunResult = Result<i32, Box<dyn Error>>;

fn dispatch(cli: &CliConfig) -> RunResult {
    // Input paths are validated before any heavy work starts.
    for path in [&cli.config_path, &cli.dataset_path, &cli.checkpoint_path]
        .into_iter()
        .flatten()
    {
        if !path.exists() {
            return Err(format!("no such file: {}", path.display()).into());
        }
    }
    let mut cfg = match &cli.config_path {
        Some(p) => load_config(p)?,
        None => AppConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;

    match cli.command {
        Command::Simulate => cmd_simulate(cli, &cfg),
        Command::Train => cmd_train(cli, &cfg),
        Command::Eval => cmd_eval(cli, &cfg),
        Command::Trace => cmd_trace(cli, &cfg),
        Command::Ablate => cmd_ablate(cli, &cfg),
        Command::Sweep => cmd_sweep(cli, &cfg),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

// ── Shared plumbing ──

fn out_dir(cli: &CliConfig) -> Result<Option<&Path>, Box<dyn Error>> {
    match &cli.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Box<dyn Error>> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Regroups a dataset's flat window stream into per-session chronology.
fn sessions_from_windows(windows: Vec<CirWindow>) -> Vec<Session> {
    let mut by_session: BTreeMap<u32, Vec<CirWindow>> = BTreeMap::new();
    for w in windows {
        by_session.entry(w.session_id).or_default().push(w);
    }
    by_session
        .into_iter()
        .map(|(session_id, mut windows)| {
            windows.sort_by(|a, b| a.t0.total_cmp(&b.t0));
            Session { total_windows: windows.len(), excluded: 0, session_id, windows }
        })
        .collect()
}

/// Corpus from `--dataset` when given (the file's own radar geometry wins),
/// otherwise freshly simulated from the config.
fn load_corpus(cli: &CliConfig, cfg: &AppConfig, with_estimates: bool) -> Result<Corpus, Box<dyn Error>> {
    match &cli.dataset_path {
        Some(path) => {
            let (radar, windows) = read_dataset(path)?;
            let sessions = sessions_from_windows(windows);
            eprintln!(
                "loaded {} sessions from {}",
                sessions.len(),
                path.display()
            );
            Ok(corpus_from_sessions(&radar, &sessions, with_estimates)?)
        }
        None => {
            eprintln!("simulating {} subjects (seed {})", cfg.subjects, cfg.sim_seed);
            Ok(simulate_corpus(&cfg.radar, cfg.subjects, cfg.sim_seed, with_estimates)?)
        }
    }
}

/// Rebuilds the configured architecture and loads a checkpoint into it.
fn restore_model(
    cfg: &AppConfig,
    radar: &RadarConfig,
    checkpoint: &Path,
) -> Result<(ParamStore<f32>, DstModel), Box<dyn Error>> {
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = DstModel::new(&mut store, &mut rng, cfg.train.model, radar)?;
    load_checkpoint(&mut store, checkpoint)?;
    Ok((store, model))
}

fn needs_estimates(cfg: &AppConfig) -> bool {
    cfg.train.model.variant == DstVariant::SpectralSem
}

use rand::SeedableRng;

// ── Commands ──

fn cmd_simulate(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    let dir = out_dir(cli)?.expect("simulate requires --out");
    let path = dir.join("dataset.dstc");
    let mut writer = DatasetWriter::create(&path, &cfg.radar)?;
    let mut total = 0u32;
    for s in 0..cfg.subjects {
        let session = synth_session(&cfg.radar, s as u32, cfg.sim_seed.wrapping_add(s as u64))?;
        for w in &session.windows {
            writer.add(w)?;
            total += 1;
        }
        eprintln!(
            "session {s}: {} labeled windows ({} neutral excluded)",
            session.windows.len(),
            session.excluded
        );
    }
    let written = writer.finish()?;
    debug_assert_eq!(written, total);
    eprintln!("wrote {} ({total} windows)", path.display());
    Ok(0)
}

fn cmd_train(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    let corpus = load_corpus(cli, cfg, needs_estimates(cfg))?;
    let outcome = train(&corpus, &cfg.train)?;
    let json = outcome.report.to_json();
    println!("{json}");
    if let Some(dir) = out_dir(cli)? {
        save_checkpoint(&outcome.store, &dir.join("checkpoint.dstw"))?;
        eprintln!("wrote {}", dir.join("checkpoint.dstw").display());
        write_text(dir, "report.json", &json)?;
        write_text(dir, "report.csv", &outcome.report.to_csv())?;
    }
    Ok(0)
}

fn cmd_eval(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    let corpus = load_corpus(cli, cfg, needs_estimates(cfg))?;
    let checkpoint = cli.checkpoint_path.as_deref().expect("eval requires --checkpoint");
    let (store, model) = restore_model(cfg, &corpus.radar, checkpoint)?;
    let blocks = all_blocks(&corpus);
    let metrics = evaluate_blocks(&model, &store, &corpus, &blocks, cfg.train.threshold)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    println!("{json}");
    if let Some(dir) = out_dir(cli)? {
        write_text(dir, "eval.json", &json)?;
    }
    Ok(0)
}

fn cmd_trace(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    let dataset = cli.dataset_path.as_deref().expect("trace requires --dataset");
    let checkpoint = cli.checkpoint_path.as_deref().expect("trace requires --checkpoint");
    let (radar, windows) = read_dataset(dataset)?;
    let sessions = sessions_from_windows(windows);
    let (store, model) = restore_model(cfg, &radar, checkpoint)?;

    let stdout = std::io::stdout();
    let mut sink: Box<dyn Write> = match out_dir(cli)? {
        Some(dir) => {
            let path = dir.join("trace.csv");
            let file = std::fs::File::create(&path)
                .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            eprintln!("writing {}", path.display());
            Box::new(std::io::BufWriter::new(file))
        }
        None => Box::new(stdout.lock()),
    };

    // One row per window, flushed as produced; the recurrent state restarts
    // at each session boundary.
    writeln!(sink, "step_index,timestamp_s,prob_stress,state,label_if_known")?;
    let threshold = cfg.train.threshold;
    let mut step_index = 0usize;
    for session in &sessions {
        let mut carried: Option<(Vec<f32>, Vec<f32>)> = None;
        for w in &session.windows {
            let feat: WindowFeatures<f32> =
                WindowFeatures::from_window(&radar, session.session_id, w, false)?;
            let prob = model.trace_one(&store, &feat, &mut carried)?;
            let state = u8::from(prob >= threshold);
            writeln!(sink, "{step_index},{},{prob},{state},{}", w.t0, w.label)?;
            sink.flush()?;
            step_index += 1;
        }
    }
    eprintln!("traced {step_index} windows across {} sessions", sessions.len());
    Ok(0)
}

fn cmd_ablate(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    // The estimator-driven variant sits in the table, so estimates are
    // always prepared here.
    let corpus = load_corpus(cli, cfg, true)?;
    let rows = run_ablation(&corpus, &cfg.train)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out_dir(cli)? {
        write_text(dir, "ablation.csv", &csv)?;
    }
    Ok(0)
}

fn cmd_sweep(cli: &CliConfig, cfg: &AppConfig) -> RunResult {
    let axis = cli.factor.expect("sweep requires --factor");
    // Architecture sweeps retrain on a corpus; factor sweeps simulate their
    // own matched datasets inside the runner.
    let corpus = match axis {
        SweepAxis::NCnn | SweepAxis::NHead => Some(load_corpus(cli, cfg, needs_estimates(cfg))?),
        SweepAxis::Distance | SweepAxis::Angle => None,
    };
    let points = run_sweep(
        &cfg.radar,
        corpus.as_ref(),
        axis,
        &cli.values,
        cfg.sweep_sessions,
        cfg.sim_seed,
        &cfg.train,
    )?;
    let csv = sweep_csv(axis, &points);
    print!("{csv}");
    if let Some(dir) = out_dir(cli)? {
        write_text(dir, "sweep.csv", &csv)?;
    }
    Ok(0)
}

fn cmd_gradcheck() -> RunResult {
    let mut failures = 0usize;
    let mut checks = 0usize;
    for (name, result) in standard_op_checks() {
        checks += 1;
        match result {
            Ok(r) if r.pass() => println!(
                "PASS {name:<14} max rel err {:.3e} ({} coords)",
                r.max_rel_err, r.coords_checked
            ),
            Ok(r) => {
                failures += 1;
                println!(
                    "FAIL {name:<14} max rel err {:.3e} at {}[{}] (tol {:.1e})",
                    r.max_rel_err, r.worst_leaf, r.worst_coord, r.tol
                );
            }
            Err(e) => {
                failures += 1;
                println!("FAIL {name:<14} {e}");
            }
        }
    }
    checks += 1;
    match crate::model::composition_grad_check(2, Some(1)) {
        Ok(r) if r.pass() => println!(
            "PASS {:<14} max rel err {:.3e} ({} coords)",
            "composition", r.max_rel_err, r.coords_checked
        ),
        Ok(r) => {
            failures += 1;
            println!(
                "FAIL {:<14} max rel err {:.3e} at {}[{}] (tol {:.1e})",
                "composition", r.max_rel_err, r.worst_leaf, r.worst_coord, r.tol
            );
        }
        Err(e) => {
            failures += 1;
            println!("FAIL {:<14} {e}", "composition");
        }
    }
    if failures == 0 {
        println!("all {checks} checks passed");
        Ok(0)
    } else {
        Err(format!("{failures} of {checks} gradient checks failed").into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> impl Iterator<Item = String> + '_ {
        s.split_whitespace().map(str::to_string)
    }

    #[test]
    fn subcommands_parse_into_one_command_each() {
        let cli = parse_cli(args("simulate --config sim.cfg --out data/")).unwrap();
        assert_eq!(cli.command, Command::Simulate);
        assert_eq!(cli.config_path.as_deref(), Some(Path::new("sim.cfg")));
        assert_eq!(cli.output_dir.as_deref(), Some(Path::new("data/")));

        let cli = parse_cli(args("train --override lr=0.01")).unwrap();
        assert_eq!(cli.command, Command::Train);
        let mut cfg = AppConfig::default();
        apply_overrides(&mut cfg, &cli.overrides).unwrap();
        assert_eq!(cfg.train.lr, 0.01);

        let cli =
            parse_cli(args("sweep --factor distance --values 0.5,1.5,2.5")).unwrap();
        assert_eq!(cli.command, Command::Sweep);
        assert_eq!(cli.factor, Some(SweepAxis::Distance));
        assert_eq!(cli.values, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn unknown_commands_and_flags_are_usage_errors() {
        let pf = parse_cli(args("frobnicate")).unwrap_err();
        assert_eq!(pf.code, 2);
        assert!(pf.message.contains("frobnicate"), "{}", pf.message);
        assert!(!pf.message.contains('\n'));

        let pf = parse_cli(args("train --frobnicate")).unwrap_err();
        assert_eq!(pf.code, 2);
        assert!(!pf.message.contains('\n'));

        let pf = parse_cli(std::iter::empty()).unwrap_err();
        assert_eq!(pf.code, 2);
    }

    #[test]
    fn help_is_not_an_error() {
        let pf = parse_cli(args("--help")).unwrap_err();
        assert_eq!(pf.code, 0);
        assert!(pf.message.contains("simulate"));
    }

    #[test]
    fn missing_required_flags_are_usage_errors() {
        for line in ["simulate", "eval --dataset d.dstc", "sweep --factor distance"] {
            let pf = parse_cli(args(line)).unwrap_err();
            assert_eq!(pf.code, 2, "{line}: {}", pf.message);
        }
    }

    #[test]
    fn missing_input_paths_fail_before_work_starts() {
        let cli = parse_cli(args("train --config /no/such/file.cfg")).unwrap();
        let err = dispatch(&cli).unwrap_err().to_string();
        assert!(err.contains("no such file"), "{err}");
    }
}
