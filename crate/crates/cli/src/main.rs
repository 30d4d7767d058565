//! Command-line front end for the pilot-wave exchange simulator.
//!
//! Subcommands:
//! - `run`: seeded ensemble of measurement-protocol trajectories, with a
//!   JSON/CSV output bundle and post-run invariant checks.
//! - `bell-expand`: expand an internal-state expression over a product Bell
//!   basis and print the coefficient table.
//! - `equivariance`: check that Born-distributed trajectories stay
//!   Born-distributed under free packet spreading.
//! - `recombine`: run the pointer-recombination scenario and report whether
//!   the product form returns and the spin outcomes decorrelate.
//!
//! Exit codes: 0 success, 1 run or invariant failure, 2 usage or config
//! error. Given the same config bytes, seed, and version, every output file
//! is byte-identical across invocations.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pilotwave::guidance::equivariance_test;
use pilotwave::notation::{format_amplitude, parse_state, render_factored};
use pilotwave::packet::{GaussianPacket, PhysicalParams};
use pilotwave::protocol::{recombination_check, PreparedScenario, ProtocolError, StatsReport};
use pilotwave::spin::{bell_decompose, SlotId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{builtin, parse_config, LoadedConfig, BUILTIN_CONFIGS};
use output::{
    resolve_out_dir, sha256_hex, write_histogram_csv, write_json, write_manifest,
    write_runs_jsonl, write_trajectories_csv, Manifest,
};

#[derive(Parser)]
#[command(
    name = "pilotwave",
    version,
    about = "Deterministic pilot-wave simulator of the entanglement-exchange protocol"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble of protocol trajectories and write an output bundle.
    Run(RunArgs),
    /// Expand a spin-state expression over a product Bell basis.
    BellExpand(BellExpandArgs),
    /// Check that Born-distributed trajectories stay Born-distributed.
    Equivariance(EquivarianceArgs),
    /// Run the pointer-recombination scenario and check its assertions.
    Recombine(RecombineArgs),
}

/// Failures split by exit code: usage/config problems exit 2, everything
/// that went wrong while (or after) running exits 1.
enum CliError {
    Usage(String),
    Run(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::BellExpand(args) => cmd_bell_expand(args),
        Command::Equivariance(args) => cmd_equivariance(args),
        Command::Recombine(args) => cmd_recombine(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Config loading shared by `run` and `recombine`

struct ConfigSource {
    loaded: LoadedConfig,
    /// The path as given, or `builtin:<name>`.
    label: String,
    /// SHA-256 of the exact config bytes.
    sha256: String,
}

fn load_config(arg: &str) -> Result<ConfigSource, CliError> {
    let path = Path::new(arg);
    let (text, label) = if path.is_file() {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config `{arg}`: {e}")))?;
        (text, arg.to_string())
    } else if let Some(text) = builtin(arg) {
        (text.to_string(), format!("builtin:{arg}"))
    } else {
        let names: Vec<&str> = BUILTIN_CONFIGS.iter().map(|(n, _)| *n).collect();
        return Err(CliError::Usage(format!(
            "config `{arg}` is neither a readable file nor a bundled config \
             (bundled: {})",
            names.join(", ")
        )));
    };
    let sha256 = sha256_hex(text.as_bytes());
    let loaded = parse_config(&text)
        .map_err(|e| CliError::Usage(format!("config `{label}`: {e}")))?;
    Ok(ConfigSource {
        loaded,
        label,
        sha256,
    })
}

fn write_failed(e: std::io::Error) -> CliError {
    CliError::Run(format!("writing outputs failed: {e}"))
}

// ---------------------------------------------------------------------------
// run

#[derive(Args)]
struct RunArgs {
    /// Config file path, or the name of a bundled config.
    #[arg(default_value = "exchange_default")]
    config: String,
    /// Base seed; per-run seeds are mixed from it (see docs/formats.md).
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size; must be at least 1.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory [default: config `[output] dir`, then
    /// $PILOTWAVE_OUT_DIR, then ./pilotwave-out].
    #[arg(long)]
    out_dir: Option<String>,
    /// Record a thinned trajectory for the first N runs.
    #[arg(long)]
    trajectories: Option<usize>,
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let source = load_config(&args.config)?;
    let mut scenario = source.loaded.scenario.clone();
    if let Some(seed) = args.seed {
        scenario.base_seed = seed;
    }
    if let Some(runs) = args.runs {
        scenario.n_runs = runs;
    }
    if let Some(n) = args.trajectories {
        scenario.trajectory_runs = n;
    }
    if scenario.n_runs == 0 {
        return Err(CliError::Usage("at least one run is required".into()));
    }
    let dir = resolve_out_dir(args.out_dir.as_deref(), source.loaded.output_dir.as_deref());

    let prepared = scenario
        .prepare()
        .map_err(|e| CliError::Usage(format!("config `{}`: {e}", source.label)))?;
    let (records, stats) = prepared
        .run_ensemble()
        .map_err(|e| CliError::Run(e.to_string()))?;

    let mut outputs = vec!["runs.jsonl".to_string(), "stats.json".to_string()];
    write_json(&dir, "stats.json", &stats).map_err(write_failed)?;
    write_runs_jsonl(&dir, &records).map_err(write_failed)?;
    if write_trajectories_csv(&dir, &records)
        .map_err(write_failed)?
        .is_some()
    {
        outputs.push("trajectories.csv".to_string());
    }
    outputs.sort();
    let manifest = Manifest {
        command: "run".into(),
        config: source.label.clone(),
        config_sha256: source.sha256.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: scenario.base_seed,
        runs: scenario.n_runs,
        outputs,
    };
    write_manifest(&dir, &manifest).map_err(write_failed)?;

    println!("wrote {}", dir.display());
    println!("runs: {} (seed {})", stats.n_runs, scenario.base_seed);
    for (label, count) in &stats.bell_counts {
        if *count == 0 && !stats.bell_frequencies.contains_key(label) {
            continue;
        }
        println!(
            "  {label}: {count} ({:.4})",
            stats.bell_frequencies.get(label).copied().unwrap_or(0.0)
        );
    }
    println!(
        "  anticorrelation violations: {}",
        stats.anticorrelation_violations
    );
    println!(
        "  correlation violations: {}",
        stats.correlation_violations
    );

    let problems = check_run_invariants(&prepared, &stats);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invariant violated: {p}");
        }
        return Err(CliError::Run(format!(
            "{} scenario invariant(s) violated",
            problems.len()
        )));
    }
    Ok(())
}

/// Post-run checks of what the wavefunction itself promises about the
/// ensemble: exact outcome correlations hold run by run, and each observed
/// outcome frequency sits within 3 sigma of the branch weight.
fn check_run_invariants(prepared: &PreparedScenario, stats: &StatsReport) -> Vec<String> {
    let mut problems = Vec::new();
    if stats.anticorrelation_violations > 0 {
        problems.push(format!(
            "{} run(s) broke the exact spin anticorrelation",
            stats.anticorrelation_violations
        ));
    }
    if stats.correlation_violations > 0 {
        problems.push(format!(
            "{} run(s) broke the exact spin correlation",
            stats.correlation_violations
        ));
    }
    let Some(weights) = state_bell_weights(prepared) else {
        return problems;
    };
    let n = stats.n_runs as f64;
    for (label, w) in &weights {
        let freq = stats.bell_frequencies.get(label).copied().unwrap_or(0.0);
        let radius = 3.0 * (w * (1.0 - w) / n).sqrt();
        if (freq - w).abs() > radius {
            problems.push(format!(
                "outcome `{label}`: frequency {freq:.4} outside {w:.4} +- {radius:.4}"
            ));
        }
    }
    for (label, freq) in &stats.bell_frequencies {
        if *freq > 0.0 && !weights.contains_key(label) {
            problems.push(format!(
                "outcome `{label}` observed but carries zero weight in the state"
            ));
        }
    }
    problems
}

/// Squared branch amplitudes of the post-analyzer state, keyed by the
/// readout label whose pointer packet the branch carries. `None` when the
/// schedule has no readable analyzer or a branch matches no outcome.
fn state_bell_weights(prepared: &PreparedScenario) -> Option<BTreeMap<String, f64>> {
    let events = &prepared.scenario().events;
    let idx = events
        .iter()
        .position(|e| e.rewrite.kind_name() == "bell_analyzer" && e.readout.is_some())?;
    let readout = events[idx].readout.as_ref()?;
    let post = &prepared.states()[idx + 1];
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for b in post.branches() {
        let packet = b.packets.get(&readout.dof)?;
        let label = readout
            .outcomes
            .iter()
            .find(|(p, _)| p.approx_eq(packet, 1e-9))
            .map(|(_, l)| l.clone())?;
        *weights.entry(label).or_insert(0.0) += b.amplitude.norm_sqr();
    }
    Some(weights)
}

// ---------------------------------------------------------------------------
// bell-expand

#[derive(Args)]
struct BellExpandArgs {
    /// State expression: kets like `a1 b2`, bell states like `alpha(1,2)`,
    /// scalars, `i`, `+`, `-`, `*`, parentheses.
    #[arg(default_value = "alpha(1,2) * alpha(3,4)")]
    expr: String,
    /// Number of spin slots the expression may address.
    #[arg(long, default_value_t = 4)]
    slots: u8,
    /// First analyzer pair, as `i,j`.
    #[arg(long, default_value = "1,3")]
    pair1: String,
    /// Second analyzer pair, as `i,j`.
    #[arg(long, default_value = "2,4")]
    pair2: String,
}

fn parse_pair(s: &str) -> Result<(SlotId, SlotId), CliError> {
    let bad = || CliError::Usage(format!("pair `{s}` must be two slot numbers like `1,3`"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [i, j] = parts.as_slice() else {
        return Err(bad());
    };
    let i = i.parse::<u8>().map_err(|_| bad())?;
    let j = j.parse::<u8>().map_err(|_| bad())?;
    Ok((SlotId(i), SlotId(j)))
}

fn cmd_bell_expand(args: BellExpandArgs) -> Result<(), CliError> {
    let state = match parse_state(&args.expr, args.slots) {
        Ok(st) => st,
        Err(e) => {
            eprintln!("{}", e.render(&args.expr));
            return Err(CliError::Usage("expression did not parse".into()));
        }
    };
    let pair1 = parse_pair(&args.pair1)?;
    let pair2 = parse_pair(&args.pair2)?;
    let coeffs =
        bell_decompose(&state, pair1, pair2).map_err(|e| CliError::Usage(e.to_string()))?;

    println!("state: {}", render_factored(&state));
    println!(
        "basis: bell({},{}) x bell({},{})",
        pair1.0 .0, pair1.1 .0, pair2.0 .0, pair2.1 .0
    );
    println!();

    // Coefficient table, rows indexed by the first pair's kind.
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(5);
    let mut header = vec![String::new()];
    header.extend(pilotwave::spin::BELL_KINDS.iter().map(|k| k.name().to_string()));
    cells.push(header);
    for m in pilotwave::spin::BELL_KINDS {
        let mut row = vec![m.name().to_string()];
        for n in pilotwave::spin::BELL_KINDS {
            row.push(format_amplitude(coeffs.get(m, n)));
        }
        cells.push(row);
    }
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }

    println!();
    let nonzero = coeffs.nonzero();
    println!("nonzero terms: {}", nonzero.len());
    for (m, n, c) in &nonzero {
        println!(
            "  {}({},{}) x {}({},{}): {}  (weight {})",
            m.name(),
            pair1.0 .0,
            pair1.1 .0,
            n.name(),
            pair2.0 .0,
            pair2.1 .0,
            format_amplitude(*c),
            pilotwave::notation::format_float(c.norm_sqr()),
        );
    }
    println!(
        "sum of squared magnitudes: {}",
        pilotwave::notation::format_float(coeffs.sum_norm_sqr())
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// equivariance

#[derive(Args)]
struct EquivarianceArgs {
    /// Ensemble size (at least 1000).
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Dimensionless time theta = hbar t / (2 m sigma^2); the packet width
    /// grows by sqrt(1 + theta^2), so sqrt(3) doubles it.
    #[arg(long, default_value_t = 1.732_050_807_568_877_2)]
    t_factor: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Integrator time step.
    #[arg(long, default_value_t = 0.02)]
    dt: f64,
    /// Initial packet width.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Histogram bin count.
    #[arg(long, default_value_t = 60)]
    bins: usize,
    /// Output directory [default: $PILOTWAVE_OUT_DIR, then ./pilotwave-out].
    #[arg(long)]
    out_dir: Option<String>,
}

fn cmd_equivariance(args: EquivarianceArgs) -> Result<(), CliError> {
    if args.n < 1000 {
        return Err(CliError::Usage(format!(
            "--n must be at least 1000 for a meaningful distribution test (got {})",
            args.n
        )));
    }
    if !(args.t_factor >= 0.0) {
        return Err(CliError::Usage(format!(
            "--t-factor must be nonnegative (got {})",
            args.t_factor
        )));
    }
    if !(args.dt > 0.0) {
        return Err(CliError::Usage(format!(
            "--dt must be positive (got {})",
            args.dt
        )));
    }
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let p0 = GaussianPacket::new(0.0, args.sigma)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let params = PhysicalParams::default();
    let mass = 1.0;
    let t = args.t_factor * 2.0 * mass * args.sigma * args.sigma / params.hbar;
    let dir = resolve_out_dir(args.out_dir.as_deref(), None);

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = equivariance_test(p0, params, mass, args.n, t, args.dt, &mut rng)
        .map_err(|e| CliError::Run(e.to_string()))?;

    println!(
        "n = {}, t = {} (width {} -> {})",
        report.n, report.t, args.sigma, report.evolved.sigma
    );
    println!("KS statistic: {:.6}", report.ks_statistic);
    println!("KS p-value:   {:.6}", report.p_value);
    println!(
        "sample mean {:.6} (expected {:.6}), sample variance {:.6} (expected {:.6})",
        report.sample_mean, report.expected_mean, report.sample_variance, report.expected_variance
    );

    write_json(&dir, "equivariance.json", &report).map_err(write_failed)?;
    let evolved = report.evolved;
    write_histogram_csv(&dir, &report.final_positions, args.bins, |x| {
        evolved.density(x)
    })
    .map_err(write_failed)?;
    let spec = format!(
        "equivariance --n {} --t-factor {} --seed {} --dt {} --sigma {} --bins {}",
        args.n, args.t_factor, args.seed, args.dt, args.sigma, args.bins
    );
    let manifest = Manifest {
        command: "equivariance".into(),
        config: spec.clone(),
        config_sha256: sha256_hex(spec.as_bytes()),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        runs: args.n,
        outputs: vec!["equivariance.json".into(), "histogram.csv".into()],
    };
    write_manifest(&dir, &manifest).map_err(write_failed)?;
    println!("wrote {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// recombine

#[derive(Args)]
struct RecombineArgs {
    /// Config file path, or the name of a bundled config; the schedule must
    /// contain a Bell analyzer, then a pointer recombiner, then two spin
    /// splitters.
    #[arg(default_value = "recombine_default")]
    config: String,
    /// Base seed; per-run seeds are mixed from it (see docs/formats.md).
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size; must be at least 1.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory [default: config `[output] dir`, then
    /// $PILOTWAVE_OUT_DIR, then ./pilotwave-out].
    #[arg(long)]
    out_dir: Option<String>,
}

fn cmd_recombine(args: RecombineArgs) -> Result<(), CliError> {
    let source = load_config(&args.config)?;
    let mut scenario = source.loaded.scenario.clone();
    if let Some(seed) = args.seed {
        scenario.base_seed = seed;
    }
    if let Some(runs) = args.runs {
        scenario.n_runs = runs;
    }
    if scenario.n_runs == 0 {
        return Err(CliError::Usage("at least one run is required".into()));
    }
    let dir = resolve_out_dir(args.out_dir.as_deref(), source.loaded.output_dir.as_deref());

    let report = recombination_check(&scenario).map_err(|e| match e {
        ProtocolError::Structure { .. } | ProtocolError::BadSchedule | ProtocolError::NoRuns => {
            CliError::Usage(format!("config `{}`: {e}", source.label))
        }
        other => CliError::Run(other.to_string()),
    })?;

    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    println!(
        "product form restored:       {}",
        verdict(report.state_matches_product_form)
    );
    println!(
        "entangled({},{}):              {}",
        report.spin_slots.0, report.spin_slots.1, report.entangled
    );
    println!(
        "spins disentangled:          {}",
        verdict(!report.entangled)
    );
    println!(
        "spin outcomes independent:   {} (chi-square p = {:.5} over {} runs)",
        verdict(report.chi_square_p_value > 0.01),
        report.chi_square_p_value,
        report.stats.n_runs
    );
    for f in &report.failures {
        eprintln!("failure: {f}");
    }

    write_json(&dir, "recombine.json", &report).map_err(write_failed)?;
    let manifest = Manifest {
        command: "recombine".into(),
        config: source.label.clone(),
        config_sha256: source.sha256.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: scenario.base_seed,
        runs: scenario.n_runs,
        outputs: vec!["recombine.json".into()],
    };
    write_manifest(&dir, &manifest).map_err(write_failed)?;
    println!("wrote {}", dir.display());

    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Run(format!(
            "{} recombination assertion(s) failed",
            report.failures.len()
        )))
    }
}
