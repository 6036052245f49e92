//! `mdcons`: design, evaluate and simulate multi-dimensional constellations.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure.

mod manifest;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdcons::cccp::{self, amgm_gap_report, CccpConfig};
use mdcons::constellation::{amgm_summary, Constellation};
use mdcons::scma::{self, build_codebooks, overloading_factor, CodebookSet, IndicatorMatrix, OperatorSet};
use mdcons::sim::{self, Channel, SimConfig, SnrSpec, StopRule};
use mdcons::{io, Error};
use serde::Serialize;

use manifest::{file_name, manifest_path, sibling, Recorder};

#[derive(Parser)]
#[command(name = "mdcons", version, about = "Multi-dimensional constellation design and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design a constellation by CCCP with random restarts.
    Optimize(OptimizeArgs),
    /// Print distance metrics of a constellation file.
    Metrics(MetricsArgs),
    /// Build SCMA codebooks from a base constellation.
    ScmaBuild(ScmaBuildArgs),
    /// Monte Carlo BER of a constellation or an SCMA codebook set.
    Simulate(SimulateArgs),
    /// Optimize for several values of lambda.
    Sweep(SweepArgs),
}

#[derive(Args, Serialize, Clone)]
struct DesignArgs {
    /// Complex dimensions.
    #[arg(long = "K")]
    k: usize,
    /// Number of constellation vectors.
    #[arg(long = "M")]
    m: usize,
    /// Minimum Euclidean distance threshold D_E.
    #[arg(long, default_value_t = 1.0)]
    de: f64,
    /// Step-norm stopping threshold.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long)]
    seed: u64,
    /// Duality-gap tolerance of each subproblem solve.
    #[arg(long, default_value_t = 1e-8)]
    solver_tol: f64,
}

impl DesignArgs {
    fn config(&self, lambda: f64) -> CccpConfig {
        CccpConfig {
            lambda,
            d_e_threshold: self.de,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            restarts: self.restarts,
            seed: self.seed,
            solver_tol: self.solver_tol,
            ..CccpConfig::new(self.k, self.m)
        }
    }
}

#[derive(Args, Serialize)]
struct OptimizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    design: DesignArgs,
    /// Trade-off between energy and element-wise distance.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Output constellation JSON. The best chain's trace, the restart
    /// summaries and the manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write every chain's trace CSV into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MetricsArgs {
    file: PathBuf,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ScmaBuildArgs {
    /// Base constellation; its K must equal the indicator column weight.
    #[arg(long)]
    base: PathBuf,
    /// Indicator matrix JSON; defaults to the built-in 4x6 matrix.
    #[arg(long)]
    indicator: Option<PathBuf>,
    /// Operator phases JSON (J x K radians); defaults to the rotation scheme.
    #[arg(long)]
    operators: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run the exhaustive noise-free MPA check.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ChannelArg {
    Awgn,
    Rayleigh,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Point-to-point constellation file.
    #[arg(long, conflicts_with_all = ["scma", "codebooks"])]
    constellation: Option<PathBuf>,
    /// Simulate SCMA uplink with codebooks built from --base.
    #[arg(long, requires = "base")]
    scma: bool,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    indicator: Option<PathBuf>,
    #[arg(long)]
    operators: Option<PathBuf>,
    /// Previously exported SCMA codebooks.
    #[arg(long, conflicts_with = "base")]
    codebooks: Option<PathBuf>,
    #[arg(long, value_enum)]
    channel: ChannelArg,
    /// Eb/N0 in dB: `start:step:stop` or a comma-separated list.
    #[arg(long)]
    ebn0: String,
    #[arg(long)]
    seed: u64,
    /// Transmit without noise.
    #[arg(long)]
    noise_free: bool,
    #[arg(long, default_value_t = 200)]
    min_errors: u64,
    #[arg(long, default_value_t = 0)]
    min_vectors: u64,
    #[arg(long, default_value_t = 1_000_000)]
    max_vectors: u64,
    #[arg(long, default_value_t = scma::DEFAULT_MPA_ITERS)]
    mpa_iters: usize,
    /// Output BER CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    design: DesignArgs,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    /// Output CSV, one row per lambda.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) | Error::AllRestartsFailed { .. } | Error::Invariant(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(args) => optimize(args),
        Command::Metrics(args) => metrics(args),
        Command::ScmaBuild(args) => scma_build(args),
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

// Reports go out in one piece; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> mdcons::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn check_simulation_size(m: usize) {
    if let Err(e) = sim::bits_per_symbol(m) {
        eprintln!("note: {e}");
    }
}

fn optimize(args: OptimizeArgs) -> mdcons::Result<()> {
    let mut out = String::new();
    let config = args.design.config(args.lambda);
    config.validate()?;
    check_simulation_size(config.size);
    let mut rec = Recorder::new("optimize", &args, Some(config.seed));
    let result = cccp::optimize(&config)?;

    let mut meta = result.meta();
    meta.insert("manifest".into(), file_name(&manifest_path(&args.out)).into());
    rec.write(&args.out, &result.best.to_json(meta)?)?;
    rec.write(&sibling(&args.out, "trace.csv"), &result.trace.to_csv())?;
    rec.write(&sibling(&args.out, "restarts.json"), &io::to_json(&result.all_restarts)?)?;
    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir)?;
        for chain in &result.chains {
            rec.write(&dir.join(format!("chain_{:03}.csv", chain.chain_index)), &chain.trace.to_csv())?;
        }
    }
    rec.finish(&manifest_path(&args.out))?;

    let ok = result.all_restarts.iter().filter(|s| s.status.is_some()).count();
    writeln!(out, "restarts      {ok}/{} succeeded, best chain {}", config.restarts, result.best_chain).ok();
    writeln!(out, "MED           {:.6}", result.profile.med).ok();
    writeln!(out, "MPD           {:.6}", result.profile.mpd).ok();
    writeln!(out, "final energy  {:.6}", result.best_raw.energy()).ok();
    writeln!(out, "wrote         {}", args.out.display()).ok();
    emit(&out)
}

#[derive(Serialize)]
struct MetricsReport {
    raw: mdcons::DistanceProfile,
    normalized: Option<mdcons::DistanceProfile>,
    amgm: cccp::AmGmReport,
}

fn print_profile(out: &mut String, label: &str, c: &Constellation) -> mdcons::Result<mdcons::DistanceProfile> {
    let p = c.profile()?;
    writeln!(out, "[{label}]").ok();
    writeln!(out, "  average power      {:.6}", p.average_power).ok();
    writeln!(out, "  MED                {:.6}", p.med).ok();
    writeln!(out, "  MPD                {:.6}", p.mpd).ok();
    writeln!(out, "  kissing number MED {}", p.kissing_med).ok();
    writeln!(out, "  kissing number MPD {}", p.kissing_mpd).ok();
    writeln!(out, "  min element-wise   {:.6}", p.min_elementwise).ok();
    if !p.identical_pairs.is_empty() {
        writeln!(out, "  identical pairs    {:?}", p.identical_pairs).ok();
    }
    Ok(p)
}

fn metrics(args: MetricsArgs) -> mdcons::Result<()> {
    let mut out = String::new();
    let (c, _) = Constellation::load(&args.file)?;
    writeln!(out, "K {}  M {}", c.dims(), c.size()).ok();
    let power = c.average_power();
    let raw = print_profile(&mut out, "raw", &c)?;
    let normalized = if (power - 1.0).abs() > 1e-9 {
        eprintln!("warning: average power is {power}, not 1; normalized metrics follow");
        Some(print_profile(&mut out, "normalized", &c.normalize()?)?)
    } else {
        None
    };
    let amgm = amgm_gap_report(&c)?;
    let summary = amgm_summary(&amgm.entries);
    writeln!(out, "[AM-GM]").ok();
    writeln!(
        out,
        "  pairs {}  equal gaps {}  violated {}  min slack {:.3e}",
        summary["pairs"], summary["equal_gaps"], summary["violated"], amgm.min_slack
    )
    .ok();
    writeln!(out, "  MPD {:.6} >= delta^K {:.6}: {}", amgm.mpd, amgm.delta_bound, amgm.delta_bound_holds).ok();
    for e in &amgm.entries {
        writeln!(out, "  ({}, {}) lhs {:.6} rhs {:.6} slack {:.6}", e.i, e.j, e.lhs, e.rhs, e.slack).ok();
    }
    if let Some(path) = &args.json {
        let mut rec = Recorder::new("metrics", &args, None);
        rec.input(&args.file);
        rec.write(path, &io::to_json(&MetricsReport { raw, normalized, amgm })?)?;
        rec.finish(&manifest_path(path))?;
    }
    emit(&out)
}

fn load_codebooks(
    base: &Path,
    indicator: Option<&Path>,
    operators: Option<&Path>,
    rec: &mut Recorder,
) -> mdcons::Result<CodebookSet> {
    let (base_c, _) = Constellation::load(base)?;
    rec.input(base);
    let f = match indicator {
        Some(p) => {
            rec.input(p);
            IndicatorMatrix::load(p)?
        }
        None => IndicatorMatrix::default_4x6(),
    };
    if base_c.dims() != f.column_weight() {
        return Err(Error::Config(format!(
            "base constellation has K={} but the indicator matrix has column weight {}",
            base_c.dims(),
            f.column_weight()
        )));
    }
    let ops = match operators {
        Some(p) => {
            rec.input(p);
            OperatorSet::load(p)?
        }
        None => OperatorSet::default_for(&f, base_c.size()),
    };
    build_codebooks(&f, &base_c, &ops)
}

fn scma_build(args: ScmaBuildArgs) -> mdcons::Result<()> {
    let mut out = String::new();
    let mut rec = Recorder::new("scma-build", &args, None);
    let cbs = load_codebooks(&args.base, args.indicator.as_deref(), args.operators.as_deref(), &mut rec)?;
    let f = &cbs.indicator;
    writeln!(out, "resources N       {}", f.resources()).ok();
    writeln!(out, "users J           {}", f.users()).ok();
    writeln!(out, "column weight K   {}", f.column_weight()).ok();
    match f.regular_row_weight() {
        Some(d) => writeln!(out, "row weight d_f    {d}").ok(),
        None => writeln!(out, "row weight d_f    irregular").ok(),
    };
    writeln!(out, "overloading factor {:.2}", overloading_factor(f)).ok();
    if args.check {
        let report = scma::noise_free_check(&cbs, 1e-4, scma::DEFAULT_MPA_ITERS)?;
        writeln!(
            out,
            "noise-free check  {}/{} tuples recovered, min superposition gap {:.4e}",
            report.tuples - report.failures,
            report.tuples,
            report.min_superposition_gap
        )
        .ok();
    }
    rec.write(&args.out, &cbs.to_json()?)?;
    rec.finish(&manifest_path(&args.out))?;
    writeln!(out, "wrote {}", args.out.display()).ok();
    emit(&out)
}

fn simulate(args: SimulateArgs) -> mdcons::Result<()> {
    let mut out = String::new();
    let snr = SnrSpec::parse(&args.ebn0)?;
    let channel = match args.channel {
        ChannelArg::Awgn => Channel::Awgn,
        ChannelArg::Rayleigh => Channel::RayleighIid,
    };
    let config = SimConfig {
        channel,
        stop: StopRule {
            min_bit_errors: args.min_errors,
            min_vectors: args.min_vectors,
            max_vectors: args.max_vectors,
            ..StopRule::default()
        },
        seed: args.seed,
        noise_free: args.noise_free,
    };
    let mut rec = Recorder::new("simulate", &args, Some(args.seed));
    let curve = if let Some(path) = &args.codebooks {
        rec.input(path);
        let cbs = CodebookSet::load(path)?;
        sim::simulate_scma_uplink(&cbs, &config, &snr, args.mpa_iters)?
    } else if args.scma {
        let base = args.base.as_deref().expect("clap enforces --base");
        let cbs = load_codebooks(base, args.indicator.as_deref(), args.operators.as_deref(), &mut rec)?;
        sim::simulate_scma_uplink(&cbs, &config, &snr, args.mpa_iters)?
    } else {
        let path = args
            .constellation
            .as_deref()
            .ok_or_else(|| Error::Config("one of --constellation, --scma or --codebooks is required".into()))?;
        rec.input(path);
        let (c, _) = Constellation::load(path)?;
        sim::simulate_p2p(&c, &config, &snr)?
    };
    for w in &curve.warnings {
        eprintln!("warning: {w}");
    }
    rec.write(&args.out, &curve.to_csv())?;
    if curve.points.iter().any(|p| !p.user_errors.is_empty()) {
        rec.write(&sibling(&args.out, "users.csv"), &curve.per_user_csv())?;
    }
    rec.finish(&manifest_path(&args.out))?;
    out.push_str(&curve.to_csv());
    emit(&out)
}

fn sweep(args: SweepArgs) -> mdcons::Result<()> {
    let mut out = String::new();
    let base = args.design.config(0.5);
    let mut rec = Recorder::new("sweep", &args, Some(base.seed));
    let mut csv = String::from("lambda,med,mpd,kissing_med,kissing_mpd,final_energy,chain_index\n");
    for (lambda, result) in args.lambdas.iter().zip(cccp::sweep_lambda(&base, &args.lambdas)) {
        let r = result?;
        csv.push_str(&format!(
            "{lambda},{},{},{},{},{},{}\n",
            io::format_real(r.profile.med),
            io::format_real(r.profile.mpd),
            r.profile.kissing_med,
            r.profile.kissing_mpd,
            io::format_real(r.best_raw.energy()),
            r.best_chain
        ));
    }
    rec.write(&args.out, &csv)?;
    rec.finish(&manifest_path(&args.out))?;
    out.push_str(&csv);
    emit(&out)
}
