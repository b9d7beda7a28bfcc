use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tma_core::mapper::ModelOptions;
use tma_core::network::NetworkSpec;
use tma_core::psiquant::{decompose_tensor, error_table, max_relative_error, ErrorReport};
use tma_core::report::{self, ReportFormat, RunMode, RunOptions, DEFAULT_FREQ_MHZ};
use tma_core::verify::{self, VerifyOptions};
use tma_core::{PrecisionMode, Result, Tensor, TmaError};

#[derive(Parser)]
#[command(name = "tma", version, about = "Shift-and-add neural accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a network and emit a per-layer report.
    Run(RunArgs),
    /// Decompose weights into PSI terms and report the approximation error.
    Decompose(DecomposeArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Int5,
    Int8,
}

impl From<Precision> for PrecisionMode {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Int5 => PrecisionMode::Int5,
            Precision::Int8 => PrecisionMode::Int8,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Functional,
    Stats,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Network description (TOML), or `alexnet` for the bundled one.
    #[arg(long, default_value = "alexnet")]
    network: String,
    /// Force every layer to this precision.
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long, default_value_t = DEFAULT_FREQ_MHZ)]
    freq_mhz: f64,
    #[arg(long, value_enum, default_value = "stats")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cycles charged per weight-register reload.
    #[arg(long, default_value_t = 0)]
    weight_load_cycles: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long, value_enum, default_value = "int5")]
    precision: Precision,
    /// i32 TMAT weight tensor; without it every weight in range is listed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run (default: all).
    #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(verify::SUITES))]
    suites: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 200_000)]
    moa_cases: usize,
    #[arg(long, default_value_t = 4)]
    layers_per_case: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_out(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| TmaError::Io(format!("{}: {e}", p.display()))),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_network(name: &str) -> Result<NetworkSpec> {
    if name.eq_ignore_ascii_case("alexnet") {
        Ok(NetworkSpec::alexnet())
    } else {
        NetworkSpec::load(name.as_ref())
    }
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let net = load_network(&a.network)?;
    let opts = RunOptions {
        mode: match a.mode {
            Mode::Functional => RunMode::Functional,
            Mode::Stats => RunMode::Stats,
            Mode::Both => RunMode::Both,
        },
        precision: a.precision.map(Into::into),
        freq_mhz: a.freq_mhz,
        seed: a.seed,
        model: ModelOptions {
            weight_load_cycles: a.weight_load_cycles,
            accumulator_bits: None,
        },
    };
    let r = report::run(&net, &opts)?;
    match &a.out {
        Some(p) => report::emit_report(&r, a.format.into(), p)?,
        None => write_out(None, &report::render(&r, a.format.into())?)?,
    }
    eprintln!(
        "{}: {} cycles, {:.2} frames/s at {} MHz, peak {} GMACS",
        r.network, r.totals.cycles.total_cycles, r.totals.frames_per_s, r.freq_mhz, r.totals.peak_gmacs
    );
    for s in &r.assumptions {
        eprintln!("assumption: {s}");
    }
    Ok(true)
}

#[derive(Serialize)]
struct ErrorRow {
    index: String,
    weight: i32,
    effective: i32,
    abs_error: i32,
    rel_error: String,
    rel_error_pct: f64,
}

impl ErrorRow {
    fn new(index: String, r: &ErrorReport) -> Self {
        Self {
            index,
            weight: r.weight,
            effective: r.effective,
            abs_error: r.abs_error,
            rel_error: r.rel_error.to_string(),
            rel_error_pct: 100.0 * *r.rel_error.numer() as f64 / *r.rel_error.denom() as f64,
        }
    }
}

#[derive(Serialize)]
struct DecomposeReport {
    precision: PrecisionMode,
    weights: usize,
    inexact: usize,
    max_rel_error: String,
    rows: Vec<ErrorRow>,
}

fn cmd_decompose(a: DecomposeArgs) -> Result<bool> {
    let mode: PrecisionMode = a.precision.into();
    let rep = match &a.weights {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| TmaError::Io(format!("{}: {e}", path.display())))?;
            let w = Tensor::<i32>::read_tmat(std::io::BufReader::new(f))?;
            let (_, inexact) = decompose_tensor(&w, mode)?;
            let max = max_relative_error(w.data().iter().copied(), mode)?;
            DecomposeReport {
                precision: mode,
                weights: w.len(),
                inexact: inexact.len(),
                max_rel_error: max.to_string(),
                rows: inexact
                    .iter()
                    .map(|e| ErrorRow::new(format!("{:?}", e.index), &e.report))
                    .collect(),
            }
        }
        None => {
            let table = error_table(mode);
            let max = max_relative_error(mode.weight_range(), mode)?;
            DecomposeReport {
                precision: mode,
                weights: table.len(),
                inexact: table.iter().filter(|r| !r.is_exact()).count(),
                max_rel_error: max.to_string(),
                rows: table.iter().map(|r| ErrorRow::new(r.weight.to_string(), r)).collect(),
            }
        }
    };
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&rep).expect("serialisable") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rep.rows {
                w.serialize(r).map_err(|e| TmaError::Io(e.to_string()))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| TmaError::Io(e.to_string()))?)
                .expect("utf-8")
        }
    };
    write_out(a.out.as_ref(), &text)?;
    eprintln!(
        "{mode}: {} of {} weights inexact, max relative error {}",
        rep.inexact, rep.weights, rep.max_rel_error
    );
    Ok(true)
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        seed: a.seed,
        moa_cases: a.moa_cases,
        layers_per_case: a.layers_per_case,
    };
    let names: Vec<&str> = if a.suites.is_empty() {
        verify::SUITES.to_vec()
    } else {
        a.suites.iter().map(String::as_str).collect()
    };
    let mut results = Vec::new();
    for n in names {
        let r = verify::run_suite(n, &opts)?;
        eprintln!("{r}");
        results.push(r);
    }
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&results).expect("serialisable") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &results {
                w.serialize(r).map_err(|e| TmaError::Io(e.to_string()))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| TmaError::Io(e.to_string()))?)
                .expect("utf-8")
        }
    };
    write_out(a.out.as_ref(), &text)?;
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
