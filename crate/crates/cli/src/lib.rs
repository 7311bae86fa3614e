//! Command-line runner behind the `mckv` binary.
//!
//! Subcommands: `plan`, `run`, `reference` and `diagnose`. Settings come
//! from command-line flags, then the `--config` JSON file, then defaults.
//! The output directory falls back to `MCKV_OUT_DIR` when neither the flag
//! nor the file sets it.
//!
//! `run` writes a CSV to stdout and, when an output directory is set, to
//! `<out>/results.csv` (flushed row by row, so a failed run leaves the rows
//! completed so far) together with `<out>/config.json`. The CSV starts with
//! `#` comment lines: the program version, the SHA-256 of the canonical
//! configuration, and that configuration itself. Columns:
//!
//! ```text
//! epsilon,method,seed,estimate,reference,sq_error,predicted_cost,measured_cost,wall_seconds
//! ```
//!
//! With `--dump-clouds`, every final particle cloud is written to
//! `<out>/clouds/eps<i>_rep<r>_level<l>_<fine|coarse>.csv` with columns
//! `particle,time_index,x0,..,x{d-1}` (particles numbered from 1, one row per
//! particle and grid point).
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a parameter error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mckv::analysis::{default_reference, method_config, replication_seed, variance_decay, ReferenceValue};
use mckv::config::ExperimentConfig;
use mckv::models::{Model, Payoff};
use mckv::planner::plan;
use mckv::schemes::{simulate, SchemeConfig, SchemeKind, SimulationOutput};

const OUT_DIR_ENV: &str = "MCKV_OUT_DIR";

#[derive(Parser)]
#[command(name = "mckv", version, about = "Particle methods for McKean-Vlasov SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the planned Picard steps, levels and sample sizes as JSON.
    Plan(Common),
    /// Run replicated estimates and write the results CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the final particle clouds to `<out>/clouds/`.
        #[arg(long)]
        dump_clouds: bool,
    },
    /// Print the reference value of the configured model and payoff.
    Reference {
        #[command(flatten)]
        common: Common,
        /// Evaluation time; replaces the horizon.
        #[arg(long = "t")]
        time: Option<f64>,
        /// Threshold of the payoff `1{x_0 >= x}`.
        #[arg(long)]
        x: Option<f64>,
    },
    /// Print the conditional variances per Picard step and level as CSV.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_parser = parse_method)]
    method: Option<SchemeKind>,
    /// Target accuracies, comma separated.
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long)]
    c: Option<f64>,
    /// Time horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Payoff descriptor (`x`, `x2`, `sqrt1p2`, `indicator_ge:<a>`, `const:<c>`).
    #[arg(long)]
    payoff: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write wall-clock times as 0 so that output bytes are reproducible.
    #[arg(long)]
    no_timing: bool,
}

fn parse_method(s: &str) -> Result<SchemeKind, String> {
    SchemeKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Parameter(String),
    Runtime(String),
}

impl From<mckv::Error> for Failure {
    fn from(e: mckv::Error) -> Self {
        match e {
            mckv::Error::NonFinite { .. } | mckv::Error::Instability(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Parameter(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}

type CliResult<T> = Result<T, Failure>;

/// Runs the command line `args` (program name first), writing results to
/// `out` and diagnostics to stderr. Returns the process exit code.
pub fn execute<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code as u8;
        }
    };
    let outcome = match cli.command {
        Command::Plan(common) => run_plan(&common, out),
        Command::Run { common, dump_clouds } => run_replications(&common, dump_clouds, out),
        Command::Reference { common, time, x } => run_reference(&common, time, x, out),
        Command::Diagnose(common) => run_diagnose(&common, out),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Parameter(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Parameter(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &common.model {
        config.model = v.clone();
    }
    if let Some(v) = common.method {
        config.method = v;
    }
    if let Some(v) = &common.epsilon {
        config.epsilons = v.clone();
    }
    if let Some(v) = common.c {
        config.c = v;
    }
    if let Some(v) = common.horizon {
        config.horizon = Some(v);
    }
    if let Some(v) = &common.payoff {
        config.payoff = Some(v.clone());
    }
    if let Some(v) = common.replications {
        config.replications = v;
    }
    if let Some(v) = common.seed {
        config.seed = v;
    }
    if let Some(v) = common.workers {
        config.workers = v;
    }
    if let Some(v) = &common.out {
        config.output_dir = Some(v.to_string_lossy().into_owned());
    }
    if common.no_timing {
        config.timing = false;
    }
    if config.output_dir.is_none() {
        config.output_dir = std::env::var(OUT_DIR_ENV).ok().filter(|v| !v.is_empty());
    }
    config.validate()?;
    Ok(config)
}

fn run_plan(common: &Common, out: &mut dyn Write) -> CliResult<()> {
    let config = load_config(common)?;
    let model = config.resolved_model()?;
    let plans = config
        .epsilons
        .iter()
        .map(|&e| plan(e, config.c, model.horizon))
        .collect::<Result<Vec<_>, _>>()?;
    let json = if plans.len() == 1 {
        serde_json::to_string_pretty(&plans[0])
    } else {
        serde_json::to_string_pretty(&plans)
    }
    .expect("plan serializes");
    writeln!(out, "{json}")?;
    Ok(())
}

/// Writes to the output and, optionally, a file; both are flushed per line.
struct Sink<'a> {
    out: &'a mut dyn Write,
    file: Option<BufWriter<File>>,
}

impl Sink<'_> {
    fn line(&mut self, text: &str) -> io::Result<()> {
        writeln!(self.out, "{text}")?;
        self.out.flush()?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{text}")?;
            f.flush()?;
        }
        Ok(())
    }
}

fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.reproducible_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn header_lines(config: &ExperimentConfig) -> Vec<String> {
    vec![
        format!("# mckv-cli {} (mckv {})", env!("CARGO_PKG_VERSION"), mckv::VERSION),
        format!("# config_sha256: {}", config_hash(config)),
        format!("# config: {}", config.reproducible_json()),
    ]
}

fn scheme_config(config: &ExperimentConfig, epsilon: f64, horizon: f64, seed: u64) -> CliResult<SchemeConfig> {
    let mut scheme = method_config(config.method, epsilon, config.c, horizon, seed)?
        .initial_measure(config.initial_measure)
        .workers(config.workers);
    if let Some([lo, hi]) = config.drift_clamp {
        scheme = scheme.drift_clamp(lo, hi);
    }
    Ok(scheme)
}

fn run_replications(common: &Common, dump_clouds: bool, out: &mut dyn Write) -> CliResult<()> {
    let config = load_config(common)?;
    let model = config.resolved_model()?;
    let out_dir = config.output_dir.as_ref().map(PathBuf::from);
    if dump_clouds && out_dir.is_none() {
        return Err(Failure::Parameter("--dump-clouds needs an output directory".into()));
    }
    let file = match &out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), config.to_json_pretty() + "\n")?;
            Some(BufWriter::new(File::create(dir.join("results.csv"))?))
        }
        None => None,
    };
    let mut sink = Sink { out, file };
    for line in header_lines(&config) {
        sink.line(&line)?;
    }
    sink.line("epsilon,method,seed,estimate,reference,sq_error,predicted_cost,measured_cost,wall_seconds")?;

    let reference = default_reference(&model, &config.reference, config.workers)?;
    for (ei, &epsilon) in config.epsilons.iter().enumerate() {
        for r in 0..config.replications {
            let seed = replication_seed(config.seed, r as u64);
            let scheme = scheme_config(&config, epsilon, model.horizon, seed)?;
            let sim = simulate(&model, &scheme)?;
            let estimate = sim.terminal_estimate();
            let wall = if config.timing { sim.wall_seconds } else { 0.0 };
            sink.line(&format!(
                "{epsilon},{},{seed},{estimate},{},{},{},{},{wall}",
                config.method,
                reference.value,
                (estimate - reference.value).powi(2),
                sim.cost.predicted,
                sim.cost.measured,
            ))?;
            if dump_clouds {
                let dir = out_dir.as_ref().expect("checked above").join("clouds");
                dump(&dir, ei, r, &sim)?;
            }
        }
    }
    Ok(())
}

fn dump(dir: &Path, epsilon_index: usize, replication: usize, out: &SimulationOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (l, term) in out.measure.terms().iter().enumerate() {
        let stem = format!("eps{epsilon_index}_rep{replication}_level{l}");
        let file = File::create(dir.join(format!("{stem}_fine.csv")))?;
        term.fine.write_csv(BufWriter::new(file))?;
        if let Some(coarse) = &term.coarse {
            let file = File::create(dir.join(format!("{stem}_coarse.csv")))?;
            coarse.write_csv(BufWriter::new(file))?;
        }
    }
    Ok(())
}

fn reference_row(r: &ReferenceValue) -> String {
    let provenance = serde_json::to_value(r.provenance).expect("provenance serializes");
    format!(
        "{},{},{},{},{},{}",
        r.model,
        r.payoff,
        r.t,
        r.value,
        r.std_error,
        provenance.as_str().unwrap_or_default()
    )
}

fn run_reference(common: &Common, time: Option<f64>, x: Option<f64>, out: &mut dyn Write) -> CliResult<()> {
    let mut config = load_config(common)?;
    if let Some(t) = time {
        config.horizon = Some(t);
    }
    if let Some(x) = x {
        config.payoff = Some(format!("indicator_ge:{x}"));
    }
    config.validate()?;
    let model = config.resolved_model()?;
    let payoffs: Vec<Payoff> = if model.name == "polynomial" && config.payoff.is_none() {
        vec![Payoff::Identity, Payoff::Square]
    } else {
        vec![model.payoff.clone()]
    };
    writeln!(out, "model,payoff,t,value,std_error,provenance")?;
    for payoff in payoffs {
        let m: Model = model.clone().with_payoff(payoff);
        let r = default_reference(&m, &config.reference, config.workers)?;
        writeln!(out, "{}", reference_row(&r))?;
    }
    Ok(())
}

fn run_diagnose(common: &Common, out: &mut dyn Write) -> CliResult<()> {
    let config = load_config(common)?;
    let model = config.resolved_model()?;
    let d = &config.diagnose;
    let mut scheme = SchemeConfig::picard_mlmc(vec![vec![d.samples; d.levels + 1]; d.picard_steps], config.seed)
        .initial_measure(config.initial_measure)
        .workers(config.workers);
    if let Some([lo, hi]) = config.drift_clamp {
        scheme = scheme.drift_clamp(lo, hi);
    }
    let rows = variance_decay(&model, &scheme, &model.payoff)?;
    for line in header_lines(&config) {
        writeln!(out, "{line}")?;
    }
    writeln!(out, "picard_step,level,var_fine,var_diff")?;
    for row in rows {
        writeln!(out, "{},{},{},{}", row.picard_step, row.level, row.var_fine, row.var_diff)?;
    }
    Ok(())
}
