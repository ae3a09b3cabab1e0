use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use scjani::jani::{emit_jani, Network, Property};
use scjani::smc::{
    estimate_probability, export_traces_csv, replay_traces, simulate, write_traces_csv, Compiled,
    SmcConfig, DEFAULT_MAX_STEPS,
};
use scjani::system::{load_model, Model};

const DEFAULT_SEED: u64 = 0;
const DEFAULT_CONFIDENCE: f64 = 0.95;
const DEFAULT_ERROR: f64 = 0.01;

/// Compile SCXML robot models to JANI and check them by simulation.
#[derive(Parser)]
#[command(name = "scjani", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a system manifest into a JANI file.
    Convert {
        /// System manifest (.toml) or JANI model.
        input: PathBuf,
        /// Output path; defaults to the manifest's `output.jani` or the
        /// input path with a `.jani` extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Estimate the probability of properties by statistical model checking.
    Verify {
        input: PathBuf,
        /// Property to check; all properties when omitted.
        #[arg(long)]
        property: Option<String>,
        #[arg(long)]
        confidence: Option<f64>,
        /// Maximal absolute error of the estimate.
        #[arg(long)]
        error: Option<f64>,
        /// Write the first violating traces to this CSV file.
        #[arg(long)]
        traces_csv: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sample traces and write them as CSV.
    Simulate {
        input: PathBuf,
        /// Number of traces.
        #[arg(short, default_value_t = 1)]
        n: u64,
        /// CSV output; standard output when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Steps after which a trace is cut off.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Worker threads (0: one per core). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Errors in the inputs exit with 2, failures while checking with 1.
enum Failure {
    Input(anyhow::Error),
    Check(anyhow::Error),
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn check<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Check(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert { input, output } => convert(&input, output),
        Command::Verify {
            input,
            property,
            confidence,
            error,
            traces_csv,
            run,
        } => verify(&input, property.as_deref(), confidence, error, traces_csv, &run),
        Command::Simulate {
            input,
            n,
            output,
            run,
        } => simulate_cmd(&input, n, output, &run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Model, Failure> {
    load_model(path).map_err(input)
}

fn counts(net: &Network) -> String {
    let events = net.automata.iter().filter(|a| a.name.starts_with("ev:")).count();
    let locals: usize = net.automata.iter().map(|a| a.locals.len()).sum();
    format!(
        "automata: {} ({} machines, {} events)\nsync vectors: {}\nvariables: {} ({} global, {} local)\nconstants: {}\nproperties: {}",
        net.automata.len(),
        net.automata.len() - events,
        events,
        net.syncs.len(),
        net.globals.len() + locals,
        net.globals.len(),
        locals,
        net.constants.len(),
        net.properties.len(),
    )
}

fn convert(path: &Path, output: Option<PathBuf>) -> Result<(), Failure> {
    let model = load(path)?;
    let out = output
        .or(model.jani_output.clone())
        .unwrap_or_else(|| path.with_extension("jani"));
    if out == path {
        return Err(input(anyhow!("refusing to overwrite the input {}", path.display())));
    }
    let text = emit_jani(&model.network).map_err(check)?;
    std::fs::write(&out, text)
        .with_context(|| format!("cannot write {}", out.display()))
        .map_err(check)?;
    println!("wrote {}", out.display());
    println!("{}", counts(&model.network));
    Ok(())
}

fn config(model: &Model, confidence: Option<f64>, error: Option<f64>, run: &RunArgs) -> SmcConfig {
    SmcConfig {
        confidence: confidence.or(model.smc.confidence).unwrap_or(DEFAULT_CONFIDENCE),
        max_error: error.or(model.smc.error).unwrap_or(DEFAULT_ERROR),
        max_steps: run.max_steps.or(model.smc.max_steps).unwrap_or(DEFAULT_MAX_STEPS),
        seed: run.seed.or(model.smc.seed).unwrap_or(DEFAULT_SEED),
        jobs: run.jobs,
        ..SmcConfig::default()
    }
}

fn verify(
    path: &Path,
    property: Option<&str>,
    confidence: Option<f64>,
    error: Option<f64>,
    traces_csv: Option<PathBuf>,
    run: &RunArgs,
) -> Result<(), Failure> {
    let model = load(path)?;
    let net = &model.network;
    let props: Vec<&Property> = match property {
        Some(name) => vec![net.property(name).ok_or_else(|| {
            let known: Vec<&str> = net.properties.iter().map(|p| p.name.as_str()).collect();
            input(anyhow!(
                "unknown property `{name}` (defined: {})",
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            ))
        })?],
        None if net.properties.is_empty() => {
            return Err(input(anyhow!("{} defines no properties", path.display())))
        }
        None => net.properties.iter().collect(),
    };
    if traces_csv.is_some() && props.len() > 1 {
        return Err(input(anyhow!("--traces-csv needs a single --property")));
    }
    let cfg = config(&model, confidence, error, run);
    cfg.validate().map_err(input)?;
    let compiled = Compiled::new(net).map_err(check)?;
    let stdout = std::io::stdout();
    for (i, prop) in props.iter().enumerate() {
        let v = estimate_probability(&compiled, prop, &cfg).map_err(check)?;
        let mut out = stdout.lock();
        if i > 0 {
            writeln!(out).ok();
        }
        writeln!(
            out,
            "model: {}\nproperty: {}\nconfidence: {}\nerror: {}\nseed: {}\nmax steps: {}\nsamples: {}\nsatisfied: {}\nviolated: {}\nundecided: {}\nestimate: {:.6}",
            net.name,
            prop.name,
            cfg.confidence,
            cfg.max_error,
            cfg.seed,
            cfg.max_steps,
            v.samples,
            v.satisfied,
            v.violated,
            v.undecided,
            v.estimate
        )
        .ok();
        drop(out);
        for w in &v.warnings {
            eprintln!("warning: {w}");
        }
        // timing goes to stderr so the report itself is reproducible
        eprintln!("wall time: {:.3} s", v.elapsed.as_secs_f64());
        if let Some(csv) = &traces_csv {
            if v.violating.is_empty() {
                eprintln!("no violating traces; {} not written", csv.display());
            } else {
                let traces = replay_traces(&compiled, prop, cfg.seed, &v.violating, cfg.max_steps)
                    .map_err(check)?;
                export_traces_csv(&compiled, &traces, csv).map_err(check)?;
                eprintln!("wrote {} violating traces to {}", traces.len(), csv.display());
            }
        }
    }
    Ok(())
}

fn simulate_cmd(path: &Path, n: u64, output: Option<PathBuf>, run: &RunArgs) -> Result<(), Failure> {
    let model = load(path)?;
    if n == 0 {
        return Err(input(anyhow!("-n must be at least 1")));
    }
    let cfg = config(&model, None, None, run);
    if cfg.max_steps == 0 {
        return Err(input(anyhow!("--max-steps must be positive")));
    }
    let compiled = Compiled::new(&model.network).map_err(check)?;
    let traces = simulate(&compiled, n, cfg.seed, cfg.max_steps, cfg.jobs).map_err(check)?;
    match output {
        Some(p) => {
            export_traces_csv(&compiled, &traces, &p).map_err(check)?;
            eprintln!("wrote {n} traces to {} (seed {})", p.display(), cfg.seed);
        }
        None => {
            write_traces_csv(&compiled, &traces, std::io::stdout().lock()).map_err(check)?;
        }
    }
    Ok(())
}
