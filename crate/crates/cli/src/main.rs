use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use henn_core::cost::{Calibration, CostError, CostReport};
use henn_core::ddg::RescaleError;
use henn_core::lowering::LoweringError;
use henn_core::network::{parse_network, NetworkSpec};
use henn_core::pipeline::{compile, compile_run, shadow_run, Error, ShadowRun};
use henn_core::search::{greedy_search, SearchError, SearchOptions, SearchTrace};
use henn_core::shadow::{EvalMode, ShadowError};
use henn_core::weights::{Tensor, Weights};
use henn_core::PipelineConfig;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "henn",
    version,
    about = "Compile, cost and search CNNs for leveled CKKS inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a network and write its cost report and graph dump.
    Compile {
        network: PathBuf,
        #[command(flatten)]
        opts: Common,
        /// Graph dump path; defaults to the report path with a `.ddg.json` suffix.
        #[arg(long)]
        ddg: Option<PathBuf>,
    },
    /// Greedily replace mobile modules by single convolutions.
    Search {
        network: PathBuf,
        #[command(flatten)]
        opts: Common,
        /// Re-cost the current network at every step.
        #[arg(long)]
        literal: bool,
    },
    /// Run the compiled graph on an input and compare with the dense reference.
    Eval {
        network: PathBuf,
        /// `{"shape":[C,H,W],"data":[...]}`
        input: PathBuf,
        #[command(flatten)]
        opts: Common,
        /// Weights file; seeded random weights when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Relative tolerance on valid slots.
        #[arg(long, default_value_t = 1.0 / 1024.0)]
        tol: f64,
        /// Evaluate in exact rational arithmetic instead of fixed point.
        #[arg(long)]
        exact: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Base configuration file; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    waterline: Option<u32>,
    /// Cost constants as `k1,k2`.
    #[arg(long, value_parser = parse_calib)]
    calib: Option<Calibration>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; the report goes to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_calib(s: &str) -> Result<Calibration, String> {
    let (a, b) = s.split_once(',').ok_or("expected k1,k2")?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok(Calibration {
        k1: num(a)?,
        k2: num(b)?,
    })
}

/// A failure reported as one JSON object on standard error.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
    extra: Option<Value>,
}

impl Failure {
    fn new(kind: &'static str, message: impl ToString, code: u8) -> Self {
        Failure {
            kind,
            message: message.to_string(),
            code,
            extra: None,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new("io", format!("{}: {e}", path.display()), 2)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Config(_) => ("config", 2),
            Error::Network(_) => ("network", 2),
            Error::Weights(_) => ("weights", 2),
            Error::Lowering(LoweringError::InvalidNetwork(_)) => ("network", 2),
            Error::Lowering(LoweringError::Weights(_)) => ("weights", 2),
            Error::Lowering(_) => ("lowering", 2),
            Error::Rescale(RescaleError::Graph(_)) => ("internal", 3),
            Error::Rescale(_) => ("config", 2),
            Error::Cost(CostError::Capacity { .. }) => ("capacity", 2),
            Error::Shadow(ShadowError::Overflow { .. }) => ("overflow", 2),
            Error::Shadow(
                ShadowError::Reference(_)
                | ShadowError::Weights(_)
                | ShadowError::InputLength { .. },
            ) => ("shape", 2),
            Error::Merge(_) | Error::InvalidGraph(_) | Error::Cost(_) | Error::Shadow(_) => {
                ("internal", 3)
            }
        };
        Failure::new(kind, e, code)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn load_network(path: &Path) -> Result<NetworkSpec, Failure> {
    parse_network(&read(path)?).map_err(|e| Failure::new("network", e, 2))
}

fn resolve(opts: &Common) -> Result<PipelineConfig, Failure> {
    let mut config = match &opts.config {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::new("config", e, 2))?,
        None => PipelineConfig::default(),
    };
    if opts.no_merge {
        config.merge_enabled = false;
    }
    if let Some(w) = opts.waterline {
        config.waterline_bits = w;
    }
    if let Some(c) = opts.calib {
        config.calibration = c;
    }
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    config
        .validate()
        .map_err(|e| Failure::new("config", e, 2))?;
    Ok(config)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports always serialize");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

/// Writes the report to `--out`, or prints it when no path was given.
fn emit(out: &Option<PathBuf>, text: &str, summary: &str) -> Result<(), Failure> {
    match out {
        Some(p) => {
            write(p, text)?;
            println!("{summary}");
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CompileReport<'a> {
    network: &'a str,
    config: &'a PipelineConfig,
    merged_tails: usize,
    #[serde(flatten)]
    cost: &'a CostReport,
}

fn run_compile(network: &Path, opts: &Common, ddg: &Option<PathBuf>) -> Result<u8, Failure> {
    let spec = load_network(network)?;
    let config = resolve(opts)?;
    let c = compile(&spec, &config, None)?;
    let r = &c.report;
    let report = CompileReport {
        network: &spec.name,
        config: &config,
        merged_tails: c.merged_tails,
        cost: r,
    };
    let summary = format!(
        "{}: depth {}, r {}, N {}, Q {}, cost {:.4e}",
        spec.name, r.depth, r.rescales, r.params.poly_degree_n, r.params.total_q_bits, r.cost_units
    );
    let dump = ddg
        .clone()
        .or_else(|| opts.out.as_ref().map(|p| p.with_extension("ddg.json")));
    if let Some(p) = &dump {
        write(p, &c.graph.to_json())?;
    }
    emit(&opts.out, &to_json(&report), &summary)?;
    if let (Some(p), Some(_)) = (&dump, &opts.out) {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

#[derive(Serialize)]
struct SearchReport<'a> {
    network: &'a str,
    config: &'a PipelineConfig,
    literal: bool,
    #[serde(flatten)]
    trace: &'a SearchTrace,
}

fn run_search(network: &Path, opts: &Common, literal: bool) -> Result<u8, Failure> {
    let spec = load_network(network)?;
    let config = resolve(opts)?;
    let options = SearchOptions {
        reevaluate_current: literal,
    };
    let (_, trace) =
        greedy_search(&spec, |s| compile_run(s, &config), options).map_err(|e| match e {
            SearchError::Oracle {
                candidate,
                steps,
                source,
            } => {
                let mut f = Failure::from(source);
                f.extra = Some(json!({ "candidate": candidate, "steps": steps }));
                f
            }
            SearchError::Replace { .. } => Failure::new("network", e, 2),
        })?;
    let report = SearchReport {
        network: &spec.name,
        config: &config,
        literal,
        trace: &trace,
    };
    let steps: Vec<String> = trace
        .steps
        .iter()
        .map(|s| format!("{}{}", if s.accepted { "+" } else { "-" }, s.block_index))
        .collect();
    let summary = format!(
        "{}: cost {:.4e} -> {:.4e}, steps [{}]",
        spec.name,
        trace.initial_cost,
        trace.final_cost,
        steps.join(" ")
    );
    emit(&opts.out, &to_json(&report), &summary)?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    network: &'a str,
    config: &'a PipelineConfig,
    /// `"seeded"` or the weights file.
    weights: String,
    #[serde(flatten)]
    run: &'a ShadowRun,
}

fn run_eval(
    network: &Path,
    input: &Path,
    opts: &Common,
    weights: &Option<PathBuf>,
    tol: f64,
    exact: bool,
) -> Result<u8, Failure> {
    let spec = load_network(network)?;
    let config = resolve(opts)?;
    let tensor: Tensor =
        serde_json::from_str(&read(input)?).map_err(|e| Failure::new("input", e, 2))?;
    let s = spec.input();
    if tensor.shape != [s.c, s.h, s.w] || tensor.data.len() != s.c * s.h * s.w {
        return Err(Failure::new(
            "shape",
            format!(
                "input has shape {:?} with {} values, network expects [{}, {}, {}]",
                tensor.shape,
                tensor.data.len(),
                s.c,
                s.h,
                s.w
            ),
            2,
        ));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Failure::new("config", "tolerance must be non-negative", 2));
    }
    let (w, source) = match weights {
        Some(p) => (
            Weights::from_json(&read(p)?).map_err(|e| Failure::new("weights", e, 2))?,
            p.display().to_string(),
        ),
        None => (
            Weights::random(&spec, config.seed, config.quant.weight_scale_bits),
            "seeded".to_string(),
        ),
    };
    let mode = if exact {
        EvalMode::Exact
    } else {
        EvalMode::Quantized
    };
    let run = shadow_run(&spec, &config, &w, &tensor.data, mode, tol)?;
    let out = EvalOutput {
        network: &spec.name,
        config: &config,
        weights: source,
        run: &run,
    };
    let summary = format!(
        "{}: max abs err {:.3e}, max rel err {:.3e}, tolerance {:.3e}: {}",
        spec.name,
        run.report.max_abs_err,
        run.report.max_rel_err,
        tol,
        if run.report.passed { "pass" } else { "FAIL" }
    );
    emit(&opts.out, &to_json(&out), &summary)?;
    Ok(if run.report.passed { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Compile { network, opts, ddg } => run_compile(network, opts, ddg),
        Command::Search {
            network,
            opts,
            literal,
        } => run_search(network, opts, *literal),
        Command::Eval {
            network,
            input,
            opts,
            weights,
            tol,
            exact,
        } => run_eval(network, input, opts, weights, *tol, *exact),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let mut v = json!({ "error": f.kind, "message": f.message });
            if let Some(Value::Object(extra)) = f.extra {
                v.as_object_mut().expect("object").extend(extra);
            }
            eprintln!("{v}");
            ExitCode::from(f.code)
        }
    }
}
