use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use quantcal::dataset::CalibrationSet;
use quantcal::esc::{self, ErrorMetric, EscConfig};
use quantcal::model::ModelGraph;
use quantcal::quant::{MAX_BITS, MIN_BITS};
use quantcal::report::{self, all_methods, MethodKind, RunManifest};
use quantcal::synth::{synthesize, SynthTask};

#[derive(Parser)]
#[command(
    name = "quantcal",
    version,
    about = "Post-training quantization calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model with calibration and evaluation sets.
    Synth {
        #[arg(long)]
        task: SynthTask,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Calibrate activation scales with one method.
    Calibrate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        method: MethodKind,
        /// Percentile for `--method percentile`; all defaults when omitted.
        #[arg(long)]
        percentile: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every method and rank them by evaluation error.
    Compare {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        percentile: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Cumulative distribution of normalized activations at a layer input.
    Cdf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = esc::DEFAULT_SAMPLES)]
        n: usize,
        /// Output directory; the CSV goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ESC and write the per-generation optimizer trace.
    Trace {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(MIN_BITS as i64..=MAX_BITS as i64))]
    bits: u32,
    /// Weight bit-width; defaults to `--bits`.
    #[arg(long, value_parser = clap::value_parser!(u32).range(MIN_BITS as i64..=MAX_BITS as i64))]
    weight_bits: Option<u32>,
    #[arg(long, default_value_t = esc::DEFAULT_SIGMA0)]
    sigma0: f64,
    #[arg(long, default_value_t = esc::DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = esc::DEFAULT_SAMPLES)]
    n: usize,
    #[arg(long, default_value = "mse_vs_target")]
    metric: ErrorMetric,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> EscConfig {
        EscConfig {
            act_bits: self.bits,
            weight_bits: self.weight_bits.unwrap_or(self.bits),
            sigma0: self.sigma0,
            budget: self.budget,
            n: self.n,
            seed: self.seed,
            metric: self.metric,
            lambda: None,
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

struct Loaded {
    graph: ModelGraph,
    cal: CalibrationSet,
    eval: Option<CalibrationSet>,
}

fn load(inputs: &Inputs, manifest: &mut RunManifest) -> Result<Loaded> {
    manifest
        .inputs
        .insert("model".into(), display(&inputs.model));
    manifest
        .inputs
        .insert("calib".into(), display(&inputs.calib));
    let graph = ModelGraph::load(&inputs.model)?;
    let cal = CalibrationSet::load(&inputs.calib)?;
    let eval = match &inputs.eval {
        Some(p) => {
            manifest.inputs.insert("eval".into(), display(p));
            Some(CalibrationSet::load(p)?)
        }
        None => None,
    };
    Ok(Loaded { graph, cal, eval })
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("QUANTCAL_THREADS") else {
        return Ok(());
    };
    let threads: usize = v
        .trim()
        .parse()
        .with_context(|| format!("QUANTCAL_THREADS must be a non-negative integer, got '{v}'"))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { task, seed, out } => {
            let artifacts = synthesize(task, seed)?;
            let paths = artifacts.write(&out)?;
            let mut manifest = RunManifest::new(
                "synth",
                argv,
                EscConfig {
                    seed,
                    metric: task.metric(),
                    ..EscConfig::default()
                },
            );
            manifest.outputs = [&paths.model, &paths.calibration, &paths.evaluation]
                .iter()
                .map(|p| display(p))
                .collect();
            write(
                &out.join("synth.manifest.json"),
                &report::to_json(&manifest),
            )?;
            println!("{}", report::to_json(&paths).trim_end());
        }
        Command::Calibrate {
            inputs,
            method,
            percentile,
            common,
        } => {
            if percentile.is_some() && method != MethodKind::Percentile {
                bail!("--percentile only applies to --method percentile");
            }
            let mut manifest = RunManifest::new("calibrate", argv, common.config());
            let data = load(&inputs, &mut manifest)?;
            let path = common.out.join("calibrate.json");
            manifest.outputs.push(display(&path));
            let report = report::calibrate(
                manifest,
                &data.graph,
                &data.cal,
                data.eval.as_ref(),
                &method.expand(percentile),
            )?;
            write(&path, &report::to_json(&report))?;
            println!("{}", path.display());
        }
        Command::Compare {
            inputs,
            percentile,
            common,
        } => {
            let mut manifest = RunManifest::new("compare", argv, common.config());
            let data = load(&inputs, &mut manifest)?;
            let Some(eval) = &data.eval else {
                bail!("compare needs --eval");
            };
            let json_path = common.out.join("compare.json");
            let csv_path = common.out.join("compare.csv");
            manifest.outputs = vec![display(&json_path), display(&csv_path)];
            let report = report::compare(
                manifest,
                &data.graph,
                &data.cal,
                eval,
                &all_methods(percentile),
            )?;
            write(&csv_path, &report.to_csv()?)?;
            write(
                &common.out.join("compare.csv.manifest.json"),
                &report::to_json(&report.manifest),
            )?;
            write(&json_path, &report::to_json(&report))?;
            print!("{}", report.to_csv()?);
        }
        Command::Cdf {
            model,
            calib,
            layer,
            n,
            out,
        } => {
            let mut manifest = RunManifest::new(
                "cdf",
                argv,
                EscConfig {
                    n,
                    ..EscConfig::default()
                },
            );
            let data = load(
                &Inputs {
                    model,
                    calib,
                    eval: None,
                },
                &mut manifest,
            )?;
            let cal = data.cal.take(n.min(data.cal.len()))?;
            let points = data.graph.activation_cdf(&cal, &layer)?;
            let mut csv = String::from("normalized_value,cumulative_fraction\n");
            for (v, f) in points {
                csv.push_str(&format!("{v},{f}\n"));
            }
            match out {
                Some(dir) => {
                    let path = dir.join(format!("cdf_{layer}.csv"));
                    manifest.outputs.push(display(&path));
                    write(&path, &csv)?;
                    write(
                        &dir.join(format!("cdf_{layer}.csv.manifest.json")),
                        &report::to_json(&manifest),
                    )?;
                    println!("{}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Trace { inputs, common } => {
            let mut manifest = RunManifest::new("trace", argv, common.config());
            let data = load(&inputs, &mut manifest)?;
            let trace_path = common.out.join("trace.jsonl");
            let report_path = common.out.join("trace.json");
            manifest.outputs = vec![display(&trace_path), display(&report_path)];
            let result = esc::esc_calibrate(&data.graph, &data.cal, &manifest.config)?;
            let mut lines = String::new();
            for record in &result.trace {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            write(&trace_path, &lines)?;
            write(
                &common.out.join("trace.jsonl.manifest.json"),
                &report::to_json(&manifest),
            )?;
            #[derive(serde::Serialize)]
            struct TraceReport<'a> {
                manifest: &'a RunManifest,
                result: &'a esc::EscResult,
            }
            write(
                &report_path,
                &report::to_json(&TraceReport {
                    manifest: &manifest,
                    result: &result,
                }),
            )?;
            println!("{}", trace_path.display());
        }
    }
    Ok(())
}

fn error_json(kind: &str, err: &dyn std::fmt::Display, chain: Vec<String>) -> String {
    serde_json::json!({
        "error": {
            "kind": kind,
            "message": err.to_string(),
            "causes": chain,
        }
    })
    .to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                error_json("usage", &e.render().to_string().trim_end(), vec![])
            );
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    match run(cli, argv) {
        Ok(()) => {
            info!("finished in {:.3} s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", error_json("runtime", &e, chain));
            ExitCode::FAILURE
        }
    }
}
