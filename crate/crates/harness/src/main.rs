use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use htdc_core::sidecar::{sidecar_path, DEFAULT_TOLERANCE};
use htdc_core::{load_trace, validate_trace, verify_against_sidecar, Sidecar};
use htdc_harness::config::Decoder;
use htdc_harness::dataset::to_jsonl;
use htdc_harness::error::HarnessError;
use htdc_harness::metrics::calibrate_w_min;
use htdc_harness::report::{summary_rows, write_run_artifacts};
use htdc_harness::sweep::{parse_values, sweep_md, write_sweep_artifacts};
use htdc_harness::{generate, load_dataset, run, sweep, BackendSpec, HarnessConfig, Recipe, SweepAxis};

#[derive(Debug, Parser)]
#[command(
    name = "htdc",
    version,
    about = "Hesitation-triggered differential calibration: runs, sweeps and trace tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset, one task instance per line.
    #[arg(long)]
    dataset: PathBuf,
    /// synthetic | synthetic:<scenario.json> | trace:<path>
    #[arg(long, default_value = "synthetic")]
    backend: String,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides run.decoder (htdc | regular).
    #[arg(long)]
    decoder: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a dataset and write report.json, report.md and per_instance.csv.
    Run {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// gate_mode_static_vs_dynamic | sigma_noise | layer_depth_k | lambda | epsilon | w_min
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a recipe.
    GenSynthetic {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the recipe seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a trace file; exit 0 iff valid.
    ValidateTrace {
        path: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print (or write) the default config.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load a trace; with --verify, recompute its sidecar reference values.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Defaults to <trace>.ref.json.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Pick w_min so that a target fraction of the dataset's steps trigger.
    CalibrateGate {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        target_rate: f64,
        /// Write the config with the calibrated w_min here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<HarnessConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(d) = &args.decoder {
        cfg.run.decoder = match d.as_str() {
            "htdc" => Decoder::Htdc,
            "regular" => Decoder::Regular,
            _ => {
                return Err(HarnessError::Usage(format!(
                    "decoder must be htdc or regular, got `{d}`"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<ExitCode, HarnessError> {
    match cmd {
        Command::Run { args, out } => {
            let cfg = load_config(&args)?;
            let spec: BackendSpec = args.backend.parse()?;
            let ds = load_dataset(&args.dataset)?;
            let report = run(&cfg, &ds, &spec)?;
            write_run_artifacts(&out, &report)?;
            for (k, v) in summary_rows(&report) {
                println!("{k:>20}: {v}");
            }
            println!("{:>20}: {}", "fingerprint", report.fingerprint);
            if report.failed > 0 {
                eprintln!(
                    "{} instance(s) failed; see {}",
                    report.failed,
                    out.join("report.md").display()
                );
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            args,
            axis,
            values,
            out,
        } => {
            let cfg = load_config(&args)?;
            let spec: BackendSpec = args.backend.parse()?;
            let axis: SweepAxis = axis.parse()?;
            let ds = load_dataset(&args.dataset)?;
            let report = sweep(&cfg, &ds, &spec, axis, &parse_values(&values))?;
            write_sweep_artifacts(&out, &report)?;
            print!("{}", sweep_md(&report));
            if report.rows.iter().any(|r| r.report.failed > 0) {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenSynthetic { recipe, out, seed } => {
            let mut r = Recipe::load(&recipe)?;
            if let Some(s) = seed {
                r.seed = s;
            }
            let ds = generate(&r)?;
            write_text(&out, &to_jsonl(&ds))?;
            info!("wrote {} instances to {}", ds.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateTrace { path, json } => {
            let report = validate_trace(&path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
            } else {
                for v in &report.violations {
                    println!("{}:{}: [{}] {}", path.display(), v.line, v.rule, v.message);
                }
                println!(
                    "{}: {} ({} steps, {} violation(s))",
                    path.display(),
                    if report.valid { "valid" } else { "INVALID" },
                    report.steps,
                    report.violations.len()
                );
            }
            Ok(if report.valid {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::DefaultConfig { out } => {
            let text = HarnessConfig::default().to_json() + "\n";
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            trace,
            sidecar,
            verify,
            tolerance,
        } => {
            let tb = load_trace(&trace).map_err(|e| HarnessError::Data(format!("{}: {e}", trace.display())))?;
            println!(
                "{}: {} steps, vocab {}, layers {:?}",
                trace.display(),
                tb.num_steps(),
                tb.header().vocab_size,
                tb.layers()
            );
            if !verify {
                return Ok(ExitCode::SUCCESS);
            }
            let sc_path = sidecar.unwrap_or_else(|| sidecar_path(&trace));
            let sc = Sidecar::load(&sc_path).map_err(|e| HarnessError::Data(format!("{}: {e}", sc_path.display())))?;
            let r = verify_against_sidecar(&tb, &sc, tolerance).map_err(|e| HarnessError::Data(e.to_string()))?;
            println!(
                "verified {} values over {} steps: max deviation {:.3e} (tolerance {:.1e}), argmax mismatches {:?}",
                r.values_checked, r.steps_checked, r.max_deviation, r.tolerance, r.argmax_mismatches
            );
            if let Some((step, branch, label)) = &r.worst {
                println!("worst: step {step}, branch {branch}, candidate `{label}`");
            }
            println!("{}", if r.passed { "PASS" } else { "FAIL" });
            Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::CalibrateGate { args, target_rate, out } => {
            let mut cfg = load_config(&args)?;
            let spec: BackendSpec = args.backend.parse()?;
            let ds = load_dataset(&args.dataset)?;
            let mut probe = cfg.clone();
            probe.run.decoder = Decoder::Regular;
            let report = run(&probe, &ds, &spec)?;
            let ws: Vec<f64> = report
                .instances
                .iter()
                .filter(|i| i.error.is_none())
                .map(|i| i.w_t)
                .collect();
            let w_min = calibrate_w_min(&ws, target_rate)
                .ok_or_else(|| HarnessError::Usage(format!("cannot calibrate to rate {target_rate}")))?;
            cfg.hesitation.w_min = w_min;
            let hit = ws.iter().filter(|&&w| w > w_min).count();
            println!(
                "w_min = {w_min:e} ({hit} of {} steps trigger, rate {:.4})",
                ws.len(),
                hit as f64 / ws.len() as f64
            );
            if let Some(p) = out {
                write_text(&p, &(cfg.to_json() + "\n"))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
