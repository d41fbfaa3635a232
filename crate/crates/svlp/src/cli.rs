//! Command-line surface: data generation, training, evaluation, and the
//! developer verification suites.
//!
//! Exit codes are stable API: 0 success, 1 verification failure, 2 usage or
//! config error, 3 IO failure, 4 numerical failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::encoders::Binding;
use crate::error::{Error, Result};
use crate::metrics::ThresholdRule;
use crate::numcore::checkpoint;
use crate::numcore::tensor::Dtype;
use crate::synthdata;
use crate::trainer::{self, EvalOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser)]
#[command(
    name = "svlp",
    version,
    about = "Rehearsal-free domain-incremental learning on a miniature dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset directory.
    GenData {
        /// Named preset: protocol-synth-4, protocol-synth-8, or synth-unseen.
        #[arg(long)]
        preset: String,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset directory according to a config file.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.txt.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints and reports.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training mode.
        #[arg(long)]
        mode: Option<String>,
        /// Finished joint-training run directory used as the forgetting
        /// reference.
        #[arg(long)]
        jt_ref: Option<PathBuf>,
        /// Ablation switches (repeatable): no-da, no-ds, no-mix, no-fixed,
        /// no-visual, no-sewc.
        #[arg(long = "ablate")]
        ablate: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write report files; defaults to the checkpoint's parent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of domains to evaluate.
        #[arg(long)]
        domains: Option<String>,
        /// Threshold rule: `eer` or `fixed:<v>`.
        #[arg(long, default_value = "eer")]
        threshold: String,
        /// Force routing to each sample's true domain.
        #[arg(long)]
        oracle_routing: bool,
        /// Joint-training run directory for the forgetting gap column.
        #[arg(long)]
        jt_ref: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify {
        /// Suite: grad, sewc, metrics, or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Numerical(_) | Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parse arguments from the process environment and run; returns the exit
/// code via `std::process::exit`.
pub fn run() -> ! {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { preset, out, force } => cmd_gen_data(&preset, &out, force),
        Command::Train {
            config,
            data,
            out,
            mode,
            jt_ref,
            ablate,
        } => cmd_train(&config, data.as_deref(), &out, mode.as_deref(), jt_ref.as_deref(), &ablate),
        Command::Eval {
            ckpt,
            data,
            out,
            domains,
            threshold,
            oracle_routing,
            jt_ref,
        } => cmd_eval(
            &ckpt,
            &data,
            out.as_deref(),
            domains.as_deref(),
            &threshold,
            oracle_routing,
            jt_ref.as_deref(),
        ),
        Command::Verify { suite } => cmd_verify(&suite),
    }
}

pub fn cmd_gen_data(preset: &str, out: &Path, force: bool) -> Result<i32> {
    let specs = synthdata::preset(preset)?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::io(
                out,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is not empty (pass --force to overwrite)",
                ),
            ));
        }
    }
    synthdata::write_dataset_dir(&specs, out)?;
    println!(
        "wrote {} domains to {} ({} samples per domain train/test: {}/{})",
        specs.len(),
        out.display(),
        specs.len(),
        specs[0].n_train,
        specs[0].n_test
    );
    Ok(EXIT_OK)
}

fn apply_ablations(cfg: &mut ExperimentConfig, tags: &[String]) -> Result<()> {
    for tag in tags {
        match tag.as_str() {
            "no-da" => cfg.train.no_da = true,
            "no-ds" => cfg.train.no_ds = true,
            "no-mix" => cfg.train.no_mix = true,
            "no-fixed" => cfg.train.no_fixed = true,
            "no-visual" => cfg.train.no_visual = true,
            "no-sewc" => cfg.train.no_sewc = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected no-da, no-ds, no-mix, no-fixed, no-visual, no-sewc)"
                )))
            }
        }
    }
    Ok(())
}

pub fn cmd_train(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    mode: Option<&str>,
    jt_ref: Option<&Path>,
    ablate: &[String],
) -> Result<i32> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(mode) = mode {
        cfg.train.mode = mode.parse()?;
    }
    apply_ablations(&mut cfg, ablate)?;
    cfg.validate()?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(cfg.data.dir.clone().ok_or_else(|| {
            Error::Config("no --data flag and no [data].dir in the config".to_string())
        })?),
    };
    let reports = trainer::run_training(&data_dir, &cfg, out, jt_ref)?;
    if let Some(last) = reports.last() {
        println!("{}", last.render_text());
    }
    println!("run directory: {}", out.display());
    Ok(EXIT_OK)
}

fn parse_threshold(spec: &str) -> Result<ThresholdRule> {
    if spec == "eer" {
        return Ok(ThresholdRule::Eer);
    }
    if let Some(v) = spec.strip_prefix("fixed:") {
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad fixed threshold `{v}`")))?;
        return Ok(ThresholdRule::Fixed(v));
    }
    Err(Error::Config(format!(
        "unknown threshold rule `{spec}` (expected `eer` or `fixed:<v>`)"
    )))
}

/// Element width of the stored weights, read from the checkpoint itself.
fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    let entries = checkpoint::read_checkpoint(path)?;
    let probe = entries
        .iter()
        .find(|e| e.name == "img.cls")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no `img.cls` entry".to_string()))?;
    Ok(probe.data.dtype())
}

pub fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    out: Option<&Path>,
    domains: Option<&str>,
    threshold: &str,
    oracle_routing: bool,
    jt_ref: Option<&Path>,
) -> Result<i32> {
    let opts = EvalOptions {
        threshold: parse_threshold(threshold)?,
        oracle_routing,
        domains: domains.map(|d| d.split(',').map(|s| s.trim().to_string()).collect()),
    };
    let out_dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    match checkpoint_dtype(ckpt)? {
        Dtype::F32 => eval_typed::<f32>(ckpt, data, &out_dir, &opts, jt_ref),
        Dtype::F64 => eval_typed::<f64>(ckpt, data, &out_dir, &opts, jt_ref),
        Dtype::U8 => Err(Error::Checkpoint("weights cannot be u8".to_string())),
    }
}

fn eval_typed<T: crate::numcore::tensor::Real>(
    ckpt: &Path,
    data: &Path,
    out_dir: &Path,
    opts: &EvalOptions,
    jt_ref: Option<&Path>,
) -> Result<i32> {
    let run = trainer::load_checkpoint::<T>(ckpt)?;
    let names = synthdata::read_manifest(data)?;
    let mut tests = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let (_, test) = synthdata::load_domain(data, name, i + 1)?;
        tests.push(test);
    }
    let reference = match jt_ref {
        Some(dir) => Some(trainer::load_reference_hters(dir)?),
        None => None,
    };
    let (report, scores) =
        trainer::evaluate(&run.state, &tests, run.mode, opts, reference.as_ref())?;
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "eval".to_string());
    let report_path = out_dir.join(format!("{stem}.eval.report.csv"));
    std::fs::write(&report_path, report.to_csv()).map_err(|e| Error::io(&report_path, e))?;
    trainer::write_scores_csv(&out_dir.join(format!("{stem}.eval.scores.csv")), &scores, &names)?;
    print!("{}", report.render_text());
    println!("report: {}", report_path.display());
    Ok(EXIT_OK)
}

// ---- verification suites ----------------------------------------------------

fn report_check(name: &str, max_err: f64, bound: f64, failures: &mut Vec<String>) {
    let ok = max_err < bound;
    println!(
        "[{}] {name}: max error {max_err:.3e} (bound {bound:.0e})",
        if ok { "pass" } else { "FAIL" }
    );
    if !ok {
        failures.push(name.to_string());
    }
}

pub fn cmd_verify(suite: &str) -> Result<i32> {
    if !["grad", "sewc", "metrics", "all"].contains(&suite) {
        return Err(Error::Config(format!(
            "unknown suite `{suite}` (expected grad, sewc, metrics, or all)"
        )));
    }
    let mut failures = Vec::new();
    if suite == "grad" || suite == "all" {
        verify_grad(&mut failures)?;
    }
    if suite == "sewc" || suite == "all" {
        verify_sewc(&mut failures)?;
    }
    if suite == "metrics" || suite == "all" {
        verify_metrics(&mut failures)?;
    }
    if failures.is_empty() {
        println!("all checks passed");
        Ok(EXIT_OK)
    } else {
        eprintln!("failing checks: {}", failures.join(", "));
        Ok(EXIT_VERIFY)
    }
}

/// A small two-block model with one trained-ish domain and an active penalty,
/// checked against central finite differences in f64.
fn verify_grad(failures: &mut Vec<String>) -> Result<()> {
    let fixture = crate::verifykit::TotalLossFixture::build()?;
    let report = fixture.finite_diff(200, 1e-5)?;
    report_check("total-loss gradient vs finite differences", report.max_rel_err, 1e-4, failures);
    println!("  checked {} coordinates", report.checked);
    Ok(())
}

fn verify_sewc(failures: &mut Vec<String>) -> Result<()> {
    use crate::sewc::{dense_ewc_penalty, sewc_penalty, ConsolidationState, FisherSnapshot};
    let mut rng = crate::rng::SplitMix64::new(2601);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let n = 40;
        let theta: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut store = crate::numcore::ParameterStore::<f64>::new();
        store.register(
            "w",
            crate::numcore::Tensor::new(vec![n], theta).unwrap(),
            true,
        )?;
        let mut state = ConsolidationState::new((0..n).collect(), 1.0)?;
        for d in 1..=3 {
            state.add_snapshot(FisherSnapshot {
                domain: d,
                fisher: (0..n).map(|_| rng.next_f64()).collect(),
                optimum: (0..n).map(|_| rng.normal()).collect(),
            })?;
        }
        let terms = state.penalty_terms(&store, false)?;
        let mut tape = crate::numcore::Tape::<f64>::new();
        let mut binding = Binding::new(&store, BTreeSet::new());
        let selective = match sewc_penalty(&mut tape, &mut binding, &terms)? {
            Some(id) => tape.value(id).scalar_value()?,
            None => 0.0,
        };
        let dense = dense_ewc_penalty(&store, &state.s_indices, &state.snapshots)?;
        worst = worst.max((selective - dense).abs());
    }
    report_check("selective p=1 vs dense reference", worst, 1e-12, failures);

    // brute-force Fisher oracle on a 10-parameter linear model
    let worst = crate::verifykit::fisher_oracle_error()?;
    report_check("fisher vs brute-force squared gradients", worst, 1e-10, failures);
    Ok(())
}

fn verify_metrics(failures: &mut Vec<String>) -> Result<()> {
    use crate::metrics::delta_m;
    let dm1 = delta_m(&[0.0043, 0.0233], &[0.0043, 0.0])? * 100.0;
    let dm2 = delta_m(&[0.0607, 0.0], &[0.0043, 0.0])? * 100.0;
    report_check("forgetting-gap table arithmetic (1.17)", (dm1 - 1.17).abs(), 0.005 + 1e-12, failures);
    report_check("forgetting-gap table arithmetic (2.83)", (dm2 - 2.83).abs(), 0.005 + 1e-12, failures);

    let worst = crate::verifykit::metric_oracle_error()?;
    report_check("hter/eer/auc vs exhaustive oracles", worst, 1e-12, failures);
    Ok(())
}
