//! Command-line driver for reproducible denoising experiments: dataset
//! preparation, operator search, training, gradient validation, and
//! report aggregation. Every artifact is a pure function of the config
//! file and the base seed.

use clap::{Parser, Subcommand};
use onn_core::config::ExperimentConfig;
use onn_core::denoise::{
    corrupt_dataset, load_dataset, run_protocol, save_grayscale, to_internal, ModelPlan,
    NoiseModel, ProtocolConfig,
};
use onn_core::gradcheck::{check_library, GradCheckConfig};
use onn_core::network::save_checkpoint_file;
use onn_core::report::{
    read_restarts_csv, summarize, write_improvement_table, write_protocol_outputs,
    write_summary_csv,
};
use onn_core::spm::{build_spec, configure_elite, run_spm, Assignment, SpmProblem};
use onn_core::tensor::Tensor;
use onn_core::Error as CoreError;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "onn", about = "operational neural networks for severe image denoising")]
struct Cli {
    /// experiment config file (key = value sections)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// base seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker thread count override (also via ONN_WORKERS)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// output directory override
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// extra config overrides as section.key=value (repeatable)
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt the dataset and write clean/noisy PNG pairs plus a manifest
    Prepare,
    /// Run the operator search and write the ledger and elite assignment
    Spm,
    /// Run the cross-validated training protocol and write result CSVs
    Train {
        /// elite assignment file for the onn model (default: OUT/elite.json)
        #[arg(long)]
        assignment: Option<PathBuf>,
        /// comma-separated models to train: onn, cnn
        #[arg(long, default_value = "onn,cnn")]
        models: String,
    },
    /// Validate analytic gradients against finite differences
    Gradcheck,
    /// Aggregate result CSVs from a run directory into summary tables
    Report {
        /// directory holding restarts.csv (default: the output directory)
        run_dir: Option<PathBuf>,
        /// extra baseline PSNRs as a CSV of model,test_psnr rows
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<CoreError>()
                .map(|e| match e {
                    CoreError::Config(_) | CoreError::UnknownOperator(_) => EXIT_CONFIG,
                    CoreError::Data(_) | CoreError::Io(_) => EXIT_DATA,
                    CoreError::Numerical(_) => EXIT_NUMERICAL,
                    _ => 1,
                })
                .unwrap_or(1);
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for setting in &cli.overrides {
        config.apply_override(setting)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    } else if config.workers == 0 {
        if let Ok(env_workers) = std::env::var("ONN_WORKERS") {
            config.workers = env_workers
                .parse()
                .map_err(|_| CoreError::Config(format!("bad ONN_WORKERS value {env_workers:?}")))?;
        }
    }
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .ok();
    }

    match cli.command {
        Command::Prepare => cmd_prepare(&config),
        Command::Spm => cmd_spm(&config),
        Command::Train { assignment, models } => cmd_train(&config, assignment, &models),
        Command::Gradcheck => cmd_gradcheck(&config),
        Command::Report { run_dir, baseline } => cmd_report(&config, run_dir, baseline),
    }
}

fn write_manifest(config: &ExperimentConfig, extra: &[(String, String)], path: &Path) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "[dataset]")?;
    writeln!(f, "path = {}", config.dataset_path.display())?;
    writeln!(f, "count = {}", config.dataset_count)?;
    writeln!(f, "[noise]")?;
    match config.noise {
        NoiseModel::Impulse { p } => {
            writeln!(f, "kind = impulse")?;
            writeln!(f, "p = {p}")?;
        }
        NoiseModel::Speckle { shape } => {
            writeln!(f, "kind = speckle")?;
            writeln!(f, "m = {shape}")?;
        }
    }
    writeln!(f, "[architecture]")?;
    writeln!(f, "input = {}", config.architecture.input_shape.0)?;
    writeln!(
        f,
        "hidden = {}",
        config
            .architecture
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )?;
    writeln!(f, "kernel = {}", config.architecture.kernel.0)?;
    writeln!(f, "[spm]")?;
    writeln!(f, "gamma = {}", config.spm.gamma)?;
    writeln!(f, "runs = {}", config.spm.runs)?;
    writeln!(f, "top_k = {}", config.spm.top_k)?;
    writeln!(f, "m_iters = {}", config.spm.m_iters)?;
    writeln!(f, "confinement_threshold = {}", config.spm.confinement_threshold)?;
    writeln!(f, "average_windows = {}", config.spm.average_windows)?;
    writeln!(f, "probe_images = {}", config.probe_images)?;
    writeln!(f, "[optimizer]")?;
    writeln!(f, "optimizer = {}", config.onn_optimizer.kind.id())?;
    writeln!(f, "cnn = {}", config.cnn_optimizer.kind.id())?;
    writeln!(f, "lr = {}", config.onn_optimizer.lr)?;
    writeln!(f, "beta1 = {}", config.onn_optimizer.beta1)?;
    writeln!(f, "beta2 = {}", config.onn_optimizer.beta2)?;
    writeln!(f, "eps = {}", config.onn_optimizer.eps)?;
    writeln!(f, "[protocol]")?;
    writeln!(f, "folds = {}", config.fold_count)?;
    writeln!(f, "folds_to_run = {}", config.folds_to_run)?;
    writeln!(f, "restarts = {}", config.restarts)?;
    writeln!(f, "epochs = {}", config.epochs)?;
    writeln!(f, "[run]")?;
    writeln!(f, "seed = {}", config.seed)?;
    for (key, value) in extra {
        writeln!(f, "{key} = {value}")?;
    }
    Ok(())
}

fn cmd_prepare(config: &ExperimentConfig) -> anyhow::Result<()> {
    config.validate(true)?;
    let images = load_dataset(&config.dataset_path, config.dataset_count)?;
    let images = &images[..config.dataset_count.min(images.len())];
    let noisy = corrupt_dataset(images, &config.noise, config.seed);

    let base = config.out_dir.join("prepared");
    let clean_dir = base.join("clean");
    let noisy_dir = base.join("noisy");
    std::fs::create_dir_all(&clean_dir)?;
    std::fs::create_dir_all(&noisy_dir)?;
    for (i, (c, n)) in images.iter().zip(&noisy).enumerate() {
        save_grayscale(c, &clean_dir.join(format!("{i:04}.png")))?;
        save_grayscale(n, &noisy_dir.join(format!("{i:04}.png")))?;
    }

    let mut extra = vec![("images_written".to_string(), images.len().to_string())];
    if let NoiseModel::Impulse { .. } = config.noise {
        let mut changed = 0usize;
        let mut total = 0usize;
        for (c, n) in images.iter().zip(&noisy) {
            for (&a, &b) in c.data().iter().zip(n.data()) {
                total += 1;
                if a != b {
                    changed += 1;
                }
            }
        }
        extra.push((
            "empirical_corruption_rate".to_string(),
            format!("{}", changed as f64 / total as f64),
        ));
    }
    write_manifest(config, &extra, &base.join("manifest.txt"))?;
    println!(
        "prepared {} clean/noisy pairs under {} ({})",
        images.len(),
        base.display(),
        config.noise.label()
    );
    Ok(())
}

/// Probe data for the search: first `probe_images` of the corpus,
/// corrupted with the base seed and mapped to the training range.
fn probe_data(config: &ExperimentConfig) -> anyhow::Result<(Vec<Tensor>, Vec<Tensor>)> {
    let images = load_dataset(&config.dataset_path, config.probe_images)?;
    let probe = &images[..config.probe_images];
    let noisy = corrupt_dataset(probe, &config.noise, config.seed);
    let inputs: Vec<Tensor> = noisy.iter().map(to_internal).collect();
    let targets: Vec<Tensor> = probe.iter().map(to_internal).collect();
    Ok((inputs, targets))
}

fn cmd_spm(config: &ExperimentConfig) -> anyhow::Result<()> {
    config.validate(true)?;
    let (inputs, targets) = probe_data(config)?;
    let problem = SpmProblem {
        inputs: &inputs,
        targets: &targets,
        optimizer: config.onn_optimizer,
    };
    let (ledger, diagnostics) = run_spm(
        &config.architecture,
        &config.library,
        &config.spm,
        &problem,
        config.seed,
    )?;

    std::fs::create_dir_all(&config.out_dir)?;
    // persist the ledger before deriving anything from it
    ledger.write_csv(std::fs::File::create(config.out_dir.join("ledger.csv"))?)?;
    ledger.write_report(std::fs::File::create(config.out_dir.join("ledger.txt"))?)?;

    let elite = configure_elite(&config.architecture.hidden, &ledger, config.spm.top_k)?;
    let elite_file = std::fs::File::create(config.out_dir.join("elite.json"))?;
    serde_json::to_writer_pretty(elite_file, &elite)?;
    write_manifest(
        config,
        &[(
            "discarded_runs".to_string(),
            diagnostics.discarded_runs.to_string(),
        )],
        &config.out_dir.join("spm_manifest.txt"),
    )?;

    ledger.write_report(std::io::stdout().lock())?;
    println!("elite assignment written to {}", config.out_dir.join("elite.json").display());
    if diagnostics.discarded_runs > 0 {
        println!("note: {} diverged probe runs were redrawn", diagnostics.discarded_runs);
    }
    Ok(())
}

fn load_assignment(path: &Path) -> anyhow::Result<Assignment> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open assignment {}: {e}", path.display())))?;
    let assignment = serde_json::from_reader(file)
        .map_err(|e| CoreError::Data(format!("bad assignment {}: {e}", path.display())))?;
    Ok(assignment)
}

fn cmd_train(
    config: &ExperimentConfig,
    assignment: Option<PathBuf>,
    models_arg: &str,
) -> anyhow::Result<()> {
    config.validate(true)?;
    let mut models = Vec::new();
    for name in models_arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "onn" => {
                let path = assignment
                    .clone()
                    .unwrap_or_else(|| config.out_dir.join("elite.json"));
                let asn = load_assignment(&path)?;
                let spec = build_spec(&config.architecture, &asn)?;
                models.push(ModelPlan {
                    name: "onn".into(),
                    spec,
                    optimizer: config.onn_optimizer,
                });
            }
            "cnn" => models.push(ModelPlan {
                name: "cnn".into(),
                spec: config.architecture.cnn_spec(),
                optimizer: config.cnn_optimizer,
            }),
            other => {
                return Err(
                    CoreError::Config(format!("unknown model {other:?} (use onn, cnn)")).into(),
                )
            }
        }
    }

    let images = load_dataset(&config.dataset_path, config.dataset_count)?;
    let images = &images[..config.dataset_count.min(images.len())];
    let protocol = ProtocolConfig {
        fold_count: config.fold_count,
        folds_to_run: config.folds_to_run,
        restarts: config.restarts,
        epochs: config.epochs,
        base_seed: config.seed,
    };
    let report = run_protocol(images, &models, &config.noise, &protocol)?;

    std::fs::create_dir_all(&config.out_dir)?;
    write_protocol_outputs(&report, &config.out_dir)?;
    for (fold, model, state) in &report.selected_states {
        let path = config.out_dir.join(format!("checkpoint_{model}_fold{fold}.json"));
        save_checkpoint_file(state, &path)?;
    }
    write_manifest(config, &[], &config.out_dir.join("train_manifest.txt"))?;

    let summaries = summarize(&report.restarts);
    write_summary_csv(&summaries, std::io::stdout().lock())?;
    for (fold, base) in &report.noisy_psnr {
        println!("fold {fold}: noisy input psnr {base:.3} dB");
    }
    for (fold, model) in &report.failed_folds {
        println!("warning: fold {fold} model {model}: every restart diverged");
    }
    if summaries.iter().any(|s| s.model == "onn") && summaries.iter().any(|s| s.model == "cnn") {
        let onn = summaries.iter().find(|s| s.model == "onn").unwrap();
        let cnn = summaries.iter().find(|s| s.model == "cnn").unwrap();
        println!(
            "onn over cnn test psnr improvement: {:.2}%",
            onn_core::report::improvement_pct(onn.mean_test_psnr, cnn.mean_test_psnr)
        );
    }
    println!("artifacts written to {}", config.out_dir.display());
    Ok(())
}

fn cmd_gradcheck(config: &ExperimentConfig) -> anyhow::Result<()> {
    config.validate(false)?;
    let reports = check_library(
        config.library.sets(),
        &GradCheckConfig::default(),
        config.seed,
    )?;
    let mut failures = 0;
    for report in &reports {
        println!("{report}");
        if !report.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CoreError::Numerical(format!(
            "{failures} operator set(s) failed the gradient check"
        ))
        .into());
    }
    println!("all {} operator sets passed", reports.len());
    Ok(())
}

fn read_baseline_csv(path: &Path) -> anyhow::Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with("model") {
            continue; // optional header
        }
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| CoreError::Data(format!("bad baseline row {line:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CoreError::Data(format!("bad baseline value in {line:?}")))?;
        out.push((name.trim().to_string(), value));
    }
    Ok(out)
}

fn cmd_report(
    config: &ExperimentConfig,
    run_dir: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> anyhow::Result<()> {
    let dir = run_dir.unwrap_or_else(|| config.out_dir.clone());
    let rows = read_restarts_csv(&dir.join("restarts.csv"))?;
    let summaries = summarize(&rows);
    if summaries.is_empty() {
        return Err(CoreError::Data("no selected restarts in restarts.csv".into()).into());
    }

    // flag folds that are missing models (incomplete runs)
    let folds: std::collections::BTreeSet<usize> =
        rows.iter().map(|r| r.fold).collect();
    for summary in &summaries {
        let model_folds: std::collections::BTreeSet<usize> = rows
            .iter()
            .filter(|r| r.model == summary.model && r.selected)
            .map(|r| r.fold)
            .collect();
        for fold in &folds {
            if !model_folds.contains(fold) {
                println!("warning: incomplete: model {} has no selected restart in fold {fold}", summary.model);
            }
        }
    }

    write_summary_csv(&summaries, std::io::stdout().lock())?;
    let external = match baseline {
        Some(path) => read_baseline_csv(&path)?,
        None => Vec::new(),
    };
    if summaries.iter().any(|s| s.model == "onn") {
        println!();
        println!("improvement of onn over baselines:");
        write_improvement_table(&summaries, "onn", &external, std::io::stdout().lock())?;
    }
    let summary_path = dir.join("summary.csv");
    write_summary_csv(&summaries, std::fs::File::create(&summary_path)?)?;
    println!("summary written to {}", summary_path.display());
    Ok(())
}
