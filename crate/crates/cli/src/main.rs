//! Command-line driver: train models from declarative configs, sweep
//! trained checkpoints over test SNRs, plot the resulting curves, and
//! compare result tables.

mod config;
mod plot;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use deep_jscc::evaluation::{default_snr_grid, envelope, evaluate_sweep_with, EvalOptions};
use deep_jscc::schemes::Feedback;
use deep_jscc::training::{load_checkpoint, load_dataset, save_checkpoint, train_on_with};

use config::{ExperimentConfig, DATA_ROOT_ENV};
use table::{read_results, write_results, LoadedSweep};

#[derive(Parser)]
#[command(
    name = "deep-jscc",
    version,
    about = "Progressive image transmission over simulated wireless channels"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeedbackArg {
    Estimated,
    Perfect,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotMode {
    /// One curve per layer per results file.
    Layers,
    /// Pointwise maximum over layers per file.
    Envelope,
    /// Final-layer curve per file (e.g. receiver-estimate comparisons).
    ResidualM,
    /// Bars of first/second-layer PSNR per file at one SNR.
    LayerCompare,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved config and parameter count, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint over a test-SNR grid into a results table.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path (a JSON sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated test SNRs in dB; default 1-25 dB in 3 dB steps.
        #[arg(long)]
        snrs: Option<String>,
        #[arg(long, default_value_t = 10)]
        realizations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset providing test images.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Evaluate only the first N test images.
        #[arg(long)]
        test_count: Option<usize>,
        /// Residual models: transmitter feedback mode.
        #[arg(long, value_enum, default_value_t = FeedbackArg::Estimated)]
        feedback: FeedbackArg,
        /// Residual models: override the checkpoint's estimate count m.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Render results tables as an SVG figure.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotMode::Layers)]
        mode: PlotMode,
        /// SNR at which layer-compare bars are read (defaults to the
        /// first file's train SNR).
        #[arg(long)]
        at_snr: Option<f64>,
        /// Input results tables.
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Per-SNR PSNR deltas between two results tables.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the delta report to a file instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    /// Bad config or usage: exit code 2.
    Usage(String),
    /// Everything else: exit code 3.
    Runtime(String),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            CliError::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(3)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train { config, dry_run } => cmd_train(&config, dry_run),
        Command::Sweep {
            checkpoint,
            out,
            snrs,
            realizations,
            seed,
            dataset,
            data_root,
            test_count,
            feedback,
            m,
        } => cmd_sweep(
            &checkpoint,
            &out,
            snrs.as_deref(),
            realizations,
            seed,
            &dataset,
            data_root.as_deref(),
            test_count,
            feedback,
            m,
        ),
        Command::Plot { out, mode, at_snr, results } => cmd_plot(&out, mode, at_snr, &results),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn cmd_train(config_path: &Path, dry_run: bool) -> Result<(), CliError> {
    let experiment = ExperimentConfig::from_path(config_path).map_err(CliError::Usage)?;
    let train_config = experiment.resolve().map_err(CliError::Usage)?;

    // parameter count comes from a freshly initialized (untrained) model
    let probe = deep_jscc::schemes::SchemeModel::build(
        train_config.scheme_kind,
        train_config.layer_plan.clone(),
        train_config.codec.clone(),
        train_config.channel.kind,
        train_config.channel.snr_db,
        train_config.seed,
        train_config.residual.m_eval,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;

    if dry_run {
        println!("# resolved configuration\n{}", experiment.to_toml());
        println!("parameter_count = {}", probe.param_count());
        return Ok(());
    }

    let out_dir = &experiment.output_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let root = train_config.dataset.root.clone().unwrap_or_else(|| PathBuf::from("."));
    let data = load_dataset(&train_config.dataset.name, &root)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "training {} (L={}, k={}, {} @ {} dB, {} params) on {} images",
        train_config.scheme_kind,
        train_config.layer_plan.num_layers(),
        train_config.layer_plan.total_symbols(),
        train_config.channel.kind,
        train_config.channel.snr_db,
        probe.param_count(),
        data.train.len(),
    );

    let (model, history) = train_on_with(&train_config, &data, &mut |rec| {
        println!(
            "epoch {:>3} stage {} train {:.6} val {:.6} psnr {:?} ({:.1}s)",
            rec.epoch,
            rec.stage,
            rec.train_loss,
            rec.val_loss,
            rec.val_psnr_per_layer.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
            rec.seconds
        );
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let ckpt = out_dir.join("checkpoint");
    save_checkpoint(&model, &history, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("config.resolved.toml"), experiment.to_toml())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "checkpoint written to {} ({} epochs, best val loss {:.6})",
        ckpt.display(),
        history.epochs.len(),
        history.best_val_loss
    );
    Ok(())
}

fn parse_snrs(text: &str) -> Result<Vec<f64>, CliError> {
    let snrs: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let snrs = snrs.map_err(|_| CliError::Usage(format!("bad --snrs list '{text}'")))?;
    if snrs.is_empty() {
        return Err(CliError::Usage("--snrs list is empty".into()));
    }
    Ok(snrs)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    checkpoint: &Path,
    out: &Path,
    snrs: Option<&str>,
    realizations: usize,
    seed: u64,
    dataset: &str,
    data_root: Option<&Path>,
    test_count: Option<usize>,
    feedback: FeedbackArg,
    m_override: Option<usize>,
) -> Result<(), CliError> {
    if realizations < 1 {
        return Err(CliError::Usage("--realizations must be >= 1".into()));
    }
    let grid = match snrs {
        Some(text) => parse_snrs(text)?,
        None => default_snr_grid(),
    };
    let (mut model, _) = load_checkpoint(checkpoint).map_err(|e| match e {
        deep_jscc::Error::SchemaVersionMismatch { .. } => CliError::Usage(format!(
            "{e}; re-train the checkpoint with this tool version or convert it"
        )),
        other => CliError::Runtime(other.to_string()),
    })?;
    if let Some(m) = m_override {
        if m < 1 {
            return Err(CliError::Usage("--m must be >= 1".into()));
        }
        model.m_eval = m;
    }

    let root = std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .or_else(|| data_root.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let data = load_dataset(dataset, &root).map_err(|e| CliError::Runtime(e.to_string()))?;
    if data.test.is_empty() {
        return Err(CliError::Runtime("test split is empty".into()));
    }
    let count = test_count.unwrap_or(data.test.len()).min(data.test.len());

    let opts = EvalOptions {
        realizations,
        feedback: match feedback {
            FeedbackArg::Estimated => Feedback::Estimated,
            FeedbackArg::Perfect => Feedback::Perfect,
        },
        batch_size: 64,
    };
    let limited = deep_jscc::training::Dataset::from_batch(&data.test.take(count));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sweep = evaluate_sweep_with(&model, &limited, &grid, &opts, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_results(out, &sweep).map_err(CliError::Runtime)?;
    println!(
        "swept {} over {} SNRs x {} realizations on {count} images -> {}",
        sweep.model_id,
        grid.len(),
        realizations,
        out.display()
    );
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<LoadedSweep>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("no results files given".into()));
    }
    paths.iter().map(|p| read_results(p).map_err(CliError::Usage)).collect()
}

fn cmd_plot(
    out: &Path,
    mode: PlotMode,
    at_snr: Option<f64>,
    results: &[PathBuf],
) -> Result<(), CliError> {
    let sweeps = load_all(results)?;
    let svg = match mode {
        PlotMode::Layers => {
            let mut series = Vec::new();
            for s in &sweeps {
                for (l, row) in s.per_layer_psnr.iter().enumerate() {
                    series.push(plot::Series {
                        label: if s.num_layers == 1 {
                            s.model_id.clone()
                        } else {
                            format!("{} layer {}", s.model_id, l + 1)
                        },
                        xs: s.test_snrs_db.clone(),
                        ys: row.clone(),
                        err: s.std_err[l].clone(),
                    });
                }
            }
            plot::line_plot("PSNR vs test SNR", "test SNR (dB)", "PSNR (dB)", &series)
        }
        PlotMode::Envelope => {
            let mut series = Vec::new();
            for s in &sweeps {
                let sweep = to_sweep_result(s);
                let env = envelope(&sweep);
                series.push(plot::Series {
                    label: format!("{} envelope", s.model_id),
                    xs: env.test_snrs_db,
                    ys: env.psnr_db,
                    err: vec![0.0; s.test_snrs_db.len()],
                });
            }
            plot::line_plot("Best-layer envelope", "test SNR (dB)", "PSNR (dB)", &series)
        }
        PlotMode::ResidualM => {
            let mut series = Vec::new();
            for s in &sweeps {
                let last = s.num_layers - 1;
                series.push(plot::Series {
                    label: s.model_id.clone(),
                    xs: s.test_snrs_db.clone(),
                    ys: s.per_layer_psnr[last].clone(),
                    err: s.std_err[last].clone(),
                });
            }
            plot::line_plot("Final-layer PSNR vs test SNR", "test SNR (dB)", "PSNR (dB)", &series)
        }
        PlotMode::LayerCompare => {
            let snr = at_snr.unwrap_or(sweeps[0].train_snr_db);
            let mut groups = Vec::new();
            for s in &sweeps {
                let Some(si) = s.test_snrs_db.iter().position(|&v| v == snr) else {
                    return Err(CliError::Usage(format!(
                        "{}: SNR {snr} dB not in grid {:?}",
                        s.model_id, s.test_snrs_db
                    )));
                };
                let mut values = vec![("layer 1".to_string(), s.per_layer_psnr[0][si])];
                if s.num_layers > 1 {
                    values.push(("layer 2".to_string(), s.per_layer_psnr[1][si]));
                }
                groups.push(plot::BarGroup { label: format!("L={}", s.num_layers), values });
            }
            plot::bar_plot(&format!("First layers at {snr} dB test SNR"), "PSNR (dB)", &groups)
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    std::fs::write(out, svg).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("figure written to {}", out.display());
    Ok(())
}

fn to_sweep_result(s: &LoadedSweep) -> deep_jscc::evaluation::SweepResult {
    deep_jscc::evaluation::SweepResult {
        model_id: s.model_id.clone(),
        scheme: deep_jscc::schemes::SchemeKind::MultiDecoder, // irrelevant for the envelope
        num_layers: s.num_layers,
        train_snr_db: s.train_snr_db,
        channel_kind: deep_jscc::channel::ChannelKind::Awgn,
        test_snrs_db: s.test_snrs_db.clone(),
        per_layer_psnr: s.per_layer_psnr.clone(),
        std_err: s.std_err.clone(),
        realizations_per_point: s.realizations,
        feedback: Feedback::Estimated,
        seed: 0,
    }
}

fn cmd_compare(a_path: &Path, b_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let a = read_results(a_path).map_err(CliError::Usage)?;
    let b = read_results(b_path).map_err(CliError::Usage)?;
    if a.test_snrs_db != b.test_snrs_db {
        return Err(CliError::Usage(format!(
            "grid mismatch: {:?} vs {:?}",
            a.test_snrs_db, b.test_snrs_db
        )));
    }
    // equal layer counts compare pairwise, otherwise final layer vs final
    let pairs: Vec<(usize, usize)> = if a.num_layers == b.num_layers {
        (0..a.num_layers).map(|l| (l, l)).collect()
    } else {
        vec![(a.num_layers - 1, b.num_layers - 1)]
    };
    println!("# A: {} ({}), B: {} ({})", a.model_id, a.scheme, b.model_id, b.scheme);
    let mut report = String::new();
    report.push_str("layer_a,layer_b,test_snr_db,psnr_a,psnr_b,delta_db,significant\n");
    let mut max_abs = 0.0f64;
    for &(la, lb) in &pairs {
        for (si, &snr) in a.test_snrs_db.iter().enumerate() {
            let pa = a.per_layer_psnr[la][si];
            let pb = b.per_layer_psnr[lb][si];
            let delta = pa - pb;
            let sig = delta.abs()
                > 2.0 * (a.std_err[la][si].powi(2) + b.std_err[lb][si].powi(2)).sqrt();
            max_abs = max_abs.max(delta.abs());
            report.push_str(&format!(
                "{},{},{snr},{pa},{pb},{delta},{}\n",
                la + 1,
                lb + 1,
                if sig { "yes" } else { "no" }
            ));
        }
    }
    print!("{report}");
    println!("# max |delta| = {max_abs} dB over {} points", pairs.len() * a.test_snrs_db.len());
    if let Some(path) = out {
        std::fs::write(path, &report).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}
