//! `tsalign`: synthesize data, run both training stages, evaluate, check
//! gradients and inspect checkpoints from one JSON config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tsalign::backbone::{inspect_checkpoint, load_checkpoint, save_checkpoint};
use tsalign::config::{DataSource, OutputLayout, RunConfig, Transfer};
use tsalign::data::{sliding_windows, write_csv, PreparedData, WindowSource};
use tsalign::eval::{evaluate_forecast, HorizonMetrics, MetricsReport};
use tsalign::pipeline;
use tsalign::train::{alignment_loss, alignment_samples, forecast_loss, gradient_check, ForecastSample, JsonLines};
use tsalign::{Error, ForecastShape, Model, Stage};

const DATA_DIR_ENV: &str = "TSALIGN_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "tsalign",
    version,
    about = "Two-stage time-series fine-tuning of a frozen causal transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic series as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output file (default: <output_dir>/synthetic.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: next-patch alignment; writes checkpoints/alignment.ckpt.
    Align {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: LP-FT per horizon; writes one checkpoint per horizon and a report.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Alignment checkpoint (default: <output_dir>/checkpoints/alignment.ckpt when present).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score forecast checkpoints on the test split; prints the JSON report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Forecast checkpoints, one per horizon.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Compare analytic gradients with finite differences; exits 1 on failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Print a checkpoint manifest: tensor names, shapes and freeze flags.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// CSV file to load instead of the configured source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fraction of the training split to keep (prefix).
    #[arg(long)]
    few_shot: Option<f64>,
    /// Comma-separated prediction lengths.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_transfer)]
    transfer: Option<Transfer>,
    /// Report metrics in raw units.
    #[arg(long)]
    raw_scale: bool,
}

fn parse_transfer(s: &str) -> Result<Transfer, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected required, optional or none, got {s:?}"))
}

impl Common {
    /// File values with flag overrides applied, validated.
    fn load(&self) -> tsalign::Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(path) = &self.data {
            config.data = Some(DataSource::Csv(path.clone()));
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.alignment.seed = seed;
            config.finetune.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(f) = self.few_shot {
            config.split.few_shot_fraction = f;
        }
        if let Some(h) = &self.horizons {
            config.horizons = h.clone();
        }
        if let Some(t) = self.transfer {
            config.transfer = t;
        }
        if self.raw_scale {
            config.raw_scale_metrics = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn prepare(config: &RunConfig) -> tsalign::Result<PreparedData<f32>> {
    let series = pipeline::load_series(config, data_dir().as_deref())?;
    pipeline::prepare_data(config, &series)
}

fn log_sink(layout: &OutputLayout, name: &str) -> tsalign::Result<JsonLines<fs::File>> {
    let path = layout.logs().join(name);
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    Ok(JsonLines::new(file))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> tsalign::Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn cmd_synth(common: &Common, out: Option<&Path>) -> tsalign::Result<()> {
    let config = common.load()?;
    let spec = match &config.data {
        Some(DataSource::Synth(spec)) => spec,
        _ => {
            return Err(Error::Config(
                "synth needs a \"synth\" data source in the config".into(),
            ))
        }
    };
    let series = tsalign::data::generate_synthetic(spec)?;
    let path = out.map_or_else(|| config.output_dir.join("synthetic.csv"), Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    write_csv(&series, &path)?;
    info!(
        "wrote {} rows x {} channels to {}",
        series.len(),
        series.channels(),
        path.display()
    );
    println!("{}", path.display());
    Ok(())
}

fn cmd_align(common: &Common) -> tsalign::Result<()> {
    let config = common.load()?;
    let data = prepare(&config)?;
    let layout = OutputLayout::new(&config.output_dir);
    layout.create()?;
    let mut log = log_sink(&layout, "alignment.jsonl")?;
    let (model, summary) = pipeline::align(&config, &data, &mut log)?;
    let path = layout.checkpoints().join("alignment.ckpt");
    save_checkpoint(&path, &model, Stage::Alignment)?;
    info!(
        "alignment loss {:.6} -> {:.6} over {} steps",
        summary.losses.first().copied().unwrap_or(f64::NAN),
        summary.losses.last().copied().unwrap_or(f64::NAN),
        summary.losses.len()
    );
    println!("{}", path.display());
    Ok(())
}

fn load_aligned(config: &RunConfig, path: &Path) -> tsalign::Result<Model<f32>> {
    let (model, manifest) = load_checkpoint::<f32>(path, Some(config.backbone.layers))?;
    if manifest.stage != Stage::Alignment {
        return Err(Error::Config(format!(
            "{} is a {} checkpoint, expected alignment",
            path.display(),
            manifest.stage.as_str()
        )));
    }
    check_tokenization(config, &model)?;
    Ok(model)
}

fn check_tokenization(config: &RunConfig, model: &Model<f32>) -> tsalign::Result<()> {
    let c = &model.config;
    if (c.t_in, c.patch_len, c.stride) != (config.t_in, config.patch_len, config.stride) {
        return Err(Error::Config(format!(
            "checkpoint uses t_in/patch_len/stride {}/{}/{}, config asks for {}/{}/{}",
            c.t_in, c.patch_len, c.stride, config.t_in, config.patch_len, config.stride
        )));
    }
    Ok(())
}

fn cmd_finetune(common: &Common, checkpoint: Option<&Path>) -> tsalign::Result<()> {
    let config = common.load()?;
    let layout = OutputLayout::new(&config.output_dir);
    let default_ckpt = layout.checkpoints().join("alignment.ckpt");
    let ckpt = match (checkpoint, config.transfer) {
        (_, Transfer::None) => None,
        (Some(p), _) => Some(p.to_path_buf()),
        (None, _) if default_ckpt.exists() => Some(default_ckpt),
        (None, Transfer::Required) => {
            return Err(Error::Config(
                "transfer is required: pass --checkpoint or run align first".into(),
            ))
        }
        (None, Transfer::Optional) => None,
    };
    let aligned = ckpt.as_deref().map(|p| load_aligned(&config, p)).transpose()?;
    let data = prepare(&config)?;
    for &h in &config.horizons {
        data.check_horizon(config.t_in, h)?;
    }
    layout.create()?;
    let mut log = log_sink(&layout, "finetune.jsonl")?;
    let (report, runs) = pipeline::finetune(&config, aligned.as_ref(), &data, &mut log)?;
    for run in &runs {
        let path = layout.checkpoints().join(format!("forecast_h{}.ckpt", run.horizon));
        save_checkpoint(&path, &run.model, Stage::Forecasting)?;
        info!("wrote {}", path.display());
    }
    write_file(&layout.reports().join("metrics.json"), &report.to_json())?;
    write_file(&layout.reports().join("metrics.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoints: &[PathBuf]) -> tsalign::Result<()> {
    let config = common.load()?;
    let mut models = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (model, manifest) = load_checkpoint::<f32>(path, None)?;
        if manifest.stage != Stage::Forecasting || model.config.forecast.is_none() {
            return Err(Error::Config(format!(
                "{} is not a forecasting checkpoint",
                path.display()
            )));
        }
        check_tokenization(&config, &model)?;
        models.push(model);
    }
    let data = prepare(&config)?;
    let mut rows = Vec::with_capacity(models.len());
    for model in &models {
        let ForecastShape { horizon, channels } = model.config.forecast.expect("checked above");
        if channels != data.test.channels() {
            return Err(Error::Config(format!(
                "checkpoint expects {channels} channels, data has {}",
                data.test.channels()
            )));
        }
        data.check_horizon(config.t_in, horizon)?;
        let source = WindowSource::new(&data.test, config.t_in, horizon)?;
        let m = evaluate_forecast(model, &source, config.raw_scale_metrics.then_some(&data.scaler))?;
        rows.push(HorizonMetrics {
            horizon,
            mse: m.mse,
            mae: m.mae,
            windows: m.windows,
        });
    }
    let report = MetricsReport::new(
        config.dataset_name(),
        config.split.few_shot_fraction,
        config.raw_scale_metrics,
        rows,
    )?;
    println!("{}", report.to_json());
    Ok(())
}

/// Returns whether both checks passed.
fn cmd_gradcheck(common: &Common, eps: Option<f64>) -> tsalign::Result<bool> {
    let mut config = common.load()?;
    if let Some(e) = eps {
        config.gradcheck.eps = e;
        config.validate()?;
    }
    let series = pipeline::load_series(&config, data_dir().as_deref())?;
    let data = pipeline::prepare_data::<f64>(&config, &series)?;
    let horizon = config.horizons[0];
    let windows = sliding_windows(&data.train, config.t_in, horizon)?;
    let picks = [0, windows.len() / 2];
    let (eps, threshold) = (config.gradcheck.eps, config.gradcheck.threshold);

    let mut model = Model::<f64>::new(config.model_config(true, None), config.seed)?;
    model.apply_freeze_policy(&config.freeze);
    let mut samples = Vec::new();
    for &k in &picks {
        samples.extend(alignment_samples(&model, &windows[k])?);
    }
    let align = gradient_check(&mut model, eps, threshold, |m, g| alignment_loss(m, &samples, g, None))?;

    let shape = ForecastShape {
        horizon,
        channels: data.train.channels(),
    };
    let mut model = model.for_forecasting(shape, config.seed)?;
    model.apply_freeze_policy(&config.freeze);
    let batch: Vec<_> = picks
        .iter()
        .map(|&k| ForecastSample::new(&model, windows[k].clone()))
        .collect();
    let forecast = gradient_check(&mut model, eps, threshold, |m, g| forecast_loss(m, &batch, g, None))?;

    let out = serde_json::json!({ "alignment": align, "forecast": forecast });
    println!("{}", serde_json::to_string_pretty(&out).expect("report is plain data"));
    for (name, r) in [("alignment", &align), ("forecast", &forecast)] {
        for e in r.failures() {
            log::error!("{name}: {} max relative error {:.3e}", e.name, e.max_rel_error);
        }
    }
    Ok(align.passed && forecast.passed)
}

/// 2 for problems with the invocation, config or input files; 1 otherwise.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::UnknownGroup(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Row { .. }
        | Error::TooShort { .. } => 2,
        _ => 1,
    }
}

fn run(cli: &Cli) -> tsalign::Result<bool> {
    match &cli.command {
        Command::Synth { common, out } => cmd_synth(common, out.as_deref()).map(|_| true),
        Command::Align { common } => cmd_align(common).map(|_| true),
        Command::Finetune { common, checkpoint } => cmd_finetune(common, checkpoint.as_deref()).map(|_| true),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint).map(|_| true),
        Command::Gradcheck { common, eps } => cmd_gradcheck(common, *eps),
        Command::InspectCheckpoint { checkpoint } => {
            print!("{}", inspect_checkpoint(checkpoint)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
