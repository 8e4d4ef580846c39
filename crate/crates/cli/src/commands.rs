//! The six verbs. Each takes plain arguments and returns what it wrote, so the
//! binary only parses flags and maps errors to exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use timeflow_core::datapipe::{
    generate_sines, make_condition_mask, MaskMode, ObservationMask, Scaler, SeriesBatch,
};
use timeflow_core::flow_train::{self, TrainingReport};
use timeflow_core::metrics::{self, Metric, MetricConfig, MetricReport};
use timeflow_core::samplers::{self, ConditionMask, Mode, SampleConfig};
use timeflow_core::velocity_model::{Ablation, VelocityModel};
use timeflow_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::files::{self, RunLock};

pub const CHECKPOINT_FILE: &str = "checkpoint.tflw";
pub const TRAINING_REPORT_FILE: &str = "training_report.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Trains on the full dataset described by `config`.
pub fn fit(config: &ExperimentConfig) -> CliResult<(VelocityModel, SeriesBatch, TrainingReport)> {
    let data = config.dataset.load()?;
    let mut model = VelocityModel::new(config.model.clone())?;
    log::info!(
        "training on {} windows of {}x{} ({} parameters)",
        data.windows(),
        data.length(),
        data.features(),
        model.parameter_count()
    );
    let report = flow_train::train(&mut model, &data, &config.schedule, &config.train)?;
    Ok((model, data, report))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub timing: PathBuf,
    pub final_loss: Option<f64>,
}

pub fn train(config: &ExperimentConfig) -> CliResult<TrainOutput> {
    let dir = &config.output_dir;
    let _lock = RunLock::acquire(dir)?;
    let (model, data, report) = fit(config)?;
    let out = TrainOutput {
        checkpoint: dir.join(CHECKPOINT_FILE),
        report: dir.join(TRAINING_REPORT_FILE),
        timing: dir.join(TIMING_FILE),
        final_loss: report.records.last().map(|r| r.loss),
    };
    Checkpoint::from_model(config, &model, &data.scaler).save(&out.checkpoint)?;
    files::write_text(&out.report, &report.to_csv())?;
    files::append_timing(&out.timing, "train", report.train_seconds, config.train.steps, data.windows())?;
    Ok(out)
}

fn default_timing(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .join(TIMING_FILE)
}

fn lock_for(timing: &Path) -> CliResult<RunLock> {
    RunLock::acquire(timing.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")))
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub mode: Option<Mode>,
    pub sigma: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub timing: Option<PathBuf>,
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let mut cfg = ck.config.sample.clone();
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.sigma {
        cfg.sigma = s;
    }
    if let Some(n) = args.steps {
        cfg.n_steps = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let timing = args.timing.clone().unwrap_or_else(|| default_timing(&args.checkpoint));
    let _lock = lock_for(&timing)?;
    let shape = [args.n, ck.config.dataset.window_length, ck.config.model.features];
    let start = Instant::now();
    let samples = samplers::sample_unconditional(&model, &shape, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    write_samples(&args.out, &ck.scaler.unscale(&samples))?;
    files::append_timing(&timing, "uncondition", seconds, cfg.n_steps, args.n)?;
    log::info!("{} samples in {seconds:.3}s -> {}", args.n, args.out.display());
    Ok(())
}

fn write_samples(path: &Path, samples: &Tensor) -> CliResult<()> {
    let mut buf = Vec::new();
    samplers::write_long_csv(samples, &mut buf)?;
    files::write_text(path, &String::from_utf8(buf).expect("CSV output is ASCII"))
}

/// `impute:<ratio>` or `forecast:<horizon>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Impute(f64),
    Forecast(usize),
}

impl Task {
    pub fn stage(self) -> &'static str {
        match self {
            Task::Impute(_) => "imputation",
            Task::Forecast(_) => "forecasting",
        }
    }
}

impl FromStr for Task {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || CliError::Usage(format!("task {s:?} must be impute:<ratio> or forecast:<horizon>"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "impute" => value.parse().map(Task::Impute).map_err(|_| bad()),
            "forecast" => value.parse().map(Task::Forecast).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConditionArgs {
    pub checkpoint: PathBuf,
    pub reference: PathBuf,
    pub task: Task,
    pub power: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub draws: usize,
    pub stride: Option<usize>,
    pub out: PathBuf,
    pub mse_out: Option<PathBuf>,
    pub timing: Option<PathBuf>,
}

pub const QUANTILE_HEADER: &str = "window,t_index,feature,observed,reference,q05,q50,q95";
pub const MSE_HEADER: &str = "task,parameter,draws,hidden_cells,mse_mean,mse_std";

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn condition(args: &ConditionArgs) -> CliResult<()> {
    if args.draws == 0 {
        return Err(CliError::Usage("--draws must be >= 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let (l, d) = (ck.config.dataset.window_length, ck.config.model.features);
    let raw = files::read_windows(&args.reference, l, args.stride.unwrap_or(l), Some(d))?;
    let scaled = ck.scaler.scale(&raw);
    let shape = raw.shape().to_vec();
    let mask = match args.task {
        // ratio 0 observes everything; the MSE contract below rejects it
        Task::Impute(r) if r == 0.0 => ObservationMask::all_observed(&shape),
        Task::Impute(ratio) => make_condition_mask(&shape, MaskMode::Imputation { ratio }, args.seed)?,
        Task::Forecast(horizon) => make_condition_mask(&shape, MaskMode::Forecast { horizon }, args.seed)?,
    };
    metrics::conditional_mse(&scaled, &scaled, &mask)?;
    let cmask = ConditionMask::new(mask.clone(), scaled.clone())?;
    let mut cfg = ck.config.sample.clone();
    if let Some(p) = args.power {
        cfg.power = p;
    }
    if let Some(n) = args.steps {
        cfg.n_steps = n;
    }
    cfg.validate()?;
    let timing = args.timing.clone().unwrap_or_else(|| default_timing(&args.checkpoint));
    let _lock = lock_for(&timing)?;

    let start = Instant::now();
    let mut draws = Vec::with_capacity(args.draws);
    let mut errors = Vec::with_capacity(args.draws);
    for k in 0..args.draws {
        cfg.seed = args.seed.wrapping_add(k as u64);
        let out = samplers::sample_conditional(&model, &cmask, &cfg)?;
        errors.push(metrics::conditional_mse(&out, &scaled, &mask)?);
        draws.push(ck.scaler.unscale(&out));
    }
    let seconds = start.elapsed().as_secs_f64();

    let mut text = String::from(QUANTILE_HEADER);
    text.push('\n');
    let mut cell = vec![0.0; args.draws];
    for i in 0..raw.len() {
        let (w, t, f) = (i / (l * d), (i / d) % l, i % d);
        let reference = raw.data()[i];
        let obs = mask.is_observed(i);
        let [q05, q50, q95] = if obs {
            // report the untouched reference, not its scale/unscale round trip
            [reference; 3]
        } else {
            for (c, draw) in cell.iter_mut().zip(&draws) {
                *c = draw.data()[i];
            }
            cell.sort_by(f64::total_cmp);
            [quantile(&cell, 0.05), quantile(&cell, 0.5), quantile(&cell, 0.95)]
        };
        writeln!(
            text,
            "{w},{t},{f},{},{reference:.8e},{q05:.8e},{q50:.8e},{q95:.8e}",
            obs as u8
        )
        .expect("write to String");
    }
    files::write_text(&args.out, &text)?;

    let summary = MetricReport::from_values("mse", &errors, "");
    let (task, parameter) = match args.task {
        Task::Impute(r) => ("impute", r.to_string()),
        Task::Forecast(h) => ("forecast", h.to_string()),
    };
    let mse_path = args.mse_out.clone().unwrap_or_else(|| args.out.with_extension("mse.csv"));
    files::write_text(
        &mse_path,
        &format!(
            "{MSE_HEADER}\n{task},{parameter},{},{},{:.8e},{:.8e}\n",
            args.draws,
            mask.hidden_count(),
            summary.mean,
            summary.std
        ),
    )?;
    files::append_timing(&timing, args.task.stage(), seconds, cfg.n_steps, raw.shape()[0])?;
    log::info!("{task} mse {:.5} ± {:.5} over {} draws", summary.mean, summary.std, args.draws);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    /// `sines:<windows>` or a CSV path (wide or long format).
    pub real: String,
    pub synth: Option<PathBuf>,
    pub metrics: Vec<String>,
    pub repeats: usize,
    pub seed: u64,
    pub window: usize,
    pub stride: usize,
    pub features: usize,
    pub checkpoint: Option<PathBuf>,
    pub sigma_sweep: Vec<f64>,
    pub steps: Option<usize>,
    pub metric_steps: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn parse_metrics(names: &[String]) -> CliResult<Vec<Metric>> {
    if names.is_empty() {
        return Ok(Metric::ALL.to_vec());
    }
    Ok(names.iter().map(|n| n.trim().parse()).collect::<Result<Vec<_>, _>>()?)
}

/// Raw windows from `sines:<n>` or a CSV file.
pub fn load_series(spec: &str, window: usize, stride: usize, features: usize, seed: u64) -> CliResult<Tensor> {
    if let Some(n) = spec.strip_prefix("sines:") {
        let n = n
            .parse()
            .map_err(|_| CliError::Usage(format!("{spec:?}: expected sines:<windows>")))?;
        return Ok(generate_sines(n, window, features, seed)?.unscaled());
    }
    let path = Path::new(spec);
    if files::is_long_csv(path)? {
        files::read_long(path)
    } else {
        files::read_windows(path, window, stride, None)
    }
}

fn scaled_batch(raw: &Tensor, scaler: &Scaler, name: &str) -> CliResult<SeriesBatch> {
    Ok(SeriesBatch::new(scaler.scale(raw), scaler.clone(), name)?)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<String> {
    let metric_list = parse_metrics(&args.metrics)?;
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg: MetricConfig = ck.as_ref().map(|c| c.config.metrics.clone()).unwrap_or_default();
    cfg.repeats = args.repeats;
    cfg.seed = args.seed;
    if let Some(s) = args.metric_steps {
        cfg.steps = s;
        cfg.embed_steps = s;
    }
    cfg.validate()?;
    let real_raw = load_series(&args.real, args.window, args.stride, args.features, args.seed)?;
    let d = real_raw.shape()[2];
    let scaler = Scaler::fit(real_raw.data(), d);
    let real = scaled_batch(&real_raw, &scaler, "real")?;

    let mut text = String::new();
    if args.sigma_sweep.is_empty() {
        let synth_path = args
            .synth
            .as_ref()
            .ok_or_else(|| CliError::Usage("evaluate needs --synth or --sigma-sweep with --checkpoint".into()))?;
        let synth_raw = load_series(&synth_path.to_string_lossy(), real.length(), args.stride, d, args.seed)?;
        let synth = scaled_batch(&synth_raw, &scaler, "synthetic")?;
        let mut reports = Vec::new();
        for &m in &metric_list {
            reports.push(metrics::evaluate(m, &real, &synth, &cfg)?);
        }
        text.push_str(&metrics::reports_to_csv(&reports));
    } else {
        let ck = ck.ok_or_else(|| CliError::Usage("--sigma-sweep needs --checkpoint".into()))?;
        let (l, f) = (ck.config.dataset.window_length, ck.config.model.features);
        if [l, f] != [real.length(), d] {
            return Err(timeflow_core::Error::Dimension {
                op: "real windows vs checkpoint [L, D_f]",
                lhs: vec![real.length(), d],
                rhs: vec![l, f],
            }
            .into());
        }
        let model = ck.model()?;
        writeln!(text, "sigma,{}", metrics::MetricReport::CSV_HEADER).expect("write to String");
        for &sigma in &args.sigma_sweep {
            let sample = SampleConfig {
                sigma,
                mode: Mode::Sde,
                n_steps: args.steps.unwrap_or(ck.config.sample.n_steps),
                seed: args.seed,
                ..ck.config.sample.clone()
            };
            let generated = samplers::sample_unconditional(&model, &[real.windows(), l, f], &sample)?;
            let synth = scaled_batch(&ck.scaler.unscale(&generated), &scaler, "synthetic")?;
            for &m in &metric_list {
                let r = metrics::evaluate(m, &real, &synth, &cfg)?;
                writeln!(text, "{sigma},{}", r.csv_row()).expect("write to String");
            }
        }
    }
    if let Some(out) = &args.out {
        files::write_text(out, &text)?;
    }
    Ok(text)
}

/// Table labels for the ablation variants.
pub const VARIANTS: [(&str, &str); 4] = [
    ("full", "TimeFlow"),
    ("no_ca", "w/o CA"),
    ("no_fd", "w/o FD"),
    ("no_encoder", "w/o Encoder"),
];

fn ablation_for(variant: &str) -> CliResult<(Ablation, &'static str)> {
    let ablation = match variant {
        "full" => Ablation::full(),
        "no_ca" => Ablation::no_cross_attention(),
        "no_fd" => Ablation::no_flow_decomposition(),
        "no_encoder" => Ablation::no_encoder(),
        _ => {
            let names: Vec<&str> = VARIANTS.iter().map(|v| v.0).collect();
            return Err(CliError::Usage(format!(
                "unknown variant {variant:?}; valid variants: {}",
                names.join(", ")
            )));
        }
    };
    let label = VARIANTS.iter().find(|v| v.0 == variant).expect("listed variant").1;
    Ok((ablation, label))
}

pub const ABLATION_HEADER: &str =
    "variant,label,parameters,discriminative_mean,discriminative_std,predictive_mean,predictive_std";

pub fn ablate(config: &ExperimentConfig, variants: &[String], out: Option<&Path>) -> CliResult<String> {
    let chosen = variants
        .iter()
        .map(|v| ablation_for(v.trim()).map(|(a, l)| (v.trim().to_owned(), a, l)))
        .collect::<CliResult<Vec<_>>>()?;
    let _lock = RunLock::acquire(&config.output_dir)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for (name, ablation, label) in chosen {
        let mut cfg = config.clone();
        cfg.model.ablation = ablation;
        let (model, data, _) = fit(&cfg)?;
        let shape = data.values.shape().to_vec();
        let generated = samplers::sample_unconditional(&model, &shape, &cfg.sample)?;
        let synth = SeriesBatch::new(generated, data.scaler.clone(), "synthetic")?;
        let disc = metrics::evaluate(Metric::Discriminative, &data, &synth, &cfg.metrics)?;
        let pred = metrics::evaluate(Metric::Predictive, &data, &synth, &cfg.metrics)?;
        log::info!("{label}: discriminative {:.4}, predictive {:.4}", disc.mean, pred.mean);
        writeln!(
            text,
            "{name},{label},{},{:.8e},{:.8e},{:.8e},{:.8e}",
            model.parameter_count(),
            disc.mean,
            disc.std,
            pred.mean,
            pred.std
        )
        .expect("write to String");
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.join("ablation.csv"));
    files::write_text(&path, &text)?;
    Ok(text)
}

pub fn inspect(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes, path)?;
    let mut s = String::new();
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4-byte trailer"));
    writeln!(s, "file: {}", path.display()).unwrap();
    writeln!(s, "format: TFLW v{}  ({} bytes, crc32 {crc:08x})", crate::checkpoint::VERSION, bytes.len()).unwrap();
    writeln!(s, "parameters: {} tensors, {} scalars", ck.params.len(), ck.scalar_count()).unwrap();
    for (name, t) in &ck.params {
        writeln!(s, "  {name} {:?}", t.shape()).unwrap();
    }
    writeln!(s, "scaler min: {:?}", ck.scaler.min).unwrap();
    writeln!(s, "scaler max: {:?}", ck.scaler.max).unwrap();
    writeln!(s, "config:\n{}", ck.config.to_toml()?).unwrap();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_parsing() {
        assert_eq!("impute:0.5".parse::<Task>().unwrap(), Task::Impute(0.5));
        assert_eq!("forecast:12".parse::<Task>().unwrap(), Task::Forecast(12));
        for bad in ["impute", "forecast:x", "predict:3"] {
            assert!(bad.parse::<Task>().is_err(), "{bad}");
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert!((quantile(&v, 0.05) - 1.2).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn unknown_variant_is_usage() {
        let err = ablation_for("no_x").unwrap_err();
        assert_eq!(err.exit_code(), crate::error::exit::USAGE);
        assert!(err.to_string().contains("no_encoder"));
    }
}
