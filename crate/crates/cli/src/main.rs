use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shapesel::data::{load_series, split_series, SplitSpec, TimeSeries};
use shapesel::distance::build_distance_matrix;
use shapesel::forecast::DEFAULT_RIDGE;
use shapesel::pipeline::{
    cross_check, learn_shapelets, prepare, run_ablation, run_pipeline, AblationAxis, DataSource,
    ForecasterSpec, RunConfig, RunReport,
};
use shapesel::report::{
    average_reduction, average_reduction_secondary, best_margin_over_random, read_comparison_csv,
    write_reduction_table,
};
use shapesel::select::{discard, random_selection, selective_mse, SelectionMethod};
use shapesel::sidl::{ShapeletModel, SidlError};
use shapesel::synth::{generate_planted, BaseSignal, SynthSpec};

#[derive(Parser)]
#[command(
    name = "shapesel",
    version,
    about = "Shapelet-guided selective forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a series, report the realized split and optionally write the parts.
    Ingest(RunArgs),
    /// Produce validation and test forecasts and per-window errors.
    Forecast(RunArgs),
    /// Learn shapelets from high-error validation contexts.
    LearnShapelets(RunArgs),
    /// Choose test windows to drop, by shapelet distance or at random.
    Select {
        #[command(flatten)]
        run: RunArgs,
        /// Shapelet model written by `learn-shapelets`.
        #[arg(long)]
        shapelets: Option<PathBuf>,
        #[arg(long, default_value = "shapelet")]
        method: String,
        /// Also write the distance matrix here.
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Run every stage end to end and write the report files.
    Evaluate(RunArgs),
    /// Re-run over several values of delta or dp.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Generate a planted-motif series.
    Synth(SynthArgs),
    /// Average reductions over a comparison table, or cross-check a run directory.
    Report {
        /// CSV with dataset,no_drop,random,shapelet[,no_drop_2,random_2,shapelet_2].
        #[arg(long, conflicts_with = "check")]
        table: Option<PathBuf>,
        /// Run directory to recompute from its per-window files.
        #[arg(long)]
        check: Option<PathBuf>,
        /// Where to write the per-dataset reduction table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Delta,
    Dp,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Forecaster {
    Baseline,
    External,
}

/// Flags shared by the run-based commands; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV (header row, one numeric column used).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "value")]
    column: String,
    #[arg(long)]
    sl: Option<usize>,
    #[arg(long)]
    fl: Option<usize>,
    /// Stride for both validation and test windows.
    #[arg(long)]
    stride: Option<usize>,
    /// `train,val,test` fractions, `ett-hourly`, `ett-minutely` or `boundaries:TRAIN_END,VAL_END`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_enum)]
    forecaster: Option<Forecaster>,
    /// Test-window predictions for the external forecaster.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Validation-window predictions for the external forecaster.
    #[arg(long)]
    val_predictions: Option<PathBuf>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    dp: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// One or more comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_split(text: &str) -> Result<SplitSpec> {
    let spec = match text {
        "ett-hourly" => SplitSpec::ett_hourly(),
        "ett-minutely" => SplitSpec::ett_minutely(),
        _ => {
            if let Some(rest) = text.strip_prefix("boundaries:") {
                let parts: Vec<usize> = rest
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .context("boundaries must be two integers")?;
                let [train_end, val_end] = parts[..] else {
                    bail!("boundaries need exactly TRAIN_END,VAL_END");
                };
                SplitSpec::Boundaries { train_end, val_end }
            } else {
                let parts: Vec<f64> = text
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("cannot parse split '{text}'"))?;
                let [train, val, test] = parts[..] else {
                    bail!("fraction split needs train,val,test");
                };
                SplitSpec::Fractions { train, val, test }
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match (&self.config, &self.data) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(data)) => RunConfig::new(DataSource::Csv {
                path: data.clone(),
                column: self.column.clone(),
            }),
            (None, None) => bail!("either --config or --data is required"),
        };
        if let (Some(_), Some(data)) = (&self.config, &self.data) {
            config.data = DataSource::Csv {
                path: data.clone(),
                column: self.column.clone(),
            };
        }
        if let Some(v) = self.sl {
            config.sl = v;
        }
        if let Some(v) = self.fl {
            config.fl = v;
        }
        if let Some(v) = self.stride {
            config.stride_val = v;
            config.stride_test = v;
        }
        if let Some(s) = &self.split {
            config.split = parse_split(s)?;
        }
        match self.forecaster {
            Some(Forecaster::Baseline) => {
                config.forecaster = ForecasterSpec::Baseline {
                    ridge: self.ridge.unwrap_or(DEFAULT_RIDGE),
                }
            }
            Some(Forecaster::External) => {
                let (Some(val), Some(test)) = (&self.val_predictions, &self.predictions) else {
                    bail!("--forecaster external needs --val-predictions and --predictions");
                };
                config.forecaster = ForecasterSpec::External {
                    val_predictions: val.clone(),
                    test_predictions: test.clone(),
                };
            }
            None => {
                if let (Some(r), ForecasterSpec::Baseline { ridge }) =
                    (self.ridge, &mut config.forecaster)
                {
                    *ridge = r;
                }
            }
        }
        if let Some(v) = self.dp {
            config.dp = v;
        }
        if let Some(v) = self.delta {
            config.delta = v;
        }
        if !self.seed.is_empty() {
            config.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        Ok(config)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("--out is required for this command")
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20_000)]
    length: usize,
    #[arg(long, value_enum, default_value = "ar1")]
    base: Base,
    #[arg(long, default_value_t = 0.9)]
    phi: f64,
    #[arg(long, default_value_t = 0.05)]
    innovation_std: f64,
    #[arg(long, default_value_t = 24.0)]
    period: f64,
    #[arg(long, default_value_t = 1.0)]
    base_amplitude: f64,
    #[arg(long, default_value_t = 32)]
    motif_len: usize,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.7)]
    motif_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    noise_std: f64,
    /// Defaults to five times the noise level.
    #[arg(long)]
    burst_std: Option<f64>,
    /// Normally the forecast horizon.
    #[arg(long, default_value_t = 64)]
    burst_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset CSV with a single `value` column.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth motif and burst positions.
    #[arg(long)]
    positions: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    Sine,
    Ar1,
}

fn write_values(path: &Path, ts: &TimeSeries) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "value")?;
    for v in ts.values() {
        writeln!(out, "{v}")?;
    }
    out.flush()?;
    Ok(())
}

fn ingest(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let ts = match &config.data {
        DataSource::Csv { path, column } => load_series(path, column)?,
        DataSource::Synth(spec) => generate_planted(spec)?.series,
    };
    let splits = split_series(&ts, &config.split, config.sl + config.fl)?;
    let windows = |len: usize, stride: usize| (len - config.sl - config.fl) / stride + 1;
    println!("series_len={}", ts.len());
    println!(
        "train=[0,{}) val=[{},{}) test=[{},{})",
        splits.train_end,
        splits.train_end,
        splits.val_end,
        splits.val_end,
        ts.len()
    );
    println!(
        "windows: val={} test={} (sl={}, fl={})",
        windows(splits.val.len(), config.stride_val),
        windows(splits.test.len(), config.stride_test),
        config.sl,
        config.fl
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_values(&dir.join("train.csv"), &splits.train)?;
        write_values(&dir.join("val.csv"), &splits.val)?;
        write_values(&dir.join("test.csv"), &splits.test)?;
    }
    Ok(())
}

fn forecast(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let dir = args.out()?;
    let prepared = prepare(&config)?;
    fs::create_dir_all(dir)?;
    for f in &prepared.forecasters {
        f.val_predictions
            .write_csv(dir.join(format!("{}_val_predictions.csv", f.label)))?;
        f.test_predictions
            .write_csv(dir.join(format!("{}_test_predictions.csv", f.label)))?;
        for (split, errors) in [("val", &f.val_errors), ("test", &f.test_errors)] {
            let mut out = std::io::BufWriter::new(fs::File::create(
                dir.join(format!("{}_{split}_errors.csv", f.label)),
            )?);
            writeln!(out, "window_index,mse")?;
            for (i, e) in errors.errors().iter().enumerate() {
                writeln!(out, "{i},{e}")?;
            }
            out.flush()?;
            println!(
                "{} {split}: {} windows, mean mse {}, std {}",
                f.label,
                errors.len(),
                errors.mean,
                errors.std
            );
        }
    }
    Ok(())
}

fn learn(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let out = args.out()?;
    let prepared = prepare(&config)?;
    let seed = config.seeds[0];
    let f = &prepared.forecasters[0];
    let outcome = learn_shapelets(
        &prepared.val_windows,
        &f.val_errors,
        &config.sidl,
        config.delta,
        seed,
    )?;
    println!(
        "tau={} ({} of {} validation windows above it)",
        outcome.threshold.tau,
        outcome.n_high_error,
        f.val_errors.len()
    );
    let Some(model) = outcome.model else {
        bail!(
            "{}: no validation window exceeds tau = {}; lower --delta",
            SidlError::EmptySampleSet,
            outcome.threshold.tau
        );
    };
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    let cfg = &model.dictionary.config;
    println!(
        "K={} q={} lambda={}; kept {} shapelets",
        cfg.n_atoms,
        cfg.atom_len,
        cfg.lambda,
        model.shapelets.len()
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    model.save(out)?;
    Ok(())
}

fn select(
    args: &RunArgs,
    shapelets: Option<&Path>,
    method: &str,
    distances: Option<&Path>,
) -> Result<()> {
    let method: SelectionMethod = method.parse().map_err(anyhow::Error::msg)?;
    let config = args.config()?;
    let out = args.out()?;
    let prepared = prepare(&config)?;
    let windows = &prepared.test_windows;
    let seed = config.seeds[0];
    let (selection, min_distances) = match method {
        SelectionMethod::Random => (random_selection(config.dp, windows.len(), seed)?, None),
        SelectionMethod::Shapelet => {
            let path = shapelets.context("--method shapelet needs --shapelets MODEL.json")?;
            let model = ShapeletModel::load(path)?;
            if model.shapelets.is_empty() {
                bail!("shapelet model {} holds no shapelets", path.display());
            }
            let dm = build_distance_matrix(windows, &model.shapelets)?;
            if let Some(p) = distances {
                dm.write_csv(p)?;
            }
            (discard(config.dp, &dm)?, Some(dm.min_distances()))
        }
    };
    selection.write_csv(out, min_distances.as_deref())?;
    let report = selective_mse(&prepared.forecasters[0].test_errors, &selection)?;
    println!(
        "{} selection: dropped {} of {} (dp={}); mse_zeroed={} mse_retained={} coverage={}",
        method.as_str(),
        report.n_dropped,
        report.n,
        config.dp,
        report.mse_zeroed,
        report.mse_retained,
        report.coverage
    );
    Ok(())
}

fn print_report(report: &RunReport) {
    println!(
        "{}: split train_end={} val_end={}; {} validation / {} test windows",
        report.dataset,
        report.split.train_end,
        report.split.val_end,
        report.split.n_val_windows,
        report.split.n_test_windows
    );
    for f in &report.forecasters {
        println!(
            "  {}: tau={} high-error={} | no-drop {} | random {} | shapelet {} (retained {}) | coverage {}",
            f.label,
            f.threshold.tau,
            f.n_high_error,
            f.no_drop.mse_zeroed,
            f.mean_random.mse_zeroed,
            f.mean_shapelet.mse_zeroed,
            f.mean_shapelet.mse_retained,
            f.mean_shapelet.coverage
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn evaluate(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let report = run_pipeline(&config)?;
    print_report(&report);
    if let Some(dir) = &config.output_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn ablate(args: &RunArgs, axis: Axis, values: &[f64]) -> Result<()> {
    let config = args.config()?;
    let axis = match axis {
        Axis::Delta => AblationAxis::Delta,
        Axis::Dp => AblationAxis::Dp,
    };
    for point in run_ablation(&config, axis, values)? {
        println!("{}={}", axis.as_str(), point.value);
        print_report(&point.report);
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let base = match args.base {
        Base::Sine => BaseSignal::Sine {
            period: args.period,
            amplitude: args.base_amplitude,
        },
        Base::Ar1 => BaseSignal::Ar1 {
            phi: args.phi,
            innovation_std: args.innovation_std,
        },
    };
    let spec = SynthSpec {
        length: args.length,
        base,
        motif: SynthSpec::default_motif(args.motif_len, args.amplitude),
        motif_rate: args.motif_rate,
        burst_std: args.burst_std.unwrap_or(5.0 * args.noise_std),
        noise_std: args.noise_std,
        burst_len: args.burst_len,
        seed: args.seed,
    };
    let series = generate_planted(&spec)?;
    series.write_dataset(&args.out)?;
    if let Some(p) = &args.positions {
        series.write_positions(p)?;
    }
    println!(
        "wrote {} points with {} planted motifs to {}",
        spec.length,
        series.positions.len(),
        args.out.display()
    );
    Ok(())
}

fn report(table: Option<&Path>, check: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = check {
        let mismatches = cross_check(dir, 1e-9)?;
        if mismatches.is_empty() {
            println!("summary matches per-window files in {}", dir.display());
            return Ok(());
        }
        for m in &mismatches {
            eprintln!(
                "mismatch in {}: summary {} vs recomputed {}",
                m.column, m.summary, m.recomputed
            );
        }
        bail!(
            "{} summary values disagree with per-window files",
            mismatches.len()
        );
    }
    let table = table.context("either --table or --check is required")?;
    let rows = read_comparison_csv(table)?;
    let primary = average_reduction(&rows)?;
    for (name, v) in &primary.per_dataset {
        println!("{name}: {v:.2}%");
    }
    println!("mean reduction vs no drop: {:.2}%", primary.mean);
    if let Some(s) = average_reduction_secondary(&rows)? {
        println!(
            "mean reduction vs no drop (second forecaster): {:.2}%",
            s.mean
        );
    }
    if let Some((name, m)) = best_margin_over_random(&rows, false)? {
        println!("largest margin over random: {name} {m:.2}%");
    }
    if let Some((name, m)) = best_margin_over_random(&rows, true)? {
        println!("largest margin over random (second forecaster): {name} {m:.2}%");
    }
    if let Some(out) = out {
        write_reduction_table(&rows, out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Forecast(a) => forecast(a),
        Command::LearnShapelets(a) => learn(a),
        Command::Select {
            run,
            shapelets,
            method,
            distances,
        } => select(run, shapelets.as_deref(), method, distances.as_deref()),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate { run, axis, values } => ablate(run, *axis, values),
        Command::Synth(a) => synth(a),
        Command::Report { table, check, out } => {
            report(table.as_deref(), check.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their sources in the message.
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
