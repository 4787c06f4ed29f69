//! `landslide` command-line front-end.
//!
//! Every subcommand writes its artifacts under one output path and refuses to replace
//! existing output unless `--overwrite` is passed. Failures print a single JSON line
//! `{"error": <kind>, "message": <text>}` on stderr and exit with 2 (usage), 3 (data)
//! or 4 (numeric).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use landslide_core::bandforge::{engineered_dir, prepare_engineered_cache, read_engineered_image, BandSelection, Preset};
use landslide_core::data::{dataset_stats, load_dataset, write_mask, DatasetIndex, DatasetLayout, MaskFormat};
use landslide_core::harness::{
    cross_validate, evaluate, split_dataset, train, DiskSource, RunDir, TrainConfig, TRAIN_FRACTION,
};
use landslide_core::metrics::{write_report_csv, EvalReport, ReportRow};
use landslide_core::segnet::{ensemble_average, predict_mask, Checkpoint};
use landslide_core::{Error, ErrorClass};
use ndarray::Axis;

#[derive(Debug, Parser)]
#[command(name = "landslide", version, about = "Landslide segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute engineered bands for every sample and cache them under the dataset root.
    PrepareBands {
        #[command(flatten)]
        data: DataArgs,
        /// Band selection preset.
        #[arg(long, value_parser = parse_preset, default_value = "15-23")]
        select: Preset,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on a seeded 80% split and score the best checkpoint on the remaining 20%.
    Train(TrainArgs),
    /// Score a checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Score only the held-out 20% of the split made with this seed (default: every sample).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        #[arg(long)]
        overwrite: bool,
    },
    /// k-fold cross-validation with one run directory per fold.
    CrossValidate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Write predicted masks for every sample.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for `mask_<id>` files.
        #[arg(long, default_value = "runs/predict")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskFormatArg::H5)]
        mask_format: MaskFormatArg,
        #[arg(long)]
        overwrite: bool,
    },
    /// Class-balance summary of a dataset.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root holding `img/` and `mask/`.
    #[arg(long)]
    root: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// YAML training config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `augment.rng_seed`; the value used is recorded in config.yaml.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `band_selection` and the model's input channels.
    #[arg(long, value_parser = parse_preset)]
    select: Option<Preset>,
    /// Divide every encoder width by this factor (reduced-width runs).
    #[arg(long)]
    width_div: Option<usize>,
    /// Run directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskFormatArg {
    H5,
    Png,
}

impl From<MaskFormatArg> for MaskFormat {
    fn from(f: MaskFormatArg) -> Self {
        match f {
            MaskFormatArg::H5 => MaskFormat::H5,
            MaskFormatArg::Png => MaskFormat::Png8,
        }
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            report_error("usage", e.render().to_string().trim());
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &error_chain(&e));
            match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            }
        }
    }
}

fn error_chain(e: &Error) -> String {
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        src = s.source();
    }
    msg
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

/// Renders a report as the CSV row contract or as `F1: xx.xx` / `mIoU: xx.xx` lines.
pub fn emit_report(out: &mut dyn Write, rows: &[ReportRow<'_>], format: ReportFormat) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    };
    match format {
        ReportFormat::Csv => write_report_csv(out, rows),
        ReportFormat::Text => {
            for row in rows {
                if rows.len() > 1 {
                    let label = row.fold.map_or(row.split.to_string(), |f| format!("{} {f}", row.split));
                    writeln!(out, "[{label}]").map_err(io)?;
                }
                out.write_all(row.report.to_text().as_bytes()).map_err(io)?;
            }
            Ok(())
        }
    }
}

fn print_report(rows: &[ReportRow<'_>], format: ReportFormat) -> Result<(), Error> {
    let stdout = std::io::stdout();
    emit_report(&mut stdout.lock(), rows, format)
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::PrepareBands { data, select, overwrite } => {
            let index = load_dataset(&data.root, DatasetLayout::PairedH5)?;
            let selection = BandSelection::preset(select);
            if selection.is_empty() {
                log::info!("selection `none` uses the original bands; nothing to prepare");
                return Ok(());
            }
            let dir = prepare_engineered_cache(&index, &selection, overwrite)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(args),
        Command::Evaluate {
            data,
            ckpt,
            seed,
            out,
            format,
            overwrite,
        } => cmd_evaluate(&data.root, &ckpt, seed, out.as_deref(), format, overwrite),
        Command::CrossValidate { train, folds } => cmd_cross_validate(train, folds),
        Command::Predict {
            data,
            ckpt,
            out,
            mask_format,
            overwrite,
        } => cmd_predict(&data.root, &ckpt, &out, mask_format.into(), overwrite),
        Command::Stats { data, format } => cmd_stats(&data.root, format),
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            TrainConfig::from_yaml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.augment.rng_seed = seed;
    }
    if let Some(preset) = args.select {
        cfg.band_selection = preset;
        cfg.model.input_channels = cfg.selection().output_channels();
    }
    if let Some(d) = args.width_div {
        if d == 0 {
            return Err(Error::InvalidConfig("--width-div must be >= 1".into()));
        }
        cfg.model = cfg.model.width_divided(d);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the engineered-band cache on first use.
fn ensure_cache(index: &DatasetIndex, selection: &BandSelection) -> Result<(), Error> {
    if !selection.is_empty() && !engineered_dir(index.root_path(), selection).is_dir() {
        log::info!("preparing engineered bands ({})", selection.describe());
        prepare_engineered_cache(index, selection, false)?;
    }
    Ok(())
}

fn disk_source(root: &Path, selection: BandSelection) -> Result<DiskSource, Error> {
    let index = load_dataset(root, DatasetLayout::PairedH5)?;
    ensure_cache(&index, &selection)?;
    Ok(DiskSource::new(index, selection))
}

/// Keeps the last finite weights next to the run artifacts before propagating.
fn save_last_finite(run: &RunDir, err: Error) -> Error {
    if let Error::NonFiniteLoss {
        last_finite: Some(ckpt), ..
    } = &err
    {
        if let Err(e) = ckpt.save(&run.path().join("last_finite.ckpt")) {
            log::warn!("could not save last finite checkpoint: {e}");
        }
    }
    err
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = load_config(&args)?;
    let run = RunDir::create(&args.out, args.overwrite)?;
    run.write_config(&cfg)?;
    let source = disk_source(&args.data.root, cfg.selection())?;
    let (train_ids, test_ids) = split_dataset(source.index(), TRAIN_FRACTION, cfg.seed)?;
    log::info!("{} training and {} test samples", train_ids.len(), test_ids.len());
    let outcome = train(&cfg, &source, &train_ids, None).map_err(|e| save_last_finite(&run, e))?;
    run.write_history(&outcome.history)?;
    run.write_checkpoint(&outcome.best)?;
    let test_ids = if test_ids.is_empty() { train_ids } else { test_ids };
    let report = evaluate(&outcome.best, &source, &test_ids, cfg.averaging)?;
    let rows = [ReportRow {
        split: "test",
        fold: None,
        report: &report,
    }];
    run.write_report(&rows)?;
    print_report(&rows, args.format)
}

/// The preset whose channel count matches a checkpoint's input layer.
fn preset_for_channels(channels: usize) -> Result<Preset, Error> {
    Preset::ALL
        .into_iter()
        .find(|p| BandSelection::preset(*p).output_channels() == channels)
        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("no band selection yields {channels} input channels")))
}

fn cmd_evaluate(
    root: &Path,
    ckpt: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    format: ReportFormat,
    overwrite: bool,
) -> Result<(), Error> {
    if let Some(out) = out {
        if out.exists() && !overwrite {
            return Err(Error::WouldClobber(out.to_path_buf()));
        }
    }
    let checkpoint = Checkpoint::load(ckpt)?;
    let preset = preset_for_channels(checkpoint.config.input_channels)?;
    let source = disk_source(root, BandSelection::preset(preset))?;
    let (split, ids) = match seed {
        Some(seed) => ("test", split_dataset(source.index(), TRAIN_FRACTION, seed)?.1),
        None => ("all", source.index().sample_ids().to_vec()),
    };
    let report = evaluate(&checkpoint, &source, &ids, Default::default())?;
    let rows = [ReportRow {
        split,
        fold: None,
        report: &report,
    }];
    if let Some(out) = out {
        let mut buf = Vec::new();
        emit_report(&mut buf, &rows, format)?;
        fs::write(out, buf).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
    }
    print_report(&rows, format)
}

fn cmd_cross_validate(args: TrainArgs, folds: usize) -> Result<(), Error> {
    let cfg = load_config(&args)?;
    let run = RunDir::create(&args.out, args.overwrite)?;
    run.write_config(&cfg)?;
    let source = disk_source(&args.data.root, cfg.selection())?;
    let ids = source.index().sample_ids().to_vec();
    let result = cross_validate(&cfg, &source, &ids, folds, |fold, outcome, report| {
        let dir = run.child(&format!("fold_{fold}"))?;
        dir.write_history(&outcome.history)?;
        dir.write_checkpoint(&outcome.best)?;
        dir.write_report(&[ReportRow {
            split: "fold",
            fold: Some(fold),
            report,
        }])?;
        log::info!("fold {fold}: F1 {:.2} mIoU {:.2}", report.f1, report.miou);
        Ok(())
    });
    let fold_rows = |reports: &[EvalReport]| -> Vec<(usize, EvalReport)> { reports.iter().cloned().enumerate().collect() };
    match result {
        Ok(cv) => {
            let per_fold = fold_rows(&cv.folds);
            let mut rows: Vec<ReportRow> = per_fold
                .iter()
                .map(|(f, r)| ReportRow {
                    split: "fold",
                    fold: Some(*f),
                    report: r,
                })
                .collect();
            rows.push(ReportRow {
                split: "mean",
                fold: None,
                report: &cv.mean,
            });
            run.write_report(&rows)?;
            print_report(&rows, args.format)
        }
        Err(Error::FoldFailed { fold, completed, source }) => {
            let per_fold = fold_rows(&completed);
            let rows: Vec<ReportRow> = per_fold
                .iter()
                .map(|(f, r)| ReportRow {
                    split: "fold",
                    fold: Some(*f),
                    report: r,
                })
                .collect();
            run.write_report(&rows)?;
            Err(Error::FoldFailed { fold, completed, source })
        }
        Err(e) => Err(e),
    }
}

fn cmd_predict(root: &Path, ckpt: &Path, out: &Path, format: MaskFormat, overwrite: bool) -> Result<(), Error> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.to_model()?;
    let selection = BandSelection::preset(preset_for_channels(checkpoint.config.input_channels)?);
    let index = load_dataset(root, DatasetLayout::PairedH5)?;
    ensure_cache(&index, &selection)?;
    let dir = RunDir::create(out, overwrite)?;
    for id in index.sample_ids() {
        let image = read_engineered_image(&index, &selection, id)?;
        let heads = model.forward(image.pixels().view().insert_axis(Axis(0)))?;
        let probs = ensemble_average(&heads);
        let mask = predict_mask(probs.index_axis(Axis(0), 0));
        write_mask(mask.view(), &dir.path().join(format!("mask_{id}.{}", format.extension())), format)?;
    }
    log::info!("wrote {} masks to {}", index.len(), dir.path().display());
    Ok(())
}

fn cmd_stats(root: &Path, format: ReportFormat) -> Result<(), Error> {
    let index = load_dataset(root, DatasetLayout::PairedH5)?;
    let s = dataset_stats(&index)?;
    let (lo, hi) = s.per_image_positive_rate_range.unwrap_or((0.0, 0.0));
    match format {
        ReportFormat::Text => {
            println!("images: {}", s.images);
            println!("images with landslides: {}", s.images_with_landslides);
            println!("landslide pixel rate: {:.4}%", 100.0 * s.pixel_positive_rate);
            match s.per_image_positive_rate_range {
                Some(_) => println!("per-image landslide rate: {:.4}% .. {:.4}%", 100.0 * lo, 100.0 * hi),
                None => println!("per-image landslide rate: n/a"),
            }
        }
        ReportFormat::Csv => {
            println!("images,images_with_landslides,pixel_positive_rate,per_image_min,per_image_max");
            println!(
                "{},{},{:.6},{:.6},{:.6}",
                s.images, s.images_with_landslides, s.pixel_positive_rate, lo, hi
            );
        }
    }
    Ok(())
}
