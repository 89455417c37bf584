//! Command-line pipeline for land-cover change detection from fused
//! optical/radar raster time series.
//!
//! Subcommands: `synth` (generate a ground-truthed scene), `train` (fit and
//! export the covariance eigenstructure), `detect` (produce a date map),
//! `validate` (stratified sampling + accuracy metrics), `ablate`
//! (optical-day-removal sweep), `plot` (render curve CSVs), `convert`
//! (GeoTIFF ingestion).
//!
//! Every command is deterministic given its configuration and seed,
//! independent of the worker count. Diagnostics go to stderr; machine
//! outputs go only to the declared files.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clearcut_core::hmm::{FtcMode, ObsSources};
use clearcut_core::kl::{anomaly_stack, FillStrategy, KlConfig, ModelCache};
use clearcut_core::par::Parallelism;
use clearcut_core::pipeline::{
    self, run_detect_to_dir, run_train_to_dir, FtcSetting, Mode, PipelineConfig, RunManifest,
};
use clearcut_core::plot::{line_plot, Series, PALETTE};
use clearcut_core::raster::{load_stack, write_stack, Band, SceneMetadata};
use clearcut_core::sar::filter_stack;
use clearcut_core::synth::{generate, GroundTruth, SceneSpec};
use clearcut_core::validation::{
    ablate_optical, compute_metrics, stratified_sample, AblationContext, MetricsReport,
    StratifiedDesign,
};

#[derive(Parser)]
#[command(name = "clearcut", version, about = "Land-cover change detection from optical/radar time series")]
struct Cli {
    /// Worker threads (default: available parallelism; 1 forces sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truthed scene from a JSON spec.
    Synth(SynthArgs),
    /// Estimate the nominal covariance eigenstructure and export the model.
    Train(RunArgs),
    /// Run change detection and write the date map.
    Detect(RunArgs),
    /// Accuracy assessment from maps + ground truth or a label CSV.
    Validate(ValidateArgs),
    /// Optical-day-removal sweep.
    Ablate(AblateArgs),
    /// Render curve CSVs to PNG line plots.
    Plot(PlotArgs),
    /// Convert per-date GeoTIFF files to the native stack format.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene specification JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Pipeline configuration JSON; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long)]
    optical: Option<PathBuf>,
    #[arg(long)]
    sar: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Persist anomaly and filtered-radar stacks too.
    #[arg(long)]
    save_intermediate: bool,
    /// Missing-data fill strategy, e.g. "space-fill-0(3,1)" or "none".
    #[arg(long)]
    fill: Option<FillStrategy>,
    /// Energy fraction for truncation selection.
    #[arg(long)]
    energy: Option<f64>,
    /// Explicit truncation order (overrides --energy).
    #[arg(long)]
    m: Option<usize>,
    /// Significance level for per-pixel anomaly thresholds.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    optical_thresh: Option<f64>,
    #[arg(long)]
    sar_thresh: Option<f64>,
    /// Frames-to-classify: an integer, or "auto" for the variable rule.
    #[arg(long)]
    ftc: Option<String>,
    #[arg(long)]
    sigma2_weight: Option<f64>,
    #[arg(long)]
    sigma3_weight: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl RunArgs {
    fn build_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => PipelineConfig {
                mode: Mode::Hybrid,
                training_stack: None,
                optical_stack: None,
                sar_stack: None,
                model: None,
                out_dir: PathBuf::from("out"),
                seed: 0,
                workers: None,
                save_intermediate: false,
                kl: KlConfig::default(),
                filter: Default::default(),
                hmm: Default::default(),
            },
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(p) = &self.training {
            cfg.training_stack = Some(p.clone());
        }
        if let Some(p) = &self.optical {
            cfg.optical_stack = Some(p.clone());
        }
        if let Some(p) = &self.sar {
            cfg.sar_stack = Some(p.clone());
        }
        if let Some(p) = &self.model {
            cfg.model = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out_dir = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.save_intermediate {
            cfg.save_intermediate = true;
        }
        if let Some(f) = self.fill {
            cfg.kl.fill = f;
        }
        if let Some(e) = self.energy {
            cfg.kl.energy_fraction = e;
        }
        if let Some(m) = self.m {
            cfg.kl.explicit_m = Some(m);
        }
        if let Some(a) = self.alpha {
            cfg.kl.threshold_alpha = Some(a);
        }
        if let Some(t) = self.optical_thresh {
            cfg.hmm.thresholds.optical_anomaly = t;
        }
        if let Some(t) = self.sar_thresh {
            cfg.hmm.thresholds.sar = t;
        }
        if let Some(f) = &self.ftc {
            cfg.hmm.ftc = match f.parse::<usize>() {
                Ok(n) => FtcSetting::Fixed(n),
                Err(_) => FtcSetting::Named(f.clone()),
            };
            cfg.hmm.ftc.resolve().map_err(anyhow::Error::from)?;
        }
        if let Some(w) = self.sigma2_weight {
            cfg.filter.smoothness_weight = w;
        }
        if let Some(w) = self.sigma3_weight {
            cfg.filter.temporal_weight = w;
        }
        if let Some(t) = self.tol {
            cfg.filter.solver_tol = t;
        }
        if let Some(n) = self.max_iters {
            cfg.filter.max_iters = n;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ValidateArgs {
    /// Direct mode: CSV with pred,ref(,stratum) columns.
    #[arg(long)]
    labels_csv: Option<PathBuf>,
    /// Per-stratum area weights for the direct mode, comma-separated.
    #[arg(long)]
    weights: Option<String>,
    /// Map mode: hybrid/optical/sar date-map rasters + truth CSV.
    #[arg(long)]
    pred_hybrid: Option<PathBuf>,
    #[arg(long)]
    pred_optical: Option<PathBuf>,
    #[arg(long)]
    pred_sar: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Per-stratum sample counts, comma-separated (4 values).
    #[arg(long, default_value = "700,130,100,70")]
    design: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Ground-truth CSV (row,col,event_day) for scoring.
    #[arg(long)]
    truth: PathBuf,
    /// Optical-day counts to sweep, comma-separated.
    #[arg(long)]
    ns: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Also render PNG curves.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Summary CSV written by `ablate`.
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input GeoTIFFs, one per date, in day order.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Day numbers aligned with the inputs, comma-separated.
    #[arg(long)]
    days: String,
    #[arg(long)]
    band: String,
    #[arg(long, default_value = "day-0")]
    epoch: String,
    #[arg(long)]
    nodata: Option<f32>,
    /// Output stack stem.
    #[arg(long)]
    out: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} value {p:?}: {e}"))
        })
        .collect()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command, cli.workers) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Runs `f` under the requested worker count: 1 forces the sequential path,
/// n > 1 installs a dedicated rayon pool, absent uses the default pool.
/// Results never depend on the choice.
fn run_in_pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce(Parallelism) -> Result<T> + Send,
) -> Result<T> {
    match workers {
        Some(1) => f(Parallelism::Sequential),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)?
            .install(|| f(Parallelism::auto())),
        None => f(Parallelism::auto()),
    }
}

fn dispatch(cmd: Command, cli_workers: Option<usize>) -> Result<()> {
    match cmd {
        Command::Synth(args) => run_in_pool(cli_workers, |par| cmd_synth(args, par)),
        Command::Train(args) => {
            let cfg = args.build_config()?;
            run_in_pool(cli_workers.or(cfg.workers), |par| cmd_train(&cfg, par))
        }
        Command::Detect(args) => {
            let cfg = args.build_config()?;
            run_in_pool(cli_workers.or(cfg.workers), |par| cmd_detect(&cfg, par))
        }
        Command::Validate(args) => cmd_validate(args),
        Command::Ablate(args) => {
            let cfg = args.run.build_config()?;
            run_in_pool(cli_workers.or(cfg.workers), |par| cmd_ablate(&cfg, &args, par))
        }
        Command::Plot(args) => cmd_plot(args),
        Command::Convert(args) => cmd_convert(args),
    }
}

fn cmd_synth(args: SynthArgs, par: Parallelism) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SceneSpec = serde_json::from_str(&text).context("parsing scene spec")?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let bundle = generate(&spec, par)?;
    std::fs::create_dir_all(&args.out)?;
    write_stack(&bundle.training, args.out.join("training"))?;
    write_stack(&bundle.optical_test, args.out.join("optical"))?;
    write_stack(&bundle.sar_test, args.out.join("sar"))?;
    let truth_path = args.out.join("truth.csv");
    bundle
        .truth
        .write_csv(std::fs::File::create(&truth_path)?)?;

    let mut manifest = RunManifest::new("synth", spec.seed, &spec);
    for name in ["training", "optical", "sar"] {
        manifest.record(args.out.join(name).with_extension("json"))?;
        manifest.record(args.out.join(name).with_extension("bin"))?;
    }
    manifest.record(&truth_path)?;
    manifest.write(args.out.join("manifest.json"))?;
    log::info!(
        "scene written to {}: {} events, {} optical + {} sar test days",
        args.out.display(),
        spec.events.len(),
        spec.optical_test_days.len(),
        spec.sar_test_days.len()
    );
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, par: Parallelism) -> Result<()> {
    let out = run_train_to_dir(cfg, par)?;
    log::info!(
        "model over {} pixels: rank {}, m = {} capturing {:.4} of the variance",
        out.n,
        out.rank,
        out.m,
        out.captured_energy
    );
    Ok(())
}

fn cmd_detect(cfg: &PipelineConfig, par: Parallelism) -> Result<()> {
    let out = run_detect_to_dir(cfg, par)?;
    log::info!(
        "date map written to {}: {} of {} pixels confirmed changed (ftc {})",
        cfg.out_dir.display(),
        out.date_map.deforested_count(),
        out.date_map.statuses().len(),
        out.ftc
    );
    Ok(())
}

type LabelColumns = (Vec<bool>, Vec<bool>, Option<Vec<usize>>);

fn read_labels_csv(path: &PathBuf) -> Result<LabelColumns> {
    let mut rd = csv::Reader::from_path(path)?;
    let has_stratum = rd.headers()?.len() >= 3;
    let mut pred = Vec::new();
    let mut refs = Vec::new();
    let mut strata = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse_bool = |s: &str| -> Result<bool> {
            match s.trim() {
                "0" | "false" | "stable" => Ok(false),
                "1" | "true" | "deforest" | "deforested" => Ok(true),
                other => bail!("bad label {other:?}"),
            }
        };
        pred.push(parse_bool(&rec[0])?);
        refs.push(parse_bool(&rec[1])?);
        if has_stratum {
            strata.push(rec[2].trim().parse::<usize>()?);
        }
    }
    Ok((pred, refs, has_stratum.then_some(strata)))
}

fn write_metrics_csv(path: &PathBuf, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["map".to_string()];
    header.extend(MetricsReport::CSV_HEADER.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (name, r) in rows {
        let mut row = vec![name.clone()];
        row.extend(r.csv_row());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn datemap_labels_from_raster(path: &PathBuf) -> Result<(usize, usize, Vec<bool>)> {
    let stack = load_stack(path)?;
    if stack.band() != Band::DateMap || stack.slices() != 1 {
        bail!(
            "{} is not a single-slice date-map raster",
            path.display()
        );
    }
    let (vals, _) = stack.flatten_slice(0)?;
    Ok((
        stack.height(),
        stack.width(),
        vals.iter().map(|&v| v != 0.0).collect(),
    ))
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if let Some(labels) = &args.labels_csv {
        let (pred, refs, strata) = read_labels_csv(labels)?;
        let weights = args
            .weights
            .as_deref()
            .map(|w| parse_list::<f64>(w, "weight"))
            .transpose()?;
        let report = match (&strata, &weights) {
            (Some(s), Some(w)) => compute_metrics(&pred, &refs, Some((s, w)))?,
            _ => compute_metrics(&pred, &refs, None)?,
        };
        let path = args.out.join("metrics.csv");
        write_metrics_csv(&path, &[("labels".to_string(), report)])?;
        let mut manifest = RunManifest::new("validate", args.seed, &"labels-csv");
        manifest.record(&path)?;
        manifest.write(args.out.join("manifest.json"))?;
        log::info!("metrics written to {}", path.display());
        return Ok(());
    }

    let (hy, op, sa, truth_path) = match (
        &args.pred_hybrid,
        &args.pred_optical,
        &args.pred_sar,
        &args.truth,
    ) {
        (Some(h), Some(o), Some(s), Some(t)) => (h, o, s, t),
        _ => bail!(
            "validate needs either --labels-csv or all of --pred-hybrid, \
             --pred-optical, --pred-sar and --truth"
        ),
    };
    let (height, width, hl) = datemap_labels_from_raster(hy)?;
    let (_, _, ol) = datemap_labels_from_raster(op)?;
    let (_, _, sl) = datemap_labels_from_raster(sa)?;
    if ol.len() != hl.len() || sl.len() != hl.len() {
        bail!("prediction maps are not co-registered");
    }
    let truth = GroundTruth::read_csv(
        std::fs::File::open(truth_path)
            .with_context(|| format!("opening {}", truth_path.display()))?,
        height,
        width,
    )?;
    let truth_labels = truth.labels();

    let counts = parse_list::<usize>(&args.design, "design count")?;
    if counts.len() != 4 {
        bail!("design must have 4 per-stratum counts");
    }
    let design = StratifiedDesign {
        counts: [counts[0], counts[1], counts[2], counts[3]],
    };
    let to_map = |labels: &[bool]| -> Result<clearcut_core::hmm::DateMap> {
        let status = labels
            .iter()
            .map(|&d| {
                if d {
                    clearcut_core::hmm::PixelStatus::Deforested {
                        onset_day: 0,
                        confirm_day: 0,
                    }
                } else {
                    clearcut_core::hmm::PixelStatus::Stable
                }
            })
            .collect();
        Ok(clearcut_core::hmm::DateMap::new(height, width, status)?)
    };
    let (hm, om, sm) = (to_map(&hl)?, to_map(&ol)?, to_map(&sl)?);
    let points = stratified_sample(&hm, &om, &sm, &design, args.seed)?;

    let samples_path = args.out.join("samples.csv");
    {
        let mut w = csv::Writer::from_path(&samples_path)?;
        w.write_record(["row", "col", "stratum", "hybrid", "optical", "sar", "reference"])?;
        for p in &points {
            let i = p.row * width + p.col;
            w.write_record(&[
                p.row.to_string(),
                p.col.to_string(),
                p.stratum.to_string(),
                (hl[i] as u8).to_string(),
                (ol[i] as u8).to_string(),
                (sl[i] as u8).to_string(),
                (truth_labels[i] as u8).to_string(),
            ])?;
        }
        w.flush()?;
    }

    let at_points = |labels: &[bool]| -> Vec<bool> {
        points.iter().map(|p| labels[p.row * width + p.col]).collect()
    };
    let refs = at_points(&truth_labels);
    // Area weights straight from the maps: stratum pixel counts.
    let mut areas = [0f64; 4];
    for i in 0..hl.len() {
        areas[clearcut_core::validation::stratum_of(hl[i], ol[i], sl[i])] += 1.0;
    }
    let strata: Vec<usize> = points.iter().map(|p| p.stratum).collect();
    // The area-weighted estimator needs a sample in every populated stratum.
    let weighted_ok = (0..4).all(|h| areas[h] == 0.0 || strata.iter().any(|&s| s == h));
    if !weighted_ok {
        log::warn!("a populated stratum drew no samples; skipping area-weighted rows");
    }
    let mut rows = Vec::new();
    for (name, labels) in [("hybrid", &hl), ("optical", &ol), ("sar", &sl)] {
        let pred = at_points(labels);
        rows.push((name.to_string(), compute_metrics(&pred, &refs, None)?));
        if weighted_ok {
            rows.push((
                format!("{name}-area-weighted"),
                compute_metrics(&pred, &refs, Some((&strata, &areas)))?,
            ));
        }
    }
    let metrics_path = args.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;

    let mut manifest = RunManifest::new("validate", args.seed, &design);
    manifest.record(&samples_path)?;
    manifest.record(&metrics_path)?;
    manifest.write(args.out.join("manifest.json"))?;
    log::info!(
        "{} sample points and metrics written to {}",
        points.len(),
        args.out.display()
    );
    Ok(())
}

struct SummaryRow {
    n_optical: usize,
    mode: String,
    trials: usize,
    cells: Vec<(String, Option<f64>, Option<f64>)>,
}

fn cmd_ablate(cfg: &PipelineConfig, args: &AblateArgs, par: Parallelism) -> Result<()> {
    if !cfg.mode.uses_optical() || !cfg.mode.uses_sar() {
        bail!("ablate requires a hybrid configuration (both sensors)");
    }
    cfg.validate().map_err(anyhow::Error::from)?;
    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir)?;

    // Prepare the full-data products once; trials subset the optical days.
    let optical = load_stack(cfg.optical_stack.as_ref().unwrap())?;
    let training = load_stack(cfg.training_stack.as_ref().unwrap())?;
    let sar = load_stack(cfg.sar_stack.as_ref().unwrap())?;
    let cache = ModelCache::new();
    let anomaly = anomaly_stack(&optical, &training, &cfg.kl, par, &cache)?
        .anomalies
        .into_stack();
    let filtered = filter_stack(&sar, &cfg.filter, par)?;
    let truth = GroundTruth::read_csv(
        std::fs::File::open(&args.truth)
            .with_context(|| format!("opening {}", args.truth.display()))?,
        optical.height(),
        optical.width(),
    )?;
    let spec = cfg.hmm.build_spec()?;
    let total = cfg
        .hmm
        .total_optical_days
        .unwrap_or_else(|| anomaly.slices());
    let truth_labels = truth.labels();
    let ctx = AblationContext {
        anomaly: &anomaly,
        sar_filtered: Some(&filtered),
        truth: &truth_labels,
        spec: &spec,
        thresholds: cfg.hmm.thresholds,
        total_optical_days: total,
        mode: par,
    };

    // The radar-only reference, run once.
    let sar_sources = ObsSources {
        optical: None,
        sar: Some(&filtered),
        optical_raw: false,
        optical_thresholds: None,
    };
    let sar_map = pipeline::track_all(&sar_sources, &spec, &cfg.hmm.thresholds, 5, false, par)?;
    let sar_report = compute_metrics(&sar_map.labels(), &truth_labels, None)?;

    let ns = parse_list::<usize>(&args.ns, "n")?;
    let trials_path = out_dir.join("ablation_trials.csv");
    let summary_path = out_dir.join("ablation_summary.csv");
    let mut trial_rows: Vec<Vec<String>> = Vec::new();
    let mut summaries: Vec<SummaryRow> = Vec::new();
    for &n in &ns {
        let run = ablate_optical(&ctx, n, args.trials, cfg.seed)?;
        for t in &run.trials {
            let mode = match t.mode {
                FtcMode::Hybrid => "hybrid",
                FtcMode::OpticalOnly => "optical-only",
                FtcMode::SarOnly => "sar-only",
            };
            let mut row = vec![
                t.n_optical.to_string(),
                t.trial.to_string(),
                mode.to_string(),
                t.ftc.to_string(),
                t.subset_hash.clone(),
            ];
            row.extend(t.report.csv_row());
            trial_rows.push(row);
        }
        for s in &run.summaries {
            let mode = match s.mode {
                FtcMode::Hybrid => "hybrid",
                FtcMode::OpticalOnly => "optical-only",
                FtcMode::SarOnly => "sar-only",
            };
            summaries.push(SummaryRow {
                n_optical: s.n_optical,
                mode: mode.to_string(),
                trials: s.trials,
                cells: vec![
                    ("overall".into(), s.overall.mean, s.overall.variance),
                    (
                        "user_deforest".into(),
                        s.user_deforest.mean,
                        s.user_deforest.variance,
                    ),
                    (
                        "producer_deforest".into(),
                        s.producer_deforest.mean,
                        s.producer_deforest.variance,
                    ),
                    (
                        "balanced_accuracy".into(),
                        s.balanced_accuracy.mean,
                        s.balanced_accuracy.variance,
                    ),
                    (
                        "f1_deforest".into(),
                        s.f1_deforest.mean,
                        s.f1_deforest.variance,
                    ),
                ],
            });
        }
        // Constant radar-only baseline row per sweep point.
        summaries.push(SummaryRow {
            n_optical: n,
            mode: "sar-only".to_string(),
            trials: 1,
            cells: vec![
                ("overall".into(), Some(sar_report.overall), Some(0.0)),
                (
                    "user_deforest".into(),
                    sar_report.user_deforest,
                    Some(0.0),
                ),
                (
                    "producer_deforest".into(),
                    sar_report.producer_deforest,
                    Some(0.0),
                ),
                (
                    "balanced_accuracy".into(),
                    sar_report.balanced_accuracy,
                    Some(0.0),
                ),
                ("f1_deforest".into(), sar_report.f1_deforest, Some(0.0)),
            ],
        });
    }

    {
        let mut w = csv::Writer::from_path(&trials_path)?;
        let mut header = vec![
            "n_optical".to_string(),
            "trial".to_string(),
            "mode".to_string(),
            "ftc".to_string(),
            "subset_sha256".to_string(),
        ];
        header.extend(MetricsReport::CSV_HEADER.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for row in &trial_rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    {
        let mut w = csv::Writer::from_path(&summary_path)?;
        let mut header = vec![
            "n_optical".to_string(),
            "mode".to_string(),
            "trials".to_string(),
        ];
        for s in &summaries[0].cells {
            header.push(format!("{}_mean", s.0));
            header.push(format!("{}_var", s.0));
        }
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for s in &summaries {
            let mut row = vec![
                s.n_optical.to_string(),
                s.mode.clone(),
                s.trials.to_string(),
            ];
            for (_, mean, var) in &s.cells {
                row.push(cell(*mean));
                row.push(cell(*var));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    let mut manifest = RunManifest::new("ablate", cfg.seed, cfg);
    manifest.record(&trials_path)?;
    manifest.record(&summary_path)?;
    if args.plot {
        let pngs = render_curves(&summary_path, out_dir)?;
        for p in &pngs {
            manifest.record(p)?;
        }
    }
    manifest.write(out_dir.join("manifest.json"))?;
    log::info!(
        "ablation over n = {ns:?} with {} trials written to {}",
        args.trials,
        out_dir.display()
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let pngs = render_curves(&args.curves, &args.out)?;
    let mut manifest = RunManifest::new("plot", 0, &args.curves.display().to_string());
    for p in &pngs {
        manifest.record(p)?;
    }
    manifest.write(args.out.join("manifest.json"))?;
    log::info!("{} plots written to {}", pngs.len(), args.out.display());
    Ok(())
}

/// Renders one PNG per metric column from an ablation summary CSV.
fn render_curves(curves: &PathBuf, out_dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    let mut rd = csv::Reader::from_path(curves)
        .with_context(|| format!("opening {}", curves.display()))?;
    let headers: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
    let records: Vec<csv::StringRecord> = rd.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        bail!("curve CSV {} has no data rows", curves.display());
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let n_col = col("n_optical").context("missing n_optical column")?;
    let mode_col = col("mode").context("missing mode column")?;

    let metrics: Vec<String> = headers
        .iter()
        .filter_map(|h| h.strip_suffix("_mean").map(|s| s.to_string()))
        .collect();
    if metrics.is_empty() {
        bail!("no *_mean columns in {}", curves.display());
    }
    let mut outputs = Vec::new();
    for metric in &metrics {
        let mean_col = col(&format!("{metric}_mean")).unwrap();
        let var_col = col(&format!("{metric}_var"));
        let mut by_mode: std::collections::BTreeMap<String, Vec<(f64, f64, f64)>> =
            std::collections::BTreeMap::new();
        for rec in &records {
            let mode = rec[mode_col].to_string();
            let n: f64 = rec[n_col].parse().unwrap_or(f64::NAN);
            let mean = rec[mean_col].parse::<f64>().ok();
            let std = var_col
                .and_then(|c| rec[c].parse::<f64>().ok())
                .map(|v| v.sqrt())
                .unwrap_or(0.0);
            if let Some(m) = mean {
                by_mode.entry(mode).or_default().push((n, m, std));
            }
        }
        let mut series = Vec::new();
        for (i, (mode, mut pts)) in by_mode.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            series.push(Series {
                label: mode.clone(),
                color: PALETTE[i % PALETTE.len()],
                points: pts.iter().map(|&(n, m, _)| (n, m)).collect(),
                err: Some(pts.iter().map(|&(_, _, s)| s).collect()),
                baseline: mode == "sar-only",
            });
        }
        let path = out_dir.join(format!("{metric}.png"));
        line_plot(&series, 800, 600, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let days = parse_list::<i64>(&args.days, "day")?;
    let band = match args.band.as_str() {
        "optical-evi" => Band::OpticalEvi,
        "optical-anomaly" => Band::OpticalAnomaly,
        "sar-vv" => Band::SarVv,
        "sar-vh" => Band::SarVh,
        "sar-filtered" => Band::SarFiltered,
        other => bail!("unknown band {other:?}"),
    };
    let stack = clearcut_core::raster::geotiff::convert_geotiffs(
        &args.inputs,
        &days,
        band,
        SceneMetadata::new(args.epoch.clone()),
        args.nodata,
    )?;
    write_stack(&stack, &args.out)?;
    log::info!(
        "{} slices of {}x{} written to {}",
        stack.slices(),
        stack.height(),
        stack.width(),
        args.out.display()
    );
    Ok(())
}
