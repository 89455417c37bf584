//! Accuracy assessment: stratified sampling over map-agreement strata,
//! confusion-matrix metrics (optionally area-weighted), and the
//! optical-day-removal ablation harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hmm::{DateMap, FtcMode, HmmSpec, ObsSources, Thresholds};
use crate::par::Parallelism;
use crate::pipeline;
use crate::raster::RasterStack;

/// Agreement stratum of a pixel across (hybrid, optical, sar) change maps.
///
/// 0: stable in all three; 1: change in all three; 2: hybrid change, some
/// other map stable; 3: hybrid stable, some other map change.
pub fn stratum_of(hybrid: bool, optical: bool, sar: bool) -> usize {
    match (hybrid, optical && sar, optical || sar) {
        (false, _, false) => 0,
        (true, true, _) => 1,
        (true, false, _) => 2,
        (false, _, true) => 3,
    }
}

pub const N_STRATA: usize = 4;

/// Per-stratum sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedDesign {
    pub counts: [usize; N_STRATA],
}

impl Default for StratifiedDesign {
    fn default() -> Self {
        StratifiedDesign {
            counts: [700, 130, 100, 70],
        }
    }
}

impl StratifiedDesign {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub row: usize,
    pub col: usize,
    pub stratum: usize,
}

/// Stratified random sample without replacement, uniform within each
/// stratum, reproducible by seed.
pub fn stratified_sample(
    hybrid: &DateMap,
    optical: &DateMap,
    sar: &DateMap,
    design: &StratifiedDesign,
    seed: u64,
) -> Result<Vec<SamplePoint>> {
    let (h, w) = (hybrid.height(), hybrid.width());
    for (name, map) in [("optical", optical), ("sar", sar)] {
        if map.height() != h || map.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "{name} map {}x{} vs hybrid {}x{}",
                map.height(),
                map.width(),
                h,
                w
            )));
        }
    }
    let mut buckets: [Vec<usize>; N_STRATA] = Default::default();
    let hl = hybrid.labels();
    let ol = optical.labels();
    let sl = sar.labels();
    for i in 0..h * w {
        buckets[stratum_of(hl[i], ol[i], sl[i])].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for (stratum, bucket) in buckets.iter().enumerate() {
        let want = design.counts[stratum];
        if want == 0 {
            continue;
        }
        if want > bucket.len() {
            return Err(Error::StratumTooSmall {
                stratum,
                available: bucket.len(),
                requested: want,
            });
        }
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, bucket.len(), want)
            .into_iter()
            .map(|j| bucket[j])
            .collect();
        picks.sort_unstable();
        points.extend(picks.into_iter().map(|i| SamplePoint {
            row: i / w,
            col: i % w,
            stratum,
        }));
    }
    Ok(points)
}

/// 2x2 counts over {stable, change} x {predicted, reference}.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn from_labels(pred: &[bool], reference: &[bool]) -> Result<ConfusionMatrix> {
        if pred.len() != reference.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions vs {} references",
                pred.len(),
                reference.len()
            )));
        }
        let mut m = ConfusionMatrix::default();
        for (&p, &r) in pred.iter().zip(reference) {
            match (p, r) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Accuracy metrics. Ratios with zero denominators are `None` (flagged
/// not-a-value), never silently zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: f64,
    pub user_deforest: Option<f64>,
    pub producer_deforest: Option<f64>,
    pub user_stable: Option<f64>,
    pub producer_stable: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1_deforest: Option<f64>,
}

impl MetricsReport {
    /// Cell masses need not be normalized; every metric is scale-invariant
    /// (overall divides by the total), so raw counts give exact ratios.
    fn from_proportions(p_tp: f64, p_fp: f64, p_fn: f64, p_tn: f64) -> MetricsReport {
        let total = p_tp + p_fp + p_fn + p_tn;
        let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
        let user_deforest = ratio(p_tp, p_tp + p_fp);
        let producer_deforest = ratio(p_tp, p_tp + p_fn);
        let user_stable = ratio(p_tn, p_tn + p_fn);
        let producer_stable = ratio(p_tn, p_tn + p_fp);
        let balanced_accuracy = match (producer_deforest, producer_stable) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        };
        // Harmonic mean of precision and recall, computed on the cell
        // masses directly (2tp / (2tp + fp + fn)) so count inputs stay exact.
        let f1_deforest = match (user_deforest, producer_deforest) {
            (Some(_), Some(_)) => Some(2.0 * p_tp / (2.0 * p_tp + p_fp + p_fn)),
            _ => None,
        };
        MetricsReport {
            overall: (p_tp + p_tn) / total,
            user_deforest,
            producer_deforest,
            user_stable,
            producer_stable,
            balanced_accuracy,
            f1_deforest,
        }
    }

    pub const CSV_HEADER: &'static [&'static str] = &[
        "overall",
        "user_deforest",
        "producer_deforest",
        "user_stable",
        "producer_stable",
        "balanced_accuracy",
        "f1_deforest",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
        }
        vec![
            format!("{:.6}", self.overall),
            cell(self.user_deforest),
            cell(self.producer_deforest),
            cell(self.user_stable),
            cell(self.producer_stable),
            cell(self.balanced_accuracy),
            cell(self.f1_deforest),
        ]
    }
}

/// Unweighted metrics from label vectors, or good-practice area-weighted
/// estimators when per-point strata and per-stratum area weights are given
/// (cell proportions reconstructed from stratum area shares).
pub fn compute_metrics(
    pred: &[bool],
    reference: &[bool],
    weights: Option<(&[usize], &[f64])>,
) -> Result<MetricsReport> {
    if pred.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no samples to score".into()));
    }
    match weights {
        None => {
            let m = ConfusionMatrix::from_labels(pred, reference)?;
            Ok(MetricsReport::from_proportions(
                m.tp as f64,
                m.fp as f64,
                m.fn_ as f64,
                m.tn as f64,
            ))
        }
        Some((strata, area_weights)) => {
            if strata.len() != pred.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} strata for {} samples",
                    strata.len(),
                    pred.len()
                )));
            }
            let n_strata = area_weights.len();
            if area_weights.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidParam("negative area weight".into()));
            }
            let wsum: f64 = area_weights.iter().sum();
            if wsum <= 0.0 {
                return Err(Error::InvalidParam("area weights sum to zero".into()));
            }
            // Cell proportions p_ij = sum_h W_h * n_{h,ij} / n_h.
            let mut counts = vec![[0usize; 4]; n_strata];
            for ((&p, &r), &h) in pred.iter().zip(reference).zip(strata) {
                if h >= n_strata {
                    return Err(Error::IndexOutOfRange(format!(
                        "stratum {h} of {n_strata}"
                    )));
                }
                let cell = match (p, r) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                counts[h][cell] += 1;
            }
            let mut p = [0.0f64; 4];
            for h in 0..n_strata {
                let nh: usize = counts[h].iter().sum();
                if nh == 0 {
                    if area_weights[h] > 0.0 {
                        return Err(Error::EmptyInput(format!(
                            "stratum {h} has positive weight but no samples"
                        )));
                    }
                    continue;
                }
                let wh = area_weights[h] / wsum;
                for cell in 0..4 {
                    p[cell] += wh * counts[h][cell] as f64 / nh as f64;
                }
            }
            Ok(MetricsReport::from_proportions(p[0], p[1], p[2], p[3]))
        }
    }
}

/// Per-metric mean and variance over ablation trials; undefined values are
/// skipped and counted.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub undefined: usize,
}

fn aggregate(values: impl Iterator<Item = Option<f64>>) -> MetricAggregate {
    let mut defined = Vec::new();
    let mut undefined = 0usize;
    for v in values {
        match v {
            Some(x) => defined.push(x),
            None => undefined += 1,
        }
    }
    if defined.is_empty() {
        return MetricAggregate {
            mean: None,
            variance: None,
            undefined,
        };
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    // Bit-identical trials have exactly zero variance; don't let the mean's
    // rounding manufacture residuals.
    let variance = if defined.windows(2).all(|w| w[0] == w[1]) {
        0.0
    } else {
        defined.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    };
    MetricAggregate {
        mean: Some(mean),
        variance: Some(variance),
        undefined,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTrial {
    pub n_optical: usize,
    pub trial: usize,
    pub mode: FtcMode,
    /// SHA-256 of the drawn optical day subset, shared across modes.
    pub subset_hash: String,
    pub ftc: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub n_optical: usize,
    pub mode: FtcMode,
    pub trials: usize,
    pub overall: MetricAggregate,
    pub user_deforest: MetricAggregate,
    pub producer_deforest: MetricAggregate,
    pub balanced_accuracy: MetricAggregate,
    pub f1_deforest: MetricAggregate,
}

pub struct AblationRun {
    pub trials: Vec<AblationTrial>,
    pub summaries: Vec<AblationSummary>,
}

/// Inputs shared by every ablation trial: anomaly and filtered-radar stacks
/// computed once from the full data, ground-truth labels, and the model
/// settings of the run.
pub struct AblationContext<'a> {
    pub anomaly: &'a RasterStack,
    pub sar_filtered: Option<&'a RasterStack>,
    pub truth: &'a [bool],
    pub spec: &'a HmmSpec,
    pub thresholds: Thresholds,
    pub total_optical_days: usize,
    pub mode: Parallelism,
}

pub fn subset_hash(days: &[i64]) -> String {
    let mut hasher = Sha256::new();
    for d in days {
        hasher.update(d.to_le_bytes());
    }
    crate::pipeline::to_hex(&hasher.finalize())
}

use crate::rng::mix_seed;

/// Runs `trials` random optical-day subsets of size `n_optical` through the
/// hybrid and optical-only trackers (same subsets for both, so the results
/// are comparable), scoring each against ground truth.
pub fn ablate_optical(
    ctx: &AblationContext<'_>,
    n_optical: usize,
    trials: usize,
    seed: u64,
) -> Result<AblationRun> {
    let available = ctx.anomaly.slices();
    if n_optical > available {
        return Err(Error::InvalidParam(format!(
            "n_optical {n_optical} exceeds {available} available optical days"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidParam("trials must be >= 1".into()));
    }

    let trial_indices: Vec<usize> = (0..trials).collect();
    let results = crate::par::map_slice(ctx.mode, &trial_indices, |&t| -> Result<Vec<AblationTrial>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, n_optical as u64, t as u64));
        let mut picks: Vec<usize> =
            rand::seq::index::sample(&mut rng, available, n_optical).into_vec();
        picks.sort_unstable();
        let sub = ctx.anomaly.select_slices(&picks)?;
        let days: Vec<i64> = sub.days().to_vec();
        let hash = subset_hash(&days);

        let mut out = Vec::with_capacity(2);
        for mode in [FtcMode::Hybrid, FtcMode::OpticalOnly] {
            let (optical, sar, eff_mode) = match mode {
                FtcMode::Hybrid => {
                    if n_optical == 0 {
                        // Empty optical set: the hybrid run is the radar-only
                        // run, radar FTC included.
                        (None, ctx.sar_filtered, FtcMode::SarOnly)
                    } else {
                        (Some(&sub), ctx.sar_filtered, FtcMode::Hybrid)
                    }
                }
                FtcMode::OpticalOnly => {
                    if n_optical == 0 {
                        // No optical data at all: nothing to track.
                        continue;
                    }
                    (Some(&sub), None, FtcMode::OpticalOnly)
                }
                FtcMode::SarOnly => unreachable!(),
            };
            let ftc = crate::hmm::variable_ftc(n_optical, eff_mode, ctx.total_optical_days);
            let sources = ObsSources {
                optical: optical.map(|s| s as &RasterStack),
                sar,
                optical_raw: false,
                optical_thresholds: None,
            };
            let map = pipeline::track_all(
                &sources,
                ctx.spec,
                &ctx.thresholds,
                ftc,
                false,
                Parallelism::Sequential,
            )?;
            let report = compute_metrics(&map.labels(), ctx.truth, None)?;
            out.push(AblationTrial {
                n_optical,
                trial: t,
                mode,
                subset_hash: hash.clone(),
                ftc,
                report,
            });
        }
        Ok(out)
    });

    let mut all_trials = Vec::new();
    for r in results {
        all_trials.extend(r?);
    }

    let mut summaries = Vec::new();
    for mode in [FtcMode::Hybrid, FtcMode::OpticalOnly] {
        let of_mode: Vec<&AblationTrial> =
            all_trials.iter().filter(|t| t.mode == mode).collect();
        if of_mode.is_empty() {
            continue;
        }
        summaries.push(AblationSummary {
            n_optical,
            mode,
            trials: of_mode.len(),
            overall: aggregate(of_mode.iter().map(|t| Some(t.report.overall))),
            user_deforest: aggregate(of_mode.iter().map(|t| t.report.user_deforest)),
            producer_deforest: aggregate(of_mode.iter().map(|t| t.report.producer_deforest)),
            balanced_accuracy: aggregate(of_mode.iter().map(|t| t.report.balanced_accuracy)),
            f1_deforest: aggregate(of_mode.iter().map(|t| t.report.f1_deforest)),
        });
    }
    Ok(AblationRun {
        trials: all_trials,
        summaries,
    })
}
