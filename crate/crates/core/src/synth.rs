//! Seeded generator of co-registered synthetic optical/SAR scenes with known
//! ground truth, for desk-scale end-to-end testing.
//!
//! The nominal forest is a stationary process: per-slice spatially
//! correlated Gaussian fluctuation (separable exponential-kernel smoothing
//! of white noise, which makes the pixel covariance non-diagonal) around a
//! constant vegetation-index level. Clearing events drop the optical and
//! radar levels inside a polygon from their event day, with optional
//! exponential regrowth. Clouds mask optical samples and never touch SAR.
//!
//! Scales are generator conventions chosen so the default thresholds are
//! meaningful: vegetation index around 4.0 dropping by ~2.5 under clearing,
//! radar backscatter around -4 (forest) and -7 (bare) in dB-like units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{DateMap, PixelStatus};
use crate::par::{self, Parallelism};
use crate::raster::{Band, RasterStack, SceneMetadata};
use crate::rng::mix_seed;
use crate::validation::{compute_metrics, MetricsReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClearingEvent {
    /// Vertices as (col, row); pixels are tested at their centers.
    pub polygon: Vec<(f64, f64)>,
    pub day: i64,
    pub evi_drop: f64,
    pub sar_drop: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regrowth_half_life: Option<f64>,
}

impl ClearingEvent {
    /// Axis-aligned rectangle [col0, col0+w) x [row0, row0+h).
    pub fn rect(col0: f64, row0: f64, w: f64, h: f64, day: i64) -> ClearingEvent {
        ClearingEvent {
            polygon: vec![
                (col0, row0),
                (col0 + w, row0),
                (col0 + w, row0 + h),
                (col0, row0 + h),
            ],
            day,
            evi_drop: 2.5,
            sar_drop: 3.0,
            regrowth_half_life: None,
        }
    }
}

fn default_evi_mean() -> f64 {
    4.0
}
fn default_evi_noise() -> f64 {
    0.25
}
fn default_corr_len() -> f64 {
    4.0
}
fn default_sar_forest() -> f64 {
    -4.0
}
fn default_speckle() -> f64 {
    0.4
}
fn default_blob_scale() -> f64 {
    6.0
}
fn default_training_step() -> i64 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub training_day_count: usize,
    #[serde(default)]
    pub training_day_start: i64,
    #[serde(default = "default_training_step")]
    pub training_day_step: i64,
    pub optical_test_days: Vec<i64>,
    pub sar_test_days: Vec<i64>,
    /// Nominal vegetation-index level of standing forest.
    #[serde(default = "default_evi_mean")]
    pub evi_mean: f64,
    /// Std of the spatially correlated per-slice fluctuation.
    #[serde(default = "default_evi_noise")]
    pub evi_noise: f64,
    /// Spatial correlation length in pixels.
    #[serde(default = "default_corr_len")]
    pub correlation_length: f64,
    /// Nominal radar backscatter of standing forest (dB-like).
    #[serde(default = "default_sar_forest")]
    pub sar_forest: f64,
    /// Radar speckle noise std.
    #[serde(default = "default_speckle")]
    pub speckle_sigma: f64,
    /// Mean fraction of optical pixels covered by cloud per day.
    #[serde(default)]
    pub cloud_coverage: f64,
    /// Correlation length of cloud blobs in pixels.
    #[serde(default = "default_blob_scale")]
    pub cloud_blob_scale: f64,
    /// Fraction of cloudy pixels the (simulated) screening misses: they stay
    /// unmasked but their vegetation index is depressed by `cloud_evi_delta`.
    #[serde(default)]
    pub missed_cloud_fraction: f64,
    #[serde(default = "default_cloud_delta")]
    pub cloud_evi_delta: f64,
    #[serde(default)]
    pub events: Vec<ClearingEvent>,
    pub seed: u64,
}

fn default_cloud_delta() -> f64 {
    -2.5
}

impl SceneSpec {
    pub fn training_days(&self) -> Vec<i64> {
        (0..self.training_day_count)
            .map(|i| self.training_day_start + i as i64 * self.training_day_step)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParam("empty scene".into()));
        }
        if self.training_day_count < 2 {
            return Err(Error::InvalidParam(
                "need at least 2 training slices".into(),
            ));
        }
        if self.training_day_step < 1 {
            return Err(Error::InvalidParam("training day step must be >= 1".into()));
        }
        if self.optical_test_days.is_empty() && self.sar_test_days.is_empty() {
            return Err(Error::InvalidParam("no test days".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_coverage)
            || !(0.0..=1.0).contains(&self.missed_cloud_fraction)
        {
            return Err(Error::InvalidParam("fractions must lie in [0,1]".into()));
        }
        let tmin = self
            .optical_test_days
            .iter()
            .chain(&self.sar_test_days)
            .min()
            .copied()
            .unwrap();
        let tmax = self
            .optical_test_days
            .iter()
            .chain(&self.sar_test_days)
            .max()
            .copied()
            .unwrap();
        for (i, ev) in self.events.iter().enumerate() {
            if ev.polygon.len() < 3 {
                return Err(Error::InvalidParam(format!(
                    "event {i} polygon has fewer than 3 vertices"
                )));
            }
            if ev.day < tmin || ev.day > tmax {
                return Err(Error::InvalidParam(format!(
                    "event {i} day {} outside test range [{tmin}, {tmax}]",
                    ev.day
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel true event day plus the per-day cloud masks actually applied to
/// the optical test stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    event_day: Vec<Option<i64>>,
    optical_days: Vec<i64>,
    cloud_masks: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn event_day(&self, row: usize, col: usize) -> Option<i64> {
        self.event_day[row * self.width + col]
    }

    pub fn event_days(&self) -> &[Option<i64>] {
        &self.event_day
    }

    /// True change labels, row-major.
    pub fn labels(&self) -> Vec<bool> {
        self.event_day.iter().map(|d| d.is_some()).collect()
    }

    pub fn cloud_mask(&self, optical_slice: usize) -> &[bool] {
        &self.cloud_masks[optical_slice]
    }

    pub fn optical_days(&self) -> &[i64] {
        &self.optical_days
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "event_day"])?;
        for r in 0..self.height {
            for c in 0..self.width {
                if let Some(d) = self.event_day(r, c) {
                    w.write_record(&[r.to_string(), c.to_string(), d.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Rebuilds truth labels from a CSV written by [`write_csv`].
    pub fn read_csv<R: std::io::Read>(reader: R, height: usize, width: usize) -> Result<GroundTruth> {
        let mut rd = csv::Reader::from_reader(reader);
        let mut event_day = vec![None; height * width];
        for rec in rd.records() {
            let rec = rec?;
            let r: usize = rec[0].parse().map_err(|_| {
                Error::InvalidParam(format!("bad row value {:?}", &rec[0]))
            })?;
            let c: usize = rec[1].parse().map_err(|_| {
                Error::InvalidParam(format!("bad col value {:?}", &rec[1]))
            })?;
            let d: i64 = rec[2].parse().map_err(|_| {
                Error::InvalidParam(format!("bad day value {:?}", &rec[2]))
            })?;
            if r >= height || c >= width {
                return Err(Error::IndexOutOfRange(format!("({r},{c})")));
            }
            event_day[r * width + c] = Some(d);
        }
        Ok(GroundTruth {
            height,
            width,
            event_day,
            optical_days: Vec::new(),
            cloud_masks: Vec::new(),
        })
    }
}

pub struct SceneBundle {
    pub training: RasterStack,
    pub optical_test: RasterStack,
    pub sar_test: RasterStack,
    pub truth: GroundTruth,
}

fn even_odd_inside(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        if (y1 > py) != (y2 > py) && px < (x2 - x1) * (py - y1) / (y2 - y1) + x1 {
            inside = !inside;
        }
    }
    inside
}

/// Unit-variance (interior) spatially correlated Gaussian field: white noise
/// smoothed by a separable exponential kernel.
fn correlated_field(seed: u64, height: usize, width: usize, length: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut field: Vec<f64> = (0..height * width).map(|_| normal.sample(&mut rng)).collect();
    if length <= 0.0 {
        return field;
    }
    let radius = (3.0 * length).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d.abs() as f64) / length).exp())
        .collect();
    let norm = kernel.iter().map(|w| w * w).sum::<f64>().sqrt();
    let kernel: Vec<f64> = kernel.into_iter().map(|w| w / norm).collect();

    // Horizontal then vertical pass; borders clamp (slight variance loss).
    let mut tmp = vec![0.0f64; height * width];
    for r in 0..height {
        for c in 0..width {
            let mut s = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let cc = (c as isize + ki as isize - radius).clamp(0, width as isize - 1) as usize;
                s += w * field[r * width + cc];
            }
            tmp[r * width + c] = s;
        }
    }
    for c in 0..width {
        for r in 0..height {
            let mut s = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let rr = (r as isize + ki as isize - radius).clamp(0, height as isize - 1) as usize;
                s += w * tmp[rr * width + c];
            }
            field[r * width + c] = s;
        }
    }
    field
}

/// Cloud mask with exactly `round(coverage * pixels)` cloudy pixels, shaped
/// as blobs by thresholding a correlated field at the matching quantile.
fn cloud_mask(seed: u64, height: usize, width: usize, coverage: f64, blob: f64) -> Vec<bool> {
    let n = height * width;
    let want = ((coverage * n as f64).round() as usize).min(n);
    if want == 0 {
        return vec![false; n];
    }
    let field = correlated_field(seed, height, width, blob);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]));
    let mut mask = vec![false; n];
    for &i in order.iter().take(want) {
        mask[i] = true;
    }
    mask
}

const STREAM_TRAINING: u64 = 1;
const STREAM_OPTICAL: u64 = 2;
const STREAM_CLOUD: u64 = 3;
const STREAM_SPECKLE: u64 = 4;
const STREAM_MISSED: u64 = 5;
const STREAM_TRAIN_CLOUD: u64 = 6;

/// Deterministic scene generation; identical seeds give bit-identical
/// stacks.
pub fn generate(spec: &SceneSpec, mode: Parallelism) -> Result<SceneBundle> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let meta = SceneMetadata::new("synthetic-day-0");

    // First event covering each pixel wins.
    let mut event_day: Vec<Option<i64>> = vec![None; n];
    let mut event_of: Vec<Option<usize>> = vec![None; n];
    let mut by_day: Vec<usize> = (0..spec.events.len()).collect();
    by_day.sort_by_key(|&i| spec.events[i].day);
    for &ei in &by_day {
        let ev = &spec.events[ei];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if event_of[i].is_none()
                    && even_odd_inside(c as f64 + 0.5, r as f64 + 0.5, &ev.polygon)
                {
                    event_of[i] = Some(ei);
                    event_day[i] = Some(ev.day);
                }
            }
        }
    }

    let drop_factor = |ev: &ClearingEvent, day: i64| -> f64 {
        if day < ev.day {
            return 0.0;
        }
        match ev.regrowth_half_life {
            None => 1.0,
            Some(hl) => 0.5f64.powf((day - ev.day) as f64 / hl),
        }
    };

    // Nominal optical slice (no events, no clouds).
    let nominal_optical = |stream: u64, idx: usize| -> Vec<f64> {
        let f = correlated_field(mix_seed(spec.seed, stream, idx as u64), h, w, spec.correlation_length);
        f.iter().map(|v| spec.evi_mean + spec.evi_noise * v).collect()
    };

    let training_days = spec.training_days();
    let training_slices = par::map_indexed(mode, training_days.len(), |t| {
        let base = nominal_optical(STREAM_TRAINING, t);
        let mask = cloud_mask(
            mix_seed(spec.seed, STREAM_TRAIN_CLOUD, t as u64),
            h,
            w,
            spec.cloud_coverage,
            spec.cloud_blob_scale,
        );
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            if mask[i] {
                vals.push(f32::NAN);
            } else {
                vals.push(base[i] as f32);
            }
        }
        vals
    });

    let optical_outputs = par::map_indexed(mode, spec.optical_test_days.len(), |t| {
        let day = spec.optical_test_days[t];
        let base = nominal_optical(STREAM_OPTICAL, t);
        let mask = cloud_mask(
            mix_seed(spec.seed, STREAM_CLOUD, t as u64),
            h,
            w,
            spec.cloud_coverage,
            spec.cloud_blob_scale,
        );
        let mut missed_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_MISSED, t as u64));
        let missed: Vec<bool> = (0..n)
            .map(|_| {
                rand::Rng::random_range(&mut missed_rng, 0.0..1.0) < spec.missed_cloud_fraction
            })
            .collect();
        let mut vals = Vec::with_capacity(n);
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let mut v = base[i];
            if let Some(ei) = event_of[i] {
                let ev = &spec.events[ei];
                v -= ev.evi_drop * drop_factor(ev, day);
            }
            if mask[i] {
                if missed[i] {
                    vals.push((v + spec.cloud_evi_delta) as f32);
                } else {
                    vals.push(f32::NAN);
                }
            } else {
                vals.push(v as f32);
            }
        }
        (vals, mask)
    });

    let sar_slices = par::map_indexed(mode, spec.sar_test_days.len(), |t| {
        let day = spec.sar_test_days[t];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_SPECKLE, t as u64));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut vals = Vec::with_capacity(n);
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let mut v = spec.sar_forest;
            if let Some(ei) = event_of[i] {
                let ev = &spec.events[ei];
                v -= ev.sar_drop * drop_factor(ev, day);
            }
            v += spec.speckle_sigma * normal.sample(&mut rng);
            vals.push(v as f32);
        }
        vals
    });

    let to_stack = |band: Band, days: Vec<i64>, slices: Vec<Vec<f32>>| -> Result<RasterStack> {
        let mut flat = Vec::with_capacity(slices.len() * n);
        for s in slices {
            flat.extend(s);
        }
        RasterStack::from_values(
            band,
            meta.clone(),
            days,
            ndarray::Array3::from_shape_vec((flat.len() / n, h, w), flat).unwrap(),
        )
    };

    let (optical_vals, cloud_masks): (Vec<Vec<f32>>, Vec<Vec<bool>>) =
        optical_outputs.into_iter().unzip();

    Ok(SceneBundle {
        training: to_stack(Band::OpticalEvi, training_days, training_slices)?,
        optical_test: to_stack(
            Band::OpticalEvi,
            spec.optical_test_days.clone(),
            optical_vals,
        )?,
        sar_test: to_stack(Band::SarVv, spec.sar_test_days.clone(), sar_slices)?,
        truth: GroundTruth {
            height: h,
            width: w,
            event_day,
            optical_days: spec.optical_test_days.clone(),
            cloud_masks,
        },
    })
}

/// Detection-delay statistics over true positives: `confirm - true` days.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: usize,
    pub median: Option<f64>,
    pub p10: Option<f64>,
    pub p90: Option<f64>,
    pub within_tolerance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub metrics: MetricsReport,
    pub delays: DelayStats,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

/// Scores a detection map against ground truth: classification metrics over
/// all pixels plus delay statistics for the correctly detected ones.
pub fn score_datemap(
    result: &DateMap,
    truth: &GroundTruth,
    day_tolerance: i64,
) -> Result<ScoreReport> {
    if result.height() != truth.height || result.width() != truth.width {
        return Err(Error::ShapeMismatch(format!(
            "map {}x{} vs truth {}x{}",
            result.height(),
            result.width(),
            truth.height,
            truth.width
        )));
    }
    let metrics = compute_metrics(&result.labels(), &truth.labels(), None)?;

    let mut delays: Vec<f64> = Vec::new();
    for r in 0..truth.height {
        for c in 0..truth.width {
            if let (PixelStatus::Deforested { confirm_day, .. }, Some(true_day)) =
                (result.status(r, c), truth.event_day(r, c))
            {
                delays.push((confirm_day - true_day) as f64);
            }
        }
    }
    delays.sort_by(f64::total_cmp);
    let stats = if delays.is_empty() {
        DelayStats::default()
    } else {
        DelayStats {
            count: delays.len(),
            median: Some(percentile(&delays, 0.5)),
            p10: Some(percentile(&delays, 0.1)),
            p90: Some(percentile(&delays, 0.9)),
            within_tolerance: Some(
                delays
                    .iter()
                    .filter(|&&d| d.abs() <= day_tolerance as f64)
                    .count() as f64
                    / delays.len() as f64,
            ),
        }
    };
    Ok(ScoreReport {
        metrics,
        delays: stats,
    })
}
