//! Missing-data fill strategies for training stacks.
//!
//! Every fill is computed from the original non-missing samples only; filled
//! values never feed later fills, so the result is independent of evaluation
//! order and safe to compute in parallel.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::raster::RasterStack;

/// How to treat missing training samples before covariance estimation.
///
/// `None` leaves gaps in place (the estimator then uses pairwise-complete
/// normalization). The space-fill family averages the `k` nearest non-missing
/// neighbors in a box extending `extent` pixels in each spatial direction and
/// one slice in each temporal direction, differing only in the fallback used
/// when that box is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FillStrategy {
    None,
    Fill0,
    GlobalMean,
    SliceMean,
    CubeMean { side: usize },
    TimeKnn { k: usize },
    SpaceFill0 { k: usize, extent: usize },
    SpaceFillNan { k: usize, extent: usize },
    /// Space fill whose empty-box fallback is the mean of the 5 nearest
    /// neighbors in time (then 0).
    SpaceFillTimeKnn { k: usize },
    SpaceFillGlobal { k: usize },
    SpaceFillSlice { k: usize },
}

impl Default for FillStrategy {
    fn default() -> Self {
        FillStrategy::SpaceFill0 { k: 3, extent: 1 }
    }
}

impl FillStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FillStrategy::CubeMean { side } => {
                if side < 3 || side % 2 == 0 {
                    return Err(Error::InvalidParam(format!(
                        "cube-mean side {side} must be odd and >= 3"
                    )));
                }
            }
            FillStrategy::TimeKnn { k }
            | FillStrategy::SpaceFillTimeKnn { k }
            | FillStrategy::SpaceFillGlobal { k }
            | FillStrategy::SpaceFillSlice { k } => {
                if k < 1 {
                    return Err(Error::InvalidParam("k must be >= 1".to_string()));
                }
            }
            FillStrategy::SpaceFill0 { k, extent } | FillStrategy::SpaceFillNan { k, extent } => {
                if k < 1 {
                    return Err(Error::InvalidParam("k must be >= 1".to_string()));
                }
                if extent < 1 {
                    return Err(Error::InvalidParam("extent must be >= 1".to_string()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// True when the output may still contain missing samples.
    pub fn may_leave_missing(&self) -> bool {
        matches!(
            self,
            FillStrategy::None | FillStrategy::SpaceFillNan { .. }
        )
    }
}

impl fmt::Display for FillStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FillStrategy::None => write!(f, "none"),
            FillStrategy::Fill0 => write!(f, "fill0"),
            FillStrategy::GlobalMean => write!(f, "global-mean"),
            FillStrategy::SliceMean => write!(f, "slice-mean"),
            FillStrategy::CubeMean { side } => write!(f, "cube-mean({side})"),
            FillStrategy::TimeKnn { k } => write!(f, "time-knn({k})"),
            FillStrategy::SpaceFill0 { k, extent } => write!(f, "space-fill-0({k},{extent})"),
            FillStrategy::SpaceFillNan { k, extent } => write!(f, "space-fill-nan({k},{extent})"),
            FillStrategy::SpaceFillTimeKnn { k } => write!(f, "space-fill-time-knn({k})"),
            FillStrategy::SpaceFillGlobal { k } => write!(f, "space-fill-global({k})"),
            FillStrategy::SpaceFillSlice { k } => write!(f, "space-fill-slice({k})"),
        }
    }
}

fn parse_args(s: &str, name: &str, want: usize) -> std::result::Result<Vec<usize>, String> {
    let inner = s
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix('('))
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("expected {name}(...)"))?;
    let args: std::result::Result<Vec<usize>, _> = inner
        .split(',')
        .map(|a| a.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect();
    let args = args?;
    if args.len() != want {
        return Err(format!("{name} takes {want} argument(s)"));
    }
    Ok(args)
}

impl FromStr for FillStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let st = match s {
            "none" => FillStrategy::None,
            "fill0" => FillStrategy::Fill0,
            "global-mean" => FillStrategy::GlobalMean,
            "slice-mean" => FillStrategy::SliceMean,
            _ if s.starts_with("cube-mean") => FillStrategy::CubeMean {
                side: parse_args(s, "cube-mean", 1)?[0],
            },
            _ if s.starts_with("time-knn") => FillStrategy::TimeKnn {
                k: parse_args(s, "time-knn", 1)?[0],
            },
            _ if s.starts_with("space-fill-0") => {
                let a = parse_args(s, "space-fill-0", 2)?;
                FillStrategy::SpaceFill0 { k: a[0], extent: a[1] }
            }
            _ if s.starts_with("space-fill-nan") => {
                let a = parse_args(s, "space-fill-nan", 2)?;
                FillStrategy::SpaceFillNan { k: a[0], extent: a[1] }
            }
            _ if s.starts_with("space-fill-time-knn") => FillStrategy::SpaceFillTimeKnn {
                k: parse_args(s, "space-fill-time-knn", 1)?[0],
            },
            _ if s.starts_with("space-fill-global") => FillStrategy::SpaceFillGlobal {
                k: parse_args(s, "space-fill-global", 1)?[0],
            },
            _ if s.starts_with("space-fill-slice") => FillStrategy::SpaceFillSlice {
                k: parse_args(s, "space-fill-slice", 1)?[0],
            },
            other => return Err(format!("unknown fill strategy {other:?}")),
        };
        st.validate().map_err(|e| e.to_string())?;
        Ok(st)
    }
}

impl Serialize for FillStrategy {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FillStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

struct StackStats {
    global_mean: f64,
    slice_means: Vec<f64>,
}

fn stack_stats(stack: &RasterStack) -> StackStats {
    let mut gsum = 0.0;
    let mut gcount = 0usize;
    let mut slice_means = Vec::with_capacity(stack.slices());
    for s in 0..stack.slices() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (&v, &m) in stack.slice_view(s).iter().zip(stack.mask_view(s).iter()) {
            if !m {
                sum += v as f64;
                count += 1;
            }
        }
        gsum += sum;
        gcount += count;
        slice_means.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    let global_mean = if gcount > 0 { gsum / gcount as f64 } else { 0.0 };
    // Empty slices fall back to the global mean.
    for m in slice_means.iter_mut() {
        if m.is_nan() {
            *m = global_mean;
        }
    }
    StackStats {
        global_mean,
        slice_means,
    }
}

/// Mean of the non-missing samples in the axis-aligned cube of side `side`
/// centered at `(s, r, c)`, truncated at the stack boundary.
fn cube_mean(stack: &RasterStack, s: usize, r: usize, c: usize, side: usize) -> Option<f64> {
    let half = (side / 2) as isize;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ds in -half..=half {
        let t = s as isize + ds;
        if t < 0 || t >= stack.slices() as isize {
            continue;
        }
        for dr in -half..=half {
            let rr = r as isize + dr;
            if rr < 0 || rr >= stack.height() as isize {
                continue;
            }
            for dc in -half..=half {
                let cc = c as isize + dc;
                if cc < 0 || cc >= stack.width() as isize {
                    continue;
                }
                let (t, rr, cc) = (t as usize, rr as usize, cc as usize);
                if !stack.is_missing(t, rr, cc) {
                    sum += stack.value(t, rr, cc) as f64;
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean of the `k` non-missing samples at the same pixel nearest in day
/// distance; ties broken toward the earlier slice.
fn time_knn(stack: &RasterStack, s: usize, r: usize, c: usize, k: usize) -> Option<f64> {
    let day = stack.days()[s];
    let mut cands: Vec<(i64, usize)> = (0..stack.slices())
        .filter(|&t| t != s && !stack.is_missing(t, r, c))
        .map(|t| ((stack.days()[t] - day).abs(), t))
        .collect();
    if cands.is_empty() {
        return None;
    }
    cands.sort_by_key(|&(d, t)| (d, t));
    let take = k.min(cands.len());
    let sum: f64 = cands[..take]
        .iter()
        .map(|&(_, t)| stack.value(t, r, c) as f64)
        .sum();
    Some(sum / take as f64)
}

/// Mean of the `k` nearest non-missing neighbors in the box extending
/// `extent` in space and 1 slice in time. Distance is squared Euclidean in
/// (slice, row, col) index space; ties broken in scan order.
fn space_knn(stack: &RasterStack, s: usize, r: usize, c: usize, k: usize, extent: usize) -> Option<f64> {
    let e = extent as isize;
    let mut cands: Vec<(usize, usize, usize, usize)> = Vec::new();
    for ds in -1i64..=1 {
        let t = s as i64 + ds;
        if t < 0 || t >= stack.slices() as i64 {
            continue;
        }
        for dr in -e..=e {
            let rr = r as isize + dr;
            if rr < 0 || rr >= stack.height() as isize {
                continue;
            }
            for dc in -e..=e {
                let cc = c as isize + dc;
                if cc < 0 || cc >= stack.width() as isize {
                    continue;
                }
                let (t, rr, cc) = (t as usize, rr as usize, cc as usize);
                if (t, rr, cc) == (s, r, c) || stack.is_missing(t, rr, cc) {
                    continue;
                }
                let d2 = (ds * ds) as usize + (dr * dr) as usize + (dc * dc) as usize;
                cands.push((d2, t, rr, cc));
            }
        }
    }
    if cands.is_empty() {
        return None;
    }
    cands.sort();
    let take = k.min(cands.len());
    let sum: f64 = cands[..take]
        .iter()
        .map(|&(_, t, rr, cc)| stack.value(t, rr, cc) as f64)
        .sum();
    Some(sum / take as f64)
}

/// Replaces missing training samples according to `strategy`.
///
/// For every strategy except `none` and `space-fill-nan` the output mask is
/// empty. Non-missing samples are always passed through unchanged.
pub fn fill_missing(
    stack: &RasterStack,
    strategy: FillStrategy,
    mode: Parallelism,
) -> Result<RasterStack> {
    strategy.validate()?;
    if strategy == FillStrategy::None || stack.missing_count() == 0 {
        return Ok(stack.clone());
    }

    let stats = stack_stats(stack);
    let (height, width) = (stack.height(), stack.width());

    let fill_one = |s: usize, r: usize, c: usize| -> Option<f64> {
        match strategy {
            FillStrategy::None => unreachable!(),
            FillStrategy::Fill0 => Some(0.0),
            FillStrategy::GlobalMean => Some(stats.global_mean),
            FillStrategy::SliceMean => Some(stats.slice_means[s]),
            FillStrategy::CubeMean { side } => Some(cube_mean(stack, s, r, c, side).unwrap_or(0.0)),
            FillStrategy::TimeKnn { k } => Some(time_knn(stack, s, r, c, k).unwrap_or(0.0)),
            FillStrategy::SpaceFill0 { k, extent } => {
                Some(space_knn(stack, s, r, c, k, extent).unwrap_or(0.0))
            }
            FillStrategy::SpaceFillNan { k, extent } => space_knn(stack, s, r, c, k, extent),
            FillStrategy::SpaceFillTimeKnn { k } => Some(
                space_knn(stack, s, r, c, k, 1)
                    .or_else(|| time_knn(stack, s, r, c, 5))
                    .unwrap_or(0.0),
            ),
            FillStrategy::SpaceFillGlobal { k } => {
                Some(space_knn(stack, s, r, c, k, 1).unwrap_or(stats.global_mean))
            }
            FillStrategy::SpaceFillSlice { k } => {
                Some(space_knn(stack, s, r, c, k, 1).unwrap_or(stats.slice_means[s]))
            }
        }
    };

    // Each slice is an independent work item; fills read original data only.
    let slices = par::map_indexed(mode, stack.slices(), |s| {
        let mut vals = Vec::with_capacity(height * width);
        let mut miss = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                if stack.is_missing(s, r, c) {
                    match fill_one(s, r, c) {
                        Some(v) => {
                            vals.push(v as f32);
                            miss.push(false);
                        }
                        None => {
                            vals.push(f32::NAN);
                            miss.push(true);
                        }
                    }
                } else {
                    vals.push(stack.value(s, r, c));
                    miss.push(false);
                }
            }
        }
        (vals, miss)
    });

    let mut values = Vec::with_capacity(stack.slices() * height * width);
    let mut missing = Vec::with_capacity(stack.slices() * height * width);
    for (v, m) in slices {
        values.extend(v);
        missing.extend(m);
    }
    RasterStack::new(
        stack.band(),
        stack.meta().clone(),
        stack.days().to_vec(),
        Array3::from_shape_vec((stack.slices(), height, width), values).unwrap(),
        Array3::from_shape_vec((stack.slices(), height, width), missing).unwrap(),
    )
}
