//! Per-pixel land-cover state tracking.
//!
//! Observations are binary symbols: an optical bit (anomaly magnitude above
//! threshold) and a radar bit (filtered backscatter below threshold, low
//! values indicating bare ground), either of which may be absent on a given
//! day. A 4-state hidden Markov model over
//! {forest+clear, forest+cloud, bare+clear, bare+cloud} is decoded with the
//! Viterbi algorithm in log space; a change is confirmed at the end of the
//! first run of at least FTC consecutive bare+clear states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Band, RasterStack, SceneMetadata};

pub const N_STATES: usize = 4;

/// Hidden land-cover states, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    ForestClear = 0,
    ForestCloud = 1,
    BareClear = 2,
    BareCloud = 3,
}

impl State {
    pub const ALL: [State; N_STATES] = [
        State::ForestClear,
        State::ForestCloud,
        State::BareClear,
        State::BareCloud,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> State {
        State::ALL[i]
    }

    /// 3-label rendering: the two cloud states collapse at report time.
    pub fn collapse(self) -> CollapsedLabel {
        match self {
            State::ForestClear => CollapsedLabel::Forest,
            State::ForestCloud | State::BareCloud => CollapsedLabel::CloudOrShadow,
            State::BareClear => CollapsedLabel::Deforestation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollapsedLabel {
    Forest,
    CloudOrShadow,
    Deforestation,
}

/// One observed bit: 0, 1, or not observed that day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitObs {
    Zero,
    One,
    Absent,
}

impl BitObs {
    fn code(self) -> usize {
        match self {
            BitObs::Zero => 0,
            BitObs::One => 1,
            BitObs::Absent => 2,
        }
    }
}

/// Joint optical/radar observation symbol; the alphabet has 9 values and
/// `(absent, absent)` is the legal "no observation" symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmissionSymbol {
    pub optical: BitObs,
    pub sar: BitObs,
}

impl EmissionSymbol {
    pub const ABSENT: EmissionSymbol = EmissionSymbol {
        optical: BitObs::Absent,
        sar: BitObs::Absent,
    };

    /// Index in the 9-symbol alphabet.
    pub fn index(self) -> usize {
        3 * self.optical.code() + self.sar.code()
    }
}

/// Decision thresholds mapping observations to bits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    /// Optical bit is 1 iff `|anomaly| > optical_anomaly`.
    pub optical_anomaly: f64,
    /// Radar bit is 1 iff the filtered value is `< sar`.
    pub sar: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            optical_anomaly: 1.2,
            sar: -5.5,
        }
    }
}

/// Thresholded emission. Comparisons are strict, so a value exactly at the
/// threshold yields bit 0; absent observations propagate.
pub fn emit(anomaly: Option<f64>, sar: Option<f64>, th: &Thresholds) -> EmissionSymbol {
    EmissionSymbol {
        optical: match anomaly {
            Some(a) => {
                if a.abs() > th.optical_anomaly {
                    BitObs::One
                } else {
                    BitObs::Zero
                }
            }
            None => BitObs::Absent,
        },
        sar: match sar {
            Some(s) => {
                if s < th.sar {
                    BitObs::One
                } else {
                    BitObs::Zero
                }
            }
            None => BitObs::Absent,
        },
    }
}

/// Raw-optical variant: low vegetation-index values indicate bare ground, so
/// the optical bit is 1 iff `value < optical threshold`.
pub fn emit_raw(evi: Option<f64>, sar: Option<f64>, th: &Thresholds) -> EmissionSymbol {
    EmissionSymbol {
        optical: match evi {
            Some(v) => {
                if v < th.optical_anomaly {
                    BitObs::One
                } else {
                    BitObs::Zero
                }
            }
            None => BitObs::Absent,
        },
        ..emit(None, sar, th)
    }
}

/// Per-state distribution over the joint (optical, sar) bit pair.
///
/// Bits are independent Bernoulli draws given the state, so absent bits
/// marginalize exactly (factor 1). Stored as the 2x2 joint table per state;
/// `prob` handles the 9-symbol alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionModel {
    /// `joint[state][2 * opt + sar]`, each row summing to 1.
    joint: [[f64; 4]; N_STATES],
}

impl EmissionModel {
    /// `(p_optical, p_sar)` per state: probability each bit is 1.
    pub fn from_bernoulli(params: [(f64, f64); N_STATES]) -> Result<EmissionModel> {
        for (po, ps) in params {
            if !(0.0..=1.0).contains(&po) || !(0.0..=1.0).contains(&ps) {
                return Err(Error::InvalidParam(format!(
                    "emission probabilities ({po}, {ps}) outside [0,1]"
                )));
            }
        }
        let mut joint = [[0.0; 4]; N_STATES];
        for (s, (po, ps)) in params.into_iter().enumerate() {
            for opt in 0..2 {
                for sar in 0..2 {
                    let p_opt = if opt == 1 { po } else { 1.0 - po };
                    let p_sar = if sar == 1 { ps } else { 1.0 - ps };
                    joint[s][2 * opt + sar] = p_opt * p_sar;
                }
            }
        }
        Ok(EmissionModel { joint })
    }

    /// Explicit joint tables, `table[state][2 * opt + sar]`.
    pub fn from_joint(table: [[f64; 4]; N_STATES]) -> Result<EmissionModel> {
        for row in &table {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidParam("negative emission probability".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "emission row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(EmissionModel { joint: table })
    }

    /// Hand-calibrated defaults.
    pub fn defaults() -> EmissionModel {
        EmissionModel::from_bernoulli([(0.05, 0.05), (0.6, 0.05), (0.9, 0.9), (0.6, 0.9)])
            .expect("defaults valid")
    }

    /// Symbol probability given the state; absent bits marginalize.
    pub fn prob(&self, state: usize, symbol: EmissionSymbol) -> f64 {
        let opts: &[usize] = match symbol.optical {
            BitObs::Zero => &[0],
            BitObs::One => &[1],
            BitObs::Absent => &[0, 1],
        };
        let sars: &[usize] = match symbol.sar {
            BitObs::Zero => &[0],
            BitObs::One => &[1],
            BitObs::Absent => &[0, 1],
        };
        let mut p = 0.0;
        for &o in opts {
            for &s in sars {
                p += self.joint[state][2 * o + s];
            }
        }
        p
    }
}

/// 4-state model specification.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSpec {
    transitions: [[f64; N_STATES]; N_STATES],
    emissions: EmissionModel,
    initial: [f64; N_STATES],
}

impl HmmSpec {
    pub fn new(
        transitions: [[f64; N_STATES]; N_STATES],
        emissions: EmissionModel,
        initial: [f64; N_STATES],
    ) -> Result<HmmSpec> {
        for (i, row) in transitions.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidParam(format!("negative entry in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParam(format!(
                    "transition row {i} sums to {sum}"
                )));
            }
        }
        if initial.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidParam("negative initial probability".into()));
        }
        let pi_sum: f64 = initial.iter().sum();
        if (pi_sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!(
                "initial distribution sums to {pi_sum}"
            )));
        }
        Ok(HmmSpec {
            transitions,
            emissions,
            initial,
        })
    }

    /// Builds a spec from the transition-derivation recipe plus an initial
    /// distribution concentrated on forest (clear vs cloudy split by the
    /// cloud fraction).
    pub fn derived(
        cloud_fraction: f64,
        forest_fraction: f64,
        p_change: f64,
        emissions: EmissionModel,
    ) -> Result<HmmSpec> {
        let transitions = derive_transitions(cloud_fraction, forest_fraction, p_change)?;
        let initial = [1.0 - cloud_fraction, cloud_fraction, 0.0, 0.0];
        HmmSpec::new(transitions, emissions, initial)
    }

    pub fn transitions(&self) -> &[[f64; N_STATES]; N_STATES] {
        &self.transitions
    }

    pub fn emissions(&self) -> &EmissionModel {
        &self.emissions
    }

    pub fn initial(&self) -> &[f64; N_STATES] {
        &self.initial
    }
}

/// Transition matrix from scene statistics: clouds are independent in time
/// (probability `cloud_fraction` of landing in a cloudy state from anywhere,
/// split between the two cloudy states by `forest_fraction`), land-cover
/// flips have probability `p_change` and are suppressed by clouds, cloudy
/// states otherwise behave like their clear counterpart. Rows are
/// renormalized to sum exactly 1.
pub fn derive_transitions(
    cloud_fraction: f64,
    forest_fraction: f64,
    p_change: f64,
) -> Result<[[f64; N_STATES]; N_STATES]> {
    if !(0.0..1.0).contains(&cloud_fraction)
        || !(0.0..=1.0).contains(&forest_fraction)
        || !(0.0..1.0).contains(&p_change)
    {
        return Err(Error::InfeasibleTransitions(format!(
            "cloud {cloud_fraction}, forest {forest_fraction}, change {p_change}"
        )));
    }
    if cloud_fraction + p_change >= 1.0 {
        return Err(Error::InfeasibleTransitions(format!(
            "cloud_fraction {cloud_fraction} + p_change {p_change} >= 1"
        )));
    }
    let c = cloud_fraction;
    let f = forest_fraction;
    let p = p_change;

    let stay = 1.0 - c - p;
    let flip = p * (1.0 - c);
    let to_forest_cloud = c * f;
    let to_bare_cloud = c * (1.0 - f);

    // Rows for forest-like states (underlying cover forest) and bare-like
    // states; cloudy states share their clear counterpart's row.
    let forest_row = [stay, to_forest_cloud, flip, to_bare_cloud];
    let bare_row = [flip, to_forest_cloud, stay, to_bare_cloud];

    let mut rows = [forest_row, forest_row, bare_row, bare_row];
    for row in rows.iter_mut() {
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(rows)
}

/// Log-space Viterbi over an arbitrary finite-state model.
///
/// `log_emit[t][s]` is the log emission score of state `s` at step `t`.
/// Ties break toward the lowest state index at every backtrack step and at
/// the terminal state, so the decoded path is reproducible.
pub fn viterbi_path(
    log_init: &[f64],
    log_trans: &[Vec<f64>],
    log_emit: &[Vec<f64>],
) -> (Vec<usize>, f64) {
    let n = log_init.len();
    let steps = log_emit.len();
    assert!(steps >= 1, "observation sequence must be non-empty");

    let mut delta: Vec<f64> = (0..n).map(|s| log_init[s] + log_emit[0][s]).collect();
    let mut backp: Vec<Vec<usize>> = Vec::with_capacity(steps);

    for obs in log_emit.iter().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut back = vec![0usize; n];
        for (j, nj) in next.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for (i, &di) in delta.iter().enumerate() {
                let cand = di + log_trans[i][j];
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            *nj = best + obs[j];
            back[j] = best_i;
        }
        backp.push(back);
        delta = next;
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0usize;
    for (s, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            last = s;
        }
    }
    let mut path = vec![last; steps];
    for t in (1..steps).rev() {
        path[t - 1] = backp[t - 1][path[t]];
    }
    (path, best)
}

/// Decodes a symbol sequence under a 4-state spec. Returns the state path
/// and its log probability.
pub fn viterbi(symbols: &[EmissionSymbol], spec: &HmmSpec) -> Result<(Vec<State>, f64)> {
    if symbols.is_empty() {
        return Err(Error::EmptyInput("empty observation sequence".into()));
    }
    let log_init: Vec<f64> = spec.initial.iter().map(|&p| p.ln()).collect();
    let log_trans: Vec<Vec<f64>> = spec
        .transitions
        .iter()
        .map(|row| row.iter().map(|&p| p.ln()).collect())
        .collect();
    let log_emit: Vec<Vec<f64>> = symbols
        .iter()
        .map(|&sym| {
            (0..N_STATES)
                .map(|s| spec.emissions.prob(s, sym).ln())
                .collect()
        })
        .collect();
    let (path, logp) = viterbi_path(&log_init, &log_trans, &log_emit);
    Ok((path.into_iter().map(State::from_index).collect(), logp))
}

/// Per-pixel tracking outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelStatus {
    Stable,
    Deforested { onset_day: i64, confirm_day: i64 },
}

impl PixelStatus {
    pub fn is_deforested(&self) -> bool {
        matches!(self, PixelStatus::Deforested { .. })
    }
}

/// Confirms the first run of at least `ftc` consecutive bare+clear states:
/// the change is dated at the run start (onset) and confirmed at the
/// `ftc`-th state of that run.
pub fn detect_persistence(path: &[State], days: &[i64], ftc: usize) -> Result<PixelStatus> {
    if ftc < 1 {
        return Err(Error::InvalidParam("ftc must be >= 1".into()));
    }
    if path.len() != days.len() {
        return Err(Error::DimensionMismatch(format!(
            "path length {} vs {} days",
            path.len(),
            days.len()
        )));
    }
    let mut run_start = None;
    let mut run_len = 0usize;
    for (t, &s) in path.iter().enumerate() {
        if s == State::BareClear {
            if run_start.is_none() {
                run_start = Some(t);
            }
            run_len += 1;
            if run_len == ftc {
                let start = run_start.unwrap();
                return Ok(PixelStatus::Deforested {
                    onset_day: days[start],
                    confirm_day: days[start + ftc - 1],
                });
            }
        } else {
            run_start = None;
            run_len = 0;
        }
    }
    Ok(PixelStatus::Stable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FtcMode {
    Hybrid,
    OpticalOnly,
    SarOnly,
}

/// FTC scaled to the number of available optical days, interpolating between
/// the radar-only and full-data values (exact integer ceiling arithmetic).
pub fn variable_ftc(n_optical: usize, mode: FtcMode, total_optical_days: usize) -> usize {
    let d = total_optical_days.max(1);
    let n = n_optical;
    match mode {
        // ceil(10 n/d + 4 (1 - n/d)) = ceil((4 d + 6 n) / d)
        FtcMode::Hybrid => (4 * d + 6 * n).div_ceil(d),
        // ceil(9 n / d), floored at 1
        FtcMode::OpticalOnly => (9 * n).div_ceil(d).max(1),
        FtcMode::SarOnly => 5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaySource {
    Optical,
    Sar,
    Both,
}

/// Merged observation timeline over one or both sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    days: Vec<i64>,
    optical_slice: Vec<Option<usize>>,
    sar_slice: Vec<Option<usize>>,
}

impl Timeline {
    pub fn days(&self) -> &[i64] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn source(&self, i: usize) -> DaySource {
        match (self.optical_slice[i], self.sar_slice[i]) {
            (Some(_), Some(_)) => DaySource::Both,
            (Some(_), None) => DaySource::Optical,
            (None, Some(_)) => DaySource::Sar,
            (None, None) => unreachable!("every day has at least one source"),
        }
    }

    pub fn optical_slice(&self, i: usize) -> Option<usize> {
        self.optical_slice[i]
    }

    pub fn sar_slice(&self, i: usize) -> Option<usize> {
        self.sar_slice[i]
    }

    pub fn n_optical_days(&self) -> usize {
        self.optical_slice.iter().filter(|s| s.is_some()).count()
    }
}

/// Merges optical and radar day lists; same-day observations share one
/// timeline entry flagged as both.
pub fn build_timeline(optical_days: Option<&[i64]>, sar_days: Option<&[i64]>) -> Result<Timeline> {
    if optical_days.is_none() && sar_days.is_none() {
        return Err(Error::EmptyInput("timeline needs at least one source".into()));
    }
    let mut days: Vec<i64> = Vec::new();
    if let Some(o) = optical_days {
        days.extend_from_slice(o);
    }
    if let Some(s) = sar_days {
        days.extend_from_slice(s);
    }
    days.sort_unstable();
    days.dedup();
    if days.is_empty() {
        return Err(Error::EmptyInput("timeline has no observation days".into()));
    }
    let index_of = |list: Option<&[i64]>, day: i64| -> Option<usize> {
        list.and_then(|l| l.binary_search(&day).ok())
    };
    let optical_slice: Vec<Option<usize>> =
        days.iter().map(|&d| index_of(optical_days, d)).collect();
    let sar_slice: Vec<Option<usize>> = days.iter().map(|&d| index_of(sar_days, d)).collect();
    Ok(Timeline {
        days,
        optical_slice,
        sar_slice,
    })
}

/// Observation sources for tracking. `optical` is normally the anomaly
/// stack; with `optical_raw` set it is a raw vegetation-index stack and the
/// bit logic flips to below-threshold. `optical_thresholds` optionally
/// supplies per-pixel per-slice thresholds in place of the scalar.
#[derive(Clone, Copy)]
pub struct ObsSources<'a> {
    pub optical: Option<&'a RasterStack>,
    pub sar: Option<&'a RasterStack>,
    pub optical_raw: bool,
    pub optical_thresholds: Option<&'a RasterStack>,
}

impl<'a> ObsSources<'a> {
    pub fn timeline(&self) -> Result<Timeline> {
        build_timeline(
            self.optical.map(|s| s.days()),
            self.sar.map(|s| s.days()),
        )
    }

    fn symbol(&self, timeline: &Timeline, t: usize, row: usize, col: usize, th: &Thresholds) -> EmissionSymbol {
        let opt_val = timeline.optical_slice(t).and_then(|s| {
            let stack = self.optical.expect("optical slice implies optical stack");
            (!stack.is_missing(s, row, col)).then(|| stack.value(s, row, col) as f64)
        });
        let sar_val = timeline.sar_slice(t).and_then(|s| {
            let stack = self.sar.expect("sar slice implies sar stack");
            (!stack.is_missing(s, row, col)).then(|| stack.value(s, row, col) as f64)
        });
        let th_here = match (self.optical_thresholds, timeline.optical_slice(t)) {
            (Some(ths), Some(s)) if !ths.is_missing(s, row, col) => Thresholds {
                optical_anomaly: ths.value(s, row, col) as f64,
                sar: th.sar,
            },
            _ => *th,
        };
        if self.optical_raw {
            emit_raw(opt_val, sar_val, &th_here)
        } else {
            emit(opt_val, sar_val, &th_here)
        }
    }
}

/// Tracks one pixel: emissions along the timeline, Viterbi decode,
/// persistence confirmation. Pure and deterministic given its inputs.
pub fn track_pixel(
    timeline: &Timeline,
    sources: &ObsSources<'_>,
    row: usize,
    col: usize,
    spec: &HmmSpec,
    th: &Thresholds,
    ftc: usize,
) -> Result<(PixelStatus, Vec<State>)> {
    let symbols: Vec<EmissionSymbol> = (0..timeline.len())
        .map(|t| sources.symbol(timeline, t, row, col, th))
        .collect();
    let (path, _) = viterbi(&symbols, spec)?;
    let status = detect_persistence(&path, timeline.days(), ftc)?;
    Ok((status, path))
}

/// Per-pixel detection results for a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DateMap {
    height: usize,
    width: usize,
    status: Vec<PixelStatus>,
    /// Decoded paths, kept only on request.
    paths: Option<Vec<Vec<State>>>,
}

impl DateMap {
    pub fn new(height: usize, width: usize, status: Vec<PixelStatus>) -> Result<DateMap> {
        if status.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} statuses for {}x{}",
                status.len(),
                height,
                width
            )));
        }
        Ok(DateMap {
            height,
            width,
            status,
            paths: None,
        })
    }

    pub fn with_paths(mut self, paths: Vec<Vec<State>>) -> Self {
        self.paths = Some(paths);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn status(&self, row: usize, col: usize) -> PixelStatus {
        self.status[row * self.width + col]
    }

    pub fn statuses(&self) -> &[PixelStatus] {
        &self.status
    }

    pub fn paths(&self) -> Option<&[Vec<State>]> {
        self.paths.as_deref()
    }

    /// Per-pixel change labels, row-major.
    pub fn labels(&self) -> Vec<bool> {
        self.status.iter().map(|s| s.is_deforested()).collect()
    }

    pub fn deforested_count(&self) -> usize {
        self.status.iter().filter(|s| s.is_deforested()).count()
    }

    /// Single-slice raster of confirm days; 0 means stable.
    pub fn to_confirm_raster(&self, meta: SceneMetadata) -> RasterStack {
        let vals: Vec<f32> = self
            .status
            .iter()
            .map(|s| match s {
                PixelStatus::Stable => 0.0,
                PixelStatus::Deforested { confirm_day, .. } => *confirm_day as f32,
            })
            .collect();
        RasterStack::from_values(
            Band::DateMap,
            meta,
            vec![0],
            ndarray::Array3::from_shape_vec((1, self.height, self.width), vals).unwrap(),
        )
        .expect("valid by construction")
    }

    /// CSV rows `(row, col, onset_day, confirm_day)` for deforested pixels.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "onset_day", "confirm_day"])?;
        for r in 0..self.height {
            for c in 0..self.width {
                if let PixelStatus::Deforested {
                    onset_day,
                    confirm_day,
                } = self.status(r, c)
                {
                    w.write_record(&[
                        r.to_string(),
                        c.to_string(),
                        onset_day.to_string(),
                        confirm_day.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
