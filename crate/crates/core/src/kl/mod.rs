//! Residual-subspace anomaly detection.
//!
//! The nominal state of a scene is modeled by the eigenstructure of the
//! per-pixel covariance of a training stack. A novel observation `u` is
//! centered and projected onto the top-`m` eigenvectors; what remains,
//! `eta = w - P_m w` with `w = u - mean`, lives in the residual eigenspace.
//! Under the null hypothesis (no change) the residual component at pixel `i`
//! satisfies the distribution-free tail bound
//!
//! ```text
//! P(|eta[i]| >= sqrt(sum_{k>m} lambda_k phi_k[i]^2 / alpha)) <= alpha
//! ```
//!
//! so exceedances of that threshold flag anomalies without any assumption on
//! the data distribution beyond second moments.
//!
//! Missing data: covariance is estimated per test-slice availability mask,
//! restricted to the pixels observed in that slice. Gaps in the training
//! stack are either filled first ([`fill::FillStrategy`]) or handled by
//! pairwise-complete normalization (every covariance entry averages only the
//! slices where both pixels have data).

pub mod fill;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::raster::{Band, RasterStack, Tile};
pub use fill::{fill_missing, FillStrategy};

/// Largest pixel count accepted by the dense pairwise-complete path.
/// Above this, eigendecomposition cost is prohibitive; use a fill strategy
/// (rank-limited snapshot path) or tiling instead.
pub const PAIRWISE_PIXEL_LIMIT: usize = 2048;

/// Estimation diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CovDiagnostics {
    /// Total negative eigenvalue mass clamped to zero.
    pub clamped_mass: f64,
    /// Covariance entries zeroed because fewer than two slices overlapped.
    pub zeroed_pairs: usize,
}

/// Covariance eigenstructure of the nominal state over a pixel subset.
///
/// Eigenvalues are sorted non-increasing and non-negative. Only the leading
/// `rank()` eigenpairs are stored; all later eigenvalues are exactly zero
/// (rank-limited estimation) and are treated as such by every accessor.
#[derive(Debug, Clone)]
pub struct KlModel {
    mean: Vec<f64>,
    diag: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Column-major `n x rank` orthonormal eigenvector block.
    eigenvectors: Vec<f64>,
    n: usize,
    m: usize,
    pixel_index_map: Vec<usize>,
    scene_pixels: usize,
    fill: FillStrategy,
    diagnostics: CovDiagnostics,
}

impl KlModel {
    /// Builds a model from explicit components. Eigenvalues must be sorted
    /// non-increasing and non-negative; eigenvector columns must be
    /// orthonormal (checked to 1e-8 max-norm).
    pub fn from_parts(
        mean: Vec<f64>,
        diag: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenvectors: Vec<f64>,
        m: usize,
        pixel_index_map: Vec<usize>,
        fill: FillStrategy,
    ) -> Result<KlModel> {
        let n = mean.len();
        let rank = eigenvalues.len();
        if diag.len() != n || pixel_index_map.len() != n || eigenvectors.len() != n * rank {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent model parts: n={n}, rank={rank}, vectors={}",
                eigenvectors.len()
            )));
        }
        for k in 0..rank {
            if eigenvalues[k] < 0.0 || (k > 0 && eigenvalues[k] > eigenvalues[k - 1]) {
                return Err(Error::InvalidParam(
                    "eigenvalues must be sorted non-increasing and >= 0".into(),
                ));
            }
        }
        let scene_pixels = pixel_index_map.iter().max().map_or(0, |&p| p + 1);
        let model = KlModel {
            mean,
            diag,
            eigenvalues,
            eigenvectors,
            n,
            m: m.min(n),
            pixel_index_map,
            scene_pixels,
            fill,
            diagnostics: CovDiagnostics::default(),
        };
        if model.orthonormality_defect() > 1e-8 {
            return Err(Error::InvalidParam(
                "eigenvector columns are not orthonormal".into(),
            ));
        }
        Ok(model)
    }

    /// Pixels covered by this model.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored (nonzero) eigenpair count.
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Truncation order.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn set_m(&mut self, m: usize) {
        self.m = m.min(self.n);
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Covariance diagonal (per-pixel variance under the estimator).
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// `lambda_k`, zero beyond the stored rank. `k` is zero-based.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues.get(k).copied().unwrap_or(0.0)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `phi_k` as a dense column. Panics if `k >= rank()`.
    pub fn eigenvector(&self, k: usize) -> &[f64] {
        &self.eigenvectors[k * self.n..(k + 1) * self.n]
    }

    /// Model row -> scene pixel index.
    pub fn pixel_index_map(&self) -> &[usize] {
        &self.pixel_index_map
    }

    pub fn scene_pixels(&self) -> usize {
        self.scene_pixels
    }

    pub fn fill_strategy(&self) -> FillStrategy {
        self.fill
    }

    pub fn diagnostics(&self) -> CovDiagnostics {
        self.diagnostics
    }

    /// Total variance `sum_k lambda_k`.
    pub fn total_energy(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Energy fraction captured by the current truncation.
    pub fn captured_energy(&self) -> f64 {
        let total = self.total_energy();
        if total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.m.min(self.rank())].iter().sum::<f64>() / total
    }

    /// Max-norm deviation of `Phi^T Phi` from identity over stored columns.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.rank();
        let mut worst: f64 = 0.0;
        for a in 0..r {
            let va = self.eigenvector(a);
            for b in a..r {
                let vb = self.eigenvector(b);
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

fn sorted_clamped_eigen(mat: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, f64) {
    let n = mat.nrows();
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    let mut clamped = 0.0;
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvalues[src];
        if v < 0.0 {
            clamped += -v;
            v = 0.0;
        }
        values.push(v);
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors, clamped)
}

/// Estimates the nominal covariance eigenstructure from a training stack,
/// restricted to the pixels selected by `available` (the availability
/// pattern of the test slice the model will serve).
///
/// The fill strategy is applied to the training stack first. If the
/// restricted data is complete afterwards, a rank-limited snapshot
/// decomposition is used; otherwise the dense pairwise-complete estimator.
/// Both use the population convention: sums divide by the number of
/// contributing slices, not count minus one.
pub fn estimate_covariance(
    training: &RasterStack,
    available: &[bool],
    strategy: FillStrategy,
    mode: Parallelism,
) -> Result<KlModel> {
    let filled = fill_missing(training, strategy, mode)?;
    model_from_filled(&filled, available, strategy, mode)
}

/// As [`estimate_covariance`], for a stack whose fill has already been
/// applied (`provenance` records it).
pub fn model_from_filled(
    filled: &RasterStack,
    available: &[bool],
    provenance: FillStrategy,
    mode: Parallelism,
) -> Result<KlModel> {
    let pixels = filled.pixels();
    if available.len() != pixels {
        return Err(Error::DimensionMismatch(format!(
            "availability mask length {} vs {} pixels",
            available.len(),
            pixels
        )));
    }
    let slices = filled.slices();
    if slices < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 training slices, got {slices}"
        )));
    }

    let gathered = gather(filled, available)?;
    if gathered.map.is_empty() {
        return Ok(KlModel {
            mean: Vec::new(),
            diag: Vec::new(),
            eigenvalues: Vec::new(),
            eigenvectors: Vec::new(),
            n: 0,
            m: 0,
            pixel_index_map: gathered.map,
            scene_pixels: pixels,
            fill: provenance,
            diagnostics: CovDiagnostics::default(),
        });
    }
    if !gathered.any_missing {
        snapshot_model(gathered, pixels, provenance, mode)
    } else {
        pairwise_model(gathered, pixels, provenance, mode)
    }
}

struct Gathered {
    /// Restricted data, slice-major: `data[t * n + i]`.
    data: Vec<f64>,
    present: Vec<bool>,
    mean: Vec<f64>,
    map: Vec<usize>,
    slices: usize,
    any_missing: bool,
}

fn gather(filled: &RasterStack, available: &[bool]) -> Result<Gathered> {
    let slices = filled.slices();
    let map: Vec<usize> = (0..filled.pixels()).filter(|&i| available[i]).collect();
    let n = map.len();
    let mut data = vec![0.0f64; slices * n];
    let mut present = vec![true; slices * n];
    let mut any_missing = false;
    for t in 0..slices {
        let (flat, miss) = filled.flatten_slice(t)?;
        for (i, &p) in map.iter().enumerate() {
            if miss[p] {
                present[t * n + i] = false;
                any_missing = true;
            } else {
                data[t * n + i] = flat[p];
            }
        }
    }
    // Per-pixel mean over the pixel's own non-missing slices.
    let mut mean = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..slices {
            if present[t * n + i] {
                sum += data[t * n + i];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyTrainingPixel { index: map[i] });
        }
        mean[i] = sum / count as f64;
    }
    Ok(Gathered {
        data,
        present,
        mean,
        map,
        slices,
        any_missing,
    })
}

/// Pairwise-complete covariance of a (possibly gap-ridden) stack restricted
/// to `available` pixels, exposed for direct inspection: entry `(i, j)`
/// averages centered products over the slices where both pixels have data,
/// divided by that count; entries with fewer than two overlapping slices are
/// zeroed and counted.
pub struct PairwiseCovariance {
    pub matrix: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub pixel_index_map: Vec<usize>,
    pub zeroed_pairs: usize,
}

pub fn pairwise_covariance(
    stack: &RasterStack,
    available: &[bool],
    mode: Parallelism,
) -> Result<PairwiseCovariance> {
    if available.len() != stack.pixels() {
        return Err(Error::DimensionMismatch(format!(
            "availability mask length {} vs {} pixels",
            available.len(),
            stack.pixels()
        )));
    }
    if stack.slices() < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 training slices, got {}",
            stack.slices()
        )));
    }
    let g = gather(stack, available)?;
    pairwise_matrix(&g, mode)
}

fn pairwise_matrix(g: &Gathered, mode: Parallelism) -> Result<PairwiseCovariance> {
    let n = g.mean.len();
    if n > PAIRWISE_PIXEL_LIMIT {
        return Err(Error::InvalidParam(format!(
            "pairwise-complete estimation over {n} pixels exceeds the dense \
             limit {PAIRWISE_PIXEL_LIMIT}; use a fill strategy or tiling"
        )));
    }
    let slices = g.slices;
    let rows = par::map_indexed(mode, n, |i| {
        let mut row = vec![0.0f64; n - i];
        let mut zeroed = 0usize;
        for j in i..n {
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in 0..slices {
                if g.present[t * n + i] && g.present[t * n + j] {
                    sum += (g.data[t * n + i] - g.mean[i]) * (g.data[t * n + j] - g.mean[j]);
                    count += 1;
                }
            }
            if count >= 2 {
                row[j - i] = sum / count as f64;
            } else {
                zeroed += 1;
            }
        }
        (row, zeroed)
    });
    let mut cov = DMatrix::zeros(n, n);
    let mut zeroed_pairs = 0usize;
    for (i, (row, z)) in rows.iter().enumerate() {
        zeroed_pairs += z;
        for (off, &v) in row.iter().enumerate() {
            cov[(i, i + off)] = v;
            cov[(i + off, i)] = v;
        }
    }
    Ok(PairwiseCovariance {
        matrix: cov,
        mean: g.mean.clone(),
        pixel_index_map: g.map.clone(),
        zeroed_pairs,
    })
}

/// Complete-data path: eigenpairs of `C = (1/M) W W^T` through the `M x M`
/// Gram matrix, so cost scales with the slice count, not the pixel count.
fn snapshot_model(
    g: Gathered,
    scene_pixels: usize,
    provenance: FillStrategy,
    mode: Parallelism,
) -> Result<KlModel> {
    let Gathered {
        mut data,
        mean,
        map,
        slices,
        ..
    } = g;
    let n = mean.len();
    for t in 0..slices {
        for i in 0..n {
            data[t * n + i] -= mean[i];
        }
    }

    let mut diag = vec![0.0f64; n];
    for t in 0..slices {
        for i in 0..n {
            let w = data[t * n + i];
            diag[i] += w * w;
        }
    }
    for d in diag.iter_mut() {
        *d /= slices as f64;
    }

    let gram_rows = par::map_indexed(mode, slices, |s| {
        let row_s = &data[s * n..(s + 1) * n];
        (s..slices)
            .map(|t| {
                let row_t = &data[t * n..(t + 1) * n];
                row_s.iter().zip(row_t).map(|(a, b)| a * b).sum::<f64>() / slices as f64
            })
            .collect::<Vec<f64>>()
    });
    let mut gram = DMatrix::zeros(slices, slices);
    for (s, row) in gram_rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            gram[(s, s + off)] = v;
            gram[(s + off, s)] = v;
        }
    }

    let (mu, q, clamped) = sorted_clamped_eigen(gram);
    let cutoff = mu.first().copied().unwrap_or(0.0) * 1e-12;
    let rank = mu.iter().take_while(|&&v| v > cutoff).count();

    let cols = par::map_indexed(mode, rank, |k| {
        let qk = q.column(k);
        let mut col = vec![0.0f64; n];
        for t in 0..slices {
            let w = qk[t];
            if w != 0.0 {
                let row = &data[t * n..(t + 1) * n];
                for (c, &x) in col.iter_mut().zip(row) {
                    *c += w * x;
                }
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in col.iter_mut() {
                *c /= norm;
            }
        }
        col
    });

    let mut eigenvectors = Vec::with_capacity(rank * n);
    for col in cols {
        eigenvectors.extend(col);
    }

    Ok(KlModel {
        mean,
        diag,
        eigenvalues: mu[..rank].to_vec(),
        eigenvectors,
        n,
        m: 0,
        pixel_index_map: map,
        scene_pixels,
        fill: provenance,
        diagnostics: CovDiagnostics {
            clamped_mass: clamped,
            zeroed_pairs: 0,
        },
    })
}

/// Missing-data path: dense eigendecomposition of the pairwise-complete
/// covariance.
fn pairwise_model(
    g: Gathered,
    scene_pixels: usize,
    provenance: FillStrategy,
    mode: Parallelism,
) -> Result<KlModel> {
    let pc = pairwise_matrix(&g, mode)?;
    let n = pc.mean.len();
    let diag: Vec<f64> = (0..n).map(|i| pc.matrix[(i, i)]).collect();

    let (values, vectors, clamped) = sorted_clamped_eigen(pc.matrix);
    let mut eigenvectors = Vec::with_capacity(n * n);
    for k in 0..n {
        eigenvectors.extend(vectors.column(k).iter());
    }

    Ok(KlModel {
        mean: pc.mean,
        diag,
        eigenvalues: values,
        eigenvectors,
        n,
        m: 0,
        pixel_index_map: pc.pixel_index_map,
        scene_pixels,
        fill: provenance,
        diagnostics: CovDiagnostics {
            clamped_mass: clamped,
            zeroed_pairs: pc.zeroed_pairs,
        },
    })
}

/// Smallest `m` whose leading eigenvalues capture at least `fraction` of the
/// total variance. Zero spectrum gives `m = 0`.
pub fn select_truncation(model: &KlModel, fraction: f64) -> usize {
    let total = model.total_energy();
    if total <= 0.0 {
        return 0;
    }
    let target = fraction * total;
    if target <= 0.0 {
        return 0;
    }
    let mut cum = 0.0;
    for (k, &v) in model.eigenvalues.iter().enumerate() {
        cum += v;
        if cum >= target {
            return k + 1;
        }
    }
    model.rank()
}

/// Residual feature `eta = w - Phi_m Phi_m^T w`, `w = u - mean`, over the
/// model's pixel subset. `missing` must be all-false on that subset: the
/// model is rebuilt per availability pattern, so gaps never reach here.
pub fn project_residual(u: &[f64], missing: &[bool], model: &KlModel) -> Result<Vec<f64>> {
    let n = model.n();
    if u.len() != n || missing.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "observation length {} vs model pixels {}",
            u.len(),
            n
        )));
    }
    if missing.iter().any(|&m| m) {
        return Err(Error::DimensionMismatch(
            "observation has missing samples inside the model's pixel set; \
             rebuild the model for this availability pattern"
                .to_string(),
        ));
    }
    let mut eta: Vec<f64> = u.iter().zip(model.mean()).map(|(x, mu)| x - mu).collect();
    let m_eff = model.m().min(model.rank());
    for k in 0..m_eff {
        let phi = model.eigenvector(k);
        let coef: f64 = eta.iter().zip(phi).map(|(w, p)| w * p).sum();
        for (e, p) in eta.iter_mut().zip(phi) {
            *e -= coef * p;
        }
    }
    Ok(eta)
}

/// Distribution-free anomaly threshold for one pixel:
/// `sqrt(sum_{k>m} lambda_k phi_k[i]^2 / alpha)`.
pub fn concentration_threshold(model: &KlModel, pixel: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!("alpha {alpha} not in (0,1)")));
    }
    if pixel >= model.n() {
        return Err(Error::IndexOutOfRange(format!(
            "pixel {pixel} of {}",
            model.n()
        )));
    }
    let mut sum = 0.0;
    for k in model.m()..model.rank() {
        let p = model.eigenvector(k)[pixel];
        sum += model.eigenvalue(k) * p * p;
    }
    Ok((sum / alpha).sqrt())
}

/// Per-pixel thresholds for the whole model in one pass.
pub fn residual_thresholds(model: &KlModel, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!("alpha {alpha} not in (0,1)")));
    }
    let mut sums = vec![0.0f64; model.n()];
    for k in model.m()..model.rank() {
        let lam = model.eigenvalue(k);
        for (s, &p) in sums.iter_mut().zip(model.eigenvector(k)) {
            *s += lam * p * p;
        }
    }
    Ok(sums.into_iter().map(|s| (s / alpha).sqrt()).collect())
}

/// Anomaly-map settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlConfig {
    pub fill: FillStrategy,
    /// Energy fraction for truncation selection; ignored when `explicit_m`
    /// is set.
    pub energy_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_m: Option<usize>,
    /// Store signed residuals instead of magnitudes.
    #[serde(default)]
    pub signed: bool,
    /// Optional tile dimensions (rows, cols); models are built per tile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<(usize, usize)>,
    /// When set, also produce a per-pixel threshold stack at this
    /// significance level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_alpha: Option<f64>,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            fill: FillStrategy::default(),
            energy_fraction: 0.95,
            explicit_m: None,
            signed: false,
            tile: None,
            threshold_alpha: None,
        }
    }
}

/// Anomaly maps: a stack of per-pixel residual values, band
/// `optical-anomaly`, shaped and masked like the source optical stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySeries(RasterStack);

impl AnomalySeries {
    pub fn from_stack(stack: RasterStack) -> Result<Self> {
        if stack.band() != Band::OpticalAnomaly {
            return Err(Error::InvalidParam(format!(
                "anomaly series requires band optical-anomaly, got {}",
                stack.band()
            )));
        }
        Ok(AnomalySeries(stack))
    }

    pub fn stack(&self) -> &RasterStack {
        &self.0
    }

    pub fn into_stack(self) -> RasterStack {
        self.0
    }
}

type MaskKey = (usize, Box<[u64]>);

/// Shared cache of per-availability models, keyed by tile and packed mask
/// bits. Safe for concurrent insert/lookup.
#[derive(Default)]
pub struct ModelCache {
    inner: Mutex<HashMap<MaskKey, Arc<KlModel>>>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &MaskKey) -> Option<Arc<KlModel>> {
        self.inner.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: MaskKey, model: Arc<KlModel>) {
        self.inner.lock().unwrap().insert(key, model);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pack_mask(bits: impl Iterator<Item = bool>) -> Box<[u64]> {
    let mut words: Vec<u64> = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 64 == 0 {
            words.push(0);
        }
        if b {
            *words.last_mut().unwrap() |= 1 << (i % 64);
        }
    }
    words.into_boxed_slice()
}

/// Output of [`anomaly_stack`]: the anomaly series plus an optional
/// co-shaped threshold stack.
pub struct AnomalyOutput {
    pub anomalies: AnomalySeries,
    pub thresholds: Option<RasterStack>,
    /// Distinct availability models built (cache misses).
    pub models_built: usize,
}

/// Builds per-slice anomaly maps for a test stack against a training stack.
///
/// For each test slice the availability pattern (non-missing pixels) selects
/// the model; identical patterns share one eigendecomposition through
/// `cache`. Output values are `|eta|` (or signed `eta`), missing exactly
/// where the test stack is missing.
pub fn anomaly_stack(
    test: &RasterStack,
    training: &RasterStack,
    config: &KlConfig,
    mode: Parallelism,
    cache: &ModelCache,
) -> Result<AnomalyOutput> {
    if test.height() != training.height() || test.width() != training.width() {
        return Err(Error::ShapeMismatch(format!(
            "test {}x{} vs training {}x{}",
            test.height(),
            test.width(),
            training.height(),
            training.width()
        )));
    }
    config.fill.validate()?;
    let filled = fill_missing(training, config.fill, mode)?;

    let tiles: Vec<Tile> = match config.tile {
        Some((tr, tc)) => test.tile_iter(tr, tc).collect(),
        None => vec![Tile::full(test.height(), test.width())],
    };
    let pixels = test.pixels();

    // Distinct (tile, mask) units, in deterministic first-seen order.
    let mut units: Vec<(usize, MaskKey, Vec<bool>)> = Vec::new();
    let mut seen: HashMap<MaskKey, usize> = HashMap::new();
    for s in 0..test.slices() {
        let (_, miss) = test.flatten_slice(s)?;
        for (tid, tile) in tiles.iter().enumerate() {
            let avail: Vec<bool> = {
                let mut v = vec![false; pixels];
                for p in tile.pixel_indices() {
                    v[p] = !miss[p];
                }
                v
            };
            if avail.iter().all(|&a| !a) {
                continue;
            }
            let key: MaskKey = (tid, pack_mask(tile.pixel_indices().map(|p| avail[p])));
            if !seen.contains_key(&key) {
                seen.insert(key.clone(), units.len());
                units.push((tid, key, avail));
            }
        }
    }

    // Build every distinct model, in parallel, then publish to the cache.
    let models_built = {
        let missing_keys: Vec<usize> = (0..units.len())
            .filter(|&i| cache.get(&units[i].1).is_none())
            .collect();
        let built = par::map_slice(mode, &missing_keys, |&i| {
            let (_, _, avail) = &units[i];
            model_from_filled(&filled, avail, config.fill, Parallelism::Sequential).map(
                |mut model| {
                    let m = match config.explicit_m {
                        Some(m) => m.min(model.n()),
                        None => select_truncation(&model, config.energy_fraction),
                    };
                    model.set_m(m);
                    Arc::new(model)
                },
            )
        });
        let count = built.len();
        for (idx, res) in missing_keys.iter().zip(built) {
            cache.insert(units[*idx].1.clone(), res?);
        }
        count
    };

    let want_thresholds = config.threshold_alpha.is_some();

    // Project each slice; slices are independent work items.
    let per_slice = par::map_indexed(mode, test.slices(), |s| -> Result<_> {
        let (flat, miss) = test.flatten_slice(s)?;
        let mut out = vec![f32::NAN; pixels];
        let mut thr = if want_thresholds {
            Some(vec![f32::NAN; pixels])
        } else {
            None
        };
        for (tid, tile) in tiles.iter().enumerate() {
            let avail: Vec<bool> = {
                let mut v = vec![false; pixels];
                for p in tile.pixel_indices() {
                    v[p] = !miss[p];
                }
                v
            };
            if avail.iter().all(|&a| !a) {
                continue;
            }
            let key: MaskKey = (tid, pack_mask(tile.pixel_indices().map(|p| avail[p])));
            let model = cache.get(&key).expect("model prebuilt for every mask");
            let u: Vec<f64> = model.pixel_index_map().iter().map(|&p| flat[p]).collect();
            let no_miss = vec![false; model.n()];
            let eta = project_residual(&u, &no_miss, &model)?;
            for (row, &p) in model.pixel_index_map().iter().enumerate() {
                out[p] = if config.signed {
                    eta[row] as f32
                } else {
                    eta[row].abs() as f32
                };
            }
            if let Some(thr) = thr.as_mut() {
                let alpha = config.threshold_alpha.unwrap();
                let ts = residual_thresholds(&model, alpha)?;
                for (row, &p) in model.pixel_index_map().iter().enumerate() {
                    thr[p] = ts[row] as f32;
                }
            }
        }
        Ok((out, thr))
    });

    let slices = test.slices();
    let mut anom_vals = Vec::with_capacity(slices * pixels);
    let mut thr_vals = Vec::with_capacity(if want_thresholds { slices * pixels } else { 0 });
    for res in per_slice {
        let (out, thr) = res?;
        anom_vals.extend(out);
        if let Some(t) = thr {
            thr_vals.extend(t);
        }
    }

    let shape = (slices, test.height(), test.width());
    let anomalies = AnomalySeries::from_stack(RasterStack::from_values(
        Band::OpticalAnomaly,
        test.meta().clone(),
        test.days().to_vec(),
        ndarray::Array3::from_shape_vec(shape, anom_vals).unwrap(),
    )?)?;
    let thresholds = if want_thresholds {
        Some(RasterStack::from_values(
            Band::OpticalAnomaly,
            test.meta().clone(),
            test.days().to_vec(),
            ndarray::Array3::from_shape_vec(shape, thr_vals).unwrap(),
        )?)
    } else {
        None
    };
    Ok(AnomalyOutput {
        anomalies,
        thresholds,
        models_built,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    n: usize,
    rank: usize,
    m: usize,
    energy: f64,
    fill: FillStrategy,
    scene_pixels: usize,
    clamped_mass: f64,
    zeroed_pairs: usize,
}

fn push_f64s(bytes: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], at: &mut usize, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[*at..*at + 8]);
        out.push(f64::from_le_bytes(buf));
        *at += 8;
    }
    out
}

/// Persists a model as `<stem>.json` + `<stem>.bin`
/// (mean, diag, eigenvalues, eigenvectors, pixel map; little-endian).
pub fn write_model(model: &KlModel, path: impl AsRef<Path>) -> Result<()> {
    let stem: PathBuf = path.as_ref().to_path_buf();
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let header = ModelHeader {
        format: "kl-model".to_string(),
        n: model.n,
        rank: model.rank(),
        m: model.m,
        energy: model.captured_energy(),
        fill: model.fill,
        scene_pixels: model.scene_pixels,
        clamped_mass: model.diagnostics.clamped_mass,
        zeroed_pairs: model.diagnostics.zeroed_pairs,
    };
    let json_path = stem.with_extension("json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&header).expect("header serializes"),
    )
    .map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::new();
    push_f64s(&mut bytes, &model.mean);
    push_f64s(&mut bytes, &model.diag);
    push_f64s(&mut bytes, &model.eigenvalues);
    push_f64s(&mut bytes, &model.eigenvectors);
    for &p in &model.pixel_index_map {
        bytes.extend_from_slice(&(p as u64).to_le_bytes());
    }
    let bin_path = stem.with_extension("bin");
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Loads a model written by [`write_model`].
pub fn read_model(path: impl AsRef<Path>) -> Result<KlModel> {
    let stem = path.as_ref().to_path_buf();
    let json_path = stem.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: ModelHeader = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    if header.format != "kl-model" {
        return Err(Error::format(
            &json_path,
            format!("format {:?}", header.format),
        ));
    }
    let bin_path = stem.with_extension("bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = 8 * (header.n * 2 + header.rank + header.n * header.rank + header.n);
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "model payload {} bytes, header implies {}",
            bytes.len(),
            expected
        )));
    }
    let mut at = 0usize;
    let mean = read_f64s(&bytes, &mut at, header.n);
    let diag = read_f64s(&bytes, &mut at, header.n);
    let eigenvalues = read_f64s(&bytes, &mut at, header.rank);
    let eigenvectors = read_f64s(&bytes, &mut at, header.n * header.rank);
    let mut pixel_index_map = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[at..at + 8]);
        pixel_index_map.push(u64::from_le_bytes(buf) as usize);
        at += 8;
    }
    Ok(KlModel {
        mean,
        diag,
        eigenvalues,
        eigenvectors,
        n: header.n,
        m: header.m,
        pixel_index_map,
        scene_pixels: header.scene_pixels,
        fill: header.fill,
        diagnostics: CovDiagnostics {
            clamped_mass: header.clamped_mass,
            zeroed_pairs: header.zeroed_pairs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::SceneMetadata;
    use ndarray::Array3;

    fn stack_2px() -> RasterStack {
        // p0 samples [1, 3], p1 samples [2, 4].
        let vals = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        RasterStack::from_values(Band::OpticalEvi, SceneMetadata::default(), vec![0, 1], vals)
            .unwrap()
    }

    #[test]
    fn two_pixel_population_covariance() {
        let model = estimate_covariance(
            &stack_2px(),
            &[true, true],
            FillStrategy::None,
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(model.mean(), &[2.0, 3.0]);
        // C = [[1,1],[1,1]] under the population convention: eigenvalues 2, 0.
        assert!((model.eigenvalue(0) - 2.0).abs() < 1e-12);
        assert!(model.eigenvalue(1).abs() < 1e-12);
        assert!((model.diag()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_stack_zero_spectrum() {
        let s = RasterStack::constant(
            Band::OpticalEvi,
            SceneMetadata::default(),
            vec![0, 1, 2],
            2,
            2,
            5.0,
        )
        .unwrap();
        let model =
            estimate_covariance(&s, &[true; 4], FillStrategy::None, Parallelism::Sequential)
                .unwrap();
        assert_eq!(model.total_energy(), 0.0);
        assert_eq!(select_truncation(&model, 0.95), 0);
    }

    #[test]
    fn truncation_examples() {
        let mut model = KlModel {
            mean: vec![0.0; 4],
            diag: vec![0.0; 4],
            eigenvalues: vec![4.0, 3.0, 2.0, 1.0],
            eigenvectors: vec![0.0; 16],
            n: 4,
            m: 0,
            pixel_index_map: vec![0, 1, 2, 3],
            scene_pixels: 4,
            fill: FillStrategy::None,
            diagnostics: CovDiagnostics::default(),
        };
        assert_eq!(select_truncation(&model, 0.69), 2); // 7/10 >= 0.69
        assert_eq!(select_truncation(&model, 1.0 - 1e-12), 4);
        model.eigenvalues = vec![4.0, 3.0, 2.0, 0.0];
        assert_eq!(select_truncation(&model, 1.0 - 1e-12), 3);
    }

    #[test]
    fn threshold_single_term() {
        // lambda_1 = 4, phi_1 = e_0, m = 0: threshold = 2 / sqrt(0.25) = 4.
        let model = KlModel {
            mean: vec![0.0; 3],
            diag: vec![4.0, 0.0, 0.0],
            eigenvalues: vec![4.0],
            eigenvectors: vec![1.0, 0.0, 0.0],
            n: 3,
            m: 0,
            pixel_index_map: vec![0, 1, 2],
            scene_pixels: 3,
            fill: FillStrategy::None,
            diagnostics: CovDiagnostics::default(),
        };
        assert!((concentration_threshold(&model, 0, 0.25).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(concentration_threshold(&model, 1, 0.25).unwrap(), 0.0);
        assert!(concentration_threshold(&model, 0, 0.0).is_err());
        assert!(concentration_threshold(&model, 0, 1.0).is_err());
    }

    #[test]
    fn threshold_zero_when_m_equals_rank() {
        let model = estimate_covariance(
            &stack_2px(),
            &[true, true],
            FillStrategy::None,
            Parallelism::Sequential,
        )
        .map(|mut m| {
            m.set_m(m.n());
            m
        })
        .unwrap();
        for i in 0..model.n() {
            assert_eq!(concentration_threshold(&model, i, 0.05).unwrap(), 0.0);
        }
    }

    #[test]
    fn projection_annihilates_retained_span() {
        let mut model = estimate_covariance(
            &stack_2px(),
            &[true, true],
            FillStrategy::None,
            Parallelism::Sequential,
        )
        .unwrap();
        model.set_m(1);
        // u == mean -> eta == 0
        let eta = project_residual(&[2.0, 3.0], &[false, false], &model).unwrap();
        assert!(eta.iter().all(|e| e.abs() < 1e-12));
        // u = mean + phi_1 -> eta == 0
        let phi = model.eigenvector(0).to_vec();
        let u: Vec<f64> = model.mean().iter().zip(&phi).map(|(m, p)| m + p).collect();
        let eta = project_residual(&u, &[false, false], &model).unwrap();
        assert!(eta.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn projection_rejects_missing_inside_model() {
        let model = estimate_covariance(
            &stack_2px(),
            &[true, true],
            FillStrategy::None,
            Parallelism::Sequential,
        )
        .unwrap();
        assert!(project_residual(&[1.0, 2.0], &[false, true], &model).is_err());
        assert!(project_residual(&[1.0], &[false], &model).is_err());
    }

    #[test]
    fn empty_training_pixel_reported() {
        let vals =
            Array3::from_shape_vec((2, 1, 2), vec![1.0, f32::NAN, 3.0, f32::NAN]).unwrap();
        let s =
            RasterStack::from_values(Band::OpticalEvi, SceneMetadata::default(), vec![0, 1], vals)
                .unwrap();
        let err = estimate_covariance(&s, &[true, true], FillStrategy::None, Parallelism::Sequential)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyTrainingPixel { index: 1 }));
    }

    #[test]
    fn sparse_overlap_pairs_are_zeroed_and_counted() {
        // Pixels 0 and 1 never share a slice: their covariance entry is
        // zeroed and reported.
        let vals = Array3::from_shape_vec(
            (4, 1, 2),
            vec![
                1.0,
                f32::NAN,
                2.0,
                f32::NAN,
                f32::NAN,
                5.0,
                f32::NAN,
                7.0,
            ],
        )
        .unwrap();
        let s = RasterStack::from_values(
            Band::OpticalEvi,
            SceneMetadata::default(),
            vec![0, 1, 2, 3],
            vals,
        )
        .unwrap();
        let model =
            estimate_covariance(&s, &[true, true], FillStrategy::None, Parallelism::Sequential)
                .unwrap();
        assert_eq!(model.diagnostics().zeroed_pairs, 1);
        let pc = pairwise_covariance(&s, &[true, true], Parallelism::Sequential).unwrap();
        assert_eq!(pc.matrix[(0, 1)], 0.0);
        assert_eq!(pc.zeroed_pairs, 1);
    }

    #[test]
    fn model_export_round_trip() {
        let mut model = estimate_covariance(
            &stack_2px(),
            &[true, true],
            FillStrategy::None,
            Parallelism::Sequential,
        )
        .unwrap();
        model.set_m(1);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        write_model(&model, &stem).unwrap();
        let back = read_model(&stem).unwrap();
        assert_eq!(back.mean(), model.mean());
        assert_eq!(back.eigenvalues(), model.eigenvalues());
        assert_eq!(back.m(), model.m());
        assert_eq!(back.pixel_index_map(), model.pixel_index_map());
        // Re-export is byte-identical.
        let stem2 = dir.path().join("model2");
        write_model(&back, &stem2).unwrap();
        assert_eq!(
            std::fs::read(stem.with_extension("bin")).unwrap(),
            std::fs::read(stem2.with_extension("bin")).unwrap()
        );
    }
}
