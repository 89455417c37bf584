//! Raster time-series data model and I/O.
//!
//! A [`RasterStack`] is a time-indexed stack of single-band 2-D rasters with
//! an explicit missing-data mask and per-slice day numbers. Missing samples
//! are represented twice: as NaN in the payload and as `true` in the mask.
//! The mask is authoritative; NaN is the on-disk sentinel.
//!
//! The native on-disk format is a JSON sidecar (`<name>.json`) plus a raw
//! little-endian f32 payload (`<name>.bin`), slice-major, NaN = missing.
//! `load_stack(write_stack(s))` is the identity, bit-exact.

pub mod geotiff;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Band tag describing what a stack holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    OpticalEvi,
    OpticalAnomaly,
    SarVv,
    SarVh,
    SarFiltered,
    /// Single-slice output raster of confirmed change days (0 = stable).
    DateMap,
}

impl Band {
    pub fn is_sar(self) -> bool {
        matches!(self, Band::SarVv | Band::SarVh | Band::SarFiltered)
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Band::OpticalEvi => "optical-evi",
            Band::OpticalAnomaly => "optical-anomaly",
            Band::SarVv => "sar-vv",
            Band::SarVh => "sar-vh",
            Band::SarFiltered => "sar-filtered",
            Band::DateMap => "date-map",
        };
        f.write_str(s)
    }
}

/// Provenance metadata carried in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    /// Calendar date the day numbers count from.
    pub epoch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl SceneMetadata {
    pub fn new(epoch: impl Into<String>) -> Self {
        SceneMetadata {
            epoch: epoch.into(),
            pixel_size: None,
            crs: None,
            notes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(ps) = self.pixel_size {
            if ps.is_nan() || ps <= 0.0 {
                return Err(Error::InvalidParam(format!("pixel_size {ps} must be > 0")));
            }
        }
        Ok(())
    }
}

impl Default for SceneMetadata {
    fn default() -> Self {
        SceneMetadata::new("day-0")
    }
}

/// Time-indexed stack of co-registered single-band rasters.
///
/// Layout is slice-major: shape `(slices, height, width)`, a whole time slice
/// contiguous in memory. Immutable after construction except through
/// [`RasterStack::set_slice_from_flat`].
#[derive(Debug, Clone)]
pub struct RasterStack {
    band: Band,
    meta: SceneMetadata,
    days: Vec<i64>,
    values: Array3<f32>,
    missing: Array3<bool>,
}

/// Bit-exact equality: payload compared by f32 bits so missing (NaN)
/// samples compare equal.
impl PartialEq for RasterStack {
    fn eq(&self, other: &Self) -> bool {
        self.band == other.band
            && self.meta == other.meta
            && self.days == other.days
            && self.values.shape() == other.values.shape()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.missing == other.missing
    }
}

impl RasterStack {
    /// Builds a stack from values and an explicit mask.
    ///
    /// Masked positions are canonicalized to NaN; a NaN at an unmasked
    /// position is rejected.
    pub fn new(
        band: Band,
        meta: SceneMetadata,
        days: Vec<i64>,
        mut values: Array3<f32>,
        missing: Array3<bool>,
    ) -> Result<Self> {
        meta.validate()?;
        if values.shape() != missing.shape() {
            return Err(Error::ShapeMismatch(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                missing.shape()
            )));
        }
        if days.len() != values.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} days vs {} slices",
                days.len(),
                values.shape()[0]
            )));
        }
        for i in 1..days.len() {
            if days[i] <= days[i - 1] {
                return Err(Error::NonMonotoneDays { index: i });
            }
        }
        for (v, &m) in values.iter_mut().zip(missing.iter()) {
            if m {
                *v = f32::NAN;
            } else if v.is_nan() {
                return Err(Error::InvalidParam(
                    "NaN sample not flagged missing".to_string(),
                ));
            }
        }
        Ok(RasterStack {
            band,
            meta,
            days,
            values,
            missing,
        })
    }

    /// Builds a stack deriving the mask from NaN samples.
    pub fn from_values(
        band: Band,
        meta: SceneMetadata,
        days: Vec<i64>,
        values: Array3<f32>,
    ) -> Result<Self> {
        let missing = values.mapv(|v| v.is_nan());
        Self::new(band, meta, days, values, missing)
    }

    /// All-present stack filled with a constant.
    pub fn constant(
        band: Band,
        meta: SceneMetadata,
        days: Vec<i64>,
        height: usize,
        width: usize,
        value: f32,
    ) -> Result<Self> {
        let slices = days.len();
        Self::new(
            band,
            meta,
            days,
            Array3::from_elem((slices, height, width), value),
            Array3::from_elem((slices, height, width), false),
        )
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn meta(&self) -> &SceneMetadata {
        &self.meta
    }

    pub fn days(&self) -> &[i64] {
        &self.days
    }

    pub fn slices(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Pixels per slice.
    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn value(&self, slice: usize, row: usize, col: usize) -> f32 {
        self.values[(slice, row, col)]
    }

    pub fn is_missing(&self, slice: usize, row: usize, col: usize) -> bool {
        self.missing[(slice, row, col)]
    }

    pub fn slice_view(&self, slice: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(ndarray::Axis(0), slice)
    }

    pub fn mask_view(&self, slice: usize) -> ArrayView2<'_, bool> {
        self.missing.index_axis(ndarray::Axis(0), slice)
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn missing(&self) -> &Array3<bool> {
        &self.missing
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// With-band copy, same data.
    pub fn with_band(mut self, band: Band) -> Self {
        self.band = band;
        self
    }

    /// Flattens a slice to a row-major value vector and aligned
    /// availability-complement mask (`true` = missing).
    pub fn flatten_slice(&self, slice: usize) -> Result<(Vec<f64>, Vec<bool>)> {
        if slice >= self.slices() {
            return Err(Error::IndexOutOfRange(format!(
                "slice {slice} of {}",
                self.slices()
            )));
        }
        let vals = self
            .slice_view(slice)
            .iter()
            .map(|&v| v as f64)
            .collect::<Vec<_>>();
        let mask = self.mask_view(slice).iter().copied().collect::<Vec<_>>();
        Ok((vals, mask))
    }

    /// Inverse of [`flatten_slice`](Self::flatten_slice): writes a row-major
    /// vector and mask back into a slice.
    pub fn set_slice_from_flat(
        &mut self,
        slice: usize,
        values: &[f64],
        missing: &[bool],
    ) -> Result<()> {
        if slice >= self.slices() {
            return Err(Error::IndexOutOfRange(format!(
                "slice {slice} of {}",
                self.slices()
            )));
        }
        if values.len() != self.pixels() || missing.len() != self.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector length {} vs {} pixels",
                values.len(),
                self.pixels()
            )));
        }
        let width = self.width();
        for (i, (&v, &m)) in values.iter().zip(missing.iter()).enumerate() {
            let (r, c) = (i / width, i % width);
            self.values[(slice, r, c)] = if m { f32::NAN } else { v as f32 };
            self.missing[(slice, r, c)] = m;
        }
        Ok(())
    }

    /// Tiles partitioning the raster exactly once; edge tiles truncated.
    pub fn tile_iter(&self, tile_rows: usize, tile_cols: usize) -> TileIter {
        TileIter::new(self.height(), self.width(), tile_rows, tile_cols)
    }

    /// New stack holding only the given slices. Indices must be strictly
    /// increasing (day order is preserved).
    pub fn select_slices(&self, indices: &[usize]) -> Result<RasterStack> {
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.slices() {
                return Err(Error::IndexOutOfRange(format!(
                    "slice {i} of {}",
                    self.slices()
                )));
            }
            if k > 0 && indices[k - 1] >= i {
                return Err(Error::InvalidParam(
                    "slice indices must be strictly increasing".to_string(),
                ));
            }
        }
        let (h, w) = (self.height(), self.width());
        let mut values = Array3::zeros((indices.len(), h, w));
        let mut missing = Array3::from_elem((indices.len(), h, w), false);
        for (dst, &src) in indices.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    values[(dst, r, c)] = self.values[(src, r, c)];
                    missing[(dst, r, c)] = self.missing[(src, r, c)];
                }
            }
        }
        let days = indices.iter().map(|&i| self.days[i]).collect();
        RasterStack::new(self.band, self.meta.clone(), days, values, missing)
    }
}

/// Rectangular window into a parent raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub parent_rows: usize,
    pub parent_cols: usize,
}

impl Tile {
    /// Whole raster as one tile.
    pub fn full(rows: usize, cols: usize) -> Self {
        Tile {
            row0: 0,
            col0: 0,
            rows,
            cols,
            parent_rows: rows,
            parent_cols: cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major global pixel indices covered by this tile.
    pub fn pixel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let w = self.parent_cols;
        (self.row0..self.row0 + self.rows)
            .flat_map(move |r| (self.col0..self.col0 + self.cols).map(move |c| r * w + c))
    }
}

/// Iterator over a tile partition, row-major tile order.
pub struct TileIter {
    parent_rows: usize,
    parent_cols: usize,
    tile_rows: usize,
    tile_cols: usize,
    next: usize,
    tiles_across: usize,
    tiles_down: usize,
}

impl TileIter {
    pub fn new(parent_rows: usize, parent_cols: usize, tile_rows: usize, tile_cols: usize) -> Self {
        assert!(tile_rows >= 1 && tile_cols >= 1, "tile dims must be >= 1");
        TileIter {
            parent_rows,
            parent_cols,
            tile_rows,
            tile_cols,
            next: 0,
            tiles_across: parent_cols.div_ceil(tile_cols),
            tiles_down: parent_rows.div_ceil(tile_rows),
        }
    }
}

impl Iterator for TileIter {
    type Item = Tile;

    fn next(&mut self) -> Option<Tile> {
        if self.next >= self.tiles_across * self.tiles_down {
            return None;
        }
        let tr = self.next / self.tiles_across;
        let tc = self.next % self.tiles_across;
        self.next += 1;
        let row0 = tr * self.tile_rows;
        let col0 = tc * self.tile_cols;
        Some(Tile {
            row0,
            col0,
            rows: self.tile_rows.min(self.parent_rows - row0),
            cols: self.tile_cols.min(self.parent_cols - col0),
            parent_rows: self.parent_rows,
            parent_cols: self.parent_cols,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    band: Band,
    epoch: String,
    days: Vec<i64>,
    dtype: String,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
}

/// Resolves `name`, `name.json`, or `name.bin` to the common stem.
fn stem_for(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Loads a stack from the native sidecar + payload format.
pub fn load_stack(path: impl AsRef<Path>) -> Result<RasterStack> {
    let stem = stem_for(path.as_ref());
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");

    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    if sc.dtype != "f32" {
        return Err(Error::format(&json_path, format!("dtype {:?}", sc.dtype)));
    }
    if sc.byte_order != "little" {
        return Err(Error::format(
            &json_path,
            format!("byte order {:?}", sc.byte_order),
        ));
    }

    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = sc.width * sc.height * sc.days.len() * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "payload {} holds {} bytes, sidecar declares {} ({} slices of {}x{})",
            bin_path.display(),
            bytes.len(),
            expected,
            sc.days.len(),
            sc.height,
            sc.width
        )));
    }
    let raw: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let values = Array3::from_shape_vec((sc.days.len(), sc.height, sc.width), raw)
        .expect("payload length checked above");
    let meta = SceneMetadata {
        epoch: sc.epoch,
        pixel_size: sc.pixel_size,
        crs: sc.crs,
        notes: sc.notes,
    };
    RasterStack::from_values(sc.band, meta, sc.days, values)
}

/// Writes a stack in the native format; readable back bit-exactly.
pub fn write_stack(stack: &RasterStack, path: impl AsRef<Path>) -> Result<()> {
    let stem = stem_for(path.as_ref());
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");

    let sc = Sidecar {
        width: stack.width(),
        height: stack.height(),
        band: stack.band,
        epoch: stack.meta.epoch.clone(),
        days: stack.days.clone(),
        dtype: "f32".to_string(),
        byte_order: "little".to_string(),
        pixel_size: stack.meta.pixel_size,
        crs: stack.meta.crs.clone(),
        notes: stack.meta.notes.clone(),
    };
    let text = serde_json::to_string_pretty(&sc).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::with_capacity(stack.values.len() * 4);
    for &v in stack.values.iter() {
        // Canonical NaN for missing samples keeps round trips bit-exact.
        let v = if v.is_nan() { f32::NAN } else { v };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}
