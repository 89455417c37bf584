//! End-to-end orchestration: configuration, the detect/train runs, and the
//! run manifest. The CLI crate is a thin argument-parsing layer over this
//! module.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hmm::{
    self, DateMap, EmissionModel, FtcMode, HmmSpec, ObsSources, PixelStatus, State, Thresholds,
};
use crate::kl::{self, KlConfig, ModelCache};
use crate::par::{self, Parallelism};
use crate::raster::{load_stack, write_stack, RasterStack, Tile};
use crate::sar::{filter_stack, FilterParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpticalOnly,
    SarOnly,
    Hybrid,
}

impl Mode {
    pub fn ftc_mode(self) -> FtcMode {
        match self {
            Mode::OpticalOnly => FtcMode::OpticalOnly,
            Mode::SarOnly => FtcMode::SarOnly,
            Mode::Hybrid => FtcMode::Hybrid,
        }
    }

    pub fn uses_optical(self) -> bool {
        !matches!(self, Mode::SarOnly)
    }

    pub fn uses_sar(self) -> bool {
        !matches!(self, Mode::OpticalOnly)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "optical-only" => Ok(Mode::OpticalOnly),
            "sar-only" => Ok(Mode::SarOnly),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeriveTransitions {
    pub cloud_fraction: f64,
    pub forest_fraction: f64,
    pub p_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransitionSettings {
    Explicit([[f64; 4]; 4]),
    Derive { derive: DeriveTransitions },
}

impl Default for TransitionSettings {
    fn default() -> Self {
        TransitionSettings::Derive {
            derive: DeriveTransitions {
                cloud_fraction: 0.2,
                forest_fraction: 0.85,
                p_change: 0.005,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FtcSetting {
    Fixed(usize),
    Named(String),
}

impl Default for FtcSetting {
    fn default() -> Self {
        FtcSetting::Named("auto".to_string())
    }
}

impl FtcSetting {
    /// `Some(n)` for a fixed value, `None` for automatic (variable FTC).
    pub fn resolve(&self) -> Result<Option<usize>> {
        match self {
            FtcSetting::Fixed(n) => Ok(Some(*n)),
            FtcSetting::Named(s) if s == "auto" => Ok(None),
            FtcSetting::Named(s) => Err(Error::InvalidParam(format!(
                "ftc must be an integer or \"auto\", got {s:?}"
            ))),
        }
    }
}

fn default_emissions() -> [(f64, f64); 4] {
    [(0.05, 0.05), (0.6, 0.05), (0.9, 0.9), (0.6, 0.9)]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmSettings {
    #[serde(default)]
    pub transitions: TransitionSettings,
    /// Per-state `(p_optical_bit, p_sar_bit)`.
    #[serde(default = "default_emissions")]
    pub emissions: [(f64, f64); 4],
    /// Initial distribution; derived from the cloud fraction when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<[f64; 4]>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub ftc: FtcSetting,
    /// Denominator of the variable-FTC formulas; defaults to the number of
    /// optical test days actually present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_optical_days: Option<usize>,
    /// Feed raw vegetation-index values to the emission function instead of
    /// anomaly magnitudes (below-threshold logic).
    #[serde(default)]
    pub raw_optical: bool,
    /// Keep decoded state paths in memory (and report state counts).
    #[serde(default)]
    pub keep_paths: bool,
}

impl Default for HmmSettings {
    fn default() -> Self {
        HmmSettings {
            transitions: TransitionSettings::default(),
            emissions: default_emissions(),
            initial: None,
            thresholds: Thresholds::default(),
            ftc: FtcSetting::default(),
            total_optical_days: None,
            raw_optical: false,
            keep_paths: false,
        }
    }
}

impl HmmSettings {
    pub fn build_spec(&self) -> Result<HmmSpec> {
        let emissions = EmissionModel::from_bernoulli(self.emissions)?;
        match (&self.transitions, self.initial) {
            (TransitionSettings::Explicit(p), Some(pi)) => HmmSpec::new(*p, emissions, pi),
            (TransitionSettings::Explicit(p), None) => {
                HmmSpec::new(*p, emissions, [1.0, 0.0, 0.0, 0.0])
            }
            (TransitionSettings::Derive { derive }, initial) => {
                let p = hmm::derive_transitions(
                    derive.cloud_fraction,
                    derive.forest_fraction,
                    derive.p_change,
                )?;
                let pi = initial
                    .unwrap_or([1.0 - derive.cloud_fraction, derive.cloud_fraction, 0.0, 0.0]);
                HmmSpec::new(p, emissions, pi)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_stack: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optical_stack: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sar_stack: Option<PathBuf>,
    /// Optional pre-trained model; pins truncation and fill settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Also persist the anomaly and filtered-radar stacks.
    #[serde(default)]
    pub save_intermediate: bool,
    #[serde(default)]
    pub kl: KlConfig,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub hmm: HmmSettings,
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_optical() {
            if self.optical_stack.is_none() {
                return Err(Error::InvalidParam(format!(
                    "mode {:?} requires an optical stack",
                    self.mode
                )));
            }
            // Raw-optical mode feeds the vegetation index straight to the
            // emissions; only the anomaly pathway needs training data.
            if !self.hmm.raw_optical && self.training_stack.is_none() {
                return Err(Error::InvalidParam(
                    "optical modes require a training stack (raw_optical runs without one)"
                        .into(),
                ));
            }
        }
        if self.mode.uses_sar() && self.sar_stack.is_none() {
            return Err(Error::InvalidParam(format!(
                "mode {:?} requires a SAR stack",
                self.mode
            )));
        }
        self.filter.validate()?;
        self.kl.fill.validate()?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(compact.as_bytes());
        to_hex(&h.finalize())
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every command's outputs. It embeds the
/// full resolved configuration, so a run can be reproduced bit-exactly.
/// Worker counts are excluded: results do not depend on them.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub outputs: Vec<ManifestOutput>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestOutput {
    pub path: String,
    pub sha256: String,
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(to_hex(&h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> RunManifest {
        let value = serde_json::to_value(config).expect("config serializes");
        let compact = serde_json::to_string(&value).expect("value serializes");
        let mut h = Sha256::new();
        h.update(compact.as_bytes());
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_sha256: to_hex(&h.finalize()),
            config: value,
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(ManifestOutput {
            path: path.as_ref().display().to_string(),
            sha256: file_sha256(path.as_ref())?,
        });
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Tracks every pixel of a scene. Rows are independent work items; the
/// result is identical for any parallelism mode.
pub fn track_all(
    sources: &ObsSources<'_>,
    spec: &HmmSpec,
    th: &Thresholds,
    ftc: usize,
    keep_paths: bool,
    mode: Parallelism,
) -> Result<DateMap> {
    let shape_of = |s: &RasterStack| (s.height(), s.width());
    let (height, width) = match (sources.optical, sources.sar) {
        (Some(o), Some(s)) => {
            if shape_of(o) != shape_of(s) {
                return Err(Error::ShapeMismatch(format!(
                    "optical {}x{} vs sar {}x{}",
                    o.height(),
                    o.width(),
                    s.height(),
                    s.width()
                )));
            }
            shape_of(o)
        }
        (Some(o), None) => shape_of(o),
        (None, Some(s)) => shape_of(s),
        (None, None) => return Err(Error::EmptyInput("no observation sources".into())),
    };
    let timeline = sources.timeline()?;

    let rows = par::map_indexed(mode, height, |r| -> Result<Vec<(PixelStatus, Vec<State>)>> {
        let mut row = Vec::with_capacity(width);
        for c in 0..width {
            row.push(hmm::track_pixel(&timeline, sources, r, c, spec, th, ftc)?);
        }
        Ok(row)
    });

    let mut status = Vec::with_capacity(height * width);
    let mut paths = if keep_paths {
        Some(Vec::with_capacity(height * width))
    } else {
        None
    };
    for row in rows {
        for (st, path) in row? {
            status.push(st);
            if let Some(p) = paths.as_mut() {
                p.push(path);
            }
        }
    }
    let map = DateMap::new(height, width, status)?;
    Ok(match paths {
        Some(p) => map.with_paths(p),
        None => map,
    })
}

/// Effective FTC for a run: fixed when configured, otherwise the variable
/// rule. An empty optical set in hybrid mode degrades the run to radar-only,
/// radar FTC included.
pub fn effective_ftc(
    setting: &FtcSetting,
    mode: Mode,
    n_optical: usize,
    total_optical_days: Option<usize>,
) -> Result<usize> {
    if let Some(fixed) = setting.resolve()? {
        if fixed < 1 {
            return Err(Error::InvalidParam("ftc must be >= 1".into()));
        }
        return Ok(fixed);
    }
    let ftc_mode = match mode {
        Mode::Hybrid if n_optical == 0 => FtcMode::SarOnly,
        m => m.ftc_mode(),
    };
    let total = total_optical_days.unwrap_or(n_optical);
    Ok(hmm::variable_ftc(n_optical, ftc_mode, total))
}

pub struct DetectOutput {
    pub date_map: DateMap,
    pub anomaly: Option<RasterStack>,
    pub anomaly_thresholds: Option<RasterStack>,
    pub filtered_sar: Option<RasterStack>,
    pub ftc: usize,
    pub models_built: usize,
}

/// Runs the full detection pipeline in memory.
pub fn detect(config: &PipelineConfig, mode: Parallelism) -> Result<DetectOutput> {
    config.validate()?;

    let mut kl_config = config.kl.clone();
    let cache = ModelCache::new();

    let (anomaly, anomaly_thresholds, models_built) = if config.mode.uses_optical() {
        let optical = load_stack(config.optical_stack.as_ref().unwrap())?;
        if config.hmm.raw_optical {
            // Raw mode feeds the vegetation index straight to the emissions.
            (Some(optical), None, 0)
        } else {
            let training = load_stack(config.training_stack.as_ref().ok_or_else(|| {
                Error::InvalidParam("optical modes require a training stack".into())
            })?)?;
            if let Some(model_path) = &config.model {
                let model = kl::read_model(model_path)?;
                if model.scene_pixels() != optical.pixels() {
                    return Err(Error::ShapeMismatch(format!(
                        "model covers {} pixels, scene has {}",
                        model.scene_pixels(),
                        optical.pixels()
                    )));
                }
                // Pin settings to the trained model and seed the cache with
                // its (full-scene) availability pattern.
                kl_config.fill = model.fill_strategy();
                kl_config.explicit_m = Some(model.m());
                if model.n() == optical.pixels() && kl_config.tile.is_none() {
                    let key = (0usize, pack_full_mask(optical.pixels()));
                    cache.insert(key, Arc::new(model));
                }
            }
            let out = kl::anomaly_stack(&optical, &training, &kl_config, mode, &cache)?;
            (
                Some(out.anomalies.into_stack()),
                out.thresholds,
                out.models_built,
            )
        }
    } else {
        (None, None, 0)
    };

    let filtered_sar = if config.mode.uses_sar() {
        let sar = load_stack(config.sar_stack.as_ref().unwrap())?;
        Some(filter_stack(&sar, &config.filter, mode)?)
    } else {
        None
    };

    let spec = config.hmm.build_spec()?;
    let n_optical = anomaly.as_ref().map_or(0, |a| a.slices());
    let ftc = effective_ftc(
        &config.hmm.ftc,
        config.mode,
        n_optical,
        config.hmm.total_optical_days,
    )?;
    let sources = ObsSources {
        optical: anomaly.as_ref(),
        sar: filtered_sar.as_ref(),
        optical_raw: config.hmm.raw_optical,
        optical_thresholds: anomaly_thresholds.as_ref(),
    };
    let date_map = track_all(
        &sources,
        &spec,
        &config.hmm.thresholds,
        ftc,
        config.hmm.keep_paths,
        mode,
    )?;

    Ok(DetectOutput {
        date_map,
        anomaly,
        anomaly_thresholds,
        filtered_sar,
        ftc,
        models_built,
    })
}

fn pack_full_mask(len: usize) -> Box<[u64]> {
    let mut words = vec![0u64; len.div_ceil(64)];
    for (i, w) in words.iter_mut().enumerate() {
        let bits = (len - i * 64).min(64);
        *w = if bits == 64 { !0 } else { (1u64 << bits) - 1 };
    }
    words.into_boxed_slice()
}

/// Runs detect and writes the date-map raster, CSV, optional intermediate
/// stacks, and the run manifest into `config.out_dir`.
pub fn run_detect_to_dir(config: &PipelineConfig, mode: Parallelism) -> Result<DetectOutput> {
    let out = detect(config, mode)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = out
        .anomaly
        .as_ref()
        .or(out.filtered_sar.as_ref())
        .map(|s| s.meta().clone())
        .unwrap_or_default();
    let raster = out.date_map.to_confirm_raster(meta);
    let datemap_stem = dir.join("datemap");
    write_stack(&raster, &datemap_stem)?;

    let csv_path = dir.join("datemap.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    out.date_map.write_csv(file)?;

    let mut manifest = RunManifest::new("detect", config.seed, config);
    manifest.record(datemap_stem.with_extension("json"))?;
    manifest.record(datemap_stem.with_extension("bin"))?;
    manifest.record(&csv_path)?;

    if config.save_intermediate {
        if let Some(a) = &out.anomaly {
            let stem = dir.join("anomaly");
            write_stack(a, &stem)?;
            manifest.record(stem.with_extension("bin"))?;
        }
        if let Some(t) = &out.anomaly_thresholds {
            let stem = dir.join("anomaly_thresholds");
            write_stack(t, &stem)?;
            manifest.record(stem.with_extension("bin"))?;
        }
        if let Some(f) = &out.filtered_sar {
            let stem = dir.join("sar_filtered");
            write_stack(f, &stem)?;
            manifest.record(stem.with_extension("bin"))?;
        }
    }
    manifest.write(dir.join("manifest.json"))?;
    Ok(out)
}

pub struct TrainOutput {
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub captured_energy: f64,
}

/// Trains the full-scene model and writes `model.json` + `model.bin`.
pub fn run_train_to_dir(config: &PipelineConfig, mode: Parallelism) -> Result<TrainOutput> {
    let training = load_stack(config.training_stack.as_ref().ok_or_else(|| {
        Error::InvalidParam("train requires a training stack".into())
    })?)?;
    let available = vec![true; training.pixels()];
    let mut model = kl::estimate_covariance(&training, &available, config.kl.fill, mode)?;
    let m = match config.kl.explicit_m {
        Some(m) => m.min(model.n()),
        None => kl::select_truncation(&model, config.kl.energy_fraction),
    };
    model.set_m(m);

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let stem = config.out_dir.join("model");
    kl::write_model(&model, &stem)?;

    let mut manifest = RunManifest::new("train", config.seed, config);
    manifest.record(stem.with_extension("json"))?;
    manifest.record(stem.with_extension("bin"))?;
    manifest.write(config.out_dir.join("manifest.json"))?;

    Ok(TrainOutput {
        n: model.n(),
        m: model.m(),
        rank: model.rank(),
        captured_energy: model.captured_energy(),
    })
}

/// Splits a scene into tiles for parallel map-style processing. Kept here so
/// callers besides the KL module can honor the same tile geometry.
pub fn tiles_for(height: usize, width: usize, tile: Option<(usize, usize)>) -> Vec<Tile> {
    match tile {
        Some((tr, tc)) => crate::raster::TileIter::new(height, width, tr, tc).collect(),
        None => vec![Tile::full(height, width)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ftc_setting_parses() {
        let f: FtcSetting = serde_json::from_str("7").unwrap();
        assert_eq!(f.resolve().unwrap(), Some(7));
        let a: FtcSetting = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(a.resolve().unwrap(), None);
        let bad: FtcSetting = serde_json::from_str("\"sometimes\"").unwrap();
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn effective_ftc_hybrid_degrades_to_sar_only() {
        let auto = FtcSetting::default();
        assert_eq!(
            effective_ftc(&auto, Mode::Hybrid, 0, Some(161)).unwrap(),
            5
        );
        assert_eq!(
            effective_ftc(&auto, Mode::Hybrid, 161, Some(161)).unwrap(),
            10
        );
        assert_eq!(
            effective_ftc(&auto, Mode::OpticalOnly, 161, Some(161)).unwrap(),
            9
        );
        assert_eq!(effective_ftc(&auto, Mode::SarOnly, 0, None).unwrap(), 5);
        assert_eq!(
            effective_ftc(&FtcSetting::Fixed(3), Mode::Hybrid, 0, None).unwrap(),
            3
        );
    }

    #[test]
    fn mode_consistency_validated() {
        let cfg = PipelineConfig {
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
            filter: FilterParams::default(),
            hmm: HmmSettings::default(),
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let mut cfg = PipelineConfig {
            mode: Mode::SarOnly,
            training_stack: None,
            optical_stack: None,
            sar_stack: Some(PathBuf::from("sar")),
            model: None,
            out_dir: PathBuf::from("out"),
            seed: 3,
            workers: None,
            save_intermediate: false,
            kl: KlConfig::default(),
            filter: FilterParams::default(),
            hmm: HmmSettings::default(),
        };
        let h1 = cfg.config_hash();
        assert_eq!(h1, cfg.config_hash());
        cfg.seed = 4;
        assert_ne!(h1, cfg.config_hash());
    }

    #[test]
    fn full_mask_packing() {
        let m = pack_full_mask(65);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], !0u64);
        assert_eq!(m[1], 1);
    }
}
