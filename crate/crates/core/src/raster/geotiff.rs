//! Import converter: per-date single-band GeoTIFF files into the native
//! stack format. Only pixel values are taken; georeferencing tags are
//! recorded as opaque provenance. NaN samples (and an optional declared
//! nodata value) become missing.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::Array3;
use tiff::decoder::{Decoder, DecodingResult};

use crate::error::{Error, Result};
use crate::raster::{Band, RasterStack, SceneMetadata};

fn decode_one(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| Error::Tiff {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = dec.dimensions().map_err(|e| Error::Tiff {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = dec.read_image().map_err(|e| Error::Tiff {
        path: path.to_path_buf(),
        source: e,
    })?;
    let vals: Vec<f32> = match img {
        DecodingResult::U8(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U16(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I16(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported TIFF sample format {other:?}"),
            ))
        }
    };
    let (w, h) = (w as usize, h as usize);
    if vals.len() < w * h {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} samples for {}x{} raster",
            path.display(),
            vals.len(),
            w,
            h
        )));
    }
    // Multi-channel images keep channel 0 only.
    let channels = vals.len() / (w * h);
    let vals = if channels > 1 {
        vals.into_iter().step_by(channels).collect()
    } else {
        vals
    };
    Ok((h, w, vals))
}

/// Stacks per-date GeoTIFFs (one file per day, same dimensions) into a
/// [`RasterStack`]. `days` must be strictly increasing and aligned with
/// `paths`.
pub fn convert_geotiffs(
    paths: &[impl AsRef<Path>],
    days: &[i64],
    band: Band,
    meta: SceneMetadata,
    nodata: Option<f32>,
) -> Result<RasterStack> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("no GeoTIFF inputs".to_string()));
    }
    if paths.len() != days.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} days",
            paths.len(),
            days.len()
        )));
    }
    let mut height = 0;
    let mut width = 0;
    let mut data: Vec<f32> = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let (h, w, mut vals) = decode_one(p.as_ref())?;
        if i == 0 {
            height = h;
            width = w;
        } else if (h, w) != (height, width) {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} differs from first slice {}x{}",
                p.as_ref().display(),
                h,
                w,
                height,
                width
            )));
        }
        if let Some(nd) = nodata {
            for v in vals.iter_mut() {
                if *v == nd {
                    *v = f32::NAN;
                }
            }
        }
        data.extend_from_slice(&vals);
    }
    let values = Array3::from_shape_vec((paths.len(), height, width), data)
        .expect("dimensions checked per slice");
    RasterStack::from_values(band, meta, days.to_vec(), values)
}
