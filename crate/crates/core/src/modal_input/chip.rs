//! On-disk chip layout.
//!
//! A chip is a directory holding `meta.txt` plus one `<STREAM>.f32` file per
//! present stream. Each array file is little-endian `f32`, shaped
//! `[channels + 1, height, width]`; the last plane is the validity mask
//! (1.0 valid, 0.0 invalid).
//!
//! `meta.txt` is `key = value` lines:
//!
//! ```text
//! id = chip_000007
//! profile = S1S2
//! shape = 32 32
//! label = 3
//! geotransform = 500000.000000 10.000000 0.000000 4650000.000000 0.000000 -10.000000
//! stream.BGR = 3
//! stream.RED_EDGE = absent
//! ```

use std::fs;
use std::path::Path;

use super::{ChannelMap, MultimodalSample, Stream, StreamData};
use crate::error::{Error, Result};
use crate::geoposition::GeoTransform;
use crate::kv::KvMap;

const META_FILE: &str = "meta.txt";

/// Sidecar fields that are not part of the sample itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChipMeta {
    pub id: String,
    pub profile: Option<String>,
}

fn format_geotransform(gt: &GeoTransform) -> String {
    gt.to_gdal()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `sample` into `dir`, creating it if needed.
pub fn write_chip(dir: &Path, meta: &ChipMeta, sample: &MultimodalSample) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = format!("id = {}\n", meta.id);
    if let Some(p) = &meta.profile {
        text.push_str(&format!("profile = {p}\n"));
    }
    text.push_str(&format!("shape = {} {}\n", sample.height, sample.width));
    match sample.label {
        Some(l) => text.push_str(&format!("label = {l}\n")),
        None => text.push_str("label = none\n"),
    }
    match &sample.geotransform {
        Some(gt) => text.push_str(&format!("geotransform = {}\n", format_geotransform(gt))),
        None => text.push_str("geotransform = none\n"),
    }
    for s in Stream::ALL {
        match sample.stream(s) {
            Some(d) => {
                text.push_str(&format!("stream.{} = {}\n", s.name(), sample.channels.get(s)));
                let mut bytes = Vec::with_capacity((d.pixels.len() + d.validity.len()) * 4);
                for v in &d.pixels {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                for &ok in &d.validity {
                    bytes.extend_from_slice(&(if ok { 1.0f32 } else { 0.0 }).to_le_bytes());
                }
                let path = dir.join(format!("{}.f32", s.name()));
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
            None => text.push_str(&format!("stream.{} = absent\n", s.name())),
        }
    }
    let path = dir.join(META_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Format(format!("{key}: expected an integer, got {v:?}")))
}

/// Reads a chip written by [`write_chip`].
pub fn read_chip(dir: &Path) -> Result<(ChipMeta, MultimodalSample)> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let fields = KvMap::parse(&text).map_err(|e| e.with_context(path.display().to_string()))?;
    let field = |k: &str| fields.require(k).map_err(|e| e.with_context(path.display().to_string()));
    let id = field("id")?.to_string();
    let profile = fields.get("profile").map(str::to_string);
    let dims: Vec<&str> = field("shape")?.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Format(format!("shape: expected two integers, got {dims:?}")));
    }
    let (h, w) = (parse_usize("shape", dims[0])?, parse_usize("shape", dims[1])?);
    let mut sample = MultimodalSample::new(h, w);
    sample.label = match field("label")? {
        "none" => None,
        v => Some(parse_usize("label", v)?),
    };
    sample.geotransform = match field("geotransform")? {
        "none" => None,
        v => Some(v.parse()?),
    };
    let mut channels = ChannelMap::default();
    let hw = h * w;
    for s in Stream::ALL {
        let key = format!("stream.{}", s.name());
        let v = field(&key)?;
        if v == "absent" {
            continue;
        }
        let c = parse_usize(&key, v)?;
        channels.0[s.index()] = c;
        let apath = dir.join(format!("{}.f32", s.name()));
        let bytes = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
        if bytes.len() != (c + 1) * hw * 4 {
            return Err(Error::Format(format!(
                "{}: expected {} bytes, found {}",
                apath.display(),
                (c + 1) * hw * 4,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let validity = values[c * hw..].iter().map(|&v| v != 0.0).collect();
        let mut pixels = values;
        pixels.truncate(c * hw);
        sample.set_stream(s, Some(StreamData::new(pixels, validity)));
    }
    sample.channels = channels;
    sample.validate()?;
    Ok((ChipMeta { id, profile }, sample))
}
