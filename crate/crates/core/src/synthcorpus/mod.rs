//! Synthetic multimodal chips with location-correlated labels.
//!
//! Chips are generated directly in the common input representation: optical
//! reflectance in `[0, 1]`, elevation in metres and SAR backscatter in dB.
//! Each source profile fixes which streams exist. Labels cross a latitude
//! band, read from the chip's georeference, with a texture class that shows
//! in the imagery.

mod augment;
mod corpus;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use augment::{augment, drop_bands, gaussian_blur, rot90, AugmentConfig};
pub use corpus::{build_corpus, load_split, split_counts, CorpusManifest, ManifestEntry, Split};

use crate::error::{Error, Result};
use crate::geoposition::GeoTransform;
use crate::modal_input::{clip_modalities, MultimodalSample, Stream, StreamData};

/// `10 log10(linear)`.
pub fn sar_to_db(linear: f64) -> Result<f64> {
    if !(linear > 0.0) || !linear.is_finite() {
        return Err(Error::Domain(format!("SAR backscatter must be positive, got {linear}")));
    }
    Ok(10.0 * linear.log10())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Web Mercator sphere radius in metres.
const EARTH_RADIUS: f64 = 6_378_137.0;

pub fn mercator_y_to_latitude(y: f64) -> f64 {
    (2.0 * (y / EARTH_RADIUS).exp().atan() - std::f64::consts::FRAC_PI_2).to_degrees()
}

pub fn latitude_to_mercator_y(lat: f64) -> f64 {
    EARTH_RADIUS * (std::f64::consts::FRAC_PI_4 + lat.to_radians() / 2.0).tan().ln()
}

/// Sensor configuration of a data source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// Sentinel-1/2 style: every optical group plus SAR.
    S1S2,
    /// High-resolution optical with elevation.
    HighresOptElev,
    /// UAV multispectral with a surface model.
    UavMsDsm,
    /// UAV RGB with a surface model.
    UavRgbDsm,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::S1S2, Profile::HighresOptElev, Profile::UavMsDsm, Profile::UavRgbDsm];

    pub fn name(self) -> &'static str {
        match self {
            Profile::S1S2 => "S1S2",
            Profile::HighresOptElev => "HIGHRES_OPT_ELEV",
            Profile::UavMsDsm => "UAV_MS_DSM",
            Profile::UavRgbDsm => "UAV_RGB_DSM",
        }
    }

    pub fn streams(self) -> &'static [Stream] {
        match self {
            Profile::S1S2 => &[Stream::Bgr, Stream::RedEdge, Stream::Nir, Stream::Swir, Stream::Sar],
            Profile::HighresOptElev => &[Stream::Bgr, Stream::Nir, Stream::Elevation],
            Profile::UavMsDsm => &[Stream::Bgr, Stream::RedEdge, Stream::Nir, Stream::Elevation],
            Profile::UavRgbDsm => &[Stream::Bgr, Stream::Elevation],
        }
    }

    pub fn availability(self) -> [bool; 6] {
        Stream::ALL.map(|s| self.streams().contains(&s))
    }

    /// Ground sampling distance in metres.
    pub fn pixel_size(self) -> f64 {
        match self {
            Profile::S1S2 => 10.0,
            Profile::HighresOptElev => 2.0,
            Profile::UavMsDsm | Profile::UavRgbDsm => 0.5,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown profile {s:?}")))
    }
}

/// Generation parameters for one source profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub size: usize,
    pub profile: Profile,
    /// Latitude range in degrees that chip centres are drawn from.
    pub lat_range: (f64, f64),
    /// Longitude range in degrees.
    pub lon_range: (f64, f64),
    pub lat_bands: usize,
    pub textures: usize,
    /// Probability that a chip carries a nodata region.
    pub nodata_prob: f64,
    /// Brightness shift per latitude band; keeps latitude faint in content.
    pub band_brightness: f64,
}

impl ScenarioConfig {
    pub fn new(profile: Profile, size: usize) -> Self {
        ScenarioConfig {
            size,
            profile,
            lat_range: (-80.0, 80.0),
            lon_range: (-150.0, 150.0),
            lat_bands: 4,
            textures: 2,
            nodata_prob: 0.2,
            band_brightness: 0.01,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.lat_bands * self.textures
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::contract("chip size must be at least 4"));
        }
        if !(self.lat_range.0 < self.lat_range.1 && self.lat_range.0 > -85.0 && self.lat_range.1 < 85.0) {
            return Err(Error::contract(format!("invalid latitude range {:?}", self.lat_range)));
        }
        if !(self.lon_range.0 < self.lon_range.1 && self.lon_range.0 >= -180.0 && self.lon_range.1 <= 180.0) {
            return Err(Error::contract(format!("invalid longitude range {:?}", self.lon_range)));
        }
        if self.lat_bands == 0 || self.textures == 0 {
            return Err(Error::contract("need at least one latitude band and texture"));
        }
        if !(0.0..=1.0).contains(&self.nodata_prob) {
            return Err(Error::contract("nodata_prob outside [0, 1]"));
        }
        Ok(())
    }

    /// Latitude band of a chip centre.
    pub fn lat_band(&self, lat: f64) -> usize {
        let (lo, hi) = self.lat_range;
        let t = ((lat - lo) / (hi - lo) * self.lat_bands as f64).floor();
        (t.max(0.0) as usize).min(self.lat_bands - 1)
    }

    /// Label implied by a geotransform and a texture class.
    pub fn label_for(&self, gt: &GeoTransform, texture: usize) -> usize {
        let (_, cy) = gt.apply(self.size as f64 / 2.0, self.size as f64 / 2.0);
        self.lat_band(mercator_y_to_latitude(cy)) * self.textures + texture
    }
}

/// Separable box filter of radius `r` with clamped edges, `passes` times.
fn box_smooth(field: &mut [f64], h: usize, w: usize, r: usize, passes: usize) {
    let mut tmp = vec![0.0; field.len()];
    let n = (2 * r + 1) as f64;
    for _ in 0..passes {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dx in 0..=2 * r {
                    let xx = (x + dx).saturating_sub(r).min(w - 1);
                    acc += field[y * w + xx];
                }
                tmp[y * w + x] = acc / n;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..=2 * r {
                    let yy = (y + dy).saturating_sub(r).min(h - 1);
                    acc += tmp[yy * w + x];
                }
                field[y * w + x] = acc / n;
            }
        }
    }
}

/// Smoothed white noise rescaled to zero mean, unit max-abs.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    box_smooth(&mut f, h, w, radius, 2);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let scale = f.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max).max(1e-12);
    f.iter().map(|v| (v - mean) / scale).collect()
}

/// Texture pattern of class `t`: coarse blobs for even classes, fine
/// stripes for odd ones, with the stripe period growing with `t`.
fn texture_field(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> Vec<f64> {
    if t % 2 == 0 {
        smooth_field(rng, h, w, 3 + t)
    } else {
        let period = 3.0 + t as f64;
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = angle.sin_cos();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (std::f64::consts::TAU * (x * c + y * s) / period + phase).sin()
            })
            .collect()
    }
}

/// Synthesizes one chip and returns it with its texture class.
pub fn synth_chip(scenario: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<(MultimodalSample, usize)> {
    scenario.validate()?;
    let n = scenario.size;
    let hw = n * n;
    let gsd = scenario.profile.pixel_size();
    // georeference: centre drawn in the lat/lon box, origin snapped to whole pixels
    let lat = rng.gen_range(scenario.lat_range.0..scenario.lat_range.1);
    let lon = rng.gen_range(scenario.lon_range.0..scenario.lon_range.1);
    let cx = EARTH_RADIUS * lon.to_radians();
    let cy = latitude_to_mercator_y(lat);
    let half = gsd * n as f64 / 2.0;
    let ox = ((cx - half) / gsd).round() * gsd;
    let oy = ((cy + half) / gsd).round() * gsd;
    let gt = GeoTransform::north_up(ox, oy, gsd, -gsd);
    let texture = rng.gen_range(0..scenario.textures);
    let (_, centre_y) = gt.apply(n as f64 / 2.0, n as f64 / 2.0);
    let band = scenario.lat_band(mercator_y_to_latitude(centre_y));

    let terrain = smooth_field(rng, n, n, 4);
    let base_elev: f64 = rng.gen_range(0.0..2500.0);
    let relief: f64 = rng.gen_range(50.0..600.0);
    let elevation: Vec<f64> = terrain.iter().map(|t| base_elev + relief * t).collect();
    let pattern = texture_field(rng, texture, n, n);
    let brightness = scenario.band_brightness * band as f64 + 0.03 * rng.sample::<f64, _>(StandardNormal);
    let vigor: f64 = rng.gen_range(0.3..0.7);

    // slope proxy for SAR roughness
    let slope: Vec<f64> = (0..hw)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            let dx = elevation[y * n + (x + 1).min(n - 1)] - elevation[y * n + x.saturating_sub(1)];
            let dy = elevation[(y + 1).min(n - 1) * n + x] - elevation[y.saturating_sub(1) * n + x];
            (dx * dx + dy * dy).sqrt() / (2.0 * gsd)
        })
        .collect();

    let mut noise = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let mut sample = MultimodalSample::new(n, n);
    let optical_value = |s: Stream, ch: usize, i: usize, noise: f64| -> f64 {
        let p = pattern[i];
        let e = (elevation[i] - 1500.0) / 3000.0;
        let v = match (s, ch) {
            (Stream::Bgr, c) => 0.12 + 0.04 * c as f64 + 0.06 * p - 0.03 * e,
            (Stream::RedEdge, _) => 0.25 + 0.10 * p * vigor + 0.02 * e,
            (Stream::Nir, _) => 0.30 + 0.25 * vigor + 0.12 * p,
            (Stream::Swir, c) => 0.22 - 0.04 * c as f64 - 0.08 * p + 0.05 * e,
            _ => unreachable!("optical stream"),
        };
        v + brightness + noise
    };
    for &s in scenario.profile.streams() {
        let c = s.default_channels();
        let mut pixels = Vec::with_capacity(c * hw);
        for ch in 0..c {
            for i in 0..hw {
                let v = match s {
                    Stream::Elevation => elevation[i] + noise(0.5),
                    Stream::Sar => {
                        let roughness = 0.02 + 0.05 * (1.0 + pattern[i]) + 0.4 * slope[i].min(1.0);
                        let pol = if ch == 0 { 1.0 } else { 0.2 };
                        let speckle = (0.15 * noise(1.0)).exp();
                        sar_to_db(pol * roughness * speckle)?
                    }
                    _ => optical_value(s, ch, i, noise(0.01)),
                };
                pixels.push(v as f32);
            }
        }
        sample.set_stream(s, Some(StreamData::all_valid(pixels, n, n)));
    }
    if rng.gen_bool(scenario.nodata_prob) {
        let rh = rng.gen_range(1..=n / 2);
        let rw = rng.gen_range(1..=n / 2);
        let y0 = rng.gen_range(0..=n - rh);
        let x0 = rng.gen_range(0..=n - rw);
        for s in Stream::OPTICAL {
            let c = sample.channels.get(s);
            if let Some(d) = sample.stream_mut(s) {
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        d.validity[y * n + x] = false;
                        for ch in 0..c {
                            d.pixels[ch * hw + y * n + x] = 0.0;
                        }
                    }
                }
            }
        }
    }
    sample.geotransform = Some(gt);
    sample.label = Some(band * scenario.textures + texture);
    Ok((clip_modalities(&sample), texture))
}
