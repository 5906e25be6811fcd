//! Unified multimodal sample representation and patch tokenization.
//!
//! A chip carries up to six co-registered streams: four optical spectral
//! groups (BGR, red-edge, NIR, SWIR) and two auxiliary modalities
//! (elevation, SAR). Each present stream has a per-pixel validity mask;
//! absent streams carry no data at all.

mod chip;

use std::fmt;
use std::str::FromStr;

pub use chip::{read_chip, write_chip, ChipMeta};

use crate::error::{Error, Result};
use crate::geoposition::{GeoTransform, PatchGrid};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Bgr,
    RedEdge,
    Nir,
    Swir,
    Elevation,
    Sar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Optical,
    Auxiliary,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::Bgr,
        Stream::RedEdge,
        Stream::Nir,
        Stream::Swir,
        Stream::Elevation,
        Stream::Sar,
    ];
    pub const OPTICAL: [Stream; 4] = [Stream::Bgr, Stream::RedEdge, Stream::Nir, Stream::Swir];
    pub const AUXILIARY: [Stream; 2] = [Stream::Elevation, Stream::Sar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Bgr => "BGR",
            Stream::RedEdge => "RED_EDGE",
            Stream::Nir => "NIR",
            Stream::Swir => "SWIR",
            Stream::Elevation => "ELEVATION",
            Stream::Sar => "SAR",
        }
    }

    pub fn branch(self) -> Branch {
        match self {
            Stream::Elevation | Stream::Sar => Branch::Auxiliary,
            _ => Branch::Optical,
        }
    }

    /// B2,B3,B4 / B5 / B8 / B11,B12 / DEM / VV,VH
    pub fn default_channels(self) -> usize {
        match self {
            Stream::Bgr => 3,
            Stream::RedEdge | Stream::Nir | Stream::Elevation => 1,
            Stream::Swir | Stream::Sar => 2,
        }
    }

    /// Valid value range: reflectance `[0, 1]`, elevation `[-500, 9000]` m,
    /// SAR backscatter `[-60, 20]` dB.
    pub fn clip_range(self) -> (f32, f32) {
        match self.branch() {
            Branch::Optical => (0.0, 1.0),
            Branch::Auxiliary if self == Stream::Elevation => (-500.0, 9000.0),
            Branch::Auxiliary => (-60.0, 20.0),
        }
    }

    /// Affine map of a clipped value onto `[0, 1]` using the clip range.
    /// Model inputs and reconstruction targets are expressed in these units.
    pub fn to_unit(self, v: f32) -> f64 {
        let (lo, hi) = self.clip_range();
        (f64::from(v) - f64::from(lo)) / (f64::from(hi) - f64::from(lo))
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown stream {s:?}")))
    }
}

/// Channel count of every stream, indexed by [`Stream::index`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelMap(pub [usize; 6]);

impl Default for ChannelMap {
    fn default() -> Self {
        ChannelMap(Stream::ALL.map(Stream::default_channels))
    }
}

impl ChannelMap {
    pub fn get(&self, s: Stream) -> usize {
        self.0[s.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&c| c == 0) {
            return Err(Error::contract(format!("channel counts must be positive: {:?}", self.0)));
        }
        Ok(())
    }
}

/// Pixels and validity of one present stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamData {
    /// `[channels, height, width]`, row-major.
    pub pixels: Vec<f32>,
    /// `[height, width]`; false marks nodata or cloud.
    pub validity: Vec<bool>,
}

impl StreamData {
    pub fn new(pixels: Vec<f32>, validity: Vec<bool>) -> Self {
        StreamData { pixels, validity }
    }

    pub fn all_valid(pixels: Vec<f32>, height: usize, width: usize) -> Self {
        StreamData {
            pixels,
            validity: vec![true; height * width],
        }
    }
}

/// One chip with all of its streams.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub height: usize,
    pub width: usize,
    pub channels: ChannelMap,
    /// Indexed by [`Stream::index`]; `None` means the stream is unavailable.
    pub streams: [Option<StreamData>; 6],
    pub geotransform: Option<GeoTransform>,
    pub label: Option<usize>,
}

impl MultimodalSample {
    pub fn new(height: usize, width: usize) -> Self {
        MultimodalSample {
            height,
            width,
            channels: ChannelMap::default(),
            streams: Default::default(),
            geotransform: None,
            label: None,
        }
    }

    pub fn stream(&self, s: Stream) -> Option<&StreamData> {
        self.streams[s.index()].as_ref()
    }

    pub fn stream_mut(&mut self, s: Stream) -> Option<&mut StreamData> {
        self.streams[s.index()].as_mut()
    }

    pub fn set_stream(&mut self, s: Stream, data: Option<StreamData>) {
        self.streams[s.index()] = data;
    }

    pub fn is_available(&self, s: Stream) -> bool {
        self.streams[s.index()].is_some()
    }

    pub fn availability(&self) -> [bool; 6] {
        Stream::ALL.map(|s| self.is_available(s))
    }

    pub fn validate(&self) -> Result<()> {
        self.channels.validate()?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("sample has zero extent"));
        }
        let hw = self.height * self.width;
        for s in Stream::ALL {
            if let Some(d) = self.stream(s) {
                if d.pixels.len() != self.channels.get(s) * hw || d.validity.len() != hw {
                    return Err(Error::Shape {
                        op: "sample stream",
                        lhs: vec![self.channels.get(s), self.height, self.width],
                        rhs: vec![d.pixels.len(), d.validity.len()],
                    });
                }
            }
        }
        if let Some(gt) = &self.geotransform {
            gt.validate()?;
        }
        Ok(())
    }

    /// Validates and additionally requires divisibility by `patch_size`.
    pub fn validate_for_patches(&self, patch_size: usize) -> Result<PatchGrid> {
        self.validate()?;
        PatchGrid::for_image(self.height, self.width, patch_size)
    }
}

/// Clamps every present stream to its valid range. Validity masks are
/// left untouched.
pub fn clip_modalities(sample: &MultimodalSample) -> MultimodalSample {
    let mut out = sample.clone();
    for s in Stream::ALL {
        let (lo, hi) = s.clip_range();
        if let Some(d) = out.stream_mut(s) {
            for v in &mut d.pixels {
                *v = v.clamp(lo, hi);
            }
        }
    }
    out
}

/// Offset of pixel `(py, px)` of channel `ch` inside a flattened patch.
#[inline]
fn patch_offset(ch: usize, py: usize, px: usize, p: usize) -> usize {
    (ch * p + py) * p + px
}

/// Flattens `[channels, H, W]` pixels into `[L, channels * P * P]` patch
/// vectors (channel-major inside each patch), tokens in row-major order.
pub fn patch_targets(pixels: &[f64], channels: usize, grid: &PatchGrid) -> Result<Tensor> {
    let (h, w, p) = (grid.height(), grid.width(), grid.patch_size);
    if pixels.len() != channels * h * w {
        return Err(Error::Shape {
            op: "patch_targets",
            lhs: vec![channels, h, w],
            rhs: vec![pixels.len()],
        });
    }
    let k = channels * p * p;
    let mut out = vec![0.0; grid.len() * k];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let base = (r * grid.cols + c) * k;
            for ch in 0..channels {
                for py in 0..p {
                    let src = (ch * h + r * p + py) * w + c * p;
                    let dst = base + patch_offset(ch, py, 0, p);
                    out[dst..dst + p].copy_from_slice(&pixels[src..src + p]);
                }
            }
        }
    }
    Tensor::new(vec![grid.len(), k], out)
}

/// Inverse of [`patch_targets`], batched: `[B, L, c P P]` to `[B, c, H, W]`.
pub fn unpatchify(patches: &Tensor, grid: &PatchGrid, channels: usize) -> Result<Tensor> {
    let p = grid.patch_size;
    let k = channels * p * p;
    let shape = patches.shape();
    if shape.len() != 3 || shape[1] != grid.len() || shape[2] != k {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: shape.to_vec(),
            rhs: vec![grid.len(), k],
        });
    }
    let (b, h, w) = (shape[0], grid.height(), grid.width());
    let src = patches.data();
    let mut out = vec![0.0; b * channels * h * w];
    for bi in 0..b {
        let img = &mut out[bi * channels * h * w..(bi + 1) * channels * h * w];
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let base = ((bi * grid.len()) + r * grid.cols + c) * k;
                for ch in 0..channels {
                    for py in 0..p {
                        let dst = (ch * h + r * p + py) * w + c * p;
                        let s0 = base + patch_offset(ch, py, 0, p);
                        img[dst..dst + p].copy_from_slice(&src[s0..s0 + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, h, w], out)
}

/// Fraction of valid pixels per patch for every present stream.
pub fn patch_validity_fraction(sample: &MultimodalSample, patch_size: usize) -> Result<[Option<Vec<f64>>; 6]> {
    let grid = sample.validate_for_patches(patch_size)?;
    let p = patch_size;
    let w = sample.width;
    let mut out: [Option<Vec<f64>>; 6] = Default::default();
    for s in Stream::ALL {
        let Some(d) = sample.stream(s) else { continue };
        let mut frac = Vec::with_capacity(grid.len());
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let mut valid = 0usize;
                for py in 0..p {
                    let row = (r * p + py) * w + c * p;
                    valid += d.validity[row..row + p].iter().filter(|&&v| v).count();
                }
                frac.push(valid as f64 / (p * p) as f64);
            }
        }
        out[s.index()] = Some(frac);
    }
    Ok(out)
}

/// Stream pixels in model units with invalid pixels zero-filled.
pub fn stream_unit_pixels(sample: &MultimodalSample, s: Stream) -> Option<Vec<f64>> {
    let d = sample.stream(s)?;
    let hw = sample.height * sample.width;
    Some(
        d.pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| if d.validity[i % hw] { s.to_unit(v) } else { 0.0 })
            .collect(),
    )
}

/// Patch inputs of one stream for a batch: `[B, L, (c + 1) P P]`, the
/// validity mask appended as a last channel. Absent streams are all zero.
pub fn stream_patch_inputs(batch: &[MultimodalSample], s: Stream, grid: &PatchGrid) -> Result<Tensor> {
    let c = batch
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?
        .channels
        .get(s);
    let k = (c + 1) * grid.patch_size * grid.patch_size;
    let mut data = Vec::with_capacity(batch.len() * grid.len() * k);
    for sample in batch {
        match stream_unit_pixels(sample, s) {
            Some(mut pix) => {
                let d = sample.stream(s).expect("present");
                pix.extend(d.validity.iter().map(|&v| if v { 1.0 } else { 0.0 }));
                data.extend_from_slice(patch_targets(&pix, c + 1, grid)?.data());
            }
            None => data.resize(data.len() + grid.len() * k, 0.0),
        }
    }
    Tensor::new(vec![batch.len(), grid.len(), k], data)
}

/// Reconstruction targets of one stream: `[B, L, c P P]` in model units.
/// Absent streams yield zeros.
pub fn stream_patch_targets(batch: &[MultimodalSample], s: Stream, grid: &PatchGrid) -> Result<Tensor> {
    let c = batch
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?
        .channels
        .get(s);
    let k = c * grid.patch_size * grid.patch_size;
    let mut data = Vec::with_capacity(batch.len() * grid.len() * k);
    for sample in batch {
        match stream_unit_pixels(sample, s) {
            Some(pix) => data.extend_from_slice(patch_targets(&pix, c, grid)?.data()),
            None => data.resize(data.len() + grid.len() * k, 0.0),
        }
    }
    Tensor::new(vec![batch.len(), grid.len(), k], data)
}

/// Tape handles of one stream's patch projection.
#[derive(Clone, Copy, Debug)]
pub struct StreamProjection {
    /// `[(c + 1) P P, D]`
    pub weight: Var,
    /// `[D]`
    pub bias: Var,
    /// `[D]`, used in place of data when the stream is absent.
    pub availability: Var,
}

#[derive(Clone, Debug)]
pub struct TokenBundle {
    /// `[B, L, D]`
    pub optical: Var,
    /// `[B, L, D]`
    pub aux: Var,
    pub grid: PatchGrid,
    pub availability: Vec<[bool; 6]>,
}

/// Projects every stream of the batch to `[B, L, D]` tokens and sums them
/// per branch. A sample lacking a stream receives that stream's learned
/// availability embedding instead of projected data.
pub fn patchify(
    tape: &mut Tape,
    batch: &[MultimodalSample],
    patch_size: usize,
    projections: &[StreamProjection; 6],
) -> Result<TokenBundle> {
    let first = batch.first().ok_or_else(|| Error::contract("empty batch"))?;
    let grid = first.validate_for_patches(patch_size)?;
    for s in batch {
        if (s.height, s.width) != (first.height, first.width) || s.channels != first.channels {
            return Err(Error::Shape {
                op: "patchify batch",
                lhs: vec![first.height, first.width],
                rhs: vec![s.height, s.width],
            });
        }
        s.validate()?;
    }
    let availability: Vec<[bool; 6]> = batch.iter().map(MultimodalSample::availability).collect();
    let b = batch.len();
    let mut optical = None;
    let mut aux = None;
    for s in Stream::ALL {
        let proj = &projections[s.index()];
        let present: Vec<bool> = availability.iter().map(|a| a[s.index()]).collect();
        let n_present = present.iter().filter(|&&p| p).count();
        let mut contrib = None;
        if n_present > 0 {
            let x = tape.constant(stream_patch_inputs(batch, s, &grid)?);
            let y = tape.matmul(x, proj.weight)?;
            let mut y = tape.add(y, proj.bias)?;
            if n_present < b {
                let gate = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
                let gate = tape.constant(Tensor::new(vec![b, 1, 1], gate)?);
                y = tape.mul(y, gate)?;
            }
            contrib = Some(y);
        }
        if n_present < b {
            let absent = present.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
            let absent = tape.constant(Tensor::new(vec![b, 1, 1], absent)?);
            let emb = tape.mul(proj.availability, absent)?;
            let emb = tape.expand(emb, &[b, grid.len(), tape.shape(proj.availability)[0]])?;
            contrib = Some(match contrib {
                Some(y) => tape.add(y, emb)?,
                None => emb,
            });
        }
        let slot = match s.branch() {
            Branch::Optical => &mut optical,
            Branch::Auxiliary => &mut aux,
        };
        let c = contrib.expect("stream contributes data or an embedding");
        *slot = Some(match *slot {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    Ok(TokenBundle {
        optical: optical.expect("optical streams"),
        aux: aux.expect("auxiliary streams"),
        grid,
        availability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(streams: &[Stream], h: usize, w: usize, fill: f32) -> MultimodalSample {
        let mut s = MultimodalSample::new(h, w);
        for &st in streams {
            let c = s.channels.get(st);
            s.set_stream(st, Some(StreamData::all_valid(vec![fill; c * h * w], h, w)));
        }
        s
    }

    #[test]
    fn clipping_ranges() {
        let mut s = sample_with(&[Stream::Bgr, Stream::Elevation, Stream::Sar], 2, 2, 0.5);
        s.stream_mut(Stream::Bgr).unwrap().pixels[0] = 1.5;
        s.stream_mut(Stream::Elevation).unwrap().pixels[0] = -600.0;
        s.stream_mut(Stream::Sar).unwrap().pixels[0] = -70.0;
        s.stream_mut(Stream::Sar).unwrap().validity[1] = false;
        let c = clip_modalities(&s);
        assert_eq!(c.stream(Stream::Bgr).unwrap().pixels[0], 1.0);
        assert_eq!(c.stream(Stream::Bgr).unwrap().pixels[1], 0.5);
        assert_eq!(c.stream(Stream::Elevation).unwrap().pixels[0], -500.0);
        assert_eq!(c.stream(Stream::Sar).unwrap().pixels[0], -60.0);
        assert_eq!(c.stream(Stream::Sar).unwrap().validity, s.stream(Stream::Sar).unwrap().validity);
        assert_eq!(clip_modalities(&c), c);
    }

    #[test]
    fn patch_count() {
        assert_eq!(PatchGrid::for_image(32, 32, 16).unwrap().len(), 4);
        assert_eq!(PatchGrid::for_image(256, 256, 16).unwrap().len(), 256);
        assert!(PatchGrid::for_image(30, 32, 16).is_err());
    }

    #[test]
    fn single_patch_is_reshape() {
        let grid = PatchGrid::new(1, 1, 2).unwrap();
        let px: Vec<f64> = (0..8).map(f64::from).collect();
        let t = patch_targets(&px, 2, &grid).unwrap();
        assert_eq!(t.data(), px.as_slice());
        let back = unpatchify(&t.reshaped(&[1, 1, 8]).unwrap(), &grid, 2).unwrap();
        assert_eq!(back.data(), px.as_slice());
    }

    #[test]
    fn checkerboard_layout_matches_loop_oracle() {
        let grid = PatchGrid::new(2, 2, 2).unwrap();
        let px: Vec<f64> = (0..16).map(f64::from).collect();
        let t = patch_targets(&px, 1, &grid).unwrap();
        // independent oracle: token (r, c) pixel (py, px) = image[(2r+py)*4 + 2c+px]
        for r in 0..2 {
            for c in 0..2 {
                for py in 0..2 {
                    for pxi in 0..2 {
                        let want = px[(2 * r + py) * 4 + 2 * c + pxi];
                        assert_eq!(t.data()[(r * 2 + c) * 4 + py * 2 + pxi], want);
                    }
                }
            }
        }
    }

    #[test]
    fn validity_fractions() {
        let mut s = sample_with(&[Stream::Bgr, Stream::Nir], 4, 4, 0.2);
        s.stream_mut(Stream::Nir).unwrap().validity = vec![false; 16];
        // top-left patch of BGR half valid
        let v = &mut s.stream_mut(Stream::Bgr).unwrap().validity;
        v[0] = false;
        v[1] = false;
        let f = patch_validity_fraction(&s, 2).unwrap();
        assert_eq!(f[Stream::Bgr.index()].as_ref().unwrap(), &vec![0.5, 1.0, 1.0, 1.0]);
        assert_eq!(f[Stream::Nir.index()].as_ref().unwrap(), &vec![0.0; 4]);
        assert!(f[Stream::Sar.index()].is_none());
    }

    #[test]
    fn stream_names_roundtrip() {
        for s in Stream::ALL {
            assert_eq!(s.name().parse::<Stream>().unwrap(), s);
        }
        assert!("LIDAR".parse::<Stream>().is_err());
    }
}
