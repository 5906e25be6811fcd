//! Image-space and geographic positional embeddings for patch tokens.
//!
//! Patch centroids are projected through the chip geotransform, rescaled
//! into the unit square by the global Web Mercator bounds and embedded
//! with sinusoids. The fixed 2D sin-cos embedding over patch row/column
//! indices is added alongside.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Six-term affine pixel-to-map transform in GDAL order.
///
/// Only axis-aligned grids are supported, so both rotation terms must be 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_width: f64,
    pub row_rotation: f64,
    pub origin_y: f64,
    pub col_rotation: f64,
    /// Usually negative: rows run north to south.
    pub pixel_height: f64,
}

impl GeoTransform {
    /// North-up transform without rotation.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_width: f64, pixel_height: f64) -> Self {
        GeoTransform {
            origin_x,
            pixel_width,
            row_rotation: 0.0,
            origin_y,
            col_rotation: 0.0,
            pixel_height,
        }
    }

    pub fn from_gdal(c: [f64; 6]) -> Self {
        GeoTransform {
            origin_x: c[0],
            pixel_width: c[1],
            row_rotation: c[2],
            origin_y: c[3],
            col_rotation: c[4],
            pixel_height: c[5],
        }
    }

    pub fn to_gdal(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_width,
            self.row_rotation,
            self.origin_y,
            self.col_rotation,
            self.pixel_height,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel_width == 0.0 || self.pixel_height == 0.0 {
            return Err(Error::contract("geotransform pixel size must be non-zero"));
        }
        if self.row_rotation != 0.0 || self.col_rotation != 0.0 {
            return Err(Error::contract(
                "rotated geotransforms are not supported",
            ));
        }
        if self.to_gdal().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("geotransform has non-finite terms"));
        }
        Ok(())
    }

    /// Map coordinate of a (fractional) pixel position.
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_width + row * self.row_rotation,
            self.origin_y + col * self.col_rotation + row * self.pixel_height,
        )
    }
}

/// Space separated, shortest round-trip decimal form of each term.
impl fmt::Display for GeoTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.to_gdal();
        write!(f, "{} {} {} {} {} {}", c[0], c[1], c[2], c[3], c[4], c[5])
    }
}

impl FromStr for GeoTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let terms = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("geotransform term {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let c: [f64; 6] = terms
            .try_into()
            .map_err(|v: Vec<f64>| Error::Format(format!("geotransform needs 6 terms, got {}", v.len())))?;
        Ok(GeoTransform::from_gdal(c))
    }
}

/// Patch layout of a chip. Tokens are ordered row-major over
/// `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        let g = PatchGrid {
            rows,
            cols,
            patch_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid of an `height x width` image; both must divide by `patch_size`.
    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::contract(format!(
                "image {height}x{width} is not divisible by patch size {patch_size}"
            )));
        }
        Self::new(height / patch_size, width / patch_size, patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::contract(format!("degenerate patch grid {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }
}

/// Projected extent used to rescale centroids into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MercatorBounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Default for MercatorBounds {
    fn default() -> Self {
        MercatorBounds {
            min_x: -20037508.34,
            max_x: 20037508.34,
            min_y: -20048966.10,
            max_y: 20048966.10,
        }
    }
}

impl MercatorBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_x < self.max_x) || !(self.min_y < self.max_y) {
            return Err(Error::contract(format!("degenerate Mercator bounds {self:?}")));
        }
        Ok(())
    }
}

/// Projected centre `(x, y)` of every patch, in token order.
///
/// For the patch at grid column `i` and row `j`:
/// `x = O_x + (i P + P/2) D_x` and `y = O_y + (j P + P/2) D_y`.
pub fn patch_centroids(gt: &GeoTransform, grid: &PatchGrid) -> Result<Vec<(f64, f64)>> {
    gt.validate()?;
    grid.validate()?;
    let p = grid.patch_size as f64;
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let cx = gt.origin_x + (col as f64 * p + p / 2.0) * gt.pixel_width;
            let cy = gt.origin_y + (row as f64 * p + p / 2.0) * gt.pixel_height;
            out.push((cx, cy));
        }
    }
    Ok(out)
}

/// Affine rescale of projected coordinates into `[0, 1]^2`, clamped.
pub fn normalize_mercator(coords: &[(f64, f64)], bounds: &MercatorBounds) -> Result<Vec<(f64, f64)>> {
    bounds.validate()?;
    let sx = bounds.max_x - bounds.min_x;
    let sy = bounds.max_y - bounds.min_y;
    Ok(coords
        .iter()
        .map(|&(x, y)| {
            (
                ((x - bounds.min_x) / sx).clamp(0.0, 1.0),
                ((y - bounds.min_y) / sy).clamp(0.0, 1.0),
            )
        })
        .collect())
}

/// Frequency of embedding index `k` in a `dim`-wide geo embedding.
pub fn geo_frequency(k: usize, dim: usize) -> f64 {
    10000f64.powf(-(k as f64) / (dim as f64 / 2.0))
}

fn require_div4(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::contract(format!(
            "embedding dimension {dim} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// `[L, dim]` sinusoidal embedding of normalized coordinates.
///
/// Entry `k` of a token at `(x, y)` cycles through `sin(x w_k)`,
/// `cos(x w_k)`, `sin(y w_k)`, `cos(y w_k)` as `k mod 4` goes 0..3, where
/// `w_k = 10000^(-k / (dim/2))` uses the raw index `k`.
pub fn geo_sincos_embedding(norm_coords: &[(f64, f64)], dim: usize) -> Result<Tensor> {
    require_div4(dim)?;
    let freqs: Vec<f64> = (0..dim).map(|k| geo_frequency(k, dim)).collect();
    let mut data = Vec::with_capacity(norm_coords.len() * dim);
    for &(x, y) in norm_coords {
        for (k, w) in freqs.iter().enumerate() {
            data.push(match k % 4 {
                0 => (x * w).sin(),
                1 => (x * w).cos(),
                2 => (y * w).sin(),
                _ => (y * w).cos(),
            });
        }
    }
    Tensor::new(vec![norm_coords.len(), dim], data)
}

/// Fixed `[L, dim]` 2D sin-cos embedding of patch grid positions.
///
/// The first `dim/2` entries encode the row index and the second half the
/// column index. Within each half, pair `m` holds
/// `(sin(pos w_m), cos(pos w_m))` with `w_m = 10000^(-m / (dim/4))`.
pub fn absolute_2d_sincos(grid: &PatchGrid, dim: usize) -> Result<Tensor> {
    require_div4(dim)?;
    grid.validate()?;
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|m| 10000f64.powf(-(m as f64) / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid.len() * dim);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            for pos in [row as f64, col as f64] {
                for w in &freqs {
                    data.push((pos * w).sin());
                    data.push((pos * w).cos());
                }
            }
        }
    }
    Tensor::new(vec![grid.len(), dim], data)
}

/// Geo embedding for a chip, or `None` when it has no geotransform.
pub fn chip_geo_embedding(
    gt: Option<&GeoTransform>,
    grid: &PatchGrid,
    bounds: &MercatorBounds,
    dim: usize,
) -> Result<Option<Tensor>> {
    let Some(gt) = gt else {
        return Ok(None);
    };
    let centroids = patch_centroids(gt, grid)?;
    let norm = normalize_mercator(&centroids, bounds)?;
    geo_sincos_embedding(&norm, dim).map(Some)
}

/// `tokens + abs_pe (+ geo_pe)` broadcast over the batch.
///
/// `abs_pe` is `[L, D]`. `geo_pe` may be `[L, D]` (shared) or `[B, L, D]`
/// (per sample).
pub fn combine_positional(tokens: &Tensor, abs_pe: &Tensor, geo_pe: Option<&Tensor>) -> Result<Tensor> {
    let shape = tokens.shape();
    let shape_err = |other: &Tensor| Error::Shape {
        op: "combine_positional",
        lhs: shape.to_vec(),
        rhs: other.shape().to_vec(),
    };
    if shape.len() != 3 || abs_pe.shape() != &shape[1..] {
        return Err(shape_err(abs_pe));
    }
    let per_sample = shape[1] * shape[2];
    let mut out = tokens.data().to_vec();
    for chunk in out.chunks_mut(per_sample) {
        chunk.iter_mut().zip(abs_pe.data()).for_each(|(x, p)| *x += p);
    }
    if let Some(geo) = geo_pe {
        if geo.shape() == &shape[1..] {
            for chunk in out.chunks_mut(per_sample) {
                chunk.iter_mut().zip(geo.data()).for_each(|(x, p)| *x += p);
            }
        } else if geo.shape() == shape {
            out.iter_mut().zip(geo.data()).for_each(|(x, p)| *x += p);
        } else {
            return Err(shape_err(geo));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_gt() -> GeoTransform {
        GeoTransform::north_up(500000.0, 4650000.0, 10.0, -10.0)
    }

    #[test]
    fn centroid_unit_resolution() {
        let gt = GeoTransform::north_up(0.0, 0.0, 1.0, 1.0);
        let grid = PatchGrid::new(1, 1, 2).unwrap();
        assert_eq!(patch_centroids(&gt, &grid).unwrap(), vec![(1.0, 1.0)]);
    }

    #[test]
    fn centroid_worked_transform() {
        let grid = PatchGrid::new(2, 3, 16).unwrap();
        let c = patch_centroids(&worked_gt(), &grid).unwrap();
        assert_eq!(c[0], (500080.0, 4649920.0));
        // column 2, row 1
        assert_eq!(c[grid.cols + 2], (500400.0, 4649760.0));
    }

    #[test]
    fn zero_pixel_size_rejected() {
        let gt = GeoTransform::north_up(0.0, 0.0, 0.0, -1.0);
        let grid = PatchGrid::new(1, 1, 2).unwrap();
        assert!(matches!(patch_centroids(&gt, &grid), Err(Error::Contract(_))));
    }

    #[test]
    fn rotated_transform_rejected() {
        let mut gt = worked_gt();
        gt.row_rotation = 0.5;
        let grid = PatchGrid::new(1, 1, 2).unwrap();
        assert!(patch_centroids(&gt, &grid).is_err());
    }

    #[test]
    fn mercator_anchors() {
        let b = MercatorBounds::default();
        let n = normalize_mercator(&[(-20037508.34, 0.0), (10018754.17, 0.0)], &b).unwrap();
        assert_eq!(n[0], (0.0, 0.5));
        assert_eq!(n[1].0, 0.75);
    }

    #[test]
    fn mercator_clamps_out_of_range() {
        let b = MercatorBounds::default();
        let n = normalize_mercator(&[(-3.0e7, 3.0e7)], &b).unwrap();
        assert_eq!(n[0], (0.0, 1.0));
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let b = MercatorBounds {
            min_x: 1.0,
            max_x: 1.0,
            ..MercatorBounds::default()
        };
        assert!(normalize_mercator(&[(0.0, 0.0)], &b).is_err());
    }

    #[test]
    fn geo_embedding_at_origin() {
        let e = geo_sincos_embedding(&[(0.0, 0.0)], 4).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn geo_frequency_by_index() {
        assert!((geo_frequency(3, 8) - 0.001).abs() < 1e-18);
        let e = geo_sincos_embedding(&[(0.0, 0.7)], 8).unwrap();
        assert_eq!(e.data()[3], (0.7 * geo_frequency(3, 8)).cos());
        let e = geo_sincos_embedding(&[(0.5, 0.0)], 4).unwrap();
        assert!((e.data()[0] - 0.479_425_538_604_203).abs() < 1e-12);
    }

    #[test]
    fn dim_not_multiple_of_four() {
        assert!(geo_sincos_embedding(&[(0.0, 0.0)], 6).is_err());
        assert!(absolute_2d_sincos(&PatchGrid::new(1, 1, 1).unwrap(), 6).is_err());
    }

    #[test]
    fn absolute_single_cell_pattern() {
        let e = absolute_2d_sincos(&PatchGrid::new(1, 1, 4).unwrap(), 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn combine_with_and_without_geo() {
        let tokens = Tensor::new(vec![2, 1, 4], (0..8).map(f64::from).collect()).unwrap();
        let abs = Tensor::vector(&[1.0, 1.0, 1.0, 1.0]).reshaped(&[1, 4]).unwrap();
        let zeros = Tensor::zeros(&[1, 4]);
        let a = combine_positional(&tokens, &abs, None).unwrap();
        let b = combine_positional(&tokens, &abs, Some(&zeros)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data()[5], 6.0);
        let bad = Tensor::zeros(&[2, 4]);
        assert!(combine_positional(&tokens, &abs, Some(&bad)).is_err());
    }

    #[test]
    fn geotransform_text_roundtrip() {
        let gt = GeoTransform::north_up(500000.123456789, -4650000.5, 0.1, -0.3);
        let back: GeoTransform = gt.to_string().parse().unwrap();
        assert_eq!(back, gt);
        assert!("1 2 3".parse::<GeoTransform>().is_err());
    }
}
