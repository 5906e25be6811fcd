//! Geographic and image-space positional encodings against scalar loops.

use floro::geoposition::*;
use proptest::prelude::*;

/// Mercator extents written out independently of the library defaults.
const MAX_X: f64 = 20037508.34;
const MAX_Y: f64 = 20048966.10;

fn centroid_oracle(ox: f64, oy: f64, dx: f64, dy: f64, rows: usize, cols: usize, p: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let cx = ox + (c as f64 * p as f64 + p as f64 / 2.0) * dx;
            let cy = oy + (r as f64 * p as f64 + p as f64 / 2.0) * dy;
            out.push((cx, cy));
        }
    }
    out
}

fn norm_oracle(x: f64, y: f64) -> (f64, f64) {
    let nx = ((x + MAX_X) / (2.0 * MAX_X)).clamp(0.0, 1.0);
    let ny = ((y + MAX_Y) / (2.0 * MAX_Y)).clamp(0.0, 1.0);
    (nx, ny)
}

fn geo_oracle(nx: f64, ny: f64, dim: usize) -> Vec<f64> {
    let half = (dim / 2) as f64;
    (0..dim)
        .map(|k| {
            let w = 1.0 / 10000f64.powf(k as f64 / half);
            match k % 4 {
                0 => (nx * w).sin(),
                1 => (nx * w).cos(),
                2 => (ny * w).sin(),
                _ => (ny * w).cos(),
            }
        })
        .collect()
}

fn abs_oracle(row: usize, col: usize, dim: usize) -> Vec<f64> {
    let q = dim / 4;
    let mut v = Vec::with_capacity(dim);
    for pos in [row as f64, col as f64] {
        for m in 0..q {
            let w = 1.0 / 10000f64.powf(m as f64 / q as f64);
            v.push((pos * w).sin());
            v.push((pos * w).cos());
        }
    }
    v
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn hand_anchors() {
    let gt = GeoTransform::north_up(500000.0, 4000000.0, 10.0, -10.0);
    let c = patch_centroids(&gt, &PatchGrid::new(2, 2, 16).unwrap()).unwrap();
    assert_eq!(c[0].0, 500080.0);
    let n = normalize_mercator(&[(0.0, 0.0)], &MercatorBounds::default()).unwrap();
    assert_eq!(n[0], (0.5, 0.5));
    assert_eq!(geo_frequency(3, 8), 0.001);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn centroids_match_loop(ox in -1.0e7..1.0e7f64, oy in -1.0e7..1.0e7f64, dx in 0.1..100.0f64, dy in -100.0..-0.1f64,
                            rows in 1usize..5, cols in 1usize..5, p in 1usize..17) {
        let gt = GeoTransform::north_up(ox, oy, dx, dy);
        let got = patch_centroids(&gt, &PatchGrid::new(rows, cols, p).unwrap()).unwrap();
        let want = centroid_oracle(ox, oy, dx, dy, rows, cols, p);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!(close(g.0, w.0) && close(g.1, w.1), "{:?} vs {:?}", g, w);
        }
    }

    #[test]
    fn normalization_matches_loop(pts in prop::collection::vec((-2.5e7..2.5e7f64, -2.5e7..2.5e7f64), 1..20)) {
        let got = normalize_mercator(&pts, &MercatorBounds::default()).unwrap();
        for (g, &(x, y)) in got.iter().zip(&pts) {
            let w = norm_oracle(x, y);
            prop_assert!(close(g.0, w.0) && close(g.1, w.1));
            prop_assert!((0.0..=1.0).contains(&g.0) && (0.0..=1.0).contains(&g.1));
        }
    }

    #[test]
    fn geo_embedding_matches_loop(pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..8), q in 1usize..17) {
        let dim = 4 * q;
        let got = geo_sincos_embedding(&pts, dim).unwrap();
        prop_assert_eq!(got.shape(), &[pts.len(), dim]);
        for (row, &(x, y)) in got.data().chunks(dim).zip(&pts) {
            for (g, w) in row.iter().zip(geo_oracle(x, y, dim)) {
                prop_assert!(close(*g, w), "{} vs {}", g, w);
            }
        }
    }

    #[test]
    fn abs_embedding_matches_loop(rows in 1usize..9, cols in 1usize..9, q in 1usize..17) {
        let dim = 4 * q;
        let grid = PatchGrid::new(rows, cols, 4).unwrap();
        let got = absolute_2d_sincos(&grid, dim).unwrap();
        for (i, row) in got.data().chunks(dim).enumerate() {
            for (g, w) in row.iter().zip(abs_oracle(i / cols, i % cols, dim)) {
                prop_assert!(close(*g, w));
            }
        }
    }
}
