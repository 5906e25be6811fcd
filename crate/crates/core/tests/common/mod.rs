//! Builders shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use floro::geoposition::GeoTransform;
use floro::modal_input::{MultimodalSample, Stream, StreamData};
use floro::net::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy-shaped but narrow model for fast tests.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_dim: 16,
        encoder_depth: 2,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        ..ModelConfig::toy()
    }
}

/// Sample with every stream present, values drawn inside each clipping
/// range, a georeference near `(x0, y0)` and a few invalid pixels.
pub fn full_sample(size: usize, seed: u64) -> MultimodalSample {
    sample_with(size, seed, &Stream::ALL)
}

pub fn sample_with(size: usize, seed: u64, streams: &[Stream]) -> MultimodalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = size * size;
    let mut s = MultimodalSample::new(size, size);
    for &st in streams {
        let c = st.default_channels();
        let (lo, hi) = st.clip_range();
        let pixels: Vec<f32> = (0..c * hw).map(|_| rng.gen_range(lo..hi)).collect();
        let validity: Vec<bool> = (0..hw).map(|_| rng.gen_bool(0.9)).collect();
        s.set_stream(st, Some(StreamData::new(pixels, validity)));
    }
    let x0: f64 = rng.gen_range(-1.0e7..1.0e7);
    let y0: f64 = rng.gen_range(-1.0e7..1.0e7);
    s.geotransform = Some(GeoTransform::north_up(x0, y0, 10.0, -10.0));
    s.label = Some(rng.gen_range(0..4));
    s
}

/// Max of `|a - b|` over two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
