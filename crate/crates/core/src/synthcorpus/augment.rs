//! Training-time augmentations and band/modality dropping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::modal_input::{clip_modalities, MultimodalSample, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Upper bound of the per-sample noise standard deviation.
    pub max_noise: f64,
    pub blur_sigma: f64,
    pub blur_prob: f64,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_noise: 0.2,
            blur_sigma: 1.1,
            blur_prob: 0.5,
            rotate: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_noise: 0.0,
            blur_sigma: 1.1,
            blur_prob: 0.0,
            rotate: false,
        }
    }
}

/// Additive Gaussian noise on every optical stream.
fn add_noise(sample: &mut MultimodalSample, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for s in Stream::OPTICAL {
        if let Some(d) = sample.stream_mut(s) {
            for v in &mut d.pixels {
                *v += normal.sample(rng) as f32;
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur of every optical channel, edges clamped.
pub fn gaussian_blur(sample: &MultimodalSample, sigma: f64) -> Result<MultimodalSample> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("blur sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    let mut tmp = vec![0.0f64; h * w];
    for s in Stream::OPTICAL {
        let Some(d) = out.stream_mut(s) else { continue };
        for plane in d.pixels.chunks_mut(h * w) {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += k * f64::from(plane[y * w + xx]);
                    }
                    tmp[y * w + x] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += k * tmp[yy * w + x];
                    }
                    plane[y * w + x] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Rotates a `[h, w]` plane by `k` quarter turns counter-clockwise.
fn rot90_plane<T: Copy>(src: &[T], h: usize, w: usize, k: usize) -> Vec<T> {
    match k % 4 {
        0 => src.to_vec(),
        // out is [w, h]: out[i][j] = src[j][w - 1 - i]
        1 => (0..w * h).map(|o| src[(o % h) * w + (w - 1 - o / h)]).collect(),
        2 => src.iter().rev().copied().collect(),
        // out[i][j] = src[h - 1 - j][i]
        _ => (0..w * h).map(|o| src[(h - 1 - o % h) * w + o / h]).collect(),
    }
}

/// Rotates every stream and validity mask by `k` quarter turns
/// counter-clockwise. The geotransform is left unchanged.
pub fn rot90(sample: &MultimodalSample, k: usize) -> MultimodalSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    if k % 2 == 1 {
        out.height = w;
        out.width = h;
    }
    for s in Stream::ALL {
        if let Some(d) = out.stream_mut(s) {
            d.pixels = d
                .pixels
                .chunks(h * w)
                .flat_map(|plane| rot90_plane(plane, h, w, k))
                .collect();
            d.validity = rot90_plane(&d.validity, h, w, k);
        }
    }
    out
}

/// Noise with a per-sample magnitude in `[0, max_noise]`, blur with
/// probability `blur_prob`, a random multiple of 90 degrees, then re-clip.
pub fn augment(sample: &MultimodalSample, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<MultimodalSample> {
    let std = if config.max_noise > 0.0 {
        rng.gen_range(0.0..config.max_noise)
    } else {
        0.0
    };
    let blur = config.blur_prob > 0.0 && rng.gen_bool(config.blur_prob);
    let k = if config.rotate { rng.gen_range(0..4) } else { 0 };
    let mut out = sample.clone();
    add_noise(&mut out, std, rng);
    if blur {
        out = gaussian_blur(&out, config.blur_sigma)?;
    }
    let out = rot90(&out, k);
    Ok(clip_modalities(&out))
}

/// Drops each present stream other than BGR with probability `drop_prob`.
/// When BGR is absent the first present optical stream is kept instead, so
/// at least one optical stream always survives.
pub fn drop_bands(sample: &MultimodalSample, drop_prob: f64, rng: &mut ChaCha8Rng) -> Result<MultimodalSample> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::contract(format!("drop probability {drop_prob} outside [0, 1)")));
    }
    let keep = if sample.is_available(Stream::Bgr) {
        Some(Stream::Bgr)
    } else {
        Stream::OPTICAL.into_iter().find(|&s| sample.is_available(s))
    };
    let mut out = sample.clone();
    for s in Stream::ALL {
        if Some(s) == keep || !sample.is_available(s) {
            continue;
        }
        if rng.gen_bool(drop_prob) {
            out.set_stream(s, None);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal_input::StreamData;
    use rand::SeedableRng;

    fn ramp(h: usize, w: usize) -> MultimodalSample {
        let mut s = MultimodalSample::new(h, w);
        let px: Vec<f32> = (0..3 * h * w).map(|i| i as f32 / (3 * h * w) as f32).collect();
        s.set_stream(Stream::Bgr, Some(StreamData::all_valid(px, h, w)));
        let mut v = vec![true; h * w];
        v[1] = false;
        s.set_stream(Stream::Elevation, Some(StreamData::new((0..h * w).map(|i| i as f32).collect(), v)));
        s
    }

    #[test]
    fn rot90_matches_index_oracle() {
        let s = ramp(3, 5);
        let r = rot90(&s, 1);
        assert_eq!((r.height, r.width), (5, 3));
        let src = &s.stream(Stream::Elevation).unwrap().pixels;
        let dst = &r.stream(Stream::Elevation).unwrap().pixels;
        // counter-clockwise: new (i, j) comes from old (j, w - 1 - i)
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(dst[i * 3 + j], src[j * 5 + (4 - i)]);
            }
        }
        assert_eq!(rot90(&rot90(&r, 1), 2), s);
        assert_eq!(rot90(&rot90(&s, 2), 2), s);
        assert_eq!(rot90(&rot90(&s, 3), 1), s);
    }

    #[test]
    fn identity_augment() {
        let s = ramp(4, 4);
        let out = augment(&s, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn blur_preserves_constant_plane() {
        let mut s = MultimodalSample::new(6, 6);
        s.set_stream(Stream::Nir, Some(StreamData::all_valid(vec![0.25; 36], 6, 6)));
        let b = gaussian_blur(&s, 1.1).unwrap();
        for v in &b.stream(Stream::Nir).unwrap().pixels {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn drop_keeps_bgr() {
        let s = ramp(4, 4);
        let out = drop_bands(&s, 0.999, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.is_available(Stream::Bgr));
        assert_eq!(out.stream(Stream::Bgr), s.stream(Stream::Bgr));
        assert!(drop_bands(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert_eq!(drop_bands(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), s);
    }
}
