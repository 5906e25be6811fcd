//! Synthetic corpus generation, chip files, splits and augmentation.

mod common;

use std::collections::BTreeMap;

use floro::modal_input::{read_chip, write_chip, ChipMeta, Stream};
use floro::synthcorpus::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn chip_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = common::full_sample(8, 3);
    s.set_stream(Stream::Swir, None);
    let meta = ChipMeta {
        id: "chip_7".into(),
        profile: Some("S1S2".into()),
    };
    write_chip(dir.path(), &meta, &s).unwrap();
    let (m, back) = read_chip(dir.path()).unwrap();
    assert_eq!(m, meta);
    for st in Stream::ALL {
        assert_eq!(back.stream(st), s.stream(st), "{}", st.name());
    }
    assert_eq!(back.label, s.label);
    let (a, b) = (back.geotransform.unwrap().to_gdal(), s.geotransform.unwrap().to_gdal());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn hundred_chips_split_and_stay_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let scen: Vec<_> = Profile::ALL.iter().map(|&p| (ScenarioConfig::new(p, 16), 25)).collect();
    let m = build_corpus(&scen, 1, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 100);
    let count = |s| m.split(s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (90, 8, 2));
    assert_eq!(CorpusManifest::read(dir.path()).unwrap(), m);

    let mut per_profile: BTreeMap<&str, usize> = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for (e, s) in load_split(dir.path(), &m, split).unwrap() {
            *per_profile.entry(e.profile.name()).or_default() += 1;
            assert_eq!(s.availability(), e.profile.availability());
            assert_eq!(s.label, e.label);
            for st in Stream::ALL {
                if let Some(d) = s.stream(st) {
                    let (lo, hi) = st.clip_range();
                    assert!(d.pixels.iter().all(|v| (lo..=hi).contains(v)), "{} {}", e.id, st.name());
                }
            }
        }
    }
    assert!(per_profile.values().all(|&n| n == 25));
}

#[test]
fn same_seed_same_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let scen = [(ScenarioConfig::new(Profile::UavMsDsm, 8), 12)];
    assert_eq!(build_corpus(&scen, 4, a.path()).unwrap(), build_corpus(&scen, 4, b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    assert_ne!(build_corpus(&scen, 5, c.path()).unwrap(), build_corpus(&scen, 4, a.path()).unwrap());
}

#[test]
fn too_few_chips_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_corpus(&[(ScenarioConfig::new(Profile::S1S2, 8), 9)], 0, dir.path()).is_err());
}

#[test]
fn labels_follow_latitude_band_and_texture() {
    let sc = ScenarioConfig::new(Profile::S1S2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = vec![0usize; sc.num_classes()];
    for _ in 0..400 {
        let (s, texture) = synth_chip(&sc, &mut rng).unwrap();
        let gt = s.geotransform.unwrap();
        let lat = mercator_y_to_latitude(gt.to_gdal()[3]);
        let label = s.label.unwrap();
        assert_eq!(label, sc.label_for(&gt, texture));
        assert!(lat > sc.lat_range.0 - 1.0 && lat < sc.lat_range.1 + 1.0);
        seen[label] += 1;
    }
    assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
}

#[test]
fn drop_frequency_matches_probability() {
    let s = common::full_sample(8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 4000;
    let mut dropped = [0usize; 6];
    for _ in 0..trials {
        let d = drop_bands(&s, 0.3, &mut rng).unwrap();
        assert!(d.is_available(Stream::Bgr));
        for st in Stream::ALL {
            dropped[st.index()] += usize::from(!d.is_available(st));
        }
    }
    assert_eq!(dropped[Stream::Bgr.index()], 0);
    // binomial std of the rate is about 0.007
    for st in Stream::ALL.into_iter().filter(|&s| s != Stream::Bgr) {
        let rate = dropped[st.index()] as f64 / trials as f64;
        assert!((rate - 0.3).abs() < 0.03, "{} {rate}", st.name());
    }
}

#[test]
fn drop_keeps_an_optical_stream_without_bgr() {
    let s = common::sample_with(8, 2, &[Stream::Nir, Stream::Swir, Stream::Sar]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        assert!(drop_bands(&s, 0.9, &mut rng).unwrap().is_available(Stream::Nir));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rotation_group_laws(seed: u64, k in 0usize..4) {
        let s = common::full_sample(8, seed);
        prop_assert_eq!(&rot90(&rot90(&s, 2), 2), &s);
        prop_assert_eq!(&rot90(&rot90(&s, k), 4 - k), &s);
        prop_assert_eq!(&rot90(&s, 4), &s);
    }

    #[test]
    fn augmentation_preserves_availability_and_ranges(seed: u64) {
        let s = common::full_sample(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&s, &AugmentConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(a.availability(), s.availability());
        prop_assert_eq!(a.geotransform, s.geotransform);
        prop_assert_eq!(a.label, s.label);
        for st in Stream::ALL {
            let (d, o) = (a.stream(st).unwrap(), s.stream(st).unwrap());
            let (lo, hi) = st.clip_range();
            prop_assert!(d.pixels.iter().all(|v| (lo..=hi).contains(v)));
            let mut va = d.validity.clone();
            let mut vo = o.validity.clone();
            va.sort_unstable();
            vo.sort_unstable();
            // rotation permutes pixels, so the number of valid ones is kept
            prop_assert_eq!(va, vo);
        }
    }

    #[test]
    fn sar_db_roundtrip(db in -60.0..20.0f64) {
        prop_assert!((sar_to_db(db_to_linear(db)).unwrap() - db).abs() < 1e-9);
    }
}
