//! Corpus directories: chips plus a line-oriented manifest.
//!
//! ```text
//! <out>/manifest.txt
//! <out>/chips/<id>/meta.txt
//! <out>/chips/<id>/<STREAM>.f32
//! ```
//!
//! Manifest lines are `id profile split label gt0 .. gt5` with the
//! geotransform written to six decimals, or `none` in its place.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{synth_chip, Profile, ScenarioConfig};
use crate::error::{Error, Result};
use crate::geoposition::GeoTransform;
use crate::modal_input::{read_chip, write_chip, ChipMeta, MultimodalSample};
use crate::numerics::derive_seed;

const MANIFEST_FILE: &str = "manifest.txt";
const MIN_CHIPS_PER_SCENARIO: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub profile: Profile,
    pub split: Split,
    pub label: Option<usize>,
    pub geotransform: Option<GeoTransform>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

/// `(train, val, test)` sizes for `n` chips: validation and test take
/// `round(0.08 n)` and `round(0.02 n)`.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * 0.08).round() as usize;
    let test = (n as f64 * 0.02).round() as usize;
    (n - val - test, val, test)
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id profile split label geotransform\n");
        for e in &self.entries {
            let label = e.label.map_or("none".to_string(), |l| l.to_string());
            let gt = match &e.geotransform {
                Some(gt) => gt.to_gdal().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" "),
                None => "none".into(),
            };
            out.push_str(&format!("{} {} {} {} {}\n", e.id, e.profile, e.split, label, gt));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("manifest line {}: {line:?}", n + 1));
            if parts.len() != 5 && parts.len() != 10 {
                return Err(bad());
            }
            let label = match parts[3] {
                "none" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            };
            let geotransform = if parts.len() == 10 {
                Some(parts[4..].join(" ").parse()?)
            } else if parts[4] == "none" {
                None
            } else {
                return Err(bad());
            };
            entries.push(ManifestEntry {
                id: parts[0].to_string(),
                profile: parts[1].parse()?,
                split: parts[2].parse()?,
                label,
                geotransform,
            });
        }
        Ok(CorpusManifest { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| e.with_context(path.display().to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn chip_dir(root: &Path, id: &str) -> PathBuf {
        root.join("chips").join(id)
    }
}

/// Generates `count` chips per scenario, writes them and the manifest into
/// `out_dir`, and assigns splits by a seeded shuffle of all chips.
pub fn build_corpus(scenarios: &[(ScenarioConfig, usize)], seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    if scenarios.is_empty() {
        return Err(Error::contract("no scenarios given"));
    }
    for (sc, count) in scenarios {
        sc.validate()?;
        if *count < MIN_CHIPS_PER_SCENARIO {
            return Err(Error::contract(format!(
                "need at least {MIN_CHIPS_PER_SCENARIO} chips per scenario, got {count}"
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total: usize = scenarios.iter().map(|(_, c)| c).sum();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX])));
    let (_, n_val, n_test) = split_counts(total);
    let mut split = vec![Split::Train; total];
    for &i in &order[..n_val] {
        split[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        split[i] = Split::Test;
    }
    let mut entries = Vec::with_capacity(total);
    let mut index = 0;
    for (sc, count) in scenarios {
        for _ in 0..*count {
            let id = format!("chip_{index:06}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
            let (sample, _) = synth_chip(sc, &mut rng)?;
            let meta = ChipMeta {
                id: id.clone(),
                profile: Some(sc.profile.name().to_string()),
            };
            write_chip(&CorpusManifest::chip_dir(out_dir, &id), &meta, &sample)?;
            entries.push(ManifestEntry {
                id,
                profile: sc.profile,
                split: split[index],
                label: sample.label,
                geotransform: sample.geotransform,
            });
            index += 1;
        }
    }
    let manifest = CorpusManifest { entries };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Loads every chip of `split`, in manifest order.
pub fn load_split(root: &Path, manifest: &CorpusManifest, split: Split) -> Result<Vec<(ManifestEntry, MultimodalSample)>> {
    manifest
        .split(split)
        .map(|e| {
            let (_, sample) = read_chip(&CorpusManifest::chip_dir(root, &e.id))?;
            Ok((e.clone(), sample))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(100), (90, 8, 2));
        assert_eq!(split_counts(10), (9, 1, 0));
        assert_eq!(split_counts(256), (231, 20, 5));
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = CorpusManifest {
            entries: vec![
                ManifestEntry {
                    id: "a".into(),
                    profile: Profile::UavMsDsm,
                    split: Split::Val,
                    label: Some(2),
                    geotransform: Some(GeoTransform::north_up(10.0, -20.5, 0.5, -0.5)),
                },
                ManifestEntry {
                    id: "b".into(),
                    profile: Profile::S1S2,
                    split: Split::Train,
                    label: None,
                    geotransform: None,
                },
            ],
        };
        assert_eq!(CorpusManifest::parse(&m.to_text()).unwrap(), m);
        assert!(CorpusManifest::parse("a S1S2 train 1").is_err());
    }
}
