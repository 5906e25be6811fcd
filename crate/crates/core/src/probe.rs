//! Frozen-encoder evaluation: mean-pooled features, a linear softmax probe,
//! regression metrics, and the absolute versus geographic positional
//! encoding comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::modal_input::MultimodalSample;
use crate::net::{encoder_features, ModelConfig, PeOptions};
use crate::numerics::{derive_seed, ParamStore, Tape, Tensor};
use crate::trainer::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeMode {
    AbsOnly,
    AbsPlusGeo,
}

impl PeMode {
    pub fn options(self) -> PeOptions {
        match self {
            PeMode::AbsOnly => PeOptions::absolute_only(),
            PeMode::AbsPlusGeo => PeOptions::default(),
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::AbsOnly => "abs",
            PeMode::AbsPlusGeo => "geo",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(PeMode::AbsOnly),
            "geo" => Ok(PeMode::AbsPlusGeo),
            _ => Err(Error::Format(format!("unknown positional encoding mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub pe_mode: PeMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            pe_mode: PeMode::AbsPlusGeo,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Features of a batch of samples, `encoder_dim` values each.
///
/// Only the encoder parameters are read. Under [`PeMode::AbsPlusGeo`] a
/// sample without a geotransform falls back to the absolute encoding.
pub fn extract_features(
    samples: &[MultimodalSample],
    encoder: &ParamStore,
    model: &ModelConfig,
    pe_mode: PeMode,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 32;
    if pe_mode == PeMode::AbsPlusGeo {
        let missing = samples.iter().filter(|s| s.geotransform.is_none()).count();
        if missing > 0 {
            log::warn!("{missing} samples lack a geotransform; using the absolute encoding for them");
        }
    }
    let pe = pe_mode.options();
    let d = model.encoder_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut tape = Tape::new();
        let binds = tape.bind_frozen(encoder);
        let f = encoder_features(&mut tape, &binds, model, chunk, &pe)?;
        out.extend(tape.value(f).data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Per-feature mean and standard deviation of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::contract("no features to fit"))?;
        let n = features.len() as f64;
        let dim = first.len();
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for f in features {
            var.iter_mut()
                .zip(f.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        // constant features stay centred at zero instead of blowing up
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|f| f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub overall_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, F1 and confusion matrix of predictions.
///
/// Classes absent from both targets and predictions are left out of the
/// macro average.
pub fn classification_metrics(targets: &[usize], preds: &[usize], num_classes: usize) -> Result<ClassMetrics> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(Error::Shape {
            op: "classification_metrics",
            lhs: vec![targets.len()],
            rhs: vec![preds.len()],
        });
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in targets.iter().zip(preds) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Index {
                index: t.max(p),
                len: num_classes,
            });
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = Vec::with_capacity(num_classes);
    let mut f1_sum = 0.0;
    let mut counted = 0;
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let f1 = if actual + predicted == 0 {
            per_class_f1.push(0.0);
            continue;
        } else {
            2.0 * tp / (actual + predicted) as f64
        };
        per_class_f1.push(f1);
        f1_sum += f1;
        counted += 1;
    }
    Ok(ClassMetrics {
        overall_accuracy: correct as f64 / targets.len() as f64,
        macro_f1: f1_sum / counted.max(1) as f64,
        per_class_f1,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub pe_mode: PeMode,
    pub metrics: ClassMetrics,
    /// Validation overall accuracy after each probe epoch.
    pub epoch_accuracy: Vec<f64>,
}

impl ProbeReport {
    pub fn overall_accuracy(&self) -> f64 {
        self.metrics.overall_accuracy
    }

    /// `key = value` metrics file.
    pub fn metrics_text(&self) -> String {
        let mut m = KvMap::default();
        m.insert("pe_mode", self.pe_mode);
        m.insert("overall_accuracy", self.metrics.overall_accuracy);
        m.insert("macro_f1", self.metrics.macro_f1);
        for (c, f) in self.metrics.per_class_f1.iter().enumerate() {
            m.insert(format!("f1.class_{c:02}"), f);
        }
        m.insert("epochs", self.epoch_accuracy.len());
        if let (Some(first), Some(last)) = (self.epoch_accuracy.first(), self.epoch_accuracy.last()) {
            m.insert("epoch1_accuracy", first);
            m.insert("final_accuracy", last);
        }
        m.to_text()
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.metrics.confusion.len();
        let mut out = String::from("true\\pred");
        for c in 0..n {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.metrics.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,val_accuracy\n");
        for (e, a) in self.epoch_accuracy.iter().enumerate() {
            out.push_str(&format!("{},{a}\n", e + 1));
        }
        out
    }
}

fn linear_params(dim: usize, classes: usize) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("probe.weight", Tensor::zeros(&[dim, classes]));
    p.insert("probe.bias", Tensor::zeros(&[classes]));
    p
}

fn predict(params: &ParamStore, x: &[Vec<f64>]) -> Vec<usize> {
    let w = params.get("probe.weight").expect("probe weight");
    let b = params.get("probe.bias").expect("probe bias");
    let classes = b.len();
    x.iter()
        .map(|f| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..classes {
                let z = b.data()[c] + f.iter().enumerate().map(|(i, v)| v * w.data()[i * classes + c]).sum::<f64>();
                if z > best.1 {
                    best = (c, z);
                }
            }
            best.0
        })
        .collect()
}

/// Trains a linear softmax classifier on fixed features and reports its
/// validation performance. Weights start at zero, so the result depends on
/// the seed only through the minibatch order.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() || train_x.is_empty() || val_x.is_empty() {
        return Err(Error::contract("probe needs non-empty, aligned features and labels"));
    }
    let distinct: std::collections::BTreeSet<usize> = train_y.iter().copied().collect();
    if distinct.len() < 2 || num_classes < 2 {
        return Err(Error::contract("probe needs at least two classes in the training data"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::contract("probe epochs and batch size must be positive"));
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(val_x).any(|f| f.len() != dim) {
        return Err(Error::contract("feature vectors differ in length"));
    }
    let mut params = linear_params(dim, num_classes);
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3]));
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                xb.extend_from_slice(&train_x[i]);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let binds = tape.bind(&params);
            let x = tape.constant(Tensor::new(vec![chunk.len(), dim], xb)?);
            let logits = tape.matmul(x, binds.get("probe.weight")?)?;
            let logits = tape.add(logits, binds.get("probe.bias")?)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = tape.param_grads(&binds);
            adamw_step(&mut params, &grads, &mut opt)?;
        }
        let preds = predict(&params, val_x);
        let acc = preds.iter().zip(val_y).filter(|(p, t)| p == t).count() as f64 / val_y.len() as f64;
        epoch_accuracy.push(acc);
    }
    let metrics = classification_metrics(val_y, &predict(&params, val_x), num_classes)?;
    Ok(ProbeReport {
        pe_mode: config.pe_mode,
        metrics,
        epoch_accuracy,
    })
}

/// Standardized probe inputs: features of both splits scaled with the
/// statistics of the training split, plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub pe_mode: PeMode,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y: Vec<usize>,
}

impl FeatureSet {
    pub fn extract(
        train: &[MultimodalSample],
        val: &[MultimodalSample],
        encoder: &ParamStore,
        model: &ModelConfig,
        pe_mode: PeMode,
    ) -> Result<Self> {
        let labels = |s: &[MultimodalSample]| -> Result<Vec<usize>> {
            s.iter()
                .map(|x| x.label.ok_or_else(|| Error::contract("probe sample without a label")))
                .collect()
        };
        let (train_y, val_y) = (labels(train)?, labels(val)?);
        let tx = extract_features(train, encoder, model, pe_mode)?;
        let vx = extract_features(val, encoder, model, pe_mode)?;
        let st = Standardizer::fit(&tx)?;
        Ok(FeatureSet {
            pe_mode,
            train_x: st.apply(&tx),
            train_y,
            val_x: st.apply(&vx),
            val_y,
        })
    }

    /// Trains a probe; `config.pe_mode` is replaced by the mode the features
    /// were extracted with.
    pub fn probe(&self, num_classes: usize, config: &ProbeConfig) -> Result<ProbeReport> {
        let c = ProbeConfig {
            pe_mode: self.pe_mode,
            ..*config
        };
        linear_probe(&self.train_x, &self.train_y, &self.val_x, &self.val_y, num_classes, &c)
    }
}

/// Paired probes differing only in the positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seed: u64,
    pub abs: ProbeReport,
    pub geo: ProbeReport,
}

impl AblationReport {
    /// Geo minus absolute validation accuracy after the first probe epoch.
    pub fn epoch1_gap(&self) -> f64 {
        self.geo.epoch_accuracy[0] - self.abs.epoch_accuracy[0]
    }

    pub fn final_gap(&self) -> f64 {
        self.geo.overall_accuracy() - self.abs.overall_accuracy()
    }

    pub fn summary(&self) -> String {
        format!(
            "seed {} epoch 1: abs {:.4} geo {:.4} gap {:+.4}\nseed {} final:   abs {:.4} geo {:.4} gap {:+.4}\n",
            self.seed,
            self.abs.epoch_accuracy[0],
            self.geo.epoch_accuracy[0],
            self.epoch1_gap(),
            self.seed,
            self.abs.overall_accuracy(),
            self.geo.overall_accuracy(),
            self.final_gap()
        )
    }
}

/// Runs both encodings once per seed with identical data order and
/// hyperparameters. Features are extracted once per encoding.
pub fn ablation_run(
    train: &[MultimodalSample],
    val: &[MultimodalSample],
    encoder: &ParamStore,
    model: &ModelConfig,
    num_classes: usize,
    config: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<AblationReport>> {
    let abs = FeatureSet::extract(train, val, encoder, model, PeMode::AbsOnly)?;
    let geo = FeatureSet::extract(train, val, encoder, model, PeMode::AbsPlusGeo)?;
    seeds
        .iter()
        .map(|&seed| {
            let c = ProbeConfig { seed, ..*config };
            Ok(AblationReport {
                seed,
                abs: abs.probe(num_classes, &c)?,
                geo: geo.probe(num_classes, &c)?,
            })
        })
        .collect()
}

/// `(R^2, RMSE)` of predictions.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() || preds.len() < 2 {
        return Err(Error::contract("regression metrics need two or more aligned values"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("R^2 is undefined for constant targets".into()));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((1.0 - ss_res / ss_tot, (ss_res / n).sqrt()))
}

/// [`regression_metrics`] after averaging predictions and targets per chip.
pub fn chip_regression_metrics(preds: &[f64], targets: &[f64], chip_ids: &[&str]) -> Result<(f64, f64)> {
    if chip_ids.len() != preds.len() {
        return Err(Error::contract("one chip id per value required"));
    }
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((p, t), id) in preds.iter().zip(targets).zip(chip_ids) {
        let e = acc.entry(id).or_default();
        e.0 += p;
        e.1 += t;
        e.2 += 1;
    }
    let (cp, ct): (Vec<f64>, Vec<f64>) = acc.values().map(|(p, t, n)| (p / *n as f64, t / *n as f64)).unzip();
    regression_metrics(&cp, &ct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_anchors() {
        assert_eq!(regression_metrics(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), (1.0, 0.0));
        assert_eq!(regression_metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), (0.0, 1.0));
        assert!(matches!(regression_metrics(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Domain(_))));
        let (r2, _) = chip_regression_metrics(&[0.0, 2.0, 1.0, 1.0], &[0.0, 2.0, 1.0, 3.0], &["a", "a", "b", "b"]).unwrap();
        // chip means: preds (1, 1), targets (1, 2)
        assert_eq!(r2, 1.0 - 1.0 / 0.5);
    }

    #[test]
    fn metrics_consistency() {
        let m = classification_metrics(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.overall_accuracy, 0.75);
        let trace: usize = (0..3).map(|c| m.confusion[c][c]).sum();
        assert_eq!(trace as f64 / 4.0, m.overall_accuracy);
        assert_eq!(m.per_class_f1, vec![2.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn separable_probe() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.3]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let cfg = ProbeConfig {
            epochs: 30,
            lr: 0.05,
            ..ProbeConfig::default()
        };
        let r = linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert_eq!(r.overall_accuracy(), 1.0);
        assert!(linear_probe(&x, &vec![0; 40], &x, &y, 2, &cfg).is_err());
    }
}
