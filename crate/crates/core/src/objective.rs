//! Masked, validity-gated reconstruction loss.
//!
//! For sample `b` and group `g` every patch `p` gets the weight
//! `m = masked(p) * valid_fraction(b, g, p) * available(b, g)`. The group
//! loss is the `m`-weighted mean of squared patch errors (zero when no
//! weight remains). The optical and auxiliary branch losses average the
//! groups that have any weight, the sample loss is
//! `lambda_ms * L_ms + lambda_mod * L_mod`, and the batch loss is the mean
//! over samples.

use crate::error::{Error, Result};
use crate::geoposition::PatchGrid;
use crate::modal_input::{patch_validity_fraction, stream_patch_targets, Branch, MultimodalSample, Stream};
use crate::net::PretrainOutput;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ms: f64,
    pub lambda_mod: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ms: 1.0,
            lambda_mod: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ms >= 0.0 && self.lambda_mod >= 0.0) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(())
    }

    fn for_branch(&self, b: Branch) -> f64 {
        match b {
            Branch::Optical => self.lambda_ms,
            Branch::Auxiliary => self.lambda_mod,
        }
    }
}

/// Per-group losses of a batch.
///
/// `losses[g]` is a gate-weighted average of per-sample group losses and
/// `gates[g]` the batch mean of the per-sample averaging coefficient
/// (`1 / present groups in the branch`, zero when absent), so that
/// `total = lambda_ms * sum(gate * loss over optical) + lambda_mod * sum(... aux)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub losses: [f64; 6],
    pub gates: [f64; 6],
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> String {
        let groups: Vec<String> = Stream::ALL.iter().map(|s| s.name().to_lowercase()).collect();
        format!("epoch,step,ratio,{},total", groups.join(","))
    }

    pub fn csv_row(&self, epoch: usize, step: usize, ratio: f64) -> String {
        let losses: Vec<String> = self.losses.iter().map(|v| format!("{v:.9e}")).collect();
        format!("{epoch},{step},{ratio},{},{:.9e}", losses.join(","), self.total)
    }
}

/// `sum_p m_p ||pred_p - target_p||^2 / sum_p m_p`, or exactly 0 when
/// every weight is 0. Rows are all but the last axis.
pub fn masked_mse(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "masked_mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let cols = pred.shape().last().copied().unwrap_or(1).max(1);
    if weights.len() * cols != pred.len() {
        return Err(Error::Shape {
            op: "masked_mse",
            lhs: pred.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let denom: f64 = weights.iter().sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let (p, t) = (pred.data(), target.data());
    let mut num = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let sq: f64 = (0..cols).map(|c| (p[r * cols + c] - t[r * cols + c]).powi(2)).sum();
        num += w * sq;
    }
    Ok(num / denom)
}

/// Reconstruction targets and gating inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTargets {
    /// `[B, L, c P P]` per group in model units, indexed by [`Stream::index`].
    pub targets: [Tensor; 6],
    /// Valid pixel fraction per `(sample, patch)`, `B * L` per group.
    pub validity: [Vec<f64>; 6],
    pub availability: Vec<[bool; 6]>,
}

impl GroupTargets {
    pub fn from_batch(batch: &[MultimodalSample], grid: &PatchGrid) -> Result<Self> {
        let mut validity: [Vec<f64>; 6] = Default::default();
        for sample in batch {
            let fr = patch_validity_fraction(sample, grid.patch_size)?;
            for s in Stream::ALL {
                match &fr[s.index()] {
                    Some(f) => validity[s.index()].extend_from_slice(f),
                    None => validity[s.index()].resize(validity[s.index()].len() + grid.len(), 0.0),
                }
            }
        }
        let mut targets = Vec::with_capacity(6);
        for s in Stream::ALL {
            targets.push(stream_patch_targets(batch, s, grid)?);
        }
        Ok(GroupTargets {
            targets: targets.try_into().expect("six groups"),
            validity,
            availability: batch.iter().map(MultimodalSample::availability).collect(),
        })
    }
}

/// Builds the batch loss on the tape and its breakdown.
pub fn pretrain_loss(
    tape: &mut Tape,
    output: &PretrainOutput,
    targets: &GroupTargets,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let b = targets.availability.len();
    let l = output.grid.len();
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    let masked: [&[bool]; 2] = [&output.plans[0].masked, &output.plans[1].masked];
    // row weights m_bp and their per-sample sums
    let mut row_w: Vec<Vec<f64>> = Vec::with_capacity(6);
    let mut sums = vec![[0.0f64; 6]; b];
    for s in Stream::ALL {
        let gi = s.index();
        let mask = masked[side(s.branch())];
        if mask.len() != l || targets.validity[gi].len() != b * l {
            return Err(Error::Shape {
                op: "pretrain_loss",
                lhs: vec![b, l],
                rhs: vec![mask.len(), targets.validity[gi].len()],
            });
        }
        let mut w = vec![0.0; b * l];
        for bi in 0..b {
            if !targets.availability[bi][gi] {
                continue;
            }
            for p in 0..l {
                if mask[p] {
                    w[bi * l + p] = targets.validity[gi][bi * l + p];
                }
            }
            sums[bi][gi] = w[bi * l..(bi + 1) * l].iter().sum();
        }
        row_w.push(w);
    }
    // per-sample averaging coefficient of each present group
    let mut coef = vec![[0.0f64; 6]; b];
    for bi in 0..b {
        for branch in [Branch::Optical, Branch::Auxiliary] {
            let members = Stream::ALL.into_iter().filter(|s| s.branch() == branch);
            let present: Vec<usize> = members.map(Stream::index).filter(|&g| sums[bi][g] > 0.0).collect();
            for &g in &present {
                coef[bi][g] = 1.0 / present.len() as f64;
            }
        }
    }
    let mut total: Option<Var> = None;
    let mut losses = [0.0; 6];
    let mut gates = [0.0; 6];
    let mut total_value = 0.0;
    for s in Stream::ALL {
        let gi = s.index();
        let pred = output.recon[gi];
        let target = &targets.targets[gi];
        if tape.shape(pred) != target.shape() {
            return Err(Error::Shape {
                op: "pretrain_loss",
                lhs: tape.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let lambda = weights.for_branch(s.branch());
        let mut tape_w = vec![0.0; b * l];
        let mut weighted_sum = 0.0;
        let mut coef_sum = 0.0;
        for bi in 0..b {
            if coef[bi][gi] == 0.0 {
                continue;
            }
            let rows = bi * l..(bi + 1) * l;
            let group_loss = {
                let k = target.shape()[2];
                let pv = &tape.value(pred).data()[bi * l * k..(bi + 1) * l * k];
                let tv = &target.data()[bi * l * k..(bi + 1) * l * k];
                let mut num = 0.0;
                for p in 0..l {
                    let w = row_w[gi][bi * l + p];
                    if w != 0.0 {
                        let sq: f64 = (0..k).map(|c| (pv[p * k + c] - tv[p * k + c]).powi(2)).sum();
                        num += w * sq;
                    }
                }
                num / sums[bi][gi]
            };
            weighted_sum += coef[bi][gi] * group_loss;
            coef_sum += coef[bi][gi];
            total_value += lambda * coef[bi][gi] * group_loss / b as f64;
            let scale = lambda * coef[bi][gi] / (b as f64 * sums[bi][gi]);
            for r in rows {
                tape_w[r] = row_w[gi][r] * scale;
            }
        }
        if coef_sum > 0.0 {
            losses[gi] = weighted_sum / coef_sum;
            gates[gi] = coef_sum / b as f64;
        }
        if tape_w.iter().any(|&w| w != 0.0) {
            let t = tape.constant(target.clone());
            let term = tape.weighted_sq_err(pred, t, &tape_w)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((
        total,
        LossBreakdown {
            losses,
            gates,
            weights,
            total: total_value,
        },
    ))
}

/// `lambda_ms * L_ms + lambda_mod * L_mod` from a breakdown's gated terms.
pub fn total_loss(breakdown: &LossBreakdown, weights: LossWeights) -> f64 {
    Stream::ALL
        .iter()
        .map(|s| weights.for_branch(s.branch()) * breakdown.gates[s.index()] * breakdown.losses[s.index()])
        .sum()
}

fn side(b: Branch) -> usize {
    match b {
        Branch::Optical => 0,
        Branch::Auxiliary => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_mse_hand_values() {
        let pred = Tensor::new(vec![6, 1], vec![3.0; 6]).unwrap();
        let target = Tensor::new(vec![6, 1], vec![1.0; 6]).unwrap();
        let w = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(masked_mse(&pred, &target, &w).unwrap(), 4.0);
        assert_eq!(masked_mse(&pred, &target, &[0.0; 6]).unwrap(), 0.0);
        assert_eq!(masked_mse(&target, &target, &w).unwrap(), 0.0);
        assert!(masked_mse(&pred, &target, &[1.0; 5]).is_err());
    }

    #[test]
    fn total_from_branch_means() {
        // one sample: two optical groups with losses 0.25 and 0.75
        // (L_ms = 0.5) and one aux group with 0.25
        let mut losses = [0.0; 6];
        let mut gates = [0.0; 6];
        losses[0] = 0.25;
        losses[2] = 0.75;
        losses[4] = 0.25;
        gates[0] = 0.5;
        gates[2] = 0.5;
        gates[4] = 1.0;
        let w = LossWeights::default();
        let br = LossBreakdown {
            losses,
            gates,
            weights: w,
            total: 0.75,
        };
        assert_eq!(total_loss(&br, w), 0.75);
        let ms_only = LossWeights {
            lambda_ms: 1.0,
            lambda_mod: 0.0,
        };
        assert_eq!(total_loss(&br, ms_only), 0.5);
        let none = LossBreakdown {
            losses: [0.0; 6],
            gates: [0.0; 6],
            weights: w,
            total: 0.0,
        };
        assert_eq!(total_loss(&none, w), 0.0);
    }
}
