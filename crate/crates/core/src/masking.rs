//! Per-stream random token masking and the staged masking curriculum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modal_input::Branch;
use crate::numerics::{derive_seed, Tape, Tensor, Var};

/// Masking of one token stream for one batch.
///
/// `shuffle` lists token positions in draw order; its first
/// `visible_count()` entries are the visible tokens. `restore` is the
/// inverse permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub branch: Branch,
    pub ratio: f64,
    pub masked: Vec<bool>,
    pub shuffle: Vec<usize>,
    pub restore: Vec<usize>,
}

/// Tokens kept visible at `ratio`: `max(1, floor(len * (1 - ratio)))`.
pub fn visible_count(len: usize, ratio: f64) -> usize {
    ((len as f64 * (1.0 - ratio)).floor() as usize).clamp(1, len)
}

impl MaskPlan {
    /// Plan with a caller-chosen shuffle order.
    pub fn from_shuffle(branch: Branch, ratio: f64, shuffle: Vec<usize>) -> Result<Self> {
        check_ratio(ratio)?;
        let len = shuffle.len();
        if len == 0 {
            return Err(Error::contract("mask plan over zero tokens"));
        }
        let mut restore = vec![usize::MAX; len];
        for (rank, &p) in shuffle.iter().enumerate() {
            if p >= len || restore[p] != usize::MAX {
                return Err(Error::contract(format!("shuffle is not a permutation of 0..{len}")));
            }
            restore[p] = rank;
        }
        let keep = visible_count(len, ratio);
        let masked = restore.iter().map(|&r| r >= keep).collect();
        Ok(MaskPlan {
            branch,
            ratio,
            masked,
            shuffle,
            restore,
        })
    }

    pub fn len(&self) -> usize {
        self.shuffle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shuffle.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        visible_count(self.len(), self.ratio)
    }

    /// Visible token positions in shuffle order.
    pub fn visible(&self) -> &[usize] {
        &self.shuffle[..self.visible_count()]
    }

    pub fn masked_count(&self) -> usize {
        self.len() - self.visible_count()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("masking ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Uniformly random plan over `len` tokens.
pub fn sample_mask(len: usize, ratio: f64, branch: Branch, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if len == 0 {
        return Err(Error::contract("mask plan over zero tokens"));
    }
    let mut shuffle: Vec<usize> = (0..len).collect();
    shuffle.shuffle(rng);
    MaskPlan::from_shuffle(branch, ratio, shuffle)
}

/// Optical and auxiliary plans for one batch, each drawn from its own
/// generator seeded by `(seed, epoch, batch, branch)`.
pub fn batch_plans(len: usize, ratio: f64, seed: u64, epoch: usize, batch: usize) -> Result<[MaskPlan; 2]> {
    let draw = |branch: Branch, id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, batch as u64, id]));
        sample_mask(len, ratio, branch, &mut rng)
    };
    Ok([draw(Branch::Optical, 0)?, draw(Branch::Auxiliary, 1)?])
}

/// Visible tokens `[B, |V|, D]` of `tokens` `[B, L, D]`, in shuffle order.
pub fn apply_mask(tape: &mut Tape, tokens: Var, plan: &MaskPlan) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 3 || shape[1] != plan.len() {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: shape.to_vec(),
            rhs: vec![plan.len()],
        });
    }
    tape.gather(tokens, 1, plan.visible())
}

/// Scatters encoded visible tokens back to their positions and fills masked
/// positions with `mask_token` `[D']`.
pub fn restore_with_mask_tokens(tape: &mut Tape, latent: Var, plan: &MaskPlan, mask_token: Var) -> Result<Var> {
    let shape = tape.shape(latent).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "restore",
            lhs: shape,
            rhs: vec![plan.visible_count()],
        });
    }
    if shape[1] != plan.visible_count() {
        return Err(Error::contract(format!(
            "latent holds {} tokens but plan keeps {}",
            shape[1],
            plan.visible_count()
        )));
    }
    if tape.shape(mask_token) != [shape[2]] {
        return Err(Error::Shape {
            op: "restore mask token",
            lhs: tape.shape(mask_token).to_vec(),
            rhs: vec![shape[2]],
        });
    }
    let full = if plan.masked_count() == 0 {
        latent
    } else {
        let fill = tape.expand(mask_token, &[shape[0], plan.masked_count(), shape[2]])?;
        tape.concat(&[latent, fill], 1)?
    };
    tape.gather(full, 1, &plan.restore)
}

/// Masking ratio stages keyed by the epoch at which each starts.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub stages: Vec<(usize, f64)>,
}

/// Epoch horizon the default stage boundaries are laid out for.
pub const REFERENCE_EPOCHS: usize = 170;

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            stages: vec![(0, 0.25), (50, 0.50), (100, 0.75)],
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let Some(&(first, _)) = self.stages.first() else {
            return Err(Error::contract("empty curriculum schedule"));
        };
        if first != 0 {
            return Err(Error::contract("curriculum must start at epoch 0"));
        }
        if self.stages.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::contract("curriculum start epochs must increase strictly"));
        }
        for &(_, r) in &self.stages {
            check_ratio(r)?;
        }
        Ok(())
    }

    /// Stage boundaries rescaled from [`REFERENCE_EPOCHS`] to `epochs`,
    /// rounding down. Stages that collapse onto the same epoch keep only the
    /// later one.
    pub fn scaled(&self, epochs: usize) -> Self {
        if epochs == REFERENCE_EPOCHS {
            return self.clone();
        }
        let mut stages: Vec<(usize, f64)> = Vec::with_capacity(self.stages.len());
        for &(start, ratio) in &self.stages {
            let s = start * epochs / REFERENCE_EPOCHS;
            match stages.last_mut() {
                Some(last) if last.0 == s => last.1 = ratio,
                _ => stages.push((s, ratio)),
            }
        }
        CurriculumSchedule { stages }
    }
}

/// Ratio of the last stage starting at or before `epoch`.
pub fn curriculum_ratio(epoch: usize, schedule: &CurriculumSchedule) -> Result<f64> {
    schedule.validate()?;
    Ok(schedule
        .stages
        .iter()
        .take_while(|(start, _)| *start <= epoch)
        .last()
        .map(|&(_, r)| r)
        .expect("first stage starts at 0"))
}

/// Convenience for tests and tools: the tokens of `plan`'s visible set
/// gathered from a plain tensor.
pub fn gather_visible(tokens: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(tokens.clone());
    let out = apply_mask(&mut tape, v, plan)?;
    Ok(tape.value(out).clone())
}
