//! Mask plan invariants, stream independence and the ratio curriculum.

use floro::masking::*;
use floro::modal_input::Branch;
use floro::numerics::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_plan(plan: &MaskPlan, len: usize, ratio: f64) -> Result<(), TestCaseError> {
    let keep = visible_count(len, ratio);
    prop_assert_eq!(plan.len(), len);
    prop_assert_eq!(plan.visible_count(), keep);
    prop_assert_eq!(plan.masked_count(), len - keep);
    prop_assert_eq!(plan.masked.iter().filter(|&&m| !m).count(), keep);
    // visible and masked partition the tokens
    let mut seen = vec![false; len];
    for (pos, &t) in plan.shuffle.iter().enumerate() {
        prop_assert!(!seen[t]);
        seen[t] = true;
        prop_assert_eq!(plan.masked[t], pos >= keep);
    }
    for i in 0..len {
        prop_assert_eq!(plan.shuffle[plan.restore[i]], i);
        prop_assert_eq!(plan.restore[plan.shuffle[i]], i);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plans_partition_and_restore(len in 1usize..=64, r in 0usize..4, seed: u64, epoch in 0usize..200, batch in 0usize..100) {
        let ratio = [0.0, 0.25, 0.5, 0.75][r];
        let [o, a] = batch_plans(len, ratio, seed, epoch, batch).unwrap();
        prop_assert_eq!(o.branch, Branch::Optical);
        prop_assert_eq!(a.branch, Branch::Auxiliary);
        check_plan(&o, len, ratio)?;
        check_plan(&a, len, ratio)?;
        // restoring the visible rows plus placeholders recovers token order
        let tokens = Tensor::new(vec![1, len, 1], (0..len).map(|i| i as f64).collect()).unwrap();
        let vis = gather_visible(&tokens, &o).unwrap();
        let want: Vec<f64> = o.visible().iter().map(|&i| i as f64).collect();
        prop_assert_eq!(vis.data(), want.as_slice());
    }
}

#[test]
fn branch_plans_are_independent() {
    // 2x2 table of (optical masked, auxiliary masked) over token draws
    let (len, ratio) = (16, 0.5);
    let mut table = [[0f64; 2]; 2];
    for batch in 0..2000 {
        let [o, a] = batch_plans(len, ratio, 7, 0, batch).unwrap();
        for i in 0..len {
            table[usize::from(o.masked[i])][usize::from(a.masked[i])] += 1.0;
        }
    }
    let n: f64 = table.iter().flatten().sum();
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let row: f64 = table[i].iter().sum();
            let col: f64 = table[0][j] + table[1][j];
            let e = row * col / n;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 1 degree of freedom, 1% level
    assert!(chi2 < 6.635, "chi-square {chi2}");
}

#[test]
fn plans_differ_between_branches_and_batches() {
    let [o, a] = batch_plans(64, 0.5, 1, 0, 0).unwrap();
    assert_ne!(o.shuffle, a.shuffle);
    let [o2, _] = batch_plans(64, 0.5, 1, 0, 1).unwrap();
    assert_ne!(o.shuffle, o2.shuffle);
}

#[test]
fn every_token_is_masked_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (len, trials) = (8, 8000);
    let mut counts = vec![0usize; len];
    for _ in 0..trials {
        let p = sample_mask(len, 0.75, Branch::Optical, &mut rng).unwrap();
        for (c, &m) in counts.iter_mut().zip(&p.masked) {
            *c += usize::from(m);
        }
    }
    // 6 of 8 masked: expectation 0.75 per token, std of the mean about 0.005
    for c in counts {
        assert!((c as f64 / trials as f64 - 0.75).abs() < 0.025);
    }
}

#[test]
fn default_curriculum_anchors() {
    let s = CurriculumSchedule::default();
    assert_eq!(curriculum_ratio(0, &s).unwrap(), 0.25);
    assert_eq!(curriculum_ratio(50, &s).unwrap(), 0.50);
    assert_eq!(curriculum_ratio(120, &s).unwrap(), 0.75);
    assert_eq!(curriculum_ratio(49, &s).unwrap(), 0.25);
    assert_eq!(curriculum_ratio(99, &s).unwrap(), 0.50);
}
