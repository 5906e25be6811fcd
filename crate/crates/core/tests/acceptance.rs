//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use floro::geoposition::*;
use floro::masking::*;
use floro::modal_input::{MultimodalSample, Stream};
use floro::net::*;
use floro::numerics::{grad_check_sampled, ParamStore, Tape, Tensor};
use floro::objective::*;
use floro::probe::{ablation_run, ProbeConfig};
use floro::synthcorpus::*;
use floro::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(t: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(t < limit, format!("{what} took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn c1_gradient() -> Outcome {
    let t = Instant::now();
    let model = ModelConfig::toy();
    let params = init_params(&model, 11).map_err(e2s)?;
    let batch = vec![common::full_sample(8, 1)];
    // two of four tokens masked in each branch so every head gets gradient
    let masking = Masking::Random {
        ratio: 0.5,
        seed: 3,
        epoch: 0,
        batch: 0,
    };
    let pe = PeOptions::default();
    // the loss is O(10): smaller steps lose more to round-off than they
    // gain in truncation error
    let report = grad_check_sampled(&params, 1e-3, 16, 17, |tape, binds| {
        let out = forward_pretrain(tape, binds, &model, &batch, &masking, &pe)?;
        let targets = GroupTargets::from_batch(&batch, &out.grid)?;
        Ok(pretrain_loss(tape, &out, &targets, LossWeights::default())?.0)
    })
    .map_err(e2s)?;
    let el = t.elapsed();
    let (worst, err) = report
        .per_parameter_errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .unwrap_or_default();
    ensure(
        report.max_relative_error < 1e-4,
        format!("max relative error {err:.3e} at {worst}"),
    )?;
    within(el, Duration::from_secs(60), "gradient check")?;
    Ok(format!(
        "max rel err {:.2e} over {} tensors in {:.1}s",
        report.max_relative_error,
        report.per_parameter_errors.len(),
        el.as_secs_f64()
    ))
}

fn c2_geo_oracles() -> Outcome {
    const MAX_X: f64 = 20037508.34;
    const MAX_Y: f64 = 20048966.10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs() / b.abs().max(1.0));
    for _ in 0..50 {
        let (ox, oy) = (rng.gen_range(-1e7..1e7), rng.gen_range(-1e7..1e7));
        let (dx, dy) = (rng.gen_range(0.1..60.0), -rng.gen_range(0.1..60.0));
        let (rows, cols, p) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..17));
        let grid = PatchGrid::new(rows, cols, p).map_err(e2s)?;
        let got = patch_centroids(&GeoTransform::north_up(ox, oy, dx, dy), &grid).map_err(e2s)?;
        for (i, g) in got.iter().enumerate() {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            track(g.0, ox + (c * p as f64 + p as f64 / 2.0) * dx);
            track(g.1, oy + (r * p as f64 + p as f64 / 2.0) * dy);
        }

        let pts: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen_range(-2.5e7..2.5e7), rng.gen_range(-2.5e7..2.5e7))).collect();
        let got = normalize_mercator(&pts, &MercatorBounds::default()).map_err(e2s)?;
        for (g, &(x, y)) in got.iter().zip(&pts) {
            track(g.0, ((x + MAX_X) / (2.0 * MAX_X)).clamp(0.0, 1.0));
            track(g.1, ((y + MAX_Y) / (2.0 * MAX_Y)).clamp(0.0, 1.0));
        }

        let dim = 4 * rng.gen_range(1..17);
        let (nx, ny): (f64, f64) = (rng.gen(), rng.gen());
        let got = geo_sincos_embedding(&[(nx, ny)], dim).map_err(e2s)?;
        for (k, g) in got.data().iter().enumerate() {
            let w = 1.0 / 10000f64.powf(k as f64 / (dim / 2) as f64);
            let want = [(nx * w).sin(), (nx * w).cos(), (ny * w).sin(), (ny * w).cos()][k % 4];
            track(*g, want);
        }

        let q = dim / 4;
        let got = absolute_2d_sincos(&grid, dim).map_err(e2s)?;
        for (i, row) in got.data().chunks(dim).enumerate() {
            let mut want = Vec::new();
            for pos in [(i / cols) as f64, (i % cols) as f64] {
                for m in 0..q {
                    let w = 1.0 / 10000f64.powf(m as f64 / q as f64);
                    want.extend([(pos * w).sin(), (pos * w).cos()]);
                }
            }
            row.iter().zip(&want).for_each(|(g, w)| track(*g, *w));
        }
    }
    ensure(worst <= 1e-12, format!("oracle deviation {worst:.3e}"))?;
    let gt = GeoTransform::north_up(500000.0, 4000000.0, 10.0, -10.0);
    let c = patch_centroids(&gt, &PatchGrid::new(1, 1, 16).map_err(e2s)?).map_err(e2s)?;
    ensure(c[0].0 == 500080.0, format!("C_x = {}", c[0].0))?;
    let n = normalize_mercator(&[(0.0, 0.0)], &MercatorBounds::default()).map_err(e2s)?;
    ensure(n[0].0 == 0.5, format!("N_x = {}", n[0].0))?;
    ensure(geo_frequency(3, 8) == 0.001, format!("omega_3 = {}", geo_frequency(3, 8)))?;
    Ok(format!("200 oracle comparisons, worst {worst:.1e}; anchors exact"))
}

fn c3_masked_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (rows, cols) = (rng.gen_range(1..20), rng.gen_range(1..10));
        let pred: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..rows)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen() })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..rows {
            let mut sq = 0.0;
            for c in 0..cols {
                sq += (pred[r * cols + c] - target[r * cols + c]).powi(2);
            }
            num += w[r] * sq;
            den += w[r];
        }
        let want = if den == 0.0 { 0.0 } else { num / den };
        let got = masked_mse(
            &Tensor::new(vec![rows, cols], pred).map_err(e2s)?,
            &Tensor::new(vec![rows, cols], target).map_err(e2s)?,
            &w,
        )
        .map_err(e2s)?;
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    ensure(worst <= 1e-12, format!("oracle deviation {worst:.3e}"))?;
    let p = Tensor::full(&[3, 2], 5.0);
    let zero = masked_mse(&p, &Tensor::zeros(&[3, 2]), &[0.0; 3]).map_err(e2s)?;
    ensure(zero == 0.0 && zero.is_sign_positive(), format!("zero-weight loss {zero}"))?;

    // reconstruction gradient at visible patches
    let model = common::small_model();
    let params = init_params(&model, 5).map_err(e2s)?;
    let batch = vec![common::full_sample(16, 4), common::full_sample(16, 5)];
    let mut tape = Tape::new();
    let binds = tape.bind(&params);
    let masking = Masking::Random {
        ratio: 0.5,
        seed: 9,
        epoch: 0,
        batch: 0,
    };
    let out = forward_pretrain(&mut tape, &binds, &model, &batch, &masking, &PeOptions::default()).map_err(e2s)?;
    let targets = GroupTargets::from_batch(&batch, &out.grid).map_err(e2s)?;
    let (loss, _) = pretrain_loss(&mut tape, &out, &targets, LossWeights::default()).map_err(e2s)?;
    tape.backward(loss).map_err(e2s)?;
    let l = out.grid.len();
    let (mut visible_rows, mut masked_nonzero) = (0, 0);
    for s in Stream::ALL {
        let plan = &out.plans[usize::from(s.branch() == floro::modal_input::Branch::Auxiliary)];
        let g = tape.grad(out.recon[s.index()]).ok_or("no gradient on reconstruction")?;
        let cols = g.len() / (batch.len() * l);
        for b in 0..batch.len() {
            for p in 0..l {
                let row = &g[(b * l + p) * cols..(b * l + p + 1) * cols];
                if plan.masked[p] {
                    masked_nonzero += usize::from(row.iter().any(|&v| v != 0.0));
                } else {
                    visible_rows += 1;
                    ensure(row.iter().all(|&v| v == 0.0), format!("{} visible patch {p} has gradient", s.name()))?;
                }
            }
        }
    }
    ensure(masked_nonzero > 0, "no masked patch received gradient")?;
    Ok(format!(
        "100 oracle cases, worst {worst:.1e}; empty mask gives 0; {visible_rows} visible rows with zero gradient"
    ))
}

fn c4_gating() -> Outcome {
    let model = common::small_model();
    let params = init_params(&model, 6).map_err(e2s)?;
    let no_sar: Vec<Stream> = Stream::ALL.into_iter().filter(|&s| s != Stream::Sar).collect();
    let batch = vec![common::sample_with(16, 7, &no_sar), common::sample_with(16, 8, &no_sar)];
    let masking = Masking::Random {
        ratio: 0.5,
        seed: 1,
        epoch: 0,
        batch: 0,
    };
    let loss_with = |params: &ParamStore, sar_target: Option<Tensor>| -> Result<f64, String> {
        let mut tape = Tape::new();
        let binds = tape.bind(params);
        let out = forward_pretrain(&mut tape, &binds, &model, &batch, &masking, &PeOptions::default()).map_err(e2s)?;
        let mut targets = GroupTargets::from_batch(&batch, &out.grid).map_err(e2s)?;
        if let Some(t) = sar_target {
            targets.targets[Stream::Sar.index()] = t;
        }
        Ok(pretrain_loss(&mut tape, &out, &targets, LossWeights::default()).map_err(e2s)?.1.total)
    };
    let base = loss_with(&params, None)?;
    ensure(base > 0.0, "baseline loss is zero")?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perturbed = params.clone();
    let prefix = format!("decoder.head.{}", Stream::Sar.name());
    let names: Vec<String> = perturbed.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect();
    ensure(!names.is_empty(), format!("no parameters under {prefix}"))?;
    for n in &names {
        perturbed
            .get_mut(n)
            .expect("listed name")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-5.0..5.0));
    }
    let head = loss_with(&perturbed, None)?;

    let l = PatchGrid::new(4, 4, model.patch_size).map_err(e2s)?.len();
    let cols = model.channels.get(Stream::Sar) * model.patch_size * model.patch_size;
    let junk = Tensor::new(
        vec![batch.len(), l, cols],
        (0..batch.len() * l * cols).map(|_| rng.gen_range(-100.0..100.0)).collect(),
    )
    .map_err(e2s)?;
    let pixels = loss_with(&params, Some(junk))?;
    ensure(head - base == 0.0, format!("SAR head perturbation moved loss by {:e}", head - base))?;
    ensure(pixels - base == 0.0, format!("SAR pixels moved loss by {:e}", pixels - base))?;
    Ok(format!("loss {base:.6} unchanged under SAR head and pixel perturbation"))
}

fn c5_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let len = rng.gen_range(1..=64);
        let ratio = [0.0, 0.25, 0.5, 0.75][i % 4];
        let plan = sample_mask(len, ratio, floro::modal_input::Branch::Optical, &mut rng).map_err(e2s)?;
        let keep = visible_count(len, ratio);
        let mut seen = vec![false; len];
        for (pos, &t) in plan.shuffle.iter().enumerate() {
            ensure(t < len && !seen[t], format!("plan {i}: shuffle is not a permutation"))?;
            seen[t] = true;
            ensure(plan.masked[t] == (pos >= keep), format!("plan {i}: mask disagrees with shuffle"))?;
        }
        ensure(
            plan.visible().len() == keep && plan.masked.iter().filter(|&&m| m).count() == len - keep,
            format!("plan {i}: counts"),
        )?;
        let tokens = Tensor::new(vec![1, len, 1], (0..len).map(|v| v as f64).collect()).map_err(e2s)?;
        let shuffled: Vec<f64> = plan.shuffle.iter().map(|&t| t as f64).collect();
        let restored: Vec<f64> = (0..len).map(|j| shuffled[plan.restore[j]]).collect();
        ensure(restored == tokens.data(), format!("plan {i}: restore roundtrip"))?;
    }
    let s = CurriculumSchedule::default();
    let r: Vec<f64> = [0, 50, 120].iter().map(|&e| curriculum_ratio(e, &s)).collect::<Result<_, _>>().map_err(e2s)?;
    ensure(r == [0.25, 0.5, 0.75], format!("curriculum {r:?}"))?;
    Ok("1000 plans exact; curriculum 0.25/0.50/0.75".into())
}

struct ToyRun {
    dir: tempfile::TempDir,
    config: TrainConfig,
    samples: Vec<MultimodalSample>,
    report: TrainReport,
    elapsed: Duration,
}

fn toy_run() -> Result<ToyRun, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let corpus = dir.path().join("corpus");
    let scenarios: Vec<_> = Profile::ALL.iter().map(|&p| (ScenarioConfig::new(p, 32), 64)).collect();
    let manifest = build_corpus(&scenarios, 7, &corpus).map_err(e2s)?;
    let samples: Vec<MultimodalSample> = load_split(&corpus, &manifest, Split::Train)
        .map_err(e2s)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let config = TrainConfig::toy();
    let t = Instant::now();
    let report = train(&samples, &config, Some(&dir.path().join("run")), None).map_err(e2s)?;
    Ok(ToyRun {
        dir,
        config,
        samples,
        report,
        elapsed: t.elapsed(),
    })
}

fn c6_training(run: &ToyRun) -> Outcome {
    let first = run.report.epochs.first().ok_or("no epochs")?.mean_total;
    let last = run.report.epochs.last().ok_or("no epochs")?.mean_total;
    let t = Instant::now();
    let rerun = train(&run.samples, &run.config, None, None).map_err(e2s)?;
    let rerun_time = t.elapsed();
    ensure(last <= 0.5 * first, format!("loss {first:.4} -> {last:.4}"))?;
    within(run.elapsed, Duration::from_secs(600), "training")?;
    ensure(
        rerun.checkpoint.to_bytes() == run.report.checkpoint.to_bytes(),
        "rerun checkpoint differs",
    )?;
    Ok(format!(
        "{} chips, loss {first:.4} -> {last:.4} (ratio {:.3}) in {:.0}s; rerun bit-identical ({:.0}s)",
        run.samples.len(),
        last / first,
        run.elapsed.as_secs_f64(),
        rerun_time.as_secs_f64()
    ))
}

fn c7_accumulation() -> Outcome {
    let model = common::small_model();
    let params = init_params(&model, 8).map_err(e2s)?;
    let samples: Vec<MultimodalSample> = (0..8).map(|i| common::full_sample(16, 100 + i)).collect();
    let plans = batch_plans(16, 0.5, 2, 0, 0).map_err(e2s)?;
    let masking = Masking::Plans(Box::new(plans));
    let pe = PeOptions::default();
    let micro: Vec<(&[MultimodalSample], Masking)> = samples.chunks(2).map(|c| (c, masking.clone())).collect();
    let (acc, _) = accumulate_gradients(&params, &model, &micro, &pe, LossWeights::default()).map_err(e2s)?;
    let (full, _) = batch_gradients(&params, &model, &samples, &masking, &pe, LossWeights::default()).map_err(e2s)?;
    let step = |grads: &BTreeMap<String, Tensor>| -> Result<ParamStore, String> {
        let mut p = params.clone();
        let mut st = floro::trainer::OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut p, grads, &mut st).map_err(e2s)?;
        Ok(p)
    };
    let (a, b) = (step(&acc)?, step(&full)?);
    let mut worst = 0.0f64;
    for (name, t) in a.iter() {
        worst = worst.max(t.max_abs_diff(b.get(name).ok_or("missing parameter")?));
    }
    let gworst = acc
        .iter()
        .map(|(k, g)| g.max_abs_diff(&full[k]))
        .fold(0.0, f64::max);
    ensure(worst <= 1e-10, format!("parameter deviation {worst:.3e}"))?;
    Ok(format!("4x2 vs 8: params within {worst:.1e}, grads within {gworst:.1e}"))
}

fn c8_checkpoints(run: &ToyRun) -> Outcome {
    let path = run.dir.path().join("roundtrip.ckpt");
    save_checkpoint(&path, &run.report.checkpoint).map_err(e2s)?;
    let loaded = load_checkpoint(&path).map_err(e2s)?;
    ensure(loaded == run.report.checkpoint, "loaded checkpoint differs")?;
    ensure(loaded.to_bytes() == run.report.checkpoint.to_bytes(), "re-serialized bytes differ")?;

    let k = 25;
    let mid = load_checkpoint(&epoch_checkpoint_path(&run.dir.path().join("run"), k)).map_err(e2s)?;
    ensure(mid.epoch == k, format!("epoch {k} checkpoint reports {}", mid.epoch))?;
    let resumed = train(&run.samples, &run.config, None, Some(mid)).map_err(e2s)?;
    ensure(
        resumed.checkpoint.to_bytes() == run.report.checkpoint.to_bytes(),
        format!("resume from epoch {k} diverges"),
    )?;

    let enc = load_checkpoint(&run.dir.path().join("run").join(ENCODER_FILE)).map_err(e2s)?;
    let leaked: Vec<&str> = enc.params.names().filter(|n| n.starts_with(DECODER_PREFIX)).collect();
    ensure(leaked.is_empty(), format!("encoder export holds {leaked:?}"))?;
    ensure(enc.optimizer.is_none(), "encoder export holds optimizer state")?;
    Ok(format!(
        "save/load exact; resume from epoch {k} bit-identical; export has {} encoder tensors",
        enc.params.len()
    ))
}

fn c9_ablation(run: &ToyRun) -> Outcome {
    let t = Instant::now();
    let corpus = run.dir.path().join("probe_corpus");
    let scenario = ScenarioConfig::new(Profile::S1S2, 32);
    let classes = scenario.num_classes();
    let manifest = build_corpus(&[(scenario, 1024)], 11, &corpus).map_err(e2s)?;
    let load = |split| -> Result<Vec<MultimodalSample>, String> {
        Ok(load_split(&corpus, &manifest, split).map_err(e2s)?.into_iter().map(|(_, s)| s).collect())
    };
    let (train_s, val_s) = (load(Split::Train)?, load(Split::Val)?);
    let enc = load_checkpoint(&run.dir.path().join("run").join(ENCODER_FILE)).map_err(e2s)?;
    let reports = ablation_run(&train_s, &val_s, &enc.params, &enc.model, classes, &ProbeConfig::default(), &[0, 1, 2])
        .map_err(e2s)?;
    let el = t.elapsed();
    let n = reports.len() as f64;
    let final_gap = reports.iter().map(|r| r.final_gap()).sum::<f64>() / n;
    let first_gap = reports.iter().map(|r| r.epoch1_gap()).sum::<f64>() / n;
    let abs = reports.iter().map(|r| r.abs.overall_accuracy()).sum::<f64>() / n;
    let geo = reports.iter().map(|r| r.geo.overall_accuracy()).sum::<f64>() / n;
    let detail = format!(
        "{classes} classes, {} train / {} val; OA abs {abs:.3} geo {geo:.3}; mean gap final {:+.1} pp, epoch 1 {:+.1} pp; {:.0}s",
        train_s.len(),
        val_s.len(),
        100.0 * final_gap,
        100.0 * first_gap,
        el.as_secs_f64()
    );
    ensure(final_gap >= 0.05, format!("final gap below 5 pp: {detail}"))?;
    within(el, Duration::from_secs(900), "ablation")?;
    Ok(detail)
}

fn c10_adamw() -> Outcome {
    let one = |v: f64| {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p
    };
    let grad = |g: f64| -> BTreeMap<String, Tensor> { [("w".to_string(), Tensor::scalar(g))].into() };
    let d = AdamWConfig::default();
    ensure(
        (d.lr, d.beta1, d.beta2, d.weight_decay) == (1e-4, 0.90, 0.95, 0.01),
        format!("defaults {d:?}"),
    )?;
    let mut p = one(0.7);
    let mut st = OptimizerState::new(d);
    adamw_step(&mut p, &grad(0.0), &mut st).map_err(e2s)?;
    let got = p.get("w").expect("w").data()[0];
    ensure(got == 0.7 * (1.0 - d.lr * d.weight_decay), format!("zero-gradient step gave {got}"))?;
    let mut p = one(1.0);
    let mut st = OptimizerState::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..d
    });
    adamw_step(&mut p, &grad(1.0), &mut st).map_err(e2s)?;
    let got = p.get("w").expect("w").data()[0];
    ensure((got - 0.9).abs() < 1e-6, format!("first step gave {got}"))?;
    Ok(format!("pure decay exact; first step {got:.9}; defaults match"))
}

fn c11_corpus() -> Outcome {
    ensure(sar_to_db(1.0).map_err(e2s)? == 0.0, "sar_to_db(1) != 0")?;
    ensure(sar_to_db(0.001).map_err(e2s)? == -30.0, "sar_to_db(0.001) != -30")?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let scenarios: Vec<_> = Profile::ALL.iter().map(|&p| (ScenarioConfig::new(p, 16), 25)).collect();
    let manifest = build_corpus(&scenarios, 3, dir.path()).map_err(e2s)?;
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| manifest.split(s).count())
        .collect();
    ensure(counts == [90, 8, 2], format!("split {counts:?}"))?;

    let mut pixels = 0usize;
    for split in [Split::Train, Split::Val, Split::Test] {
        for (entry, s) in load_split(dir.path(), &manifest, split).map_err(e2s)? {
            for st in Stream::ALL {
                let Some(d) = s.stream(st) else { continue };
                let (lo, hi) = st.clip_range();
                if let Some(v) = d.pixels.iter().find(|v| !(lo..=hi).contains(*v)) {
                    return Err(format!("{} {}: value {v} outside [{lo}, {hi}]", entry.id, st.name()));
                }
                pixels += d.pixels.len();
            }
            let twice = floro::synthcorpus::rot90(&floro::synthcorpus::rot90(&s, 2), 2);
            ensure(twice == s, format!("{}: rot180 is not an involution", entry.id))?;
        }
    }
    Ok(format!("sar anchors exact; 100 chips split 90/8/2; {pixels} pixels in range; rot180 involution"))
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
        Err(d) => println!("criterion {n:>2} {name}: FAIL ({d})"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient correctness", &c1_gradient());
    ok &= report(2, "geo encoding oracles", &c2_geo_oracles());
    ok &= report(3, "masked loss contract", &c3_masked_loss());
    ok &= report(4, "gating invariance", &c4_gating());
    ok &= report(5, "mask mechanics", &c5_masks());
    match toy_run() {
        Ok(run) => {
            ok &= report(6, "training sanity", &c6_training(&run));
            ok &= report(7, "accumulation equivalence", &c7_accumulation());
            ok &= report(8, "checkpoint roundtrip", &c8_checkpoints(&run));
            ok &= report(9, "positional encoding ablation", &c9_ablation(&run));
        }
        Err(e) => {
            for (n, name) in [(6, "training sanity"), (8, "checkpoint roundtrip"), (9, "positional encoding ablation")] {
                ok &= report(n, name, &Err(format!("toy run failed: {e}")));
            }
            ok &= report(7, "accumulation equivalence", &c7_accumulation());
        }
    }
    ok &= report(10, "adamw anchors", &c10_adamw());
    ok &= report(11, "corpus contracts", &c11_corpus());
    if !ok {
        std::process::exit(1);
    }
}
