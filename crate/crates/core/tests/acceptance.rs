//! Exit-gate checks. Each test prints one `PASS`/`FAIL` line, written past
//! the harness capture so the lines show up in a plain `cargo test` run.
//! Tests share trained fixtures and run one at a time so wall-clock budgets
//! are measured without contention.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qi2::config::RunConfig;
use qi2::datapipe::toy::{write_toy_corpus, TOY_PIPELINE_SEED};
use qi2::datapipe::{route_failure, FailureEvidence, Pipeline, PipelineConfig, RouterThresholds, Track};
use qi2::distill::{clean_estimate, dmd_student_grad, score_from_velocity, student_generate};
use qi2::evalkit::{self, classify_shape, from_u8, shape_caption};
use qi2::flowmatch::{
    euler_from, fm_train_step, plan_stage, predict, run_stage, table2_stages, ClassCond, Example, FlowMlp, FlowMlpConfig, GaussianOracle, StageData, Task, TimeSampler,
    VelocityModel,
};
use qi2::mmdit::{loss_grad_check, msrope_apply, stream_layout, swiglu, DitCond, Mmdit, MmditConfig};
use qi2::promptforge::{apply_strategy, build_triplet, sample_fine_caption, verify_triplet};
use qi2::rlhf::{brightness_score, compute_advantages, rollout, IterationLog};
use qi2::tensor::{check_op_suite, checkpoint, Adam, Graph, Precision, Tensor};
use qi2::text::token_count;
use qi2::vae::{Vae, VaeConfig};
use qi2::workflow::{self, stream, LatentStats, Sampler};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(crit: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {crit:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct VaeRun {
    vae: Vae,
    losses: Vec<f64>,
    secs: f64,
}

fn vae_run() -> &'static VaeRun {
    static RUN: OnceLock<VaeRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let mut losses = Vec::with_capacity(cfg.vae_steps);
        let t0 = Instant::now();
        let vae = workflow::train_vae(&cfg, |s| losses.push(s.total)).unwrap();
        VaeRun { vae, losses, secs: t0.elapsed().as_secs_f64() }
    })
}

struct DitRun {
    dit: Mmdit,
    stats: LatentStats,
    secs: f64,
}

fn dit_run() -> &'static DitRun {
    static RUN: OnceLock<DitRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let vae = &vae_run().vae;
        let t0 = Instant::now();
        let (dit, stats) = workflow::train_dit(&cfg, vae, |_, _| {}).unwrap();
        DitRun { dit, stats, secs: t0.elapsed().as_secs_f64() }
    })
}

#[test]
fn c01_gradient_soundness() {
    let _g = serial();
    let cfg = RunConfig::default();
    let t0 = Instant::now();
    let ops = check_op_suite(cfg.gradcheck_points, 0, cfg.gradcheck_eps).unwrap();
    let model = loss_grad_check(0, cfg.gradcheck_eps).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
    let pass = worst < 1e-4 && model.max_rel_err < 1e-4 && secs < 120.0;
    report(
        1,
        "gradient soundness",
        pass,
        format!("{} ops, worst {worst_op} {worst:.2e}; 2-block loss {:.2e} over {} coords; {secs:.1}s", ops.len(), model.max_rel_err, model.coords_checked),
    );
    assert!(pass);
}

fn rotary_logits(q: &Tensor, k: &Tensor, pos: &[(i64, i64)]) -> Tensor {
    let [l, _, dh] = *q.shape() else { unreachable!() };
    let mut g = Graph::with_precision(Precision::F64);
    let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
    let qr = msrope_apply(&mut g, qv, pos, 10_000.0).unwrap();
    let kr = msrope_apply(&mut g, kv, pos, 10_000.0).unwrap();
    let qr = g.reshape(qr, &[l, dh]).unwrap();
    let kr = g.reshape(kr, &[l, dh]).unwrap();
    let kt = g.transpose(kr).unwrap();
    let out = g.matmul(qr, kt).unwrap();
    g.value(out).clone()
}

#[test]
fn c02_architecture_invariants() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(2);
    let pos = stream_layout(Some((4, 4)), &[(4, 4)], 6).unwrap().positions;
    let mut drift = 0.0f64;
    for (dr, dc) in [(1, 0), (0, 1), (7, -3), (-11, 25)] {
        let q = Tensor::randn(&[pos.len(), 1, 16], 1.0, &mut r);
        let k = Tensor::randn(&[pos.len(), 1, 16], 1.0, &mut r);
        let shifted: Vec<_> = pos.iter().map(|&(a, b)| (a + dr, b + dc)).collect();
        drift = drift.max(rotary_logits(&q, &k, &pos).max_abs_diff(&rotary_logits(&q, &k, &shifted)));
    }

    let model = Mmdit::new(MmditConfig::default(), (4, 4), 0).unwrap();
    let mods = model.modulation_params();
    let store = model.params();
    let mods_zero = store.ids().filter(|&id| mods.contains(&store.name(id))).all(|id| store.get(id).data().iter().all(|v| *v == 0.0));
    let mod_bias = store.names().iter().any(|n| n.contains(".mod") && n.contains("bias"));
    let x = Tensor::randn(&[model.config().latent_c, 4, 4], 1.0, &mut r);
    let cond = DitCond::prompt("a red circle", model.config().vocab);
    let time_drift = model.forward(&x, 0.1, &cond, false).unwrap().max_abs_diff(&model.forward(&x, 0.9, &cond, false).unwrap());

    let mut g = Graph::with_precision(Precision::F64);
    let one = g.constant(Tensor::filled(&[1, 1], 1.0));
    let y = swiglu(&mut g, one, one, one).unwrap();
    let swiglu_one = g.value(y).data()[0];

    let secs = t0.elapsed().as_secs_f64();
    let pass = drift < 1e-10 && mods_zero && !mods.is_empty() && !mod_bias && time_drift == 0.0 && (swiglu_one - 0.731059).abs() < 1e-6 && secs < 60.0;
    report(
        2,
        "architecture invariants",
        pass,
        format!(
            "rotary drift {drift:.1e}; {} modulation weights zero at init: {mods_zero}, bias present: {mod_bias}; init output change across t {time_drift:.1e}; swiglu(1) {swiglu_one:.6}; {secs:.2}s",
            mods.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c03_channel_bottleneck_rule() {
    let _g = serial();
    let f8 = VaeConfig::bottleneck_preserving(8);
    let f16 = VaeConfig::bottleneck_preserving(16);
    let mut broken = VaeConfig::bottleneck_preserving(16);
    broken.c = 16;
    let rejected = matches!(broken.validate(), Err(qi2::Error::Config(_)));
    broken.preserve_bottleneck = false;
    let free_ok = broken.validate().is_ok();
    let pass = f8.c == 16 && f16.c == 64 && f8.validate().is_ok() && f16.validate().is_ok() && rejected && free_ok;
    report(3, "channel bottleneck", pass, format!("f8 -> c{}, f16 -> c{}; f16c16 with flag rejected: {rejected}, without flag accepted: {free_ok}", f8.c, f16.c));
    assert!(pass);
}

#[test]
fn c04_toy_vae_training() {
    let _g = serial();
    let cfg = RunConfig::default();
    let run = vae_run();
    let eval = workflow::vae_eval_images(&cfg).unwrap();
    let (psnr, ssim) = workflow::reconstruction_metrics(&run.vae, &eval.images()).unwrap();
    let window = 200;
    let head = &run.losses[..2000.min(run.losses.len())];
    let ma: Vec<f64> = head.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let rises = ma.windows(2).filter(|p| p[1] >= p[0]).count();
    let pass = psnr >= 24.0 && ssim >= 0.80 && run.losses.len() == 5000 && run.secs < 900.0 && rises == 0;
    report(
        4,
        "toy VAE training",
        pass,
        format!(
            "PSNR {psnr:.2} dB, SSIM {ssim:.4} on {} held-out glyphs after {} steps in {:.0}s; 200-step moving average {:.4} -> {:.4}, {rises} non-decreasing points of {}",
            eval.items.len(),
            run.losses.len(),
            run.secs,
            ma.first().copied().unwrap_or(f64::NAN),
            ma.last().copied().unwrap_or(f64::NAN),
            ma.len().saturating_sub(1)
        ),
    );
    assert!(pass);
}

#[test]
fn c05_toy_t2i_training() {
    let _g = serial();
    let cfg = RunConfig::default();
    let vae = &vae_run().vae;
    let run = dit_run();
    let t0 = Instant::now();
    let mut r = workflow::stream_rng(&cfg, stream::SAMPLE);
    let labels: Vec<usize> = (0..200).map(|i| i % cfg.data_classes).collect();
    let mut correct = 0;
    for chunk in labels.chunks(25) {
        let prompts: Vec<String> = chunk.iter().map(|&l| shape_caption(l)).collect();
        let imgs = workflow::sample_images(&cfg, vae, &run.dit, &run.stats, &prompts, Sampler::Euler { steps: 50, cfg: 3.0 }, &mut r).unwrap();
        for (img, &l) in imgs.iter().zip(chunk) {
            if classify_shape(img, cfg.data_classes).unwrap().label == Some(l) {
                correct += 1;
            }
        }
    }
    let sample_secs = t0.elapsed().as_secs_f64();
    let acc = correct as f64 / labels.len() as f64;
    let pass = acc >= 0.9 && run.secs < 1200.0;
    report(5, "toy T2I training", pass, format!("{correct}/200 classified correctly ({:.1}%); training {:.0}s, sampling {sample_secs:.0}s", 100.0 * acc, run.secs));
    assert!(pass);
}

fn stage_data(resolutions: &[usize]) -> StageData<ClassCond> {
    let mut d = StageData::default();
    let mut r = rng(6);
    for i in 0..64 {
        let c = i % 2;
        let mut x = Tensor::randn(&[2], 0.3, &mut r);
        x.data_mut()[0] += if c == 0 { -1.5 } else { 1.5 };
        for &res in resolutions {
            for task in [Task::T2i, Task::Ti2i] {
                d.push(res, task, Example { x0: x.clone(), cond: ClassCond(c) });
            }
        }
    }
    d
}

#[test]
fn c06_multistage_schedule() {
    let _g = serial();
    let full = table2_stages(1, 1);
    let stages = table2_stages(1000, 64);
    let mut all_res: Vec<usize> = stages.iter().flat_map(|s| s.resolutions.clone()).collect();
    all_res.sort_unstable();
    all_res.dedup();
    let data = stage_data(&all_res);
    let mut model = FlowMlp::new(FlowMlpConfig { hidden: 32, layers: 2, ..Default::default() }, 6);
    let mut records = Vec::new();
    for st in &stages {
        records.extend(run_stage(st, &data, &mut model, &mut rng(60), |_| {}).unwrap());
    }
    let mut lr_seq: Vec<f64> = Vec::new();
    for rec in &records {
        if lr_seq.last() != Some(&rec.lr) {
            lr_seq.push(rec.lr);
        }
    }
    let max_clipped = records.iter().map(|r| r.clipped_norm).fold(0.0, f64::max);
    let mut plan_rng = rng(61);
    let fractions: Vec<f64> = full
        .iter()
        .map(|st| plan_stage(st, 10_000, &mut plan_rng).iter().filter(|p| p.1 == Task::T2i).count() as f64 / 10_000.0)
        .collect();
    let targets = [0.9, 0.7, 0.7];
    let fractions_ok = fractions.iter().zip(targets).all(|(f, t)| (f - t).abs() <= 0.02);
    let ratios_ok = full.iter().map(|s| s.t2i_ratio).eq(targets);
    let pass = lr_seq == [1e-4, 2e-5, 1e-5] && full.iter().map(|s| s.lr).eq([1e-4, 2e-5, 1e-5]) && max_clipped <= 1.0 + 1e-12 && fractions_ok && ratios_ok;
    report(
        6,
        "multistage schedule",
        pass,
        format!("executed lr {lr_seq:?} over {} steps; max post-clip norm {max_clipped:.6}; T2I fractions {fractions:?}", records.len()),
    );
    assert!(pass);
}

#[test]
fn c07_dmd_distillation() {
    let _g = serial();
    let cfg = RunConfig::default();
    let t0 = Instant::now();
    let teacher = workflow::train_toy_teacher(&cfg, |_, _| {}).unwrap();
    let before = checkpoint::checksum(teacher.params());
    let student = workflow::distill_toy(&cfg, &teacher, |_, _| {}).unwrap();
    let unchanged = checkpoint::checksum(teacher.params()) == before;
    let (t_rows, s_rows) = workflow::toy_sample_pair(&cfg, &teacher, &student, 40).unwrap();
    let sw = evalkit::sliced_wasserstein(&s_rows, &t_rows, cfg.eval_projections, workflow::stream_seed(cfg.seed, stream::EVAL)).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let mirror = teacher.clone();
    let eps = Tensor::randn(&[64, 2], 1.0, &mut rng(7));
    let c0 = ClassCond(0);
    let conds = vec![&c0; 64];
    let zero = dmd_student_grad(&student, &teacher, &mirror, &eps, &conds, &workflow::distill_config(&cfg), &mut rng(8)).unwrap();
    let max_grad = zero.grads.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    let pass = sw <= 0.05 && t_rows.len() == 10_000 && s_rows.len() == 10_000 && unchanged && max_grad == 0.0 && secs < 600.0;
    report(
        7,
        "DMD distillation",
        pass,
        format!("sliced W {sw:.4} (10000 v 10000, {} projections); teacher checksum unchanged: {unchanged}; matched-score gradient max {max_grad:.1e}; {secs:.0}s", cfg.eval_projections),
    );
    assert!(pass);
}

#[test]
fn c08_score_algebra() {
    let _g = serial();
    let mut r = rng(8);
    let mut recover = 0.0f64;
    for _ in 0..100 {
        let x0 = Tensor::randn(&[1, 4], 1.0, &mut r);
        let xi = Tensor::randn(&[1, 4], 1.0, &mut r);
        let t: f64 = r.gen_range(0.0..=1.0);
        let xt = x0.zip(&xi, |a, b| (1.0 - t) * a + t * b).unwrap();
        let v = xi.zip(&x0, |a, b| a - b).unwrap();
        recover = recover.max(clean_estimate(&v, &xt, &[t]).unwrap().max_abs_diff(&x0));
    }

    // Learned 1D velocity for standard-normal data against the closed-form score.
    let oracle = GaussianOracle::new(vec![0.0], 1.0);
    let mut model = FlowMlp::new(FlowMlpConfig { dim: 1, classes: 1, hidden: 64, layers: 3, ..Default::default() }, 80);
    let mut adam = Adam::new(1e-3);
    let c0 = ClassCond(0);
    let conds = vec![&c0; 256];
    for _ in 0..3000 {
        let x0: Vec<Tensor> = (0..256).map(|_| Tensor::randn(&[1], 1.0, &mut r)).collect();
        let refs: Vec<&Tensor> = x0.iter().collect();
        fm_train_step(&mut model, &mut adam, 1.0, &refs, &conds, &TimeSampler::Uniform, 0.0, &mut r).unwrap();
    }
    let score_err = |x: f64, t: f64| {
        let xt = Tensor::new(vec![1, 1], vec![x]).unwrap();
        let v = predict(&model, &xt, &[t], &[&c0], &[false]).unwrap();
        (score_from_velocity(&v, &xt, &[t]).unwrap().data()[0] - oracle.score_at(x, t, 0.0)).abs()
    };
    let at_half = score_err(0.5, 0.5);
    let grid_max = [0.3, 0.5, 0.7, 0.9].iter().flat_map(|&t| (-3..=3).map(move |k| (0.5 * k as f64, t))).map(|(x, t)| score_err(x, t)).fold(0.0f64, f64::max);
    let pass = recover <= 1e-12 && at_half <= 0.1;
    report(8, "score algebra", pass, format!("clean-estimate error {recover:.1e} over 100 triples; learned score error at (0.5, 0.5) {at_half:.4}, max over a 28-point grid {grid_max:.4}"));
    assert!(pass);
}

struct GrpoRun {
    logs: Vec<IterationLog>,
    dit: Mmdit,
    secs: f64,
}

fn grpo_run() -> &'static GrpoRun {
    static RUN: OnceLock<GrpoRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let base = dit_run();
        let mut dit = base.dit.clone();
        let t0 = Instant::now();
        let logs = workflow::run_grpo(&cfg, &vae_run().vae, &mut dit, &base.stats, |_| {}).unwrap();
        GrpoRun { logs, dit, secs: t0.elapsed().as_secs_f64() }
    })
}

fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len()).map(|i| {
        let lo = (i + 1).saturating_sub(window);
        xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
    })
    .collect()
}

#[test]
fn c09_grpo_loop() {
    let _g = serial();
    let cfg = RunConfig::default();
    let run = grpo_run();
    let rewards: Vec<f64> = run.logs.iter().map(|l| l.mean_reward).collect();
    let smooth = trailing_mean(&rewards, 5);
    let (start, end) = (smooth[4], *smooth.last().unwrap());
    let rise = end / start - 1.0;
    let objective_uncond: usize = run.logs.iter().map(|l| l.objective_uncond_forwards).sum();
    let rollout_uncond = run.logs.iter().all(|l| l.rollout_uncond_forwards > 0);

    let vae = &vae_run().vae;
    let stats = &dit_run().stats;
    let cond = workflow::dit_cond(&cfg, &shape_caption(0));
    let seeds: Vec<u64> = (0..cfg.rlhf_group_size as u64).collect();
    let group = rollout(&run.dit, &cond, &seeds, &workflow::grpo_config(&cfg).rollout).unwrap();
    let group_rewards: Vec<f64> = group
        .trajectories
        .iter()
        .map(|t| {
            let img = vae.decode_batch(&[&stats.denormalize(t.final_sample())]).unwrap().index0(0);
            brightness_score(&img).unwrap()
        })
        .collect();
    let adv = compute_advantages(&group_rewards).unwrap();
    let n = adv.len() as f64;
    let adv_mean = adv.iter().sum::<f64>() / n;
    let adv_var = adv.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / n;

    let pass = rise >= 0.2
        && run.logs.len() == 50
        && cfg.rlhf_group_size == 8
        && cfg.rlhf_w_cfg == 2.0
        && objective_uncond == 0
        && rollout_uncond
        && adv_mean.abs() < 1e-9
        && (adv_var - 1.0).abs() < 1e-3
        && run.secs < 900.0;
    report(
        9,
        "GRPO loop",
        pass,
        format!(
            "smoothed brightness {start:.4} -> {end:.4} ({:+.1}%); objective uncond forwards {objective_uncond}, rollout uses guidance every iteration: {rollout_uncond}; group advantages mean {adv_mean:.1e} var {adv_var:.4}; {:.0}s",
            100.0 * rise, run.secs
        ),
    );
    assert!(pass);
}

#[test]
fn grpo_smoothed_reward_holds_after_warmup() {
    let _g = serial();
    let run = grpo_run();
    let rewards: Vec<f64> = run.logs.iter().map(|l| l.mean_reward).collect();
    let smooth = trailing_mean(&rewards, 10);
    let dips: Vec<usize> = (10..smooth.len()).filter(|&i| smooth[i] < smooth[i - 1]).collect();
    let pass = dips.is_empty();
    let line = format!("criterion  9 {} GRPO improvement after iteration 10: 10-iteration trailing mean decreases at iterations {dips:?}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass);
}

#[test]
fn c10_pipeline_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), TOY_PIPELINE_SEED).unwrap();
    let p = Pipeline::new(PipelineConfig::default(), dir.path()).unwrap();
    let (_, r1) = p.run_stage_pipeline(1, corpus.records.clone()).unwrap();
    let golden = r1.to_json() == include_str!("../data/stage1_report.golden.json");
    let mut idempotent = true;
    let mut retention = Vec::new();
    for stage in 1..=6u8 {
        let (once, r) = p.run_stage_pipeline(stage, corpus.records.clone()).unwrap();
        let (twice, _) = p.run_stage_pipeline(stage, once.clone()).unwrap();
        idempotent &= once == twice;
        retention.push(r.retention);
    }
    let th = RouterThresholds::default();
    let (mut cases, mut matched) = (0, 0);
    for line in include_str!("../data/routing_cases.jsonl").lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let ev: FailureEvidence = serde_json::from_value(v.clone()).unwrap();
        let expected: Track = serde_json::from_value(v["expected"].clone()).unwrap();
        cases += 1;
        if route_failure(&ev, &th).map(|c| c.track).ok() == Some(expected) {
            matched += 1;
        }
    }
    let pass = corpus.records.len() == 200 && golden && idempotent && retention[5] <= retention[3] && cases == 30 && matched == 30;
    report(
        10,
        "pipeline determinism",
        pass,
        format!(
            "stage-1 report matches golden: {golden}; every stage idempotent: {idempotent}; retention stage 4 {:.3}, stage 6 {:.3}; routing {matched}/{cases} golden tracks",
            retention[3], retention[5]
        ),
    );
    assert!(pass);
}

#[test]
fn c11_promptforge() {
    let _g = serial();
    let t0 = Instant::now();
    let mut caption_rng = rng(11);
    let mut bad = Vec::new();
    let mut degraded = 0;
    for i in 0..1000u64 {
        let caption = sample_fine_caption(&mut caption_rng);
        let t = build_triplet(&caption, i).unwrap();
        let replayed = build_triplet(&caption, i).unwrap() == t && verify_triplet(&t).is_ok();
        let mut text = t.p_fine.clone();
        let mut monotone = true;
        for &a in &t.strategies {
            let next = apply_strategy(&text, a).0;
            monotone &= token_count(&next) <= token_count(&text);
            text = next;
        }
        let bijection = t.cot.len() == t.strategies.len() && text == t.p_short;
        if !(replayed && monotone && bijection) {
            bad.push(i);
        }
        degraded += usize::from(!t.strategies.is_empty());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 60.0;
    report(11, "promptforge", pass, format!("1000 triplets ({degraded} degraded), violations at seeds {bad:?}; {secs:.2}s"));
    assert!(pass);
}

fn oracle_psnr(a: &[u8], b: &[u8]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        se += d * d;
    }
    10.0 * (255.0f64 * 255.0 / (se / a.len() as f64)).log10()
}

fn oracle_ssim(a: &[u8], b: &[u8], c: usize, h: usize, w: usize) -> f64 {
    let k = 8;
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut tiles = 0.0;
    for ch in 0..c {
        for y0 in (0..h - h % k).step_by(k) {
            for x0 in (0..w - w % k).step_by(k) {
                let mut px = Vec::new();
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let i = ch * h * w + y * w + x;
                        px.push((a[i] as f64, b[i] as f64));
                    }
                }
                let n = px.len() as f64;
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                tiles += 1.0;
            }
        }
    }
    sum / tiles
}

fn tensor_of(px: &[u8], c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![c, h, w], px.iter().map(|&v| from_u8(v)).collect()).unwrap()
}

#[test]
fn c12_metrics() {
    let _g = serial();
    let mut r = rng(12);
    let (mut psnr_err, mut ssim_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (h, w) = (r.gen_range(8..40), r.gen_range(8..40));
        let a: Vec<u8> = (0..3 * h * w).map(|_| r.gen()).collect();
        let noise = r.gen_range(1..80);
        let b: Vec<u8> = a.iter().map(|&v| (v as i32 + r.gen_range(-noise..=noise)).clamp(0, 255) as u8).collect();
        let (ta, tb) = (tensor_of(&a, 3, h, w), tensor_of(&b, 3, h, w));
        if a != b {
            psnr_err = psnr_err.max((evalkit::psnr(&ta, &tb, 2.0).unwrap() - oracle_psnr(&a, &b)).abs());
        }
        ssim_err = ssim_err.max((evalkit::ssim_signed(&ta, &tb, 8).unwrap() - oracle_ssim(&a, &b, 3, h, w)).abs());
    }
    let a: Vec<u8> = (0..3 * 16 * 16).map(|i| (i % 200) as u8).collect();
    let b: Vec<u8> = a.iter().map(|v| v + 1).collect();
    let ones = evalkit::psnr(&tensor_of(&a, 3, 16, 16), &tensor_of(&b, 3, 16, 16), 2.0).unwrap();
    let pass = psnr_err <= 1e-6 && ssim_err <= 1e-6 && (ones - 48.1308).abs() < 1e-4;
    report(12, "metrics", pass, format!("max deviation from scalar oracles: PSNR {psnr_err:.1e}, SSIM {ssim_err:.1e} over 50 pairs; all-ones difference {ones:.4} dB"));
    assert!(pass);
}

#[test]
fn c13_few_step_economy() {
    let _g = serial();
    let cfg = RunConfig::default();
    let model = workflow::new_dit(&cfg).unwrap();
    let prompts: Vec<DitCond> = (0..8).map(|i| workflow::dit_cond(&cfg, &shape_caption(i % cfg.data_classes))).collect();
    let refs: Vec<&DitCond> = prompts.iter().collect();
    let mut shape = vec![refs.len()];
    shape.extend(model.sample_shape());
    let eps = Tensor::randn(&shape, 1.0, &mut rng(13));
    student_generate(&model, &eps, &refs, 4).unwrap();
    let (mut student, mut teacher) = (0.0, 0.0);
    for _ in 0..3 {
        let t0 = Instant::now();
        student_generate(&model, &eps, &refs, 4).unwrap();
        student += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        euler_from(&model, eps.clone(), &refs, 40, 1.0).unwrap();
        teacher += t1.elapsed().as_secs_f64();
    }
    let ratio = student / teacher;
    let pass = ratio <= 0.15;
    report(13, "few-step economy", pass, format!("4-NFE student {:.3}s vs 40-step teacher {:.3}s per batch of 8, ratio {ratio:.3}", student / 3.0, teacher / 3.0));
    assert!(pass);
}
