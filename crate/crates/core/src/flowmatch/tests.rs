use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Graph;
use crate::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn interpolate_endpoints_and_errors() {
    let x0 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let xi = Tensor::new(vec![3], vec![0.0, 4.0, -1.0]).unwrap();
    assert_eq!(interpolate(&x0, &xi, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &xi, 1.0).unwrap(), xi);
    let mid = interpolate(&x0, &xi, 0.5).unwrap();
    assert_eq!(mid.data(), &[0.5, 1.0, -0.25]);
    assert!(matches!(interpolate(&x0, &xi, 1.5), Err(Error::Contract { .. })));
    let short = Tensor::zeros(&[2]);
    assert!(matches!(interpolate(&x0, &short, 0.3), Err(Error::Dimension { .. })));
}

#[test]
fn time_samplers_stay_inside_open_interval() {
    let mut r = rng(1);
    for s in [TimeSampler::Uniform, TimeSampler::default(), TimeSampler::LogitNormal { mu: 3.0, sigma: 4.0 }] {
        for _ in 0..2000 {
            let t = s.sample(&mut r);
            assert!(t > 0.0 && t < 1.0);
        }
    }
    assert!(TimeSampler::parse("cosine").is_err());
}

#[test]
fn oracle_velocity_has_zero_loss() {
    let target = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
    let model = PointMass::new(target.clone());
    let x0 = Tensor::stack(&[target.clone(), target.clone(), target]).unwrap();
    let xi = Tensor::randn(&[3, 2], 1.0, &mut rng(2));
    let mut g = Graph::new();
    let loss = fm_loss_with(&model, &mut g, &x0, &xi, &[0.2, 0.5, 0.9], &[&(), &(), &()], &[false; 3]).unwrap();
    assert!(g.value(loss).data()[0] < 1e-24);
}

#[test]
fn gaussian_oracle_velocity_matches_monte_carlo() {
    let oracle = GaussianOracle::new(vec![1.0], 0.25);
    let mut r = rng(3);
    let (t, x_t, h) = (0.6, 0.4, 0.02);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..400_000 {
        let x0 = 1.0 + 0.5 * r.sample::<f64, _>(rand_distr::StandardNormal);
        let xi: f64 = r.sample(rand_distr::StandardNormal);
        let xt = (1.0 - t) * x0 + t * xi;
        if (xt - x_t).abs() < h {
            num += xi - x0;
            den += 1.0;
        }
    }
    let mc = num / den;
    assert!((mc - oracle.velocity_at(x_t, t, 1.0)).abs() < 0.03, "{mc}");
}

#[test]
fn cfg_extremes_skip_a_branch() {
    let model = FlowMlp::new(FlowMlpConfig::default(), 4);
    let x = Tensor::randn(&[2, 2], 1.0, &mut rng(5));
    let conds = [&ClassCond(0), &ClassCond(1)];
    let t = [0.5, 0.5];
    let vc = cfg_velocity(&model, &x, &t, &conds, 1.0).unwrap();
    assert_eq!(model.counter().snapshot(), (2, 0));
    let vu = cfg_velocity(&model, &x, &t, &conds, 0.0).unwrap();
    assert_eq!(model.counter().snapshot(), (2, 2));
    let v3 = cfg_velocity(&model, &x, &t, &conds, 3.0).unwrap();
    assert_eq!(model.counter().snapshot(), (4, 4));
    let expect = combine_cfg(&vc, &vu, 3.0).unwrap();
    assert!(v3.max_abs_diff(&expect) < 1e-12);
    assert!(cfg_velocity(&model, &x, &t, &conds, -0.1).is_err());
    assert!(euler_sample(&model, &conds, 0, 1.0, &mut rng(0)).is_err());
}

#[test]
fn euler_with_oracle_lands_on_target() {
    let target = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
    let model = PointMass::new(target.clone());
    let out = euler_sample(&model, &[&(), &()], 7, 1.0, &mut rng(6)).unwrap();
    for row in out.data().chunks(2) {
        assert!((row[0] - 0.25).abs() < 1e-12 && (row[1] + 1.5).abs() < 1e-12);
    }
}

#[test]
fn time_grid_is_uniform_and_descending() {
    let g = time_grid(4);
    assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
}

#[test]
fn table2_values() {
    let s = table2_stages(1, 1);
    assert_eq!(s.iter().map(|s| s.lr).collect::<Vec<_>>(), vec![1e-4, 2e-5, 1e-5]);
    assert_eq!(s.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![700_000, 250_000, 10_000]);
    assert_eq!(s[0].resolutions, vec![256, 512]);
    assert_eq!(s[0].batch_sizes, vec![32_000, 16_000]);
    assert_eq!(s[1].resolutions, vec![512, 1024, 2048]);
    assert_eq!(s[2].batch_sizes, vec![16_000, 8_000, 4_000]);
    assert_eq!(s.iter().map(|s| s.t2i_ratio).collect::<Vec<_>>(), vec![0.9, 0.7, 0.7]);
    for st in &s {
        assert_eq!((st.weight_decay, st.grad_clip, st.uncond_dropout), (0.001, 1.0, 0.1));
    }
    validate_schedule(&s).unwrap();
    let desk = table2_stages(1000, 64);
    assert_eq!(desk[0].batch_sizes, vec![32, 16]);
    assert_eq!(desk[0].resolutions, vec![4, 8]);
    assert_eq!(desk[2].steps, 10);
}

#[test]
fn schedule_rejects_non_decreasing_lr() {
    let mut s = table2_stages(1000, 64);
    s[2].lr = 2e-5;
    assert!(matches!(validate_schedule(&s), Err(Error::Config(_))));
    let mut s = table2_stages(1000, 64);
    s.swap(0, 1);
    assert!(validate_schedule(&s).is_err());
}

#[test]
fn planned_task_fractions() {
    let mut r = rng(7);
    for st in table2_stages(1000, 64) {
        let plan = plan_stage(&st, 10_000, &mut r);
        let frac = plan.iter().filter(|p| p.1 == Task::T2i).count() as f64 / 1e4;
        assert!((frac - st.t2i_ratio).abs() <= 0.02, "{frac}");
        assert!(plan.iter().all(|p| st.resolutions.contains(&p.0)));
    }
}

fn toy_data(n: usize) -> StageData<ClassCond> {
    let mut d = StageData::default();
    let mut r = rng(8);
    for i in 0..n {
        let c = i % 2;
        let mut x = Tensor::randn(&[2], 0.3, &mut r);
        x.data_mut()[0] += if c == 0 { -1.5 } else { 1.5 };
        for &res in &[4, 8] {
            let task = if i % 3 == 0 { Task::Ti2i } else { Task::T2i };
            d.push(res, task, Example { x0: x.clone(), cond: ClassCond(c) });
        }
    }
    d
}

#[test]
fn run_stage_clips_and_logs() {
    let mut st = table2_stages(1000, 64).remove(0);
    st.steps = 40;
    st.batch_sizes = vec![8, 8];
    st.lr = 1e-2;
    let mut model = FlowMlp::new(FlowMlpConfig { hidden: 32, layers: 2, ..Default::default() }, 9);
    let mut seen = 0;
    let recs = run_stage(&st, &toy_data(30), &mut model, &mut rng(10), |_| seen += 1).unwrap();
    assert_eq!(seen, 40);
    for r in &recs {
        assert!(r.clipped_norm <= 1.0 + 1e-9);
        assert!(r.grad_norm >= r.clipped_norm - 1e-12);
        assert_eq!(r.lr, 1e-2);
        let line = serde_json::to_string(r).unwrap();
        assert!(line.contains("\"stage\":\"pretrain\""));
    }
}

#[test]
fn run_stage_rejects_missing_data() {
    let st = table2_stages(1000, 64).remove(1);
    let mut model = FlowMlp::new(FlowMlpConfig::default(), 0);
    let err = run_stage(&st, &toy_data(4), &mut model, &mut rng(0), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn mlp_training_reduces_loss() {
    let data = toy_data(64);
    let pool: Vec<&Example<ClassCond>> = data.pools[&4].0.iter().collect();
    let mut model = FlowMlp::new(FlowMlpConfig { hidden: 64, layers: 2, ..Default::default() }, 11);
    let mut adam = Adam::new(3e-3);
    let mut r = rng(12);
    let x0: Vec<&Tensor> = pool.iter().map(|e| &e.x0).collect();
    let conds: Vec<&ClassCond> = pool.iter().map(|e| &e.cond).collect();
    let mut losses = Vec::new();
    for _ in 0..300 {
        let out = fm_train_step(&mut model, &mut adam, 1.0, &x0, &conds, &TimeSampler::Uniform, 0.1, &mut r).unwrap();
        losses.push(out.loss);
    }
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[270..].iter().sum::<f64>() / 30.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn zero_model_loss_is_two_per_element() {
    let mut model = FlowMlp::new(FlowMlpConfig { dim: 16, ..Default::default() }, 13);
    let out_w = model.params().find("mlp.out.weight").unwrap();
    model.params_mut().get_mut(out_w).data_mut().fill(0.0);
    let mut r = rng(13);
    let xs: Vec<Tensor> = (0..400).map(|_| Tensor::randn(&[16], 1.0, &mut r)).collect();
    let x0: Vec<&Tensor> = xs.iter().collect();
    let conds = vec![&ClassCond(0); xs.len()];
    let mut g = Graph::new();
    let loss = fm_loss(&model, &mut g, &x0, &conds, &TimeSampler::Uniform, 0.1, &mut r).unwrap();
    let l = g.value(loss).data()[0];
    assert!((l - 2.0).abs() < 0.05, "{l}");
}

#[test]
fn dropout_one_always_uses_null_condition() {
    let model = FlowMlp::new(FlowMlpConfig::default(), 14);
    let x = Tensor::randn(&[1, 2], 1.0, &mut rng(0));
    let c = ClassCond(1);
    let mut r = rng(15);
    for _ in 0..10 {
        let mut g = Graph::new();
        fm_loss(&model, &mut g, &[&x.clone().reshape(&[2]).unwrap()], &[&c], &TimeSampler::Uniform, 1.0, &mut r).unwrap();
    }
    assert_eq!(model.counter().snapshot(), (0, 10));
}

#[test]
fn cfg_is_w_independent_when_branches_agree() {
    let model = GaussianOracle::new(vec![0.5, -0.5], 0.3);
    let x = Tensor::randn(&[3, 2], 1.0, &mut rng(16));
    let t = [0.3, 0.6, 0.9];
    let conds = [&(), &(), &()];
    let a = cfg_velocity(&model, &x, &t, &conds, 0.5).unwrap();
    let b = cfg_velocity(&model, &x, &t, &conds, 7.0).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn euler_is_seed_deterministic_and_w1_matches_conditional_only() {
    let model = FlowMlp::new(FlowMlpConfig::default(), 17);
    let conds = [&ClassCond(0), &ClassCond(1)];
    let a = euler_sample(&model, &conds, 5, 1.0, &mut rng(18)).unwrap();
    let b = euler_sample(&model, &conds, 5, 1.0, &mut rng(18)).unwrap();
    assert_eq!(a, b);
    let mut x = initial_noise(&model, 2, &mut rng(18));
    let grid = time_grid(5);
    for k in 0..5 {
        let v = predict(&model, &x, &[grid[k]; 2], &conds, &[false, false]).unwrap();
        x = x.zip(&v, |xv, vv| xv - (grid[k] - grid[k + 1]) * vv).unwrap();
    }
    assert_eq!(a, x);
}

#[test]
fn single_step_point_mass_is_exact() {
    let target = Tensor::new(vec![3], vec![0.1, 0.2, -0.9]).unwrap();
    let model = PointMass::new(target.clone());
    let out = euler_sample(&model, &[&()], 1, 1.0, &mut rng(19)).unwrap();
    assert!(out.reshape(&[3]).unwrap().max_abs_diff(&target) < 1e-12);
}

#[test]
fn logit_normal_passes_ks_test() {
    fn norm_cdf(z: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 on erf, accurate to 1.5e-7.
        let x = z / std::f64::consts::SQRT_2;
        let s = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0 - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t * (-x * x).exp();
        0.5 * (1.0 + s * y)
    }
    let mut r = rng(20);
    let s = TimeSampler::default();
    let mut xs: Vec<f64> = (0..10_000).map(|_| s.sample(&mut r)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = norm_cdf((t / (1.0 - t)).ln());
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    // Critical value at p = 0.01 is 1.628 / sqrt(n).
    assert!(d < 1.628 / n.sqrt(), "{d}");
}

#[test]
fn ti2i_packing_counts_and_degenerates_to_t2i() {
    use crate::mmdit::{Mmdit, MmditConfig};
    use crate::vae::LatentImage;
    let model = Mmdit::new(MmditConfig { d: 16, blocks: 1, heads: 2, mlp_hidden: 16, ..Default::default() }, (2, 2), 21).unwrap();
    let lat = |seed| LatentImage {
        data: Tensor::randn(&[4, 2, 2], 1.0, &mut rng(seed)),
        f: 4,
        c: 4,
    };
    let (target, source) = (lat(1), lat(2));
    let s = ti2i_forward_packing(&model, &[&source], &target, "a red circle").unwrap();
    assert_eq!(s.layout.len(), 11);
    assert_eq!(s.layout.image_span, (0, 4));
    assert_eq!(s.layout.source_spans, vec![(4, 4)]);
    assert_eq!(s.layout.text_span, (8, 3));
    let plain = ti2i_forward_packing(&model, &[], &target, "a red circle").unwrap();
    let emb = model.embed_text("a red circle").unwrap();
    let t2i = model.build_stream(Some(&emb), Some(&target), &[]).unwrap();
    assert_eq!(plain.tokens, t2i.tokens);
    assert_eq!(plain.layout, t2i.layout);
}
