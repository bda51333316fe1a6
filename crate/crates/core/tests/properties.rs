use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qi2::config::RunConfig;
use qi2::datapipe::{route_failure, FailureEvidence, RouterThresholds, Track};
use qi2::distill::clean_estimate;
use qi2::evalkit::{psnr, ssim};
use qi2::flowmatch::{combine_cfg, euler_from, fm_loss_with, interpolate, predict, time_grid, ClassCond, FlowMlp, FlowMlpConfig, PointMass, TimeSampler};
use qi2::mmdit::{msrope_apply, stream_layout};
use qi2::promptforge::{apply_strategy, build_triplet, replay, sample_fine_caption, verify_triplet};
use qi2::rlhf::{clipped_term, compute_advantages, Calibrator, RewardDim, RewardTask, RewardVector};
use qi2::tensor::{Graph, Precision, Tensor};
use qi2::text::token_count;
use qi2::vae::{align_weight, Vae, VaeConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

/// `sum(tanh(x) * y)` gradient with respect to `x`.
fn tanh_dot_grad(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let mut g = Graph::with_precision(Precision::F64);
    let xv = g.leaf(x.clone(), true);
    let yv = g.constant(y.clone());
    let h = g.tanh(xv).unwrap();
    let p = g.mul(h, yv).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap().get(xv).unwrap().to_vec()
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn backward_is_linear_in_the_upstream_weights(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let y1 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let y2 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let mix = y1.zip(&y2, |p, q| a * p + b * q).unwrap();
        let (g1, g2, gm) = (tanh_dot_grad(&x, &y1), tanh_dot_grad(&x, &y2), tanh_dot_grad(&x, &mix));
        for i in 0..gm.len() {
            prop_assert!((gm[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
        prop_assert_eq!(tanh_dot_grad(&x, &y1), g1);
    }

    #[test]
    fn bottleneck_preserving_latent_keeps_a_quarter_of_the_values(k in 0usize..4, side in 1usize..3) {
        let f = 2usize << k;
        let cfg = VaeConfig::bottleneck_preserving(f);
        cfg.validate().unwrap();
        let (h, w) = (f * side, f * (side + 1));
        prop_assert_eq!(cfg.c * (h / f) * (w / f), h * w / 4);
        if f <= 8 {
            let vae = Vae::new(cfg, 0).unwrap();
            let z = vae.encode(&Tensor::zeros(&[3, h, w])).unwrap();
            prop_assert_eq!(z.data.numel(), h * w / 4);
        }
    }

    #[test]
    fn alignment_weight_never_increases(a in 0i64..20_000, d in 0i64..5_000) {
        let sched = VaeConfig::new(4, 4).align_schedule;
        prop_assert!(align_weight(&sched, a + d).unwrap() <= align_weight(&sched, a).unwrap());
    }

    #[test]
    fn rotary_logits_depend_only_on_offsets(seed in any::<u64>(), dr in -20i64..20, dc in -20i64..20) {
        let mut r = rng(seed);
        let q = Tensor::randn(&[7, 1, 8], 1.0, &mut r);
        let k = Tensor::randn(&[7, 1, 8], 1.0, &mut r);
        let pos = stream_layout(Some((2, 2)), &[], 3).unwrap().positions;
        let shifted: Vec<_> = pos.iter().map(|&(a, b)| (a + dr, b + dc)).collect();
        let logits = |p: &[(i64, i64)]| {
            let mut g = Graph::with_precision(Precision::F64);
            let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
            let qr = msrope_apply(&mut g, qv, p, 10_000.0).unwrap();
            let kr = msrope_apply(&mut g, kv, p, 10_000.0).unwrap();
            let qr = g.reshape(qr, &[7, 8]).unwrap();
            let kr = g.reshape(kr, &[7, 8]).unwrap();
            let kt = g.transpose(kr).unwrap();
            let l = g.matmul(qr, kt).unwrap();
            g.value(l).clone()
        };
        prop_assert!(logits(&pos).max_abs_diff(&logits(&shifted)) < 1e-9);
    }

    #[test]
    fn sampled_times_stay_inside_the_unit_interval(seed in any::<u64>()) {
        let mut r = rng(seed);
        for s in [TimeSampler::Uniform, TimeSampler::default(), TimeSampler::LogitNormal { mu: 3.0, sigma: 4.0 }] {
            for _ in 0..200 {
                let t = s.sample(&mut r);
                prop_assert!(t > 0.0 && t < 1.0);
            }
        }
    }

    #[test]
    fn exact_velocity_has_zero_flow_loss(seed in any::<u64>(), t in 0.01f64..1.0) {
        let mut r = rng(seed);
        let target = Tensor::randn(&[5], 1.0, &mut r);
        let model = PointMass::new(target.clone());
        let x0 = target.clone().reshape(&[1, 5]).unwrap();
        let xi = Tensor::randn(&[1, 5], 1.0, &mut r);
        let mut g = Graph::with_precision(Precision::F64);
        let loss = fm_loss_with(&model, &mut g, &x0, &xi, &[t], &[&()], &[false]).unwrap();
        prop_assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn clean_estimate_inverts_the_interpolation(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let x0 = Tensor::randn(&[1, 6], 1.0, &mut r);
        let xi = Tensor::randn(&[1, 6], 1.0, &mut r);
        let xt = interpolate(&x0, &xi, t).unwrap();
        let v = xi.zip(&x0, |a, b| a - b).unwrap();
        prop_assert!(clean_estimate(&v, &xt, &[t]).unwrap().max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn unit_guidance_is_the_conditional_sampler(seed in any::<u64>(), steps in 1usize..8) {
        let model = FlowMlp::new(FlowMlpConfig { hidden: 16, layers: 2, ..FlowMlpConfig::default() }, seed);
        let mut r = rng(seed ^ 1);
        let x = Tensor::randn(&[2, 2], 1.0, &mut r);
        let conds = [ClassCond(0), ClassCond(1)];
        let refs: Vec<&ClassCond> = conds.iter().collect();
        let got = euler_from(&model, x.clone(), &refs, steps, 1.0).unwrap();
        let grid = time_grid(steps);
        let mut oracle = x;
        for k in 0..steps {
            let v = predict(&model, &oracle, &[grid[k]; 2], &refs, &[false, false]).unwrap();
            oracle = oracle.zip(&v, |a, b| a - (grid[k] - grid[k + 1]) * b).unwrap();
        }
        prop_assert_eq!(got.data(), oracle.data());
        let vc = Tensor::randn(&[4], 1.0, &mut r);
        let vu = Tensor::randn(&[4], 1.0, &mut r);
        prop_assert!(combine_cfg(&vc, &vu, 1.0).unwrap().max_abs_diff(&vc) < 1e-15);
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..32)) {
        let adv = compute_advantages(&rewards).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let am = adv.iter().sum::<f64>() / n;
        prop_assert!(am.abs() < 1e-9);
        if std >= 1e-8 {
            let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
            let want = (std / (std + 1e-6)).powi(2);
            prop_assert!((var - want).abs() < 1e-9, "{} vs {}", var, want);
            if std > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-4, "{}", var);
            }
        } else {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn clipped_term_is_the_pessimistic_bound(rho in 0.0f64..3.0, a in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let clipped = if rho < 1.0 - eps { 1.0 - eps } else if rho > 1.0 + eps { 1.0 + eps } else { rho };
        let expect = if rho * a < clipped * a { rho * a } else { clipped * a };
        prop_assert_eq!(clipped_term(rho, a, eps), expect);
        prop_assert!(clipped_term(rho, a, eps) <= rho * a + 1e-15);
    }

    #[test]
    fn calibrated_rewards_stay_in_unit_range(raw in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20), w in prop::array::uniform3(0.0f64..2.0)) {
        let mut cal = Calibrator::default();
        let dims = [RewardDim::Aesthetic, RewardDim::Alignment, RewardDim::Portrait];
        let weights = dims.iter().copied().zip(w).collect();
        for r in &raw {
            let scores = dims.iter().copied().zip(r.iter().copied()).collect();
            let v = RewardVector::new(RewardTask::T2i, &scores, &mut cal, &weights).unwrap();
            prop_assert!(v.scores.values().all(|s| (0.0..=1.0).contains(s)));
            prop_assert!((0.0..=1.0).contains(&v.total()));
        }
    }

    #[test]
    fn router_is_total_and_follows_the_cascade(r in -2.0f64..2.0, d in 0.0f64..1.0, p in -1.0f64..1.0, tp in 0.0f64..0.5, td in 0.0f64..0.5) {
        let th = RouterThresholds { pe_gain: tp, nn_density: td };
        let ev = FailureEvidence { prompt: "p".into(), output: String::new(), reward_score: Some(r), nn_density: Some(d), pe_gain: Some(p) };
        let case = route_failure(&ev, &th).unwrap();
        let expect = if p > tp { Track::PromptEngineering } else if d < td { Track::Pretrain } else { Track::Rl };
        prop_assert_eq!(case.track, expect);
        prop_assert_eq!(case.evidence.len(), 3);
        let missing = FailureEvidence { pe_gain: None, ..ev };
        prop_assert!(route_failure(&missing, &th).is_err());
    }

    #[test]
    fn triplets_replay_and_shrink(seed in any::<u64>()) {
        let caption = sample_fine_caption(&mut rng(seed));
        let t = build_triplet(&caption, seed).unwrap();
        verify_triplet(&t).unwrap();
        prop_assert_eq!(replay(&t.p_fine, &t.strategies), t.p_short.clone());
        prop_assert_eq!(t.cot.len(), t.strategies.len());
        let mut text = t.p_fine.clone();
        for &a in &t.strategies {
            let (next, _) = apply_strategy(&text, a);
            prop_assert!(token_count(&next) <= token_count(&text));
            text = next;
        }
        prop_assert_eq!(build_triplet(&caption, seed).unwrap(), t);
    }

    #[test]
    fn psnr_and_ssim_obey_their_algebra(seed in any::<u64>(), s1 in 0.01f64..0.2, k in 1.5f64..4.0) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[3, 16, 16], 0.4, &mut r).map(|v| v.clamp(-1.0, 1.0));
        let n = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
        let b = a.zip(&n, |x, e| x + s1 * e).unwrap();
        let c = a.zip(&n, |x, e| x + k * s1 * e).unwrap();
        prop_assert!((psnr(&a, &b, 2.0).unwrap() - psnr(&b, &a, 2.0).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &b, 8, 2.0).unwrap() - ssim(&b, &a, 8, 2.0).unwrap()).abs() < 1e-12);
        prop_assert!(psnr(&a, &b, 2.0).unwrap() > psnr(&a, &c, 2.0).unwrap());
        let sv = ssim(&a, &c, 8, 2.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&sv));
        prop_assert!((ssim(&a, &a, 8, 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), k in 1usize..64, lr in 1e-6f64..1.0, cfg_w in 0.0f64..10.0, flag in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.set("run.seed", &seed.to_string()).unwrap();
        cfg.set("dit.d", &(8 * k).to_string()).unwrap();
        cfg.set("vae.lr", &lr.to_string()).unwrap();
        cfg.set("sample.cfg", &cfg_w.to_string()).unwrap();
        cfg.set("vae.preserve_bottleneck", &flag.to_string()).unwrap();
        cfg.set("vae.widths", "8,16,32").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
