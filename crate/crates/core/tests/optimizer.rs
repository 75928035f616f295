mod common;

use common::{toy_competitor, toy_sequences};
use gcl_core::autodiff::Tensor;
use gcl_core::model::{Batch, ModelConfig};
use gcl_core::objectives::LossWeights;
use gcl_core::optimizer::{
    adamw_step, assign_roles, clip_grads, gcl_train_step, lr_schedule, sft_step, AdamWConfig, CompetitiveGroup,
    OptimizerState, Regime, RolePolicy, ScheduleConfig,
};
use gcl_core::Error;
use proptest::prelude::*;

fn toy_cfg(layers: usize, d: usize) -> ModelConfig {
    ModelConfig {
        max_len: 16,
        ..ModelConfig::new(layers, d, 2, 24)
    }
}

fn no_decay() -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    }
}

#[test]
fn zero_gradients_without_decay_leave_params_unchanged() {
    let mut p = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
    let before = p.clone();
    let mut st = OptimizerState::new(no_decay(), &[&p]);
    for _ in 0..3 {
        adamw_step(&mut st, &mut [&mut p], &[vec![0.0; 3]], 1e-2).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 3);
}

#[test]
fn first_step_moves_by_eta_against_the_gradient_sign() {
    let eta = 1e-3;
    let g = vec![2.5, -0.01, 1e-3, -40.0];
    let mut p = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    let before = p.clone();
    let mut st = OptimizerState::new(no_decay(), &[&p]);
    adamw_step(&mut st, &mut [&mut p], &[g.clone()], eta).unwrap();
    for ((a, b), gi) in p.data().iter().zip(before.data()).zip(&g) {
        // m̂ = g, v̂ = g², so the step is η·|g|/(|g| + ε)
        let want = -eta * gi.signum() * gi.abs() / (gi.abs() + 1e-8);
        assert!(((a - b) - want).abs() < 1e-15, "{a} {b} {gi}");
        assert!(((a - b) + eta * gi.signum()).abs() < eta * 1e-5);
    }
}

#[test]
fn decay_alone_scales_parameters() {
    let eta = 0.1;
    let mut p = Tensor::from_vec(vec![1.5, -2.0, 0.25]);
    let before = p.clone();
    let mut st = OptimizerState::new(AdamWConfig::default(), &[&p]);
    adamw_step(&mut st, &mut [&mut p], &[vec![0.0; 3]], eta).unwrap();
    for (a, b) in p.data().iter().zip(before.data()) {
        assert_eq!(*a, b * (1.0 - eta * 0.01));
    }
}

#[test]
fn adamw_shape_mismatch_is_a_usage_error() {
    let mut p = Tensor::from_vec(vec![1.0, 2.0]);
    let mut st = OptimizerState::new(AdamWConfig::default(), &[&p]);
    assert!(matches!(adamw_step(&mut st, &mut [&mut p], &[vec![0.0; 3]], 0.1), Err(Error::Usage(_))));
    assert!(matches!(adamw_step(&mut st, &mut [&mut p], &[], 0.1), Err(Error::Usage(_))));
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_rescales_to_the_bound() {
    let mut g = vec![vec![3.0], vec![4.0]];
    assert_eq!(clip_grads(&mut g, Some(1.0)), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut h = vec![vec![3.0, 4.0]];
    clip_grads(&mut h, None);
    assert_eq!(h, vec![vec![3.0, 4.0]]);
}

#[test]
fn reshaping_example() {
    let r = assign_roles([0.692, 0.816], [3, 4], &RolePolicy::default()).unwrap();
    assert_eq!((r.learner, r.guide), (0, 1));
    assert_eq!((r.eta_learner, r.eta_guide), (1e-5, 5e-6));
    assert_eq!((r.tau_learner, r.tau_guide), (3.0, 2.0));
    assert_eq!(r.regime, Regime::Reshaping);
}

#[test]
fn extraction_example() {
    let r = assign_roles([0.755, 0.797], [8, 2], &RolePolicy::default()).unwrap();
    assert_eq!((r.learner, r.tau_learner, r.tau_guide), (0, 2.0, 3.0));
    assert_eq!(r.regime, Regime::Extraction);
}

#[test]
fn ties_pick_index_zero_with_high_temperature() {
    let r = assign_roles([0.5, 0.5], [7, 7], &RolePolicy::default()).unwrap();
    assert_eq!((r.learner, r.tau_learner, r.tau_guide, r.regime), (0, 3.0, 2.0, Regime::Homogeneous));
}

#[test]
fn role_inputs_are_validated() {
    let p = RolePolicy::default();
    assert!(matches!(assign_roles([f64::NAN, 0.1], [1, 2], &p), Err(Error::Input(_))));
    assert!(matches!(assign_roles([0.1, 0.2], [0, 2], &p), Err(Error::Input(_))));
}

#[test]
fn schedule_shape() {
    let c = ScheduleConfig {
        eta_peak: 2e-3,
        total_steps: 200,
        warmup_ratio: 0.1,
    };
    assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
    assert!((lr_schedule(20, &c).unwrap() - 2e-3).abs() < 1e-12);
    assert!(lr_schedule(200, &c).unwrap().abs() < 1e-12);
    assert!(matches!(lr_schedule(201, &c), Err(Error::Usage(_))));
    let left = lr_schedule(19, &c).unwrap();
    assert!((2e-3 - left) <= 2e-3 / 20.0 + 1e-15);
    let mut prev = f64::INFINITY;
    for t in 20..=200 {
        let v = lr_schedule(t, &c).unwrap();
        assert!(v <= prev);
        prev = v;
    }
    let flat = ScheduleConfig {
        warmup_ratio: 0.0,
        ..c
    };
    assert_eq!(lr_schedule(0, &flat).unwrap(), 2e-3);
    assert!(ScheduleConfig { warmup_ratio: 1.0, ..c }.validate().is_err());
    assert!(ScheduleConfig { total_steps: 0, ..c }.validate().is_err());
}

proptest! {
    #[test]
    fn roles_ignore_positive_score_scaling(a in 0.0f64..1.0, b in 0.0f64..1.0, k in 1e-3f64..1e3,
                                          ca in 1usize..100, cb in 1usize..100) {
        let p = RolePolicy::default();
        prop_assert_eq!(assign_roles([a, b], [ca, cb], &p).unwrap(), assign_roles([a * k, b * k], [ca, cb], &p).unwrap());
    }

    #[test]
    fn low_temperature_follows_capacity(a in 0.0f64..1.0, b in 0.0f64..1.0, ca in 1usize..100, cb in 1usize..100) {
        prop_assume!(ca != cb);
        let p = RolePolicy::default();
        let low = |r: gcl_core::optimizer::RoleAssignment| if r.tau(0) == 2.0 { 0 } else { 1 };
        let x = assign_roles([a, b], [ca, cb], &p).unwrap();
        let y = assign_roles([b, a], [ca, cb], &p).unwrap();
        prop_assert_eq!(low(x), low(y));
        prop_assert_eq!(low(x), if ca > cb { 0 } else { 1 });
        prop_assert!(x.eta_learner >= x.eta_guide);
        let mut taus = [x.tau_learner, x.tau_guide];
        taus.sort_by(f64::total_cmp);
        prop_assert_eq!(taus, [2.0, 3.0]);
    }

    #[test]
    fn schedule_stays_within_peak(t in 0u64..=300, total in 1u64..300, w in 0.0f64..0.9) {
        prop_assume!(t <= total);
        let c = ScheduleConfig { eta_peak: 1.0, total_steps: total, warmup_ratio: w };
        let v = lr_schedule(t, &c).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }
}

fn toy_group(seed: u64, etas: [f64; 2], total: u64, clip: Option<f64>) -> CompetitiveGroup {
    let a = toy_competitor(&toy_cfg(1, 16), seed, etas[0], total);
    let b = toy_competitor(&toy_cfg(2, 16), seed + 1, etas[1], total);
    let mut roles = assign_roles([0.2, 0.6], [a.capacity(), b.capacity()], &RolePolicy::default()).unwrap();
    roles.eta_learner = etas[0];
    roles.eta_guide = etas[1];
    let mut g = CompetitiveGroup::new([a, b], roles).unwrap();
    g.clip = clip;
    g
}

#[test]
fn gcl_steps_are_deterministic() {
    let batch = Batch::new(toy_sequences(4, 3, 24), 1, 0, 16).unwrap();
    let run = || {
        let mut g = toy_group(5, [1e-3, 5e-4], 10, Some(1.0));
        let reps: Vec<_> = (0..3).map(|_| gcl_train_step(&mut g, &batch, LossWeights::default(), true).unwrap()).collect();
        (reps, g.members[0].params.clone(), g.members[1].head.clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn supervised_only_weights_match_independent_sft_bitwise() {
    let batch = Batch::new(toy_sequences(4, 9, 24), 1, 0, 16).unwrap();
    let mut g = toy_group(2, [1e-3, 5e-4], 10, Some(1.0));
    let mut a = g.members[0].clone();
    let mut b = g.members[1].clone();
    for _ in 0..5 {
        let r = gcl_train_step(&mut g, &batch, LossWeights::sup_only(), true).unwrap();
        let ra = sft_step(&mut a, &batch, Some(1.0)).unwrap();
        let rb = sft_step(&mut b, &batch, Some(1.0)).unwrap();
        assert_eq!(r.breakdown.sup_a.to_bits(), ra.loss.to_bits());
        assert_eq!(r.breakdown.sup_b.to_bits(), rb.loss.to_bits());
    }
    assert_eq!(g.members[0].params, a.params);
    assert_eq!(g.members[1].params, b.params);
    assert_eq!(g.members[0].opt, a.opt);
    assert_eq!(g.members[1].head, b.head);
}

#[test]
fn guide_update_ignores_the_other_models_weights() {
    let batch = Batch::new(toy_sequences(4, 1, 24), 1, 0, 16).unwrap();
    let mut g1 = toy_group(3, [1e-3, 5e-4], 10, None);
    let mut g2 = g1.clone();
    g2.members[0] = toy_competitor(&toy_cfg(1, 16), 77, 1e-3, 10);
    for _ in 0..3 {
        gcl_train_step(&mut g1, &batch, LossWeights::sup_only(), true).unwrap();
        gcl_train_step(&mut g2, &batch, LossWeights::sup_only(), true).unwrap();
    }
    assert_ne!(g1.members[0].params, g2.members[0].params);
    assert_eq!(g1.members[1].params, g2.members[1].params);
    assert_eq!(g1.members[1].opt, g2.members[1].opt);
}

#[test]
fn zeroed_gradients_leave_only_decay() {
    let c = toy_competitor(&toy_cfg(1, 8), 0, 1e-2, 10);
    let mut a = c.params.clone();
    let mut b = c.params.clone();
    let before = b.clone();
    let mut sa = OptimizerState::new(AdamWConfig::default(), &a.tensors());
    let mut sb = OptimizerState::new(AdamWConfig::default(), &b.tensors());
    let ga: Vec<Vec<f64>> = a.tensors().iter().map(|t| vec![0.7; t.len()]).collect();
    let gb: Vec<Vec<f64>> = b.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    adamw_step(&mut sa, &mut a.tensors_mut(), &ga, 1e-2).unwrap();
    adamw_step(&mut sb, &mut b.tensors_mut(), &gb, 1e-2).unwrap();
    for (x, y) in b.tensors().iter().zip(before.tensors()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert_eq!(*u, v * (1.0 - 1e-2 * 0.01));
        }
    }
    assert!(sb.m.iter().flatten().all(|m| *m == 0.0));
}

#[test]
fn non_finite_objective_aborts_the_step() {
    let batch = Batch::new(toy_sequences(2, 4, 24), 1, 0, 16).unwrap();
    let mut g = toy_group(1, [1e-3, 5e-4], 10, Some(1.0));
    for t in g.members[0].params.embedding.data_mut().iter_mut() {
        *t = f64::NAN;
    }
    let before = g.members[1].params.clone();
    assert!(matches!(
        gcl_train_step(&mut g, &batch, LossWeights::default(), true),
        Err(Error::Numerical(_))
    ));
    assert_eq!(g.members[1].params, before);
}

#[test]
fn group_objective_overfits_eight_samples() {
    let batch = Batch::new(toy_sequences(8, 21, 24), 1, 0, 16).unwrap();
    let mut g = toy_group(4, [3e-3, 1.5e-3], 500, Some(1.0));
    let mut totals = Vec::new();
    let mut last = None;
    for _ in 0..500 {
        let r = gcl_train_step(&mut g, &batch, LossWeights::default(), true).unwrap();
        totals.push(r.breakdown.total);
        last = Some(r.breakdown);
    }
    let windows: Vec<f64> = totals.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
    let last = last.unwrap();
    assert!(last.sup_a < 0.05 && last.sup_b < 0.05, "{last:?}");
}
