#![allow(dead_code)]

pub mod dd;

use dd::{kl, lift, softmax, Dd};

/// `max |a − n| / max(|a|, |n|, 1e-12)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Scaled (or `1/2`-weighted) regularizer of two logit vectors.
pub fn drl_dd(z_a: &[f64], z_b: &[f64], tau_a: f64, tau_b: f64, scaled: bool) -> Dd {
    let pa = softmax(&lift(z_a), tau_a);
    let pb = softmax(&lift(z_b), tau_b);
    let half = Dd::new(0.5);
    let m: Vec<Dd> = pa.iter().zip(&pb).map(|(&a, &b)| (a + b) * half).collect();
    let (wa, wb) = if scaled {
        (tau_a * tau_a / 2.0, tau_b * tau_b / 2.0)
    } else {
        (0.5, 0.5)
    };
    Dd::new(wa) * kl(&pa, &m) + Dd::new(wb) * kl(&pb, &m)
}

/// Random sequences over ids `8..vocab` with fixed part lengths.
pub fn toy_sequences(n: usize, seed: u64, vocab: usize) -> Vec<gcl_core::model::Sequence> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(8..vocab)).collect::<Vec<usize>>();
    (0..n)
        .map(|i| gcl_core::model::Sequence {
            id: format!("toy-{i}"),
            visual: draw(4),
            text: draw(2),
            target: {
                let mut t = draw(4);
                t.push(2);
                t
            },
        })
        .collect()
}

/// A competitor with a fresh head and a schedule of `total` steps.
pub fn toy_competitor(
    cfg: &gcl_core::model::ModelConfig,
    seed: u64,
    eta: f64,
    total: u64,
) -> gcl_core::optimizer::Competitor {
    use gcl_core::optimizer::{AdamWConfig, Competitor, ScheduleConfig};
    let params = gcl_core::model::init_model(cfg, seed).unwrap();
    let head = gcl_core::objectives::PoolingHead::init(0, cfg.d_model, 8, seed + 1000).unwrap();
    let schedule = ScheduleConfig {
        eta_peak: eta,
        total_steps: total,
        warmup_ratio: 0.1,
    };
    Competitor::new(params, head, AdamWConfig::default(), schedule).unwrap()
}
