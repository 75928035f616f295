//! Regularizer gradient check over random logit pairs: closed form against
//! autodiff and against central differences of the loss.

use crate::autodiff::{numeric_gradient, GradCheckReport, Graph, Tensor};
use crate::error::{Error, Result};
use crate::objectives::{drl_grad_closed_form, drl_graph, drl_loss, DistributionPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub pairs: usize,
    pub vocab: usize,
    pub taus: Vec<[f64; 2]>,
    pub h: f64,
    pub seed: u64,
    /// Logits are drawn uniformly from `±scale`.
    pub scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            vocab: 32,
            taus: vec![[2.0, 2.0], [2.0, 3.0], [3.0, 2.0], [3.0, 3.0]],
            h: 1e-5,
            seed: 0,
            scale: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub pair: usize,
    pub tau_a: f64,
    pub tau_b: f64,
    pub fd_rel_err: f64,
    pub autodiff_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub config: GradcheckConfig,
    pub max_fd_rel_err: f64,
    pub max_autodiff_rel_err: f64,
    pub cases: Vec<GradcheckCase>,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let numeric: Vec<Option<f64>> = b.iter().map(|&v| Some(v)).collect();
    GradCheckReport::compare(a, &numeric, 0.0).max_rel_err
}

/// Two logit vectors drawn uniformly from `±scale`.
pub fn random_pair(rng: &mut ChaCha8Rng, vocab: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || (0..vocab).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
    let a = draw();
    let b = draw();
    (a, b)
}

/// Temperature pairs are cycled through `cfg.taus`.
pub fn drl_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    if cfg.pairs == 0 || cfg.vocab < 2 || cfg.taus.is_empty() {
        return Err(Error::Config("gradcheck needs pairs ≥ 1, vocab ≥ 2 and a temperature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::with_capacity(cfg.pairs);
    for k in 0..cfg.pairs {
        let [ta, tb] = cfg.taus[k % cfg.taus.len()];
        let (za, zb) = random_pair(&mut rng, cfg.vocab, cfg.scale);
        let closed = drl_grad_closed_form(&za, &zb, ta, tb)?;

        let x = Tensor::new(vec![2 * cfg.vocab], [za.clone(), zb.clone()].concat())?;
        let v = cfg.vocab;
        let loss = |t: &Tensor| {
            let d = t.data();
            drl_loss(&DistributionPair::from_logits(&d[..v], &d[v..], ta, tb)?, true)
        };
        let fd: Vec<f64> = numeric_gradient(loss, &x, cfg.h)
            .into_iter()
            .map(|o| o.unwrap_or(f64::NAN))
            .collect();

        let mut g = Graph::new();
        let la = g.param(Tensor::new(vec![1, v], za)?);
        let lb = g.param(Tensor::new(vec![1, v], zb)?);
        let nodes = drl_graph(&mut g, la, lb, &[0], ta, tb, true)?;
        g.backward(nodes.loss)?;
        let grad = |var| g.grad(var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; v]);
        let auto = [grad(la), grad(lb)].concat();

        let analytic = [closed.grad_a, closed.grad_b].concat();
        cases.push(GradcheckCase {
            pair: k,
            tau_a: ta,
            tau_b: tb,
            fd_rel_err: rel_err(&analytic, &fd),
            autodiff_rel_err: rel_err(&analytic, &auto),
        });
    }
    let max = |f: fn(&GradcheckCase) -> f64| cases.iter().map(f).fold(0.0, f64::max);
    Ok(GradcheckSummary {
        config: cfg.clone(),
        max_fd_rel_err: max(|c| c.fd_rel_err),
        max_autodiff_rel_err: max(|c| c.autodiff_rel_err),
        cases,
    })
}
