//! Full-batch Adam training for every family, with trace recording.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::mean_predictive_ll;
use crate::error::{Error, Result};
use crate::network::{nll_grad_flat, NetworkShape};
use crate::numerics::RngState;
use crate::posterior::{
    init_posterior, kl_gradients, vfe_gradients, Family, Prior, VariationalPosterior, VfeEstimate,
    VfeGradients, WnScales,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Full-batch steps. Zero records the initial state only.
    pub iterations: usize,
    pub trace_every: usize,
    /// MC samples for the predictive NLL columns of the trace.
    pub eval_mc_samples: usize,
    /// MC samples for the VFE columns of the trace.
    pub trace_vfe_samples: usize,
    /// MC samples per training step; `None` picks 1 for WN/MF and 8 for FC.
    pub train_mc_samples: Option<usize>,
    pub sigma_init: f64,
    pub wn_scales: WnScales,
    /// When false the observation noise stays at its initial value.
    pub learn_noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            iterations: 5000,
            trace_every: 50,
            eval_mc_samples: 100,
            trace_vfe_samples: 10,
            train_mc_samples: None,
            sigma_init: 1e-4,
            wn_scales: WnScales::default(),
            learn_noise: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the ES iteration budget applied.
    pub fn for_family(family: Family) -> Self {
        let mut c = Self::default();
        if family == Family::Es {
            c.iterations = 2000;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.trace_every == 0 || self.eval_mc_samples == 0 || self.trace_vfe_samples == 0 {
            return bad("trace_every, eval_mc_samples and trace_vfe_samples must be >= 1");
        }
        if self.train_mc_samples == Some(0) {
            return bad("train_mc_samples must be >= 1");
        }
        Ok(())
    }

    pub fn mc_samples(&self, family: Family) -> usize {
        self.train_mc_samples
            .unwrap_or(if family == Family::Fc { 8 } else { 1 })
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], config: &TrainConfig) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: if grads.len() != self.m.len() { grads.len() } else { params.len() },
            });
        }
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub kl: f64,
    pub expected_nll: f64,
    pub vfe: f64,
    /// Mean per-point predictive NLL (original target units).
    pub train_pred_nll: f64,
    /// NaN when no test split was supplied.
    pub test_pred_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    /// Training objective estimate at every step, before the update.
    pub step_objective: Vec<f64>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "iter,kl,expected_nll,vfe,train_pred_nll,test_pred_nll";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let test = if r.test_pred_nll.is_nan() {
                String::new()
            } else {
                r.test_pred_nll.to_string()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.kl, r.expected_nll, r.vfe, r.train_pred_nll, test
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub posterior: VariationalPosterior,
    pub trace: TrainingTrace,
}

/// Objective and gradient over the trainable vector for any family. For
/// ES/MAP `expected_nll` is the NLL at the point and `kl` the prior penalty
/// (zero for ES).
pub fn objective_gradients(
    q: &VariationalPosterior,
    prior: &Prior,
    data: &Dataset,
    n_mc: usize,
    rng: &RngState,
) -> Result<VfeGradients> {
    match q {
        VariationalPosterior::Es { point } | VariationalPosterior::Map { point } => {
            let shape = point.shape();
            let theta = point.to_flat();
            let (kl, mut grad) = kl_gradients(q, prior)?;
            let n = theta.len();
            let (nll, dlog) = nll_grad_flat(shape, &theta, point.log_noise_std, data, &mut grad[..n]);
            grad[n] += dlog;
            Ok(VfeGradients {
                estimate: VfeEstimate {
                    expected_nll: nll,
                    kl,
                    total: nll + kl,
                    n_mc: 1,
                },
                grad,
            })
        }
        _ => vfe_gradients(q, prior, data, n_mc, rng),
    }
}

/// Initializes a posterior of `family` and trains it.
pub fn train(
    family: Family,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    shape: NetworkShape,
    prior: &Prior,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = RngState::new(config.seed).split("init", 0);
    let q = init_posterior(family, shape, config.sigma_init, config.wn_scales, &mut rng)?;
    train_posterior(q, train_data, test_data, prior, config)
}

/// Runs `config.iterations` full-batch Adam steps from `q`.
///
/// Trace records are taken after every `trace_every` steps and after the
/// last one, so there are `⌈iterations/trace_every⌉` of them. With zero
/// iterations a single record of the initial state is produced.
pub fn train_posterior(
    mut q: VariationalPosterior,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    prior: &Prior,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let family = q.family();
    let n_mc = config.mc_samples(family);
    let root = RngState::new(config.seed);
    let mut params = q.trainable();
    let mut adam = Adam::new(params.len());
    let mut trace = TrainingTrace::default();
    let last = params.len() - 1;

    if config.iterations == 0 {
        trace.records.push(record(&q, prior, train_data, test_data, config, &root, 0, 0)?);
    }
    for it in 0..config.iterations {
        let step_rng = root.split("step", it as u64);
        let VfeGradients { estimate, mut grad } = objective_gradients(&q, prior, train_data, n_mc, &step_rng)?;
        if !estimate.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                kl: estimate.kl,
                expected_nll: estimate.expected_nll,
            });
        }
        trace.step_objective.push(estimate.total);
        if !config.learn_noise {
            grad[last] = 0.0;
        }
        adam.step(&mut params, &grad, config)?;
        q.set_trainable(&params)?;
        let done = it + 1;
        if done % config.trace_every == 0 || done == config.iterations {
            let k = trace.records.len();
            let rec = record(&q, prior, train_data, test_data, config, &root, done, k)?;
            if !rec.vfe.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: done,
                    kl: rec.kl,
                    expected_nll: rec.expected_nll,
                });
            }
            trace.records.push(rec);
        }
    }
    Ok(TrainOutcome { posterior: q, trace })
}

#[allow(clippy::too_many_arguments)]
fn record(
    q: &VariationalPosterior,
    prior: &Prior,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    config: &TrainConfig,
    root: &RngState,
    iter: usize,
    k: usize,
) -> Result<TraceRecord> {
    let est = objective_gradients(q, prior, train_data, config.trace_vfe_samples, &root.split("trace-vfe", k as u64))?
        .estimate;
    let eval = root.split("eval", k as u64);
    let train_pred_nll = -mean_predictive_ll(q, train_data, config.eval_mc_samples, &eval.split("train", 0))?;
    let test_pred_nll = match test_data {
        Some(t) => -mean_predictive_ll(q, t, config.eval_mc_samples, &eval.split("test", 0))?,
        None => f64::NAN,
    };
    Ok(TraceRecord {
        iter,
        kl: est.kl,
        expected_nll: est.expected_nll,
        vfe: est.total,
        train_pred_nll,
        test_pred_nll,
    })
}

/// Mean of consecutive windows of `values`; a trailing partial window is dropped.
pub fn windowed_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(3);
        let mut p = vec![0.0; 3];
        adam.step(&mut p, &[3.0, -0.2, 1e-3], &cfg).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * cfg.learning_rate).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn adam_matches_reference_on_quadratic() {
        // hand-rolled reference for f(x) = x²
        let cfg = TrainConfig::default();
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            x -= 0.005 * mh / (vh.sqrt() + 1e-8);
        }
        let mut adam = Adam::new(1);
        let mut p = [1.0];
        for _ in 0..3 {
            let g = [2.0 * p[0]];
            adam.step(&mut p, &g, &cfg).unwrap();
        }
        assert!((p[0] - x).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(2);
        let mut p = vec![0.0; 2];
        assert!(matches!(
            adam.step(&mut p, &[1.0; 3], &TrainConfig::default()),
            Err(Error::ShapeMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::for_family(Family::Es).iterations, 2000);
        assert_eq!(TrainConfig::default().mc_samples(Family::Fc), 8);
        assert_eq!(TrainConfig::default().mc_samples(Family::Mf), 1);
    }

    #[test]
    fn trace_record_count() {
        let x = Matrix::from_vec(6, 1, vec![-1.0, -0.5, 0.0, 0.5, 1.0, 1.5]).unwrap();
        let data = Dataset::new(x, vec![0.1, 0.2, 0.0, -0.3, 0.4, 0.1]).unwrap();
        let shape = NetworkShape::new(1, 3).unwrap();
        let mut cfg = TrainConfig {
            eval_mc_samples: 4,
            trace_vfe_samples: 2,
            ..TrainConfig::default()
        };
        for (iters, every, want) in [(0, 5, 1), (10, 5, 2), (11, 5, 3), (7, 1, 7)] {
            cfg.iterations = iters;
            cfg.trace_every = every;
            let out = train(Family::Mf, &data, None, shape, &Prior::unit(), &cfg).unwrap();
            assert_eq!(out.trace.records.len(), want);
            assert_eq!(out.trace.step_objective.len(), iters);
            for r in &out.trace.records {
                assert_eq!(r.vfe - (r.kl + r.expected_nll), 0.0);
            }
        }
    }

    #[test]
    fn csv_header() {
        let t = TrainingTrace::default();
        assert_eq!(t.to_csv(), "iter,kl,expected_nll,vfe,train_pred_nll,test_pred_nll\n");
    }

    #[test]
    fn windows() {
        assert_eq!(windowed_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
