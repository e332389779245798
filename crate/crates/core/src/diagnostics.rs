//! Posterior predictive evaluation and per-unit over-pruning diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scaler};
use crate::error::{Error, Result};
use crate::network::{forward_flat, gauss_log_lik_unchecked};
use crate::numerics::{dot, log_mean_exp, RngState};
use crate::posterior::{
    expected_nll_gradients, kl_diag_gauss, sample_params, Family, Prior, VariationalPosterior, VfeNoise,
};

/// Per-point predictive log likelihoods `log (1/M) Σ p(yₙ|xₙ, θᵢ)`, with the
/// same `M` weight draws shared across points. When `data` carries a scaler the
/// values are converted to original target units.
pub fn predictive_log_liks(q: &VariationalPosterior, data: &Dataset, m: usize, rng: &RngState) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    let shape = q.shape();
    if data.input_dim() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            got: data.input_dim(),
        });
    }
    let m = if q.family().is_variational() { m } else { 1 };
    let log_std = q.mean().log_noise_std;
    let std = log_std.exp();
    let mut ll = vec![vec![0.0; m]; data.len()];
    for s in 0..m {
        let theta = sample_params(q, &mut rng.split("predictive", s as u64)).to_flat();
        for (n, row) in ll.iter_mut().enumerate() {
            let f = forward_flat(shape, &theta, data.x.row(n));
            row[s] = gauss_log_lik_unchecked(data.y[n], f, log_std, std);
        }
    }
    let correction = data.scaler.as_ref().map_or(0.0, Scaler::log_jacobian);
    ll.iter()
        .map(|row| log_mean_exp(row).map(|v| v + correction))
        .collect()
}

/// Predictive log likelihood of one observation.
pub fn posterior_predictive_ll(
    q: &VariationalPosterior,
    x: &[f64],
    y: f64,
    m: usize,
    scaler: Option<&Scaler>,
    rng: &RngState,
) -> Result<f64> {
    let mut ds = Dataset::new(crate::numerics::Matrix::from_vec(1, x.len(), x.to_vec())?, vec![y])?;
    ds.scaler = scaler.cloned();
    Ok(predictive_log_liks(q, &ds, m, rng)?[0])
}

/// Mean over points of [`predictive_log_liks`].
pub fn mean_predictive_ll(q: &VariationalPosterior, data: &Dataset, m: usize, rng: &RngState) -> Result<f64> {
    let lls = predictive_log_liks(q, data, m, rng)?;
    if lls.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lls.iter().sum::<f64>() / lls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneThresholds {
    pub out_mean_max: f64,
    /// Nats per incoming weight.
    pub incoming_kl_max: f64,
}

impl PruneThresholds {
    pub fn for_prior(prior: &Prior) -> Self {
        Self {
            out_mean_max: 0.1 * prior.std,
            incoming_kl_max: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.out_mean_max > 0.0 && self.incoming_kl_max > 0.0) {
            return Err(Error::InvalidConfig("prune thresholds must be positive".into()));
        }
        Ok(())
    }
}

pub const HIST_BINS: usize = 41;
pub const HIST_LOW: f64 = -1.05;
pub const HIST_HIGH: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit: usize,
    pub out_mean: f64,
    pub out_std: f64,
    /// Averaged over the unit's incoming weights and bias.
    pub mean_incoming_kl: f64,
    pub incoming_means: Vec<f64>,
    pub incoming_stds: Vec<f64>,
    pub activation_histogram: Vec<u64>,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub family: Family,
    pub prior_std: f64,
    pub thresholds: PruneThresholds,
    pub n_samples: usize,
    pub n_points: usize,
    pub histogram_low: f64,
    pub histogram_high: f64,
    pub histogram_bins: usize,
    pub pruned_count: usize,
    pub units: Vec<UnitRecord>,
}

impl PruningReport {
    /// Pruned count under different thresholds, without recomputing statistics.
    pub fn count_pruned(&self, thresholds: &PruneThresholds) -> usize {
        self.units
            .iter()
            .filter(|u| is_pruned(u.out_mean, u.mean_incoming_kl, thresholds))
            .count()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn is_pruned(out_mean: f64, mean_kl: f64, t: &PruneThresholds) -> bool {
    out_mean.abs() < t.out_mean_max && mean_kl < t.incoming_kl_max
}

fn hist_bin(v: f64) -> usize {
    let w = (HIST_HIGH - HIST_LOW) / HIST_BINS as f64;
    (((v - HIST_LOW) / w).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Per-hidden-unit statistics: output-weight marginal, mean incoming KL from
/// the prior, and a histogram of activations over `n_samples` weight draws
/// times every point of `data`.
pub fn unit_report(
    q: &VariationalPosterior,
    prior: &Prior,
    data: &Dataset,
    n_samples: usize,
    thresholds: PruneThresholds,
    rng: &RngState,
) -> Result<PruningReport> {
    thresholds.validate()?;
    let Some(stds) = q.marginal_stds() else {
        return Err(Error::FamilyMismatch {
            family: q.family().to_string(),
            reason: "pruning report needs a distribution over weights".into(),
        });
    };
    let shape = q.shape();
    let (h, d) = (shape.hidden_units, shape.input_dim);
    if data.input_dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: data.input_dim(),
        });
    }
    let mu = q.mean().to_flat();
    let mut hist = vec![vec![0u64; HIST_BINS]; h];
    for s in 0..n_samples {
        let theta = sample_params(q, &mut rng.split("activations", s as u64)).to_flat();
        for n in 0..data.len() {
            let x = data.x.row(n);
            for (j, hj) in hist.iter_mut().enumerate() {
                let a = (dot(&theta[j * d..(j + 1) * d], x) + theta[h * d + j]).tanh();
                hj[hist_bin(a)] += 1;
            }
        }
    }
    let mut units = Vec::with_capacity(h);
    for (j, histogram) in hist.into_iter().enumerate() {
        let idx = shape.incoming_indices(j);
        let mut kl = 0.0;
        for &i in &idx {
            kl += kl_diag_gauss(mu[i], stds[i], prior.std)?;
        }
        let mean_kl = kl / idx.len() as f64;
        let out_mean = mu[shape.v_index(j)];
        units.push(UnitRecord {
            unit: j,
            out_mean,
            out_std: stds[shape.v_index(j)],
            mean_incoming_kl: mean_kl,
            incoming_means: idx.iter().map(|&i| mu[i]).collect(),
            incoming_stds: idx.iter().map(|&i| stds[i]).collect(),
            activation_histogram: histogram,
            pruned: is_pruned(out_mean, mean_kl, &thresholds),
        });
    }
    Ok(PruningReport {
        family: q.family(),
        prior_std: prior.std,
        thresholds,
        n_samples,
        n_points: data.len(),
        histogram_low: HIST_LOW,
        histogram_high: HIST_HIGH,
        histogram_bins: HIST_BINS,
        pruned_count: units.iter().filter(|u| u.pruned).count(),
        units,
    })
}

/// Copy of an MF posterior with `q(v_j)` set to a point mass at zero.
pub fn clamp_output_weight(q: &VariationalPosterior, unit: usize) -> Result<VariationalPosterior> {
    let shape = q.shape();
    if unit >= shape.hidden_units {
        return Err(Error::UnitOutOfRange {
            unit,
            hidden: shape.hidden_units,
        });
    }
    let mut out = q.clone();
    match &mut out {
        VariationalPosterior::Mf { mean, rho } => {
            mean.v[unit] = 0.0;
            rho[shape.v_index(unit)] = f64::NEG_INFINITY;
        }
        other => {
            return Err(Error::FamilyMismatch {
                family: other.family().to_string(),
                reason: "output-weight clamp is defined for MF".into(),
            })
        }
    }
    Ok(out)
}

/// Norm of the expected-NLL gradient over unit `j`'s incoming means and
/// log-scales (weights and bias), without any clamp.
pub fn incoming_nll_gradient_norm(
    q: &VariationalPosterior,
    data: &Dataset,
    unit: usize,
    n_mc: usize,
    rng: &RngState,
) -> Result<f64> {
    let shape = q.shape();
    if unit >= shape.hidden_units {
        return Err(Error::UnitOutOfRange {
            unit,
            hidden: shape.hidden_units,
        });
    }
    if q.family() != Family::Mf {
        return Err(Error::FamilyMismatch {
            family: q.family().to_string(),
            reason: "collapse check is defined for MF".into(),
        });
    }
    let noise = VfeNoise::draw(q, data.len(), n_mc, rng)?;
    let (_, grad) = expected_nll_gradients(q, data, &noise)?;
    let n = shape.n_params();
    let sq: f64 = shape
        .incoming_indices(unit)
        .iter()
        .map(|&i| grad[i] * grad[i] + grad[n + i] * grad[n + i])
        .sum();
    Ok(sq.sqrt())
}

/// Gradient norm on unit `j`'s incoming variational parameters with its
/// output weight clamped to a point mass at zero. Zero up to roundoff.
pub fn collapse_check(q: &VariationalPosterior, data: &Dataset, unit: usize, rng: &RngState) -> Result<f64> {
    let clamped = clamp_output_weight(q, unit)?;
    incoming_nll_gradient_norm(&clamped, data, unit, 4, rng)
}

/// Sampled functions evaluated on a 1-D grid: `values[i][g]` is draw `i` at `x[g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionTable {
    pub x: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FunctionTable {
    /// Columns `x, f0, f1, ...`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x");
        for i in 0..self.values.len() {
            let _ = write!(out, ",f{i}");
        }
        out.push('\n');
        for (g, x) in self.x.iter().enumerate() {
            let _ = write!(out, "{x}");
            for row in &self.values {
                let _ = write!(out, ",{}", row[g]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn sample_functions(
    q: &VariationalPosterior,
    x_grid: &[f64],
    n_functions: usize,
    rng: &RngState,
) -> Result<FunctionTable> {
    if q.family() == Family::Es {
        return Err(Error::FamilyMismatch {
            family: "es".into(),
            reason: "no distribution to sample functions from".into(),
        });
    }
    let shape = q.shape();
    if shape.input_dim != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: shape.input_dim,
        });
    }
    let values = (0..n_functions)
        .map(|i| {
            let theta = sample_params(q, &mut rng.split("functions", i as u64)).to_flat();
            x_grid.iter().map(|&x| forward_flat(shape, &theta, &[x])).collect()
        })
        .collect();
    Ok(FunctionTable {
        x: x_grid.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{gauss_log_lik, NetworkShape, ParamPoint};
    use crate::numerics::Matrix;
    use crate::posterior::{init_posterior, WnScales};

    fn toy_data(d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = RngState::new(seed);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.std_normal()).collect()).unwrap();
        Dataset::new(x, (0..n).map(|_| rng.std_normal()).collect()).unwrap()
    }

    #[test]
    fn single_sample_predictive_equals_likelihood() {
        let mut rng = RngState::new(1);
        let q = init_posterior(Family::Mf, NetworkShape::new(2, 3).unwrap(), 0.3, WnScales::default(), &mut rng).unwrap();
        let root = RngState::new(9);
        let x = [0.5, -0.2];
        let ll = posterior_predictive_ll(&q, &x, 0.7, 1, None, &root).unwrap();
        let theta = sample_params(&q, &mut root.split("predictive", 0));
        let f = crate::network::forward(&theta, &x).unwrap();
        assert!((ll - gauss_log_lik(0.7, f, theta.noise_std()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_predictive_is_sample_free() {
        let mut rng = RngState::new(2);
        let q = init_posterior(
            Family::Wn,
            NetworkShape::new(2, 3).unwrap(),
            1e-4,
            WnScales {
                weight_std: 0.0,
                bias_std: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        let a = posterior_predictive_ll(&q, &[1.0, 2.0], 0.1, 1, None, &rng).unwrap();
        for m in [5, 50] {
            let b = posterior_predictive_ll(&q, &[1.0, 2.0], 0.1, m, None, &rng).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn destandardization_shift() {
        let p = ParamPoint::zeros(NetworkShape::new(1, 2).unwrap());
        let q = VariationalPosterior::Map { point: p };
        let scaler = Scaler {
            x_mean: vec![0.0],
            x_std: vec![1.0],
            y_mean: 3.0,
            y_std: 4.0,
        };
        let rng = RngState::new(0);
        let plain = posterior_predictive_ll(&q, &[0.0], 0.5, 1, None, &rng).unwrap();
        let scaled = posterior_predictive_ll(&q, &[0.0], 0.5, 1, Some(&scaler), &rng).unwrap();
        assert!((plain - scaled - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fresh_mf_prunes_nothing() {
        let mut rng = RngState::new(3);
        let q = init_posterior(Family::Mf, NetworkShape::new(13, 50).unwrap(), 1e-4, WnScales::default(), &mut rng).unwrap();
        let prior = Prior::unit();
        let data = toy_data(13, 20, 4);
        let r = unit_report(&q, &prior, &data, 25, PruneThresholds::for_prior(&prior), &rng).unwrap();
        assert_eq!(r.units.len(), 50);
        assert_eq!(r.pruned_count, 0);
        for u in &r.units {
            assert!(u.mean_incoming_kl > 8.71);
            assert_eq!(u.activation_histogram.iter().sum::<u64>(), 25 * 20);
        }
    }

    #[test]
    fn unit_at_prior_is_pruned() {
        let mut rng = RngState::new(5);
        let shape = NetworkShape::new(3, 4).unwrap();
        let mut q = init_posterior(Family::Mf, shape, 1e-4, WnScales::default(), &mut rng).unwrap();
        if let VariationalPosterior::Mf { mean, rho } = &mut q {
            for i in shape.incoming_indices(2) {
                rho[i] = 0.0;
            }
            mean.w.row_mut(2).iter_mut().for_each(|w| *w = 0.0);
            mean.b_w[2] = 0.0;
            mean.v[2] = 0.0;
        }
        let prior = Prior::unit();
        let r = unit_report(&q, &prior, &toy_data(3, 5, 1), 3, PruneThresholds::for_prior(&prior), &rng).unwrap();
        let flagged: Vec<usize> = r.units.iter().filter(|u| u.pruned).map(|u| u.unit).collect();
        assert_eq!(flagged, vec![2]);
    }

    #[test]
    fn report_rejects_point_families() {
        let q = VariationalPosterior::Es {
            point: ParamPoint::zeros(NetworkShape::new(1, 2).unwrap()),
        };
        let prior = Prior::unit();
        let rng = RngState::new(0);
        assert!(matches!(
            unit_report(&q, &prior, &toy_data(1, 3, 0), 2, PruneThresholds::for_prior(&prior), &rng),
            Err(Error::FamilyMismatch { .. })
        ));
        assert!(sample_functions(&q, &[0.0], 2, &rng).is_err());
    }

    #[test]
    fn clamp_checks() {
        let mut rng = RngState::new(6);
        let q = init_posterior(Family::Mf, NetworkShape::new(2, 3).unwrap(), 0.1, WnScales::default(), &mut rng).unwrap();
        assert!(matches!(clamp_output_weight(&q, 3), Err(Error::UnitOutOfRange { unit: 3, hidden: 3 })));
        let data = toy_data(2, 8, 1);
        assert_eq!(collapse_check(&q, &data, 1, &rng).unwrap(), 0.0);
        assert!(incoming_nll_gradient_norm(&q, &data, 1, 4, &rng).unwrap() > 0.0);
    }

    #[test]
    fn single_unit_clamp_gives_constant_output() {
        let mut rng = RngState::new(7);
        let q = init_posterior(Family::Mf, NetworkShape::new(2, 1).unwrap(), 0.2, WnScales::default(), &mut rng).unwrap();
        let c = clamp_output_weight(&q, 0).unwrap();
        for s in 0..5 {
            let theta = sample_params(&c, &mut rng.split("t", s));
            assert_eq!(theta.v[0], 0.0);
            for x in [[0.0, 1.0], [3.0, -2.0]] {
                assert_eq!(crate::network::forward(&theta, &x).unwrap(), theta.b_v);
            }
        }
    }

    #[test]
    fn function_table_shapes() {
        let mut rng = RngState::new(8);
        let shape = NetworkShape::new(1, 4).unwrap();
        let q = init_posterior(Family::Map, shape, 0.1, WnScales::default(), &mut rng).unwrap();
        let t = sample_functions(&q, &[-1.0, 0.0, 1.0], 3, &rng).unwrap();
        assert!(t.values.windows(2).all(|w| w[0] == w[1]));
        let q = init_posterior(Family::Mf, shape, 0.1, WnScales::default(), &mut rng).unwrap();
        let t = sample_functions(&q, &[0.25], 6, &rng).unwrap();
        assert_eq!((t.values.len(), t.values[0].len()), (6, 1));
        assert!(t.to_csv().starts_with("x,f0,f1,f2,f3,f4,f5\n0.25,"));
    }

    #[test]
    fn threshold_tightening_never_adds_pruned_units() {
        let mut rng = RngState::new(9);
        let shape = NetworkShape::new(2, 12).unwrap();
        let mut q = init_posterior(Family::Mf, shape, 1e-4, WnScales::default(), &mut rng).unwrap();
        if let VariationalPosterior::Mf { mean, rho } = &mut q {
            for j in 0..12 {
                let spread = j as f64 / 12.0;
                for i in shape.incoming_indices(j) {
                    rho[i] = -spread;
                }
                mean.v[j] = 0.02 * j as f64;
            }
        }
        let prior = Prior::unit();
        let base = PruneThresholds {
            out_mean_max: 1.0,
            incoming_kl_max: 1.0,
        };
        let r = unit_report(&q, &prior, &toy_data(2, 3, 0), 1, base, &rng).unwrap();
        let mut last = r.count_pruned(&base);
        for k in 1..20 {
            let f = 0.8f64.powi(k);
            let t = PruneThresholds {
                out_mean_max: base.out_mean_max * f,
                incoming_kl_max: base.incoming_kl_max * f,
            };
            let c = r.count_pruned(&t);
            assert!(c <= last);
            last = c;
        }
    }
}
