//! The five inference families, closed-form KL terms and the stochastic
//! variational free energy (VFE) with reparameterization gradients.
//!
//! Every posterior exposes a flat *trainable* vector, the thing the optimizer
//! updates:
//!
//! | family | trainable layout |
//! |--------|------------------|
//! | ES, MAP | `θ`, `log_noise_std` |
//! | WN | `μ`, `log_noise_std` |
//! | MF | `μ`, `ρ` (σ = exp ρ), `log_noise_std` |
//! | FC | `μ`, packed input-layer factor, packed output-layer factor, `log_noise_std` |
//!
//! `θ`/`μ` follow the flat layout of [`crate::network`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{nll_grad_flat, NetworkShape, ParamPoint, HALF_LN_2PI};
use crate::numerics::{dot, LowerTriangular, Matrix, RngState};

/// Isotropic Gaussian prior shared by every weight and bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub std: f64,
}

impl Prior {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::NonPositiveScale(std));
        }
        Ok(Self { std })
    }

    pub fn unit() -> Self {
        Self { std: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Maximum likelihood, fixed iteration budget.
    Es,
    /// Maximum a posteriori under the Gaussian prior.
    Map,
    /// Weight noise: diagonal Gaussian with fixed stds.
    Wn,
    /// Mean field: diagonal Gaussian with learned stds.
    Mf,
    /// Full covariance within each layer.
    Fc,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Es, Family::Map, Family::Wn, Family::Mf, Family::Fc];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Es => "es",
            Family::Map => "map",
            Family::Wn => "wn",
            Family::Mf => "mf",
            Family::Fc => "fc",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Family::Wn | Family::Mf | Family::Fc)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "es" => Ok(Family::Es),
            "map" => Ok(Family::Map),
            "wn" => Ok(Family::Wn),
            "mf" => Ok(Family::Mf),
            "fc" => Ok(Family::Fc),
            other => Err(Error::InvalidConfig(format!("unknown family {other:?}"))),
        }
    }
}

/// Unconstrained Cholesky parameters, packed row-major over the lower
/// triangle. Diagonal entries hold `ln L_ii`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedCholesky {
    pub dim: usize,
    pub raw: Vec<f64>,
}

impl PackedCholesky {
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut raw = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            raw[Self::index(i, i)] = scale.ln();
        }
        Self { dim, raw }
    }

    #[inline]
    pub fn index(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    /// `L` with positive diagonal.
    pub fn factor(&self) -> LowerTriangular {
        let mut m = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in 0..i {
                m[(i, j)] = self.raw[Self::index(i, j)];
            }
            m[(i, i)] = self.raw[Self::index(i, i)].exp();
        }
        LowerTriangular::from_matrix(m).expect("square")
    }

    pub fn from_factor(l: &LowerTriangular) -> Result<Self> {
        let dim = l.dim();
        let m = l.as_matrix();
        let mut raw = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            for j in 0..i {
                raw[Self::index(i, j)] = m[(i, j)];
            }
            if !(m[(i, i)] > 0.0) {
                return Err(Error::NonPositiveScale(m[(i, i)]));
            }
            raw[Self::index(i, i)] = m[(i, i)].ln();
        }
        Ok(Self { dim, raw })
    }

    /// Writes `mu + L·eps` into `out`.
    fn affine(&self, mu: &[f64], eps: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let row = &self.raw[Self::index(i, 0)..Self::index(i, i)];
            let diag = self.raw[Self::index(i, i)].exp();
            out[i] = mu[i] + dot(row, &eps[..i]) + diag * eps[i];
        }
    }

    /// Marginal standard deviations, `sqrt(diag(L·Lᵀ))`.
    pub fn marginal_stds(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let off: f64 = self.raw[Self::index(i, 0)..Self::index(i, i)].iter().map(|v| v * v).sum();
                (off + (2.0 * self.raw[Self::index(i, i)]).exp()).sqrt()
            })
            .collect()
    }
}

/// Approximate posterior over the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum VariationalPosterior {
    Es {
        point: ParamPoint,
    },
    Map {
        point: ParamPoint,
    },
    Wn {
        mean: ParamPoint,
        weight_std: f64,
        bias_std: f64,
    },
    Mf {
        mean: ParamPoint,
        rho: Vec<f64>,
    },
    Fc {
        mean: ParamPoint,
        input_layer: PackedCholesky,
        output_layer: PackedCholesky,
    },
}

/// Fixed standard deviations of the weight-noise family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WnScales {
    pub weight_std: f64,
    pub bias_std: f64,
}

impl Default for WnScales {
    fn default() -> Self {
        Self {
            weight_std: 0.1,
            bias_std: 0.1,
        }
    }
}

/// Draws means from `Normal(0, 1/fan_in)` and sets every scale to
/// `sigma_init` (WN uses `wn` instead).
pub fn init_posterior(
    family: Family,
    shape: NetworkShape,
    sigma_init: f64,
    wn: WnScales,
    rng: &mut RngState,
) -> Result<VariationalPosterior> {
    if !(sigma_init > 0.0 && sigma_init.is_finite()) {
        return Err(Error::InvalidSigmaInit(sigma_init));
    }
    let mut r = rng.split("init-means", 0);
    let in_scale = 1.0 / (shape.input_dim as f64).sqrt();
    let out_scale = 1.0 / (shape.hidden_units as f64).sqrt();
    let flat: Vec<f64> = (0..shape.n_params())
        .map(|i| {
            let s = if i < shape.input_layer_len() { in_scale } else { out_scale };
            s * r.std_normal()
        })
        .collect();
    let mean = ParamPoint::from_flat(shape, &flat, 0.0)?;
    Ok(match family {
        Family::Es => VariationalPosterior::Es { point: mean },
        Family::Map => VariationalPosterior::Map { point: mean },
        Family::Wn => {
            if !(wn.weight_std >= 0.0 && wn.bias_std >= 0.0) {
                return Err(Error::NonPositiveScale(wn.weight_std.min(wn.bias_std)));
            }
            VariationalPosterior::Wn {
                mean,
                weight_std: wn.weight_std,
                bias_std: wn.bias_std,
            }
        }
        Family::Mf => VariationalPosterior::Mf {
            mean,
            rho: vec![sigma_init.ln(); shape.n_params()],
        },
        Family::Fc => VariationalPosterior::Fc {
            mean,
            input_layer: PackedCholesky::scaled_identity(shape.input_layer_len(), sigma_init),
            output_layer: PackedCholesky::scaled_identity(shape.output_layer_len(), sigma_init),
        },
    })
}

impl VariationalPosterior {
    pub fn family(&self) -> Family {
        match self {
            VariationalPosterior::Es { .. } => Family::Es,
            VariationalPosterior::Map { .. } => Family::Map,
            VariationalPosterior::Wn { .. } => Family::Wn,
            VariationalPosterior::Mf { .. } => Family::Mf,
            VariationalPosterior::Fc { .. } => Family::Fc,
        }
    }

    pub fn mean(&self) -> &ParamPoint {
        match self {
            VariationalPosterior::Es { point } | VariationalPosterior::Map { point } => point,
            VariationalPosterior::Wn { mean, .. }
            | VariationalPosterior::Mf { mean, .. }
            | VariationalPosterior::Fc { mean, .. } => mean,
        }
    }

    pub fn mean_mut(&mut self) -> &mut ParamPoint {
        match self {
            VariationalPosterior::Es { point } | VariationalPosterior::Map { point } => point,
            VariationalPosterior::Wn { mean, .. }
            | VariationalPosterior::Mf { mean, .. }
            | VariationalPosterior::Fc { mean, .. } => mean,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        self.mean().shape()
    }

    fn mismatch(&self, reason: &str) -> Error {
        Error::FamilyMismatch {
            family: self.family().to_string(),
            reason: reason.to_string(),
        }
    }

    /// Per-parameter marginal stds in flat layout; `None` for point families.
    pub fn marginal_stds(&self) -> Option<Vec<f64>> {
        let shape = self.shape();
        match self {
            VariationalPosterior::Es { .. } | VariationalPosterior::Map { .. } => None,
            VariationalPosterior::Wn {
                weight_std, bias_std, ..
            } => Some(
                (0..shape.n_params())
                    .map(|i| if shape.is_bias(i) { *bias_std } else { *weight_std })
                    .collect(),
            ),
            VariationalPosterior::Mf { rho, .. } => Some(rho.iter().map(|r| r.exp()).collect()),
            VariationalPosterior::Fc {
                input_layer,
                output_layer,
                ..
            } => {
                let mut s = input_layer.marginal_stds();
                s.extend(output_layer.marginal_stds());
                Some(s)
            }
        }
    }

    /// Number of entries in the trainable vector.
    pub fn trainable_len(&self) -> usize {
        let n = self.shape().n_params();
        match self {
            VariationalPosterior::Es { .. } | VariationalPosterior::Map { .. } | VariationalPosterior::Wn { .. } => n + 1,
            VariationalPosterior::Mf { .. } => 2 * n + 1,
            VariationalPosterior::Fc {
                input_layer,
                output_layer,
                ..
            } => n + input_layer.raw.len() + output_layer.raw.len() + 1,
        }
    }

    pub fn trainable(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = mean.to_flat();
        match self {
            VariationalPosterior::Mf { rho, .. } => out.extend_from_slice(rho),
            VariationalPosterior::Fc {
                input_layer,
                output_layer,
                ..
            } => {
                out.extend_from_slice(&input_layer.raw);
                out.extend_from_slice(&output_layer.raw);
            }
            _ => {}
        }
        out.push(mean.log_noise_std);
        out
    }

    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_len() {
            return Err(Error::ShapeMismatch {
                expected: self.trainable_len(),
                got: values.len(),
            });
        }
        let shape = self.shape();
        let n = shape.n_params();
        let log_noise = values[values.len() - 1];
        *self.mean_mut() = ParamPoint::from_flat(shape, &values[..n], log_noise)?;
        match self {
            VariationalPosterior::Mf { rho, .. } => rho.copy_from_slice(&values[n..2 * n]),
            VariationalPosterior::Fc {
                input_layer,
                output_layer,
                ..
            } => {
                let a = input_layer.raw.len();
                input_layer.raw.copy_from_slice(&values[n..n + a]);
                output_layer.raw.copy_from_slice(&values[n + a..values.len() - 1]);
            }
            _ => {}
        }
        Ok(())
    }

    /// Pre-activations of the hidden layer for input `x` via local
    /// reparameterization. Diagonal families only.
    pub fn local_reparam_hidden(&self, x: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
        let shape = self.shape();
        let stds = match self {
            VariationalPosterior::Wn { .. } | VariationalPosterior::Mf { .. } => self.marginal_stds().expect("diagonal"),
            VariationalPosterior::Es { .. } | VariationalPosterior::Map { .. } => vec![0.0; shape.n_params()],
            VariationalPosterior::Fc { .. } => {
                return Err(self.mismatch("local reparameterization needs a diagonal family"))
            }
        };
        let mean = self.mean();
        let hd = shape.hidden_units * shape.input_dim;
        let sigma_w = Matrix::from_vec(shape.hidden_units, shape.input_dim, stds[..hd].to_vec())?;
        let sigma_b = &stds[hd..shape.input_layer_len()];
        local_reparam_layer(&mean.w, &sigma_w, &mean.b_w, sigma_b, x, rng)
    }
}

/// Draws `θ ~ q`. Point families return their point.
pub fn sample_params(q: &VariationalPosterior, rng: &mut RngState) -> ParamPoint {
    let shape = q.shape();
    let mean = q.mean();
    match q {
        VariationalPosterior::Es { point } | VariationalPosterior::Map { point } => point.clone(),
        VariationalPosterior::Wn { .. } | VariationalPosterior::Mf { .. } => {
            let stds = q.marginal_stds().expect("diagonal");
            let flat: Vec<f64> = mean
                .to_flat()
                .iter()
                .zip(&stds)
                .map(|(m, s)| m + s * rng.std_normal())
                .collect();
            ParamPoint::from_flat(shape, &flat, mean.log_noise_std).expect("shape")
        }
        VariationalPosterior::Fc {
            input_layer,
            output_layer,
            ..
        } => {
            let mu = mean.to_flat();
            let mut eps = vec![0.0; mu.len()];
            rng.fill_std_normal(&mut eps);
            let theta = fc_sample(&mu, input_layer, output_layer, &eps);
            ParamPoint::from_flat(shape, &theta, mean.log_noise_std).expect("shape")
        }
    }
}

fn fc_sample(mu: &[f64], input: &PackedCholesky, output: &PackedCholesky, eps: &[f64]) -> Vec<f64> {
    let k = input.dim;
    let mut theta = vec![0.0; mu.len()];
    input.affine(&mu[..k], &eps[..k], &mut theta[..k]);
    output.affine(&mu[k..], &eps[k..], &mut theta[k..]);
    theta
}

/// Samples `aⱼ ~ Normal(μ_Wⱼ·x + μ_bⱼ, Σᵢ σ²_Wⱼᵢ xᵢ² + σ²_bⱼ)` independently per unit.
pub fn local_reparam_layer(
    mu_w: &Matrix,
    sigma_w: &Matrix,
    mu_b: &[f64],
    sigma_b: &[f64],
    x: &[f64],
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let h = mu_w.rows();
    if mu_w.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: mu_w.cols(),
            got: x.len(),
        });
    }
    for len in [sigma_w.rows(), mu_b.len(), sigma_b.len()] {
        if len != h {
            return Err(Error::DimensionMismatch { expected: h, got: len });
        }
    }
    Ok((0..h)
        .map(|j| {
            let m = dot(mu_w.row(j), x) + mu_b[j];
            let var: f64 = sigma_w
                .row(j)
                .iter()
                .zip(x)
                .map(|(s, xi)| s * s * xi * xi)
                .sum::<f64>()
                + sigma_b[j] * sigma_b[j];
            m + var.sqrt() * rng.std_normal()
        })
        .collect())
}

/// `KL(Normal(mu, sigma²) ‖ Normal(0, prior_std²))`.
pub fn kl_diag_gauss(mu: f64, sigma: f64, prior_std: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveScale(sigma));
    }
    if !(prior_std > 0.0) {
        return Err(Error::NonPositiveScale(prior_std));
    }
    Ok(kl_diag_unchecked(mu, sigma.ln(), sigma, prior_std))
}

#[inline]
fn kl_diag_unchecked(mu: f64, log_sigma: f64, sigma: f64, prior_std: f64) -> f64 {
    prior_std.ln() - log_sigma + (sigma * sigma + mu * mu) / (2.0 * prior_std * prior_std) - 0.5
}

/// `KL(Normal(mu, L·Lᵀ) ‖ Normal(0, prior_std²·I))`.
pub fn kl_full_gauss(mu: &[f64], l: &LowerTriangular, prior_std: f64) -> Result<f64> {
    if !(prior_std > 0.0) {
        return Err(Error::NonPositiveScale(prior_std));
    }
    if mu.len() != l.dim() {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            got: mu.len(),
        });
    }
    let mut log_det = 0.0;
    for d in l.diag() {
        if !(d > 0.0) {
            return Err(Error::NonPositiveScale(d));
        }
        log_det += d.ln();
    }
    let tr: f64 = l.as_matrix().as_slice().iter().map(|v| v * v).sum();
    Ok(full_kl_terms(mu, tr, log_det, prior_std))
}

fn full_kl_terms(mu: &[f64], trace: f64, log_diag_sum: f64, prior_std: f64) -> f64 {
    let k = mu.len() as f64;
    let s2 = prior_std * prior_std;
    let mu2: f64 = mu.iter().map(|v| v * v).sum();
    0.5 * (trace / s2 + mu2 / s2 - k + k * s2.ln() - 2.0 * log_diag_sum)
}

fn packed_kl(mu: &[f64], packed: &PackedCholesky, prior_std: f64) -> f64 {
    let mut trace = 0.0;
    let mut log_diag = 0.0;
    for i in 0..packed.dim {
        for j in 0..i {
            trace += packed.raw[PackedCholesky::index(i, j)].powi(2);
        }
        let r = packed.raw[PackedCholesky::index(i, i)];
        trace += (2.0 * r).exp();
        log_diag += r;
    }
    full_kl_terms(mu, trace, log_diag, prior_std)
}

/// Closed-form `KL(q ‖ prior)` and its gradient over the trainable vector.
/// ES has no prior term; MAP reports the negative log prior up to a constant.
pub fn kl_gradients(q: &VariationalPosterior, prior: &Prior) -> Result<(f64, Vec<f64>)> {
    let s = prior.std;
    if !(s > 0.0) {
        return Err(Error::NonPositiveScale(s));
    }
    let inv_s2 = 1.0 / (s * s);
    let mu = q.mean().to_flat();
    let n = mu.len();
    let mut grad = vec![0.0; q.trainable_len()];
    let kl = match q {
        VariationalPosterior::Es { .. } => 0.0,
        VariationalPosterior::Map { .. } => {
            let mut kl = 0.0;
            for i in 0..n {
                kl += 0.5 * mu[i] * mu[i] * inv_s2;
                grad[i] = mu[i] * inv_s2;
            }
            kl
        }
        VariationalPosterior::Wn { .. } => {
            let stds = q.marginal_stds().expect("diagonal");
            let mut kl = 0.0;
            for i in 0..n {
                kl += kl_diag_gauss(mu[i], stds[i], s)?;
                grad[i] = mu[i] * inv_s2;
            }
            kl
        }
        VariationalPosterior::Mf { rho, .. } => {
            let mut kl = 0.0;
            for i in 0..n {
                let sigma = rho[i].exp();
                kl += kl_diag_unchecked(mu[i], rho[i], sigma, s);
                grad[i] = mu[i] * inv_s2;
                grad[n + i] = sigma * sigma * inv_s2 - 1.0;
            }
            kl
        }
        VariationalPosterior::Fc {
            input_layer,
            output_layer,
            ..
        } => {
            let k = input_layer.dim;
            let kl = packed_kl(&mu[..k], input_layer, s) + packed_kl(&mu[k..], output_layer, s);
            for i in 0..n {
                grad[i] = mu[i] * inv_s2;
            }
            let mut offset = n;
            for packed in [input_layer, output_layer] {
                for i in 0..packed.dim {
                    for j in 0..i {
                        let idx = PackedCholesky::index(i, j);
                        grad[offset + idx] = packed.raw[idx] * inv_s2;
                    }
                    let idx = PackedCholesky::index(i, i);
                    grad[offset + idx] = (2.0 * packed.raw[idx]).exp() * inv_s2 - 1.0;
                }
                offset += packed.raw.len();
            }
            kl
        }
    };
    Ok((kl, grad))
}

pub fn kl_divergence(q: &VariationalPosterior, prior: &Prior) -> Result<f64> {
    Ok(kl_gradients(q, prior)?.0)
}

/// Frozen standard-normal noise for one VFE evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum VfeNoise {
    /// Per MC sample: `N × (H+1)` values, hidden units then the output.
    Local { hidden: usize, samples: Vec<Vec<f64>> },
    /// Per MC sample: one value per weight and bias.
    Weights { samples: Vec<Vec<f64>> },
}

impl VfeNoise {
    /// Sample `m` is drawn from `rng.split("mc", m)`.
    pub fn draw(q: &VariationalPosterior, n_points: usize, n_mc: usize, rng: &RngState) -> Result<Self> {
        let shape = q.shape();
        match q.family() {
            Family::Es | Family::Map => Err(q.mismatch("VFE needs a variational family")),
            Family::Wn | Family::Mf => Ok(VfeNoise::Local {
                hidden: shape.hidden_units,
                samples: (0..n_mc)
                    .map(|m| {
                        let mut v = vec![0.0; n_points * (shape.hidden_units + 1)];
                        rng.split("mc", m as u64).fill_std_normal(&mut v);
                        v
                    })
                    .collect(),
            }),
            Family::Fc => Ok(VfeNoise::Weights {
                samples: (0..n_mc)
                    .map(|m| {
                        let mut v = vec![0.0; shape.n_params()];
                        rng.split("mc", m as u64).fill_std_normal(&mut v);
                        v
                    })
                    .collect(),
            }),
        }
    }

    pub fn n_mc(&self) -> usize {
        match self {
            VfeNoise::Local { samples, .. } | VfeNoise::Weights { samples } => samples.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfeEstimate {
    pub expected_nll: f64,
    pub kl: f64,
    pub total: f64,
    pub n_mc: usize,
}

#[derive(Debug, Clone)]
pub struct VfeGradients {
    pub estimate: VfeEstimate,
    /// Aligned with [`VariationalPosterior::trainable`].
    pub grad: Vec<f64>,
}

/// Monte Carlo estimate of `−E_q[log p(Y|X,θ)]` and its reparameterization
/// gradient over the trainable vector, under frozen noise.
pub fn expected_nll_gradients(
    q: &VariationalPosterior,
    data: &Dataset,
    noise: &VfeNoise,
) -> Result<(f64, Vec<f64>)> {
    let shape = q.shape();
    if data.input_dim() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            got: data.input_dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = shape.n_params();
    let mut grad = vec![0.0; q.trainable_len()];
    let log_idx = grad.len() - 1;
    let mean = q.mean();
    let mu = mean.to_flat();
    let n_mc = noise.n_mc();
    if n_mc == 0 {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    match (q, noise) {
        (VariationalPosterior::Wn { .. } | VariationalPosterior::Mf { .. }, VfeNoise::Local { hidden, samples }) => {
            if *hidden != shape.hidden_units || samples.iter().any(|s| s.len() != data.len() * (hidden + 1)) {
                return Err(Error::ShapeMismatch {
                    expected: data.len() * (shape.hidden_units + 1),
                    got: samples.first().map_or(0, Vec::len),
                });
            }
            let sd = q.marginal_stds().expect("diagonal");
            let mut g_mu = vec![0.0; n];
            let mut g_sd = vec![0.0; n];
            let mut g_log = 0.0;
            for eps in samples {
                total += local_nll_grad(shape, &mu, &sd, mean.log_noise_std, data, eps, &mut g_mu, &mut g_sd, &mut g_log);
            }
            grad[..n].copy_from_slice(&g_mu);
            if let VariationalPosterior::Mf { .. } = q {
                for i in 0..n {
                    grad[n + i] = g_sd[i] * sd[i];
                }
            }
            grad[log_idx] = g_log;
        }
        (
            VariationalPosterior::Fc {
                input_layer,
                output_layer,
                ..
            },
            VfeNoise::Weights { samples },
        ) => {
            let k = input_layer.dim;
            let mut g_theta = vec![0.0; n];
            for eps in samples {
                if eps.len() != n {
                    return Err(Error::ShapeMismatch { expected: n, got: eps.len() });
                }
                let theta = fc_sample(&mu, input_layer, output_layer, eps);
                g_theta.iter_mut().for_each(|g| *g = 0.0);
                let (nll, dlog) = nll_grad_flat(shape, &theta, mean.log_noise_std, data, &mut g_theta);
                total += nll;
                grad[log_idx] += dlog;
                for i in 0..n {
                    grad[i] += g_theta[i];
                }
                let mut offset = n;
                for (packed, g, e) in [
                    (input_layer, &g_theta[..k], &eps[..k]),
                    (output_layer, &g_theta[k..], &eps[k..]),
                ] {
                    for i in 0..packed.dim {
                        let base = offset + PackedCholesky::index(i, 0);
                        let gi = g[i];
                        if gi != 0.0 {
                            for (gr, &ej) in grad[base..base + i].iter_mut().zip(&e[..i]) {
                                *gr += gi * ej;
                            }
                        }
                        let diag = packed.raw[PackedCholesky::index(i, i)].exp();
                        grad[base + i] += gi * e[i] * diag;
                    }
                    offset += packed.raw.len();
                }
            }
        }
        (VariationalPosterior::Es { .. } | VariationalPosterior::Map { .. }, _) => {
            return Err(q.mismatch("VFE needs a variational family"))
        }
        _ => return Err(q.mismatch("noise was drawn for a different family")),
    }
    let inv = 1.0 / n_mc as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// One MC sample of the summed NLL with both layers locally reparameterized.
/// Accumulates gradients w.r.t. means, stds and the log noise std.
#[allow(clippy::too_many_arguments)]
fn local_nll_grad(
    shape: NetworkShape,
    mu: &[f64],
    sd: &[f64],
    log_noise_std: f64,
    data: &Dataset,
    eps: &[f64],
    g_mu: &mut [f64],
    g_sd: &mut [f64],
    g_log: &mut f64,
) -> f64 {
    let (h, d) = (shape.hidden_units, shape.input_dim);
    let hd = h * d;
    let (bw, v, bv) = (hd, hd + h, hd + 2 * h);
    let var: Vec<f64> = sd.iter().map(|s| s * s).collect();
    let noise_std = log_noise_std.exp();
    let inv_var = 1.0 / (noise_std * noise_std);
    let mut act = vec![0.0; h];
    let mut hid_sd = vec![0.0; h];
    let mut x2 = vec![0.0; d];
    let mut total = 0.0;
    for n in 0..data.len() {
        let x = data.x.row(n);
        for (q, &xi) in x2.iter_mut().zip(x) {
            *q = xi * xi;
        }
        let e = &eps[n * (h + 1)..(n + 1) * (h + 1)];
        let mut out_mean = mu[bv];
        let mut out_var = var[bv];
        for j in 0..h {
            let m = dot(&mu[j * d..(j + 1) * d], x) + mu[bw + j];
            let s2 = dot(&var[j * d..(j + 1) * d], &x2) + var[bw + j];
            let s = s2.sqrt();
            hid_sd[j] = s;
            let a = (m + s * e[j]).tanh();
            act[j] = a;
            out_mean += mu[v + j] * a;
            out_var += var[v + j] * a * a;
        }
        let out_sd = out_var.sqrt();
        let f = out_mean + out_sd * e[h];
        let r = f - data.y[n];
        total += HALF_LN_2PI + log_noise_std + 0.5 * r * r * inv_var;
        *g_log += 1.0 - r * r * inv_var;

        let gf = r * inv_var;
        // ∂/∂out_sd = gf·ε; out_sd = sqrt(Σ σ_v² h² + σ_bv²)
        let c_out = if out_sd > 0.0 { gf * e[h] / out_sd } else { 0.0 };
        g_mu[bv] += gf;
        g_sd[bv] += c_out * sd[bv];
        for j in 0..h {
            let a = act[j];
            g_mu[v + j] += gf * a;
            g_sd[v + j] += c_out * sd[v + j] * a * a;
            let dh = gf * mu[v + j] + c_out * var[v + j] * a;
            let da = dh * (1.0 - a * a);
            if da == 0.0 {
                continue;
            }
            let c_in = if hid_sd[j] > 0.0 { da * e[j] / hid_sd[j] } else { 0.0 };
            let row = j * d..(j + 1) * d;
            for ((gm, gs), (&xi, (&xx, &s))) in g_mu[row.clone()]
                .iter_mut()
                .zip(g_sd[row.clone()].iter_mut())
                .zip(x.iter().zip(x2.iter().zip(&sd[row])))
            {
                *gm += da * xi;
                *gs += c_in * s * xx;
            }
            g_mu[bw + j] += da;
            g_sd[bw + j] += c_in * sd[bw + j];
        }
    }
    total
}

/// Gradients of the frozen-noise VFE over the trainable vector. WN gradients
/// are non-zero only for means and the noise parameter.
pub fn vfe_gradients_with_noise(
    q: &VariationalPosterior,
    prior: &Prior,
    data: &Dataset,
    noise: &VfeNoise,
) -> Result<VfeGradients> {
    let (expected_nll, mut grad) = expected_nll_gradients(q, data, noise)?;
    let (kl, kl_grad) = kl_gradients(q, prior)?;
    grad.iter_mut().zip(&kl_grad).for_each(|(g, k)| *g += k);
    Ok(VfeGradients {
        estimate: VfeEstimate {
            expected_nll,
            kl,
            total: expected_nll + kl,
            n_mc: noise.n_mc(),
        },
        grad,
    })
}

pub fn vfe_gradients(
    q: &VariationalPosterior,
    prior: &Prior,
    data: &Dataset,
    n_mc: usize,
    rng: &RngState,
) -> Result<VfeGradients> {
    let noise = VfeNoise::draw(q, data.len(), n_mc, rng)?;
    vfe_gradients_with_noise(q, prior, data, &noise)
}

/// Stochastic VFE: MC expected NLL (local reparameterization for WN/MF, full
/// weight sampling for FC) plus closed-form KL.
pub fn vfe_estimate(
    q: &VariationalPosterior,
    prior: &Prior,
    data: &Dataset,
    n_mc: usize,
    rng: &RngState,
) -> Result<VfeEstimate> {
    if n_mc == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(vfe_gradients(q, prior, data, n_mc, rng)?.estimate)
}
