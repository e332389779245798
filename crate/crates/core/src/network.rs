//! Single-hidden-layer tanh network `f(x) = V·tanh(W·x + b_w) + b_v` with a
//! homoscedastic Gaussian observation model.
//!
//! Parameters are often handled as one flat vector with the layout
//! `[W (row-major, H×D) | b_w (H) | V (H) | b_v (1)]`. The first `H·(D+1)`
//! entries form the input layer, the remaining `H+1` the output layer.
//! `log_noise_std` is never part of the flat vector.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngState};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_units: usize,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_units: usize) -> Result<Self> {
        if input_dim == 0 || hidden_units == 0 {
            return Err(Error::InvalidConfig(format!(
                "network needs input_dim >= 1 and hidden_units >= 1, got D={input_dim}, H={hidden_units}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_units,
        })
    }

    /// Number of weights and biases (excludes the noise parameter).
    pub fn n_params(&self) -> usize {
        self.input_layer_len() + self.output_layer_len()
    }

    pub fn input_layer_len(&self) -> usize {
        self.hidden_units * (self.input_dim + 1)
    }

    pub fn output_layer_len(&self) -> usize {
        self.hidden_units + 1
    }

    pub fn w_index(&self, unit: usize, input: usize) -> usize {
        unit * self.input_dim + input
    }

    pub fn bw_index(&self, unit: usize) -> usize {
        self.hidden_units * self.input_dim + unit
    }

    pub fn v_index(&self, unit: usize) -> usize {
        self.input_layer_len() + unit
    }

    pub fn bv_index(&self) -> usize {
        self.n_params() - 1
    }

    /// Flat indices of unit `j`'s incoming weights followed by its bias.
    pub fn incoming_indices(&self, unit: usize) -> Vec<usize> {
        (0..self.input_dim)
            .map(|i| self.w_index(unit, i))
            .chain(std::iter::once(self.bw_index(unit)))
            .collect()
    }

    /// True for flat indices that hold biases.
    pub fn is_bias(&self, index: usize) -> bool {
        let hd = self.hidden_units * self.input_dim;
        (hd..self.input_layer_len()).contains(&index) || index == self.bv_index()
    }
}

/// One concrete weight setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub w: Matrix,
    pub b_w: Vec<f64>,
    pub v: Vec<f64>,
    pub b_v: f64,
    pub log_noise_std: f64,
}

impl ParamPoint {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            w: Matrix::zeros(shape.hidden_units, shape.input_dim),
            b_w: vec![0.0; shape.hidden_units],
            v: vec![0.0; shape.hidden_units],
            b_v: 0.0,
            log_noise_std: 0.0,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.w.cols(),
            hidden_units: self.w.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w.rows();
        for len in [self.b_w.len(), self.v.len()] {
            if len != h {
                return Err(Error::DimensionMismatch {
                    expected: h,
                    got: len,
                });
            }
        }
        if !self.log_noise_std.is_finite() {
            return Err(Error::NonPositiveNoise(self.log_noise_std.exp()));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().n_params());
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(&self.b_w);
        out.extend_from_slice(&self.v);
        out.push(self.b_v);
        out
    }

    pub fn from_flat(shape: NetworkShape, flat: &[f64], log_noise_std: f64) -> Result<Self> {
        if flat.len() != shape.n_params() {
            return Err(Error::DimensionMismatch {
                expected: shape.n_params(),
                got: flat.len(),
            });
        }
        let (h, d) = (shape.hidden_units, shape.input_dim);
        let hd = h * d;
        Ok(Self {
            w: Matrix::from_vec(h, d, flat[..hd].to_vec())?,
            b_w: flat[hd..hd + h].to_vec(),
            v: flat[hd + h..hd + 2 * h].to_vec(),
            b_v: flat[hd + 2 * h],
            log_noise_std,
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.log_noise_std.exp()
    }

    /// Draws every weight and bias i.i.d. from `Normal(0, std²)`.
    pub fn sample_gaussian(shape: NetworkShape, std: f64, rng: &mut RngState) -> Self {
        let flat: Vec<f64> = (0..shape.n_params()).map(|_| std * rng.std_normal()).collect();
        Self::from_flat(shape, &flat, 0.0).expect("length matches shape")
    }
}

/// Network output for one input.
pub fn forward(p: &ParamPoint, x: &[f64]) -> Result<f64> {
    if x.len() != p.w.cols() {
        return Err(Error::DimensionMismatch {
            expected: p.w.cols(),
            got: x.len(),
        });
    }
    Ok(forward_unchecked(p, x))
}

pub(crate) fn forward_unchecked(p: &ParamPoint, x: &[f64]) -> f64 {
    let mut out = p.b_v;
    for j in 0..p.w.rows() {
        out += p.v[j] * (dot(p.w.row(j), x) + p.b_w[j]).tanh();
    }
    out
}

/// Forward pass directly on a flat parameter vector.
pub(crate) fn forward_flat(shape: NetworkShape, theta: &[f64], x: &[f64]) -> f64 {
    let (h, d) = (shape.hidden_units, shape.input_dim);
    let hd = h * d;
    let mut out = theta[hd + 2 * h];
    for j in 0..h {
        let a = dot(&theta[j * d..(j + 1) * d], x) + theta[hd + j];
        out += theta[hd + h + j] * a.tanh();
    }
    out
}

/// Gaussian log density of `y` under `Normal(mean, noise_std²)`.
pub fn gauss_log_lik(y: f64, mean: f64, noise_std: f64) -> Result<f64> {
    if !(noise_std > 0.0) {
        return Err(Error::NonPositiveNoise(noise_std));
    }
    Ok(gauss_log_lik_unchecked(y, mean, noise_std.ln(), noise_std))
}

#[inline]
pub(crate) fn gauss_log_lik_unchecked(y: f64, mean: f64, log_std: f64, std: f64) -> f64 {
    let r = (y - mean) / std;
    -HALF_LN_2PI - log_std - 0.5 * r * r
}

/// Summed negative log likelihood of `data` at `p`.
pub fn nll(p: &ParamPoint, data: &Dataset) -> Result<f64> {
    check_batch(p.shape(), data)?;
    let theta = p.to_flat();
    Ok(nll_flat(p.shape(), &theta, p.log_noise_std, data))
}

pub(crate) fn nll_flat(shape: NetworkShape, theta: &[f64], log_noise_std: f64, data: &Dataset) -> f64 {
    let std = log_noise_std.exp();
    (0..data.len())
        .map(|n| {
            let f = forward_flat(shape, theta, data.x.row(n));
            -gauss_log_lik_unchecked(data.y[n], f, log_noise_std, std)
        })
        .sum()
}

fn check_batch(shape: NetworkShape, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if data.x.cols() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            got: data.x.cols(),
        });
    }
    Ok(())
}

/// Loss value with ParamPoint-shaped gradients.
#[derive(Debug, Clone)]
pub struct PointGradients {
    pub loss: f64,
    pub grad: ParamPoint,
}

/// Gradients of `Σ −log p(yᵢ|xᵢ,θ)`, plus `Σθ²/(2s²)` over weights and biases
/// when `map_prior_std` is given.
pub fn point_gradients(
    p: &ParamPoint,
    batch: &Dataset,
    map_prior_std: Option<f64>,
) -> Result<PointGradients> {
    p.validate()?;
    let shape = p.shape();
    check_batch(shape, batch)?;
    if let Some(s) = map_prior_std {
        if !(s > 0.0) {
            return Err(Error::NonPositiveScale(s));
        }
    }
    let theta = p.to_flat();
    let mut g = vec![0.0; theta.len()];
    let (mut loss, dlog) = nll_grad_flat(shape, &theta, p.log_noise_std, batch, &mut g);
    if let Some(s) = map_prior_std {
        loss += add_gaussian_penalty(&theta, s, &mut g);
    }
    let mut grad = ParamPoint::from_flat(shape, &g, 0.0)?;
    grad.log_noise_std = dlog;
    Ok(PointGradients { loss, grad })
}

/// Adds `Σθ²/(2s²)` and its gradient; returns the penalty.
pub(crate) fn add_gaussian_penalty(theta: &[f64], prior_std: f64, grad: &mut [f64]) -> f64 {
    let inv = 1.0 / (prior_std * prior_std);
    let mut pen = 0.0;
    for (g, &t) in grad.iter_mut().zip(theta) {
        pen += 0.5 * t * t * inv;
        *g += t * inv;
    }
    pen
}

/// Accumulates `∂NLL/∂θ` into `grad`; returns `(nll, ∂NLL/∂log_noise_std)`.
pub(crate) fn nll_grad_flat(
    shape: NetworkShape,
    theta: &[f64],
    log_noise_std: f64,
    data: &Dataset,
    grad: &mut [f64],
) -> (f64, f64) {
    let (h, d) = (shape.hidden_units, shape.input_dim);
    let hd = h * d;
    let std = log_noise_std.exp();
    let inv_var = 1.0 / (std * std);
    let mut hidden = vec![0.0; h];
    let mut total = 0.0;
    let mut dlog = 0.0;
    for n in 0..data.len() {
        let x = data.x.row(n);
        let mut f = theta[hd + 2 * h];
        for j in 0..h {
            let a = dot(&theta[j * d..(j + 1) * d], x) + theta[hd + j];
            hidden[j] = a.tanh();
            f += theta[hd + h + j] * hidden[j];
        }
        let r = f - data.y[n];
        total += HALF_LN_2PI + log_noise_std + 0.5 * r * r * inv_var;
        dlog += 1.0 - r * r * inv_var;
        let gf = r * inv_var;
        grad[hd + 2 * h] += gf;
        for j in 0..h {
            grad[hd + h + j] += gf * hidden[j];
            let da = gf * theta[hd + h + j] * (1.0 - hidden[j] * hidden[j]);
            if da != 0.0 {
                for (gw, &xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += da * xi;
                }
                grad[hd + j] += da;
            }
        }
    }
    (total, dlog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_std_normal;

    fn random_point(shape: NetworkShape, rng: &mut RngState) -> ParamPoint {
        let mut p = ParamPoint::sample_gaussian(shape, 0.7, rng);
        p.log_noise_std = 0.3 * rng.std_normal();
        p
    }

    fn random_data(d: usize, n: usize, rng: &mut RngState) -> Dataset {
        let x = Matrix::from_vec(n, d, sample_std_normal(rng, n * d)).unwrap();
        Dataset::new(x, sample_std_normal(rng, n)).unwrap()
    }

    // scalar-loop reference, independent of the flat layout
    fn reference_forward(p: &ParamPoint, x: &[f64]) -> f64 {
        let mut out = p.b_v;
        for j in 0..p.w.rows() {
            let mut a = p.b_w[j];
            for (i, xi) in x.iter().enumerate() {
                a += p.w[(j, i)] * xi;
            }
            out += p.v[j] * a.tanh();
        }
        out
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = ParamPoint::zeros(NetworkShape::new(3, 5).unwrap());
        assert_eq!(forward(&p, &[1.0, -2.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn saturation() {
        let mut p = ParamPoint::zeros(NetworkShape::new(1, 1).unwrap());
        p.w[(0, 0)] = 1e3;
        p.v[0] = 1.0;
        assert!((forward(&p, &[1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = RngState::new(1);
        let p = random_point(NetworkShape::new(3, 4).unwrap(), &mut rng);
        for _ in 0..10 {
            let x = sample_std_normal(&mut rng, 3);
            let got = forward(&p, &x).unwrap();
            assert!((got - reference_forward(&p, &x)).abs() < 1e-12);
            let theta = p.to_flat();
            assert!((forward_flat(p.shape(), &theta, &x) - got).abs() < 1e-12);
        }
        assert!(matches!(
            forward(&p, &[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn forward_odd_under_joint_negation() {
        let mut rng = RngState::new(2);
        let mut p = random_point(NetworkShape::new(2, 6).unwrap(), &mut rng);
        p.b_w.iter_mut().for_each(|b| *b = 0.0);
        p.b_v = 0.0;
        let mut q = p.clone();
        q.w.as_mut_slice().iter_mut().for_each(|w| *w = -*w);
        q.v.iter_mut().for_each(|v| *v = -*v);
        // −V·tanh(−Wx) = V·tanh(Wx)
        let x = [0.4, -1.3];
        assert_eq!(forward(&p, &x).unwrap(), forward(&q, &x).unwrap());
    }

    #[test]
    fn gauss_log_lik_values() {
        assert!((gauss_log_lik(0.3, 0.3, 1.0).unwrap() + 0.918939).abs() < 1e-6);
        assert!((gauss_log_lik(1.0, 0.0, 1.0).unwrap() + 1.418939).abs() < 1e-6);
        let v = gauss_log_lik(2.0, 0.0, 2.0).unwrap();
        let density = (-(2.0f64 * 2.0) / (2.0 * 4.0)).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((v - density.ln()).abs() < 1e-12);
        assert!((v + 2.112086).abs() < 1e-6);
        assert!(matches!(gauss_log_lik(0.0, 0.0, 0.0), Err(Error::NonPositiveNoise(_))));
    }

    #[test]
    fn gauss_density_integrates_to_one() {
        for sigma in [0.1, 1.0, 10.0] {
            // Simpson's rule on ±12σ
            let n = 20_000;
            let (a, b) = (-12.0 * sigma, 12.0 * sigma);
            let hstep = (b - a) / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let y = a + k as f64 * hstep;
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * gauss_log_lik(y, 0.0, sigma).unwrap().exp();
            }
            acc *= hstep / 3.0;
            assert!((acc - 1.0).abs() < 1e-6, "sigma={sigma}: {acc}");
        }
    }

    #[test]
    fn zero_residual_gradients() {
        let mut rng = RngState::new(3);
        let shape = NetworkShape::new(2, 3).unwrap();
        let mut p = random_point(shape, &mut rng);
        p.log_noise_std = 0.0;
        let mut data = random_data(2, 6, &mut rng);
        for n in 0..data.len() {
            data.y[n] = forward(&p, data.x.row(n)).unwrap();
        }
        let g = point_gradients(&p, &data, None).unwrap();
        assert!(g.grad.to_flat().iter().all(|&v| v.abs() < 1e-12));
        assert!((g.grad.log_noise_std - 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_penalty_adds_theta() {
        let mut rng = RngState::new(4);
        let shape = NetworkShape::new(2, 3).unwrap();
        let p = random_point(shape, &mut rng);
        let data = random_data(2, 4, &mut rng);
        let plain = point_gradients(&p, &data, None).unwrap();
        let map = point_gradients(&p, &data, Some(1.0)).unwrap();
        for ((a, b), t) in map.grad.to_flat().iter().zip(plain.grad.to_flat()).zip(p.to_flat()) {
            assert!((a - b - t).abs() < 1e-12);
        }
        assert_eq!(map.grad.log_noise_std, plain.grad.log_noise_std);
    }

    #[test]
    fn empty_batch_rejected() {
        let p = ParamPoint::zeros(NetworkShape::new(2, 2).unwrap());
        let data = Dataset::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(point_gradients(&p, &data, None).is_err());
    }
}
