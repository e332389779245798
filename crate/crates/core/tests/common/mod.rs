//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use overprune::diagnostics::collapse_check;
use overprune::network::point_gradients;
use overprune::numerics::{mean, sample_variance, LowerTriangular};
use overprune::posterior::{
    kl_diag_gauss, kl_full_gauss, sample_params, vfe_gradients_with_noise, PackedCholesky, VfeNoise,
};
use overprune::{Dataset, Family, Matrix, NetworkShape, ParamPoint, Prior, RngState, VariationalPosterior};

pub const FD_STEP: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn random_data(rng: &mut RngState, n: usize, d: usize) -> Dataset {
    let x: Vec<f64> = (0..n * d).map(|_| rng.std_normal()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
    Dataset::new(Matrix::from_vec(n, d, x).unwrap(), y).unwrap()
}

pub fn random_point(rng: &mut RngState, shape: NetworkShape) -> ParamPoint {
    let flat: Vec<f64> = (0..shape.n_params()).map(|_| 0.8 * rng.std_normal()).collect();
    ParamPoint::from_flat(shape, &flat, rng.uniform(-1.0, 0.5)).unwrap()
}

fn random_packed(rng: &mut RngState, dim: usize) -> PackedCholesky {
    let mut p = PackedCholesky::scaled_identity(dim, 1.0);
    for i in 0..dim {
        for j in 0..i {
            p.raw[PackedCholesky::index(i, j)] = 0.3 * rng.std_normal();
        }
        p.raw[PackedCholesky::index(i, i)] = rng.uniform(-2.0, -0.3);
    }
    p
}

pub fn random_posterior(rng: &mut RngState, family: Family, shape: NetworkShape) -> VariationalPosterior {
    let mean = random_point(rng, shape);
    match family {
        Family::Es => VariationalPosterior::Es { point: mean },
        Family::Map => VariationalPosterior::Map { point: mean },
        Family::Wn => VariationalPosterior::Wn {
            mean,
            weight_std: rng.uniform(0.05, 0.6),
            bias_std: rng.uniform(0.05, 0.6),
        },
        Family::Mf => VariationalPosterior::Mf {
            mean,
            rho: (0..shape.n_params()).map(|_| rng.uniform(-3.0, 0.0)).collect(),
        },
        Family::Fc => VariationalPosterior::Fc {
            mean,
            input_layer: random_packed(rng, shape.input_layer_len()),
            output_layer: random_packed(rng, shape.output_layer_len()),
        },
    }
}

/// Uniform on `1..=max`.
pub fn random_size(rng: &mut RngState, max: usize) -> usize {
    1 + (rng.uniform(0.0, max as f64) as usize).min(max - 1)
}

pub fn random_shape(rng: &mut RngState, max_d: usize, max_h: usize) -> NetworkShape {
    NetworkShape::new(random_size(rng, max_d), random_size(rng, max_h)).unwrap()
}

/// Worst relative error between the analytic frozen-noise VFE gradient and
/// central differences over every trainable entry.
pub fn vfe_fd_error(q: &VariationalPosterior, prior: &Prior, data: &Dataset, noise: &VfeNoise) -> f64 {
    let analytic = vfe_gradients_with_noise(q, prior, data, noise).unwrap().grad;
    let base = q.trainable();
    let mut worst: f64 = 0.0;
    let eval = |params: &[f64]| {
        let mut qq = q.clone();
        qq.set_trainable(params).unwrap();
        vfe_gradients_with_noise(&qq, prior, data, noise).unwrap().estimate.total
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// Same check for the point loss, optionally with the Gaussian penalty.
pub fn point_fd_error(p: &ParamPoint, data: &Dataset, map_prior_std: Option<f64>) -> f64 {
    let g = point_gradients(p, data, map_prior_std).unwrap().grad;
    let mut analytic = g.to_flat();
    analytic.push(g.log_noise_std);
    let shape = p.shape();
    let mut base = p.to_flat();
    base.push(p.log_noise_std);
    let eval = |v: &[f64]| {
        let n = v.len() - 1;
        let q = ParamPoint::from_flat(shape, &v[..n], v[n]).unwrap();
        point_gradients(&q, data, map_prior_std).unwrap().loss
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// Worst gradient error over `instances` random problems of every family.
pub fn gradient_oracle(instances: usize, seed: u64) -> f64 {
    let root = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = root.split("instance", k as u64);
        let shape = random_shape(&mut rng, 5, 8);
        let n = random_size(&mut rng, 16);
        let data = random_data(&mut rng, n, shape.input_dim);
        let prior = Prior::new(rng.uniform(0.3, 3.0)).unwrap();
        let p = random_point(&mut rng, shape);
        worst = worst.max(point_fd_error(&p, &data, None));
        worst = worst.max(point_fd_error(&p, &data, Some(prior.std)));
        for family in [Family::Wn, Family::Mf, Family::Fc] {
            let q = random_posterior(&mut rng, family, shape);
            let n_mc = 1 + k % 3;
            let noise = VfeNoise::draw(&q, data.len(), n_mc, &rng.split("noise", 0)).unwrap();
            worst = worst.max(vfe_fd_error(&q, &prior, &data, &noise));
        }
    }
    worst
}

/// Monte Carlo estimate of `KL(N(mu, sigma²) ‖ N(0, s²))` from log-density ratios.
pub fn kl_diag_mc(mu: f64, sigma: f64, s: f64, n: usize, rng: &mut RngState) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let e = rng.std_normal();
        let z = mu + sigma * e;
        let log_q = -0.5 * e * e - sigma.ln();
        let log_p = -0.5 * (z / s).powi(2) - s.ln();
        acc += log_q - log_p;
    }
    acc / n as f64
}

/// Monte Carlo estimate of `KL(N(mu, LLᵀ) ‖ N(0, s²I))`.
pub fn kl_full_mc(mu: &[f64], l: &Matrix, s: f64, n: usize, rng: &mut RngState) -> f64 {
    let k = mu.len();
    let log_det: f64 = (0..k).map(|i| l[(i, i)].ln()).sum();
    let mut eps = vec![0.0; k];
    let mut acc = 0.0;
    for _ in 0..n {
        rng.fill_std_normal(&mut eps);
        let mut zz = 0.0;
        let mut ee = 0.0;
        for i in 0..k {
            let mut z = mu[i];
            for j in 0..=i {
                z += l[(i, j)] * eps[j];
            }
            zz += z * z;
            ee += eps[i] * eps[i];
        }
        let log_q = -0.5 * ee - log_det;
        let log_p = -0.5 * zz / (s * s) - k as f64 * s.ln();
        acc += log_q - log_p;
    }
    acc / n as f64
}

/// Worst `|closed form − MC|` over random diagonal and full-covariance cases.
pub fn kl_oracle(instances: usize, samples: usize, seed: u64) -> f64 {
    let root = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = root.split("kl", k as u64);
        let s = rng.uniform(0.5, 2.0);
        let mu = rng.uniform(-1.0, 1.0);
        let sigma = rng.uniform(0.3, 1.5);
        let exact = kl_diag_gauss(mu, sigma, s).unwrap();
        worst = worst.max((exact - kl_diag_mc(mu, sigma, s, samples, &mut rng)).abs());

        let dim = 2 + k % 3;
        let means: Vec<f64> = (0..dim).map(|_| rng.uniform(-0.7, 0.7)).collect();
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..i {
                m[(i, j)] = 0.2 * rng.std_normal();
            }
            m[(i, i)] = rng.uniform(0.4, 1.2);
        }
        let l = LowerTriangular::from_matrix(m.clone()).unwrap();
        let exact = kl_full_gauss(&means, &l, s).unwrap();
        worst = worst.max((exact - kl_full_mc(&means, &m, s, samples, &mut rng)).abs());
    }
    worst
}

/// Largest z-score between local-reparameterized and weight-sampled
/// pre-activation moments, one random unit per `(q, x)` pair.
pub fn local_reparam_oracle(pairs: usize, draws: usize, seed: u64) -> f64 {
    let root = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let mut rng = root.split("pair", k as u64);
        let shape = random_shape(&mut rng, 3, 4);
        let family = if k % 2 == 0 { Family::Mf } else { Family::Wn };
        let q = random_posterior(&mut rng, family, shape);
        let x: Vec<f64> = (0..shape.input_dim).map(|_| rng.std_normal()).collect();
        let unit = (rng.uniform(0.0, shape.hidden_units as f64) as usize).min(shape.hidden_units - 1);
        let mut lrt_rng = rng.split("lrt", 0);
        let mut w_rng = rng.split("weights", 0);
        let mut a_lrt = Vec::with_capacity(draws);
        let mut a_w = Vec::with_capacity(draws);
        for _ in 0..draws {
            a_lrt.push(q.local_reparam_hidden(&x, &mut lrt_rng).unwrap()[unit]);
            let theta = sample_params(&q, &mut w_rng);
            let a: f64 = theta.w.row(unit).iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + theta.b_w[unit];
            a_w.push(a);
        }
        let n = draws as f64;
        let (m1, m2) = (mean(&a_lrt), mean(&a_w));
        let (v1, v2) = (sample_variance(&a_lrt), sample_variance(&a_w));
        let z_mean = (m1 - m2).abs() / ((v1 + v2) / n).sqrt();
        let var_se = (2.0 / (n - 1.0)).sqrt() * (v1 * v1 + v2 * v2).sqrt();
        let z_var = (v1 - v2).abs() / var_se;
        worst = worst.max(z_mean).max(z_var);
    }
    worst
}

/// Largest clamped incoming-gradient norm over every unit of random MF posteriors.
pub fn collapse_oracle(instances: usize, seed: u64) -> f64 {
    let root = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = root.split("collapse", k as u64);
        let shape = random_shape(&mut rng, 3, 4);
        let data = random_data(&mut rng, 5, shape.input_dim);
        let q = random_posterior(&mut rng, Family::Mf, shape);
        for unit in 0..shape.hidden_units {
            worst = worst.max(collapse_check(&q, &data, unit, &rng.split("mc", unit as u64)).unwrap());
        }
    }
    worst
}
