//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the library routine it is meant to check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nlmem_core::experiments::{replicate_data, Scenario};
use nlmem_core::model::{
    complete_log_density, complete_log_density_grad, BetaTarget, CovariateLevel, Dataset, Evaluator, Individual,
    LatentState, LinearModel, ModelDefinition, ModelKind, ParameterVector,
};
use nlmem_core::optimizer::prox_weighted_l1;
use nlmem_core::oracle::{simulate_toy, ToyModelSpec};
use nlmem_core::regpath::mc_marginal_loglik_seeded;
use nlmem_core::rng::individual_streams;
use nlmem_core::sampler::{direct_gaussian_sample, mh_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Proximal operator

fn prox_objective(y: f64, x: f64, s: f64, lambda: f64) -> f64 {
    lambda * y.abs() + 0.5 * s * (y - x) * (y - x)
}

/// Minimizer of the prox objective by a dense grid followed by golden-section
/// refinement in the best cell. Zero is always a candidate.
pub fn prox_by_search(x: f64, s: f64, lambda: f64) -> f64 {
    let lo = x.min(0.0) - 1.0;
    let hi = x.max(0.0) + 1.0;
    let n = 2000;
    let h = (hi - lo) / n as f64;
    let f = |y: f64| prox_objective(y, x, s, lambda);
    let mut best = 0;
    for k in 1..=n {
        if f(lo + k as f64 * h) < f(lo + best as f64 * h) {
            best = k;
        }
    }
    let (mut a, mut b) = (lo + (best as f64 - 1.0) * h, lo + (best as f64 + 1.0) * h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let y = 0.5 * (a + b);
    if f(0.0) <= f(y) {
        0.0
    } else {
        y
    }
}

/// Names of the prox properties violated by one `(x, s, lambda)` triple.
pub fn prox_violations(x: f64, x2: f64, s: f64, lambda: f64) -> Vec<&'static str> {
    let mut bad = Vec::new();
    let p = prox_weighted_l1(x, s, lambda);
    let y = prox_by_search(x, s, lambda);
    let scale = 1.0 + x.abs();
    if (p - y).abs() > 1e-6 * scale
        || prox_objective(p, x, s, lambda) > prox_objective(y, x, s, lambda) + 1e-12 * scale * scale * s.max(1.0)
    {
        bad.push("argmin");
    }
    let p2 = prox_weighted_l1(x2, s, lambda);
    // Slack for the rounding of x - t at each argument.
    let slack = 4.0 * f64::EPSILON * (x.abs() + x2.abs() + lambda / s);
    if (p - p2).abs() > (x - x2).abs() + slack {
        bad.push("nonexpansive");
    }
    if prox_weighted_l1(-x, s, lambda) != -p {
        bad.push("odd");
    }
    let t = lambda / s;
    if x.abs() <= t && p != 0.0 {
        bad.push("dead zone");
    }
    if x.abs() > t && (p == 0.0 || p.signum() != x.signum()) {
        bad.push("sign");
    }
    bad
}

/// Random triple with `x` spread over, below and above the threshold.
pub fn prox_triple<R: Rng>(rng: &mut R) -> (f64, f64, f64, f64) {
    let s = 10f64.powf(rng.random_range(-3.0..3.0));
    let lambda = rng.random_range(0.0..5.0);
    let t = lambda / s;
    let x = match rng.random_range(0..3) {
        0 => rng.random_range(-1.0..1.0) * t,
        1 => t * rng.random_range(-1.0f64..1.0).signum() * rng.random_range(1.0..1.5),
        _ => rng.random_range(-20.0..20.0),
    };
    let x2 = x + rng.random_range(-3.0..3.0);
    (x, x2, s, lambda)
}

pub fn prox_suite(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let (x, x2, s, l) = prox_triple(&mut rng);
            !prox_violations(x, x2, s, l).is_empty()
        })
        .count()
}

// ---------------------------------------------------------------------------
// Toy design

pub struct DesignCheck {
    pub orthogonality: f64,
    pub centering: f64,
    pub woodbury: f64,
}

pub fn design_check(seed: u64) -> DesignCheck {
    let spec = ToyModelSpec::default();
    let toy = simulate_toy(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let x = &toy.x;
    let gram = x.transpose() * x;
    let orthogonality = (gram - DMatrix::identity(spec.p, spec.p)).amax();
    let mut centering = 0.0f64;
    for i in 0..spec.n {
        let block = x.rows(i * spec.j, spec.j);
        for c in 0..spec.p {
            centering = centering.max(block.column(c).sum().abs());
        }
    }
    let w = DMatrix::from_element(spec.j, 1, 1.0);
    let gamma = DMatrix::identity(spec.j, spec.j) * spec.sigma_sq + &w * w.transpose() * spec.gamma_sq;
    let inv = nlmem_core::oracle::woodbury_inverse(spec.sigma_sq, spec.gamma_sq, spec.j);
    let woodbury = (gamma * inv - DMatrix::identity(spec.j, spec.j)).amax();
    DesignCheck {
        orthogonality,
        centering,
        woodbury,
    }
}

// ---------------------------------------------------------------------------
// Gradient

/// Small random instance of a model: data simulated from a shrunken preset,
/// parameter and latent values perturbed away from the truth.
pub fn random_instance(kind: ModelKind, seed: u64) -> (Box<dyn ModelDefinition>, Dataset, ParameterVector, LatentState) {
    let mut scenario = Scenario::preset(kind);
    scenario.n_individuals = 4;
    scenario.n_covariates = 3;
    scenario.truth.beta.retain(|e| e.col <= 3);
    scenario.seed = seed;
    let sim = replicate_data(&scenario, 0).unwrap();
    let model = scenario.model.build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let t = &sim.theta;
    let alpha: Vec<f64> = t.alpha.iter().map(|a| a * (1.0 + 0.05 * normal(&mut rng))).collect();
    let mu: Vec<f64> = t.mu.iter().map(|m| m * (1.0 + 0.05 * normal(&mut rng))).collect();
    let targets = model.beta_targets();
    let beta = DMatrix::from_fn(t.beta.nrows(), t.beta.ncols(), |r, c| {
        let scale = match targets[r] {
            BetaTarget::Latent(k) => 0.05 * t.mu[k].abs(),
            BetaTarget::Observation => 0.1,
        };
        t.beta[(r, c)] + scale * normal(&mut rng)
    });
    let gamma: Vec<f64> = t.gamma_sq_vec().iter().map(|g| g * (0.3 * normal(&mut rng)).exp()).collect();
    let sigma = t.sigma_sq() * (0.3 * normal(&mut rng)).exp();
    let theta = ParameterVector::new(alpha, mu, beta, gamma.clone(), sigma).unwrap();
    let phi = DMatrix::from_fn(sim.phi.nrows(), sim.phi.ncols(), |i, k| {
        sim.phi[(i, k)] + 0.3 * gamma[k].sqrt() * normal(&mut rng)
    });
    (model, sim.data, theta, LatentState::new(phi))
}

/// Largest relative discrepancy between the analytic gradient and a
/// fourth-order central difference of `(1/N) log f`, over all coordinates.
/// The denominator is floored at `1e-6` of the largest gradient entry.
pub fn gradient_error(model: &dyn ModelDefinition, data: &Dataset, theta: &ParameterVector, latent: &LatentState) -> f64 {
    let analytic = complete_log_density_grad(model, theta, data, latent).unwrap();
    let layout = theta.layout();
    let n = data.n_individuals() as f64;
    let flat = theta.flatten();
    let f = |v: &[f64]| {
        let th = ParameterVector::unflatten(&layout, v).unwrap();
        complete_log_density(model, &th, data, latent).unwrap() / n
    };
    let mut fd = vec![0.0; flat.len()];
    for l in 0..flat.len() {
        let h = 1e-4 * flat[l].abs().max(1.0);
        let at = |d: f64| {
            let mut v = flat.clone();
            v[l] += d;
            f(&v)
        };
        fd[l] = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
    }
    let top = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&fd)
        .map(|(a, d)| (a - d).abs() / d.abs().max(a.abs()).max(1e-6 * top))
        .fold(0.0, f64::max)
}

pub fn gradient_suite(kind: ModelKind, instances: u64) -> f64 {
    (0..instances)
        .map(|s| {
            let (model, data, theta, latent) = random_instance(kind, 1000 + s);
            gradient_error(model.as_ref(), &data, &theta, &latent)
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Linear-Gaussian case

pub struct LinearCase {
    pub data: Dataset,
    pub theta: ParameterVector,
    pub times: Vec<f64>,
}

/// Linear model with `n` individuals, five times on [0, 1] and three covariates.
pub fn linear_case(n: usize, seed: u64) -> LinearCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..5).map(|j| j as f64 / 4.0).collect();
    let p = 3;
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let beta = DMatrix::from_row_slice(1, p, &[1.5, -2.0, 0.0]);
    let theta = ParameterVector::new(vec![], vec![2.0, 5.0], beta, vec![1.0, 4.0], 0.5).unwrap();
    let individuals = (0..n)
        .map(|i| {
            let shift: f64 = (0..p).map(|l| x[(i, l)] * theta.beta[(0, l)]).sum();
            let a = theta.mu[0] + shift + normal(&mut rng);
            let b = theta.mu[1] + 2.0 * normal(&mut rng);
            let y = times.iter().map(|t| a + b * t + 0.5f64.sqrt() * normal(&mut rng)).collect();
            Individual::new(times.clone(), y)
        })
        .collect();
    let data = Dataset::new(individuals, x, CovariateLevel::Individual, vec![]).unwrap();
    LinearCase { data, theta, times }
}

fn prior_mean(case: &LinearCase, i: usize) -> DVector<f64> {
    let x = case.data.covariates();
    let shift: f64 = (0..x.ncols()).map(|l| x[(i, l)] * case.theta.beta[(0, l)]).sum();
    DVector::from_vec(vec![case.theta.mu[0] + shift, case.theta.mu[1]])
}

fn design(times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), 2, |j, k| if k == 0 { 1.0 } else { times[j] })
}

/// Conjugate posterior of `phi_i`: mean and covariance.
pub fn conjugate_posterior(case: &LinearCase, i: usize) -> (DVector<f64>, DMatrix<f64>) {
    let z = design(&case.times);
    let s2 = case.theta.sigma_sq();
    let g = case.theta.gamma_sq_vec();
    let prior_prec = DMatrix::from_diagonal(&DVector::from_vec(g.iter().map(|v| 1.0 / v).collect()));
    let y = DVector::from_vec(case.data.individual(i).y.clone());
    let prec = &prior_prec + z.transpose() * &z / s2;
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * (&prior_prec * prior_mean(case, i) + z.transpose() * y / s2);
    (mean, cov)
}

/// Posterior mean and covariance of `phi_i` by tensor-grid quadrature of
/// the unnormalized density.
pub fn quadrature_posterior(case: &LinearCase, i: usize) -> (DVector<f64>, DMatrix<f64>) {
    let s2 = case.theta.sigma_sq();
    let g = case.theta.gamma_sq_vec();
    let m = prior_mean(case, i);
    let ind = case.data.individual(i);
    let log_post = |a: f64, b: f64| {
        let prior = -0.5 * ((a - m[0]).powi(2) / g[0] + (b - m[1]).powi(2) / g[1]);
        let lik: f64 = ind
            .times
            .iter()
            .zip(&ind.y)
            .map(|(t, y)| -0.5 * (y - a - b * t).powi(2) / s2)
            .sum();
        prior + lik
    };
    // Centre on the least-squares fit of this individual.
    let ys = &ind.y;
    let tbar = ind.times.iter().sum::<f64>() / 5.0;
    let ybar = ys.iter().sum::<f64>() / 5.0;
    let sxy: f64 = ind.times.iter().zip(ys).map(|(t, y)| (t - tbar) * (y - ybar)).sum();
    let sxx: f64 = ind.times.iter().map(|t| (t - tbar).powi(2)).sum();
    let b0 = sxy / sxx;
    let a0 = ybar - b0 * tbar;
    let (na, nb) = (801, 801);
    let (wa, wb) = (8.0, 16.0);
    let (ha, hb) = (2.0 * wa / (na - 1) as f64, 2.0 * wb / (nb - 1) as f64);
    let peak = log_post(a0, b0);
    let (mut z, mut s_a, mut s_b, mut s_aa, mut s_bb, mut s_ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for u in 0..na {
        let a = a0 - wa + u as f64 * ha;
        for v in 0..nb {
            let b = b0 - wb + v as f64 * hb;
            let w = (log_post(a, b) - peak).exp();
            z += w;
            s_a += w * a;
            s_b += w * b;
            s_aa += w * a * a;
            s_bb += w * b * b;
            s_ab += w * a * b;
        }
    }
    let (ma, mb) = (s_a / z, s_b / z);
    let mean = DVector::from_vec(vec![ma, mb]);
    let cov = DMatrix::from_row_slice(2, 2, &[s_aa / z - ma * ma, s_ab / z - ma * mb, s_ab / z - ma * mb, s_bb / z - mb * mb]);
    (mean, cov)
}

pub struct ChainCheck {
    /// Largest `|chain moment - exact| / MC standard error` over the two
    /// means and two variances.
    pub worst_z: f64,
}

/// Random-walk chain on one individual; batch means give the standard errors.
pub fn mh_moment_check(steps: usize, seed: u64) -> ChainCheck {
    let case = linear_case(1, seed);
    let (mean, cov) = conjugate_posterior(&case, 0);
    let eval = Evaluator::new(&LinearModel, &case.data, &case.theta);
    let sd = DMatrix::from_row_slice(1, 2, &[1.7 * cov[(0, 0)].sqrt(), 1.7 * cov[(1, 1)].sqrt()]);
    let mut streams = individual_streams(seed, 1);
    let mut state = LatentState::new(DMatrix::from_row_slice(1, 2, &[mean[0], mean[1]]));
    for _ in 0..1000 {
        state = mh_step(&eval, &state, &sd, &mut streams).unwrap();
    }
    let mut draws = Vec::with_capacity(steps);
    for _ in 0..steps {
        state = mh_step(&eval, &state, &sd, &mut streams).unwrap();
        draws.push([state.phi[(0, 0)], state.phi[(0, 1)]]);
    }
    // (component, squared deviation?, exact value)
    let stats = [
        (0, false, mean[0]),
        (1, false, mean[1]),
        (0, true, cov[(0, 0)]),
        (1, true, cov[(1, 1)]),
    ];
    let stat = |d: &[f64; 2], k: usize, sq: bool| if sq { (d[k] - mean[k]).powi(2) } else { d[k] };
    let batches = 50;
    let size = steps / batches;
    let mut worst_z = 0.0f64;
    for (k, sq, target) in stats {
        let means: Vec<f64> = (0..batches)
            .map(|b| draws[b * size..(b + 1) * size].iter().map(|d| stat(d, k, sq)).sum::<f64>() / size as f64)
            .collect();
        let overall = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - overall).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        worst_z = worst_z.max((overall - target).abs() / se);
    }
    ChainCheck { worst_z }
}

/// Largest relative moment error of the direct sampler against quadrature.
/// Mean errors are relative to the larger of the mean and the posterior sd.
pub fn direct_sampler_check(draws: usize, seed: u64) -> f64 {
    let case = linear_case(1, seed);
    let (qm, qc) = quadrature_posterior(&case, 0);
    let eval = Evaluator::new(&LinearModel, &case.data, &case.theta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..draws).map(|_| direct_gaussian_sample(&eval, 0, &mut rng).unwrap()).collect();
    let mut worst = 0.0f64;
    for k in 0..2 {
        let m = samples.iter().map(|s| s[k]).sum::<f64>() / draws as f64;
        let v = samples.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let sd = qc[(k, k)].sqrt();
        worst = worst.max((m - qm[k]).abs() / qm[k].abs().max(sd));
        worst = worst.max((v - qc[(k, k)]).abs() / qc[(k, k)]);
    }
    worst
}

/// Exact marginal log-likelihood `sum_i log N(Y_i; Z m_i, sigma^2 I + Z Gamma Z^T)`.
pub fn linear_marginal_loglik(case: &LinearCase) -> f64 {
    let z = design(&case.times);
    let g = DMatrix::from_diagonal(&DVector::from_vec(case.theta.gamma_sq_vec()));
    let j = case.times.len();
    let cov = DMatrix::identity(j, j) * case.theta.sigma_sq() + &z * g * z.transpose();
    let chol = cov.clone().cholesky().unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (0..case.data.n_individuals())
        .map(|i| {
            let r = DVector::from_vec(case.data.individual(i).y.clone()) - &z * prior_mean(case, i);
            let quad = r.dot(&chol.solve(&r));
            -0.5 * (j as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
        })
        .sum()
}

/// `(|estimate - exact| / standard error, standard error)`.
pub fn mc_likelihood_check(draws: usize, seed: u64) -> (f64, f64) {
    let case = linear_case(20, seed);
    let exact = linear_marginal_loglik(&case);
    let est = mc_marginal_loglik_seeded(&LinearModel, &case.data, &case.theta, draws, seed).unwrap();
    ((est.loglik - exact).abs() / est.std_error, est.std_error)
}
