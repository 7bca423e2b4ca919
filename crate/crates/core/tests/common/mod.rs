//! Shared helpers for the integration tests: random model instances and a
//! brute-force conditioning oracle that never runs a recursion.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tasc_core::StateSpaceParams;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `B Bᵀ / dim + floor·I` for a Gaussian `B`.
pub fn random_spd(dim: usize, floor: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = gaussian(dim, dim, 1.0, rng);
    let m = &b * b.transpose() / dim as f64 + DMatrix::identity(dim, dim) * floor;
    (&m + m.transpose()) * 0.5
}

pub fn random_diag(dim: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| rng.random_range(lo..hi)))
}

/// Random stable-ish model with `d` states and `n` outputs.
pub fn random_params(d: usize, n: usize, diag_r: bool, rng: &mut ChaCha8Rng) -> StateSpaceParams {
    let a = gaussian(d, d, 0.5, rng);
    let h = gaussian(n, d, 1.0, rng);
    let q = random_spd(d, 0.1, rng);
    let r = if diag_r { random_diag(n, 0.2, 1.5, rng) } else { random_spd(n, 0.2, rng) };
    let m0 = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let p0 = random_spd(d, 0.2, rng);
    StateSpaceParams::new(a, h, q, r, m0, p0, false).expect("valid random parameters")
}

/// Draw `k` observations from the model.
pub fn sample_obs(theta: &StateSpaceParams, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (d, n) = (theta.state_dim(), theta.obs_dim());
    let chol = |m: &DMatrix<f64>| nalgebra::Cholesky::new(m.clone()).expect("spd").l();
    let (lq, lr, lp) = (chol(&theta.q), chol(&theta.r), chol(&theta.p0));
    let mut x = &theta.m0 + &lp * gaussian(d, 1, 1.0, rng).column(0);
    let mut y = DMatrix::zeros(n, k);
    for t in 0..k {
        x = &theta.a * &x + &lq * gaussian(d, 1, 1.0, rng).column(0);
        let obs = &theta.h * &x + &lr * gaussian(n, 1, 1.0, rng).column(0);
        y.set_column(t, &obs);
    }
    y
}

/// Joint Gaussian over `(x_0..x_K, y_1..y_K)` as an explicit linear map of
/// the independent disturbances `(x_0 - m0, q_1..q_K, r_1..r_K)`.
pub struct JointGaussian {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(theta: &StateSpaceParams, k: usize, seasonal: &[f64]) -> Self {
        let (d, n) = (theta.state_dim(), theta.obs_dim());
        let nx = (k + 1) * d;
        let nz = nx + k * n;
        let ne = (k + 1) * d + k * n;
        let mut map = DMatrix::zeros(nz, ne);
        let mut mean = DVector::zeros(nz);

        // powers of A
        let mut pow = vec![DMatrix::identity(d, d)];
        for i in 1..=k {
            let next = &theta.a * &pow[i - 1];
            pow.push(next);
        }
        for t in 0..=k {
            mean.rows_mut(t * d, d).copy_from(&(&pow[t] * &theta.m0));
            // x_t = A^t e_0 + Σ_{i=1..t} A^{t-i} q_i
            for i in 0..=t {
                map.view_mut((t * d, i * d), (d, d)).copy_from(&pow[t - i]);
            }
        }
        for t in 1..=k {
            let row = nx + (t - 1) * n;
            let xt_map = map.rows(t * d, d).into_owned();
            map.rows_mut(row, n).copy_from(&(&theta.h * xt_map));
            map.view_mut((row, (k + 1) * d + (t - 1) * n), (n, n)).fill_with_identity();
            let s = seasonal.get(t - 1).copied().unwrap_or(0.0);
            let ym = &theta.h * mean.rows(t * d, d) + DVector::from_element(n, s);
            mean.rows_mut(row, n).copy_from(&ym);
        }
        let mut dist = DMatrix::zeros(ne, ne);
        dist.view_mut((0, 0), (d, d)).copy_from(&theta.p0);
        for t in 1..=k {
            dist.view_mut((t * d, t * d), (d, d)).copy_from(&theta.q);
            let o = (k + 1) * d + (t - 1) * n;
            dist.view_mut((o, o), (n, n)).copy_from(&theta.r);
        }
        let cov = &map * dist * map.transpose();
        Self { d, n, k, mean, cov: (&cov + cov.transpose()) * 0.5 }
    }

    /// Index of observation coordinate `i` at step `t` (1-based).
    pub fn obs_index(&self, t: usize, i: usize) -> usize {
        (self.k + 1) * self.d + (t - 1) * self.n + i
    }

    /// Mean and covariance of `x_t` given the listed observation indices.
    pub fn condition(&self, t: usize, observed: &[usize], y_flat: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let xs: Vec<usize> = (t * self.d..(t + 1) * self.d).collect();
        let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.cov[(rows[i], cols[j])]);
        let mu_x = DVector::from_fn(xs.len(), |i, _| self.mean[xs[i]]);
        if observed.is_empty() {
            return (mu_x, pick(&xs, &xs));
        }
        let s_xo = pick(&xs, observed);
        let s_oo = pick(observed, observed);
        let resid = DVector::from_fn(observed.len(), |i, _| y_flat[observed[i]] - self.mean[observed[i]]);
        let chol = nalgebra::Cholesky::new(s_oo).expect("observation covariance is SPD");
        let m = mu_x + &s_xo * chol.solve(&resid);
        let p = pick(&xs, &xs) - &s_xo * chol.solve(&s_xo.transpose());
        (m, (&p + p.transpose()) * 0.5)
    }

    /// Flatten an N×K observation matrix into the joint vector layout.
    pub fn flatten(&self, y: &DMatrix<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.mean.len());
        for t in 1..=self.k {
            for i in 0..self.n {
                v[self.obs_index(t, i)] = y[(i, t - 1)];
            }
        }
        v
    }

    /// Observation indices available up to step `upto`, dropping the target
    /// coordinate at steps `>= missing_from` (1-based).
    pub fn observed_upto(&self, upto: usize, missing_from: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        for t in 1..=upto {
            for i in 0..self.n {
                if i == 0 && missing_from.is_some_and(|m| t >= m) {
                    continue;
                }
                out.push(self.obs_index(t, i));
            }
        }
        out
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn max_abs_diff_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
