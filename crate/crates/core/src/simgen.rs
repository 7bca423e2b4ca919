//! Synthetic panels with a known signal/noise decomposition.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TascError};
use crate::linalg::symmetrize;
use crate::panel::{save_csv, PanelData};
use crate::seed::derive_seed;
use crate::ssm::{ParamsDocument, StateSpaceParams};

/// Stand-in for an exactly zero covariance.
pub const COV_FLOOR: f64 = 1e-12;

/// How the `(a, b)` ranges of a [`SimulationConfig`] are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `(a, b)` bound the standard deviations along the principal axes:
    /// the covariance is built from the squared range `(a², b²)`.
    #[default]
    StdDev,
    /// `(a, b)` bound the eigenvalues directly.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub d_true: usize,
    pub n_units: usize,
    pub t_total: usize,
    pub t0: usize,
    pub a_q: f64,
    pub b_q: f64,
    pub a_r: f64,
    pub b_r: f64,
    pub noise_scale: NoiseScale,
    pub spectral_radius: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            d_true: 5,
            n_units: 50,
            t_total: 100,
            t0: 50,
            a_q: 0.01,
            b_q: 0.1,
            a_r: 0.01,
            b_r: 0.1,
            noise_scale: NoiseScale::StdDev,
            spectral_radius: 0.95,
            seed: 0,
        }
    }
}

/// Small (0.01, 0.1) and large (0.1, 1) covariance ranges.
pub const SMALL: (f64, f64) = (0.01, 0.1);
pub const LARGE: (f64, f64) = (0.1, 1.0);

impl SimulationConfig {
    /// Default dimensions with the given Q and R ranges.
    pub fn regime(q: (f64, f64), r: (f64, f64)) -> Self {
        Self {
            a_q: q.0,
            b_q: q.1,
            a_r: r.0,
            b_r: r.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a, b) in [("Q", self.a_q, self.b_q), ("R", self.a_r, self.b_r)] {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(TascError::config(format!("{name} range needs 0 < a <= b")));
            }
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius <= 1.0) {
            return Err(TascError::config("spectral_radius must lie in (0, 1]"));
        }
        if self.d_true < 1 || self.d_true > self.n_units.min(self.t_total) {
            return Err(TascError::config("d_true must lie in 1..=min(N, T)"));
        }
        if self.n_units < 2 {
            return Err(TascError::config("need a target and at least one donor"));
        }
        if self.t0 < 1 || self.t0 >= self.t_total {
            return Err(TascError::config("t0 must satisfy 1 <= t0 < T"));
        }
        Ok(())
    }

    fn eigen_range(&self, a: f64, b: f64) -> (f64, f64) {
        match self.noise_scale {
            NoiseScale::StdDev => (a * a, b * b),
            NoiseScale::Variance => (a, b),
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q).
fn haar_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian_matrix(dim, dim, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U · diag(λ) · Uᵀ` with `λ_i ~ Uniform(a, b)` and Haar-random `U`.
pub fn random_covariance(dim: usize, a: f64, b: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(a > 0.0 && a <= b) {
        return Err(TascError::config("random_covariance needs 0 < a <= b"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(covariance_from(dim, a, b, &mut rng))
}

fn covariance_from(dim: usize, a: f64, b: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let lambda = DVector::from_fn(dim, |_, _| if a == b { a } else { rng.random_range(a..b) });
    if a == b {
        return DMatrix::identity(dim, dim) * a;
    }
    let u = haar_orthogonal(dim, rng);
    symmetrize(&(&u * DMatrix::from_diagonal(&lambda) * u.transpose()))
}

/// Ground-truth parameters: Gaussian A rescaled to the configured spectral
/// radius, Gaussian H, random Q and R, `m0 ~ N(0, I)`, `P0 = I`.
pub fn gen_params(config: &SimulationConfig) -> Result<StateSpaceParams> {
    config.validate()?;
    let d = config.d_true;
    let n = config.n_units;
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0, k]));

    let mut rng = stream(0);
    let raw = gaussian_matrix(d, d, &mut rng);
    let rho = raw.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let a = if rho > 0.0 { raw * (config.spectral_radius / rho) } else { raw };
    let h = gaussian_matrix(n, d, &mut stream(1));
    let (qa, qb) = config.eigen_range(config.a_q, config.b_q);
    let (ra, rb) = config.eigen_range(config.a_r, config.b_r);
    let q = covariance_from(d, qa, qb, &mut stream(2));
    let r = covariance_from(n, ra, rb, &mut stream(3));
    let mut rng = stream(4);
    let m0 = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    StateSpaceParams::new(a, h, q, r, m0, DMatrix::identity(d, d), false)
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    /// Noiseless `H X`, N×T.
    pub signal: DMatrix<f64>,
    /// Observation noise, N×T.
    pub noise: DMatrix<f64>,
    pub theta_true: StateSpaceParams,
    /// Latent path `x_1..x_T`, d×T.
    pub latent: DMatrix<f64>,
}

fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = cov.nrows();
    let floored = symmetrize(cov) + DMatrix::identity(dim, dim) * COV_FLOOR;
    match nalgebra::Cholesky::new(floored.clone()) {
        Some(c) => c.l(),
        None => {
            let eig = floored.symmetric_eigen();
            let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root)
        }
    }
}

/// Sample `x_0 ~ N(m0, P0)`, then `x_t = A x_{t-1} + q_t`,
/// `y_t = H x_t + r_t` for t = 1..T. Row 0 is the target.
pub fn gen_panel(theta: &StateSpaceParams, t_total: usize, t0: usize, seed: u64) -> Result<SimulatedPanel> {
    theta.validate()?;
    if t0 < 1 || t0 >= t_total {
        return Err(TascError::config("t0 must satisfy 1 <= t0 < T"));
    }
    let (d, n) = (theta.state_dim(), theta.obs_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let lq = sampling_factor(&theta.q);
    let lr = sampling_factor(&theta.r);
    let lp = sampling_factor(&theta.p0);
    let mut std_normal = |len: usize| DVector::<f64>::from_fn(len, |_, _| rng.sample(StandardNormal));

    let mut x = &theta.m0 + &lp * std_normal(d);
    let mut latent = DMatrix::zeros(d, t_total);
    let mut noise = DMatrix::zeros(n, t_total);
    for t in 0..t_total {
        x = &theta.a * x + &lq * std_normal(d);
        latent.set_column(t, &x);
        noise.set_column(t, &(&lr * std_normal(n)));
    }
    let signal = &theta.h * &latent;
    let panel = PanelData::from_matrix(&signal + &noise, t0)?;
    Ok(SimulatedPanel {
        panel,
        signal,
        noise,
        theta_true: theta.clone(),
        latent,
    })
}

/// Parameters and a panel from one config; the panel stream is keyed by
/// the config seed.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedPanel> {
    let theta = gen_params(config)?;
    gen_panel(&theta, config.t_total, config.t0, derive_seed(config.seed, &[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrStats {
    pub mean_abs_signal: f64,
    pub mean_abs_noise: f64,
}

pub fn snr_stats(sim: &SimulatedPanel) -> SnrStats {
    let mean_abs = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64;
    SnrStats {
        mean_abs_signal: mean_abs(&sim.signal),
        mean_abs_noise: mean_abs(&sim.noise),
    }
}

/// Write `values.csv`, `signal.csv` and `theta.json` into `dir`.
pub fn export(sim: &SimulatedPanel, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_csv(&sim.panel, std::fs::File::create(dir.join("values.csv"))?)?;
    let signal = PanelData::new(
        sim.signal.clone(),
        sim.panel.t0(),
        sim.panel.unit_labels().to_vec(),
        sim.panel.time_labels().to_vec(),
    )?;
    save_csv(&signal, std::fs::File::create(dir.join("signal.csv"))?)?;
    let mut f = std::fs::File::create(dir.join("theta.json"))?;
    serde_json::to_writer_pretty(&mut f, &ParamsDocument::from_params(&sim.theta_true, &[]))?;
    f.write_all(b"\n")?;
    Ok(())
}
