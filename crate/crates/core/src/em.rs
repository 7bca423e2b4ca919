//! EM learning on pre-intervention data and counterfactual inference.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Result, TascError};
use crate::linalg::{self, symmetrize};
use crate::panel::PanelData;
use crate::seed::derive_seed;
use crate::ssm::{
    filter_pass_with, smooth_pass, SeasonalOffsets, SmoothedTrajectory, StateSpaceParams,
    UpdateRoute,
};

/// Lower bound applied to every learned noise variance.
pub const NOISE_FLOOR: f64 = 1e-10;
/// Lower bound on the initial observation-noise variances.
pub const INIT_NOISE_FLOOR: f64 = 1e-4;
/// Allowed log-likelihood decrease between EM iterations.
pub const MONOTONE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Latent dimension.
    pub d: usize,
    /// Maximum EM iterations.
    pub n_iters: usize,
    /// Stop once the relative log-likelihood gain falls below this.
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub diag_noise: bool,
    /// Fixed seasonal effects over the full panel length.
    pub seasonal: Option<SeasonalOffsets>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            d: 2,
            n_iters: 200,
            rel_tol: 1e-6,
            n_restarts: 5,
            seed: 0,
            diag_noise: true,
            seasonal: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(TascError::config("latent dimension d must be >= 1"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(TascError::config("rel_tol must be >= 0"));
        }
        if self.n_restarts < 1 {
            return Err(TascError::config("n_restarts must be >= 1"));
        }
        Ok(())
    }
}

/// Averaged moments feeding the M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// `(1/K) Σ P_k + m_k m_kᵀ`, k = 1..K
    pub sigma: DMatrix<f64>,
    /// `(1/K) Σ P_{k-1} + m_{k-1} m_{k-1}ᵀ`
    pub phi: DMatrix<f64>,
    /// `(1/K) Σ y_k m_kᵀ`
    pub b: DMatrix<f64>,
    /// `(1/K) Σ P_k G_{k-1}ᵀ + m_k m_{k-1}ᵀ`
    pub c: DMatrix<f64>,
    /// `(1/K) Σ y_k y_kᵀ`
    pub d: DMatrix<f64>,
    /// Number of steps K.
    pub steps: usize,
}

fn second_moments(y: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(y * y.transpose())) / y.ncols() as f64
}

fn accumulate_latent(
    smoothed: &SmoothedTrajectory,
    y: &DMatrix<f64>,
    d_moment: DMatrix<f64>,
) -> Result<SufficientStats> {
    let steps = y.ncols();
    if smoothed.len() != steps {
        return Err(TascError::config(format!(
            "smoothed trajectory covers {} steps, data has {steps}",
            smoothed.len()
        )));
    }
    let dim = smoothed.m_s[0].len();
    let mut sigma = DMatrix::zeros(dim, dim);
    let mut phi = DMatrix::zeros(dim, dim);
    let mut c = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(y.nrows(), dim);
    for k in 1..=steps {
        let (m, m_prev) = (&smoothed.m_s[k], &smoothed.m_s[k - 1]);
        sigma += &smoothed.p_s[k] + m * m.transpose();
        phi += &smoothed.p_s[k - 1] + m_prev * m_prev.transpose();
        c += &smoothed.p_s[k] * smoothed.g[k - 1].transpose() + m * m_prev.transpose();
        b += y.column(k - 1) * m.transpose();
    }
    let scale = 1.0 / steps as f64;
    Ok(SufficientStats {
        sigma: symmetrize(&sigma) * scale,
        phi: symmetrize(&phi) * scale,
        b: b * scale,
        c: c * scale,
        d: d_moment,
        steps,
    })
}

/// Moment averages over k = 1..K from a smoothed trajectory and the data it
/// was computed from (seasonal effects already removed).
pub fn accumulate_stats(smoothed: &SmoothedTrajectory, y: &DMatrix<f64>) -> Result<SufficientStats> {
    accumulate_latent(smoothed, y, second_moments(y))
}

/// Closed-form maximiser of the expected complete-data log-likelihood.
///
/// `A' = C Φ⁻¹`, `H' = B Σ⁻¹`, `Q' = Diag(Σ - 2 C A'ᵀ + A' Φ A'ᵀ)`,
/// `R' = Diag(D - 2 B H'ᵀ + H' Σ H'ᵀ)`, `m0' = m0s`,
/// `P0' = P0s + (m0s - m0)(m0s - m0)ᵀ` with the previous `m0`.
/// Without `diag_noise` the full symmetric Q', R' are kept, with
/// eigenvalues floored at [`NOISE_FLOOR`].
pub fn m_step(
    stats: &SufficientStats,
    theta_old: &StateSpaceParams,
    m0s: &DVector<f64>,
    p0s: &DMatrix<f64>,
) -> Result<StateSpaceParams> {
    let phi = linalg::spd_factor(&stats.phi, "Phi")?;
    let sigma = linalg::spd_factor(&stats.sigma, "Sigma")?;
    let a = phi.solve(&stats.c.transpose()).transpose();
    let h = sigma.solve(&stats.b.transpose()).transpose();

    let ca = &stats.c * a.transpose();
    let q_full = &stats.sigma - &ca - ca.transpose() + &a * &stats.phi * a.transpose();
    let (q, r) = if theta_old.diag_noise {
        let q = DMatrix::from_diagonal(&q_full.diagonal().map(|v| v.max(NOISE_FLOOR)));
        // Only the diagonal of R' is needed: D_ii - 2 B_i·H_i + H_i Σ H_iᵀ.
        let hs = &h * &stats.sigma;
        let r_diag = DVector::from_fn(h.nrows(), |i, _| {
            let v = stats.d[(i, i)] - 2.0 * stats.b.row(i).dot(&h.row(i))
                + hs.row(i).dot(&h.row(i));
            v.max(NOISE_FLOOR)
        });
        (q, DMatrix::from_diagonal(&r_diag))
    } else {
        let bh = &stats.b * h.transpose();
        let r_full = &stats.d - &bh - bh.transpose() + &h * &stats.sigma * h.transpose();
        (floor_eigenvalues(&q_full), floor_eigenvalues(&r_full))
    };

    let dm = m0s - &theta_old.m0;
    let p0 = symmetrize(&(p0s + &dm * dm.transpose()));
    Ok(StateSpaceParams {
        a,
        h,
        q,
        r,
        m0: m0s.clone(),
        p0,
        diag_noise: theta_old.diag_noise,
    })
}

fn floor_eigenvalues(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(NOISE_FLOOR));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Expected complete-data log-likelihood (without the `2π` constants) of
/// `theta` under fixed E-step moments.
pub fn expected_complete_loglik(
    stats: &SufficientStats,
    m0s: &DVector<f64>,
    p0s: &DMatrix<f64>,
    theta: &StateSpaceParams,
) -> Result<f64> {
    let k = stats.steps as f64;
    let logdet_inv_trace = |cov: &DMatrix<f64>, m: &DMatrix<f64>, what: &str| -> Result<f64> {
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| TascError::numerical(0, format!("{what} is not positive definite")))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(logdet + chol.solve(m).trace())
    };
    let dm = m0s - &theta.m0;
    let init = logdet_inv_trace(&theta.p0, &(p0s + &dm * dm.transpose()), "P0")?;
    let ca = &stats.c * theta.a.transpose();
    let trans = &stats.sigma - &ca - ca.transpose() + &theta.a * &stats.phi * theta.a.transpose();
    let dyn_term = logdet_inv_trace(&theta.q, &trans, "Q")?;
    let bh = &stats.b * theta.h.transpose();
    let obs = &stats.d - &bh - bh.transpose() + &theta.h * &stats.sigma * theta.h.transpose();
    let obs_term = logdet_inv_trace(&theta.r, &obs, "R")?;
    Ok(-0.5 * (init + k * dyn_term + k * obs_term))
}

/// Deterministic starting point for restart `restart_index`.
///
/// H holds the top-d left singular vectors scaled by their singular values
/// over √t0, A is 0.9·I plus N(0, 0.01²) noise, Q = P0 = I, R is the
/// diagonal of per-row residual variances after the rank-d reconstruction
/// (floored at [`INIT_NOISE_FLOOR`]), and m0 is the first column of the
/// implied latent path.
pub fn init_params(
    y_pre: &DMatrix<f64>,
    config: &EmConfig,
    restart_index: usize,
) -> Result<StateSpaceParams> {
    config.validate()?;
    let (n, t0) = y_pre.shape();
    if t0 < 2 {
        return Err(TascError::config("EM needs at least two pre-intervention columns"));
    }
    let d = config.d;
    if d > n.min(t0) {
        return Err(TascError::config(format!(
            "latent dimension {d} exceeds min(N={n}, t0={t0})"
        )));
    }
    if y_pre.iter().any(|v| !v.is_finite()) {
        return Err(TascError::config("pre-intervention data must be finite"));
    }
    let svd = y_pre.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..d];

    let root_t0 = (t0 as f64).sqrt();
    let h = DMatrix::from_fn(n, d, |i, j| {
        u[(i, order[j])] * svd.singular_values[order[j]] / root_t0
    });
    let latent = DMatrix::from_fn(d, t0, |i, t| v_t[(order[i], t)] * root_t0);
    let resid = y_pre - &h * &latent;
    let r_diag = DVector::from_fn(n, |i, _| {
        let ms = resid.row(i).iter().map(|e| e * e).sum::<f64>() / t0 as f64;
        ms.max(INIT_NOISE_FLOOR)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[restart_index as u64]));
    let noise = Normal::new(0.0, 0.01).expect("valid normal");
    let a = DMatrix::identity(d, d) * 0.9 + DMatrix::from_fn(d, d, |_, _| noise.sample(&mut rng));

    StateSpaceParams::new(
        a,
        h,
        DMatrix::identity(d, d),
        DMatrix::from_diagonal(&r_diag),
        latent.column(0).into_owned(),
        DMatrix::identity(d, d),
        config.diag_noise,
    )
}

/// Result of [`em_pre`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub theta: StateSpaceParams,
    /// Log-likelihood of each visited parameter set of the winning
    /// restart, starting with the initial one. Empty when no iteration ran.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood of the returned parameters (NaN if never evaluated).
    pub loglik: f64,
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Traces of every restart in index order, including ones that
    /// stopped with an error (a trace ending in a decrease marks a
    /// monotonicity violation).
    pub restart_traces: Vec<Vec<f64>>,
    /// Messages from restarts that stopped early or failed.
    pub diagnostics: Vec<String>,
}

fn adjusted(y: &DMatrix<f64>, seasonal: Option<&SeasonalOffsets>) -> DMatrix<f64> {
    match seasonal {
        None => y.clone(),
        Some(s) => DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - s.at(j)),
    }
}

struct RestartOutcome {
    theta: StateSpaceParams,
    iterations: usize,
    converged: bool,
}

fn check_monotone(trace: &mut Vec<f64>, ll: f64, restart: usize, it: usize) -> Result<()> {
    if let Some(&prev) = trace.last() {
        if ll < prev - MONOTONE_SLACK {
            trace.push(ll);
            let msg = format!(
                "restart {restart}: log-likelihood fell from {prev} to {ll} at iteration {it}"
            );
            log::warn!("{msg}");
            return Err(TascError::Fit { causes: vec![msg] });
        }
    }
    Ok(())
}

/// One EM run; `trace` receives the log-likelihood of every evaluated
/// parameter set, so the caller keeps it even when the run fails.
fn run_restart(
    y: &DMatrix<f64>,
    d_moment: &DMatrix<f64>,
    config: &EmConfig,
    restart: usize,
    trace: &mut Vec<f64>,
) -> Result<RestartOutcome> {
    let mut theta = init_params(y, config, restart)?;
    let mut iterations = 0;
    for it in 0..config.n_iters {
        let out = filter_pass_with(y, &theta, None, None, UpdateRoute::Auto)?;
        let ll = out.loglik;
        check_monotone(trace, ll, restart, it)?;
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.rel_tol {
                return Ok(RestartOutcome { theta, iterations, converged: true });
            }
        }
        let smoothed = smooth_pass(&out.states, &theta)?;
        let stats = accumulate_latent(&smoothed, y, d_moment.clone())?;
        theta = m_step(&stats, &theta, &smoothed.m_s[0], &smoothed.p_s[0])?;
        iterations = it + 1;
    }
    // the last M-step output has not been scored yet
    let ll = filter_pass_with(y, &theta, None, None, UpdateRoute::Auto)?.loglik;
    check_monotone(trace, ll, restart, config.n_iters)?;
    trace.push(ll);
    Ok(RestartOutcome { theta, iterations, converged: false })
}

/// EM over the pre-intervention block `y_pre` (N×t0, target in row 0).
/// Runs every restart and keeps the one with the highest final
/// log-likelihood (lowest restart index on ties).
pub fn em_pre(y_pre: &DMatrix<f64>, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    if let Some(s) = &config.seasonal {
        if s.0.len() < y_pre.ncols() {
            return Err(TascError::config("seasonal offsets shorter than the data"));
        }
    }
    let y = adjusted(y_pre, config.seasonal.as_ref());
    if config.n_iters == 0 {
        return Ok(EmFit {
            theta: init_params(&y, config, 0)?,
            loglik_trace: Vec::new(),
            loglik: f64::NAN,
            restart: 0,
            iterations: 0,
            converged: false,
            restart_traces: Vec::new(),
            diagnostics: Vec::new(),
        });
    }
    let d_moment = second_moments(&y);
    let mut best: Option<(usize, RestartOutcome, f64)> = None;
    let mut traces = Vec::with_capacity(config.n_restarts);
    let mut causes = Vec::new();
    for restart in 0..config.n_restarts {
        let mut trace = Vec::new();
        match run_restart(&y, &d_moment, config, restart, &mut trace) {
            Ok(out) => {
                let ll = *trace.last().expect("at least one evaluation");
                if best.as_ref().is_none_or(|(_, _, b)| ll > *b) {
                    best = Some((restart, out, ll));
                }
            }
            Err(e) => {
                if !matches!(e, TascError::Fit { .. }) {
                    log::warn!("EM restart {restart} failed: {e}");
                }
                causes.push(format!("restart {restart}: {e}"));
            }
        }
        traces.push(trace);
    }
    match best {
        Some((restart, out, loglik)) => Ok(EmFit {
            theta: out.theta,
            loglik_trace: traces[restart].clone(),
            loglik,
            restart,
            iterations: out.iterations,
            converged: out.converged,
            restart_traces: traces,
            diagnostics: causes,
        }),
        None => Err(TascError::Fit { causes }),
    }
}

/// Which variance the confidence band is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiVariance {
    /// `h1ᵀ P h1 + r1`: band for the observed target outcome.
    #[default]
    Predictive,
    /// `h1ᵀ P h1`: band for the noiseless target signal.
    Signal,
}

/// Counterfactual target path after the intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEstimate {
    pub y_hat: Vec<f64>,
    pub var_signal: Vec<f64>,
    pub var_pred: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// In-sample target fit over the pre-intervention columns.
    pub fitted_pre: Vec<f64>,
    pub level: f64,
    pub variance: CiVariance,
}

/// Full TASC output.
#[derive(Debug, Clone)]
pub struct TascFit {
    pub theta: StateSpaceParams,
    pub estimate: CounterfactualEstimate,
    pub em: EmFit,
}

/// Two-sided Gaussian quantile for a central interval of mass `level`.
pub fn gaussian_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(TascError::config(format!("confidence level {level} not in (0, 1)")));
    }
    let n = StdNormal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + 0.5 * level))
}

/// Filter and smooth the full panel under fixed parameters, with the target
/// treated as missing from `t0` on, and read off the target path.
pub fn counterfactual(
    panel: &PanelData,
    theta: &StateSpaceParams,
    seasonal: Option<&SeasonalOffsets>,
    level: f64,
    variance: CiVariance,
) -> Result<CounterfactualEstimate> {
    let z = gaussian_quantile(level)?;
    if theta.obs_dim() != panel.n_units() {
        return Err(TascError::config("parameters do not match the panel's unit count"));
    }
    let t0 = panel.t0();
    let total = panel.n_times();
    if let Some(s) = seasonal {
        if s.0.len() != total {
            return Err(TascError::config("seasonal offsets must cover the full panel"));
        }
    }
    let states = filter_pass_with(panel.values(), theta, seasonal, Some(t0), UpdateRoute::Auto)?
        .states;
    let smoothed = smooth_pass(&states, theta)?;
    let h1 = theta.target_loading();
    let r1 = theta.target_noise();
    let s_at = |j: usize| seasonal.map_or(0.0, |s| s.at(j));
    // smoothed index k corresponds to column k - 1
    let mean_at = |j: usize| h1.dot(&smoothed.m_s[j + 1]) + s_at(j);
    let fitted_pre = (0..t0).map(mean_at).collect();
    let y_hat: Vec<f64> = (t0..total).map(mean_at).collect();
    let var_signal: Vec<f64> = (t0..total)
        .map(|j| (h1.transpose() * &smoothed.p_s[j + 1] * &h1)[(0, 0)].max(0.0))
        .collect();
    let var_pred: Vec<f64> = var_signal.iter().map(|v| v + r1).collect();
    let band = match variance {
        CiVariance::Predictive => &var_pred,
        CiVariance::Signal => &var_signal,
    };
    let half: Vec<f64> = band.iter().map(|v| z * v.sqrt()).collect();
    Ok(CounterfactualEstimate {
        ci_lower: y_hat.iter().zip(&half).map(|(y, w)| y - w).collect(),
        ci_upper: y_hat.iter().zip(&half).map(|(y, w)| y + w).collect(),
        y_hat,
        var_signal,
        var_pred,
        fitted_pre,
        level,
        variance,
    })
}

/// Learn on the pre-intervention block, then infer the target's untreated
/// path after `t0`. Target cells after `t0` are never read.
pub fn tasc_infer(panel: &PanelData, config: &EmConfig, level: f64) -> Result<TascFit> {
    tasc_infer_with(panel, config, level, CiVariance::Predictive)
}

pub fn tasc_infer_with(
    panel: &PanelData,
    config: &EmConfig,
    level: f64,
    variance: CiVariance,
) -> Result<TascFit> {
    gaussian_quantile(level)?;
    let em = em_pre(&panel.pre(), config)?;
    let estimate = counterfactual(panel, &em.theta, config.seasonal.as_ref(), level, variance)?;
    Ok(TascFit {
        theta: em.theta.clone(),
        estimate,
        em,
    })
}

/// Mean distance between the upper and lower band over the horizon.
pub fn confidence_width(est: &CounterfactualEstimate) -> f64 {
    let n = est.ci_upper.len();
    if n == 0 {
        return 0.0;
    }
    est.ci_upper
        .iter()
        .zip(&est.ci_lower)
        .map(|(u, l)| u - l)
        .sum::<f64>()
        / n as f64
}
