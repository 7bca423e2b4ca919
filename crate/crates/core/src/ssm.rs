//! Linear-Gaussian state-space primitives.
//!
//! Model:
//! `x_t = A x_{t-1} + q_t`, `q_t ~ N(0, Q)`
//! `y_t = H x_t + s_t 1 + r_t`, `r_t ~ N(0, R)`
//! with `x_0 ~ N(m0, P0)`.
//!
//! Row 0 of `y_t` is the target unit. After the intervention its
//! observation is treated as carrying infinite noise variance, which is the
//! same as filtering on the donor rows alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TascError};
use crate::linalg::{self, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tolerance on the smallest eigenvalue when validating covariances.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Parameters `{A, H, Q, R, m0, P0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceParams {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Q and R restricted to diagonal matrices.
    pub diag_noise: bool,
}

impl StateSpaceParams {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
        diag_noise: bool,
    ) -> Result<Self> {
        let theta = Self {
            a,
            h,
            q,
            r,
            m0,
            p0,
            diag_noise,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Dimension, finiteness, symmetry and PSD checks.
    pub fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        let n = self.h.nrows();
        let shape_ok = d >= 1
            && n >= 1
            && self.a.shape() == (d, d)
            && self.h.shape() == (n, d)
            && self.q.shape() == (d, d)
            && self.r.shape() == (n, n)
            && self.m0.len() == d
            && self.p0.shape() == (d, d);
        if !shape_ok {
            return Err(TascError::config(format!(
                "inconsistent parameter shapes: A {:?}, H {:?}, Q {:?}, R {:?}, m0 {}, P0 {:?}",
                self.a.shape(),
                self.h.shape(),
                self.q.shape(),
                self.r.shape(),
                self.m0.len(),
                self.p0.shape()
            )));
        }
        let finite = [&self.a, &self.h, &self.q, &self.r, &self.p0]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && self.m0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(TascError::config("parameters must be finite"));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P0", &self.p0)] {
            let scale = linalg::max_abs(m).max(1.0);
            if linalg::max_abs(&(m - m.transpose())) > 1e-12 * scale {
                return Err(TascError::config(format!("{name} is not symmetric")));
            }
            let eig = linalg::min_eigenvalue(m);
            if eig < -PD_TOLERANCE {
                return Err(TascError::config(format!(
                    "{name} is not positive semidefinite (min eigenvalue {eig:e})"
                )));
            }
        }
        if self.diag_noise && !(linalg::is_diagonal(&self.q) && linalg::is_diagonal(&self.r)) {
            return Err(TascError::config(
                "diag_noise is set but Q or R has off-diagonal entries",
            ));
        }
        Ok(())
    }

    /// Target loading `h1` (row 0 of H).
    pub fn target_loading(&self) -> DVector<f64> {
        self.h.row(0).transpose()
    }

    /// Target observation-noise variance `r1`.
    pub fn target_noise(&self) -> f64 {
        self.r[(0, 0)]
    }

    /// Model restricted to the donor rows (H2, R2).
    pub fn donor_model(&self) -> Self {
        let n = self.obs_dim();
        Self {
            h: self.h.rows(1, n - 1).into_owned(),
            r: self.r.view((1, 1), (n - 1, n - 1)).into_owned(),
            ..self.clone()
        }
    }
}

/// One step of filtering output.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Time index; 0 is the prior `(m0, P0)`.
    pub k: usize,
    pub m_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub m: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl FilterState {
    /// The `k = 0` state built from the prior.
    pub fn prior(theta: &StateSpaceParams) -> Self {
        Self {
            k: 0,
            m_pred: theta.m0.clone(),
            p_pred: theta.p0.clone(),
            m: theta.m0.clone(),
            p: theta.p0.clone(),
        }
    }
}

/// Smoothed moments for `k = 0..=K`; `g[k]` is the gain linking `k` to `k+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrajectory {
    pub m_s: Vec<DVector<f64>>,
    pub p_s: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
}

impl SmoothedTrajectory {
    /// Number of observation steps `K` (the trajectory holds `K + 1` states).
    pub fn len(&self) -> usize {
        self.m_s.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.m_s.len() <= 1
    }
}

/// Fixed per-time seasonal effects, added as `s_t 1` to the observation mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalOffsets(pub Vec<f64>);

impl SeasonalOffsets {
    pub fn new(s: Vec<f64>, t_total: usize) -> Result<Self> {
        if s.len() != t_total {
            return Err(TascError::config(format!(
                "seasonal offsets have length {}, expected {t_total}",
                s.len()
            )));
        }
        Ok(Self(s))
    }

    pub fn at(&self, k: usize) -> f64 {
        self.0[k]
    }
}

/// How the measurement update is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRoute {
    /// Information form when R is diagonal, dense otherwise.
    #[default]
    Auto,
    /// Form `S = H P Hᵀ + R` and invert it (O(N³) per step).
    Dense,
    /// Woodbury identities on the d×d system `I + P Hᵀ R⁻¹ H`; requires a
    /// diagonal R with positive entries (O(N d²) per step).
    Information,
}

struct Update {
    m: DVector<f64>,
    p: DMatrix<f64>,
    loglik: f64,
}

fn predict(prev: &FilterState, theta: &StateSpaceParams) -> (DVector<f64>, DMatrix<f64>) {
    let m_pred = &theta.a * &prev.m;
    let p_pred = symmetrize(&(&theta.a * &prev.p * theta.a.transpose() + &theta.q));
    (m_pred, p_pred)
}

fn innovation(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    m_pred: &DVector<f64>,
    s_k: Option<f64>,
) -> DVector<f64> {
    let mut v = y - h * m_pred;
    if let Some(s) = s_k {
        v.add_scalar_mut(-s);
    }
    v
}

/// Symmetrize, and add jitter if rounding has pushed the matrix out of the
/// PSD cone.
fn stabilize(p: DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let p = symmetrize(&p);
    if nalgebra::Cholesky::new(p.clone()).is_some() {
        return p;
    }
    let eig = linalg::min_eigenvalue(&p);
    if eig >= 0.0 {
        return p;
    }
    log::warn!("step {k}: covariance lost definiteness (min eigenvalue {eig:e}); adding jitter");
    let d = p.nrows();
    p + DMatrix::identity(d, d) * (linalg::JITTER - eig)
}

fn dense_update(
    m_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    v: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Update> {
    let s = symmetrize(&(h * p_pred * h.transpose() + r));
    let chol = linalg::spd_factor(&s, "innovation covariance S")?;
    // Kᵀ = S⁻¹ H P
    let kt = chol.solve(&(h * p_pred));
    let k = kt.transpose();
    let m = m_pred + &k * v;
    let p = p_pred - &k * &s * &kt;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = v.dot(&chol.solve(v));
    Ok(Update {
        m,
        p,
        loglik: -0.5 * (log_det + quad + v.len() as f64 * LN_2PI),
    })
}

fn information_update(
    m_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    v: &DVector<f64>,
    h: &DMatrix<f64>,
    r_diag: &DVector<f64>,
) -> Result<Update> {
    let d = p_pred.nrows();
    if let Some(bad) = r_diag.iter().find(|x| !(**x > 0.0)) {
        return Err(TascError::numerical(
            0,
            format!("information update needs positive R diagonal, found {bad:e}"),
        ));
    }
    let rinv = r_diag.map(|x| 1.0 / x);
    // Hᵀ R⁻¹ as a d×n matrix.
    let mut ht_rinv = h.transpose();
    for (mut col, w) in ht_rinv.column_iter_mut().zip(rinv.iter()) {
        col *= *w;
    }
    let w = symmetrize(&(&ht_rinv * h));
    let u = &ht_rinv * v;
    // (I + P W) is similar to an SPD matrix with eigenvalues >= 1.
    let lu = (DMatrix::identity(d, d) + p_pred * &w).lu();
    let det = lu.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(TascError::numerical(
            0,
            format!("information system has determinant {det:e}"),
        ));
    }
    // P_post = (I + P W)⁻¹ P = (P⁻¹ + W)⁻¹
    let p_post = lu
        .solve(p_pred)
        .ok_or_else(|| TascError::numerical(0, "information system is singular"))?;
    let p_post = symmetrize(&p_post);
    let gain_u = &p_post * &u;
    let m = m_pred + &gain_u;
    let log_det = r_diag.iter().map(|x| x.ln()).sum::<f64>() + det.ln();
    let quad = v.iter().zip(rinv.iter()).map(|(a, b)| a * a * b).sum::<f64>() - u.dot(&gain_u);
    Ok(Update {
        m,
        p: p_post,
        loglik: -0.5 * (log_det + quad + v.len() as f64 * LN_2PI),
    })
}

fn use_information(route: UpdateRoute, r: &DMatrix<f64>) -> bool {
    match route {
        UpdateRoute::Dense => false,
        UpdateRoute::Information => true,
        UpdateRoute::Auto => {
            linalg::is_diagonal(r) && r.diagonal().iter().all(|x| *x > 0.0)
        }
    }
}

fn full_step(
    y: &DVector<f64>,
    prev: &FilterState,
    theta: &StateSpaceParams,
    s_k: Option<f64>,
    route: UpdateRoute,
) -> Result<(FilterState, f64)> {
    let k = prev.k + 1;
    if y.len() != theta.obs_dim() {
        return Err(TascError::config(format!(
            "observation at step {k} has length {}, expected {}",
            y.len(),
            theta.obs_dim()
        )));
    }
    let (m_pred, p_pred) = predict(prev, theta);
    let v = innovation(y, &theta.h, &m_pred, s_k);
    let up = if use_information(route, &theta.r) {
        information_update(&m_pred, &p_pred, &v, &theta.h, &theta.r.diagonal())
    } else {
        dense_update(&m_pred, &p_pred, &v, &theta.h, &theta.r)
    }
    .map_err(|e| e.at_step(k))?;
    Ok((
        FilterState {
            k,
            m_pred,
            p_pred,
            m: up.m,
            p: stabilize(up.p, k),
        },
        up.loglik,
    ))
}

/// Dense missing-target update: the target innovation is forced to zero and
/// `S⁻¹` is the zero-padded inverse of the donor block.
fn dense_missing_update(
    m_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &StateSpaceParams,
    s_k: Option<f64>,
) -> Result<Update> {
    let n = theta.obs_dim();
    let h = &theta.h;
    let h1 = theta.target_loading();
    let mut y_aug = y.clone();
    y_aug[0] = h1.dot(m_pred) + s_k.unwrap_or(0.0);
    let v = innovation(&y_aug, h, m_pred, s_k);

    let donors = theta.donor_model();
    let s22 = symmetrize(&(&donors.h * p_pred * donors.h.transpose() + &donors.r));
    let chol = linalg::spd_factor(&s22, "donor innovation covariance S22")?;
    let s22_inv = symmetrize(&chol.inverse());
    let mut s_inv = DMatrix::zeros(n, n);
    s_inv.view_mut((1, 1), (n - 1, n - 1)).copy_from(&s22_inv);

    let k = p_pred * h.transpose() * &s_inv;
    let m = m_pred + &k * &v;
    // Column 0 of K is zero, so only the finite donor block of S enters.
    let k2 = k.columns(1, n - 1);
    let p = p_pred - k2 * &s22 * k2.transpose();

    let v2 = v.rows(1, n - 1).into_owned();
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = v2.dot(&chol.solve(&v2));
    Ok(Update {
        m,
        p,
        loglik: -0.5 * (log_det + quad + (n - 1) as f64 * LN_2PI),
    })
}

fn missing_step(
    y: &DVector<f64>,
    prev: &FilterState,
    theta: &StateSpaceParams,
    s_k: Option<f64>,
    route: UpdateRoute,
) -> Result<(FilterState, f64)> {
    let k = prev.k + 1;
    let n = theta.obs_dim();
    if y.len() != n || n < 2 {
        return Err(TascError::config(format!(
            "observation at step {k} has length {}, expected {n} >= 2",
            y.len()
        )));
    }
    if y.rows(1, n - 1).iter().any(|v| !v.is_finite()) {
        return Err(TascError::config(format!(
            "non-finite donor observation at step {k}"
        )));
    }
    let (m_pred, p_pred) = predict(prev, theta);
    let donors = theta.donor_model();
    let up = if use_information(route, &donors.r) {
        let y2 = y.rows(1, n - 1).into_owned();
        let v2 = innovation(&y2, &donors.h, &m_pred, s_k);
        information_update(&m_pred, &p_pred, &v2, &donors.h, &donors.r.diagonal())
    } else {
        dense_missing_update(&m_pred, &p_pred, y, theta, s_k)
    }
    .map_err(|e| e.at_step(k))?;
    Ok((
        FilterState {
            k,
            m_pred,
            p_pred,
            m: up.m,
            p: stabilize(up.p, k),
        },
        up.loglik,
    ))
}

/// One Kalman predict/update step.
///
/// `m_pred = A m`, `P_pred = A P Aᵀ + Q`, `v = y - H m_pred - s 1`,
/// `S = H P_pred Hᵀ + R`, `K = P_pred Hᵀ S⁻¹`, `m = m_pred + K v`,
/// `P = P_pred - K S Kᵀ` (symmetrized).
pub fn kalman_step(
    y_k: &DVector<f64>,
    prev: &FilterState,
    theta: &StateSpaceParams,
    s_k: Option<f64>,
) -> Result<FilterState> {
    full_step(y_k, prev, theta, s_k, UpdateRoute::Dense).map(|(s, _)| s)
}

/// Kalman step with the target observation (entry 0) missing. The value in
/// `y_k[0]` is never read.
pub fn kalman_step_missing_target(
    y_k: &DVector<f64>,
    prev: &FilterState,
    theta: &StateSpaceParams,
    s_k: Option<f64>,
) -> Result<FilterState> {
    missing_step(y_k, prev, theta, s_k, UpdateRoute::Dense).map(|(s, _)| s)
}

/// Smoothed moments at `k` given the filtered state at `k` and smoothed
/// moments at `k + 1`. Returns `(m_s, P_s, G)`.
pub fn rts_step(
    filtered_k: &FilterState,
    m_s_next: &DVector<f64>,
    p_s_next: &DMatrix<f64>,
    theta: &StateSpaceParams,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (m_pred, p_pred) = predict(filtered_k, theta);
    rts_update(filtered_k, &m_pred, &p_pred, m_s_next, p_s_next, theta)
}

/// RTS correction given the one-step prediction from `filtered_k`.
fn rts_update(
    filtered_k: &FilterState,
    m_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    m_s_next: &DVector<f64>,
    p_s_next: &DMatrix<f64>,
    theta: &StateSpaceParams,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let chol = linalg::spd_factor(p_pred, "predicted covariance P_{k+1|k}")
        .map_err(|e| e.at_step(filtered_k.k))?;
    // G = P_k Aᵀ P_pred⁻¹  ⇔  Gᵀ = P_pred⁻¹ A P_k
    let g = chol.solve(&(&theta.a * &filtered_k.p)).transpose();
    let m_s = &filtered_k.m + &g * (m_s_next - m_pred);
    let p_s = &filtered_k.p + &g * (p_s_next - p_pred) * g.transpose();
    Ok((m_s, symmetrize(&p_s), g))
}

/// Filter output with the innovation log-likelihood.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// States for `k = 1..=K`.
    pub states: Vec<FilterState>,
    /// Sum of innovation log-densities. Steps with a missing target only
    /// count the donor coordinates.
    pub loglik: f64,
}

fn check_seasonal(seasonal: Option<&SeasonalOffsets>, k: usize) -> Result<()> {
    match seasonal {
        Some(s) if s.0.len() < k => Err(TascError::config(format!(
            "seasonal offsets cover {} steps, data has {k}",
            s.0.len()
        ))),
        _ => Ok(()),
    }
}

/// Forward pass over the columns of `y` (N×K). Columns with index
/// `>= missing_target_from` (0-based) use the missing-target update.
pub fn filter_pass_with(
    y: &DMatrix<f64>,
    theta: &StateSpaceParams,
    seasonal: Option<&SeasonalOffsets>,
    missing_target_from: Option<usize>,
    route: UpdateRoute,
) -> Result<FilterOutput> {
    let steps = y.ncols();
    if steps == 0 {
        return Err(TascError::config("filter needs at least one observation"));
    }
    if y.nrows() != theta.obs_dim() {
        return Err(TascError::config(format!(
            "data has {} rows, model expects {}",
            y.nrows(),
            theta.obs_dim()
        )));
    }
    check_seasonal(seasonal, steps)?;
    let cutoff = missing_target_from.unwrap_or(usize::MAX);
    let mut states = Vec::with_capacity(steps);
    let mut loglik = 0.0;
    let mut prev = FilterState::prior(theta);
    for j in 0..steps {
        let yk = y.column(j).into_owned();
        let s = seasonal.map(|s| s.at(j));
        let (state, ll) = if j >= cutoff {
            missing_step(&yk, &prev, theta, s, route)?
        } else {
            full_step(&yk, &prev, theta, s, route)?
        };
        loglik += ll;
        states.push(state.clone());
        prev = state;
    }
    Ok(FilterOutput { states, loglik })
}

pub fn filter_pass(
    y: &DMatrix<f64>,
    theta: &StateSpaceParams,
    seasonal: Option<&SeasonalOffsets>,
    missing_target_from: Option<usize>,
) -> Result<Vec<FilterState>> {
    filter_pass_with(y, theta, seasonal, missing_target_from, UpdateRoute::Auto)
        .map(|out| out.states)
}

/// Backward RTS pass down to the `k = 0` prior state. `filtered` must come
/// from a filter pass under the same `theta`: its stored predictions are
/// reused.
pub fn smooth_pass(filtered: &[FilterState], theta: &StateSpaceParams) -> Result<SmoothedTrajectory> {
    let last = filtered
        .last()
        .ok_or_else(|| TascError::config("smoother needs at least one filtered state"))?;
    let steps = filtered.len();
    let mut m_s = vec![DVector::zeros(0); steps + 1];
    let mut p_s = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut g = vec![DMatrix::zeros(0, 0); steps];
    m_s[steps] = last.m.clone();
    p_s[steps] = last.p.clone();
    let prior = FilterState::prior(theta);
    for k in (0..steps).rev() {
        let state = if k == 0 { &prior } else { &filtered[k - 1] };
        // the filter already stored the prediction made from `state`
        let next = &filtered[k];
        let (m, p, gain) = rts_update(state, &next.m_pred, &next.p_pred, &m_s[k + 1], &p_s[k + 1], theta)?;
        m_s[k] = m;
        p_s[k] = p;
        g[k] = gain;
    }
    Ok(SmoothedTrajectory { m_s, p_s, g })
}

/// Innovation log-likelihood of `y` under `theta`.
pub fn log_likelihood(
    y: &DMatrix<f64>,
    theta: &StateSpaceParams,
    seasonal: Option<&SeasonalOffsets>,
    missing_target_from: Option<usize>,
) -> Result<f64> {
    filter_pass_with(y, theta, seasonal, missing_target_from, UpdateRoute::Auto)
        .map(|out| out.loglik)
}

/// JSON form of fitted parameters: row-major matrices plus the EM trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub a: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    pub p0: Vec<Vec<f64>>,
    pub diag_noise: bool,
    #[serde(default)]
    pub loglik_trace: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(TascError::config(format!("{name} is not {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ParamsDocument {
    pub fn from_params(theta: &StateSpaceParams, loglik_trace: &[f64]) -> Self {
        Self {
            state_dim: theta.state_dim(),
            obs_dim: theta.obs_dim(),
            a: rows_of(&theta.a),
            h: rows_of(&theta.h),
            q: rows_of(&theta.q),
            r: rows_of(&theta.r),
            m0: theta.m0.iter().copied().collect(),
            p0: rows_of(&theta.p0),
            diag_noise: theta.diag_noise,
            loglik_trace: loglik_trace.to_vec(),
        }
    }

    pub fn to_params(&self) -> Result<StateSpaceParams> {
        let (d, n) = (self.state_dim, self.obs_dim);
        if self.m0.len() != d {
            return Err(TascError::config("m0 length does not match state_dim"));
        }
        StateSpaceParams::new(
            from_rows(&self.a, d, d, "A")?,
            from_rows(&self.h, n, d, "H")?,
            from_rows(&self.q, d, d, "Q")?,
            from_rows(&self.r, n, n, "R")?,
            DVector::from_vec(self.m0.clone()),
            from_rows(&self.p0, d, d, "P0")?,
            self.diag_noise,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, h: f64, q: f64, r: f64, m0: f64, p0: f64) -> StateSpaceParams {
        let m = |x| DMatrix::from_element(1, 1, x);
        StateSpaceParams::new(m(a), m(h), m(q), m(r), DVector::from_element(1, m0), m(p0), true)
            .unwrap()
    }

    fn y1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn scalar_conditioning() {
        let theta = scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        let s = kalman_step(&y1(1.0), &FilterState::prior(&theta), &theta, None).unwrap();
        assert!((s.m[0] - 0.5).abs() < 1e-15);
        assert!((s.p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s.k, 1);
    }

    #[test]
    fn zero_loading_is_pure_prediction() {
        let theta = scalar(2.0, 0.0, 0.0, 1.0, 0.7, 1.0);
        let s = kalman_step(&y1(123.0), &FilterState::prior(&theta), &theta, None).unwrap();
        assert_eq!(s.m, s.m_pred);
        assert_eq!(s.p, s.p_pred);
        assert_eq!(s.m[0], 1.4);
        assert_eq!(s.p[(0, 0)], 4.0);
    }

    #[test]
    fn zero_loading_multivariate() {
        let theta = StateSpaceParams::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(3, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::identity(2, 2),
            true,
        )
        .unwrap();
        let y = DVector::from_vec(vec![5.0, 6.0, 7.0]);
        let s = kalman_step(&y, &FilterState::prior(&theta), &theta, None).unwrap();
        assert_eq!(s.m, s.m_pred);
        assert_eq!(s.p, s.p_pred);
    }

    #[test]
    fn seasonal_offset_is_subtracted() {
        let theta = scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        let prior = FilterState::prior(&theta);
        let a = kalman_step(&y1(3.5), &prior, &theta, Some(2.5)).unwrap();
        let b = kalman_step(&y1(1.0), &prior, &theta, None).unwrap();
        assert_eq!(a.m, b.m);
    }

    #[test]
    fn singular_innovation_covariance_is_reported() {
        // Two identical noiseless observations of the same state.
        let theta = StateSpaceParams::new(
            DMatrix::identity(1, 1),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(1, 1),
            DMatrix::zeros(2, 2),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            false,
        )
        .unwrap();
        let prev = FilterState::prior(&theta);
        let err = kalman_step(&DVector::from_vec(vec![1.0, 1.0]), &prev, &theta, None).unwrap_err();
        assert!(matches!(err, TascError::Numerical { step: 1, .. }), "{err}");
    }

    #[test]
    fn missing_target_matches_scalar_reduction() {
        // N=2, d=1, H=(1,1), R=diag(r1,1); donor observation 1.
        for r1 in [0.3, 5.0, 1e8] {
            let theta = StateSpaceParams::new(
                DMatrix::identity(1, 1),
                DMatrix::from_element(2, 1, 1.0),
                DMatrix::zeros(1, 1),
                DMatrix::from_diagonal(&DVector::from_vec(vec![r1, 1.0])),
                DVector::zeros(1),
                DMatrix::identity(1, 1),
                true,
            )
            .unwrap();
            let prev = FilterState::prior(&theta);
            let got = kalman_step_missing_target(
                &DVector::from_vec(vec![f64::NAN, 1.0]),
                &prev,
                &theta,
                None,
            )
            .unwrap();
            assert!((got.m[0] - 0.5).abs() < 1e-15);
            assert!((got.p[(0, 0)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_target_value_is_ignored() {
        let theta = StateSpaceParams::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.0, 0.7, 0.2]),
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3, 0.4])),
            DVector::from_vec(vec![0.1, 0.2]),
            DMatrix::identity(2, 2),
            true,
        )
        .unwrap();
        let prev = FilterState::prior(&theta);
        let a = kalman_step_missing_target(&DVector::from_vec(vec![0.0, 1.0, 2.0]), &prev, &theta, None).unwrap();
        let b = kalman_step_missing_target(&DVector::from_vec(vec![1e6, 1.0, 2.0]), &prev, &theta, None).unwrap();
        assert_eq!(a, b);
        for route in [UpdateRoute::Dense, UpdateRoute::Information] {
            let (c, _) = missing_step(&DVector::from_vec(vec![-7.0, 1.0, 2.0]), &prev, &theta, None, route).unwrap();
            assert!(linalg::max_abs(&(c.p - &a.p)) < 1e-14);
        }
    }

    #[test]
    fn rts_zero_correction() {
        let theta = scalar(0.8, 1.0, 0.5, 1.0, 0.0, 1.0);
        let s = kalman_step(&y1(2.0), &FilterState::prior(&theta), &theta, None).unwrap();
        let (m_pred, p_pred) = predict(&s, &theta);
        let (m, p, _) = rts_step(&s, &m_pred, &p_pred, &theta).unwrap();
        assert!((m[0] - s.m[0]).abs() < 1e-15);
        assert!((p[(0, 0)] - s.p[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn rts_singular_prediction_is_reported() {
        let theta = scalar(1.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let prior = FilterState::prior(&theta);
        assert!(matches!(
            rts_step(&prior, &theta.m0, &theta.p0, &theta),
            Err(TascError::Numerical { .. })
        ));
    }

    #[test]
    fn zero_transition_smoother_equals_filter() {
        let theta = StateSpaceParams::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, -1.0, 2.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3) * 0.5,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            true,
        )
        .unwrap();
        let y = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64).sin());
        let f = filter_pass(&y, &theta, None, None).unwrap();
        let s = smooth_pass(&f, &theta).unwrap();
        for k in 1..=4 {
            assert!((&s.m_s[k] - &f[k - 1].m).amax() < 1e-14);
            assert!(linalg::max_abs(&(&s.p_s[k] - &f[k - 1].p)) < 1e-14);
            if k < 4 {
                assert_eq!(s.g[k], DMatrix::zeros(2, 2));
            }
        }
    }

    #[test]
    fn single_step_pass() {
        let theta = scalar(0.9, 1.0, 0.1, 1.0, 0.0, 1.0);
        let y = DMatrix::from_element(1, 1, 0.4);
        let f = filter_pass(&y, &theta, None, None).unwrap();
        let direct = kalman_step(&y1(0.4), &FilterState::prior(&theta), &theta, None).unwrap();
        assert_eq!(f.len(), 1);
        assert!((f[0].m[0] - direct.m[0]).abs() < 1e-15);
        let s = smooth_pass(&f, &theta).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.m_s[1], f[0].m);
        assert_eq!(s.p_s[1], f[0].p);
        assert_eq!(s.g.len(), 1);
    }

    #[test]
    fn filter_indices_are_monotone() {
        let theta = scalar(0.9, 1.0, 0.1, 1.0, 0.0, 1.0);
        let y = DMatrix::from_fn(1, 6, |_, j| j as f64);
        let f = filter_pass(&y, &theta, None, Some(3)).unwrap_err();
        // one row: the donor block is empty
        assert!(matches!(f, TascError::Config(_)));
        let f = filter_pass(&y, &theta, None, None).unwrap();
        assert_eq!(f.iter().map(|s| s.k).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn scalar_loglik_by_hand() {
        let theta = scalar(1.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let y = DMatrix::zeros(1, 1);
        let ll = log_likelihood(&y, &theta, None, None).unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-15);
        let dense = filter_pass_with(&y, &theta, None, None, UpdateRoute::Dense).unwrap().loglik;
        assert!((dense + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn loglik_scaling_with_zero_innovation() {
        // One step, y = 0 = prediction: ll = -0.5 (ln(2π) + ln(P0 + Q + R)).
        for c in [1.0, 2.0, 10.0] {
            let theta = scalar(1.0, 1.0, 0.2 * c, 0.5 * c, 0.0, 0.3 * c);
            let ll = log_likelihood(&DMatrix::zeros(1, 1), &theta, None, None).unwrap();
            let expected = -0.5 * (LN_2PI + (c * 1.0f64).ln());
            assert!((ll - expected).abs() < 1e-14, "{ll} vs {expected}");
        }
    }

    #[test]
    fn params_reject_bad_shapes_and_indefinite() {
        let bad = StateSpaceParams::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            true,
        );
        assert!(bad.is_err());
        let indefinite = StateSpaceParams::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            true,
        );
        assert!(indefinite.is_err());
        let offdiag = StateSpaceParams::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            true,
        );
        assert!(offdiag.is_err());
    }

    #[test]
    fn params_json_round_trip_is_lossless() {
        let theta = StateSpaceParams::new(
            DMatrix::from_row_slice(2, 2, &[0.1 + 0.2, 1.0 / 3.0, -2e-300, 0.7]),
            DMatrix::from_row_slice(3, 2, &[1.0, std::f64::consts::PI, -0.3, 1e10, 0.7, 0.2]),
            DMatrix::identity(2, 2) * (2.0f64).sqrt(),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3, 1.0 / 7.0])),
            DVector::from_vec(vec![0.1, 0.2]),
            DMatrix::identity(2, 2),
            true,
        )
        .unwrap();
        let doc = ParamsDocument::from_params(&theta, &[-1.5, -1.25]);
        let text = serde_json::to_string(&doc).unwrap();
        let back: ParamsDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_params().unwrap(), theta);
    }
}
