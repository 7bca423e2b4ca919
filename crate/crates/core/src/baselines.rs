//! Classical simplex synthetic control and robust synthetic control
//! (hard singular value thresholding followed by ridge regression).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TascError};
use crate::linalg::{order_free_cross, order_free_gram};
use crate::panel::PanelData;

/// Default KKT tolerance for [`sc_fit`].
pub const SC_TOL: f64 = 1e-10;
const SC_MAX_ITERS: usize = 200_000;
const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Simplex,
    Ridge,
}

/// Donor weights `f`; the counterfactual is `fᵀ · donors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorWeights {
    pub kind: WeightKind,
    pub f: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d: Option<usize>,
}

impl DonorWeights {
    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.f)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w = v.map(|x| (x - theta).max(0.0));
    // remove the rounding residue so Σf = 1 holds as tightly as possible
    let s: f64 = w.sum();
    if s > 0.0 {
        w /= s;
    }
    w
}

struct SimplexQp {
    g: DMatrix<f64>,
    c: DVector<f64>,
    step: f64,
}

impl SimplexQp {
    fn grad(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.g * f - &self.c
    }

    /// Half the squared loss minus the constant `½‖y‖²`.
    fn objective(&self, f: &DVector<f64>) -> f64 {
        0.5 * f.dot(&(&self.g * f)) - self.c.dot(f)
    }

    /// Max-abs length of the projected-gradient step `f - P(f - ∇/L)`.
    fn kkt_residual(&self, f: &DVector<f64>) -> f64 {
        let p = project_simplex(&(f - self.grad(f) * self.step));
        (f - p).amax()
    }

    /// Solve the equality-constrained problem on the support of `f`; return
    /// it when it stays in the simplex.
    fn polish(&self, f: &DVector<f64>) -> Option<DVector<f64>> {
        let support: Vec<usize> = (0..f.len()).filter(|&i| f[i] > 0.0).collect();
        let k = support.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (a, &i) in support.iter().enumerate() {
            for (b, &j) in support.iter().enumerate() {
                kkt[(a, b)] = self.g[(i, j)];
            }
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
            rhs[a] = self.c[i];
        }
        rhs[k] = 1.0;
        let sol = kkt.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut out = DVector::zeros(f.len());
        for (a, &i) in support.iter().enumerate() {
            if sol[a] < 0.0 {
                return None;
            }
            out[i] = sol[a];
        }
        Some(project_simplex(&out))
    }
}

/// Simplex-constrained least squares: minimise `‖y1_pre - fᵀ donors_pre‖²`
/// over `f ≥ 0, Σf = 1`.
///
/// Accelerated projected gradient with periodic support polishing; the
/// returned point satisfies `‖f - P(f - ∇/L)‖∞ ≤ tol`, where `L` is the
/// largest eigenvalue of the donor Gram matrix. Among equally good vertices
/// the lowest donor index wins (the iteration starts from the best vertex).
pub fn sc_fit(y1_pre: &DVector<f64>, donors_pre: &DMatrix<f64>, tol: f64) -> Result<DonorWeights> {
    let (n, t0) = donors_pre.shape();
    if n == 0 || t0 == 0 {
        return Err(TascError::config("sc_fit needs at least one donor and one column"));
    }
    if y1_pre.len() != t0 {
        return Err(TascError::config("target and donor pre lengths differ"));
    }
    let weights = |f: DVector<f64>| DonorWeights {
        kind: WeightKind::Simplex,
        f: f.iter().copied().collect(),
        lambda: None,
        d: None,
    };
    if n == 1 {
        return Ok(weights(DVector::from_element(1, 1.0)));
    }
    let g = order_free_gram(donors_pre);
    let c = order_free_cross(donors_pre, y1_pre);
    let lip = g.clone().symmetric_eigen().eigenvalues.max();
    if lip <= 0.0 {
        // all donors are zero: every feasible point is optimal
        let mut f = DVector::zeros(n);
        f[0] = 1.0;
        return Ok(weights(f));
    }
    let qp = SimplexQp { g, c, step: 1.0 / lip };

    let vertex_obj = |j: usize| 0.5 * qp.g[(j, j)] - qp.c[j];
    let best = (0..n).fold(0, |b, j| if vertex_obj(j) < vertex_obj(b) { j } else { b });
    let mut f = DVector::zeros(n);
    f[best] = 1.0;
    let mut z = f.clone();
    let mut t = 1.0_f64;
    let mut obj = qp.objective(&f);
    let mut residual = qp.kkt_residual(&f);

    for it in 0..SC_MAX_ITERS {
        if residual <= tol {
            return Ok(weights(f));
        }
        let next = project_simplex(&(&z - qp.grad(&z) * qp.step));
        let next_obj = qp.objective(&next);
        if next_obj > obj && t > 1.0 {
            // adaptive restart: drop momentum and retry from f
            z = f.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &next + (&next - &f) * ((t - 1.0) / t_next);
        t = t_next;
        f = next;
        obj = next_obj;
        residual = qp.kkt_residual(&f);
        if it % POLISH_EVERY == POLISH_EVERY - 1 && residual > tol {
            if let Some(p) = qp.polish(&f) {
                let r = qp.kkt_residual(&p);
                if r < residual && qp.objective(&p) <= obj + 1e-15 * obj.abs().max(1.0) {
                    f = p;
                    z = f.clone();
                    t = 1.0;
                    obj = qp.objective(&f);
                    residual = r;
                }
            }
        }
    }
    if residual <= tol {
        return Ok(weights(f));
    }
    Err(TascError::Solver {
        residual,
        message: format!("simplex solver hit the {SC_MAX_ITERS}-iteration cap"),
    })
}

/// `fᵀ · donors`, one value per column.
pub fn sc_predict(f: &DonorWeights, donors_post: &DMatrix<f64>) -> Result<DVector<f64>> {
    if f.f.len() != donors_post.nrows() {
        return Err(TascError::config("weight length does not match donor count"));
    }
    let w = f.vector();
    Ok(DVector::from_fn(donors_post.ncols(), |j, _| w.dot(&donors_post.column(j))))
}

/// Keep the `d` largest singular components of `y`.
pub fn hsvt(y: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let (n, t) = y.shape();
    if d < 1 || d > n.min(t) {
        return Err(TascError::config(format!("hsvt rank {d} outside 1..={}", n.min(t))));
    }
    let svd = y.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = DMatrix::zeros(n, t);
    for &k in &order[..d] {
        out += u.column(k) * v_t.row(k) * svd.singular_values[k];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RscConfig {
    /// Singular values kept.
    pub d: usize,
    /// Ridge coefficient, used when no grid is given.
    pub lambda: f64,
    /// Candidate ridge coefficients chosen by validation on the last
    /// `⌈t0/5⌉` pre-intervention columns.
    pub cv_grid: Option<Vec<f64>>,
}

impl Default for RscConfig {
    fn default() -> Self {
        Self {
            d: 2,
            lambda: 1.0,
            cv_grid: Some(default_cv_grid()),
        }
    }
}

/// `{10⁻¹, 10⁰, …, 10⁶}`.
pub fn default_cv_grid() -> Vec<f64> {
    (-1..=6).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RscFit {
    pub weights: DonorWeights,
    /// Denoised donor block, n×T.
    pub denoised: DMatrix<f64>,
    /// `(lambda, validation MSE)` per grid point when cross-validated.
    pub cv_errors: Option<Vec<(f64, f64)>>,
}

/// Ridge solution of `(X Xᵀ + λI) f = X y`.
pub fn ridge_weights(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(TascError::config("ridge lambda must be >= 0"));
    }
    let n = x.nrows();
    let gram = order_free_gram(x) + DMatrix::identity(n, n) * lambda;
    let rhs = order_free_cross(x, y);
    let singular = |residual: f64| TascError::Solver {
        residual,
        message: format!(
            "ridge normal matrix is singular at lambda = {lambda}; use a positive lambda"
        ),
    };
    let chol = nalgebra::Cholesky::new(gram.clone()).ok_or_else(|| singular(f64::INFINITY))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo <= 0.0 || (hi / lo).powi(2) > 1e14 {
        return Err(singular((lo / hi).powi(2)));
    }
    Ok(chol.solve(&rhs))
}

/// Leave-last-k validation errors for each candidate lambda; failed fits
/// score `+∞`.
pub fn ridge_cv_errors(
    x_pre: &DMatrix<f64>,
    y_pre: &DVector<f64>,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let t0 = x_pre.ncols();
    let k = t0.div_ceil(5);
    if t0 <= k {
        return Err(TascError::config(
            "cross-validation needs more pre-intervention columns than the hold-out",
        ));
    }
    let train = t0 - k;
    let x_tr = x_pre.columns(0, train).into_owned();
    let y_tr = y_pre.rows(0, train).into_owned();
    let x_va = x_pre.columns(train, k);
    let y_va = y_pre.rows(train, k);
    Ok(grid
        .iter()
        .map(|&lambda| {
            let err = match ridge_weights(&x_tr, &y_tr, lambda) {
                Ok(f) => {
                    let pred = x_va.transpose() * f;
                    (pred - y_va).map(|e| e * e).sum() / k as f64
                }
                Err(_) => f64::INFINITY,
            };
            (lambda, err)
        })
        .collect())
}

/// Denoise the donor block (all columns, target excluded), then fit ridge
/// weights on the pre-intervention part.
pub fn rsc_fit(panel: &PanelData, config: &RscConfig) -> Result<RscFit> {
    let donors = panel.donors();
    let denoised = hsvt(&donors, config.d)?;
    let t0 = panel.t0();
    let x_pre = denoised.columns(0, t0).into_owned();
    let y_pre = panel.target_pre();
    let (lambda, cv_errors) = match &config.cv_grid {
        Some(grid) if !grid.is_empty() => {
            let errors = ridge_cv_errors(&x_pre, &y_pre, grid)?;
            let best = errors
                .iter()
                .fold(None::<(f64, f64)>, |b, &(l, e)| match b {
                    Some((_, be)) if be <= e => b,
                    _ => Some((l, e)),
                })
                .expect("non-empty grid");
            if !best.1.is_finite() {
                return Err(TascError::Solver {
                    residual: f64::INFINITY,
                    message: "every lambda in the grid failed".into(),
                });
            }
            (best.0, Some(errors))
        }
        _ => (config.lambda, None),
    };
    let f = ridge_weights(&x_pre, &y_pre, lambda)?;
    Ok(RscFit {
        weights: DonorWeights {
            kind: WeightKind::Ridge,
            f: f.iter().copied().collect(),
            lambda: Some(lambda),
            d: Some(config.d),
        },
        denoised,
        cv_errors,
    })
}

/// `fᵀ · denoised_post`.
pub fn rsc_predict(f: &DonorWeights, denoised_post: &DMatrix<f64>) -> Result<DVector<f64>> {
    sc_predict(f, denoised_post)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(y: &DVector<f64>, d: &DMatrix<f64>, f: &[f64]) -> f64 {
        (y - d.transpose() * DVector::from_column_slice(f)).norm_squared()
    }

    #[test]
    fn projection_lands_on_simplex() {
        for v in [vec![0.2, 0.3, 0.5], vec![5.0, -1.0, 2.0], vec![-3.0, -3.0], vec![0.0; 4]] {
            let p = project_simplex(&DVector::from_vec(v));
            assert!((p.sum() - 1.0).abs() < 1e-15);
            assert!(p.iter().all(|x| *x >= 0.0));
        }
        let p = project_simplex(&DVector::from_vec(vec![0.2, 0.3, 0.5]));
        assert!((p - DVector::from_vec(vec![0.2, 0.3, 0.5])).amax() < 1e-15);
    }

    #[test]
    fn single_donor_gets_full_weight() {
        let d = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let f = sc_fit(&DVector::from_vec(vec![-4.0, 0.0, 9.0]), &d, SC_TOL).unwrap();
        assert_eq!(f.f, vec![1.0]);
    }

    #[test]
    fn exact_vertex() {
        let d = DMatrix::from_row_slice(3, 4, &[1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0, 3.0, 2.0, 2.0, 0.0, 1.0]);
        let y = d.row(1).transpose();
        let f = sc_fit(&y, &d, SC_TOL).unwrap();
        assert!((f.f[1] - 1.0).abs() < 1e-6, "{:?}", f.f);
    }

    #[test]
    fn midpoint_matches_grid_search() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let y = (d.row(0) * 0.5 + d.row(1) * 0.5).transpose();
        let f = sc_fit(&y, &d, SC_TOL).unwrap();
        assert!((f.f[0] - 0.5).abs() < 1e-4 && (f.f[1] - 0.5).abs() < 1e-4);
        let grid_best = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| obj(&y, &d, &[*a, 1.0 - a]).total_cmp(&obj(&y, &d, &[*b, 1.0 - b])))
            .unwrap();
        assert!((grid_best - f.f[0]).abs() <= 1e-3);
    }

    #[test]
    fn identical_donors_prefer_lowest_index() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let f = sc_fit(&DVector::from_vec(vec![0.0, 0.0, 1.0]), &d, SC_TOL).unwrap();
        assert_eq!(f.f, vec![1.0, 0.0]);
    }

    #[test]
    fn predict_is_linear() {
        let w = DonorWeights { kind: WeightKind::Simplex, f: vec![0.25, 0.75], lambda: None, d: None };
        let post = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = sc_predict(&w, &post).unwrap();
        let b = sc_predict(&w, &(&post * 3.0)).unwrap();
        assert!((b - a * 3.0).amax() < 1e-14);
    }

    #[test]
    fn hsvt_by_hand() {
        let y = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let out = hsvt(&y, 1).unwrap();
        assert!((out - DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0])).amax() < 1e-12);
        assert!((hsvt(&y, 2).unwrap() - &y).amax() < 1e-12);
        assert!(hsvt(&y, 3).is_err());
    }

    #[test]
    fn ridge_by_hand() {
        let x = DMatrix::identity(2, 2);
        let f = ridge_weights(&x, &DVector::from_vec(vec![1.0, 2.0]), 1.0).unwrap();
        assert!((f - DVector::from_vec(vec![0.5, 1.0])).amax() < 1e-12);
        let big = ridge_weights(&x, &DVector::from_vec(vec![1.0, 2.0]), 1e12).unwrap();
        assert!(big.amax() < 1e-11);
    }

    #[test]
    fn ridge_zero_lambda_singular() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let err = ridge_weights(&x, &DVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap_err();
        assert!(err.to_string().contains("positive lambda"), "{err}");
    }

    #[test]
    fn weights_json_shape() {
        let w = DonorWeights { kind: WeightKind::Ridge, f: vec![0.5, 1.0], lambda: Some(1.0), d: Some(2) };
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"kind":"ridge","f":[0.5,1.0],"lambda":1.0,"d":2}"#);
        assert_eq!(serde_json::from_str::<DonorWeights>(&s).unwrap(), w);
    }
}
