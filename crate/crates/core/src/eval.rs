//! Metrics, placebo studies, permutation stress tests and simulation sweeps.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{rsc_fit, sc_fit, sc_predict, DonorWeights, RscConfig, SC_TOL};
use crate::em::{confidence_width, tasc_infer_with, CiVariance, EmConfig, TascFit};
use crate::error::{Result, TascError};
use crate::panel::{permute_columns, PanelData};
use crate::seed::derive_seed;
use crate::simgen::{simulate, SimulationConfig};

/// Root mean squared difference.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TascError::config(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sq = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    Ok((sq / pred.len() as f64).sqrt())
}

/// One contiguous horizon bucket; `start..end` are 0-based offsets into
/// the post-intervention window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: usize,
    pub end: usize,
    pub rmse: f64,
}

/// RMSE over `n_buckets` contiguous equal-width buckets; the last bucket
/// absorbs any remainder. Bucket counts above the horizon are clamped.
pub fn rmse_by_horizon(pred: &[f64], truth: &[f64], n_buckets: usize) -> Result<Vec<Bucket>> {
    rmse(pred, truth)?;
    let h = pred.len();
    let nb = n_buckets.clamp(1, h);
    let width = h / nb;
    (0..nb)
        .map(|b| {
            let start = b * width;
            let end = if b + 1 == nb { h } else { start + width };
            Ok(Bucket {
                start,
                end,
                rmse: rmse(&pred[start..end], &truth[start..end])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Tasc,
    Sc,
    Rsc,
}

impl std::str::FromStr for MethodKind {
    type Err = TascError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tasc" => Ok(Self::Tasc),
            "sc" => Ok(Self::Sc),
            "rsc" => Ok(Self::Rsc),
            other => Err(TascError::config(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tasc => "tasc",
            Self::Sc => "sc",
            Self::Rsc => "rsc",
        })
    }
}

/// An estimator together with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSpec {
    pub method: MethodKind,
    pub em: EmConfig,
    pub rsc: RscConfig,
    pub sc_tol: f64,
    /// Confidence level of the TASC band.
    pub level: f64,
    pub ci_variance: CiVariance,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            method: MethodKind::Tasc,
            em: EmConfig::default(),
            rsc: RscConfig::default(),
            sc_tol: SC_TOL,
            level: 0.95,
            ci_variance: CiVariance::Predictive,
        }
    }
}

impl MethodSpec {
    pub fn new(method: MethodKind) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn tasc(em: EmConfig) -> Self {
        Self { em, ..Self::new(MethodKind::Tasc) }
    }

    pub fn rsc(rsc: RscConfig) -> Self {
        Self { rsc, ..Self::new(MethodKind::Rsc) }
    }

    /// Short tag such as `tasc-d5`, `rsc-d3` or `sc`.
    pub fn label(&self) -> String {
        match self.method {
            MethodKind::Tasc => format!("tasc-d{}", self.em.d),
            MethodKind::Rsc => format!("rsc-d{}", self.rsc.d),
            MethodKind::Sc => "sc".into(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.em.seed = seed;
        out
    }

    pub fn fit(&self, panel: &PanelData) -> Result<Prediction> {
        match self.method {
            MethodKind::Sc => {
                let w = sc_fit(&panel.target_pre(), &panel.donors().columns(0, panel.t0()).into_owned(), self.sc_tol)?;
                let donors = panel.donors();
                Ok(Prediction {
                    pre: sc_predict(&w, &donors.columns(0, panel.t0()).into_owned())?,
                    post: sc_predict(&w, &donors.columns(panel.t0(), panel.horizon()).into_owned())?,
                    weights: Some(w),
                    tasc: None,
                })
            }
            MethodKind::Rsc => {
                let fit = rsc_fit(panel, &self.rsc)?;
                let t0 = panel.t0();
                Ok(Prediction {
                    pre: sc_predict(&fit.weights, &fit.denoised.columns(0, t0).into_owned())?,
                    post: sc_predict(&fit.weights, &fit.denoised.columns(t0, panel.horizon()).into_owned())?,
                    weights: Some(fit.weights),
                    tasc: None,
                })
            }
            MethodKind::Tasc => {
                let fit = tasc_infer_with(panel, &self.em, self.level, self.ci_variance)?;
                Ok(Prediction {
                    pre: DVector::from_vec(fit.estimate.fitted_pre.clone()),
                    post: DVector::from_vec(fit.estimate.y_hat.clone()),
                    weights: None,
                    tasc: Some(fit),
                })
            }
        }
    }
}

/// Output of [`MethodSpec::fit`].
#[derive(Debug, Clone)]
pub struct Prediction {
    /// In-sample target fit over the pre-intervention columns.
    pub pre: DVector<f64>,
    /// Counterfactual over the post-intervention columns.
    pub post: DVector<f64>,
    pub weights: Option<DonorWeights>,
    pub tasc: Option<TascFit>,
}

impl Prediction {
    pub fn ci_width(&self) -> Option<f64> {
        self.tasc.as_ref().map(|f| confidence_width(&f.estimate))
    }
}

fn as_slice(v: &DVector<f64>) -> &[f64] {
    v.as_slice()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboUnit {
    pub label: String,
    pub rmse_pre: f64,
    pub rmse_post: f64,
    /// Observed minus predicted, over every column.
    pub gap: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub per_unit: Vec<PlaceboUnit>,
}

/// Treat every donor in turn as the target (the real target row is dropped)
/// and record its fit. Failures are kept per unit.
pub fn placebo_suite(panel: &PanelData, method: &MethodSpec) -> Result<PlaceboResult> {
    if panel.n_donors() < 2 {
        return Err(TascError::config("placebo tests need at least two donors"));
    }
    let per_unit = (1..panel.n_units())
        .map(|j| {
            let label = panel.unit_labels()[j].clone();
            let attempt = || -> Result<PlaceboUnit> {
                let pseudo = panel.placebo(j)?;
                let pred = method.with_seed(derive_seed(method.em.seed, &[j as u64])).fit(&pseudo)?;
                let obs_pre = pseudo.target_pre();
                let obs_post = pseudo.target_post();
                let gap = obs_pre
                    .iter()
                    .zip(pred.pre.iter())
                    .chain(obs_post.iter().zip(pred.post.iter()))
                    .map(|(o, p)| o - p)
                    .collect();
                Ok(PlaceboUnit {
                    label: label.clone(),
                    rmse_pre: rmse(as_slice(&pred.pre), obs_pre.as_slice())?,
                    rmse_post: rmse(as_slice(&pred.post), obs_post.as_slice())?,
                    gap,
                    error: None,
                })
            };
            attempt().unwrap_or_else(|e| {
                log::warn!("placebo unit {label} failed: {e}");
                PlaceboUnit {
                    label: label.clone(),
                    rmse_pre: f64::NAN,
                    rmse_post: f64::NAN,
                    gap: Vec::new(),
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    Ok(PlaceboResult { per_unit })
}

/// Labels of the placebo units whose pre-intervention MSE is at most
/// `ratio × target_pre_mse`. Failed units are never retained.
pub fn threshold_filter(placebo: &PlaceboResult, target_pre_mse: f64, ratio: f64) -> Result<Vec<String>> {
    if !(ratio > 0.0) {
        return Err(TascError::config("threshold ratio must be > 0"));
    }
    Ok(placebo
        .per_unit
        .iter()
        .filter(|u| u.error.is_none() && u.rmse_pre * u.rmse_pre <= ratio * target_pre_mse)
        .map(|u| u.label.clone())
        .collect())
}

/// Separate pre and post column orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shuffle {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
}

impl Shuffle {
    pub fn identity(t0: usize, horizon: usize) -> Self {
        Self {
            pre: (0..t0).collect(),
            post: (0..horizon).collect(),
        }
    }

    pub fn random(t0: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::identity(t0, horizon);
        s.pre.shuffle(&mut rng);
        s.post.shuffle(&mut rng);
        s
    }
}

/// `n` random shuffles keyed by `seed`.
pub fn random_shuffles(t0: usize, horizon: usize, n: usize, seed: u64) -> Vec<Shuffle> {
    (0..n)
        .map(|k| Shuffle::random(t0, horizon, derive_seed(seed, &[k as u64])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressResult {
    pub rmse_ordered: f64,
    /// One entry per shuffle; NaN where the fit failed.
    pub rmse_shuffled: Vec<f64>,
    pub errors: Vec<(usize, String)>,
}

impl StressResult {
    /// Mean RMSE over the successful shuffles.
    pub fn mean_shuffled(&self) -> f64 {
        let ok: Vec<f64> = self.rmse_shuffled.iter().copied().filter(|v| v.is_finite()).collect();
        ok.iter().sum::<f64>() / ok.len() as f64
    }

    pub fn ratio(&self) -> f64 {
        self.mean_shuffled() / self.rmse_ordered
    }
}

fn post_rmse(panel: &PanelData, method: &MethodSpec) -> Result<f64> {
    if panel.target_post_missing() {
        return Err(TascError::config("stress tests need observed target post values"));
    }
    let pred = method.fit(panel)?;
    rmse(as_slice(&pred.post), panel.target_post().as_slice())
}

/// Post-intervention RMSE on the original ordering and on each shuffled
/// copy, with the same method settings throughout.
pub fn permutation_stress_with(panel: &PanelData, method: &MethodSpec, shuffles: &[Shuffle]) -> Result<StressResult> {
    let rmse_ordered = post_rmse(panel, method)?;
    let mut rmse_shuffled = Vec::with_capacity(shuffles.len());
    let mut errors = Vec::new();
    for (k, s) in shuffles.iter().enumerate() {
        match permute_columns(panel, &s.pre, &s.post).and_then(|p| post_rmse(&p, method)) {
            Ok(v) => rmse_shuffled.push(v),
            Err(e) => {
                rmse_shuffled.push(f64::NAN);
                errors.push((k, e.to_string()));
            }
        }
    }
    Ok(StressResult { rmse_ordered, rmse_shuffled, errors })
}

pub fn permutation_stress_test(panel: &PanelData, method: &MethodSpec, n_shuffles: usize, seed: u64) -> Result<StressResult> {
    if n_shuffles < 1 {
        return Err(TascError::config("n_shuffles must be >= 1"));
    }
    let shuffles = random_shuffles(panel.t0(), panel.horizon(), n_shuffles, seed);
    permutation_stress_with(panel, method, &shuffles)
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: String,
    pub method: String,
    pub replicate: usize,
    pub seed: u64,
    pub rmse_post: f64,
    /// Post RMSE against the noiseless target signal.
    pub rmse_post_signal: f64,
    pub rmse_pre: f64,
    pub rmse_by_bucket: Vec<Bucket>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: String,
    pub config: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub regimes: Vec<Regime>,
    pub methods: Vec<MethodSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub n_buckets: usize,
    pub rows: Vec<EvalReport>,
}

impl SweepTable {
    /// Successful `rmse_post` values of one regime/method cell.
    pub fn values(&self, regime: &str, method: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.regime == regime && r.method == method && r.error.is_none())
            .map(|r| r.rmse_post)
            .collect()
    }

    /// Long format: `regime,method,replicate,metric,value`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["regime", "method", "replicate", "metric", "value"])?;
        for r in &self.rows {
            let rep = r.replicate.to_string();
            let mut row = |metric: &str, value: String| {
                w.write_record([r.regime.as_str(), r.method.as_str(), rep.as_str(), metric, value.as_str()])
            };
            if let Some(e) = &r.error {
                row("error", e.clone())?;
                continue;
            }
            row("rmse_post", r.rmse_post.to_string())?;
            row("rmse_post_signal", r.rmse_post_signal.to_string())?;
            row("rmse_pre", r.rmse_pre.to_string())?;
            for (i, b) in r.rmse_by_bucket.iter().enumerate() {
                row(&format!("rmse_bucket_{i}"), b.rmse.to_string())?;
            }
            if let Some(c) = r.ci_width {
                row("ci_width", c.to_string())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl From<csv::Error> for TascError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => TascError::Io(io),
            other => TascError::Config(format!("csv: {other:?}")),
        }
    }
}

/// Median of the finite values (NaN when there are none).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn evaluate_cell(
    regime: &str,
    method: &MethodSpec,
    replicate: usize,
    seed: u64,
    sim: &crate::simgen::SimulatedPanel,
    n_buckets: usize,
) -> EvalReport {
    let attempt = || -> Result<EvalReport> {
        let panel = &sim.panel;
        let pred = method.with_seed(seed).fit(panel)?;
        let truth = panel.target_post();
        let signal: Vec<f64> = (panel.t0()..panel.n_times()).map(|j| sim.signal[(0, j)]).collect();
        Ok(EvalReport {
            regime: regime.to_string(),
            method: method.label(),
            replicate,
            seed,
            rmse_post: rmse(as_slice(&pred.post), truth.as_slice())?,
            rmse_post_signal: rmse(as_slice(&pred.post), &signal)?,
            rmse_pre: rmse(as_slice(&pred.pre), panel.target_pre().as_slice())?,
            rmse_by_bucket: rmse_by_horizon(as_slice(&pred.post), truth.as_slice(), n_buckets)?,
            ci_width: pred.ci_width(),
            error: None,
        })
    };
    attempt().unwrap_or_else(|e| {
        log::warn!("sweep cell {regime}/{}/{replicate} failed: {e}", method.label());
        EvalReport {
            regime: regime.to_string(),
            method: method.label(),
            replicate,
            seed,
            rmse_post: f64::NAN,
            rmse_post_signal: f64::NAN,
            rmse_pre: f64::NAN,
            rmse_by_bucket: Vec::new(),
            ci_width: None,
            error: Some(e.to_string()),
        }
    })
}

/// Every regime × replicate × method. Each (regime, replicate) pair draws
/// one panel shared by all methods, so method comparisons are paired.
pub fn method_sweep(
    regimes: &[Regime],
    methods: &[MethodSpec],
    replicates: usize,
    seed: u64,
    n_buckets: usize,
) -> Result<SweepTable> {
    if replicates < 1 {
        return Err(TascError::config("replicates must be >= 1"));
    }
    let mut rows = Vec::new();
    for (ri, regime) in regimes.iter().enumerate() {
        regime.config.validate()?;
        for rep in 0..replicates {
            let cell_seed = derive_seed(seed, &[ri as u64, rep as u64]);
            let cfg = SimulationConfig { seed: cell_seed, ..regime.config.clone() };
            match simulate(&cfg) {
                Ok(sim) => {
                    for (mi, m) in methods.iter().enumerate() {
                        let mseed = derive_seed(cell_seed, &[mi as u64]);
                        rows.push(evaluate_cell(&regime.name, m, rep, mseed, &sim, n_buckets));
                    }
                }
                Err(e) => {
                    for m in methods {
                        rows.push(EvalReport {
                            regime: regime.name.clone(),
                            method: m.label(),
                            replicate: rep,
                            seed: cell_seed,
                            rmse_post: f64::NAN,
                            rmse_post_signal: f64::NAN,
                            rmse_pre: f64::NAN,
                            rmse_by_bucket: Vec::new(),
                            ci_width: None,
                            error: Some(format!("simulation failed: {e}")),
                        });
                    }
                }
            }
        }
    }
    Ok(SweepTable {
        regimes: regimes.to_vec(),
        methods: methods.to_vec(),
        replicates,
        seed,
        n_buckets,
        rows,
    })
}
