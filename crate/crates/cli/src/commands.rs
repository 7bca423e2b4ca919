use serde::Serialize;
use serde_json::json;
use tasc_core::eval::{method_sweep, permutation_stress_with, placebo_suite, random_shuffles, rmse, threshold_filter, Shuffle};
use tasc_core::panel::{load_csv, mean_center, save_csv};
use tasc_core::seed::derive_seed;
use tasc_core::simgen::simulate as draw_panel;
use tasc_core::ssm::ParamsDocument;
use tasc_core::{CsvOptions, PanelData, PanelMeta, Result, TascError};

use crate::config::{Format, RunConfig};
use crate::output::{csv_artifact, csv_artifact_with, json_artifact, num, sibling, Artifact, Provenance};

fn load_panel(cfg: &RunConfig) -> Result<PanelData> {
    let path = cfg.require_input()?;
    let meta = cfg.sidecar()?;
    let t0 = cfg
        .panel
        .t0
        .or(meta.as_ref().map(|m| m.t0))
        .ok_or_else(|| TascError::Config("t0 is required (--t0, config panel.t0 or a sidecar)".into()))?;
    let file = std::fs::File::open(path)?;
    let panel = load_csv(file, CsvOptions { has_header: cfg.panel.has_header, target_row: cfg.panel.target_row, t0 })?;
    match meta {
        Some(m) => m.apply(panel),
        None => Ok(panel),
    }
}

fn reject_long(cfg: &RunConfig, command: &str) -> Result<()> {
    if cfg.format == Format::Long {
        return Err(TascError::Config(format!("--format long is only available for bench, not {command}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct InferDocument<'a> {
    method: String,
    target: &'a str,
    t0: usize,
    time: &'a [String],
    y_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_upper: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effect: Option<Vec<f64>>,
    rmse_pre: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<(String, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<ParamsDocument>,
}

pub fn infer(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<Artifact>> {
    reject_long(cfg, "infer")?;
    let out = cfg.require_output()?.to_path_buf();
    let panel = load_panel(cfg)?;
    let method = &cfg.method;
    let (t0, t) = (panel.t0(), panel.n_times());

    // fit on the centred panel when asked, then shift back
    let centered = cfg.panel.center.map(|basis| mean_center(&panel, basis));
    let pred = method.fit(centered.as_ref().map_or(&panel, |c| &c.panel))?;
    let shift_post = |v: &[f64]| centered.as_ref().map_or_else(|| v.to_vec(), |c| c.uncenter_post(v));
    let shift_pre = |v: &[f64]| centered.as_ref().map_or_else(|| v.to_vec(), |c| c.uncenter_pre(v));
    let y_hat = shift_post(pred.post.as_slice());
    let fitted_pre = shift_pre(pred.pre.as_slice());
    let rmse_pre = rmse(&fitted_pre, panel.target_pre().as_slice())?;
    let ci = pred.tasc.as_ref().map(|f| (shift_post(&f.estimate.ci_lower), shift_post(&f.estimate.ci_upper)));
    let observed = (!panel.target_post_missing()).then(|| panel.target_post().as_slice().to_vec());
    let effect = observed.as_ref().map(|o| o.iter().zip(&y_hat).map(|(a, b)| a - b).collect::<Vec<_>>());
    let donor_labels = &panel.unit_labels()[1..];
    let weights = pred.weights.as_ref().map(|w| donor_labels.iter().cloned().zip(w.f.iter().copied()).collect::<Vec<_>>());
    let theta = pred.tasc.as_ref().map(|f| ParamsDocument::from_params(&f.theta, &f.em.loglik_trace));
    log::info!("{}: pre-intervention RMSE {rmse_pre:.6}", method.label());

    let time = &panel.time_labels()[t0..t];
    if cfg.format == Format::Json {
        let doc = InferDocument {
            method: method.label(),
            target: panel.target_label(),
            t0,
            time,
            ci_lower: ci.as_ref().map(|c| c.0.clone()),
            ci_upper: ci.as_ref().map(|c| c.1.clone()),
            y_hat,
            observed,
            effect,
            rmse_pre,
            weights,
            theta,
        };
        return Ok(vec![json_artifact(out, prov, doc)?]);
    }

    let mut header = vec!["time", "y_hat"];
    if ci.is_some() {
        header.extend(["ci_lower", "ci_upper"]);
    }
    if observed.is_some() {
        header.extend(["observed", "effect"]);
    }
    let rows: Vec<Vec<String>> = (0..t - t0)
        .map(|j| {
            let mut row = vec![time[j].clone(), num(y_hat[j])];
            if let Some((lo, hi)) = &ci {
                row.extend([num(lo[j]), num(hi[j])]);
            }
            if let (Some(o), Some(e)) = (&observed, &effect) {
                row.extend([num(o[j]), num(e[j])]);
            }
            row
        })
        .collect();
    let mut artifacts = vec![csv_artifact(out.clone(), prov, &header, &rows)?];
    if let Some(w) = weights {
        let rows: Vec<Vec<String>> = w.iter().map(|(l, v)| vec![l.clone(), num(*v)]).collect();
        artifacts.push(csv_artifact(sibling(&out, "weights", "csv"), prov, &["unit", "weight"], &rows)?);
    }
    if let Some(theta) = theta {
        artifacts.push(json_artifact(sibling(&out, "theta", "json"), prov, theta)?);
    }
    Ok(artifacts)
}

pub fn simulate(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<Artifact>> {
    let dir = cfg.require_output()?.to_path_buf();
    let sim = draw_panel(&cfg.simulation)?;
    let signal = PanelData::new(sim.signal.clone(), sim.panel.t0(), sim.panel.unit_labels().to_vec(), sim.panel.time_labels().to_vec())?;
    let meta = PanelMeta::of(&sim.panel);
    Ok(vec![
        csv_artifact_with(dir.join("values.csv"), prov, |w| save_csv(&sim.panel, w))?,
        csv_artifact_with(dir.join("signal.csv"), prov, |w| save_csv(&signal, w))?,
        json_artifact(dir.join("theta.json"), prov, ParamsDocument::from_params(&sim.theta_true, &[]))?,
        json_artifact(
            dir.join("meta.json"),
            prov,
            json!({
                "n_units": meta.n_units,
                "t_total": meta.t_total,
                "t0": meta.t0,
                "target_label": meta.target_label,
                "simulation": cfg.simulation,
            }),
        )?,
    ])
}

pub fn placebo(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<Artifact>> {
    reject_long(cfg, "placebo")?;
    let out = cfg.require_output()?.to_path_buf();
    let panel = load_panel(cfg)?;
    let method = &cfg.method;
    let target = method.fit(&panel)?;
    let target_rmse_pre = rmse(target.pre.as_slice(), panel.target_pre().as_slice())?;
    let target_pre_mse = target_rmse_pre * target_rmse_pre;
    let result = placebo_suite(&panel, method)?;
    let kept = cfg
        .ratios
        .iter()
        .map(|&r| threshold_filter(&result, target_pre_mse, r).map(|units| (r, units)))
        .collect::<Result<Vec<_>>>()?;
    let pre_ratio = |rmse_pre: f64| rmse_pre * rmse_pre / target_pre_mse;

    if cfg.format == Format::Json {
        let units: Vec<_> = result
            .per_unit
            .iter()
            .map(|u| json!({"unit": u.label, "rmse_pre": u.rmse_pre, "rmse_post": u.rmse_post, "pre_mse_ratio": pre_ratio(u.rmse_pre), "gap": u.gap, "error": u.error}))
            .collect();
        let thresholds: Vec<_> = kept.iter().map(|(r, units)| json!({"ratio": r, "units": units})).collect();
        let doc = json!({
            "method": method.label(),
            "target": panel.target_label(),
            "target_rmse_pre": target_rmse_pre,
            "time": panel.time_labels(),
            "units": units,
            "thresholds": thresholds,
        });
        return Ok(vec![json_artifact(out, prov, doc)?]);
    }

    let rows: Vec<Vec<String>> = std::iter::once(vec![panel.target_label().to_string(), num(target_rmse_pre), String::new(), num(1.0), String::new()])
        .chain(result.per_unit.iter().map(|u| {
            vec![u.label.clone(), num(u.rmse_pre), num(u.rmse_post), num(pre_ratio(u.rmse_pre)), u.error.clone().unwrap_or_default()]
        }))
        .collect();
    let thresholds: Vec<Vec<String>> = kept
        .iter()
        .flat_map(|(r, units)| units.iter().map(move |u| vec![num(*r), u.clone()]))
        .collect();
    let gaps: Vec<Vec<String>> = result
        .per_unit
        .iter()
        .flat_map(|u| u.gap.iter().zip(panel.time_labels()).map(move |(g, t)| vec![u.label.clone(), t.clone(), num(*g)]))
        .collect();
    Ok(vec![
        csv_artifact(out.clone(), prov, &["unit", "rmse_pre", "rmse_post", "pre_mse_ratio", "error"], &rows)?,
        csv_artifact(sibling(&out, "thresholds", "csv"), prov, &["ratio", "unit"], &thresholds)?,
        csv_artifact(sibling(&out, "gaps", "csv"), prov, &["unit", "time", "gap"], &gaps)?,
    ])
}

pub fn permute(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<Artifact>> {
    reject_long(cfg, "permute")?;
    let out = cfg.require_output()?.to_path_buf();
    let panel = if cfg.input.is_some() { load_panel(cfg)? } else { draw_panel(&cfg.simulation)?.panel };
    if cfg.shuffles < 1 {
        return Err(TascError::Config("--shuffles must be >= 1".into()));
    }
    let shuffles = if cfg.identity_shuffles {
        vec![Shuffle::identity(panel.t0(), panel.horizon()); cfg.shuffles]
    } else {
        random_shuffles(panel.t0(), panel.horizon(), cfg.shuffles, derive_seed(cfg.seed, &[1]))
    };
    let res = permutation_stress_with(&panel, &cfg.method, &shuffles)?;
    for (k, e) in &res.errors {
        log::warn!("shuffle {k} failed: {e}");
    }

    if cfg.format == Format::Json {
        let doc = json!({
            "method": cfg.method.label(),
            "rmse_ordered": res.rmse_ordered,
            "rmse_shuffled": res.rmse_shuffled,
            "mean_shuffled": res.mean_shuffled(),
            "ratio": res.ratio(),
            "shuffles": shuffles,
            "errors": res.errors,
        });
        return Ok(vec![json_artifact(out, prov, doc)?]);
    }
    let rows: Vec<Vec<String>> = std::iter::once(vec!["ordered".to_string(), num(res.rmse_ordered)])
        .chain(res.rmse_shuffled.iter().enumerate().map(|(k, v)| vec![format!("shuffle_{k}"), num(*v)]))
        .chain([vec!["mean_shuffled".to_string(), num(res.mean_shuffled())], vec!["ratio".to_string(), num(res.ratio())]])
        .collect();
    Ok(vec![csv_artifact(out, prov, &["row", "rmse_post"], &rows)?])
}

pub fn bench(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<Artifact>> {
    let out = cfg.require_output()?.to_path_buf();
    if cfg.regimes.is_empty() || cfg.methods.is_empty() {
        return Err(TascError::Config("bench needs at least one regime and one method".into()));
    }
    let table = method_sweep(&cfg.regimes, &cfg.methods, cfg.replicates, cfg.seed, cfg.buckets)?;
    match cfg.format {
        Format::Json => Ok(vec![json_artifact(out, prov, &table)?]),
        Format::Long => Ok(vec![csv_artifact_with(out, prov, |w| table.write_csv(w))?]),
        Format::Csv => {
            let n_buckets = table.rows.iter().map(|r| r.rmse_by_bucket.len()).max().unwrap_or(0);
            let bucket_names: Vec<String> = (0..n_buckets).map(|i| format!("rmse_bucket_{i}")).collect();
            let mut header = vec!["regime", "method", "replicate", "seed", "rmse_post", "rmse_post_signal", "rmse_pre", "ci_width"];
            header.extend(bucket_names.iter().map(String::as_str));
            header.push("error");
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.regime.clone(),
                        r.method.clone(),
                        r.replicate.to_string(),
                        r.seed.to_string(),
                        num(r.rmse_post),
                        num(r.rmse_post_signal),
                        num(r.rmse_pre),
                        r.ci_width.map(num).unwrap_or_default(),
                    ];
                    row.extend((0..n_buckets).map(|i| r.rmse_by_bucket.get(i).map(|b| num(b.rmse)).unwrap_or_default()));
                    row.push(r.error.clone().unwrap_or_default());
                    row
                })
                .collect();
            Ok(vec![csv_artifact(out, prov, &header, &rows)?])
        }
    }
}
