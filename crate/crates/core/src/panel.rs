//! Panel data: an N×T outcome matrix with the treated target in row 0 and
//! donors in rows 1..N, split at the intervention index `t0`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TascError};

/// Outcome panel. Rows are units (row 0 is the target), columns are time.
///
/// Target cells after `t0` may hold `NaN` when they are missing or treated;
/// `target_post_missing` records that. Everything else is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    values: DMatrix<f64>,
    t0: usize,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
    target_post_missing: bool,
}

impl PanelData {
    pub fn new(
        values: DMatrix<f64>,
        t0: usize,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = values.shape();
        if n < 2 || t < 2 {
            return Err(TascError::config(format!(
                "panel must be at least 2x2, got {n}x{t}"
            )));
        }
        if t0 < 1 || t0 >= t {
            return Err(TascError::config(format!(
                "t0 must satisfy 1 <= t0 < T={t}, got {t0}"
            )));
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(TascError::config(format!(
                "label lengths ({}, {}) do not match panel shape {n}x{t}",
                unit_labels.len(),
                time_labels.len()
            )));
        }
        for i in 0..n {
            let limit = if i == 0 { t0 } else { t };
            for j in 0..limit {
                if !values[(i, j)].is_finite() {
                    return Err(TascError::config(format!(
                        "non-finite value at unit {i}, time {j}"
                    )));
                }
            }
        }
        let target_post_missing = (t0..t).any(|j| !values[(0, j)].is_finite());
        Ok(Self {
            values,
            t0,
            unit_labels,
            time_labels,
            target_post_missing,
        })
    }

    /// Panel with generated labels (`unit0..`, `t1..`).
    pub fn from_matrix(values: DMatrix<f64>, t0: usize) -> Result<Self> {
        let (n, t) = values.shape();
        let units = (0..n).map(|i| format!("unit{i}")).collect();
        let times = (1..=t).map(|j| format!("t{j}")).collect();
        Self::new(values, t0, units, times)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_donors(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.n_times() - self.t0
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn target_post_missing(&self) -> bool {
        self.target_post_missing
    }

    pub fn target_label(&self) -> &str {
        &self.unit_labels[0]
    }

    /// Target outcomes over `1..=t0`.
    pub fn target_pre(&self) -> DVector<f64> {
        self.values.row(0).columns(0, self.t0).transpose()
    }

    /// Target outcomes after `t0` (may contain `NaN`).
    pub fn target_post(&self) -> DVector<f64> {
        self.values
            .row(0)
            .columns(self.t0, self.horizon())
            .transpose()
    }

    /// Donor block, (N-1)×T.
    pub fn donors(&self) -> DMatrix<f64> {
        self.values.rows(1, self.n_donors()).into_owned()
    }

    /// Pre-intervention columns of every row, N×t0.
    pub fn pre(&self) -> DMatrix<f64> {
        self.values.columns(0, self.t0).into_owned()
    }

    /// Post-intervention columns of every row, N×(T-t0).
    pub fn post(&self) -> DMatrix<f64> {
        self.values.columns(self.t0, self.horizon()).into_owned()
    }

    /// Overwrite the target's post-intervention cells.
    pub fn with_target_post(&self, post: &[f64]) -> Result<Self> {
        if post.len() != self.horizon() {
            return Err(TascError::config("target post length mismatch"));
        }
        let mut values = self.values.clone();
        for (j, v) in post.iter().enumerate() {
            values[(0, self.t0 + j)] = *v;
        }
        Self::new(
            values,
            self.t0,
            self.unit_labels.clone(),
            self.time_labels.clone(),
        )
    }

    /// Placebo panel: donor `donor` (1-based row index) becomes the target
    /// and the original target row is dropped.
    pub fn placebo(&self, donor: usize) -> Result<Self> {
        if donor == 0 || donor >= self.n_units() {
            return Err(TascError::config(format!("no donor row {donor}")));
        }
        if self.n_units() < 3 {
            return Err(TascError::config(
                "placebo panels need at least two donors",
            ));
        }
        let rows: Vec<usize> = std::iter::once(donor)
            .chain((1..self.n_units()).filter(|&i| i != donor))
            .collect();
        let values = DMatrix::from_fn(rows.len(), self.n_times(), |i, j| {
            self.values[(rows[i], j)]
        });
        let labels = rows.iter().map(|&i| self.unit_labels[i].clone()).collect();
        Self::new(values, self.t0, labels, self.time_labels.clone())
    }
}

/// Metadata sidecar for label-free CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub n_units: usize,
    pub t_total: usize,
    pub t0: usize,
    pub target_label: String,
}

impl PanelMeta {
    pub fn of(panel: &PanelData) -> Self {
        Self {
            n_units: panel.n_units(),
            t_total: panel.n_times(),
            t0: panel.t0(),
            target_label: panel.target_label().to_string(),
        }
    }

    /// Check the sidecar against a loaded panel and apply its target label.
    pub fn apply(&self, panel: PanelData) -> Result<PanelData> {
        if self.n_units != panel.n_units() || self.t_total != panel.n_times() {
            return Err(TascError::config(format!(
                "sidecar declares {}x{} but panel is {}x{}",
                self.n_units,
                self.t_total,
                panel.n_units(),
                panel.n_times()
            )));
        }
        let mut units = panel.unit_labels.clone();
        units[0] = self.target_label.clone();
        PanelData::new(panel.values, self.t0, units, panel.time_labels)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    /// When true the first record carries time labels and the first column
    /// carries unit labels. When false every cell is numeric.
    pub has_header: bool,
    /// Row (0-based, among data rows) holding the target unit.
    pub target_row: usize,
    pub t0: usize,
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(TascError::Parse {
            row,
            message: format!("column {col}: '{cell}' is not a finite number"),
        }),
    }
}

/// Read a panel from CSV, rows = units and columns = time. Empty target
/// cells after `t0` are stored as `NaN` and flag the target as missing.
/// Lines starting with `#` are skipped.
pub fn load_csv<R: Read>(source: R, options: CsvOptions) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(source);
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| TascError::Parse {
            row: i,
            message: e.to_string(),
        })?;
        records.push(rec);
    }

    let mut time_labels = None;
    if options.has_header {
        if records.is_empty() {
            return Err(TascError::Parse {
                row: 0,
                message: "missing header row".into(),
            });
        }
        let header = records.remove(0);
        time_labels = Some(
            header
                .iter()
                .skip(1)
                .map(|s| s.trim().to_string())
                .collect::<Vec<_>>(),
        );
    }
    if records.is_empty() {
        return Err(TascError::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }

    let skip = usize::from(options.has_header);
    let width = records[0].len();
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != width {
            return Err(TascError::Parse {
                row: i,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
    }
    if width <= skip {
        return Err(TascError::Parse {
            row: 0,
            message: "rows carry no values".into(),
        });
    }
    let t = width - skip;
    if let Some(tl) = &time_labels {
        if tl.len() != t {
            return Err(TascError::Parse {
                row: 0,
                message: format!("header has {} time labels for {t} columns", tl.len()),
            });
        }
    }
    let n = records.len();
    if options.target_row >= n {
        return Err(TascError::config(format!(
            "target row {} out of range for {n} rows",
            options.target_row
        )));
    }
    if options.t0 < 1 || options.t0 >= t {
        return Err(TascError::config(format!(
            "t0 must satisfy 1 <= t0 < T={t}, got {}",
            options.t0
        )));
    }

    // Target first, remaining rows in file order.
    let order: Vec<usize> = std::iter::once(options.target_row)
        .chain((0..n).filter(|&i| i != options.target_row))
        .collect();
    let mut values = DMatrix::zeros(n, t);
    let mut unit_labels = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let rec = &records[src];
        unit_labels.push(if options.has_header {
            rec[0].trim().to_string()
        } else {
            format!("unit{src}")
        });
        for j in 0..t {
            let cell = parse_cell(&rec[j + skip], src, j)?;
            values[(dst, j)] = match cell {
                Some(v) => v,
                None if dst == 0 && j >= options.t0 => f64::NAN,
                None => {
                    return Err(TascError::Parse {
                        row: src,
                        message: format!("column {j}: empty cell"),
                    })
                }
            };
        }
    }
    let time_labels =
        time_labels.unwrap_or_else(|| (1..=t).map(|j| format!("t{j}")).collect());
    PanelData::new(values, options.t0, unit_labels, time_labels)
}

/// Write a panel in the layout read by [`load_csv`] with `has_header`.
/// Values use the shortest representation that parses back exactly.
pub fn save_csv<W: Write>(panel: &PanelData, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["unit".to_string()];
    header.extend(panel.time_labels.iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..panel.n_units() {
        let mut row = vec![panel.unit_labels[i].clone()];
        row.extend(panel.values.row(i).iter().map(|v| {
            if v.is_finite() {
                format!("{v}")
            } else {
                String::new()
            }
        }));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TascError {
    TascError::Io(std::io::Error::other(e))
}

/// Rows averaged to build the centering trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenteringBasis {
    /// Average the donor rows at every time.
    #[default]
    DonorsOnly,
    /// Average every row before `t0`; donors only afterwards, since the
    /// target's post cells are missing or treated.
    AllPreRows,
}

/// A panel with a common trajectory subtracted from every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredPanel {
    pub panel: PanelData,
    pub mean_trajectory: DVector<f64>,
}

impl CenteredPanel {
    /// Add the mean trajectory back to every row.
    pub fn uncenter(&self) -> PanelData {
        let mut values = self.panel.values.clone();
        for mut row in values.row_iter_mut() {
            row += self.mean_trajectory.transpose();
        }
        PanelData {
            values,
            ..self.panel.clone()
        }
    }

    /// Shift a post-intervention prediction back to the original scale.
    pub fn uncenter_post(&self, post: &[f64]) -> Vec<f64> {
        let t0 = self.panel.t0;
        post.iter()
            .enumerate()
            .map(|(j, v)| v + self.mean_trajectory[t0 + j])
            .collect()
    }

    /// Shift a pre-intervention fit back to the original scale.
    pub fn uncenter_pre(&self, pre: &[f64]) -> Vec<f64> {
        pre.iter()
            .enumerate()
            .map(|(j, v)| v + self.mean_trajectory[j])
            .collect()
    }
}

pub fn mean_center(panel: &PanelData, basis: CenteringBasis) -> CenteredPanel {
    let (n, t) = panel.values.shape();
    let mean = DVector::from_fn(t, |j, _| {
        let first = match basis {
            CenteringBasis::AllPreRows if j < panel.t0 => 0,
            _ => 1,
        };
        let rows = first..n;
        let count = rows.len() as f64;
        rows.map(|i| panel.values[(i, j)]).sum::<f64>() / count
    });
    let mut values = panel.values.clone();
    for mut row in values.row_iter_mut() {
        row -= mean.transpose();
    }
    CenteredPanel {
        panel: PanelData {
            values,
            ..panel.clone()
        },
        mean_trajectory: mean,
    }
}

/// Pre (N×t0) and post (N×(T-t0)) blocks.
pub fn split(panel: &PanelData) -> (DMatrix<f64>, DMatrix<f64>) {
    (panel.pre(), panel.post())
}

/// Inverse of [`split`].
pub fn assemble(pre: &DMatrix<f64>, post: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t0) = pre.shape();
    let h = post.ncols();
    DMatrix::from_fn(n, t0 + h, |i, j| {
        if j < t0 {
            pre[(i, j)]
        } else {
            post[(i, j - t0)]
        }
    })
}

fn check_permutation(perm: &[usize], len: usize, what: &str) -> Result<()> {
    if perm.len() != len {
        return Err(TascError::config(format!(
            "{what} permutation has length {}, expected {len}",
            perm.len()
        )));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || seen[p] {
            return Err(TascError::config(format!(
                "{what} permutation is not a permutation of 0..{len}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorder columns within the pre and post segments separately. Column `j`
/// of the pre segment becomes old column `perm_pre[j]`; `perm_post` indexes
/// relative to `t0`.
pub fn permute_columns(
    panel: &PanelData,
    perm_pre: &[usize],
    perm_post: &[usize],
) -> Result<PanelData> {
    let t0 = panel.t0;
    check_permutation(perm_pre, t0, "pre")?;
    check_permutation(perm_post, panel.horizon(), "post")?;
    let source: Vec<usize> = perm_pre
        .iter()
        .copied()
        .chain(perm_post.iter().map(|p| p + t0))
        .collect();
    let values = DMatrix::from_fn(panel.n_units(), panel.n_times(), |i, j| {
        panel.values[(i, source[j])]
    });
    let time_labels = source
        .iter()
        .map(|&j| panel.time_labels[j].clone())
        .collect();
    Ok(PanelData {
        values,
        time_labels,
        ..panel.clone()
    })
}

/// Stack `m` panels vertically: series `s` of unit `i` lands on row
/// `s*N + i`. Row 0 (the first panel's target) remains the target.
pub fn stack_multivariate(panels: &[PanelData]) -> Result<PanelData> {
    let first = panels
        .first()
        .ok_or_else(|| TascError::config("no panels to stack"))?;
    let (n, t) = first.values.shape();
    for (s, p) in panels.iter().enumerate().skip(1) {
        if p.values.shape() != (n, t) || p.t0 != first.t0 {
            return Err(TascError::config(format!(
                "panel {s} is {}x{} with t0={}, expected {n}x{t} with t0={}",
                p.n_units(),
                p.n_times(),
                p.t0,
                first.t0
            )));
        }
    }
    if panels.len() == 1 {
        return Ok(first.clone());
    }
    let m = panels.len();
    // Later panels' target rows become ordinary rows, so they must be complete.
    let values = DMatrix::from_fn(n * m, t, |r, j| panels[r / n].values[(r % n, j)]);
    let unit_labels = (0..n * m)
        .map(|r| {
            let label = &panels[r / n].unit_labels[r % n];
            if r < n {
                label.clone()
            } else {
                format!("{label}#{}", r / n)
            }
        })
        .collect();
    PanelData::new(values, first.t0, unit_labels, first.time_labels.clone())
}
