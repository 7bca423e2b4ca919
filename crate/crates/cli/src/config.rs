use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasc_core::eval::Regime;
use tasc_core::simgen::{LARGE, SMALL};
use tasc_core::{CenteringBasis, EmConfig, MethodKind, MethodSpec, PanelMeta, Result, RscConfig, SimulationConfig, TascError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
    /// Long `regime,method,replicate,metric,value` table (bench only).
    Long,
}

/// How to read the input panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelInput {
    /// Number of pre-intervention columns. Falls back to the sidecar.
    pub t0: Option<usize>,
    /// Data row (0-based, header excluded) holding the treated unit.
    pub target_row: usize,
    pub has_header: bool,
    /// JSON sidecar `{n_units, t_total, t0, target_label}`.
    pub sidecar: Option<PathBuf>,
    /// Subtract a common trajectory before fitting; predictions are
    /// shifted back afterwards.
    pub center: Option<CenteringBasis>,
}

impl Default for PanelInput {
    fn default() -> Self {
        Self { t0: None, target_row: 0, has_header: true, sidecar: None, center: None }
    }
}

/// Everything a command can be configured with. Every field is optional in
/// the file; command-line flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Format,
    /// Root seed; every random stream of the run is derived from it.
    pub seed: u64,
    pub panel: PanelInput,
    /// Estimator for infer, placebo and permute.
    pub method: MethodSpec,
    /// Generator settings for simulate (and permute without an input).
    pub simulation: SimulationConfig,
    /// Bench regime matrix.
    pub regimes: Vec<Regime>,
    /// Bench estimators.
    pub methods: Vec<MethodSpec>,
    pub replicates: usize,
    pub buckets: usize,
    pub shuffles: usize,
    /// Use only the identity ordering in permute (a sanity check).
    pub identity_shuffles: bool,
    /// Placebo threshold ratios.
    pub ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            format: Format::Csv,
            seed: 0,
            panel: PanelInput::default(),
            method: MethodSpec::default(),
            simulation: SimulationConfig::default(),
            regimes: vec![
                Regime { name: "smallQ-largeR".into(), config: SimulationConfig::regime(SMALL, LARGE) },
                Regime { name: "smallQ-smallR".into(), config: SimulationConfig::regime(SMALL, SMALL) },
                Regime { name: "largeQ-smallR".into(), config: SimulationConfig::regime(LARGE, SMALL) },
            ],
            methods: vec![
                MethodSpec::tasc(EmConfig { d: 5, ..Default::default() }),
                MethodSpec::new(MethodKind::Sc),
                MethodSpec::rsc(RscConfig { d: 5, ..Default::default() }),
            ],
            replicates: 10,
            buckets: 5,
            shuffles: 20,
            identity_shuffles: false,
            ratios: vec![10.0, 5.0, 2.0],
        }
    }
}

/// Flag values layered over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub t0: Option<usize>,
    pub target_row: Option<usize>,
    pub no_header: bool,
    pub sidecar: Option<PathBuf>,
    pub method: Vec<MethodKind>,
    pub d: Option<usize>,
    pub n1: Option<usize>,
    pub lambda: Option<f64>,
    pub ratio: Vec<f64>,
    pub buckets: Option<usize>,
    pub shuffles: Option<usize>,
    pub replicates: Option<usize>,
    pub identity: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| TascError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| TascError::Config(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: Overrides) -> Result<()> {
        if o.input.is_some() {
            self.input = o.input;
        }
        if o.output.is_some() {
            self.output = o.output;
        }
        if let Some(f) = o.format {
            self.format = f;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.t0.is_some() {
            self.panel.t0 = o.t0;
        }
        if let Some(r) = o.target_row {
            self.panel.target_row = r;
        }
        if o.no_header {
            self.panel.has_header = false;
        }
        if o.sidecar.is_some() {
            self.panel.sidecar = o.sidecar;
        }
        if !o.method.is_empty() {
            self.method.method = o.method[0];
            let mut methods = Vec::new();
            for kind in &o.method {
                // keep any file settings for a method of the same kind
                let base = self.methods.iter().find(|m| m.method == *kind).cloned().unwrap_or_else(|| MethodSpec {
                    method: *kind,
                    ..self.method.clone()
                });
                methods.push(base);
            }
            self.methods = methods;
        }
        let specs = std::iter::once(&mut self.method).chain(self.methods.iter_mut());
        for m in specs {
            if let Some(d) = o.d {
                m.em.d = d;
                m.rsc.d = d;
            }
            if let Some(n1) = o.n1 {
                m.em.n_iters = n1;
            }
            if let Some(l) = o.lambda {
                m.rsc.lambda = l;
                m.rsc.cv_grid = None;
            }
        }
        if !o.ratio.is_empty() {
            self.ratios = o.ratio;
        }
        if let Some(b) = o.buckets {
            self.buckets = b;
        }
        if let Some(s) = o.shuffles {
            self.shuffles = s;
        }
        if let Some(r) = o.replicates {
            self.replicates = r;
        }
        if o.identity {
            self.identity_shuffles = true;
        }
        // the root seed owns every stream
        self.method.em.seed = self.seed;
        self.simulation.seed = self.seed;
        Ok(())
    }

    pub fn require_input(&self) -> Result<&Path> {
        let p = self.input.as_deref().ok_or_else(|| TascError::Config("--input is required".into()))?;
        if !p.is_file() {
            return Err(TascError::Config(format!("input {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_output(&self) -> Result<&Path> {
        self.output.as_deref().ok_or_else(|| TascError::Config("--output is required".into()))
    }

    pub fn sidecar(&self) -> Result<Option<PanelMeta>> {
        match &self.panel.sidecar {
            None => Ok(None),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| TascError::Config(format!("cannot read sidecar {}: {e}", p.display())))?;
                Ok(Some(serde_json::from_str(&text).map_err(|e| TascError::Config(format!("sidecar {}: {e}", p.display())))?))
            }
        }
    }
}
