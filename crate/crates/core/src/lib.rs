//! Time-aware synthetic control.
//!
//! A linear-Gaussian state-space model is fitted to the pre-intervention
//! panel by EM; the target's untreated trajectory after the intervention is
//! then inferred by Kalman filtering with the target observation treated as
//! missing, followed by RTS smoothing. Classical (simplex) and robust
//! (HSVT + ridge) synthetic control are provided as baselines, together
//! with a simulation generator and an evaluation harness.

pub mod baselines;
pub mod em;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod panel;
pub mod seed;
pub mod simgen;
pub mod ssm;

pub use em::{CiVariance, CounterfactualEstimate, EmConfig, EmFit, TascFit};
pub use baselines::{DonorWeights, RscConfig, WeightKind};
pub use error::{Result, TascError};
pub use eval::{EvalReport, MethodKind, MethodSpec, PlaceboResult};
pub use panel::{CenteredPanel, CenteringBasis, CsvOptions, PanelData, PanelMeta};
pub use ssm::{FilterState, SeasonalOffsets, SmoothedTrajectory, StateSpaceParams};
pub use simgen::{SimulatedPanel, SimulationConfig};
