//! Tail quantile factorization for heavy-tailed panels.
//!
//! A panel `Y` (N units x T periods) is modelled as `Y_it = l_i^T f_t * e_it`
//! where the innovations share a common regularly varying tail. The pooled
//! intermediate quantile `U(NT/k)` and the Hill index give the tail; the low
//! rank surface `l_i^T f_t` scales it cell by cell.
//!
//! Quantile levels use the upper-tail convention: level `tau` is the
//! `(1 - tau)`-quantile. Everything is generic over [`Real`] (`f32`/`f64`);
//! the `f64` aliases below cover the common case.

pub mod eot;
pub mod error;
pub mod evt;
pub mod fit;
pub mod io;
pub mod linalg;
pub mod model;
pub mod panel;
mod pivot;
pub mod qr;
pub mod scalar;
pub mod selection;

pub use eot::{fit_qfm, fit_threshold, per_unit_qr, run_eot, run_eot_with_threshold, EoTResult, EotFlags, ThresholdKind};
pub use error::{Error, Result};
pub use evt::{hill, hill_plot, order_statistic_quantile, top_order_statistics, weissman_extrapolate, TailEstimates};
pub use fit::{fit_ftvm, fit_ftvm_from, objective, predict_quantiles, FitOptions, FitResult, QuantileLevel};
pub use io::{load_covariates, load_panel, load_result, save_result, write_covariates, write_wide_csv, PanelFormat};
pub use model::{normalize_identification, FactorModel};
pub use panel::{check_loss, k_from_fraction, PanelData, TailConfig};
pub use qr::{solve_scale_qr, solve_vector_qr, FitBounds, VectorQrOptions};
pub use scalar::Real;
pub use selection::{
    ic_select, ic_select_with, ks_pvalue, ks_statistic, ks_test, validate_then_select, IcMode, IcReport, IcTerm,
    KsReport, Selection,
};

pub type Panel = PanelData<f64>;
pub type Config = TailConfig<f64>;
pub type Model = FactorModel<f64>;
pub type Fit = FitResult<f64>;
pub type EoT = EoTResult<f64>;
pub type Estimates = TailEstimates<f64>;
