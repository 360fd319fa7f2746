//! Loss-bandwidth selection in three steps: a preliminary location-scale
//! Gaussian fit, a sinh-arcsinh density fit to the standardised residuals,
//! and the plug-in optimal bandwidth
//!
//! ```text
//! h*_z = [ (d/n) * 9 f_z(xi_tau) / (pi^4 f'_z(xi_tau)^2) ]^(1/3)
//! ```
//!
//! decomposed into the loss smoothness lambda and the relative scale
//! sigma_tilde(x) with mean one: lambda * sigma0 * sigma_tilde_i = h*_z kappa_i.

use crate::basis::DesignArtifacts;
use crate::fit::{
    compute_covariances, information_matrix, optimize_smoothing_impl, penalty_sum, FitError,
    GaussianObs, SmoothFit, SmoothOptions,
};
use crate::sinh_arcsinh::SinhArcsinhFit;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BandwidthError {
    #[error("preliminary fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("degenerate residuals: all responses equal the fitted mean")]
    DegenerateResiduals,
    #[error("density derivative at the shifted quantile is still {value:.3e}; increase the delta guard")]
    FlatDensityDerivative { value: f64 },
    #[error("sigma0 must be positive, got {0}")]
    InvalidSigma0(f64),
}

/// Guard constants for the bandwidth quantile evaluation. The mode-proximity
/// threshold is `epsilon_factor * sd(z)` and the probability shift is `delta`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandwidthGuards {
    pub epsilon_factor: f64,
    pub delta: f64,
}

impl Default for BandwidthGuards {
    fn default() -> Self {
        Self { epsilon_factor: 0.01, delta: 0.05 }
    }
}

/// Preliminary conditional mean/scale fit: fitted values on the training
/// rows, the full fits for prediction, and the effective degrees of freedom
/// of the mean model (the `d` of the bandwidth formula).
#[derive(Debug, Clone)]
pub struct LocationScaleFit {
    pub alpha: DVector<f64>,
    pub kappa: DVector<f64>,
    pub edf_mean: f64,
    pub mean_fit: SmoothFit,
    pub var_fit: SmoothFit,
    pub scale_mean: f64,
}

/// Bias of log residual-squares as a log-chi-square(1) variable: -E[log X^2_1].
const LOG_CHISQ1_BIAS: f64 = 1.270_362_845_461_478_2;

/// Gaussian penalised fit with LAML-selected smoothing and the residual
/// scale profiled out by iteration.
fn gaussian_gam(
    artifacts: &DesignArtifacts,
    y: &DVector<f64>,
) -> Result<(SmoothFit, f64, f64), FitError> {
    let n = y.len();
    let mean = y.sum() / n as f64;
    let mut scale =
        (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).max(1e-12);
    let opts = SmoothOptions::default();
    let mut rho = vec![0.0; artifacts.penalties.len()];
    let mut fit = None;
    let mut edf = 0.0;
    for _ in 0..25 {
        let family = GaussianObs { scale };
        let sf = optimize_smoothing_impl(&artifacts.x, y, &artifacts.penalties, &family, &rho, &opts)?;
        let i_mat = information_matrix(&artifacts.x, &sf.state.w);
        let s = penalty_sum(&artifacts.penalties, &sf.gamma, artifacts.n_cols());
        let (_, _, e) = compute_covariances(&i_mat, &s, None)?;
        let rss: f64 = (0..n).map(|i| (y[i] - sf.state.eta[i]).powi(2)).sum();
        let new_scale = (rss / (n as f64 - e).max(1.0)).max(1e-290);
        let done = (new_scale - scale).abs() <= 1e-6 * scale;
        rho = sf.rho.clone();
        edf = e;
        fit = Some(sf);
        scale = new_scale;
        if done {
            break;
        }
    }
    Ok((fit.expect("at least one iteration ran"), scale, edf))
}

/// Step 1: estimate the conditional mean alpha(x) and scale kappa(x) with
/// Gaussian GAMs. The variance model fits log squared residuals with the
/// log-chi-square bias correction, then kappa = exp(fit / 2).
pub fn fit_location_scale(
    artifacts_mean: &DesignArtifacts,
    artifacts_var: &DesignArtifacts,
    y: &DVector<f64>,
) -> Result<LocationScaleFit, BandwidthError> {
    let n = y.len();
    let (mean_fit, scale_mean, edf_mean) = gaussian_gam(artifacts_mean, y)?;
    let alpha = mean_fit.state.eta.clone();

    let rss: f64 = (0..n).map(|i| (y[i] - alpha[i]).powi(2)).sum();
    if rss <= 0.0 {
        return Err(BandwidthError::DegenerateResiduals);
    }
    let log_r2 = DVector::from_iterator(
        n,
        (0..n).map(|i| ((y[i] - alpha[i]).powi(2)).max(1e-290).ln()),
    );
    let (var_fit, _, _) = gaussian_gam(artifacts_var, &log_r2)?;
    let kappa = DVector::from_iterator(
        n,
        var_fit.state.eta.iter().map(|v| ((v + LOG_CHISQ1_BIAS) / 2.0).exp()),
    );

    Ok(LocationScaleFit { alpha, kappa, edf_mean, mean_fit, var_fit, scale_mean })
}

/// Diagnostics attached to a bandwidth evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandwidthDiagnostics {
    pub xi: f64,
    pub f_at_xi: f64,
    pub f_deriv_at_xi: f64,
    pub d: f64,
    pub n: usize,
    pub shifted: bool,
}

/// Step 2/3 core: evaluate the optimal standardised bandwidth at quantile
/// `tau` from a fitted residual density, with the mode-proximity guard.
pub fn optimal_bandwidth(
    fit: &SinhArcsinhFit,
    tau: f64,
    d: f64,
    n: usize,
    guards: &BandwidthGuards,
) -> Result<(f64, BandwidthDiagnostics), BandwidthError> {
    let mut xi = fit.quantile(tau);
    let mode = fit.mode();
    let epsilon = guards.epsilon_factor * fit.sample_sd;
    let mut shifted = false;
    if (xi - mode).abs() < epsilon {
        // Too close to the mode: f' ~ 0 there. Shift the probability level
        // away from the mode by delta (sign follows the side of the mode).
        let delta = guards.delta;
        let tau_shifted = if xi - mode >= 0.0 {
            (tau + delta.min((1.0 - tau) / 2.0)).min(1.0 - 1e-9)
        } else {
            (tau - delta.min(tau / 2.0)).max(1e-9)
        };
        xi = fit.quantile(tau_shifted);
        shifted = true;
    }
    let f = fit.pdf(xi);
    let fp = fit.pdf_deriv(xi);
    if fp.abs() < 1e-12 {
        return Err(BandwidthError::FlatDensityDerivative { value: fp });
    }
    let pi4 = std::f64::consts::PI.powi(4);
    let h = ((d / n as f64) * 9.0 * f / (pi4 * fp * fp)).cbrt();
    Ok((h, BandwidthDiagnostics { xi, f_at_xi: f, f_deriv_at_xi: fp, d, n, shifted }))
}

/// The per-observation bandwidth split into the loss smoothness and the
/// relative learning-rate scale.
#[derive(Debug, Clone)]
pub struct BandwidthEstimate {
    pub h_z_star: f64,
    pub lambda: f64,
    /// Relative scales with mean one.
    pub sigma_tilde: DVector<f64>,
    pub diagnostics: BandwidthDiagnostics,
}

/// Step 3: lambda = h*_z mean(kappa) / sigma0 and sigma_tilde_i =
/// kappa_i / mean(kappa), so that lambda sigma0 sigma_tilde_i = h*_z kappa_i.
pub fn decompose_bandwidth(
    h_z_star: f64,
    kappa: &DVector<f64>,
    sigma0: f64,
) -> Result<(f64, DVector<f64>), BandwidthError> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(BandwidthError::InvalidSigma0(sigma0));
    }
    let kbar = kappa.sum() / kappa.len() as f64;
    let lambda = h_z_star * kbar / sigma0;
    let sigma_tilde = kappa / kbar;
    Ok((lambda, sigma_tilde))
}
