//! Learning-rate calibration and the end-to-end quantile pipelines.
//!
//! The scale sigma0 of the per-observation learning rate is selected by
//! minimising an estimated integrated KL divergence between the posterior
//! variances of the quantile curve under the model covariance V and under
//! the sandwich covariance (fast path) or a bootstrap variance/bias estimate
//! (Algorithm-style resampling path). Both objectives are deterministic
//! functions of sigma0 once the data (and bootstrap seed) are fixed.

use crate::bandwidth::{
    decompose_bandwidth, fit_location_scale, optimal_bandwidth, BandwidthDiagnostics,
    BandwidthError, BandwidthEstimate, BandwidthGuards, LocationScaleFit,
};
use crate::basis::{assemble_design, BasisError, DesignArtifacts, ModelSpec};
use crate::data::{DataError, Table};
use crate::elf::log_beta;
use crate::fit::{
    compute_covariances, gaussian_start, information_matrix, optimize_smoothing_warm,
    penalty_sum, pirls_impl, ElfObs, FitError, SmoothFit, SmoothOptions,
};
use crate::optim::brent_minimize;
use crate::parallel::par_map;
use crate::sinh_arcsinh::{fit_sinh_arcsinh, SinhArcsinhFit};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("design stage: {0}")]
    Basis(#[from] BasisError),
    #[error("data stage: {0}")]
    Data(#[from] DataError),
    #[error("bandwidth stage: {0}")]
    Bandwidth(#[from] BandwidthError),
    #[error("fit stage: {0}")]
    Fit(#[from] FitError),
    #[error("calibration failed: every sigma0 evaluation diverged")]
    AllEvaluationsFailed,
    #[error("bootstrap calibration: {failed} of {total} replicate fits failed (> 20%)")]
    TooManyReplicateFailures { failed: usize, total: usize },
    #[error("invalid quantile level tau = {0}; must lie in (0, 1)")]
    InvalidTau(f64),
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("preliminary stage: {0}")]
    Preliminary(String),
}

/// How sigma0 is selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    /// Minimise the sandwich-covariance IKL estimate.
    Sandwich,
    /// Minimise the bootstrap variance/bias IKL estimate.
    Bootstrap { k: usize },
    /// Select sigma0 by marginal-loss minimisation. Documented to produce
    /// poorly calibrated intervals; kept as an explicit comparator.
    LamlComparator,
    /// Skip calibration and use the given sigma0.
    Fixed { sigma0: f64 },
}

/// Options for a pipeline run.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: CalibrationMethod,
    pub seed: u64,
    /// Exponent of the per-point IKL summand, in (0, 1].
    pub zeta: f64,
    /// Bracket for log sigma0; defaults to [log kbar - 6, log kbar + 3].
    pub bracket: Option<(f64, f64)>,
    /// Absolute Brent tolerance in log sigma0.
    pub brent_tol: f64,
    pub guards: BandwidthGuards,
    pub smooth: SmoothOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: CalibrationMethod::Sandwich,
            seed: 0,
            zeta: 0.5,
            bracket: None,
            brent_tol: 1e-2,
            guards: BandwidthGuards::default(),
            smooth: SmoothOptions::default(),
        }
    }
}

/// The regularised gradient-covariance estimate.
///
/// `sigma_hat` is the empirical per-observation score covariance,
/// `sigma_tilde` the low-variance inconsistent stabiliser, and `sigma_reg`
/// their Kish-weighted blend alpha sigma_hat + (1 - alpha) sigma_tilde.
/// `total()` scales to the covariance of the summed loss gradient, which is
/// what the sandwich precision needs.
#[derive(Debug, Clone)]
pub struct GradientCovariance {
    pub sigma_hat: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub sigma_reg: DMatrix<f64>,
    pub alpha: f64,
    pub ess: f64,
    pub ridged: bool,
    n: usize,
}

impl GradientCovariance {
    /// Covariance of the total gradient: n times the per-observation blend,
    /// plus the recovery ridge when the blend was numerically singular.
    pub fn total(&self) -> DMatrix<f64> {
        let mut t = &self.sigma_reg * self.n as f64;
        if self.ridged {
            let d = t.nrows();
            let ridge = 1e-8 * t.trace() / d as f64;
            for i in 0..d {
                t[(i, i)] += ridge;
            }
        }
        t
    }
}

/// Per-observation scores and the regularised covariance estimators at the
/// converged fit.
pub fn gradient_covariance(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    elf: &ElfObs,
) -> GradientCovariance {
    let (n, d) = (x.nrows(), x.ncols());
    let mut omega = DVector::<f64>::zeros(n);
    let mut signs = DVector::<f64>::zeros(n);
    for i in 0..n {
        let sigma = elf.sigma[i];
        let z = (y[i] - eta[i]) / (elf.lambda * sigma);
        let phi = 1.0 / (1.0 + (-z).exp());
        let score = (phi - 1.0 + elf.tau) / sigma;
        omega[i] = score.abs();
        signs[i] = if score >= 0.0 { 1.0 } else { -1.0 };
    }

    let mut second = DMatrix::<f64>::zeros(d, d);
    let mut x_omega = DVector::<f64>::zeros(d);
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut sum_sw = 0.0;
    for i in 0..n {
        let w2 = omega[i] * omega[i];
        sum_w += omega[i];
        sum_w2 += w2;
        sum_sw += signs[i] * omega[i];
        let xi = x.row(i);
        for p in 0..d {
            x_omega[p] += signs[i] * omega[i] * xi[p];
            let c = w2 * xi[p];
            for q in p..d {
                second[(p, q)] += c * xi[q];
            }
        }
    }
    for p in 0..d {
        for q in 0..p {
            second[(p, q)] = second[(q, p)];
        }
    }
    x_omega /= n as f64;
    let sigma_hat = second / n as f64 - &x_omega * x_omega.transpose();

    let xbar = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let xtx = x.transpose() * x;
    let sigma_tilde =
        (xtx * sum_w2 - (&xbar * xbar.transpose()) * (sum_sw * sum_sw)) / (n as f64 * n as f64);

    let ess = sum_w * sum_w / sum_w2;
    let alpha = (ess / (d as f64 * d as f64)).min(1.0);
    let sigma_reg = &sigma_hat * alpha + &sigma_tilde * (1.0 - alpha);
    let ridged = (&sigma_reg * n as f64).cholesky().is_none();

    GradientCovariance { sigma_hat, sigma_tilde, sigma_reg, alpha, ess, ridged, n }
}

/// One recorded sigma0 evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TracePoint {
    pub log_sigma0: f64,
    pub sigma0: f64,
    pub value: f64,
    pub converged: bool,
}

/// The calibration trace: every evaluated (log sigma0, objective) pair, the
/// selected scale, and the method that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationTrace {
    pub points: Vec<TracePoint>,
    pub selected_sigma0: f64,
    pub method: String,
    pub zeta: f64,
    pub at_bracket_edge: bool,
}

/// A fitted quantile model: coefficients, smoothing parameters, covariances,
/// and summary diagnostics.
#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub tau: f64,
    pub beta: DVector<f64>,
    pub gamma: Vec<f64>,
    pub rho: Vec<f64>,
    pub laml: f64,
    pub v: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    pub edf: f64,
    pub edf_by_term: Vec<(String, f64)>,
    pub sigma0: f64,
    pub lambda: f64,
    pub fitted: DVector<f64>,
    pub ess: f64,
    pub pirls_iterations: usize,
    pub warnings: Vec<String>,
}

impl QuantileFit {
    /// Credible interval for mu(x) at the given two-sided level, using V or
    /// the sandwich V-tilde.
    pub fn interval(&self, x_row: &DVector<f64>, level: f64, sandwich: bool) -> (f64, f64) {
        let cov = if sandwich { &self.v_tilde } else { &self.v };
        let center = x_row.dot(&self.beta);
        let sd = x_row.dot(&(cov * x_row)).max(0.0).sqrt();
        let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
        (center - z * sd, center + z * sd)
    }
}

/// Cached preliminary machinery shared by every quantile level.
pub struct Preliminary {
    pub location_scale: LocationScaleFit,
    pub residual_density: SinhArcsinhFit,
}

/// An end-to-end fitting context: data, designs, options, and the cached
/// preliminary fits.
pub struct Pipeline {
    pub y: DVector<f64>,
    pub artifacts: DesignArtifacts,
    pub var_artifacts: DesignArtifacts,
    pub options: FitOptions,
    prelim: OnceLock<Result<Preliminary, String>>,
    prelim_count: AtomicUsize,
}

/// The full output for one quantile level.
pub struct FitBundle {
    pub fit: QuantileFit,
    pub trace: CalibrationTrace,
    pub bandwidth: BandwidthEstimate,
}

impl Pipeline {
    pub fn new(data: &Table, spec: &ModelSpec, options: FitOptions) -> Result<Self, CalibrateError> {
        let artifacts = assemble_design(spec, data)?;
        let var_artifacts = assemble_design(&spec.variance_spec(), data)?;
        let y = DVector::from_column_slice(data.numeric(&spec.response)?);
        Ok(Self {
            y,
            artifacts,
            var_artifacts,
            options,
            prelim: OnceLock::new(),
            prelim_count: AtomicUsize::new(0),
        })
    }

    /// Number of times the preliminary location-scale/density machinery was
    /// actually fitted (the contract is: once per pipeline).
    pub fn prelim_fit_count(&self) -> usize {
        self.prelim_count.load(Ordering::SeqCst)
    }

    pub fn preliminary(&self) -> Result<&Preliminary, CalibrateError> {
        let cell = self.prelim.get_or_init(|| {
            self.prelim_count.fetch_add(1, Ordering::SeqCst);
            let ls = fit_location_scale(&self.artifacts, &self.var_artifacts, &self.y)
                .map_err(|e| e.to_string())?;
            let n = self.y.len();
            let z: Vec<f64> =
                (0..n).map(|i| (self.y[i] - ls.alpha[i]) / ls.kappa[i]).collect();
            let density = fit_sinh_arcsinh(&z);
            Ok(Preliminary { location_scale: ls, residual_density: density })
        });
        match cell {
            Ok(p) => Ok(p),
            Err(msg) => Err(CalibrateError::Preliminary(msg.clone())),
        }
    }

    /// Per-quantile calibration context: the optimal standardised bandwidth
    /// and the kappa decomposition, all independent of sigma0.
    pub fn tau_context(&self, tau: f64) -> Result<TauContext<'_>, CalibrateError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(CalibrateError::InvalidTau(tau));
        }
        let prelim = self.preliminary()?;
        let n = self.y.len();
        let (h_z_star, diagnostics) = optimal_bandwidth(
            &prelim.residual_density,
            tau,
            prelim.location_scale.edf_mean,
            n,
            &self.options.guards,
        )?;
        let kappa = prelim.location_scale.kappa.clone();
        let kbar = kappa.sum() / n as f64;
        // Starting coefficients: project alpha(x) + kappa(x) xi_tau onto the
        // design.
        let xi = prelim.residual_density.quantile(tau);
        let target = DVector::from_iterator(
            n,
            (0..n).map(|i| prelim.location_scale.alpha[i] + prelim.location_scale.kappa[i] * xi),
        );
        let s_small = penalty_sum(&self.artifacts.penalties, &vec![1.0; self.artifacts.penalties.len()], self.artifacts.n_cols());
        let beta_start = gaussian_start(&self.artifacts.x, &target, &s_small)?;
        Ok(TauContext { pipeline: self, tau, h_z_star, diagnostics, kappa, kbar, beta_start })
    }

    /// Fit one quantile level end to end.
    pub fn fit_quantile(&self, tau: f64) -> Result<FitBundle, CalibrateError> {
        let ctx = self.tau_context(tau)?;
        let trace = match self.options.method {
            CalibrationMethod::Sandwich => ctx.calibrate_sandwich()?,
            CalibrationMethod::Bootstrap { k } => ctx.calibrate_bootstrap(k, self.options.seed)?,
            CalibrationMethod::LamlComparator => ctx.calibrate_laml()?,
            CalibrationMethod::Fixed { sigma0 } => CalibrationTrace {
                points: vec![],
                selected_sigma0: sigma0,
                method: "fixed".to_string(),
                zeta: self.options.zeta,
                at_bracket_edge: false,
            },
        };
        let bundle = ctx.final_fit(trace)?;
        Ok(bundle)
    }

    /// Fit several quantile levels, computing the preliminary machinery once
    /// and running the per-level fits as a deterministic parallel map.
    pub fn fit_multi_quantile(&self, taus: &[f64]) -> MultiFitOutcome {
        self.preliminary().ok();
        let results: Vec<(f64, Result<FitBundle, CalibrateError>)> = par_map(
            taus.to_vec(),
            |tau| (tau, self.fit_quantile(tau)),
        );
        let crossings = count_crossings(&self.artifacts, &results);
        MultiFitOutcome { results, crossings }
    }
}

/// Results for all requested quantiles plus the crossing diagnostic: the
/// number of (row, adjacent-tau) pairs where fitted quantiles are out of
/// order.
pub struct MultiFitOutcome {
    pub results: Vec<(f64, Result<FitBundle, CalibrateError>)>,
    pub crossings: usize,
}

fn count_crossings(
    artifacts: &DesignArtifacts,
    results: &[(f64, Result<FitBundle, CalibrateError>)],
) -> usize {
    let mut fitted: Vec<(f64, &DVector<f64>)> = results
        .iter()
        .filter_map(|(tau, r)| r.as_ref().ok().map(|b| (*tau, &b.fit.fitted)))
        .collect();
    fitted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut crossings = 0;
    for w in fitted.windows(2) {
        for i in 0..artifacts.n_rows() {
            if w[0].1[i] > w[1].1[i] {
                crossings += 1;
            }
        }
    }
    crossings
}

/// Everything needed to evaluate calibration objectives at one quantile.
pub struct TauContext<'a> {
    pipeline: &'a Pipeline,
    pub tau: f64,
    pub h_z_star: f64,
    pub diagnostics: BandwidthDiagnostics,
    pub kappa: DVector<f64>,
    pub kbar: f64,
    beta_start: DVector<f64>,
}

/// Warm-start state threaded through consecutive sigma0 evaluations.
#[derive(Default, Clone)]
pub struct WarmStart {
    rho: Option<Vec<f64>>,
    beta: Option<DVector<f64>>,
}

/// One inner evaluation: the smoothing fit and both variance vectors.
pub struct IklEval {
    pub ikl: f64,
    pub fit: SmoothFit,
    pub elf: ElfObs,
    pub edf: f64,
    pub v_diag: DVector<f64>,
    pub v_tilde_diag: DVector<f64>,
    pub covariance: GradientCovariance,
    pub v: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    pub i_mat: DMatrix<f64>,
}

impl<'a> TauContext<'a> {
    /// Loss parameters implied by sigma0: lambda = h kbar / sigma0 and
    /// sigma_i = sigma0 kappa_i / kbar, so the bandwidth lambda sigma_i is
    /// invariant in sigma0.
    pub fn elf_obs(&self, sigma0: f64) -> Result<ElfObs, CalibrateError> {
        let (lambda, sigma_tilde) = decompose_bandwidth(self.h_z_star, &self.kappa, sigma0)?;
        Ok(ElfObs { tau: self.tau, lambda, sigma: &sigma_tilde * sigma0 })
    }

    fn smooth_fit(
        &self,
        elf: &ElfObs,
        warm: &WarmStart,
    ) -> Result<SmoothFit, FitError> {
        let art = &self.pipeline.artifacts;
        let rho_default = vec![0.0; art.penalties.len()];
        let rho_init = warm.rho.as_deref().unwrap_or(&rho_default);
        let beta = warm.beta.as_ref().unwrap_or(&self.beta_start);
        optimize_smoothing_warm(
            &art.x,
            &self.pipeline.y,
            &art.penalties,
            elf,
            rho_init,
            &self.pipeline.options.smooth,
            Some(beta),
        )
    }

    /// The sandwich IKL objective at sigma0: refit, form V and V-tilde, and
    /// average the per-point summand (r + log 1/r)^zeta with r = v_tilde/v.
    pub fn ikl_objective(
        &self,
        sigma0: f64,
        warm: &mut WarmStart,
    ) -> Result<IklEval, CalibrateError> {
        let art = &self.pipeline.artifacts;
        let y = &self.pipeline.y;
        let elf = self.elf_obs(sigma0)?;
        let fit = self.smooth_fit(&elf, warm)?;
        let i_mat = information_matrix(&art.x, &fit.state.w);
        let s = penalty_sum(&art.penalties, &fit.gamma, art.n_cols());
        let covariance = gradient_covariance(&art.x, y, &fit.state.eta, &elf);
        let total = covariance.total();
        let (v, v_tilde, edf) = compute_covariances(&i_mat, &s, Some(&total))?;
        let v_tilde = v_tilde.expect("sandwich covariance requested");

        let n = y.len();
        let xv = &art.x * &v;
        let xvt = &art.x * &v_tilde;
        let mut v_diag = DVector::zeros(n);
        let mut vt_diag = DVector::zeros(n);
        for i in 0..n {
            v_diag[i] = art.x.row(i).dot(&xv.row(i));
            vt_diag[i] = art.x.row(i).dot(&xvt.row(i));
        }
        let zeta = self.pipeline.options.zeta;
        let mut total_ikl = 0.0;
        for i in 0..n {
            let r = vt_diag[i] / v_diag[i];
            let term = r + (1.0 / r).ln();
            debug_assert!(term >= 1.0 - 1e-12, "IKL summand {term} below its floor");
            total_ikl += term.max(1.0).powf(zeta);
        }
        warm.rho = Some(fit.rho.clone());
        warm.beta = Some(fit.state.beta.clone());
        Ok(IklEval {
            ikl: total_ikl / n as f64,
            edf,
            v_diag,
            v_tilde_diag: vt_diag,
            covariance,
            v,
            v_tilde,
            i_mat,
            elf,
            fit,
        })
    }

    fn default_bracket(&self) -> (f64, f64) {
        self.pipeline
            .options
            .bracket
            .unwrap_or((self.kbar.ln() - 6.0, self.kbar.ln() + 3.0))
    }

    fn run_brent<F: FnMut(f64) -> Option<f64>>(
        &self,
        mut eval: F,
        method: &str,
    ) -> Result<CalibrationTrace, CalibrateError> {
        let (lo, hi) = self.default_bracket();
        let tol = self.pipeline.options.brent_tol;
        let mut points: Vec<TracePoint> = Vec::new();
        {
            let objective = |t: f64| -> f64 {
                match eval(t.exp()) {
                    Some(v) => {
                        points.push(TracePoint {
                            log_sigma0: t,
                            sigma0: t.exp(),
                            value: v,
                            converged: true,
                        });
                        v
                    }
                    None => {
                        points.push(TracePoint {
                            log_sigma0: t,
                            sigma0: t.exp(),
                            value: f64::INFINITY,
                            converged: false,
                        });
                        f64::INFINITY
                    }
                }
            };
            let _ = brent_minimize(objective, lo, hi, tol, 100);
        }
        let best = points
            .iter()
            .filter(|p| p.converged)
            .min_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
            .ok_or(CalibrateError::AllEvaluationsFailed)?;
        let at_edge = hi > lo
            && ((best.log_sigma0 - lo).abs() < 2.0 * tol || (hi - best.log_sigma0).abs() < 2.0 * tol);
        Ok(CalibrationTrace {
            selected_sigma0: best.sigma0,
            method: method.to_string(),
            zeta: self.pipeline.options.zeta,
            at_bracket_edge: at_edge,
            points,
        })
    }

    /// Minimise the sandwich IKL objective over log sigma0 by Brent search.
    pub fn calibrate_sandwich(&self) -> Result<CalibrationTrace, CalibrateError> {
        let mut warm = WarmStart::default();
        self.run_brent(
            |sigma0| self.ikl_objective(sigma0, &mut warm).ok().map(|e| e.ikl),
            "sandwich",
        )
    }

    /// Bootstrap IKL: draw row indices once per seed, then for each sigma0
    /// refit beta only (gamma fixed at the full-data estimate) on each
    /// resample and score variance plus squared bias against v(x).
    pub fn calibrate_bootstrap(
        &self,
        k: usize,
        seed: u64,
    ) -> Result<CalibrationTrace, CalibrateError> {
        if k < 2 {
            return Err(CalibrateError::TooFewReplicates(k));
        }
        let n = self.pipeline.y.len();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let index_sets: Vec<Vec<usize>> = (0..k)
            .map(|_| (0..n).map(|_| rng.gen_range(0..n)).collect())
            .collect();

        let mut warm = WarmStart::default();
        let mut failure: Option<CalibrateError> = None;
        let trace = self.run_brent(
            |sigma0| match self.bootstrap_objective(sigma0, &index_sets, &mut warm) {
                Ok(v) => Some(v),
                Err(e @ CalibrateError::TooManyReplicateFailures { .. }) => {
                    failure = Some(e);
                    None
                }
                Err(_) => None,
            },
            "bootstrap",
        );
        match (trace, failure) {
            (Ok(t), _) => Ok(t),
            (Err(_), Some(e)) => Err(e),
            (Err(e), None) => Err(e),
        }
    }

    /// The bootstrap objective for fixed index sets (deterministic in sigma0).
    pub fn bootstrap_objective(
        &self,
        sigma0: f64,
        index_sets: &[Vec<usize>],
        warm: &mut WarmStart,
    ) -> Result<f64, CalibrateError> {
        let art = &self.pipeline.artifacts;
        let y = &self.pipeline.y;
        let n = y.len();
        let eval = self.ikl_objective(sigma0, warm)?;
        let mu0 = &art.x * &eval.fit.state.beta;
        let s = penalty_sum(&art.penalties, &eval.fit.gamma, art.n_cols());

        let d = art.n_cols();
        let replicate_mu: Vec<Option<DVector<f64>>> = par_map(
            index_sets.to_vec(),
            |idx| {
                let mut xj = DMatrix::zeros(n, d);
                let mut yj = DVector::zeros(n);
                let mut sigma_j = DVector::zeros(n);
                for (r, &i) in idx.iter().enumerate() {
                    xj.row_mut(r).copy_from(&art.x.row(i));
                    yj[r] = y[i];
                    sigma_j[r] = eval.elf.sigma[i];
                }
                let elf_j = ElfObs { tau: self.tau, lambda: eval.elf.lambda, sigma: sigma_j };
                pirls_impl(&xj, &yj, &s, &elf_j, Some(&eval.fit.state.beta))
                    .ok()
                    .map(|st| &art.x * &st.beta)
            },
        );

        let failed = replicate_mu.iter().filter(|m| m.is_none()).count();
        let k = index_sets.len();
        if failed * 5 > k {
            return Err(CalibrateError::TooManyReplicateFailures { failed, total: k });
        }
        let good: Vec<&DVector<f64>> = replicate_mu.iter().flatten().collect();
        let kk = good.len() as f64;

        let zeta = self.pipeline.options.zeta;
        let mut total = 0.0;
        for i in 0..n {
            let mean = good.iter().map(|m| m[i]).sum::<f64>() / kk;
            let var = good.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / (kk - 1.0);
            let var = var.max(1e-300);
            let v = eval.v_diag[i];
            let bias2 = (mu0[i] - mean).powi(2);
            let term = var / v + (v / var).ln() + bias2 / v;
            total += term.max(0.0).powf(zeta);
        }
        Ok(total / n as f64)
    }

    /// Marginal-loss selection of sigma0: minimise the LAML value plus the
    /// density normalising term sum_i log(lambda sigma_i Beta(..)) over
    /// sigma0 as well as gamma.
    pub fn calibrate_laml(&self) -> Result<CalibrationTrace, CalibrateError> {
        let mut warm = WarmStart::default();
        let n = self.pipeline.y.len();
        self.run_brent(
            |sigma0| {
                let elf = match self.elf_obs(sigma0) {
                    Ok(e) => e,
                    Err(_) => return None,
                };
                let fit = self.smooth_fit(&elf, &mut warm).ok()?;
                warm.rho = Some(fit.rho.clone());
                warm.beta = Some(fit.state.beta.clone());
                let log_norm: f64 = (0..n)
                    .map(|i| {
                        (elf.lambda * elf.sigma[i]).ln()
                            + log_beta(elf.lambda * (1.0 - self.tau), elf.lambda * self.tau)
                    })
                    .sum();
                Some(fit.laml + log_norm)
            },
            "laml-comparator (known-miscalibrated)",
        )
    }

    /// Final fit at the selected sigma0, assembling the full QuantileFit.
    pub fn final_fit(&self, trace: CalibrationTrace) -> Result<FitBundle, CalibrateError> {
        let art = &self.pipeline.artifacts;
        let sigma0 = trace.selected_sigma0;
        let mut warm = WarmStart::default();
        let eval = self.ikl_objective(sigma0, &mut warm)?;
        let (lambda, sigma_tilde) = decompose_bandwidth(self.h_z_star, &self.kappa, sigma0)?;

        let mut edf_by_term = Vec::new();
        let vi = &eval.v * &eval.i_mat;
        for (label, range) in &art.col_map {
            let partial: f64 = range.clone().map(|j| vi[(j, j)]).sum();
            edf_by_term.push((label.clone(), partial));
        }

        let mut warnings = eval.fit.warnings.clone();
        if trace.at_bracket_edge {
            warnings.push(
                "selected sigma0 sits at the bracket edge; consider widening --bracket".into(),
            );
        }
        if eval.covariance.ridged {
            warnings.push("gradient covariance was ridged to restore positive definiteness".into());
        }

        let fit = QuantileFit {
            tau: self.tau,
            beta: eval.fit.state.beta.clone(),
            gamma: eval.fit.gamma.clone(),
            rho: eval.fit.rho.clone(),
            laml: eval.fit.laml,
            v: eval.v.clone(),
            v_tilde: eval.v_tilde.clone(),
            edf: eval.edf,
            edf_by_term,
            sigma0,
            lambda,
            fitted: eval.fit.state.eta.clone(),
            ess: eval.covariance.ess,
            pirls_iterations: eval.fit.state.iterations,
            warnings,
        };
        let bandwidth = BandwidthEstimate {
            h_z_star: self.h_z_star,
            lambda,
            sigma_tilde,
            diagnostics: self.diagnostics,
        };
        Ok(FitBundle { fit, trace, bandwidth })
    }
}
