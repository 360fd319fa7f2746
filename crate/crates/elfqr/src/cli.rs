//! Batch interface: fit/predict/simulate/calibrate-trace commands, model
//! serialisation, and the built-in simulation harness.
//!
//! Model files are versioned JSON with dense row-major matrices; tabular
//! input/output is CSV with floats printed at 17 significant digits so they
//! reparse bit-identically. Simulation replicates use the ChaCha12 counter
//! stream cipher with per-replicate seeds `base_seed + replicate`, so
//! reports are reproducible across platforms and worker counts.

use crate::bandwidth::{BandwidthDiagnostics, BandwidthGuards};
use crate::basis::{matrix_serde, rebuild_design, ModelSpec, RealizedTerm};
use crate::calibrate::{
    CalibrateError, CalibrationMethod, CalibrationTrace, FitBundle, FitOptions, Pipeline,
};
use crate::data::{fmt_f64, DataError, Table};
use crate::parallel::par_map;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Calibrate(#[from] CalibrateError),
    #[error("model spec: {0}")]
    Spec(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("unsupported model file schema version '{found}' (this build reads major version {expect})")]
    SchemaVersion { found: String, expect: u32 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown scenario '{0}'; available: additive_gamma")]
    UnknownScenario(String),
    #[error("{failed} of {total} simulation fits failed")]
    SimulationFailures { failed: usize, total: usize },
}

/// Configuration of one batch run, assembled from command-line flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub spec_path: PathBuf,
    pub taus: Vec<f64>,
    pub method: CalibrationMethod,
    pub seed: u64,
    pub zeta: f64,
    pub bracket: Option<(f64, f64)>,
    pub guards: BandwidthGuards,
    pub out_path: PathBuf,
    pub levels: Vec<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(CliError::Argument(format!(
                "quantile levels must lie strictly in (0,1): {:?}",
                self.taus
            )));
        }
        if let CalibrationMethod::Bootstrap { k } = self.method {
            if k < 2 {
                return Err(CliError::Argument(format!("bootstrap needs k >= 2, got {k}")));
            }
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(CliError::Argument(format!("zeta must be in (0,1], got {}", self.zeta)));
        }
        check_levels(&self.levels)?;
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            method: self.method,
            seed: self.seed,
            zeta: self.zeta,
            bracket: self.bracket,
            guards: self.guards,
            ..FitOptions::default()
        }
    }
}

fn check_levels(levels: &[f64]) -> Result<(), CliError> {
    for &l in levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(CliError::Argument(format!(
                "interval level {l} is degenerate; levels must lie strictly in (0,1)"
            )));
        }
    }
    Ok(())
}

const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: u32 = 1;

/// Serialised fitted model: everything needed to predict with intervals.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: String,
    pub spec: ModelSpec,
    pub terms: Vec<RealizedTerm>,
    pub tau: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(with = "matrix_serde")]
    pub v: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub v_tilde: DMatrix<f64>,
    pub edf: f64,
    pub edf_by_term: Vec<(String, f64)>,
    pub sigma0: f64,
    pub lambda: f64,
    pub h_z_star: f64,
    pub bandwidth_diagnostics: BandwidthDiagnostics,
    pub calibration: CalibrationTrace,
    pub warnings: Vec<String>,
}

impl ModelFile {
    pub fn from_bundle(spec: &ModelSpec, terms: &[RealizedTerm], bundle: &FitBundle) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION.to_string(),
            spec: spec.clone(),
            terms: terms.to_vec(),
            tau: bundle.fit.tau,
            beta: bundle.fit.beta.iter().copied().collect(),
            gamma: bundle.fit.gamma.clone(),
            v: bundle.fit.v.clone(),
            v_tilde: bundle.fit.v_tilde.clone(),
            edf: bundle.fit.edf,
            edf_by_term: bundle.fit.edf_by_term.clone(),
            sigma0: bundle.fit.sigma0,
            lambda: bundle.fit.lambda,
            h_z_star: bundle.bandwidth.h_z_star,
            bandwidth_diagnostics: bundle.bandwidth.diagnostics,
            calibration: bundle.trace.clone(),
            warnings: bundle.fit.warnings.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::ModelFile(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|source| CliError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
        // Check the version before strict decoding.
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::ModelFile(e.to_string()))?;
        let found = probe
            .get("schema_version")
            .and_then(|v| v.as_str())
            .unwrap_or("missing")
            .to_string();
        let major: Option<u32> = found.split('.').next().and_then(|m| m.parse().ok());
        if major != Some(SCHEMA_MAJOR) {
            return Err(CliError::SchemaVersion { found, expect: SCHEMA_MAJOR });
        }
        serde_json::from_str(&text).map_err(|e| CliError::ModelFile(e.to_string()))
    }
}

pub fn load_spec(path: &Path) -> Result<ModelSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    let spec = ModelSpec::from_json(&text).map_err(|e| CliError::Spec(e.to_string()))?;
    spec.validate().map_err(|e| CliError::Spec(e.to_string()))?;
    Ok(spec)
}

/// Fit one quantile model and write the model file plus a summary to stdout.
pub fn cmd_fit(config: &RunConfig) -> Result<(), CliError> {
    config.validate()?;
    if config.taus.len() != 1 {
        return Err(CliError::Argument(format!(
            "fit takes a single --tau, got {:?}; use `simulate` or repeated runs for several levels",
            config.taus
        )));
    }
    let tau = config.taus[0];
    let data = Table::read_csv(&config.data_path)?;
    let spec = load_spec(&config.spec_path)?;
    let pipeline = Pipeline::new(&data, &spec, config.fit_options())?;
    for w in &pipeline.artifacts.warnings {
        eprintln!("warning: {w}");
    }
    let bundle = pipeline.fit_quantile(tau)?;

    let model = ModelFile::from_bundle(&spec, &pipeline.artifacts.terms, &bundle);
    model.save(&config.out_path)?;

    println!("fitted tau = {tau} on {} rows, {} columns", data.n_rows(), pipeline.artifacts.n_cols());
    println!(
        "  method {}  sigma0 {:.6}  lambda {:.6}  h*_z {:.6}",
        bundle.trace.method, bundle.fit.sigma0, bundle.fit.lambda, bundle.bandwidth.h_z_star
    );
    println!(
        "  laml {:.4}  edf {:.2}  ess {:.1}  pirls iterations {}  calibration evals {}",
        bundle.fit.laml,
        bundle.fit.edf,
        bundle.fit.ess,
        bundle.fit.pirls_iterations,
        bundle.trace.points.len()
    );
    for (label, edf) in &bundle.fit.edf_by_term {
        println!("  edf[{label}] = {edf:.2}");
    }
    for w in &bundle.fit.warnings {
        eprintln!("warning: {w}");
    }
    println!("model written to {}", config.out_path.display());
    Ok(())
}

/// Predict quantiles with credible intervals for new data.
pub fn cmd_predict(
    model_path: &Path,
    data_path: &Path,
    levels: &[f64],
    sandwich: bool,
    out_path: &Path,
) -> Result<(), CliError> {
    check_levels(levels)?;
    let model = ModelFile::load(model_path)?;
    let data = Table::read_csv(data_path)?;
    let (x, extrapolated) = rebuild_design(&model.terms, &data)
        .map_err(|e| CliError::Calibrate(CalibrateError::Basis(e)))?;
    if extrapolated > 0 {
        eprintln!("warning: {extrapolated} rows lie outside the training range of a smooth (linear extrapolation used)");
    }
    let beta = DVector::from_vec(model.beta.clone());
    let cov = if sandwich { &model.v_tilde } else { &model.v };
    let z_values: Vec<f64> = levels
        .iter()
        .map(|&l| statrs::distribution::Normal::standard().inverse_cdf(0.5 * (1.0 + l)))
        .collect();

    let file = std::fs::File::create(out_path)
        .map_err(|source| CliError::Io { path: out_path.display().to_string(), source })?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = vec!["row".to_string(), "fit".to_string()];
    for &l in levels {
        header.push(format!("lo_{l}"));
        header.push(format!("hi_{l}"));
    }
    writeln!(out, "{}", header.join(",")).map_err(|source| CliError::Io {
        path: out_path.display().to_string(),
        source,
    })?;
    let xcov = &x * cov;
    for i in 0..x.nrows() {
        let mu = x.row(i).transpose().dot(&beta);
        let var = x.row(i).dot(&xcov.row(i)).max(0.0);
        let sd = var.sqrt();
        let mut fields = vec![format!("{i}"), fmt_f64(mu)];
        for &z in &z_values {
            fields.push(fmt_f64(mu - z * sd));
            fields.push(fmt_f64(mu + z * sd));
        }
        writeln!(out, "{}", fields.join(",")).map_err(|source| CliError::Io {
            path: out_path.display().to_string(),
            source,
        })?;
    }
    println!("predictions for {} rows written to {}", x.nrows(), out_path.display());
    Ok(())
}

/// Dump the sigma0-vs-objective calibration curve for plotting.
pub fn cmd_calibrate_trace(config: &RunConfig) -> Result<(), CliError> {
    config.validate()?;
    if config.taus.len() != 1 {
        return Err(CliError::Argument("calibrate-trace takes a single --tau".into()));
    }
    let data = Table::read_csv(&config.data_path)?;
    let spec = load_spec(&config.spec_path)?;
    let pipeline = Pipeline::new(&data, &spec, config.fit_options())?;
    let bundle = pipeline.fit_quantile(config.taus[0])?;

    let file = std::fs::File::create(&config.out_path)
        .map_err(|source| CliError::Io { path: config.out_path.display().to_string(), source })?;
    let mut out = std::io::BufWriter::new(file);
    let write_err = |source| CliError::Io { path: config.out_path.display().to_string(), source };
    writeln!(out, "log_sigma0,sigma0,objective,converged").map_err(write_err)?;
    for p in &bundle.trace.points {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(p.log_sigma0),
            fmt_f64(p.sigma0),
            fmt_f64(p.value),
            p.converged
        )
        .map_err(write_err)?;
    }
    println!(
        "{} evaluations written to {}; selected sigma0 = {:.6} ({})",
        bundle.trace.points.len(),
        config.out_path.display(),
        bundle.trace.selected_sigma0,
        bundle.trace.method
    );
    Ok(())
}

/// The additive data-generating process of the simulation harness:
/// y = x + x^2 - z + 2 sin z + 0.1 v^3 + 3 cos v + e, e ~ gamma(3,1),
/// x ~ U(-4,4), z ~ U(-8,8), v ~ U(-4,4).
pub fn additive_gamma_truth(x: f64, z: f64, v: f64) -> f64 {
    x + x * x - z + 2.0 * z.sin() + 0.1 * v.powi(3) + 3.0 * v.cos()
}

/// Simulate one dataset from the additive gamma scenario.
pub fn simulate_additive_gamma(n: usize, seed: u64) -> (Table, Vec<f64>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma = Gamma::new(3.0, 1.0).expect("valid shape/rate");
    let mut xs = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut vs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    let mut truths = vec![0.0; n];
    for i in 0..n {
        let x: f64 = rng.gen_range(-4.0..4.0);
        let z: f64 = rng.gen_range(-8.0..8.0);
        let v: f64 = rng.gen_range(-4.0..4.0);
        let e: f64 = gamma.sample(&mut rng);
        xs[i] = x;
        zs[i] = z;
        vs[i] = v;
        truths[i] = additive_gamma_truth(x, z, v);
        ys[i] = truths[i] + e;
    }
    let mut t = Table::new();
    t.push_numeric("y", ys);
    t.push_numeric("x", xs);
    t.push_numeric("z", zs);
    t.push_numeric("v", vs);
    (t, truths)
}

/// The rank-30 additive model specification used by the harness.
pub fn additive_gamma_spec(rank: usize) -> ModelSpec {
    use crate::basis::TermSpec;
    ModelSpec {
        response: "y".into(),
        intercept: true,
        terms: vec![
            TermSpec::Smooth { var: "x".into(), k: rank },
            TermSpec::Smooth { var: "z".into(), k: rank },
            TermSpec::Smooth { var: "v".into(), k: rank },
        ],
        variance_terms: None,
    }
}

/// tau-quantile of the gamma(3,1) noise, by numeric CDF inversion.
pub fn gamma3_quantile(tau: f64) -> f64 {
    statrs::distribution::Gamma::new(3.0, 1.0)
        .expect("valid shape/rate")
        .inverse_cdf(tau)
}

/// Interval levels reported by the harness.
pub const COVERAGE_LEVELS: [f64; 3] = [0.5, 0.75, 0.95];

/// One simulation result row.
#[derive(Debug, Clone)]
pub struct SimRow {
    pub scenario: String,
    pub n: usize,
    pub replicate: u64,
    pub tau: f64,
    pub method: String,
    pub seed: u64,
    pub sigma0: f64,
    pub lambda: f64,
    pub edf: f64,
    pub rmse: f64,
    pub coverage: [f64; 3],
    pub seconds: f64,
}

/// A full simulation report: per-(replicate, tau) rows plus failures.
#[derive(Debug, Clone, Default)]
pub struct SimulationReport {
    pub rows: Vec<SimRow>,
    pub failures: Vec<(u64, f64, String)>,
}

impl SimulationReport {
    pub fn mean_rmse(&self, tau: f64) -> f64 {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.tau == tau).map(|r| r.rmse).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn sd_rmse(&self, tau: f64) -> f64 {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.tau == tau).map(|r| r.rmse).collect();
        if vals.len() < 2 {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    }

    pub fn mean_coverage(&self, tau: f64, level_idx: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.tau == tau)
            .map(|r| r.coverage[level_idx])
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Monte Carlo standard error of the per-replicate coverage mean.
    pub fn coverage_se(&self, tau: f64, level_idx: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.tau == tau)
            .map(|r| r.coverage[level_idx])
            .collect();
        if vals.len() < 2 {
            return f64::NAN;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
        (var / vals.len() as f64).sqrt()
    }
}

/// Run the simulation study: `reps` datasets of size `n`, each fitted at all
/// `taus` with the given calibration method. Replicates are a deterministic
/// parallel map with per-replicate seed `base_seed + replicate`.
pub fn run_simulation(
    scenario: &str,
    n: usize,
    reps: u64,
    taus: &[f64],
    base_seed: u64,
    method: CalibrationMethod,
    rank: usize,
) -> Result<SimulationReport, CliError> {
    if scenario != "additive_gamma" {
        return Err(CliError::UnknownScenario(scenario.to_string()));
    }
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(CliError::Argument(format!("invalid taus {taus:?}")));
    }
    let spec = additive_gamma_spec(rank);
    let method_name = match method {
        CalibrationMethod::Sandwich => "sandwich",
        CalibrationMethod::Bootstrap { .. } => "bootstrap",
        CalibrationMethod::LamlComparator => "laml",
        CalibrationMethod::Fixed { .. } => "fixed",
    };
    let z_levels: Vec<f64> = COVERAGE_LEVELS
        .iter()
        .map(|&l| statrs::distribution::Normal::standard().inverse_cdf(0.5 * (1.0 + l)))
        .collect();
    let q_noise: Vec<f64> = taus.iter().map(|&t| gamma3_quantile(t)).collect();

    type RepOut = (Vec<SimRow>, Vec<(u64, f64, String)>);
    let per_rep: Vec<RepOut> = par_map((0..reps).collect::<Vec<u64>>(), |rep| {
        let seed = base_seed + rep;
        let (data, truths) = simulate_additive_gamma(n, seed);
        let options = FitOptions {
            method,
            seed,
            ..FitOptions::default()
        };
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        let pipeline = match Pipeline::new(&data, &spec, options) {
            Ok(p) => p,
            Err(e) => {
                for &tau in taus {
                    failures.push((rep, tau, e.to_string()));
                }
                return (rows, failures);
            }
        };
        for (ti, &tau) in taus.iter().enumerate() {
            let start = std::time::Instant::now();
            match pipeline.fit_quantile(tau) {
                Ok(bundle) => {
                    let x = &pipeline.artifacts.x;
                    let xv = x * &bundle.fit.v;
                    let mut sq_err = 0.0;
                    let mut cover = [0usize; 3];
                    for i in 0..n {
                        let mu0 = truths[i] + q_noise[ti];
                        let err = bundle.fit.fitted[i] - mu0;
                        sq_err += err * err;
                        let sd = x.row(i).dot(&xv.row(i)).max(0.0).sqrt();
                        for (li, &z) in z_levels.iter().enumerate() {
                            if err.abs() <= z * sd {
                                cover[li] += 1;
                            }
                        }
                    }
                    rows.push(SimRow {
                        scenario: "additive_gamma".into(),
                        n,
                        replicate: rep,
                        tau,
                        method: method_name.into(),
                        seed,
                        sigma0: bundle.fit.sigma0,
                        lambda: bundle.fit.lambda,
                        edf: bundle.fit.edf,
                        rmse: (sq_err / n as f64).sqrt(),
                        coverage: [
                            cover[0] as f64 / n as f64,
                            cover[1] as f64 / n as f64,
                            cover[2] as f64 / n as f64,
                        ],
                        seconds: start.elapsed().as_secs_f64(),
                    });
                }
                Err(e) => failures.push((rep, tau, e.to_string())),
            }
        }
        (rows, failures)
    });

    let mut report = SimulationReport::default();
    for (rows, failures) in per_rep {
        report.rows.extend(rows);
        report.failures.extend(failures);
    }
    Ok(report)
}

/// Write the long-format simulation CSV and the aggregate table.
pub fn write_simulation_report(
    report: &SimulationReport,
    taus: &[f64],
    out_path: &Path,
) -> Result<(), CliError> {
    let write_err = |source| CliError::Io { path: out_path.display().to_string(), source };
    let file = std::fs::File::create(out_path).map_err(write_err)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(
        out,
        "scenario,n,replicate,tau,method,seed,sigma0,lambda,edf,rmse,coverage_50,coverage_75,coverage_95,seconds"
    )
    .map_err(write_err)?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.n,
            r.replicate,
            fmt_f64(r.tau),
            r.method,
            r.seed,
            fmt_f64(r.sigma0),
            fmt_f64(r.lambda),
            fmt_f64(r.edf),
            fmt_f64(r.rmse),
            fmt_f64(r.coverage[0]),
            fmt_f64(r.coverage[1]),
            fmt_f64(r.coverage[2]),
            fmt_f64(r.seconds)
        )
        .map_err(write_err)?;
    }
    drop(out);

    // Aggregate table, one row per tau: mean (sd) RMSE and mean coverage.
    let agg_path = out_path.with_extension("aggregate.csv");
    let agg_err = |source| CliError::Io { path: agg_path.display().to_string(), source };
    let file = std::fs::File::create(&agg_path).map_err(agg_err)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(
        out,
        "tau,method,replicates,mean_rmse,sd_rmse,mean_coverage_50,mean_coverage_75,mean_coverage_95"
    )
    .map_err(agg_err)?;
    for &tau in taus {
        let count = report.rows.iter().filter(|r| r.tau == tau).count();
        if count == 0 {
            continue;
        }
        let method = &report.rows.iter().find(|r| r.tau == tau).unwrap().method;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(tau),
            method,
            count,
            fmt_f64(report.mean_rmse(tau)),
            fmt_f64(report.sd_rmse(tau)),
            fmt_f64(report.mean_coverage(tau, 0)),
            fmt_f64(report.mean_coverage(tau, 1)),
            fmt_f64(report.mean_coverage(tau, 2))
        )
        .map_err(agg_err)?;
    }
    Ok(())
}

/// Run and persist a simulation study, printing the aggregate table.
#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    scenario: &str,
    n: usize,
    reps: u64,
    taus: &[f64],
    seed: u64,
    method: CalibrationMethod,
    rank: usize,
    out_path: &Path,
) -> Result<(), CliError> {
    let report = run_simulation(scenario, n, reps, taus, seed, method, rank)?;
    write_simulation_report(&report, taus, out_path)?;
    println!(
        "{} fits over {} replicates; {} failures; report at {} (+ .aggregate.csv)",
        report.rows.len(),
        reps,
        report.failures.len(),
        out_path.display()
    );
    println!("tau      mean_rmse (sd)      cov50  cov75  cov95");
    for &tau in taus {
        if report.rows.iter().all(|r| r.tau != tau) {
            println!("{tau:<8} all replicates failed");
            continue;
        }
        println!(
            "{tau:<8} {:.4} ({:.4})     {:.3}  {:.3}  {:.3}",
            report.mean_rmse(tau),
            report.sd_rmse(tau),
            report.mean_coverage(tau, 0),
            report.mean_coverage(tau, 1),
            report.mean_coverage(tau, 2)
        );
    }
    for (rep, tau, msg) in report.failures.iter().take(5) {
        eprintln!("failure (replicate {rep}, tau {tau}): {msg}");
    }
    if !report.failures.is_empty() {
        return Err(CliError::SimulationFailures {
            failed: report.failures.len(),
            total: (reps as usize) * taus.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma3_quantiles_match_closed_form_cdf() {
        // Independent oracle: the gamma(3,1) CDF has the closed form
        // 1 - exp(-x)(1 + x + x^2/2); invert it by bisection.
        let cdf = |x: f64| 1.0 - (-x).exp() * (1.0 + x + 0.5 * x * x);
        for &tau in &[0.01, 0.05, 0.5, 0.95, 0.99] {
            let (mut lo, mut hi) = (0.0, 60.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < tau {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle = 0.5 * (lo + hi);
            let got = gamma3_quantile(tau);
            assert!(
                (got - oracle).abs() < 1e-7,
                "tau {tau}: statrs {got} vs closed-form {oracle}"
            );
        }
        assert!((gamma3_quantile(0.5) - 2.674060313723560).abs() < 1e-9);
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let (t1, u1) = simulate_additive_gamma(50, 42);
        let (t2, u2) = simulate_additive_gamma(50, 42);
        assert_eq!(u1, u2);
        assert_eq!(t1.numeric("y").unwrap(), t2.numeric("y").unwrap());
        let (t3, _) = simulate_additive_gamma(50, 43);
        assert_ne!(t1.numeric("y").unwrap(), t3.numeric("y").unwrap());
    }

    #[test]
    fn degenerate_interval_levels_rejected() {
        assert!(check_levels(&[0.5, 0.95]).is_ok());
        assert!(check_levels(&[0.0]).is_err());
        assert!(check_levels(&[1.0]).is_err());
    }

    #[test]
    fn model_file_rejects_unknown_major_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"schema_version":"2.0"}"#).unwrap();
        match ModelFile::load(&path) {
            Err(CliError::SchemaVersion { found, .. }) => assert_eq!(found, "2.0"),
            other => panic!("expected schema version error, got {other:?}"),
        }
    }
}
