//! The Extended Log-F (ELF) loss/density family.
//!
//! The ELF loss is a smooth generalisation of the pinball loss,
//!
//! ```text
//! lo(y - mu) = (tau - 1) (y - mu) / sigma + lambda log(1 + exp{(y - mu) / (lambda sigma)}),
//! ```
//!
//! whose normalised exponential is an extension of the log-F density. This
//! module provides the loss, the log-density, every pure and mixed mu/sigma
//! derivative of the log-density up to fourth order, the saturated loss, the
//! deviance, and the working weight/response pair used by the penalised IRLS
//! solver.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("tau must lie strictly in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("Beta({0}, {1}) is not finite; lambda*tau or lambda*(1-tau) underflowed")]
    DegenerateBeta(f64, f64),
}

/// Parameters of one ELF loss instance: quantile level `tau`, loss smoothness
/// `lambda`, and observation scale `sigma` (= sigma0 * sigma_tilde(x)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElfParams {
    pub tau: f64,
    pub lambda: f64,
    pub sigma: f64,
}

impl ElfParams {
    pub fn new(tau: f64, lambda: f64, sigma: f64) -> Result<Self, ElfError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(ElfError::InvalidTau(tau));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ElfError::InvalidLambda(lambda));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ElfError::InvalidSigma(sigma));
        }
        Ok(Self { tau, lambda, sigma })
    }

    /// Bandwidth of the loss, h = lambda * sigma.
    pub fn bandwidth(&self) -> f64 {
        self.lambda * self.sigma
    }
}

/// `log(1 + exp(z))`, switching to the `z + exp(-z)` branch for z > 18 to
/// avoid overflow (Maechler's rule).
pub fn log1pexp(z: f64) -> f64 {
    if z > 18.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

/// The pinball (check) loss: (tau - 1) z for z < 0, tau z for z >= 0.
pub fn pinball_loss(z: f64, tau: f64) -> f64 {
    if z < 0.0 {
        (tau - 1.0) * z
    } else {
        tau * z
    }
}

/// The ELF loss of observation `y` at location `mu`.
///
/// Converges pointwise to `pinball_loss((y - mu) / sigma, tau)` as
/// lambda -> 0; the sup-norm gap of the rescaled loss is lambda*sigma*log(2).
pub fn elf_loss(y: f64, mu: f64, p: &ElfParams) -> f64 {
    let u = y - mu;
    (p.tau - 1.0) * u / p.sigma + p.lambda * log1pexp(u / (p.lambda * p.sigma))
}

/// log Beta(a, b) via log-gamma differences; stable for tiny arguments.
pub(crate) fn log_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log of the ELF density: `-elf_loss - log(lambda sigma Beta{lambda(1-tau), lambda tau})`.
pub fn elf_logpdf(y: f64, mu: f64, p: &ElfParams) -> Result<f64, ElfError> {
    let a = p.lambda * (1.0 - p.tau);
    let b = p.lambda * p.tau;
    if a <= 0.0 || b <= 0.0 {
        return Err(ElfError::DegenerateBeta(a, b));
    }
    let log_norm = (p.lambda * p.sigma).ln() + log_beta(a, b);
    if !log_norm.is_finite() {
        return Err(ElfError::DegenerateBeta(a, b));
    }
    Ok(-elf_loss(y, mu, p) - log_norm)
}

/// All pure and mixed mu/sigma derivatives of the ELF log-density up to
/// fourth order. Fields above the requested order are left at zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ElfDerivatives {
    /// Log-density value.
    pub ll: f64,
    pub d_mu: f64,
    pub d_mu2: f64,
    pub d_mu3: f64,
    pub d_mu4: f64,
    pub d_sigma: f64,
    pub d_sigma2: f64,
    pub d_sigma3: f64,
    pub d_sigma4: f64,
    pub d_mu_sigma: f64,
    pub d_mu2_sigma: f64,
    pub d_mu3_sigma: f64,
    pub d_mu_sigma2: f64,
    pub d_mu2_sigma2: f64,
    pub d_mu_sigma3: f64,
}

/// Sigmoid Phi(z) = 1 / (1 + exp(-z)) and its first three derivatives.
///
/// Phi' = Phi(1-Phi), Phi'' = Phi' - 2 Phi' Phi,
/// Phi''' = Phi'' - 2 Phi'' Phi - 2 Phi'^2, with 1-Phi(z) evaluated as
/// Phi(-z) so the tails stay accurate instead of cancelling to zero.
fn sigmoid_derivs(z: f64) -> (f64, f64, f64, f64) {
    let phi = 1.0 / (1.0 + (-z).exp());
    let phi_neg = 1.0 / (1.0 + z.exp());
    let p1 = phi * phi_neg;
    let one_minus_two_phi = phi_neg - phi;
    let p2 = p1 * one_minus_two_phi;
    let p3 = p1 * (one_minus_two_phi * one_minus_two_phi - 2.0 * p1);
    (phi, p1, p2, p3)
}

/// Evaluate the ELF log-density and its derivatives up to `max_order` in {1,..,4}.
pub fn elf_derivatives(y: f64, mu: f64, p: &ElfParams, max_order: usize) -> ElfDerivatives {
    assert!((1..=4).contains(&max_order), "max_order must be in 1..=4");
    let (tau, lam, sig) = (p.tau, p.lambda, p.sigma);
    let u = y - mu;
    let h = lam * sig;
    let z = u / h;
    let (phi_z, p1, p2, p3) = sigmoid_derivs(z);
    // Logistic pdf at y with location mu and scale lambda*sigma.
    let pdf = p1 / h;

    let mut d = ElfDerivatives {
        ll: -elf_loss(y, mu, p) - (h.ln() + log_beta(lam * (1.0 - tau), lam * tau)),
        ..Default::default()
    };

    d.d_mu = (phi_z - 1.0 + tau) / sig;
    d.d_sigma = u / (sig * sig) * (phi_z - 1.0 + tau) - 1.0 / sig;
    if max_order < 2 {
        return d;
    }

    d.d_mu2 = -pdf / sig;
    d.d_sigma2 =
        2.0 * u / sig.powi(3) * (1.0 - tau - phi_z - 0.5 * u * pdf) + 1.0 / (sig * sig);
    d.d_mu_sigma = -(u * pdf + phi_z - 1.0 + tau) / (sig * sig);
    if max_order < 3 {
        return d;
    }

    d.d_mu3 = p2 / (lam * lam * sig.powi(3));
    // Written with the 1/(lam z^2) term expanded so z = 0 stays finite.
    d.d_sigma3 = -3.0 / sig * d.d_sigma2
        + lam * z * z / sig.powi(3) * (3.0 * p1 + z * p2)
        + 1.0 / sig.powi(3);
    d.d_mu2_sigma = (z * p2 + 2.0 * p1) / (lam * sig.powi(3));
    d.d_mu_sigma2 =
        (2.0 * (phi_z - 1.0 + tau) + 4.0 * z * p1 + z * z * p2) / sig.powi(3);
    if max_order < 4 {
        return d;
    }

    d.d_mu4 = -p3 / (lam.powi(3) * sig.powi(4));
    d.d_sigma4 = -4.0 / sig * (2.0 * d.d_sigma3 + 3.0 / sig * d.d_sigma2)
        - lam * z.powi(3) / sig.powi(4) * (4.0 * p2 + z * p3)
        + 2.0 / sig.powi(4);
    d.d_mu3_sigma = -(z * p3 + 3.0 * p2) / (lam * lam * sig.powi(4));
    d.d_mu2_sigma2 = -(z * z * p3 + 6.0 * z * p2 + 6.0 * p1) / (lam * sig.powi(4));
    d.d_mu_sigma3 = -3.0 / sig * d.d_mu_sigma2
        - z / sig.powi(4) * (6.0 * p1 + 6.0 * z * p2 + z * z * p3);
    d
}

/// Loss value and its first three mu-derivatives in one pass, sharing the
/// sigmoid evaluations. Used by the inner solver where this is the hot path.
pub(crate) fn loss_mu_derivs(y: f64, mu: f64, p: &ElfParams) -> (f64, f64, f64, f64) {
    let u = y - mu;
    let h = p.lambda * p.sigma;
    let z = u / h;
    let (phi, p1, p2, _) = sigmoid_derivs(z);
    let lo = (p.tau - 1.0) * u / p.sigma + p.lambda * log1pexp(z);
    let g = -(phi - 1.0 + p.tau) / p.sigma;
    let w = p1 / (h * p.sigma);
    let dw = -p2 / (p.lambda * p.lambda * p.sigma.powi(3));
    (lo, g, w, dw)
}

/// The saturated loss: the per-observation minimum of the ELF loss over mu,
/// `-(1-tau) lambda log(1-tau) - lambda tau log(tau)`.
pub fn saturated_loss(tau: f64, lambda: f64) -> f64 {
    -(1.0 - tau) * lambda * (1.0 - tau).ln() - lambda * tau * tau.ln()
}

/// The minimising location of the ELF loss: `mu_hat = lambda sigma log{tau/(1-tau)} + y`.
pub fn saturated_mu(y: f64, p: &ElfParams) -> f64 {
    p.lambda * p.sigma * (p.tau / (1.0 - p.tau)).ln() + y
}

/// Per-observation deviance `2 [elf_loss - saturated_loss]`; nonnegative and
/// zero only at the saturating mu.
pub fn deviance(y: f64, mu: f64, p: &ElfParams) -> f64 {
    2.0 * (elf_loss(y, mu, p) - saturated_loss(p.tau, p.lambda))
}

/// Working weight and response for penalised IRLS:
/// `w = 0.5 d2Dev/dmu2`, `z = mu - dDev/dmu / (2w)`.
///
/// `w` is strictly positive but can underflow to zero in the far tails;
/// callers must tolerate tiny weights (see the stabilised solver in `fit`).
pub fn pirls_terms(y: f64, mu: f64, p: &ElfParams) -> (f64, f64) {
    let d = elf_derivatives(y, mu, p, 2);
    let w = -d.d_mu2;
    let g = -d.d_mu; // d(loss)/d(mu)
    (w, mu - g / w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn log1pexp_examples() {
        assert_relative_eq!(log1pexp(0.0), std::f64::consts::LN_2, max_relative = 1e-15);
        assert_eq!(log1pexp(1000.0), 1000.0);
        // Frozen extended-precision value of log(1 + e^18.5).
        assert_relative_eq!(log1pexp(18.5), 18.50000000923744961931, max_relative = 1e-12);
    }

    #[test]
    fn log1pexp_monotone_across_branch() {
        let mut prev = f64::NEG_INFINITY;
        let mut z = -40.0;
        while z <= 40.0 {
            let v = log1pexp(z);
            assert!(v >= prev, "non-monotone at z={z}");
            prev = v;
            z += 1e-3;
        }
    }

    #[test]
    fn pinball_examples() {
        assert_relative_eq!(pinball_loss(-2.0, 0.9), 0.2, max_relative = 1e-14);
        assert_relative_eq!(pinball_loss(3.0, 0.5), 1.5);
        assert_eq!(pinball_loss(0.0, 0.1), 0.0);
    }

    #[test]
    fn elf_loss_examples() {
        let p = ElfParams::new(0.5, 1.0, 1.0).unwrap();
        assert_relative_eq!(elf_loss(2.0, 2.0, &p), std::f64::consts::LN_2, max_relative = 1e-15);

        // Pinball limit at small lambda.
        let p = ElfParams::new(0.5, 0.01, 1.0).unwrap();
        assert!((elf_loss(5.0, 0.0, &p) - 2.5).abs() < 1e-6);

        // Frozen extended-precision evaluation of the loss.
        let p = ElfParams::new(0.9, 0.5, 2.0).unwrap();
        assert_relative_eq!(elf_loss(1.0, 0.0, &p), 0.6066308437591114, max_relative = 1e-12);
    }

    #[test]
    fn pinball_gap_is_lambda_sigma_log2() {
        // sup over z of |sigma*elf_loss - pinball| = lambda*sigma*log(2), at z = 0.
        for &(lam, sig) in &[(0.3, 1.0), (1.0, 2.0), (0.05, 0.7)] {
            let p = ElfParams::new(0.35, lam, sig).unwrap();
            let mut sup: f64 = 0.0;
            for i in -4000..=4000 {
                let u = i as f64 * 0.01;
                let gap = (sig * elf_loss(u, 0.0, &p) - pinball_loss(u, p.tau)).abs();
                sup = sup.max(gap);
            }
            assert_relative_eq!(sup, lam * sig * std::f64::consts::LN_2, max_relative = 1e-12);
        }
    }

    #[test]
    fn logpdf_closed_form_and_mode() {
        // lambda=1, tau=0.5, sigma=1, y=mu: Beta(0.5,0.5) = pi, loss = log 2.
        let p = ElfParams::new(0.5, 1.0, 1.0).unwrap();
        let v = elf_logpdf(0.0, 0.0, &p).unwrap();
        assert_relative_eq!(v, -1.8378770664093453, max_relative = 1e-14);

        // The saturating mu maximises the loss over mu at fixed y; read in
        // reverse, the density mode over y sits where saturated_mu(y) = mu,
        // i.e. at mu - lambda*sigma*log(tau/(1-tau)).
        let p = ElfParams::new(0.8, 0.7, 1.3).unwrap();
        let mu = 2.0;
        let argmax = mu - p.lambda * p.sigma * (p.tau / (1.0 - p.tau)).ln();
        assert_relative_eq!(saturated_mu(argmax, &p), mu, max_relative = 1e-14);
        let at = |y: f64| elf_logpdf(y, mu, &p).unwrap();
        assert!(at(argmax) > at(argmax + 1e-4));
        assert!(at(argmax) > at(argmax - 1e-4));
        // Scan confirms it is the global maximum on a wide grid.
        let best = (-4000..4000)
            .map(|i| mu + i as f64 * 1e-3)
            .max_by(|a, b| at(*a).partial_cmp(&at(*b)).unwrap())
            .unwrap();
        assert!((best - argmax).abs() < 2e-3);
    }

    #[test]
    fn logpdf_normalises_by_quadrature() {
        let p = ElfParams::new(0.5, 1.0, 1.0).unwrap();
        let f = |y: f64| elf_logpdf(y, 0.0, &p).unwrap().exp();
        let mass = crate::optim::adaptive_simpson(&f, -120.0, 120.0, 1e-10, 40);
        assert!((mass - 1.0).abs() < 1e-6, "mass = {mass}");
    }

    #[test]
    fn derivative_special_values() {
        let p = ElfParams::new(0.3, 0.8, 1.7).unwrap();
        let d = elf_derivatives(1.0, 1.0, &p, 2);
        assert_relative_eq!(d.d_mu, (p.tau - 0.5) / p.sigma, max_relative = 1e-14);
        assert!(d.d_mu2 < 0.0);

        // d_mu lies strictly in ((tau-1)/sigma, tau/sigma).
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let y = rng.gen_range(-8.0..8.0);
            let d = elf_derivatives(y, 0.4, &p, 2);
            assert!(d.d_mu > (p.tau - 1.0) / p.sigma && d.d_mu < p.tau / p.sigma);
            assert!(d.d_mu2 < 0.0);
        }
    }

    /// Central finite difference of a scalar function.
    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        // Each order-k derivative is checked against a central difference of
        // the analytic order-(k-1) derivative, anchored at the log-density.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..300 {
            let tau = rng.gen_range(0.05..0.95);
            let lam = rng.gen_range(0.05..2.0);
            let sig = rng.gen_range(0.3..3.0);
            let mu = rng.gen_range(-2.0..2.0);
            let y = mu + rng.gen_range(-4.0..4.0) * lam * sig;
            let p = ElfParams { tau, lambda: lam, sigma: sig };
            let d = elf_derivatives(y, mu, &p, 4);
            let eps = f64::EPSILON;

            let get = |m: f64, s: f64| {
                elf_derivatives(y, m, &ElfParams { tau, lambda: lam, sigma: s }, 4)
            };
            let h1 = eps.powf(1.0 / 3.0) * (1.0 + mu.abs());
            let hs = eps.powf(1.0 / 3.0) * (1.0 + sig.abs());
            let checks: Vec<(f64, f64)> = vec![
                (d.d_mu, fd(|m| get(m, sig).ll, mu, h1)),
                (d.d_sigma, fd(|s| get(mu, s).ll, sig, hs)),
                (d.d_mu2, fd(|m| get(m, sig).d_mu, mu, h1)),
                (d.d_sigma2, fd(|s| get(mu, s).d_sigma, sig, hs)),
                (d.d_mu_sigma, fd(|s| get(mu, s).d_mu, sig, hs)),
                (d.d_mu3, fd(|m| get(m, sig).d_mu2, mu, h1)),
                (d.d_sigma3, fd(|s| get(mu, s).d_sigma2, sig, hs)),
                (d.d_mu2_sigma, fd(|s| get(mu, s).d_mu2, sig, hs)),
                (d.d_mu_sigma2, fd(|s| get(mu, s).d_mu_sigma, sig, hs)),
                (d.d_mu4, fd(|m| get(m, sig).d_mu3, mu, h1)),
                (d.d_sigma4, fd(|s| get(mu, s).d_sigma3, sig, hs)),
                (d.d_mu3_sigma, fd(|s| get(mu, s).d_mu3, sig, hs)),
                (d.d_mu2_sigma2, fd(|s| get(mu, s).d_mu2_sigma, sig, hs)),
                (d.d_mu_sigma3, fd(|s| get(mu, s).d_mu_sigma2, sig, hs)),
            ];
            for (k, (analytic, numeric)) in checks.iter().enumerate() {
                let scale = analytic.abs().max(1e-4);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-5,
                    "derivative {k}: analytic {analytic} vs fd {numeric} \
                     (tau={tau}, lam={lam}, sig={sig}, y={y}, mu={mu})"
                );
            }
        }
    }

    #[test]
    fn saturated_loss_examples() {
        assert_relative_eq!(saturated_loss(0.5, 1.0), std::f64::consts::LN_2, max_relative = 1e-15);
        let p = ElfParams::new(0.9, 0.1, 2.0).unwrap();
        assert_relative_eq!(saturated_mu(0.0, &p), 0.43944491546724387, max_relative = 1e-14);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = ElfParams {
                tau: rng.gen_range(0.05..0.95),
                lambda: rng.gen_range(0.05..2.0),
                sigma: rng.gen_range(0.2..3.0),
            };
            let y = rng.gen_range(-5.0..5.0);
            let mu_hat = saturated_mu(y, &p);
            assert_relative_eq!(
                elf_loss(y, mu_hat, &p),
                saturated_loss(p.tau, p.lambda),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn deviance_properties() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = ElfParams {
                tau: rng.gen_range(0.05..0.95),
                lambda: rng.gen_range(0.05..2.0),
                sigma: rng.gen_range(0.2..3.0),
            };
            let y = rng.gen_range(-5.0..5.0);
            let mu = rng.gen_range(-5.0..5.0);
            let dev = deviance(y, mu, &p);
            assert!(dev >= 0.0);
            let composed = 2.0 * (elf_loss(y, mu, &p) - saturated_loss(p.tau, p.lambda));
            assert_relative_eq!(dev, composed, max_relative = 1e-12);
            assert!(deviance(y, saturated_mu(y, &p), &p).abs() < 1e-12);
        }
    }

    #[test]
    fn pirls_terms_properties() {
        let p = ElfParams::new(0.7, 0.4, 1.5).unwrap();
        // At y = mu the weight is the logistic density at zero over sigma.
        let (w, _) = pirls_terms(2.0, 2.0, &p);
        assert_relative_eq!(w, 1.0 / (4.0 * p.lambda * p.sigma * p.sigma), max_relative = 1e-12);

        // Weights decay monotonically to zero in the far tail.
        let mut prev = w;
        for k in 1..40 {
            let (wk, _) = pirls_terms(2.0 + k as f64, 2.0, &p);
            assert!(wk < prev);
            prev = wk;
        }
        assert!(prev < 1e-6);

        // z is the Newton step on the deviance: mu_new = mu - Dev'/Dev''.
        let (y, mu) = (3.1, 1.4);
        let (w, z) = pirls_terms(y, mu, &p);
        let d = elf_derivatives(y, mu, &p, 2);
        let newton = mu - (-d.d_mu) / (-d.d_mu2);
        assert_relative_eq!(z, newton, max_relative = 1e-12);
        assert!(w > 0.0);
    }
}
