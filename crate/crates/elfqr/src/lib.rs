//! Additive quantile regression with the smoothed Extended Log-F (ELF) loss.
//!
//! The crate fits additive quantile models by penalised regression splines:
//! coefficients by stabilised penalised IRLS, smoothing parameters by Newton
//! minimisation of a Laplace-approximate marginal loss, the loss bandwidth by
//! an asymptotically optimal plug-in rule, and the learning-rate scale by
//! sandwich-covariance or bootstrap IKL calibration, yielding point estimates
//! and calibrated credible intervals for conditional quantiles.

pub mod bandwidth;
pub mod basis;
pub mod calibrate;
pub mod data;
pub mod elf;
pub mod fit;
pub mod optim;
pub mod parallel;
pub mod sinh_arcsinh;
