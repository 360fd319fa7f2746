use elfqr::basis::{ModelSpec, TermSpec};
use elfqr::calibrate::{CalibrationMethod, FitOptions, Pipeline};
use elfqr::data::Table;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let k: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let gamma = Gamma::new(3.0, 1.0).unwrap();
    let mut xs = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut vs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    for i in 0..n {
        let x: f64 = rng.gen_range(-4.0..4.0);
        let z: f64 = rng.gen_range(-8.0..8.0);
        let v: f64 = rng.gen_range(-4.0..4.0);
        let e: f64 = gamma.sample(&mut rng);
        xs[i] = x; zs[i] = z; vs[i] = v;
        ys[i] = x + x * x - z + 2.0 * z.sin() + 0.1 * v.powi(3) + 3.0 * v.cos() + e;
    }
    let mut t = Table::new();
    t.push_numeric("y", ys);
    t.push_numeric("x", xs.clone());
    t.push_numeric("z", zs.clone());
    t.push_numeric("v", vs.clone());
    let spec = ModelSpec {
        response: "y".into(),
        intercept: true,
        terms: vec![
            TermSpec::Smooth { var: "x".into(), k },
            TermSpec::Smooth { var: "z".into(), k },
            TermSpec::Smooth { var: "v".into(), k },
        ],
        variance_terms: None,
    };
    let opts = FitOptions { method: CalibrationMethod::Sandwich, ..Default::default() };
    let pipe = Pipeline::new(&t, &spec, opts).unwrap();
    let t0 = Instant::now();
    match pipe.fit_quantile(0.5) {
        Ok(b) => {
            // RMSE against the true median curve
            let med = 2.674060313723560;
            let rmse = (0..n)
                .map(|i| {
                    let truth = xs[i] + xs[i] * xs[i] - zs[i] + 2.0 * zs[i].sin()
                        + 0.1 * vs[i].powi(3) + 3.0 * vs[i].cos() + med;
                    (b.fit.fitted[i] - truth).powi(2)
                })
                .sum::<f64>() / n as f64;
            println!(
                "ok in {:.2?}: sigma0={:.4} lambda={:.4} edf={:.2} ess={:.1} evals={} rmse={:.4}",
                t0.elapsed(), b.fit.sigma0, b.fit.lambda, b.fit.edf, b.fit.ess,
                b.trace.points.len(), rmse.sqrt()
            );
            for w in &b.fit.warnings { println!("warning: {w}"); }
        }
        Err(e) => println!("FAILED after {:.2?}: {e}", t0.elapsed()),
    }
}
