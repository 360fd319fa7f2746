use elfqr::basis::{ModelSpec, TermSpec};
use elfqr::calibrate::{CalibrationMethod, FitOptions, Pipeline};
use elfqr::data::Table;
use elfqr::parallel::par_map;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use std::time::Instant;

fn truth(x: f64, z: f64, v: f64) -> f64 {
    x + x * x - z + 2.0 * z.sin() + 0.1 * v.powi(3) + 3.0 * v.cos()
}

fn main() {
    let n = 1000usize;
    let reps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let tau: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let q_gamma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2.674060313723560);
    let t0 = Instant::now();
    let rmses: Vec<f64> = par_map((0..reps).collect(), |rep| {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + rep);
        let gamma = Gamma::new(3.0, 1.0).unwrap();
        let mut cols = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let z: f64 = rng.gen_range(-8.0..8.0);
            let v: f64 = rng.gen_range(-4.0..4.0);
            let e: f64 = gamma.sample(&mut rng);
            cols.0[i] = x; cols.1[i] = z; cols.2[i] = v;
            cols.3[i] = truth(x, z, v) + e;
        }
        let mut t = Table::new();
        t.push_numeric("y", cols.3.clone());
        t.push_numeric("x", cols.0.clone());
        t.push_numeric("z", cols.1.clone());
        t.push_numeric("v", cols.2.clone());
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![
                TermSpec::Smooth { var: "x".into(), k: 30 },
                TermSpec::Smooth { var: "z".into(), k: 30 },
                TermSpec::Smooth { var: "v".into(), k: 30 },
            ],
            variance_terms: None,
        };
        let opts = FitOptions { method: CalibrationMethod::Sandwich, ..Default::default() };
        let pipe = Pipeline::new(&t, &spec, opts).unwrap();
        match pipe.fit_quantile(tau) {
            Ok(b) => {
                let rmse = ((0..n)
                    .map(|i| (b.fit.fitted[i] - (truth(cols.0[i], cols.1[i], cols.2[i]) + q_gamma)).powi(2))
                    .sum::<f64>() / n as f64).sqrt();
                let xmat = &pipe.artifacts.x;
                let xv = xmat * &b.fit.v;
                let mut cover = 0usize;
                for i in 0..n {
                    let sd = xmat.row(i).dot(&xv.row(i)).max(0.0).sqrt();
                    let mu0 = truth(cols.0[i], cols.1[i], cols.2[i]) + q_gamma;
                    if (b.fit.fitted[i] - mu0).abs() <= 1.959963984540054 * sd { cover += 1; }
                }
                println!("rep {rep}: sigma0={:.4} edf={:.1} rmse={rmse:.4} cov95={:.3}", b.fit.sigma0, b.fit.edf, cover as f64 / n as f64);
                rmse
            }
            Err(e) => { println!("rep {rep}: FAILED {e}"); f64::NAN }
        }
    });
    let ok: Vec<f64> = rmses.iter().copied().filter(|r| r.is_finite()).collect();
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    println!("tau={tau} mean rmse over {} reps: {mean:.4}  ({:.1?})", ok.len(), t0.elapsed());
}
