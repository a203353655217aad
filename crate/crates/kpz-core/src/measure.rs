use crate::error::{Error, Result};
use crate::field::SlopeField;
use crate::params::ModelParameters;
use crate::rng::SeedSpec;
use crate::sde;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Draw an exact sample of the stationary measure: i.i.d. Gaussians with
/// mean `rho` and variance `1/(2 alpha)`.
pub fn sample_stationary(p: &ModelParameters, seed: SeedSpec) -> Result<SlopeField> {
    let mut rng = seed.rng();
    let sd = p.chi().sqrt();
    let values = (0..p.ring_size)
        .map(|_| p.rho + sd * StandardNormal.sample(&mut rng))
        .collect();
    SlopeField::new(values)
}

/// Aggregates from one ensemble evolved to `t_test` at a fixed step size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityRun {
    pub dt: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub current_mean: f64,
    pub current_se: f64,
    pub cdf_distance: f64,
    pub blowup_rate: f64,
    pub replicas: usize,
}

/// Stationarity check: coarse run at `dt`, fine run at `dt/2` for the
/// measured discretization allowance, plus the Kolmogorov distance of the
/// single-site marginal from the target Gaussian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityReport {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub cdf_distance: f64,
    pub cdf_threshold: f64,
    pub current_mean: f64,
    pub current_se: f64,
    pub current_theory: f64,
    pub blowup_rate: f64,
    pub t_test: f64,
    pub replicas: usize,
    pub coarse: StationarityRun,
    pub fine: StationarityRun,
    /// Measured O(dt) allowances, `|coarse - fine|` per quantity.
    pub mean_allowance: f64,
    pub variance_allowance: f64,
    pub current_allowance: f64,
}

const MAX_BLOWUP_RETRIES: usize = 4;

fn run_ensemble(
    p: &ModelParameters,
    t_test: f64,
    dt: f64,
    replicas: usize,
    seed: SeedSpec,
    salt: u64,
) -> Result<(StationarityRun, Vec<f64>)> {
    let n = p.ring_size;
    let chunk = 64usize;
    let nchunks = replicas.div_ceil(chunk);
    struct Partial {
        means: Vec<f64>,
        vars: Vec<f64>,
        currents: Vec<f64>,
        finals: Vec<f64>,
        blowups: usize,
    }
    let partials: Vec<Result<Partial>> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(replicas);
            let mut pt = Partial {
                means: Vec::new(),
                vars: Vec::new(),
                currents: Vec::new(),
                finals: Vec::with_capacity((hi - lo) * n),
                blowups: 0,
            };
            for r in lo..hi {
                let mut attempt = 0usize;
                let field = loop {
                    let base = salt
                        .wrapping_mul(1_000_000_007)
                        .wrapping_add(2 * (r as u64 + (attempt as u64) * replicas as u64));
                    let u0 = sample_stationary(p, seed.stream(base))?;
                    match sde::evolve(&u0, t_test, dt, &[t_test], seed.stream(base + 1), p) {
                        Ok(tr) => break tr.checkpoints.into_iter().next_back().unwrap().1,
                        Err(Error::BlowUp { .. }) => {
                            pt.blowups += 1;
                            attempt += 1;
                            if attempt > MAX_BLOWUP_RETRIES {
                                return Err(Error::InvalidInput(format!(
                                    "replica {r} blew up {attempt} times in a row"
                                )));
                            }
                        }
                        Err(e) => return Err(e),
                    }
                };
                let vals = field.values();
                let m = field.mean();
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / (n as f64 - 1.0);
                let w = sde::current(&field, p)?;
                pt.means.push(m);
                pt.vars.push(var);
                pt.currents.push(w.iter().sum::<f64>() / n as f64);
                pt.finals.extend_from_slice(vals);
            }
            Ok(pt)
        })
        .collect();

    let mut means = Vec::with_capacity(replicas);
    let mut vars = Vec::with_capacity(replicas);
    let mut currents = Vec::with_capacity(replicas);
    let mut finals = Vec::with_capacity(replicas * n);
    let mut blowups = 0usize;
    for pres in partials {
        let pt = pres?;
        means.extend(pt.means);
        vars.extend(pt.vars);
        currents.extend(pt.currents);
        finals.extend(pt.finals);
        blowups += pt.blowups;
    }

    let (mean, mean_se) = mean_and_se(&means);
    let (variance, variance_se) = mean_and_se(&vars);
    let (current_mean, current_se) = mean_and_se(&currents);
    let cdf_distance = kolmogorov_distance(&mut finals, p.rho, p.chi().sqrt());
    Ok((
        StationarityRun {
            dt,
            mean,
            mean_se,
            variance,
            variance_se,
            current_mean,
            current_se,
            cdf_distance,
            blowup_rate: blowups as f64 / (replicas + blowups) as f64,
            replicas,
        },
        finals,
    ))
}

/// Evolve `replicas` exact stationary samples to `t_test` and compare the
/// single-site statistics against the invariant-measure values. A second
/// ensemble at `dt/2` (coupled streams) measures the discretization bias.
pub fn stationarity_report(
    p: &ModelParameters,
    t_test: f64,
    dt: f64,
    replicas: usize,
    seed: SeedSpec,
    cdf_level: f64,
) -> Result<StationarityReport> {
    if replicas < 100 {
        return Err(Error::TooFewReplicas {
            got: replicas,
            need: 100,
        });
    }
    let (coarse, finals) = run_ensemble(p, t_test, dt, replicas, seed, 1)?;
    let (fine, _) = run_ensemble(p, t_test, dt / 2.0, replicas, seed, 2)?;
    let cdf_threshold = kolmogorov_threshold(cdf_level, finals.len());
    Ok(StationarityReport {
        mean: coarse.mean,
        mean_se: coarse.mean_se,
        variance: coarse.variance,
        variance_se: coarse.variance_se,
        cdf_distance: coarse.cdf_distance,
        cdf_threshold,
        current_mean: coarse.current_mean,
        current_se: coarse.current_se,
        current_theory: p.mean_current_theory(),
        blowup_rate: coarse.blowup_rate,
        t_test,
        replicas,
        mean_allowance: (coarse.mean - fine.mean).abs(),
        variance_allowance: (coarse.variance - fine.variance).abs(),
        current_allowance: (coarse.current_mean - fine.current_mean).abs(),
        coarse,
        fine,
    })
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Kolmogorov statistic of `xs` against Normal(mu, sd). Sorts in place.
pub fn kolmogorov_distance(xs: &mut [f64], mu: f64, sd: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(mu, sd).expect("valid normal");
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - f).abs());
    }
    d
}

/// Asymptotic two-sided Kolmogorov acceptance threshold at significance
/// `level` for `n` samples: `K/sqrt(n)` with `2 exp(-2 K^2) = level`.
pub fn kolmogorov_threshold(level: f64, n: usize) -> f64 {
    ((2.0 / level).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stationary_sample_moments() {
        // 10^6 sites: mean within 3 sqrt(chi/10^6), variance within 1%
        let p = ModelParameters::new(0.0, 1.0, 2.0, 0.3, 1_000_000).unwrap();
        let f = sample_stationary(&p, SeedSpec::new(42, 0)).unwrap();
        let chi = p.chi();
        let m = f.mean();
        assert!(
            (m - 0.3).abs() < 3.0 * (chi / 1e6).sqrt(),
            "mean {m} too far from 0.3"
        );
        let var =
            f.values().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (1e6 - 1.0);
        assert!((var / chi - 1.0).abs() < 0.01, "variance {var} vs chi {chi}");
    }

    #[test]
    fn stationary_sample_deterministic() {
        let p = ModelParameters::new(1.0, 1.0, 1.0, 0.0, 64).unwrap();
        let a = sample_stationary(&p, SeedSpec::new(3, 9)).unwrap();
        let b = sample_stationary(&p, SeedSpec::new(3, 9)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn ks_threshold_value() {
        // level 1e-3 -> K = 1.9495
        let thr = kolmogorov_threshold(1e-3, 1);
        assert_relative_eq!(thr, 1.9495, epsilon = 1e-4);
    }

    #[test]
    fn ks_distance_detects_shift() {
        let p = ModelParameters::new(0.0, 1.0, 1.0, 0.0, 10_000).unwrap();
        let f = sample_stationary(&p, SeedSpec::new(7, 0)).unwrap();
        let mut xs = f.values().to_vec();
        let d0 = kolmogorov_distance(&mut xs.clone(), 0.0, p.chi().sqrt());
        let d1 = kolmogorov_distance(&mut xs, 0.5, p.chi().sqrt());
        assert!(d0 < kolmogorov_threshold(1e-3, 10_000));
        assert!(d1 > 10.0 * d0);
    }

    #[test]
    fn report_rejects_small_ensembles() {
        let p = ModelParameters::new(0.0, 1.0, 1.0, 0.0, 16).unwrap();
        assert!(matches!(
            stationarity_report(&p, 0.1, 0.01, 10, SeedSpec::new(0, 0), 1e-3),
            Err(Error::TooFewReplicas { .. })
        ));
    }
}
