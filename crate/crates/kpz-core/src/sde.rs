use crate::error::{Error, Result};
use crate::field::SlopeField;
use crate::params::ModelParameters;
use crate::rng::{fill_standard_normal, SeedSpec};
use rand_chacha::ChaCha12Rng;

/// One standard Gaussian per site per step; the conserved noise enters the
/// update as the ring difference `xi_j - xi_{j-1}`.
#[derive(Debug, Clone)]
pub struct NoiseIncrement {
    pub xi: Vec<f64>,
}

impl NoiseIncrement {
    pub fn sample(rng: &mut ChaCha12Rng, ring_size: usize) -> Self {
        let mut xi = vec![0.0; ring_size];
        fill_standard_normal(rng, &mut xi);
        Self { xi }
    }
}

/// Field snapshots on a strictly increasing time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub checkpoints: Vec<(f64, SlopeField)>,
    pub dt: f64,
    pub params: ModelParameters,
    pub seed: SeedSpec,
}

/// Full current `w_j = (lambda0/6)(u_j^2 + u_j u_{j+1} + u_{j+1}^2) + nu0 (u_{j+1} - u_j)`.
pub fn current(u: &SlopeField, p: &ModelParameters) -> Result<Vec<f64>> {
    u.check_finite(0.0)?;
    let v = u.values();
    let n = v.len();
    let c = p.lambda0 / 6.0;
    let mut w = vec![0.0; n];
    for j in 0..n {
        let uj = v[j];
        let ujp = v[(j + 1) % n];
        w[j] = c * (uj * uj + uj * ujp + ujp * ujp) + p.nu0 * (ujp - uj);
    }
    Ok(w)
}

/// Nonlinear part of the current, `(lambda0/6)(u_j^2 + u_j u_{j+1} + u_{j+1}^2)`.
///
/// This is the piece that is a divergence-free vector field on configuration
/// space and satisfies `sum_j (w~_j - w~_{j-1}) u_j = 0` on the ring; the
/// diffusive part is instead in detailed balance with the conserved noise.
pub fn current_nonlinear(u: &SlopeField, p: &ModelParameters) -> Result<Vec<f64>> {
    u.check_finite(0.0)?;
    let v = u.values();
    let n = v.len();
    let c = p.lambda0 / 6.0;
    let mut w = vec![0.0; n];
    for j in 0..n {
        let uj = v[j];
        let ujp = v[(j + 1) % n];
        w[j] = c * (uj * uj + uj * ujp + ujp * ujp);
    }
    Ok(w)
}

/// Deterministic drift `w_j - w_{j-1}`; telescopes to zero over the ring.
pub fn drift(u: &SlopeField, p: &ModelParameters) -> Result<Vec<f64>> {
    let w = current(u, p)?;
    let n = w.len();
    Ok((0..n).map(|j| w[j] - w[(j + n - 1) % n]).collect())
}

/// Explicit-scheme stability guard: `dt (lambda0 max|u| + 4 nu0) <= 0.5`.
pub fn stability_ok(u: &SlopeField, dt: f64, p: &ModelParameters) -> bool {
    dt * (p.lambda0.abs() * u.max_abs() + 4.0 * p.nu0) <= 0.5
}

/// One Euler-Maruyama step.
///
/// `u'_j = u_j + dt (w_j - w_{j-1}) + sqrt(D0 dt)(xi_j - xi_{j-1})`.
/// Both drift and noise enter as ring differences, so `sum_j u_j` is
/// conserved exactly up to floating rounding.
pub fn step(
    u: &SlopeField,
    dt: f64,
    noise: &NoiseIncrement,
    p: &ModelParameters,
) -> Result<SlopeField> {
    step_at(u, dt, noise, p, 0.0)
}

fn step_at(
    u: &SlopeField,
    dt: f64,
    noise: &NoiseIncrement,
    p: &ModelParameters,
    time: f64,
) -> Result<SlopeField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::TimeGrid(format!("dt must be > 0, got {dt}")));
    }
    if noise.xi.len() != u.ring_size() {
        return Err(Error::InvalidField(format!(
            "noise length {} != ring size {}",
            noise.xi.len(),
            u.ring_size()
        )));
    }
    let w = current(u, p)?;
    let n = w.len();
    let amp = (p.d0 * dt).sqrt();
    let v = u.values();
    let xi = &noise.xi;
    let mut out = vec![0.0; n];
    let mut max_abs = 0.0_f64;
    for j in 0..n {
        let jm = (j + n - 1) % n;
        let x = v[j] + dt * (w[j] - w[jm]) + amp * (xi[j] - xi[jm]);
        max_abs = max_abs.max(x.abs());
        out[j] = x;
    }
    let threshold = p.blowup_threshold();
    if !max_abs.is_finite() || max_abs > threshold {
        return Err(Error::BlowUp {
            time,
            max_abs,
            threshold,
        });
    }
    let mut f = SlopeField::constant(0.0, n)?;
    f.values_mut().copy_from_slice(&out);
    Ok(f)
}


/// Euler-Maruyama integrator with reusable buffers for ensemble loops.
pub struct Stepper {
    p: ModelParameters,
    dt: f64,
    amp: f64,
    threshold: f64,
    w: Vec<f64>,
    xi: Vec<f64>,
}

impl Stepper {
    pub fn new(p: &ModelParameters, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::TimeGrid(format!("dt must be > 0, got {dt}")));
        }
        Ok(Self {
            p: *p,
            dt,
            amp: (p.d0 * dt).sqrt(),
            threshold: p.blowup_threshold(),
            w: vec![0.0; p.ring_size],
            xi: vec![0.0; p.ring_size],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advance `u` by one step in place. `time` is only used to label
    /// blow-up errors.
    pub fn step(&mut self, u: &mut [f64], rng: &mut ChaCha12Rng, time: f64) -> Result<()> {
        let n = u.len();
        let c = self.p.lambda0 / 6.0;
        let nu0 = self.p.nu0;
        for j in 0..n {
            let uj = u[j];
            let ujp = u[if j + 1 == n { 0 } else { j + 1 }];
            self.w[j] = c * (uj * uj + uj * ujp + ujp * ujp) + nu0 * (ujp - uj);
        }
        fill_standard_normal(rng, &mut self.xi);
        let mut max_abs = 0.0_f64;
        let mut prev_w = self.w[n - 1];
        let mut prev_xi = self.xi[n - 1];
        for j in 0..n {
            let x = u[j] + self.dt * (self.w[j] - prev_w) + self.amp * (self.xi[j] - prev_xi);
            prev_w = self.w[j];
            prev_xi = self.xi[j];
            max_abs = max_abs.max(x.abs());
            u[j] = x;
        }
        if !max_abs.is_finite() || max_abs > self.threshold {
            return Err(Error::BlowUp {
                time,
                max_abs,
                threshold: self.threshold,
            });
        }
        Ok(())
    }

    /// `sum_j w~_j` of the nonlinear current, used by the current-correlation
    /// route to the variance (the diffusive part telescopes to zero).
    pub fn nonlinear_current_sum(&self, u: &[f64]) -> f64 {
        let n = u.len();
        let c = self.p.lambda0 / 6.0;
        let mut s = 0.0;
        for j in 0..n {
            let uj = u[j];
            let ujp = u[if j + 1 == n { 0 } else { j + 1 }];
            s += c * (uj * uj + uj * ujp + ujp * ujp);
        }
        s
    }
}

/// Integrate from `u0` to `t_end`, recording field copies at the requested
/// checkpoint times. Deterministic given `seed`.
pub fn evolve(
    u0: &SlopeField,
    t_end: f64,
    dt: f64,
    checkpoints: &[f64],
    seed: SeedSpec,
    p: &ModelParameters,
) -> Result<Trajectory> {
    let steps = checkpoint_steps(t_end, dt, checkpoints)?;
    let total_steps = (t_end / dt).round() as u64;
    let mut rng = seed.rng();
    let mut u = u0.clone();
    let mut out: Vec<(f64, SlopeField)> = Vec::with_capacity(checkpoints.len());
    if steps.contains(&0) {
        out.push((0.0, u.clone()));
    }
    for s in 1..=total_steps {
        let noise = NoiseIncrement::sample(&mut rng, u.ring_size());
        u = step_at(&u, dt, &noise, p, s as f64 * dt)?;
        if steps.contains(&s) {
            out.push((s as f64 * dt, u.clone()));
        }
    }
    Ok(Trajectory {
        checkpoints: out,
        dt,
        params: *p,
        seed,
    })
}

/// Map checkpoint times to whole step indices, rejecting grids that are not
/// multiples of `dt` or fall outside `[0, t_end]`.
pub fn checkpoint_steps(
    t_end: f64,
    dt: f64,
    checkpoints: &[f64],
) -> Result<std::collections::BTreeSet<u64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::TimeGrid(format!("dt must be > 0, got {dt}")));
    }
    if t_end < 0.0 {
        return Err(Error::TimeGrid(format!("t_end must be >= 0, got {t_end}")));
    }
    let mut steps = std::collections::BTreeSet::new();
    let mut prev = f64::NEG_INFINITY;
    for &t in checkpoints {
        if t < 0.0 || t > t_end * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::TimeGrid(format!(
                "checkpoint {t} outside [0, {t_end}]"
            )));
        }
        if t <= prev {
            return Err(Error::TimeGrid(
                "checkpoint times must be strictly increasing".into(),
            ));
        }
        prev = t;
        let s = t / dt;
        let si = s.round();
        if (s - si).abs() > 1e-6 {
            return Err(Error::TimeGrid(format!(
                "checkpoint {t} is not a multiple of dt = {dt}"
            )));
        }
        steps.insert(si as u64);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::sample_stationary;
    use approx::assert_relative_eq;

    fn params(lambda0: f64, nu0: f64, d0: f64, rho: f64, n: usize) -> ModelParameters {
        ModelParameters::new(lambda0, nu0, d0, rho, n).unwrap()
    }

    #[test]
    fn current_zero_field() {
        let p = params(3.0, 1.0, 1.0, 0.0, 16);
        let u = SlopeField::constant(0.0, 16).unwrap();
        assert!(current(&u, &p).unwrap().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn current_constant_field() {
        // u = rho constant: w_j = lambda0 rho^2 / 2, diffusive part vanishes
        let p = params(3.0, 1.7, 1.0, 0.0, 16);
        let rho = 0.8;
        let u = SlopeField::constant(rho, 16).unwrap();
        for &w in current(&u, &p).unwrap().iter() {
            assert_relative_eq!(w, 3.0 * rho * rho / 2.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn current_single_bond() {
        // lambda0 = 6, nu0 = 1, u_j = 0, u_{j+1} = 1 -> w_j = 1 + 1 = 2
        let p = params(6.0, 1.0, 1.0, 0.0, 4);
        let u = SlopeField::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let w = current(&u, &p).unwrap();
        assert_relative_eq!(w[0], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn drift_constant_is_zero() {
        let p = params(2.0, 1.0, 1.0, 0.0, 12);
        let u = SlopeField::constant(1.3, 12).unwrap();
        assert!(drift(&u, &p).unwrap().iter().all(|&d| d.abs() < 1e-15));
    }

    #[test]
    fn drift_telescopes() {
        let p = params(4.0, 1.0, 2.0, 0.0, 64);
        let u = sample_stationary(&p, SeedSpec::new(5, 0)).unwrap();
        let d = drift(&u, &p).unwrap();
        let w = current(&u, &p).unwrap();
        let wmax = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let sum: f64 = d.iter().sum();
        assert!(sum.abs() <= 1e-12 * 64.0 * wmax.max(1.0));
    }

    #[test]
    fn nonlinear_drift_orthogonal_to_field() {
        // sum_j (w~_j - w~_{j-1}) u_j = 0 on the ring for the nonlinear current
        let p = params(4.0, 1.0, 2.0, 0.3, 64);
        for k in 0..16 {
            let u = sample_stationary(&p, SeedSpec::new(6, k)).unwrap();
            let wt = current_nonlinear(&u, &p).unwrap();
            let n = wt.len();
            let v = u.values();
            let s: f64 = (0..n).map(|j| (wt[j] - wt[(j + n - 1) % n]) * v[j]).sum();
            let wmax = wt.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            assert!(
                s.abs() <= 1e-10 * n as f64 * wmax.max(1.0) * u.max_abs().max(1.0),
                "telescoping identity violated: {s}"
            );
        }
    }

    #[test]
    fn step_fixed_point_of_heat_flow() {
        // lambda0 = 0, D0 -> noiseless limit approximated by xi = 0
        let p = params(0.0, 1.0, 1.0, 0.0, 8);
        let u = SlopeField::constant(0.7, 8).unwrap();
        let noise = NoiseIncrement { xi: vec![0.0; 8] };
        let u1 = step(&u, 0.01, &noise, &p).unwrap();
        for (&a, &b) in u.values().iter().zip(u1.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn step_conserves_total() {
        let p = params(5.0, 1.0, 1.0, 0.0, 128);
        let mut rng = SeedSpec::new(9, 0).rng();
        let mut u = sample_stationary(&p, SeedSpec::new(9, 1)).unwrap();
        for s in 0..200 {
            let total_before = u.total();
            let noise = NoiseIncrement::sample(&mut rng, 128);
            u = step(&u, 0.005, &noise, &p).unwrap();
            let w = current(&u, &p).unwrap();
            let wmax = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(
                (u.total() - total_before).abs() <= 1e-12 * 128.0 * (1.0 + wmax),
                "conservation broken at step {s}"
            );
        }
    }

    #[test]
    fn evolve_zero_time() {
        let p = params(1.0, 1.0, 1.0, 0.0, 8);
        let u = SlopeField::constant(0.1, 8).unwrap();
        let tr = evolve(&u, 0.0, 0.01, &[0.0], SeedSpec::new(1, 0), &p).unwrap();
        assert_eq!(tr.checkpoints.len(), 1);
        assert_eq!(tr.checkpoints[0].1, u);
    }

    #[test]
    fn evolve_deterministic() {
        let p = params(1.0, 1.0, 1.0, 0.0, 32);
        let u = sample_stationary(&p, SeedSpec::new(11, 7)).unwrap();
        let a = evolve(&u, 1.0, 0.01, &[0.5, 1.0], SeedSpec::new(11, 8), &p).unwrap();
        let b = evolve(&u, 1.0, 0.01, &[0.5, 1.0], SeedSpec::new(11, 8), &p).unwrap();
        for ((ta, fa), (tb, fb)) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(ta, tb);
            assert_eq!(fa.values(), fb.values());
        }
    }

    #[test]
    fn evolve_rejects_bad_grid() {
        let p = params(1.0, 1.0, 1.0, 0.0, 8);
        let u = SlopeField::constant(0.0, 8).unwrap();
        assert!(evolve(&u, 1.0, 0.01, &[0.005], SeedSpec::new(0, 0), &p).is_err());
        assert!(evolve(&u, 1.0, 0.01, &[2.0], SeedSpec::new(0, 0), &p).is_err());
        assert!(evolve(&u, 1.0, 0.01, &[0.5, 0.5], SeedSpec::new(0, 0), &p).is_err());
    }

    #[test]
    fn blowup_detected() {
        let p = params(50.0, 1.0, 1.0, 0.0, 8);
        let big = 0.9e6; // just under threshold 1e6 sqrt(chi), chi = 0.5
        let u = SlopeField::new(vec![big, -big, big, -big, big, -big, big, -big]).unwrap();
        let noise = NoiseIncrement { xi: vec![0.0; 8] };
        match step(&u, 0.5, &noise, &p) {
            Err(Error::BlowUp { .. }) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
