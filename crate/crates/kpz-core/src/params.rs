use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Normalization of the dimensionless coupling, `1/(3 * 2^(3/2))`.
const COUPLING_NORM: f64 = 8.485281374238571; // 3 * 2^{3/2}

/// Bare parameters of the lattice equation on a ring, with the two derived
/// quantities everything downstream needs: `alpha = nu0/d0` and the
/// dimensionless coupling `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub lambda0: f64,
    pub nu0: f64,
    pub d0: f64,
    pub rho: f64,
    pub ring_size: usize,
    alpha: f64,
    lambda: f64,
}

impl ModelParameters {
    pub fn new(lambda0: f64, nu0: f64, d0: f64, rho: f64, ring_size: usize) -> Result<Self> {
        if !lambda0.is_finite() || !rho.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "lambda0 and rho must be finite, got lambda0={lambda0}, rho={rho}"
            )));
        }
        if !(nu0.is_finite() && nu0 > 0.0) {
            return Err(Error::ParameterDomain(format!("nu0 must be > 0, got {nu0}")));
        }
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(Error::ParameterDomain(format!("d0 must be > 0, got {d0}")));
        }
        if ring_size < 3 {
            return Err(Error::ParameterDomain(format!(
                "ring_size must be >= 3, got {ring_size}"
            )));
        }
        let alpha = nu0 / d0;
        let lambda = lambda0 / (COUPLING_NORM * alpha.sqrt() * nu0);
        Ok(Self {
            lambda0,
            nu0,
            d0,
            rho,
            ring_size,
            alpha,
            lambda,
        })
    }

    /// `alpha = nu0 / d0`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Dimensionless coupling `lambda = lambda0 alpha^{-1/2} nu0^{-1} / (3 2^{3/2})`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Static susceptibility `chi = 1/(2 alpha)`, the site variance of the
    /// stationary measure and the conserved total of the two-point function.
    pub fn chi(&self) -> f64 {
        1.0 / (2.0 * self.alpha)
    }

    /// Stationary mean of the current, `j(rho) = (lambda0/6)(1/alpha + 3 rho^2)`.
    pub fn mean_current_theory(&self) -> f64 {
        self.lambda0 / 6.0 * (1.0 / self.alpha + 3.0 * self.rho * self.rho)
    }

    /// Field magnitude beyond which a trajectory is declared blown up.
    pub fn blowup_threshold(&self) -> f64 {
        1e6 * self.chi().sqrt()
    }

    /// Default step size, `0.01/nu0`.
    pub fn default_dt(&self) -> f64 {
        0.01 / self.nu0
    }
}

/// Dimensionless coupling from the bare parameters (same value as
/// [`ModelParameters::lambda`]).
pub fn coupling_lambda(p: &ModelParameters) -> f64 {
    p.lambda()
}

/// `chi = 1/(2 alpha)`.
pub fn susceptibility(p: &ModelParameters) -> f64 {
    p.chi()
}

/// Mean current under the stationary measure.
pub fn mean_current_theory(p: &ModelParameters) -> f64 {
    p.mean_current_theory()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coupling_zero_nonlinearity() {
        let p = ModelParameters::new(0.0, 1.7, 0.3, 0.0, 16).unwrap();
        assert_eq!(p.lambda(), 0.0);
    }

    #[test]
    fn coupling_unit_case() {
        // lambda0 = 6 sqrt(2), alpha = 1, nu0 = 1 -> lambda = 1
        let p = ModelParameters::new(6.0 * std::f64::consts::SQRT_2, 1.0, 1.0, 0.0, 16).unwrap();
        assert_relative_eq!(p.lambda(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn coupling_explicit_value() {
        let p = ModelParameters::new(1.0, 1.0, 1.0, 0.0, 16).unwrap();
        assert_relative_eq!(p.lambda(), 0.11785113019775793, max_relative = 1e-14);
    }

    #[test]
    fn coupling_recompute_matches_stored() {
        let p = ModelParameters::new(2.3, 0.7, 1.9, 0.4, 32).unwrap();
        let recomputed = p.lambda0 / (3.0 * 2.0_f64.powf(1.5) * p.alpha().sqrt() * p.nu0);
        assert_relative_eq!(p.lambda(), recomputed, max_relative = 1e-14);
    }

    #[test]
    fn susceptibility_values() {
        let p = ModelParameters::new(0.0, 0.5, 1.0, 0.0, 8).unwrap(); // alpha = 1/2
        assert_relative_eq!(susceptibility(&p), 1.0, max_relative = 1e-14);
        let p = ModelParameters::new(0.0, 1.0, 1.0, 0.0, 8).unwrap(); // alpha = 1
        assert_relative_eq!(susceptibility(&p), 0.5, max_relative = 1e-14);
        let p = ModelParameters::new(0.0, 1.0, 4.0, 0.0, 8).unwrap(); // alpha = 1/4
        assert_relative_eq!(susceptibility(&p), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn chi_times_two_alpha_is_one() {
        for (nu0, d0) in [(0.5, 1.0), (1.0, 1.0), (2.0, 0.3), (0.01, 7.0)] {
            let p = ModelParameters::new(1.0, nu0, d0, 0.0, 8).unwrap();
            assert_relative_eq!(p.chi() * 2.0 * p.alpha(), 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn mean_current_values() {
        let p = ModelParameters::new(0.0, 1.0, 1.0, 0.7, 8).unwrap();
        assert_eq!(mean_current_theory(&p), 0.0);
        let p = ModelParameters::new(6.0, 1.0, 1.0, 0.0, 8).unwrap();
        assert_relative_eq!(mean_current_theory(&p), 1.0, max_relative = 1e-14);
        let p = ModelParameters::new(6.0, 1.0, 1.0, 1.0, 8).unwrap();
        assert_relative_eq!(mean_current_theory(&p), 4.0, max_relative = 1e-14);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(ModelParameters::new(1.0, 0.0, 1.0, 0.0, 8).is_err());
        assert!(ModelParameters::new(1.0, -1.0, 1.0, 0.0, 8).is_err());
        assert!(ModelParameters::new(1.0, 1.0, 0.0, 0.0, 8).is_err());
        assert!(ModelParameters::new(1.0, 1.0, 1.0, 0.0, 2).is_err());
        assert!(ModelParameters::new(f64::NAN, 1.0, 1.0, 0.0, 8).is_err());
    }
}
