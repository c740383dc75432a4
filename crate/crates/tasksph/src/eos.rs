//! Ideal-gas equation of state.

use crate::error::SolverError;

#[derive(Debug, Clone, Copy)]
pub struct EosIdealGas {
    /// Polytropic index, > 1.
    pub gamma: f64,
}

impl Default for EosIdealGas {
    fn default() -> Self {
        EosIdealGas { gamma: 5.0 / 3.0 }
    }
}

impl EosIdealGas {
    pub fn new(gamma: f64) -> Result<Self, SolverError> {
        if gamma <= 1.0 {
            return Err(SolverError::Config(format!(
                "polytropic index must exceed 1, got {gamma}"
            )));
        }
        Ok(EosIdealGas { gamma })
    }

    /// Pressure and sound speed from density and specific internal energy.
    #[inline]
    pub fn update(&self, rho: f64, u: f64) -> Result<(f64, f64), SolverError> {
        if rho <= 0.0 {
            return Err(SolverError::Numerical(format!(
                "equation of state evaluated at non-positive density {rho}"
            )));
        }
        Ok(self.update_unchecked(rho, u))
    }

    #[inline(always)]
    pub fn update_unchecked(&self, rho: f64, u: f64) -> (f64, f64) {
        let p = (self.gamma - 1.0) * rho * u;
        let cs = (self.gamma * p / rho).max(0.0).sqrt();
        (p, cs)
    }
}
