//! Smoothing kernel evaluation.
//!
//! The kernel is the M4 cubic spline, parameterised so that its compact
//! support ends exactly at the cut-off radius `H = gamma_k * h`. With the
//! default `gamma_k = 2` this reduces to the textbook form with support `2h`.

use crate::error::SolverError;

/// Kernel family. Only the cubic spline is implemented; the Wendland slot is
/// a config hook reserved for later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    CubicSpline,
    Wendland,
}

/// Kernel shape parameters shared by every loop.
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Support ratio: the kernel vanishes at `r >= gamma_k * h`.
    pub gamma_k: f64,
    /// Smoothness target tying h to the local number density via
    /// `n_hat * h^3 = eta^3`.
    pub eta: f64,
}

/// 3-D cubic-spline normalisation constant (1/pi).
const SIGMA3: f64 = std::f64::consts::FRAC_1_PI;

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::CubicSpline,
            gamma_k: 2.0,
            eta: 1.2348,
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, gamma_k: f64, eta: f64) -> Result<Self, SolverError> {
        if gamma_k <= 0.0 || eta <= 0.0 {
            return Err(SolverError::Config(format!(
                "kernel parameters must be positive (gamma_k = {gamma_k}, eta = {eta})"
            )));
        }
        match family {
            KernelFamily::CubicSpline => Ok(KernelSpec { family, gamma_k, eta }),
            KernelFamily::Wendland => Err(SolverError::Config(
                "wendland kernel is a reserved hook, not implemented".into(),
            )),
        }
    }

    /// Cut-off radius `H = gamma_k * h`.
    #[inline]
    pub fn support(&self, h: f64) -> f64 {
        self.gamma_k * h
    }

    /// Evaluate `W(r, h)` and its radial derivative `dW/dr` from the same
    /// polynomial piece.
    ///
    /// The spline is written in the scaled coordinate `q = 2 r / H` so the
    /// support boundary sits at `q = 2` for any `gamma_k`.
    #[inline]
    pub fn eval(&self, r: f64, h: f64) -> Result<(f64, f64), SolverError> {
        if h <= 0.0 {
            return Err(SolverError::Numerical(format!(
                "kernel evaluated with non-positive smoothing length h = {h}"
            )));
        }
        debug_assert!(r >= 0.0);
        Ok(self.eval_unchecked(r, h))
    }

    /// Same as [`eval`](Self::eval) without the domain check; used in inner
    /// loops where h is already validated.
    #[inline(always)]
    pub fn eval_unchecked(&self, r: f64, h: f64) -> (f64, f64) {
        let inv_scale = 2.0 / (self.gamma_k * h);
        let q = r * inv_scale;
        if q >= 2.0 {
            return (0.0, 0.0);
        }
        let norm = SIGMA3 * inv_scale * inv_scale * inv_scale;
        let (b, db) = if q < 1.0 {
            (
                1.0 - 1.5 * q * q + 0.75 * q * q * q,
                -3.0 * q + 2.25 * q * q,
            )
        } else {
            let t = 2.0 - q;
            (0.25 * t * t * t, -0.75 * t * t)
        };
        (norm * b, norm * db * inv_scale)
    }

    /// Derivative of the kernel with respect to the smoothing length.
    ///
    /// For `W = h^-3 f(r/h)` this is the identity
    /// `dW/dh = -(3 W + r dW/dr) / h`.
    #[inline]
    pub fn dw_dh(&self, r: f64, h: f64) -> Result<f64, SolverError> {
        let (w, dw_dr) = self.eval(r, h)?;
        Ok(-(3.0 * w + r * dw_dr) / h)
    }

    #[inline(always)]
    pub fn dw_dh_from_eval(w: f64, dw_dr: f64, r: f64, h: f64) -> f64 {
        -(3.0 * w + r * dw_dr) / h
    }
}
