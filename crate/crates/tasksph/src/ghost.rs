//! Per-cell finalisation steps between the interaction loops: the
//! smoothing-length solve (density ghost), switch evolution (gradient
//! ghost), the kick half-steps and the CFL timestep reduction.

use crate::eos::EosIdealGas;
use crate::error::SolverError;
use crate::loops::{density_gather_system, LoopParams};
use crate::system::ParticleSystem;
use crate::tree::CellTree;

#[derive(Debug, Clone, Copy)]
pub struct HsolveConfig {
    /// Relative tolerance on |n_hat h^3 - eta^3| / eta^3. The solver accepts
    /// at half this value so the f32-stored state still meets the stated
    /// bound.
    pub tol: f64,
    pub max_newton: u32,
    /// Geometric expansions of the bisection bracket [h/2, 2h] before the
    /// particle is flagged as non-convergent.
    pub max_expand: u32,
}

impl Default for HsolveConfig {
    fn default() -> Self {
        HsolveConfig { tol: 1e-4, max_newton: 30, max_expand: 8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ViscosityParams {
    pub alpha_max: f64,
    /// Non-dimensional decay length l.
    pub decay_l: f64,
    pub beta: f64,
    pub alpha_init: f64,
}

impl Default for ViscosityParams {
    fn default() -> Self {
        ViscosityParams { alpha_max: 2.0, decay_l: 0.05, beta: 3.0, alpha_init: 0.1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConductionParams {
    pub beta_c: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for ConductionParams {
    fn default() -> Self {
        ConductionParams { beta_c: 1.0, alpha_min: 0.0, alpha_max: 1.0 }
    }
}

#[derive(Debug, Default, Clone)]
pub struct GhostStats {
    pub newton_iterations: u64,
    pub max_iterations_particle: u32,
    pub regathers: u64,
}

impl GhostStats {
    pub fn merge(&mut self, other: &GhostStats) {
        self.newton_iterations += other.newton_iterations;
        self.max_iterations_particle = self.max_iterations_particle.max(other.max_iterations_particle);
        self.regathers += other.regathers;
    }
}

/// Upper bound on h keeping the kernel support inside half the box, where
/// minimum-image distances stay unambiguous.
fn h_ceiling(box_side: f64, gamma_k: f64) -> f64 {
    0.45 * box_side / gamma_k
}

/// Density ghost: converge every particle's smoothing length onto the target
/// `n_hat(h) h^3 = eta^3`, then finalise density, h-factor, Balsara switch
/// and the equation of state.
///
/// Particles whose loop-accumulated sums already satisfy the tolerance are
/// not re-gathered. Each Newton (or safeguarded bisection) step re-runs that
/// particle's density gather at the trial h via a tree query.
pub fn ghost_density(
    sys: &mut ParticleSystem,
    tree: &CellTree,
    first: usize,
    count: usize,
    cfg: &HsolveConfig,
    params: &LoopParams,
    eos: &EosIdealGas,
    eta: f64,
) -> Result<GhostStats, SolverError> {
    let eta3 = eta * eta * eta;
    let accept = 0.5 * cfg.tol * eta3;
    let h_max_allowed = h_ceiling(sys.box_side as f64, params.kernel.gamma_k);
    let mut stats = GhostStats::default();
    let mut candidates: Vec<u32> = Vec::new();

    for i in first..first + count {
        let mut h = sys.h[i] as f64;
        let mut wc = sys.acc_wcount[i];
        let mut wc_dh = sys.acc_wcount_dh[i];
        let mut g = wc * h * h * h - eta3;

        if g.abs() > accept {
            // Bracketing state: largest h with g < 0, smallest with g > 0.
            let mut lo: Option<f64> = None;
            let mut hi: Option<f64> = None;
            let mut history = vec![h];
            let mut iterations = 0u32;
            let mut expansions = 0u32;
            let mut converged = false;

            loop {
                if g < 0.0 {
                    lo = Some(lo.map_or(h, |v: f64| v.max(h)));
                } else {
                    hi = Some(hi.map_or(h, |v: f64| v.min(h)));
                }
                if iterations >= cfg.max_newton {
                    break;
                }
                let dg = wc_dh * h * h * h + 3.0 * wc * h * h;
                let newton = h - g / dg;
                let mut next = if dg > 0.0
                    && newton.is_finite()
                    && lo.map_or(true, |l| newton > l)
                    && hi.map_or(true, |u| newton < u)
                    && newton > 0.25 * h
                    && newton < 4.0 * h
                {
                    newton
                } else {
                    match (lo, hi) {
                        (Some(l), Some(u)) => 0.5 * (l + u),
                        // No bracket yet: expand geometrically from [h/2, 2h].
                        _ => {
                            expansions += 1;
                            if expansions > cfg.max_expand {
                                break;
                            }
                            if g < 0.0 {
                                2.0 * h
                            } else {
                                0.5 * h
                            }
                        }
                    }
                };
                if next >= h_max_allowed {
                    next = h_max_allowed;
                    if h >= h_max_allowed {
                        break;
                    }
                }

                h = next;
                history.push(h);
                tree.candidates_within(
                    [sys.x[i] as f64, sys.y[i] as f64, sys.z[i] as f64],
                    params.kernel.support(h),
                    &mut candidates,
                );
                let acc = density_gather_system(sys, i, h, &candidates, params);
                stats.regathers += 1;
                iterations += 1;
                wc = acc.wcount;
                wc_dh = acc.wcount_dh;
                g = wc * h * h * h - eta3;
                if g.abs() <= accept {
                    sys.acc_rho[i] = acc.rho;
                    sys.acc_wcount[i] = acc.wcount;
                    sys.acc_wcount_dh[i] = acc.wcount_dh;
                    sys.acc_rho_dh[i] = acc.rho_dh;
                    sys.acc_div[i] = acc.div;
                    for k in 0..3 {
                        sys.acc_curl[k][i] = acc.curl[k];
                    }
                    converged = true;
                    break;
                }
            }

            stats.newton_iterations += iterations as u64;
            stats.max_iterations_particle = stats.max_iterations_particle.max(iterations);
            if !converged {
                return Err(SolverError::Numerical(format!(
                    "smoothing length for particle {} did not converge after {} iterations; \
                     h history: {:?}",
                    sys.ids[i], iterations, history
                )));
            }
        }

        // Finalise the particle from its converged sums.
        sys.h[i] = h as f32;
        let rho = sys.acc_rho[i];
        sys.rho[i] = rho as f32;
        sys.n_hat[i] = wc as f32;
        sys.wcount[i] = (wc * h * h * h) as f32;
        sys.h_factor[i] = (1.0 + h / (3.0 * rho) * sys.acc_rho_dh[i]) as f32;
        let div = -sys.acc_div[i] / rho;
        let curl = [
            -sys.acc_curl[0][i] / rho,
            -sys.acc_curl[1][i] / rho,
            -sys.acc_curl[2][i] / rho,
        ];
        sys.div_v[i] = div as f32;
        for k in 0..3 {
            sys.curl_v[k][i] = curl[k] as f32;
        }
        // EoS from the stored (f32) density, so pressure is a pure function
        // of the particle state.
        let (p, cs) = eos.update(sys.rho[i] as f64, sys.u[i] as f64)?;
        sys.pressure[i] = p as f32;
        sys.sound_speed[i] = cs as f32;
        let curl_mag = (curl[0] * curl[0] + curl[1] * curl[1] + curl[2] * curl[2]).sqrt();
        let denom = div.abs() + curl_mag + 1e-4 * cs / h;
        sys.balsara[i] = if denom > 0.0 { (div.abs() / denom) as f32 } else { 0.0 };
    }
    Ok(stats)
}

/// First-step variant of the gradient ghost: records the baseline divergence
/// and finalises v_sig without evolving the switches (the time derivative of
/// div v is defined as zero on the first step).
pub fn ghost_gradient_init(sys: &mut ParticleSystem, first: usize, count: usize) {
    for i in first..first + count {
        sys.v_sig[i] = sys.v_sig[i].max(2.0 * sys.sound_speed[i]);
        sys.div_v_prev[i] = sys.div_v[i];
    }
}

/// Gradient ghost: evolve the viscosity and conduction switches.
pub fn ghost_gradient(
    sys: &mut ParticleSystem,
    first: usize,
    count: usize,
    dt: f64,
    visc: &ViscosityParams,
    cond: &ConductionParams,
    gamma_k: f64,
) -> Result<(), SolverError> {
    if dt <= 0.0 {
        return Err(SolverError::Internal(format!(
            "gradient ghost called with non-positive dt = {dt}"
        )));
    }
    for i in first..first + count {
        let cs = sys.sound_speed[i] as f64;
        let v_sig = (sys.v_sig[i] as f64).max(2.0 * cs);
        sys.v_sig[i] = v_sig as f32;
        let h = sys.h[i] as f64;
        let big_h = gamma_k * h;

        // Shock indicator from the rate of change of the velocity divergence.
        let div_now = sys.div_v[i] as f64;
        let ddiv_dt = (div_now - sys.div_v_prev[i] as f64) / dt;
        let s = big_h * big_h * (-ddiv_dt).max(0.0);
        let alpha_loc = if s > 0.0 {
            visc.alpha_max * s / (v_sig * v_sig + s)
        } else {
            0.0
        };
        let alpha_v = sys.alpha_v[i] as f64;
        let alpha_v = if alpha_v < alpha_loc {
            alpha_loc
        } else {
            alpha_loc + (alpha_v - alpha_loc) * (-visc.decay_l * cs * dt / big_h).exp()
        };
        sys.alpha_v[i] = alpha_v.clamp(0.0, visc.alpha_max) as f32;

        // Conduction switch: source from the energy Laplacian, decay at the
        // local sound speed, per-particle ceiling reduced where viscosity is
        // active.
        let u = sys.u[i] as f64;
        let alpha_c = sys.alpha_c[i] as f64;
        let source = if u > 0.0 {
            cond.beta_c * big_h * sys.acc_lap_u[i] * alpha_c / u.sqrt()
        } else {
            0.0
        };
        let decay = (alpha_c - cond.alpha_min) * cs / big_h;
        let mut alpha_c = alpha_c + dt * (source - decay);
        let ceiling = (cond.alpha_max * (1.0 - alpha_v / visc.alpha_max)).max(cond.alpha_min);
        alpha_c = alpha_c.clamp(cond.alpha_min, ceiling);
        sys.alpha_c[i] = alpha_c as f32;

        sys.div_v_prev[i] = div_now as f32;
    }
    Ok(())
}

/// Half-kick: advance velocities and internal energies from the force-loop
/// accumulators, flooring u at zero, and refresh the equation of state.
/// Returns how many particles had their energy clamped.
pub fn kick(
    sys: &mut ParticleSystem,
    first: usize,
    count: usize,
    dt_half: f64,
    eos: &EosIdealGas,
) -> usize {
    let mut clamped = 0usize;
    for i in first..first + count {
        sys.vx[i] = (sys.vx[i] as f64 + sys.acc_ax[i] * dt_half) as f32;
        sys.vy[i] = (sys.vy[i] as f64 + sys.acc_ay[i] * dt_half) as f32;
        sys.vz[i] = (sys.vz[i] as f64 + sys.acc_az[i] * dt_half) as f32;
        let u_new = sys.u[i] as f64 + sys.acc_du_dt[i] * dt_half;
        if u_new < 0.0 {
            sys.u[i] = 0.0;
            clamped += 1;
        } else {
            sys.u[i] = u_new as f32;
        }
        let rho = (sys.rho[i] as f64).max(f64::MIN_POSITIVE);
        let (p, cs) = eos.update_unchecked(rho, sys.u[i] as f64);
        sys.pressure[i] = p as f32;
        sys.sound_speed[i] = cs as f32;
    }
    clamped
}

/// CFL timestep contribution of one range: min over particles of
/// `c_cfl * 2 gamma_k h / v_sig`.
pub fn timestep_partial(
    sys: &ParticleSystem,
    first: usize,
    count: usize,
    gamma_k: f64,
    c_cfl: f64,
) -> Result<f64, SolverError> {
    let mut dt = f64::INFINITY;
    for i in first..first + count {
        let v_sig = sys.v_sig[i] as f64;
        if !v_sig.is_finite() {
            return Err(SolverError::Numerical(format!(
                "non-finite signal velocity on particle {}",
                sys.ids[i]
            )));
        }
        if v_sig > 0.0 {
            dt = dt.min(c_cfl * 2.0 * gamma_k * sys.h[i] as f64 / v_sig);
        }
    }
    Ok(dt)
}
