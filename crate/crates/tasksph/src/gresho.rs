//! Gresho-Chan vortex initial conditions, analytical profiles, and the
//! radial error report.

use crate::eos::EosIdealGas;
use crate::system::ParticleSystem;

/// Analytical azimuthal velocity and pressure at vortex radius `r`.
///
/// Piecewise: a solid-body core spinning up to speed 1 at r = 0.2, a linear
/// spin-down ring to r = 0.4 and a static outer region with constant
/// pressure 3 + 4 ln 2.
pub fn analytic_eval(r: f64) -> (f64, f64) {
    if r < 0.2 {
        (5.0 * r, 5.0 + 12.5 * r * r)
    } else if r < 0.4 {
        (
            2.0 - 5.0 * r,
            9.0 - 4.0 * (0.2f64).ln() + 12.5 * r * r - 20.0 * r + 4.0 * r.ln(),
        )
    } else {
        (0.0, 3.0 + 4.0 * (2.0f64).ln())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GreshoIc {
    pub resolution: usize,
    pub box_side: f32,
    pub rho0: f64,
    pub gamma: f64,
    /// Initial smoothing length in units of the lattice spacing.
    pub eta: f64,
    pub alpha_v_init: f32,
    pub alpha_c_init: f32,
}

/// Vortex radius of a particle about the z-parallel axis through the domain
/// center.
pub fn vortex_radius(x: f32, y: f32, box_side: f32) -> f64 {
    let cx = 0.5 * box_side as f64;
    let dx = x as f64 - cx;
    let dy = y as f64 - cx;
    (dx * dx + dy * dy).sqrt()
}

/// Uniform cubic lattice with the analytical velocity and pressure profiles.
/// Velocities are exactly `analytic_eval` of the lattice radius, cast once
/// to f32.
pub fn gresho_ic(ic: &GreshoIc) -> ParticleSystem {
    let n = ic.resolution;
    let total = n * n * n;
    let l = ic.box_side;
    let dx = l as f64 / n as f64;
    let mass = (ic.rho0 * (l as f64).powi(3) / total as f64) as f32;
    let h0 = (ic.eta * dx) as f32;
    let eos = EosIdealGas { gamma: ic.gamma };

    let mut s = ParticleSystem::with_capacity(total, l);
    let mut i = 0;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let x = ((ix as f64 + 0.5) * dx) as f32;
                let y = ((iy as f64 + 0.5) * dx) as f32;
                let z = ((iz as f64 + 0.5) * dx) as f32;
                s.ids[i] = i as u32;
                s.x[i] = x;
                s.y[i] = y;
                s.z[i] = z;
                let r = vortex_radius(x, y, l);
                let (v_theta, p) = analytic_eval(r);
                if r > 0.0 {
                    let cx = 0.5 * l as f64;
                    let ux = (x as f64 - cx) / r;
                    let uy = (y as f64 - cx) / r;
                    s.vx[i] = (-v_theta * uy) as f32;
                    s.vy[i] = (v_theta * ux) as f32;
                }
                s.vz[i] = 0.0;
                s.mass[i] = mass;
                s.h[i] = h0;
                s.rho[i] = ic.rho0 as f32;
                s.u[i] = (p / ((ic.gamma - 1.0) * ic.rho0)) as f32;
                let (pp, cs) = eos.update_unchecked(ic.rho0, s.u[i] as f64);
                s.pressure[i] = pp as f32;
                s.sound_speed[i] = cs as f32;
                s.alpha_v[i] = ic.alpha_v_init;
                s.alpha_c[i] = ic.alpha_c_init;
                i += 1;
            }
        }
    }
    s
}

/// Radial binned comparison against the analytical profiles.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub bin_edges: Vec<f64>,
    pub bin_count: Vec<usize>,
    pub v_theta_mean: Vec<f64>,
    pub v_theta_std: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_std: Vec<f64>,
    /// Global mean absolute errors against the analytical profiles.
    pub l1_v_theta: f64,
    pub l1_pressure: f64,
    /// Mean pressure over the static outer region r >= 0.4.
    pub plateau_pressure_mean: f64,
}

pub const ERROR_BINS: usize = 64;

pub fn error_report(sys: &ParticleSystem) -> ErrorReport {
    let l = sys.box_side;
    let r_max = 0.5 * std::f64::consts::SQRT_2 * l as f64;
    let nb = ERROR_BINS;
    let mut count = vec![0usize; nb];
    let mut v_sum = vec![0.0f64; nb];
    let mut v_sq = vec![0.0f64; nb];
    let mut p_sum = vec![0.0f64; nb];
    let mut p_sq = vec![0.0f64; nb];
    let mut l1_v = 0.0f64;
    let mut l1_p = 0.0f64;
    let mut plateau_sum = 0.0f64;
    let mut plateau_n = 0usize;

    for i in 0..sys.len() {
        let r = vortex_radius(sys.x[i], sys.y[i], l);
        let cx = 0.5 * l as f64;
        let dx = sys.x[i] as f64 - cx;
        let dy = sys.y[i] as f64 - cx;
        // Azimuthal projection of the velocity.
        let v_theta = if r > 0.0 {
            (-sys.vx[i] as f64 * dy + sys.vy[i] as f64 * dx) / r
        } else {
            0.0
        };
        let p = sys.pressure[i] as f64;
        let bin = ((r / r_max) * nb as f64).min(nb as f64 - 1.0) as usize;
        count[bin] += 1;
        v_sum[bin] += v_theta;
        v_sq[bin] += v_theta * v_theta;
        p_sum[bin] += p;
        p_sq[bin] += p * p;
        let (v_ref, p_ref) = analytic_eval(r);
        l1_v += (v_theta - v_ref).abs();
        l1_p += (p - p_ref).abs();
        if r >= 0.4 {
            plateau_sum += p;
            plateau_n += 1;
        }
    }

    let n_tot = sys.len().max(1) as f64;
    let mean_std = |sum: &[f64], sq: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; nb];
        let mut std = vec![0.0; nb];
        for b in 0..nb {
            if count[b] > 0 {
                let m = sum[b] / count[b] as f64;
                mean[b] = m;
                std[b] = (sq[b] / count[b] as f64 - m * m).max(0.0).sqrt();
            }
        }
        (mean, std)
    };
    let (v_theta_mean, v_theta_std) = mean_std(&v_sum, &v_sq);
    let (p_mean, p_std) = mean_std(&p_sum, &p_sq);

    ErrorReport {
        bin_edges: (0..=nb).map(|b| b as f64 * r_max / nb as f64).collect(),
        bin_count: count,
        v_theta_mean,
        v_theta_std,
        p_mean,
        p_std,
        l1_v_theta: l1_v / n_tot,
        l1_pressure: l1_p / n_tot,
        plateau_pressure_mean: if plateau_n > 0 { plateau_sum / plateau_n as f64 } else { 0.0 },
    }
}

impl ErrorReport {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "r_lo,r_hi,count,v_theta_mean,v_theta_std,p_mean,p_std")?;
        for b in 0..self.bin_count.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.bin_count[b],
                self.v_theta_mean[b],
                self.v_theta_std[b],
                self.p_mean[b],
                self.p_std[b]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_profile_points() {
        let (v, p) = analytic_eval(0.1);
        assert_eq!(v, 0.5);
        assert_eq!(p, 5.125);
        let (v, _) = analytic_eval(0.3);
        assert!((v - 0.5).abs() < 1e-12);
        let (v, p) = analytic_eval(0.5);
        assert_eq!(v, 0.0);
        assert!((p - (3.0 + 4.0 * (2.0f64).ln())).abs() < 1e-12);
        // The two pieces meet at speed 1 at r = 0.2.
        let (v, _) = analytic_eval(0.2);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_profile_continuity() {
        let eps = 1e-9;
        for r0 in [0.2f64, 0.4] {
            let (vm, pm) = analytic_eval(r0 - eps);
            let (vp, pp) = analytic_eval(r0 + eps);
            assert!((vm - vp).abs() < 1e-7);
            assert!((pm - pp).abs() < 1e-7);
        }
        let (vm, pm) = analytic_eval(0.4 - f64::EPSILON);
        let (vp, pp) = analytic_eval(0.4);
        assert!((vm - vp).abs() < 1e-12);
        assert!((pm - pp).abs() < 1e-12);
    }

    fn default_ic(n: usize) -> GreshoIc {
        GreshoIc {
            resolution: n,
            box_side: 1.0,
            rho0: 1.0,
            gamma: 5.0 / 3.0,
            eta: 1.2348,
            alpha_v_init: 0.1,
            alpha_c_init: 0.0,
        }
    }

    #[test]
    fn ic_matches_analytic_bitwise() {
        let sys = gresho_ic(&default_ic(16));
        for i in 0..sys.len() {
            let r = vortex_radius(sys.x[i], sys.y[i], 1.0);
            let (v_theta, p) = analytic_eval(r);
            let cx = 0.5;
            let (dx, dy) = (sys.x[i] as f64 - cx, sys.y[i] as f64 - cx);
            if r > 0.0 {
                assert_eq!(sys.vx[i], (-v_theta * dy / r) as f32);
                assert_eq!(sys.vy[i], (v_theta * dx / r) as f32);
            }
            assert_eq!(sys.vz[i], 0.0);
            let u = p / ((5.0 / 3.0 - 1.0) * 1.0);
            assert_eq!(sys.u[i], u as f32);
        }
    }

    #[test]
    fn ic_point_examples() {
        let sys = gresho_ic(&default_ic(32));
        // Particle closest to r = 0.2 carries speed close to 1.
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..sys.len() {
            let r = vortex_radius(sys.x[i], sys.y[i], 1.0);
            let d = (r - 0.2).abs();
            if d < best.0 {
                best = (d, i);
            }
        }
        let i = best.1;
        let speed = ((sys.vx[i] as f64).powi(2) + (sys.vy[i] as f64).powi(2)).sqrt();
        assert!((speed - 1.0).abs() < 0.12, "speed {speed}");
        // Outer region: static, plateau pressure.
        let outer = (0..sys.len())
            .find(|&i| vortex_radius(sys.x[i], sys.y[i], 1.0) >= 0.45)
            .unwrap();
        assert_eq!(sys.vx[outer], 0.0);
        assert_eq!(sys.vy[outer], 0.0);
        assert!((sys.pressure[outer] as f64 - (3.0 + 4.0 * (2.0f64).ln())).abs() < 1e-5);
        // Centre pressure 5 -> u = 7.5.
        let central = (0..sys.len())
            .min_by(|&a, &b| {
                vortex_radius(sys.x[a], sys.y[a], 1.0)
                    .total_cmp(&vortex_radius(sys.x[b], sys.y[b], 1.0))
            })
            .unwrap();
        let r = vortex_radius(sys.x[central], sys.y[central], 1.0);
        let (_, p) = analytic_eval(r);
        assert!((sys.u[central] as f64 - 1.5 * p).abs() < 1e-5);
    }

    #[test]
    fn zero_time_error_report_is_exact_for_velocity() {
        let sys = gresho_ic(&default_ic(16));
        let rep = error_report(&sys);
        assert!(rep.l1_v_theta < 1e-7, "{}", rep.l1_v_theta);
        assert_eq!(rep.bin_count.iter().sum::<usize>(), sys.len());
        assert!((rep.plateau_pressure_mean - (3.0 + 4.0 * (2.0f64).ln())).abs() < 1e-4);
    }
}
