//! Structure-of-arrays particle state.
//!
//! Persistent physical state is 32-bit; the per-step interaction accumulators
//! are 64-bit so that the final state does not depend on the order in which
//! tasks deposit their partial sums.

use crate::eos::EosIdealGas;
use crate::error::SolverError;
use std::io::Write;

#[derive(Debug, Clone, Default)]
pub struct ParticleSystem {
    /// Periodic box side length L; positions live in [0, L)^3.
    pub box_side: f32,
    pub ids: Vec<u32>,

    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub vx: Vec<f32>,
    pub vy: Vec<f32>,
    pub vz: Vec<f32>,
    pub mass: Vec<f32>,
    pub h: Vec<f32>,
    pub u: Vec<f32>,

    pub rho: Vec<f32>,
    pub pressure: Vec<f32>,
    pub sound_speed: Vec<f32>,
    /// Kernel-weighted number density n_hat = sum_j W_ij.
    pub n_hat: Vec<f32>,
    /// Dimensionless weighted neighbour count n_hat * h^3.
    pub wcount: Vec<f32>,
    /// Variable-h correction factor f.
    pub h_factor: Vec<f32>,
    /// Balsara shear limiter B.
    pub balsara: Vec<f32>,
    /// Evolving artificial viscosity and conduction switches.
    pub alpha_v: Vec<f32>,
    pub alpha_c: Vec<f32>,
    /// Maximal pairwise signal velocity seen this step (max-merged).
    pub v_sig: Vec<f32>,
    /// Normalised velocity divergence and curl from the density loop.
    pub div_v: Vec<f32>,
    pub curl_v: [Vec<f32>; 3],
    /// Divergence at the previous step, for the time derivative of div v.
    pub div_v_prev: Vec<f32>,

    // Per-step raw accumulators (zeroed before each loop pass).
    pub acc_rho: Vec<f64>,
    pub acc_wcount: Vec<f64>,
    pub acc_wcount_dh: Vec<f64>,
    pub acc_rho_dh: Vec<f64>,
    pub acc_div: Vec<f64>,
    pub acc_curl: [Vec<f64>; 3],
    pub acc_lap_u: Vec<f64>,
    pub acc_ax: Vec<f64>,
    pub acc_ay: Vec<f64>,
    pub acc_az: Vec<f64>,
    pub acc_du_dt: Vec<f64>,
    pub acc_h_dt: Vec<f64>,
}

impl ParticleSystem {
    pub fn with_capacity(n: usize, box_side: f32) -> Self {
        let mut s = ParticleSystem {
            box_side,
            ..Default::default()
        };
        s.resize(n);
        s
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn resize(&mut self, n: usize) {
        self.ids.resize(n, 0);
        for v in [
            &mut self.x,
            &mut self.y,
            &mut self.z,
            &mut self.vx,
            &mut self.vy,
            &mut self.vz,
            &mut self.mass,
            &mut self.h,
            &mut self.u,
            &mut self.rho,
            &mut self.pressure,
            &mut self.sound_speed,
            &mut self.n_hat,
            &mut self.wcount,
            &mut self.h_factor,
            &mut self.balsara,
            &mut self.alpha_v,
            &mut self.alpha_c,
            &mut self.v_sig,
            &mut self.div_v,
            &mut self.div_v_prev,
        ] {
            v.resize(n, 0.0);
        }
        for c in self.curl_v.iter_mut() {
            c.resize(n, 0.0);
        }
        for v in [
            &mut self.acc_rho,
            &mut self.acc_wcount,
            &mut self.acc_wcount_dh,
            &mut self.acc_rho_dh,
            &mut self.acc_div,
            &mut self.acc_lap_u,
            &mut self.acc_ax,
            &mut self.acc_ay,
            &mut self.acc_az,
            &mut self.acc_du_dt,
            &mut self.acc_h_dt,
        ] {
            v.resize(n, 0.0);
        }
        for c in self.acc_curl.iter_mut() {
            c.resize(n, 0.0);
        }
    }

    /// Wrap a coordinate into [0, L).
    #[inline]
    pub fn wrap(coord: f32, l: f32) -> f32 {
        let mut c = coord % l;
        if c < 0.0 {
            c += l;
        }
        // The remainder of a value just below a multiple of L can round to L.
        if c >= l {
            c = 0.0;
        }
        c
    }

    /// Minimum-image separation component in f64.
    #[inline(always)]
    pub fn min_image(d: f64, l: f64) -> f64 {
        if d > 0.5 * l {
            d - l
        } else if d < -0.5 * l {
            d + l
        } else {
            d
        }
    }

    /// Zero every per-step interaction accumulator of one cell range.
    pub fn zero_accumulators_range(&mut self, first: usize, count: usize) {
        let r = first..first + count;
        for a in [
            &mut self.acc_rho,
            &mut self.acc_wcount,
            &mut self.acc_wcount_dh,
            &mut self.acc_rho_dh,
            &mut self.acc_div,
            &mut self.acc_lap_u,
            &mut self.acc_ax,
            &mut self.acc_ay,
            &mut self.acc_az,
            &mut self.acc_du_dt,
            &mut self.acc_h_dt,
        ] {
            a[r.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        for c in self.acc_curl.iter_mut() {
            c[r.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        self.v_sig[r].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Apply a permutation to every per-particle array: element `i` of the
    /// result is element `perm[i]` of the input.
    pub fn apply_permutation(&mut self, perm: &[usize]) {
        assert_eq!(perm.len(), self.len());
        fn permute<T: Copy + Default>(v: &mut Vec<T>, perm: &[usize], scratch: &mut Vec<T>) {
            scratch.clear();
            scratch.extend(perm.iter().map(|&p| v[p]));
            std::mem::swap(v, scratch);
        }
        let mut fs: Vec<f32> = Vec::with_capacity(perm.len());
        let mut ds: Vec<f64> = Vec::with_capacity(perm.len());
        let mut us: Vec<u32> = Vec::with_capacity(perm.len());
        permute(&mut self.ids, perm, &mut us);
        for v in [
            &mut self.x,
            &mut self.y,
            &mut self.z,
            &mut self.vx,
            &mut self.vy,
            &mut self.vz,
            &mut self.mass,
            &mut self.h,
            &mut self.u,
            &mut self.rho,
            &mut self.pressure,
            &mut self.sound_speed,
            &mut self.n_hat,
            &mut self.wcount,
            &mut self.h_factor,
            &mut self.balsara,
            &mut self.alpha_v,
            &mut self.alpha_c,
            &mut self.v_sig,
            &mut self.div_v,
            &mut self.div_v_prev,
        ] {
            permute(v, perm, &mut fs);
        }
        for c in self.curl_v.iter_mut() {
            permute(c, perm, &mut fs);
        }
        for v in [
            &mut self.acc_rho,
            &mut self.acc_wcount,
            &mut self.acc_wcount_dh,
            &mut self.acc_rho_dh,
            &mut self.acc_div,
            &mut self.acc_lap_u,
            &mut self.acc_ax,
            &mut self.acc_ay,
            &mut self.acc_az,
            &mut self.acc_du_dt,
            &mut self.acc_h_dt,
        ] {
            permute(v, perm, &mut ds);
        }
        for c in self.acc_curl.iter_mut() {
            permute(c, perm, &mut ds);
        }
    }

    /// Refresh pressure and sound speed for a contiguous range.
    pub fn refresh_eos(&mut self, eos: &EosIdealGas, first: usize, count: usize) {
        for i in first..first + count {
            let (p, cs) = eos.update_unchecked(self.rho[i].max(f32::MIN_POSITIVE) as f64, self.u[i] as f64);
            self.pressure[i] = p as f32;
            self.sound_speed[i] = cs as f32;
        }
    }

    /// Check the completed-step invariants; returns an internal error naming
    /// the first offending particle.
    pub fn check_state_invariants(&self) -> Result<(), SolverError> {
        for i in 0..self.len() {
            if !(self.mass[i] > 0.0) || !(self.h[i] > 0.0) || !(self.rho[i] >= 0.0) || !(self.u[i] >= 0.0)
            {
                return Err(SolverError::Internal(format!(
                    "particle {} violates state invariants: m {} h {} rho {} u {}",
                    self.ids[i], self.mass[i], self.h[i], self.rho[i], self.u[i]
                )));
            }
            let l = self.box_side;
            if !(0.0..l).contains(&self.x[i])
                || !(0.0..l).contains(&self.y[i])
                || !(0.0..l).contains(&self.z[i])
            {
                return Err(SolverError::Internal(format!(
                    "particle {} outside periodic box: ({}, {}, {})",
                    self.ids[i], self.x[i], self.y[i], self.z[i]
                )));
            }
        }
        Ok(())
    }

    /// Columnar snapshot: one particle per row, header naming the columns.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "id x y z vx vy vz m h rho u P")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {} {} {}",
                self.ids[i],
                self.x[i],
                self.y[i],
                self.z[i],
                self.vx[i],
                self.vy[i],
                self.vz[i],
                self.mass[i],
                self.h[i],
                self.rho[i],
                self.u[i],
                self.pressure[i]
            )?;
        }
        Ok(())
    }
}
