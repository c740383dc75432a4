//! Run configuration: defaults, plain-text key = value files, and flag
//! overrides (flags beat file entries, file entries beat defaults).

use crate::error::SolverError;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Cpu,
    OffloadHost,
    OffloadTrace,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self, SolverError> {
        match s {
            "cpu" => Ok(RunMode::Cpu),
            "offload-host" => Ok(RunMode::OffloadHost),
            "offload-trace" => Ok(RunMode::OffloadTrace),
            _ => Err(SolverError::Config(format!(
                "unknown mode '{s}' (expected cpu, offload-host or offload-trace)"
            ))),
        }
    }

    pub fn is_offload(&self) -> bool {
        !matches!(self, RunMode::Cpu)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceModelChoice {
    NvlinkLike,
    Pcie4Like,
    Custom(PathBuf),
}

impl DeviceModelChoice {
    pub fn parse(s: &str) -> Result<Self, SolverError> {
        match s {
            "nvlink-like" => Ok(DeviceModelChoice::NvlinkLike),
            "pcie4-like" => Ok(DeviceModelChoice::Pcie4Like),
            other => {
                let p = PathBuf::from(other);
                if p.exists() {
                    Ok(DeviceModelChoice::Custom(p))
                } else {
                    Err(SolverError::Config(format!(
                        "unknown device model '{other}' (expected nvlink-like, pcie4-like or a \
                         readable file path)"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub resolution: usize,
    pub box_side: f32,
    pub rho0: f64,
    pub gamma: f64,
    pub t_end: f64,
    pub max_steps: usize,
    pub mode: RunMode,
    pub workers: usize,
    pub sp_self: usize,
    pub sb_self: usize,
    pub sp_pair: usize,
    pub sb_pair: usize,
    /// 0 = derive from resolution (resolution / 8, at least 3).
    pub top_grid: usize,
    pub split_threshold: usize,
    pub rebuild_interval: usize,
    pub gamma_k: f64,
    pub eta: f64,
    pub visc_beta: f64,
    pub alpha_v_max: f64,
    pub alpha_v_init: f64,
    pub visc_decay_l: f64,
    pub beta_c: f64,
    pub alpha_c_min: f64,
    pub alpha_c_max: f64,
    pub c_cfl: f64,
    pub hsolve_tol: f64,
    pub hsolve_max_newton: u32,
    pub snapshot_out: Option<PathBuf>,
    pub snapshot_every: usize,
    pub timeline_out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    pub device_model: DeviceModelChoice,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            resolution: 32,
            box_side: 1.0,
            rho0: 1.0,
            gamma: 5.0 / 3.0,
            t_end: 0.05,
            max_steps: 100_000,
            mode: RunMode::Cpu,
            workers: 8,
            sp_self: 256,
            sb_self: 64,
            sp_pair: 128,
            sb_pair: 32,
            top_grid: 0,
            split_threshold: 64,
            rebuild_interval: 10,
            gamma_k: 2.0,
            eta: 1.2348,
            visc_beta: 3.0,
            alpha_v_max: 2.0,
            alpha_v_init: 0.1,
            visc_decay_l: 0.05,
            beta_c: 1.0,
            alpha_c_min: 0.0,
            alpha_c_max: 1.0,
            c_cfl: 0.1,
            hsolve_tol: 1e-4,
            hsolve_max_newton: 30,
            snapshot_out: None,
            snapshot_every: 0,
            timeline_out: None,
            trace_out: None,
            device_model: DeviceModelChoice::NvlinkLike,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn effective_top_grid(&self) -> usize {
        if self.top_grid > 0 {
            self.top_grid
        } else {
            (self.resolution / 8).max(3)
        }
    }

    fn set(&mut self, key: &str, value: &str, at: &str) -> Result<(), SolverError> {
        let bad = |what: &str| {
            SolverError::Config(format!("{at}: malformed value '{value}' for key '{key}' ({what})"))
        };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(stringify!($ty)))?
            };
        }
        match key {
            "resolution" => self.resolution = num!(usize),
            "t_end" => self.t_end = num!(f64),
            "max_steps" => self.max_steps = num!(usize),
            "mode" => self.mode = RunMode::parse(value)?,
            "workers" => self.workers = num!(usize),
            "sp_self" => self.sp_self = num!(usize),
            "sb_self" => self.sb_self = num!(usize),
            "sp_pair" => self.sp_pair = num!(usize),
            "sb_pair" => self.sb_pair = num!(usize),
            "top_grid" => self.top_grid = num!(usize),
            "split_threshold" => self.split_threshold = num!(usize),
            "rebuild_interval" => self.rebuild_interval = num!(usize),
            "gamma" => self.gamma = num!(f64),
            "gamma_k" => self.gamma_k = num!(f64),
            "eta" => self.eta = num!(f64),
            "visc_beta" => self.visc_beta = num!(f64),
            "alpha_v_max" => self.alpha_v_max = num!(f64),
            "alpha_v_init" => self.alpha_v_init = num!(f64),
            "visc_decay_l" => self.visc_decay_l = num!(f64),
            "beta_c" => self.beta_c = num!(f64),
            "alpha_c_min" => self.alpha_c_min = num!(f64),
            "alpha_c_max" => self.alpha_c_max = num!(f64),
            "c_cfl" => self.c_cfl = num!(f64),
            "hsolve_tol" => self.hsolve_tol = num!(f64),
            "hsolve_max_newton" => self.hsolve_max_newton = num!(u32),
            "snapshot_out" => self.snapshot_out = Some(PathBuf::from(value)),
            "snapshot_every" => self.snapshot_every = num!(usize),
            "timeline_out" => self.timeline_out = Some(PathBuf::from(value)),
            "trace_out" => self.trace_out = Some(PathBuf::from(value)),
            "device_model" => self.device_model = DeviceModelChoice::parse(value)?,
            "seed" => self.seed = num!(u64),
            _ => {
                return Err(SolverError::Config(format!("{at}: unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.resolution < 8 {
            return Err(SolverError::Config(format!(
                "resolution must be at least 8, got {}",
                self.resolution
            )));
        }
        if self.t_end < 0.0 || !self.t_end.is_finite() {
            return Err(SolverError::Config(format!("t_end must be non-negative, got {}", self.t_end)));
        }
        if self.workers == 0 {
            return Err(SolverError::Config("workers must be at least 1".into()));
        }
        if self.sb_self > self.sp_self {
            return Err(SolverError::Config(format!(
                "sb_self ({}) must not exceed sp_self ({})",
                self.sb_self, self.sp_self
            )));
        }
        if self.sb_pair > self.sp_pair {
            return Err(SolverError::Config(format!(
                "sb_pair ({}) must not exceed sp_pair ({})",
                self.sb_pair, self.sp_pair
            )));
        }
        if self.gamma <= 1.0 {
            return Err(SolverError::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if self.gamma_k <= 0.0 || self.eta <= 0.0 || self.c_cfl <= 0.0 {
            return Err(SolverError::Config(
                "gamma_k, eta and c_cfl must all be positive".into(),
            ));
        }
        if self.top_grid > 0 && self.top_grid < 3 {
            return Err(SolverError::Config(format!(
                "top_grid must be at least 3 (or 0 for automatic), got {}",
                self.top_grid
            )));
        }
        if self.trace_out.is_some() && self.mode != RunMode::OffloadTrace {
            return Err(SolverError::Config(
                "trace_out is only meaningful in offload-trace mode".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a config file (if any) and apply flag overrides on top of defaults.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, SolverError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SolverError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{}:{}", path.display(), lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SolverError::Config(format!("{at}: expected key = value")))?;
            cfg.set(key.trim(), value.trim(), &at)?;
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value, "flag")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_without_file_or_flags() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.sp_self, 256);
        assert_eq!(cfg.mode, RunMode::Cpu);
        assert_eq!(cfg.effective_top_grid(), 4);
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = tempfile_path("cfg_empty");
        drop(f.1);
        let cfg = parse_config(Some(&f.0), &[]).unwrap();
        assert_eq!(cfg.resolution, RunConfig::default().resolution);
        assert_eq!(cfg.sb_pair, RunConfig::default().sb_pair);
        std::fs::remove_file(&f.0).ok();
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let mut f = tempfile_path("cfg_precedence");
        writeln!(f.1, "sp_self = 512\nresolution = 16").unwrap();
        let cfg = parse_config(
            Some(&f.0),
            &[("sp_self".to_string(), "256".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.sp_self, 256);
        assert_eq!(cfg.resolution, 16);
        std::fs::remove_file(&f.0).ok();
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let mut f = tempfile_path("cfg_unknown");
        writeln!(f.1, "not_a_key = 7").unwrap();
        let err = parse_config(Some(&f.0), &[]).unwrap_err().to_string();
        assert!(err.contains("not_a_key"), "{err}");
        assert!(err.contains(":1"), "{err}");
        std::fs::remove_file(&f.0).ok();
    }

    #[test]
    fn bundle_larger_than_pack_is_rejected_naming_both_keys() {
        let err = parse_config(
            None,
            &[
                ("sp_self".to_string(), "64".to_string()),
                ("sb_self".to_string(), "128".to_string()),
            ],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("sb_self"), "{err}");
        assert!(err.contains("sp_self"), "{err}");
    }

    #[test]
    fn malformed_value_names_key() {
        let err = parse_config(None, &[("workers".to_string(), "many".to_string())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("workers"), "{err}");
    }

    fn tempfile_path(tag: &str) -> (std::path::PathBuf, std::fs::File) {
        let path = std::env::temp_dir().join(format!("tasksph_{tag}_{}.cfg", std::process::id()));
        let f = std::fs::File::create(&path).unwrap();
        (path, f)
    }
}
