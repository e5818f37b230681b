//! Run configuration: per-case defaults, an optional JSON file, and CLI
//! overrides, resolved in that order into a concrete [`RunConfig`].

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Manufactured-solution march on the unit cube; emits error norms.
    Converge,
    /// Numerical inf-sup sweep over mesh refinements of one space family.
    Infsup,
    /// Quarter-block compression under a ramped dead load.
    Compress,
    /// Clamped beam released with a linear velocity profile.
    Beam,
    /// Free spinning annular disk; conservation benchmark.
    Disk,
    /// Fiber-reinforced cube under uniaxial dead load.
    Tension,
    /// Minimal sandbox: cube, base clamp, zero initial data.
    Custom,
}

impl FromStr for Case {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "converge" => Case::Converge,
            "infsup" => Case::Infsup,
            "compress" => Case::Compress,
            "beam" => Case::Beam,
            "disk" => Case::Disk,
            "tension" => Case::Tension,
            "custom" => Case::Custom,
            _ => {
                return Err(ConfigError::new(
                    "case",
                    format!(
                        "unknown case `{s}` (expected converge | infsup | compress | \
                         beam | disk | tension | custom)"
                    ),
                ))
            }
        })
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Case::Converge => "converge",
            Case::Infsup => "infsup",
            Case::Compress => "compress",
            Case::Beam => "beam",
            Case::Disk => "disk",
            Case::Tension => "tension",
            Case::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Material selection; `rho0` is the referential density in every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MaterialCfg {
    NeoHookean { c1: f64, rho0: f64 },
    MooneyRivlin { c1: f64, c2: f64, rho0: f64 },
    Goh { c1: f64, k1: f64, k2: f64, kd: f64, rho0: f64 },
}

impl MaterialCfg {
    pub fn rho0(&self) -> f64 {
        match *self {
            MaterialCfg::NeoHookean { rho0, .. }
            | MaterialCfg::MooneyRivlin { rho0, .. }
            | MaterialCfg::Goh { rho0, .. } => rho0,
        }
    }
}

/// Fully resolved run parameters. Serializes losslessly, so a config echo
/// in the summary reproduces the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub case: Case,
    /// Pressure degree.
    pub p: usize,
    /// Velocity degree excess over the pressure degree.
    pub a: usize,
    /// Velocity smoothness raise (0 = classical continuity matching).
    pub b: usize,
    pub nel: [usize; 3],
    pub dt: f64,
    pub t_final: f64,
    /// Spectral radius of the integrator at the highest mode.
    pub rho_inf: f64,
    pub tol_r: f64,
    pub tol_a: f64,
    pub l_max: usize,
    pub material: MaterialCfg,
    /// Dead-load magnitude (Pa) for the loaded cases.
    pub load: f64,
    /// Fiber angle from the load axis, degrees, in the X-Z plane.
    pub fiber_deg: f64,
    /// Domain for the inf-sup sweep: "cube" or "cylinder".
    pub geometry: String,
    /// Edge lengths for the cube-based cases.
    pub lengths: [f64; 3],
    /// Tangent refactor cadence in steps; 0 refactors every iteration.
    pub newton_refresh: usize,
    pub out: PathBuf,
    /// Seed for randomized auxiliary checks; unused by the benchmarks.
    pub seed: u64,
}

/// On-disk config: `case` plus any subset of the run parameters. Unset
/// fields fall back to the case defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub case: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nel: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_inf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<MaterialCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_refresh: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// CLI flag overrides; applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub p: Option<usize>,
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub nel: Option<[usize; 3]>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub rho_inf: Option<f64>,
    pub tol_r: Option<f64>,
    pub tol_a: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// The benchmark definition each case runs when no field is overridden.
    pub fn defaults(case: Case) -> RunConfig {
        let base = RunConfig {
            case,
            p: 1,
            a: 1,
            b: 0,
            nel: [4, 4, 4],
            dt: 1e-2,
            t_final: 1.0,
            rho_inf: 0.5,
            tol_r: 1e-8,
            tol_a: 1e-10,
            l_max: 20,
            material: MaterialCfg::NeoHookean { c1: 1.0, rho0: 1.0 },
            load: 0.0,
            fiber_deg: 0.0,
            geometry: "cube".into(),
            lengths: [1.0, 1.0, 1.0],
            newton_refresh: 0,
            out: PathBuf::from("out"),
            seed: 0,
        };
        match case {
            Case::Converge => RunConfig {
                dt: 0.04,
                t_final: 0.2,
                tol_r: 1e-10,
                tol_a: 1e-12,
                ..base
            },
            Case::Infsup => base,
            Case::Compress => RunConfig {
                dt: 5e-3,
                t_final: 1.0,
                tol_r: 1e-3,
                tol_a: 1e-6,
                material: MaterialCfg::NeoHookean {
                    c1: 8.0194e7,
                    rho0: 1e3,
                },
                load: 3.2e8,
                newton_refresh: 10,
                ..base
            },
            Case::Beam => RunConfig {
                nel: [2, 2, 12],
                dt: 2e-4,
                t_final: 1.804,
                material: MaterialCfg::MooneyRivlin {
                    c1: 1.7e7 / 6.0,
                    c2: 1.7e7 / 6.0,
                    rho0: 1.1e3,
                },
                tol_a: 1e-8,
                lengths: [1.0, 1.0, 6.0],
                newton_refresh: 50,
                ..base
            },
            Case::Disk => RunConfig {
                p: 2,
                nel: [32, 4, 4],
                dt: 2e-4,
                t_final: 1.0,
                material: MaterialCfg::NeoHookean { c1: 7.5, rho0: 10.0 },
                tol_a: 1e-8,
                newton_refresh: 50,
                ..base
            },
            Case::Tension => RunConfig {
                nel: [2, 2, 2],
                dt: 2e-2,
                t_final: 1.0,
                material: MaterialCfg::Goh {
                    c1: 7.64e3,
                    k1: 9.966e5,
                    k2: 524.6,
                    kd: 0.226,
                    rho0: 1e3,
                },
                load: 2e3,
                fiber_deg: 49.98,
                tol_r: 1e-6,
                newton_refresh: 5,
                ..base
            },
            Case::Custom => base,
        }
    }

    /// Resolves defaults, then the file, then the CLI flags, and validates.
    /// The file's `case` must agree with the requested one.
    pub fn resolve(
        case: Case,
        file: Option<FileConfig>,
        ov: &Overrides,
    ) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::defaults(case);
        if let Some(f) = file {
            let file_case: Case = f.case.parse()?;
            if file_case != case {
                return Err(ConfigError::new(
                    "case",
                    format!("file says `{file_case}` but the command line says `{case}`"),
                ));
            }
            macro_rules! take {
                ($($k:ident),*) => { $( if let Some(v) = f.$k { cfg.$k = v; } )* };
            }
            take!(
                p, a, b, nel, dt, t_final, rho_inf, tol_r, tol_a, l_max, material, load,
                fiber_deg, geometry, lengths, newton_refresh, out, seed
            );
        }
        macro_rules! take {
            ($($k:ident),*) => { $( if let Some(v) = &ov.$k { cfg.$k = v.clone(); } )* };
        }
        take!(p, a, b, nel, dt, t_final, rho_inf, tol_r, tol_a, out);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.a == 0 {
            return Err(ConfigError::new("a", "velocity degree excess must be >= 1"));
        }
        if self.b > self.a {
            return Err(ConfigError::new(
                "b",
                format!("smoothness raise {} exceeds degree excess {}", self.b, self.a),
            ));
        }
        if self.nel.iter().any(|&n| n == 0) {
            return Err(ConfigError::new("nel", "every direction needs an element"));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("tol_r", self.tol_r),
            ("tol_a", self.tol_a),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::new(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(ConfigError::new(
                "t_final",
                format!("must be nonnegative, got {}", self.t_final),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho_inf) {
            return Err(ConfigError::new(
                "rho_inf",
                format!("spectral radius must lie in [0, 1], got {}", self.rho_inf),
            ));
        }
        if self.l_max == 0 {
            return Err(ConfigError::new("l_max", "need at least one correction"));
        }
        let rho0 = self.material.rho0();
        if !(rho0 > 0.0) {
            return Err(ConfigError::new(
                "material.rho0",
                format!("density must be positive, got {rho0}"),
            ));
        }
        let positive = |field: &str, v: f64| -> Result<(), ConfigError> {
            if !(v > 0.0) || !v.is_finite() {
                Err(ConfigError::new(
                    field,
                    format!("must be positive, got {v}"),
                ))
            } else {
                Ok(())
            }
        };
        match self.material {
            MaterialCfg::NeoHookean { c1, .. } => positive("material.c1", c1)?,
            MaterialCfg::MooneyRivlin { c1, c2, .. } => {
                positive("material.c1", c1)?;
                positive("material.c2", c2)?;
            }
            MaterialCfg::Goh { c1, k1, k2, kd, .. } => {
                positive("material.c1", c1)?;
                if k1 < 0.0 {
                    return Err(ConfigError::new("material.k1", "must be nonnegative"));
                }
                positive("material.k2", k2)?;
                if !(0.0..=1.0 / 3.0).contains(&kd) {
                    return Err(ConfigError::new(
                        "material.kd",
                        format!("dispersion must lie in [0, 1/3], got {kd}"),
                    ));
                }
            }
        }
        if !self.load.is_finite() {
            return Err(ConfigError::new("load", "must be finite"));
        }
        if self.geometry != "cube" && self.geometry != "cylinder" {
            return Err(ConfigError::new(
                "geometry",
                format!("expected cube or cylinder, got `{}`", self.geometry),
            ));
        }
        if self.lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(ConfigError::new("lengths", "edge lengths must be positive"));
        }
        if self.case == Case::Disk && self.p < 2 {
            return Err(ConfigError::new(
                "p",
                "the annulus geometry needs pressure degree >= 2",
            ));
        }
        Ok(())
    }
}
