//! The benchmark definitions wired to the time solver, plus the shared
//! marching, checkpoint, and output plumbing.

use crate::checkpoint::Checkpoint;
use crate::config::{Case, MaterialCfg, RunConfig};
use iga::assembly::{BodyForce, Mms, Problem};
use iga::diagnostics::{error_norms, write_diag_csv, DiagRow, ExactFields};
use iga::geometry::{
    make_annulus_disk, make_cube, BoundaryTags, Face, FaceBc, Patch, TractionSpec,
};
use iga::infsup::{sweep, write_infsup_csv, SweepCell, SweepGeometry};
use iga::materials::{Isochoric, MaterialModel};
use iga::spaces::{build_mixed_pair, MixedSpace};
use iga::timesolver::{
    gen_alpha, initial_state, Integrator, NewtonMode, NewtonSettings, StepLog, TimeState,
};
use nalgebra::Vector3;
use serde_json::{json, Value};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CaseError {
    /// Bad configuration or checkpoint mismatch; maps to exit code 2.
    Config(String),
    /// The solver failed during the run; maps to exit code 1.
    Run(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CaseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaseError::Config(m) => write!(f, "configuration: {m}"),
            CaseError::Run(m) => write!(f, "run failed: {m}"),
            CaseError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for CaseError {}

impl From<std::io::Error> for CaseError {
    fn from(e: std::io::Error) -> Self {
        CaseError::Io(e)
    }
}

macro_rules! run_err_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CaseError {
            fn from(e: $t) -> Self {
                CaseError::Run(e.to_string())
            }
        }
    )*};
}
run_err_from!(
    iga::timesolver::TimeError,
    iga::assembly::AsmError,
    iga::spaces::SpaceError,
    iga::geometry::GeoError,
    iga::materials::MaterialError
);

pub struct CaseOutcome {
    pub summary: Value,
    pub out_dir: PathBuf,
}

/// Runs one configured case, writing its artifact files into `cfg.out`.
/// `resume` continues a previous run from its checkpoint; the resumed march
/// reproduces the uninterrupted one bit for bit.
pub fn run_case(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    cfg.validate().map_err(|e| CaseError::Config(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out)?;
    match cfg.case {
        Case::Converge => converge(cfg, resume),
        Case::Infsup => {
            if resume.is_some() {
                return Err(CaseError::Config(
                    "the inf-sup sweep has no time march to resume".into(),
                ));
            }
            infsup(cfg)
        }
        Case::Compress => compress(cfg, resume),
        Case::Beam => beam(cfg, resume),
        Case::Disk => disk(cfg, resume),
        Case::Tension => tension(cfg, resume),
        Case::Custom => custom(cfg, resume),
    }
}

fn build_material(cfg: &RunConfig) -> Result<MaterialModel, CaseError> {
    let iso = match cfg.material {
        MaterialCfg::NeoHookean { c1, .. } => Isochoric::NeoHookean { c1 },
        MaterialCfg::MooneyRivlin { c1, c2, .. } => Isochoric::MooneyRivlin { c1, c2 },
        MaterialCfg::Goh { c1, k1, k2, kd, .. } => {
            let phi = cfg.fiber_deg.to_radians();
            let (s, c) = phi.sin_cos();
            Isochoric::Goh {
                c1,
                k1,
                k2,
                kd,
                fibers: [Vector3::new(s, 0.0, c), Vector3::new(-s, 0.0, c)],
                tension_only: true,
            }
        }
    };
    Ok(MaterialModel::new(iso, cfg.material.rho0())?)
}

/// Evaluates a velocity-space vector field at a parametric point.
fn eval_vector_field(space: &MixedSpace, coeffs: &[f64], xi: [f64; 3]) -> Vector3<f64> {
    let mut ev = Vec::with_capacity(3);
    for d in 0..3 {
        let (span, vals) = space.vel.dir[d]
            .eval(xi[d], 0)
            .expect("parametric point inside the patch");
        let first = span - space.vel.dir[d].kv.degree();
        ev.push((first, vals));
    }
    let mut out = Vector3::zeros();
    for (k, rk) in ev[2].1[0].iter().enumerate() {
        for (j, rj) in ev[1].1[0].iter().enumerate() {
            for (i, ri) in ev[0].1[0].iter().enumerate() {
                let ctrl = space
                    .vel
                    .index([ev[0].0 + i, ev[1].0 + j, ev[2].0 + k]);
                let r = ri * rj * rk;
                for c in 0..3 {
                    out[c] += r * coeffs[3 * ctrl + c];
                }
            }
        }
    }
    out
}

struct Marched {
    state: TimeState,
    rows: Vec<DiagRow>,
    logs: Vec<StepLog>,
    end_index: usize,
    t_end: f64,
}

/// Fixed-step march from `start_index` to `t_final`, sampling diagnostics
/// each step. Times are formed as `t_anchor + index * dt` throughout so a
/// resumed march replays the original bit for bit. The observer sees the
/// state after every accepted step.
fn march(
    pr: &Problem,
    cfg: &RunConfig,
    init: TimeState,
    t_anchor: f64,
    start_index: usize,
    mut observe: impl FnMut(&TimeState, Option<&StepLog>),
) -> Result<Marched, CaseError> {
    let n_total = ((cfg.t_final - t_anchor) / cfg.dt).round() as usize;
    if start_index > n_total {
        return Err(CaseError::Config(format!(
            "checkpoint is at step {start_index} but t_final only covers {n_total} steps"
        )));
    }
    let params = gen_alpha(cfg.rho_inf)?;
    let settings = NewtonSettings {
        tol_r: cfg.tol_r,
        tol_a: cfg.tol_a,
        l_max: cfg.l_max,
        mode: if cfg.newton_refresh == 0 {
            NewtonMode::Full
        } else {
            NewtonMode::Modified {
                refresh_every: cfg.newton_refresh,
            }
        },
    };
    let mut state = init;
    state.t = t_anchor + start_index as f64 * cfg.dt;
    let mut rows = Vec::with_capacity(n_total - start_index + 1);
    let mut logs = Vec::with_capacity(n_total - start_index);
    rows.push(DiagRow::sample(pr, &state.u, &state.v, state.t, 0, 0.0, 0.0)?);
    observe(&state, None);
    let mut integ = Integrator::new(pr, params, settings, start_index);
    for n in start_index..n_total {
        let (next, log) = integ.step(&state, cfg.dt)?;
        state = next;
        state.t = t_anchor + (n + 1) as f64 * cfg.dt;
        let r0 = log.res.first().copied().unwrap_or(0.0);
        let rk = log.res.last().copied().unwrap_or(0.0);
        rows.push(DiagRow::sample(
            pr, &state.u, &state.v, state.t, log.iters, r0, rk,
        )?);
        observe(&state, Some(&log));
        logs.push(log);
    }
    let t_end = t_anchor + n_total as f64 * cfg.dt;
    Ok(Marched {
        state,
        rows,
        logs,
        end_index: n_total,
        t_end,
    })
}

/// Initial state: from the checkpoint when resuming, otherwise projected
/// from the given initial fields at t = 0.
#[allow(clippy::type_complexity)]
fn starting_point(
    pr: &Problem,
    cfg: &RunConfig,
    resume: Option<&Path>,
    v0: &dyn Fn([f64; 3]) -> [f64; 3],
    p0: Option<&dyn Fn([f64; 3]) -> f64>,
) -> Result<(TimeState, f64, usize), CaseError> {
    match resume {
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            if cp.case != cfg.case.to_string() {
                return Err(CaseError::Config(format!(
                    "checkpoint belongs to case `{}`, not `{}`",
                    cp.case, cfg.case
                )));
            }
            if (cp.p, cp.a, cp.b, cp.nel) != (cfg.p, cfg.a, cfg.b, cfg.nel) {
                return Err(CaseError::Config(format!(
                    "checkpoint space (p={}, a={}, b={}, nel={:?}) does not match \
                     the configured one (p={}, a={}, b={}, nel={:?})",
                    cp.p, cp.a, cp.b, cp.nel, cfg.p, cfg.a, cfg.b, cfg.nel
                )));
            }
            if cp.dt != cfg.dt {
                return Err(CaseError::Config(format!(
                    "checkpoint step size {} differs from the configured {}",
                    cp.dt, cfg.dt
                )));
            }
            let state = cp.restore(pr).map_err(CaseError::Config)?;
            Ok((state, cp.t_anchor, cp.step_index))
        }
        None => {
            let state = initial_state(pr, v0, p0, 0.0)?;
            Ok((state, 0.0, 0))
        }
    }
}

fn finish_march(cfg: &RunConfig, m: &Marched, t_anchor: f64) -> Result<(), CaseError> {
    write_diag_csv(&cfg.out.join("diag.csv"), &m.rows)?;
    Checkpoint::capture(cfg, &m.state, t_anchor, m.end_index).save(&cfg.out.join("state.chk"))?;
    Ok(())
}

fn write_summary(cfg: &RunConfig, outcome: Value, checks: Value) -> Result<CaseOutcome, CaseError> {
    let summary = json!({
        "case": cfg.case.to_string(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "outcome": outcome,
        "checks": checks,
    });
    let path = cfg.out.join("summary.json");
    let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    serde_json::to_writer_pretty(f, &summary).map_err(std::io::Error::other)?;
    Ok(CaseOutcome {
        summary,
        out_dir: cfg.out.clone(),
    })
}

fn newton_stats(logs: &[StepLog]) -> Value {
    let iters: Vec<usize> = logs.iter().map(|l| l.iters).collect();
    let max_iters = iters.iter().copied().max().unwrap_or(0);
    let mut v = json!({ "max_iters": max_iters, "iters": iters });
    if logs.len() <= 64 {
        let res: Vec<Vec<f64>> = logs.iter().map(|l| l.res.clone()).collect();
        v["residual_histories"] = json!(res);
    }
    v
}

/// Manufactured-solution march on the unit cube: clamped Y and Z faces
/// carry the (vanishing) exact displacement, the X faces carry the exact
/// traction, and the body force closes the momentum balance.
pub fn mms_problem(
    p: usize,
    a: usize,
    b: usize,
    nel: [usize; 3],
    mms: Mms,
) -> Result<Problem, CaseError> {
    let mut faces = Vec::new();
    for dir in [1usize, 2] {
        for max_side in [false, true] {
            faces.push(FaceBc {
                face: Face { dir, max_side },
                fixed: [true; 3],
                traction: None,
            });
        }
    }
    for max_side in [false, true] {
        let nrm = if max_side {
            [1.0, 0.0, 0.0]
        } else {
            [-1.0, 0.0, 0.0]
        };
        faces.push(FaceBc {
            face: Face { dir: 0, max_side },
            fixed: [false; 3],
            traction: Some(TractionSpec::Field(Box::new(move |t, x| {
                mms.traction(t, x, nrm)
            }))),
        });
    }
    let bc = BoundaryTags {
        faces,
        dirichlet: None,
    };
    let patch = make_cube([1.0, 1.0, 1.0], p, [nel[0], nel[1], nel[2]])?;
    let space = build_mixed_pair(patch, p, a, b, nel, bc)?;
    let mat = MaterialModel::new(Isochoric::NeoHookean { c1: mms.c1 }, mms.rho0)?;
    let body: BodyForce = Box::new(move |t, x| mms.body(t, x));
    Ok(Problem::new(space, mat, Some(body))?)
}

fn converge(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let (c1, rho0) = match cfg.material {
        MaterialCfg::NeoHookean { c1, rho0 } => (c1, rho0),
        _ => {
            return Err(CaseError::Config(
                "the convergence study manufactures a neo_hookean solution; \
                 other material models have no exact fields here"
                    .into(),
            ))
        }
    };
    let mms = Mms {
        c1,
        rho0,
        ..Mms::default()
    };
    let pr = mms_problem(cfg.p, cfg.a, cfg.b, cfg.nel, mms)?;
    let v0 = move |x: [f64; 3]| {
        let v = mms.velocity(0.0, x);
        [v[0], v[1], v[2]]
    };
    let p0 = move |x: [f64; 3]| mms.pressure(0.0, x);
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, Some(&p0))?;
    let m = march(&pr, cfg, init, t_anchor, start, |_, _| {})?;
    finish_march(cfg, &m, t_anchor)?;

    let t = m.t_end;
    let uf = move |x: [f64; 3]| mms.displacement(t, x);
    let guf = move |x: [f64; 3]| mms.grad_u(t, x);
    let pf = move |x: [f64; 3]| mms.pressure(t, x);
    let d = mms.d;
    let gpf = move |x: [f64; 3]| {
        let (sx, cx) = (TAU * x[0]).sin_cos();
        let (sy, cy) = (TAU * x[1]).sin_cos();
        let (sz, cz) = (TAU * x[2]).sin_cos();
        d * t * t * TAU * Vector3::new(cx * sy * sz, sx * cy * sz, sx * sy * cz)
    };
    let e = error_norms(
        &pr,
        &m.state.u,
        &m.state.p,
        &ExactFields {
            u: &uf,
            grad_u: &guf,
            p: &pf,
            grad_p: &gpf,
        },
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("errors.csv"))?);
    use std::io::Write;
    writeln!(f, "p,a,b,nel,dt,t,disp_l2,disp_h1,pres_l2,pres_h1,absolute")?;
    writeln!(
        f,
        "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
        cfg.p,
        cfg.a,
        cfg.b,
        cfg.nel[0],
        cfg.dt,
        t,
        e.disp_l2,
        e.disp_h1,
        e.pres_l2,
        e.pres_h1,
        e.absolute.iter().any(|&x| x)
    )?;
    drop(f);

    let max_iters = m.logs.iter().map(|l| l.iters).max().unwrap_or(0);
    let outcome = json!({
        "t_end": m.t_end,
        "errors": {
            "disp_l2": e.disp_l2,
            "disp_h1": e.disp_h1,
            "pres_l2": e.pres_l2,
            "pres_h1": e.pres_h1,
            "absolute": e.absolute,
        },
        "newton": newton_stats(&m.logs),
    });
    let errors_finite = [e.disp_l2, e.disp_h1, e.pres_l2, e.pres_h1]
        .iter()
        .all(|x| x.is_finite());
    let checks = json!({
        "errors_finite": errors_finite,
        "iterations_within_budget": max_iters <= cfg.l_max,
    });
    write_summary(cfg, outcome, checks)
}

fn infsup(cfg: &RunConfig) -> Result<CaseOutcome, CaseError> {
    let geometry = match cfg.geometry.as_str() {
        "cube" => SweepGeometry::Cube,
        "cylinder" => SweepGeometry::Cylinder,
        other => {
            return Err(CaseError::Config(format!(
                "unknown inf-sup geometry `{other}`"
            )))
        }
    };
    let cells: Vec<SweepCell> = [2usize, 4, 8]
        .iter()
        .map(|&nel| SweepCell {
            geometry,
            p: cfg.p,
            a: cfg.a,
            b: cfg.b,
            nel,
        })
        .collect();
    let rows = sweep(&cells);
    write_infsup_csv(&cfg.out.join("infsup.csv"), &rows)?;
    let betas: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "nel": r.cell.nel,
                "n_v": r.n_v,
                "n_p": r.n_p,
                "beta_h": r.beta_h,
                "status": r.status,
            })
        })
        .collect();
    let all_ok = rows.iter().all(|r| r.beta_h.is_some());
    write_summary(
        cfg,
        json!({ "rows": betas }),
        json!({ "all_cells_solved": all_ok }),
    )
}

fn compress(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let load = cfg.load;
    let mut faces = vec![
        FaceBc {
            face: Face {
                dir: 0,
                max_side: false,
            },
            fixed: [true, false, false],
            traction: None,
        },
        FaceBc {
            face: Face {
                dir: 1,
                max_side: false,
            },
            fixed: [false, true, false],
            traction: None,
        },
        FaceBc {
            face: Face {
                dir: 2,
                max_side: false,
            },
            fixed: [false, false, true],
            traction: None,
        },
    ];
    // Quarter-symmetric block: the full load patch is centered on the
    // symmetry axis, so its quadrant covers the first parametric half of
    // the top face in both tangent directions. The load stays referential
    // and ramps to full magnitude at t = 1.
    faces.push(FaceBc {
        face: Face {
            dir: 2,
            max_side: true,
        },
        fixed: [true, true, false],
        traction: Some(TractionSpec::Dead {
            h: [0.0, 0.0, -load],
            ramp: Some(1.0),
            region: Some([[0.0, 0.5], [0.0, 0.5]]),
        }),
    });
    let bc = BoundaryTags {
        faces,
        dirichlet: None,
    };
    let patch = make_cube(cfg.lengths, cfg.p, cfg.nel)?;
    let space = build_mixed_pair(patch, cfg.p, cfg.a, cfg.b, cfg.nel, bc)?;
    let mat = build_material(cfg)?;
    let pr = Problem::new(space, mat, None)?;

    let v0 = |_: [f64; 3]| [0.0; 3];
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, None)?;
    let mut trace: Vec<(f64, f64, f64)> = Vec::new();
    let height = cfg.lengths[2];
    let m = march(&pr, cfg, init, t_anchor, start, |state, _| {
        let tip = eval_vector_field(&pr.space, &state.u, [0.0, 0.0, 1.0]);
        let level = (state.t.min(1.0)) * load;
        trace.push((state.t, level, tip[2]));
    })?;
    finish_march(cfg, &m, t_anchor)?;

    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("loaddisp.csv"))?);
    writeln!(f, "t,load,tip_uz")?;
    for (t, l, uz) in &trace {
        writeln!(f, "{t:.17e},{l:.17e},{uz:.17e}")?;
    }
    drop(f);

    let tip_uz = trace.last().map(|r| r.2).unwrap_or(0.0);
    let compression_percent = 100.0 * tip_uz.abs() / height;
    let max_iters = m.logs.iter().map(|l| l.iters).max().unwrap_or(0);
    let outcome = json!({
        "t_end": m.t_end,
        "tip_uz": tip_uz,
        "compression_percent": compression_percent,
        "newton": newton_stats(&m.logs),
    });
    let checks = json!({
        "all_steps_converged": true,
        "iterations_within_budget": max_iters <= cfg.l_max,
        "tip_moved_down": tip_uz < 0.0,
    });
    write_summary(cfg, outcome, checks)
}

/// Period of an oscillation from the kinetic-energy minima: the energy
/// vanishes twice per cycle, at the two displacement extremes.
fn period_from_kinetic_energy(rows: &[DiagRow]) -> Option<(f64, usize)> {
    let mut minima = Vec::new();
    for i in 1..rows.len().saturating_sub(1) {
        let (a, b, c) = (rows[i - 1].ke, rows[i].ke, rows[i + 1].ke);
        if b <= a && b < c {
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 0.0 {
                 0.5 * (a - c) / denom
            } else {
                0.0
            };
            let dt = rows[i + 1].t - rows[i].t;
            minima.push(rows[i].t + shift.clamp(-1.0, 1.0) * dt);
        }
    }
    if minima.len() < 2 {
        return None;
    }
    let spacings: Vec<f64> = minima.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = spacings.iter().sum::<f64>() / spacings.len() as f64;
    Some((2.0 * mean, minima.len()))
}

fn beam(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let bc = BoundaryTags {
        faces: vec![FaceBc {
            face: Face {
                dir: 2,
                max_side: false,
            },
            fixed: [true; 3],
            traction: None,
        }],
        dirichlet: None,
    };
    let patch = make_cube(cfg.lengths, cfg.p, cfg.nel)?;
    let space = build_mixed_pair(patch, cfg.p, cfg.a, cfg.b, cfg.nel, bc)?;
    let mat = build_material(cfg)?;
    let pr = Problem::new(space, mat, None)?;

    // Release from rest shape with a linear transverse velocity profile.
    let v0 = |x: [f64; 3]| [5.0 / 3.0 * x[2], 0.0, 0.0];
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, None)?;
    let m = march(&pr, cfg, init, t_anchor, start, |_, _| {})?;
    finish_march(cfg, &m, t_anchor)?;

    let te0 = m.rows[0].te;
    let drift = m
        .rows
        .iter()
        .map(|r| (r.te - te0).abs())
        .fold(0.0f64, f64::max)
        / te0.abs().max(f64::MIN_POSITIVE);
    let period = period_from_kinetic_energy(&m.rows);
    let outcome = json!({
        "t_end": m.t_end,
        "ke0": m.rows[0].ke,
        "te0": te0,
        "max_energy_drift_rel": drift,
        "period": period.map(|p| p.0),
        "ke_minima_seen": period.map(|p| p.1).unwrap_or(0),
        "newton": newton_stats(&m.logs),
    });
    let checks = json!({
        "period_observed": period.is_some(),
        "energy_drift_below_percent": drift < 1e-2,
    });
    write_summary(cfg, outcome, checks)
}

fn disk(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let (ri, ro, h) = (0.5, 1.5, 1.0);
    let patch = make_annulus_disk(ri, ro, h, cfg.nel)?;
    let space = build_mixed_pair(patch, cfg.p, cfg.a, cfg.b, cfg.nel, BoundaryTags::default())?;
    let mat = build_material(cfg)?;
    let rho0 = cfg.material.rho0();
    let pr = Problem::new(space, mat, None)?;

    // Rigid spin at 1 rad/s about the z axis.
    let omega = 1.0;
    let v0 = move |x: [f64; 3]| [-omega * x[1], omega * x[0], 0.0];
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, None)?;
    let m = march(&pr, cfg, init, t_anchor, start, |_, _| {})?;
    finish_march(cfg, &m, t_anchor)?;

    let iz = rho0 * std::f64::consts::PI / 2.0 * (ro.powi(4) - ri.powi(4)) * h;
    let lz_exact = iz * omega;
    let ke_exact = 0.5 * iz * omega * omega;
    let te0 = m.rows[0].te;
    let mut max_lin = 0.0f64;
    let mut max_axy = 0.0f64;
    let mut max_az_rel = 0.0f64;
    let mut max_te_rel = 0.0f64;
    for r in &m.rows {
        max_lin = max_lin.max(r.lx.abs()).max(r.ly.abs()).max(r.lz.abs());
        max_axy = max_axy.max(r.ax.abs()).max(r.ay.abs());
        max_az_rel = max_az_rel.max((r.az - lz_exact).abs() / lz_exact);
        max_te_rel = max_te_rel.max((r.te - te0).abs() / te0);
    }
    let outcome = json!({
        "t_end": m.t_end,
        "ke0": m.rows[0].ke,
        "ke_exact": ke_exact,
        "lz_exact": lz_exact,
        "max_abs_linear_momentum": max_lin,
        "max_abs_angular_xy": max_axy,
        "max_rel_angular_z_error": max_az_rel,
        "max_rel_energy_error": max_te_rel,
        "newton": newton_stats(&m.logs),
    });
    let checks = json!({
        "linear_momentum_below_1e-10": max_lin < 1e-10,
        "angular_xy_below_1e-10": max_axy < 1e-10,
        "angular_z_within_1e-6": max_az_rel < 1e-6,
        "energy_within_1e-5": max_te_rel < 1e-5,
        "initial_kinetic_energy_within_0.1_percent":
            (m.rows[0].ke - ke_exact).abs() / ke_exact < 1e-3,
    });
    write_summary(cfg, outcome, checks)
}

fn tension(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let load = cfg.load;
    let faces = vec![
        FaceBc {
            face: Face {
                dir: 0,
                max_side: false,
            },
            fixed: [true, false, false],
            traction: None,
        },
        FaceBc {
            face: Face {
                dir: 1,
                max_side: false,
            },
            fixed: [false, true, false],
            traction: None,
        },
        FaceBc {
            face: Face {
                dir: 2,
                max_side: false,
            },
            fixed: [false, false, true],
            traction: None,
        },
        FaceBc {
            face: Face {
                dir: 2,
                max_side: true,
            },
            fixed: [false; 3],
            traction: Some(TractionSpec::Dead {
                h: [0.0, 0.0, load],
                ramp: Some(cfg.t_final),
                region: None,
            }),
        },
    ];
    let bc = BoundaryTags {
        faces,
        dirichlet: None,
    };
    let patch = make_cube(cfg.lengths, cfg.p, cfg.nel)?;
    let space = build_mixed_pair(patch, cfg.p, cfg.a, cfg.b, cfg.nel, bc)?;
    let mat = build_material(cfg)?;
    let pr = Problem::new(space, mat, None)?;

    let v0 = |_: [f64; 3]| [0.0; 3];
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, None)?;
    let mut trace: Vec<(f64, f64, f64)> = Vec::new();
    let t_ramp = cfg.t_final;
    let m = march(&pr, cfg, init, t_anchor, start, |state, _| {
        let tip = eval_vector_field(&pr.space, &state.u, [0.5, 0.5, 1.0]);
        let level = (state.t / t_ramp).min(1.0) * load;
        trace.push((state.t, level, tip[2]));
    })?;
    finish_march(cfg, &m, t_anchor)?;

    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("loaddisp.csv"))?);
    writeln!(f, "t,load,tip_uz")?;
    for (t, l, uz) in &trace {
        writeln!(f, "{t:.17e},{l:.17e},{uz:.17e}")?;
    }
    drop(f);

    let tip_uz = trace.last().map(|r| r.2).unwrap_or(0.0);
    let outcome = json!({
        "t_end": m.t_end,
        "tip_uz": tip_uz,
        "fiber_deg": cfg.fiber_deg,
        "newton": newton_stats(&m.logs),
    });
    let checks = json!({
        "stretched_along_load": load == 0.0 || tip_uz * load.signum() > 0.0,
    });
    write_summary(cfg, outcome, checks)
}

fn custom(cfg: &RunConfig, resume: Option<&Path>) -> Result<CaseOutcome, CaseError> {
    let mut faces = vec![FaceBc {
        face: Face {
            dir: 2,
            max_side: false,
        },
        fixed: [true; 3],
        traction: None,
    }];
    if cfg.load != 0.0 {
        faces.push(FaceBc {
            face: Face {
                dir: 2,
                max_side: true,
            },
            fixed: [false; 3],
            traction: Some(TractionSpec::Dead {
                h: [0.0, 0.0, cfg.load],
                ramp: Some(cfg.t_final),
                region: None,
            }),
        });
    }
    let bc = BoundaryTags {
        faces,
        dirichlet: None,
    };
    let patch = make_cube(cfg.lengths, cfg.p, cfg.nel)?;
    let space = build_mixed_pair(patch, cfg.p, cfg.a, cfg.b, cfg.nel, bc)?;
    let mat = build_material(cfg)?;
    let pr = Problem::new(space, mat, None)?;
    let v0 = |_: [f64; 3]| [0.0; 3];
    let (init, t_anchor, start) = starting_point(&pr, cfg, resume, &v0, None)?;
    let m = march(&pr, cfg, init, t_anchor, start, |_, _| {})?;
    finish_march(cfg, &m, t_anchor)?;
    let last = m.rows.last().expect("at least the initial row");
    let outcome = json!({
        "t_end": m.t_end,
        "ke": last.ke,
        "pe": last.pe,
        "te": last.te,
        "newton": newton_stats(&m.logs),
    });
    write_summary(cfg, outcome, json!({}))
}

/// Patch helper shared with integration tests.
pub fn unit_cube(p: usize, nel: [usize; 3]) -> Result<Patch, CaseError> {
    Ok(make_cube([1.0, 1.0, 1.0], p, nel)?)
}
