//! Generalized-alpha stepping with the segregated predictor multi-corrector
//! Newton loop and the sparse 2x2 block solve.
//!
//! The kinematic equation is eliminated algebraically: each corrector solves
//! for (dvdot, dpdot) and recovers dudot = (alpha_f gamma dt / alpha_m) dvdot,
//! so only the momentum and pressure residuals are ever assembled.

use crate::assembly::{
    assemble_mass, assemble_residual, assemble_tangent, AsmError, Fields, Problem, TangentScales,
};
use crate::diagnostics::DiagRow;
use crate::spaces::{l2_project, project_pressure, ProjectTarget, SpaceError};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers as sp;
use faer::sparse::SparseColMatRef;
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no convergence at t = {t} after {} iterations; residual history {history:?}", history.len() - 1)]
    NonConvergence { t: f64, history: Vec<f64> },
    #[error("linear solve failed ({0}); the saddle system may carry a zero pivot")]
    Singular(String),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Time integration parameters derived from the spectral radius at infinity.
#[derive(Debug, Clone, Copy)]
pub struct GenAlphaParams {
    pub rho_inf: f64,
    pub alpha_m: f64,
    pub alpha_f: f64,
    pub gamma: f64,
}

pub fn gen_alpha(rho_inf: f64) -> Result<GenAlphaParams, TimeError> {
    if !(0.0..=1.0).contains(&rho_inf) {
        return Err(TimeError::Config(format!(
            "spectral radius {rho_inf} outside [0, 1]"
        )));
    }
    Ok(GenAlphaParams {
        rho_inf,
        alpha_m: 0.5 * (3.0 - rho_inf) / (1.0 + rho_inf),
        alpha_f: 1.0 / (1.0 + rho_inf),
        gamma: 1.0 / (1.0 + rho_inf),
    })
}

/// Full control-coefficient arrays of the solution and its rates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeState {
    pub t: f64,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub udot: Vec<f64>,
    pub pdot: Vec<f64>,
    pub vdot: Vec<f64>,
}

impl TimeState {
    pub fn zeros(pr: &Problem, t: f64) -> TimeState {
        let nv = 3 * pr.space.n_vel_ctrl();
        let np = pr.space.n_pres_ctrl();
        TimeState {
            t,
            u: vec![0.0; nv],
            p: vec![0.0; np],
            v: vec![0.0; nv],
            udot: vec![0.0; nv],
            pdot: vec![0.0; np],
            vdot: vec![0.0; nv],
        }
    }
}

/// Same-y predictor with a kinematic reset. Pressure and velocity keep their
/// values and get rates scaled by (gamma-1)/gamma; Dirichlet data advance to
/// t_{n+1}. Then (u, udot) are overwritten so the stage identity
/// udot_{n+alpha_m} = v_{n+alpha_f} holds exactly at iterate zero. The
/// corrector increments preserve that identity, which is what justifies
/// dropping the kinematic residual from the Newton system; a predictor that
/// merely scales udot leaves the identity violated forever and lets steps
/// with small momentum residual pass without moving the body.
pub fn predict(pr: &Problem, state: &TimeState, dt: f64, params: &GenAlphaParams) -> TimeState {
    assert!(params.gamma > 0.0);
    assert!(params.alpha_m > 0.0);
    let mut next = state.clone();
    next.t = state.t + dt;
    let scale = (params.gamma - 1.0) / params.gamma;
    for x in next.vdot.iter_mut().chain(next.pdot.iter_mut()) {
        *x *= scale;
    }
    for i in 0..next.u.len() {
        let v_af = state.v[i] + params.alpha_f * (next.v[i] - state.v[i]);
        let udot_next = state.udot[i] + (v_af - state.udot[i]) / params.alpha_m;
        next.udot[i] = udot_next;
        next.u[i] =
            state.u[i] + dt * state.udot[i] + params.gamma * dt * (udot_next - state.udot[i]);
    }
    // prescribed velocity data are constant in time: v stays at g, vdot = 0,
    // u advances linearly, udot tracks the boundary velocity exactly
    let space = &pr.space;
    for (ctrl, cls) in space.vmap.class.iter().enumerate() {
        for c in 0..3 {
            if let crate::spaces::DofClass::Fixed(g) = cls[c] {
                next.v[3 * ctrl + c] = g;
                next.vdot[3 * ctrl + c] = 0.0;
                next.udot[3 * ctrl + c] = g;
                next.u[3 * ctrl + c] = state.u[3 * ctrl + c] + dt * g;
            }
        }
    }
    space.sync_vel_slaves(&mut next.u);
    space.sync_vel_slaves(&mut next.v);
    space.sync_vel_slaves(&mut next.udot);
    space.sync_vel_slaves(&mut next.vdot);
    next
}

/// Intermediate-stage fields: y at t_{n+alpha_f}, rates at t_{n+alpha_m}.
fn stage_fields(
    sn: &TimeState,
    s1: &TimeState,
    params: &GenAlphaParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let af = params.alpha_f;
    let am = params.alpha_m;
    let mix = |a: &[f64], b: &[f64], w: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
    };
    (
        mix(&sn.u, &s1.u, af),
        mix(&sn.p, &s1.p, af),
        mix(&sn.v, &s1.v, af),
        mix(&sn.vdot, &s1.vdot, am),
    )
}

/// Reusable sparse LU of the combined saddle matrix. The symbolic analysis
/// is computed once per pattern; numeric refactorizations are on demand.
pub struct BlockLu {
    symbolic: Option<sp::SymbolicLu<usize>>,
    numeric: Option<sp::Lu<usize, f64>>,
    /// Values of the last factored matrix, kept for the residual check.
    vals: Vec<f64>,
}

impl Default for BlockLu {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockLu {
    pub fn new() -> BlockLu {
        BlockLu {
            symbolic: None,
            numeric: None,
            vals: Vec::new(),
        }
    }

    pub fn is_factored(&self) -> bool {
        self.numeric.is_some()
    }

    pub fn factor(&mut self, pr: &Problem, vals: &[f64]) -> Result<(), TimeError> {
        let mat = pr.mat_ref(vals);
        if self.symbolic.is_none() {
            self.symbolic = Some(
                sp::SymbolicLu::try_new(mat.symbolic())
                    .map_err(|e| TimeError::Singular(format!("symbolic analysis: {e:?}")))?,
            );
        }
        let sym = self.symbolic.clone().unwrap();
        // Drop the stale factor first; holding two numeric factors at once
        // doubles the peak footprint on large meshes.
        self.numeric = None;
        self.numeric = Some(
            sp::Lu::try_new_with_symbolic(sym, mat)
                .map_err(|e| TimeError::Singular(format!("numeric factorization: {e:?}")))?,
        );
        self.vals.clear();
        self.vals.extend_from_slice(vals);
        Ok(())
    }

    /// Solves [A B; C 0] (dvdot, dpdot) = -(rm, rp) and verifies the
    /// residual of the factorization actually used.
    pub fn solve(
        &self,
        pr: &Problem,
        rm: &[f64],
        rp: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), TimeError> {
        let lu = self
            .numeric
            .as_ref()
            .ok_or_else(|| TimeError::Singular("solve before factorization".into()))?;
        let n = rm.len() + rp.len();
        let mut rhs = Mat::<f64>::zeros(n, 1);
        for (i, x) in rm.iter().chain(rp.iter()).enumerate() {
            rhs[(i, 0)] = -x;
        }
        let sol = lu.solve(&rhs);
        check_solution(pr.mat_ref(&self.vals), &rhs, &sol)?;
        let dv = (0..rm.len()).map(|i| sol[(i, 0)]).collect();
        let dp = (0..rp.len()).map(|i| sol[(rm.len() + i, 0)]).collect();
        Ok((dv, dp))
    }
}

fn check_solution(
    mat: SparseColMatRef<'_, usize, f64>,
    rhs: &Mat<f64>,
    sol: &Mat<f64>,
) -> Result<(), TimeError> {
    let n = rhs.nrows();
    let mut resid = rhs.clone();
    // resid -= K sol, walking the CSC pattern
    let sym = mat.symbolic();
    for c in 0..n {
        let xc = sol[(c, 0)];
        if xc == 0.0 {
            continue;
        }
        let range = sym.col_range(c);
        for (k, &r) in sym.row_idx()[range.clone()].iter().enumerate() {
            resid[(r, 0)] -= mat.val()[range.start + k] * xc;
        }
    }
    let rn = resid.norm_l2();
    let bn = rhs.norm_l2();
    if !rn.is_finite() || rn > 1e-10 * bn.max(1e-300) {
        return Err(TimeError::Singular(format!(
            "block solve residual {rn:.3e} vs rhs {bn:.3e}; zero pivot suspected"
        )));
    }
    Ok(())
}

/// One-shot block solve on an arbitrary combined matrix (velocity rows
/// first). The saddle structure requires a nonempty coupling block.
pub fn block_solve(
    mat: SparseColMatRef<'_, usize, f64>,
    rm: &[f64],
    rp: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), TimeError> {
    let n = rm.len() + rp.len();
    if mat.nrows() != n || mat.ncols() != n {
        return Err(TimeError::Config(format!(
            "matrix is {}x{} but residuals give n = {n}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let sym = sp::SymbolicLu::try_new(mat.symbolic())
        .map_err(|e| TimeError::Singular(format!("symbolic analysis: {e:?}")))?;
    let lu = sp::Lu::try_new_with_symbolic(sym, mat)
        .map_err(|e| TimeError::Singular(format!("numeric factorization: {e:?}")))?;
    let mut rhs = Mat::<f64>::zeros(n, 1);
    for (i, x) in rm.iter().chain(rp.iter()).enumerate() {
        rhs[(i, 0)] = -x;
    }
    let sol = lu.solve(&rhs);
    check_solution(mat, &rhs, &sol)?;
    Ok((
        (0..rm.len()).map(|i| sol[(i, 0)]).collect(),
        (0..rp.len()).map(|i| sol[(rm.len() + i, 0)]).collect(),
    ))
}

#[derive(Debug, Clone, Copy)]
pub enum NewtonMode {
    /// Refactor the tangent at every corrector iteration.
    Full,
    /// Refactor at the first corrector of every `refresh_every`-th step
    /// (counted by absolute step index, so restarted runs stay aligned)
    /// and whenever convergence stalls.
    Modified { refresh_every: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub tol_r: f64,
    pub tol_a: f64,
    pub l_max: usize,
    pub mode: NewtonMode,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol_r: 1e-8,
            tol_a: 1e-10,
            l_max: 20,
            mode: NewtonMode::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepLog {
    /// Corrector iterations actually applied.
    pub iters: usize,
    /// Residual norms, res[0] before the first correction.
    pub res: Vec<f64>,
}

/// Marching state: holds the factorization across steps for the modified
/// Newton mode.
pub struct Integrator<'p> {
    pr: &'p Problem,
    pub params: GenAlphaParams,
    pub settings: NewtonSettings,
    lu: BlockLu,
    step_index: usize,
}

impl<'p> Integrator<'p> {
    pub fn new(
        pr: &'p Problem,
        params: GenAlphaParams,
        settings: NewtonSettings,
        start_index: usize,
    ) -> Integrator<'p> {
        Integrator {
            pr,
            params,
            settings,
            lu: BlockLu::new(),
            step_index: start_index,
        }
    }

    pub fn step(&mut self, state: &TimeState, dt: f64) -> Result<(TimeState, StepLog), TimeError> {
        let pr = self.pr;
        let params = self.params;
        let mut s1 = predict(pr, state, dt, &params);
        let t_af = state.t + params.alpha_f * dt;
        let sc = TangentScales {
            alpha_m: params.alpha_m,
            alpha_f: params.alpha_f,
            gamma: params.gamma,
            dt,
        };
        let c_udot = params.alpha_f * params.gamma * dt / params.alpha_m;
        let c_y = params.gamma * dt;
        let mut history: Vec<f64> = Vec::new();
        // increments applied since the factorization in use was built
        let mut stale_by = usize::MAX;
        for l in 0..=self.settings.l_max {
            let (u_af, p_af, v_af, vd_am) = stage_fields(state, &s1, &params);
            let fields = Fields::Discrete {
                u: &u_af,
                p: &p_af,
                v: &v_af,
                vdot: &vd_am,
            };
            let r = assemble_residual(pr, &fields, t_af)?;
            let rn = r.norm();
            history.push(rn);
            let r0 = history[0];
            if rn <= self.settings.tol_a || rn <= self.settings.tol_r * r0 {
                self.step_index += 1;
                return Ok((
                    s1,
                    StepLog {
                        iters: l,
                        res: history,
                    },
                ));
            }
            if l == self.settings.l_max {
                break;
            }
            let refactor = match self.settings.mode {
                NewtonMode::Full => true,
                NewtonMode::Modified { refresh_every } => {
                    let due = l == 0
                        && (!self.lu.is_factored()
                            || self.step_index % refresh_every.max(1) == 0);
                    // poor contraction under a stale tangent: rebuild at the
                    // current iterate (state-determined, so still replayable)
                    let stalled = stale_by >= 1 && l >= 1 && rn > 0.5 * history[l - 1];
                    due || stalled
                }
            };
            if refactor {
                let vals = assemble_tangent(pr, &fields, sc, t_af)?;
                self.lu.factor(pr, &vals)?;
                stale_by = 0;
            }
            let (dv, dp) = self.lu.solve(pr, &r.rm, &r.rp)?;
            stale_by = stale_by.saturating_add(1);
            let space = &pr.space;
            space.add_vel_increment(&mut s1.vdot, &dv, 1.0);
            space.add_vel_increment(&mut s1.udot, &dv, c_udot);
            space.add_vel_increment(&mut s1.v, &dv, c_y);
            space.add_vel_increment(&mut s1.u, &dv, c_y * c_udot);
            space.add_pres_increment(&mut s1.pdot, &dp, 1.0);
            space.add_pres_increment(&mut s1.p, &dp, c_y);
        }
        Err(TimeError::NonConvergence {
            t: s1.t,
            history,
        })
    }
}

/// Single time step with a transient integrator (the run loop keeps its own
/// to reuse factorizations).
pub fn solve_step(
    pr: &Problem,
    state: &TimeState,
    dt: f64,
    params: GenAlphaParams,
    settings: NewtonSettings,
) -> Result<(TimeState, StepLog), TimeError> {
    Integrator::new(pr, params, settings, 0).step(state, dt)
}

/// Initial state: u = 0, v and p from L2 projection, consistent vdot from
/// the mass solve M vdot = -R^m(vdot = 0), udot = v, pdot = 0.
pub fn initial_state(
    pr: &Problem,
    v0: &dyn Fn([f64; 3]) -> [f64; 3],
    p0: Option<&dyn Fn([f64; 3]) -> f64>,
    t0: f64,
) -> Result<TimeState, TimeError> {
    let space = &pr.space;
    let mut st = TimeState::zeros(pr, t0);
    st.v = l2_project(space, ProjectTarget::Velocity, v0)?;
    if let Some(p0) = p0 {
        st.p = project_pressure(space, p0)?;
    }
    // the projection is global; pin prescribed dofs so the march starts on
    // the boundary data exactly
    for (ctrl, cls) in space.vmap.class.iter().enumerate() {
        for c in 0..3 {
            if let crate::spaces::DofClass::Fixed(g) = cls[c] {
                st.v[3 * ctrl + c] = g;
            }
        }
    }
    space.sync_vel_slaves(&mut st.v);
    st.udot = st.v.clone();
    let fields = Fields::Discrete {
        u: &st.u,
        p: &st.p,
        v: &st.v,
        vdot: &st.vdot,
    };
    let r = assemble_residual(pr, &fields, t0)?;
    if pr.pattern.n_v > 0 {
        let mass = assemble_mass(pr)?;
        let llt = mass
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| TimeError::Singular(format!("mass factorization: {e:?}")))?;
        let mut rhs = Mat::<f64>::zeros(pr.pattern.n_v, 1);
        for (i, x) in r.rm.iter().enumerate() {
            rhs[(i, 0)] = -x;
        }
        let sol = llt.solve(&rhs);
        let acc: Vec<f64> = (0..pr.pattern.n_v).map(|i| sol[(i, 0)]).collect();
        space.add_vel_increment(&mut st.vdot, &acc, 1.0);
    }
    Ok(st)
}

#[derive(Debug, Clone)]
pub struct MarchConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub params: GenAlphaParams,
    pub settings: NewtonSettings,
    /// Absolute index of the first step (restarts continue the count).
    pub start_index: usize,
    /// Time at step index zero. Times are always formed as
    /// `t_anchor + index * dt`, never accumulated, so a restarted march
    /// replays the uninterrupted one bit for bit.
    pub t_anchor: f64,
}

impl MarchConfig {
    pub fn time_at(&self, index: usize) -> f64 {
        self.t_anchor + index as f64 * self.dt
    }
}

pub struct MarchResult {
    pub state: TimeState,
    pub rows: Vec<DiagRow>,
    pub logs: Vec<StepLog>,
}

/// Fixed-step marching with per-step diagnostics. Zero steps emits the
/// initial diagnostics row only.
pub fn run(pr: &Problem, init: TimeState, cfg: &MarchConfig) -> Result<MarchResult, TimeError> {
    let mut rows = Vec::with_capacity(cfg.n_steps + 1);
    let mut logs = Vec::with_capacity(cfg.n_steps);
    rows.push(DiagRow::sample(pr, &init.u, &init.v, init.t, 0, 0.0, 0.0)?);
    let mut integ = Integrator::new(pr, cfg.params, cfg.settings, cfg.start_index);
    let mut state = init;
    state.t = cfg.time_at(cfg.start_index);
    for n in 0..cfg.n_steps {
        let (next, log) = integ.step(&state, cfg.dt)?;
        state = next;
        state.t = cfg.time_at(cfg.start_index + n + 1);
        let r0 = log.res.first().copied().unwrap_or(0.0);
        let rk = log.res.last().copied().unwrap_or(0.0);
        rows.push(DiagRow::sample(
            pr,
            &state.u,
            &state.v,
            state.t,
            log.iters,
            r0,
            rk,
        )?);
        logs.push(log);
    }
    Ok(MarchResult { state, rows, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Mms;
    use crate::geometry::{make_cube, BoundaryTags, Face, FaceBc, TractionSpec};
    use crate::materials::{Isochoric, MaterialModel};
    use crate::spaces::build_mixed_pair;
    use faer::sparse::{SparseColMat, Triplet};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gen_alpha_matches_hand_values() {
        let g = gen_alpha(1.0).unwrap();
        assert_eq!((g.alpha_m, g.alpha_f, g.gamma), (0.5, 0.5, 0.5));
        let g = gen_alpha(0.5).unwrap();
        assert!((g.alpha_m - 5.0 / 6.0).abs() < 1e-15);
        assert!((g.alpha_f - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.gamma - 2.0 / 3.0).abs() < 1e-15);
        let g = gen_alpha(0.0).unwrap();
        assert_eq!((g.alpha_m, g.alpha_f, g.gamma), (1.5, 1.0, 1.0));
        assert!(gen_alpha(-0.1).is_err());
        assert!(gen_alpha(1.1).is_err());
    }

    fn small_problem(bc: BoundaryTags) -> Problem {
        let patch = make_cube([1.0, 1.0, 1.0], 1, [2, 2, 2]).unwrap();
        let space = build_mixed_pair(patch, 1, 1, 0, [2, 2, 2], bc).unwrap();
        let mat = MaterialModel::new(Isochoric::NeoHookean { c1: 1.0 }, 1.0).unwrap();
        Problem::new(space, mat, None).unwrap()
    }

    #[test]
    fn predictor_scales_rates_and_resets_kinematics() {
        let pr = small_problem(BoundaryTags::default());
        let params = gen_alpha(0.5).unwrap();
        let dt = 0.125;
        let mut st = TimeState::zeros(&pr, 1.0);
        for (i, x) in st.vdot.iter_mut().enumerate() {
            *x = i as f64 * 0.01;
        }
        for (i, x) in st.v.iter_mut().enumerate() {
            *x = 0.7 - 0.02 * i as f64;
        }
        st.udot.copy_from_slice(&st.v);
        for x in st.u.iter_mut() {
            *x = 0.3;
        }
        let next = predict(&pr, &st, dt, &params);
        assert_eq!(next.t, 1.125);
        assert_eq!(next.p, st.p);
        assert_eq!(next.v, st.v);
        // gamma = 2/3: rate predictor is -1/2
        for (a, b) in next.vdot.iter().zip(&st.vdot) {
            assert!((a + 0.5 * b).abs() < 1e-15);
        }
        for i in 0..next.u.len() {
            // stage identity udot_{n+am} = v_{n+af}
            let udot_am = st.udot[i] + params.alpha_m * (next.udot[i] - st.udot[i]);
            let v_af = st.v[i] + params.alpha_f * (next.v[i] - st.v[i]);
            assert!((udot_am - v_af).abs() < 1e-14);
            // one-step update identity for u
            let u_expect =
                st.u[i] + dt * st.udot[i] + params.gamma * dt * (next.udot[i] - st.udot[i]);
            assert!((next.u[i] - u_expect).abs() < 1e-14);
        }
        // consistent udot_n = v_n: the predictor carries u forward by dt*v
        for i in 0..next.u.len() {
            assert!((next.u[i] - (st.u[i] + dt * st.v[i])).abs() < 1e-14);
            assert!((next.udot[i] - st.v[i]).abs() < 1e-14);
        }
        // zero rates and zero velocity stay zero
        let z = TimeState::zeros(&pr, 0.0);
        let nz = predict(&pr, &z, 0.1, &params);
        assert!(nz.vdot.iter().all(|&x| x == 0.0));
        assert!(nz.udot.iter().all(|&x| x == 0.0));
        assert!(nz.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn block_solve_two_by_two_hand_case() {
        // [2 1; 1 0] (dv, dp) = -(1, 3)
        let trips = [
            Triplet::new(0usize, 0usize, 2.0),
            Triplet::new(1, 0, 1.0),
            Triplet::new(0, 1, 1.0),
        ];
        let m = SparseColMat::try_new_from_triplets(2, 2, &trips).unwrap();
        let (dv, dp) = block_solve(m.as_ref(), &[1.0], &[3.0]).unwrap();
        assert!((dv[0] + 3.0).abs() < 1e-14);
        assert!((dp[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn block_solve_rejects_decoupled_saddle() {
        // B = C = 0, A = I: pressure equation is structurally singular
        let trips = [Triplet::new(0usize, 0usize, 1.0)];
        let m = SparseColMat::try_new_from_triplets(2, 2, &trips).unwrap();
        match block_solve(m.as_ref(), &[1.0], &[0.0]) {
            Err(TimeError::Singular(_)) => {}
            other => panic!("expected singular rejection, got {other:?}"),
        }
    }

    #[test]
    fn block_solve_random_saddles_substitute_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let nv = 6;
            let np = 2;
            let n = nv + np;
            // SPD A = L L^T + diag, dense-random full-rank B
            let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
            let mut a = vec![vec![0.0; nv]; nv];
            for (i, row) in a.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = rng.random::<f64>() - 0.5;
                    if i == j {
                        *x += 4.0;
                    }
                }
            }
            for i in 0..nv {
                for j in 0..nv {
                    let mut s = 0.0;
                    for (k, rowk) in a.iter().enumerate() {
                        let _ = k;
                        s += rowk[i] * rowk[j];
                    }
                    trips.push(Triplet::new(i, j, s));
                }
            }
            for i in 0..nv {
                for j in 0..np {
                    let b = rng.random::<f64>() - 0.5;
                    let c = rng.random::<f64>() - 0.5;
                    trips.push(Triplet::new(i, nv + j, b));
                    trips.push(Triplet::new(nv + j, i, c));
                }
            }
            let m = SparseColMat::try_new_from_triplets(n, n, &trips).unwrap();
            let rm: Vec<f64> = (0..nv).map(|_| rng.random::<f64>() - 0.5).collect();
            let rp: Vec<f64> = (0..np).map(|_| rng.random::<f64>() - 0.5).collect();
            let (dv, dp) = block_solve(m.as_ref(), &rm, &rp).unwrap();
            // substitution residual
            let dense = m.to_dense();
            let x: Vec<f64> = dv.iter().chain(dp.iter()).copied().collect();
            let rhs: Vec<f64> = rm.iter().chain(rp.iter()).map(|v| -v).collect();
            let mut worst = 0.0f64;
            for i in 0..n {
                let mut s = 0.0;
                for (j, xj) in x.iter().enumerate() {
                    s += dense[(i, j)] * xj;
                }
                worst = worst.max((s - rhs[i]).abs());
            }
            assert!(worst < 1e-12, "substitution residual {worst}");
        }
    }

    /// Residual at the stage fields as a function of the iterate
    /// z = (vdot_{n+1}, pdot_{n+1}), with the algorithmic coupling applied.
    fn residual_of_iterate(
        pr: &Problem,
        sn: &TimeState,
        base: &TimeState,
        dveq: &[f64],
        dpeq: &[f64],
        dt: f64,
        params: &GenAlphaParams,
    ) -> Vec<f64> {
        let c_udot = params.alpha_f * params.gamma * dt / params.alpha_m;
        let c_y = params.gamma * dt;
        let mut s1 = base.clone();
        let space = &pr.space;
        space.add_vel_increment(&mut s1.vdot, dveq, 1.0);
        space.add_vel_increment(&mut s1.udot, dveq, c_udot);
        space.add_vel_increment(&mut s1.v, dveq, c_y);
        space.add_vel_increment(&mut s1.u, dveq, c_y * c_udot);
        space.add_pres_increment(&mut s1.pdot, dpeq, 1.0);
        space.add_pres_increment(&mut s1.p, dpeq, c_y);
        let (u_af, p_af, v_af, vd_am) = stage_fields(sn, &s1, params);
        let r = assemble_residual(
            pr,
            &Fields::Discrete {
                u: &u_af,
                p: &p_af,
                v: &v_af,
                vdot: &vd_am,
            },
            sn.t + params.alpha_f * dt,
        )
        .unwrap();
        r.rm.iter().chain(r.rp.iter()).copied().collect()
    }

    #[test]
    fn tangent_matches_directional_derivative_of_stage_residual() {
        let pr = small_problem(BoundaryTags::default());
        let params = gen_alpha(0.5).unwrap();
        let dt = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // a finite, smooth state
        let mut sn = TimeState::zeros(&pr, 0.2);
        for x in sn
            .u
            .iter_mut()
            .chain(sn.v.iter_mut())
            .chain(sn.vdot.iter_mut())
        {
            *x = 0.05 * (rng.random::<f64>() - 0.5);
        }
        for x in sn.p.iter_mut().chain(sn.pdot.iter_mut()) {
            *x = 0.3 * (rng.random::<f64>() - 0.5);
        }
        sn.udot.copy_from_slice(&sn.v);
        let base = predict(&pr, &sn, dt, &params);
        let n_v = pr.pattern.n_v;
        let n_p = pr.pattern.n_p;
        // iterate away from the predictor so the state is generic
        let z_v: Vec<f64> = (0..n_v).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let z_p: Vec<f64> = (0..n_p).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let r0 = residual_of_iterate(&pr, &sn, &base, &z_v, &z_p, dt, &params);

        // tangent at the same iterate
        let c_udot = params.alpha_f * params.gamma * dt / params.alpha_m;
        let c_y = params.gamma * dt;
        let mut s1 = base.clone();
        let space = &pr.space;
        space.add_vel_increment(&mut s1.vdot, &z_v, 1.0);
        space.add_vel_increment(&mut s1.udot, &z_v, c_udot);
        space.add_vel_increment(&mut s1.v, &z_v, c_y);
        space.add_vel_increment(&mut s1.u, &z_v, c_y * c_udot);
        space.add_pres_increment(&mut s1.pdot, &z_p, 1.0);
        space.add_pres_increment(&mut s1.p, &z_p, c_y);
        let (u_af, p_af, v_af, vd_am) = stage_fields(&sn, &s1, &params);
        let sc = TangentScales {
            alpha_m: params.alpha_m,
            alpha_f: params.alpha_f,
            gamma: params.gamma,
            dt,
        };
        let vals = assemble_tangent(
            &pr,
            &Fields::Discrete {
                u: &u_af,
                p: &p_af,
                v: &v_af,
                vdot: &vd_am,
            },
            sc,
            sn.t + params.alpha_f * dt,
        )
        .unwrap();
        let kmat = pr.mat_ref(&vals);

        let dz_v: Vec<f64> = (0..n_v).map(|_| rng.random::<f64>() - 0.5).collect();
        let dz_p: Vec<f64> = (0..n_p).map(|_| rng.random::<f64>() - 0.5).collect();
        // K dz
        let dz: Vec<f64> = dz_v.iter().chain(dz_p.iter()).copied().collect();
        let mut kdz = vec![0.0; dz.len()];
        let sym = kmat.symbolic();
        for c in 0..dz.len() {
            let range = sym.col_range(c);
            for (k, &r) in sym.row_idx()[range.clone()].iter().enumerate() {
                kdz[r] += kmat.val()[range.start + k] * dz[c];
            }
        }
        let mut errs = Vec::new();
        for eps in [1e-4, 1e-5] {
            let zv: Vec<f64> = z_v.iter().zip(&dz_v).map(|(a, b)| a + eps * b).collect();
            let zp: Vec<f64> = z_p.iter().zip(&dz_p).map(|(a, b)| a + eps * b).collect();
            let r1 = residual_of_iterate(&pr, &sn, &base, &zv, &zp, dt, &params);
            let err: f64 = r1
                .iter()
                .zip(&r0)
                .zip(&kdz)
                .map(|((a, b), k)| (a - b - eps * k).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        let order = (errs[0] / errs[1]).log10();
        assert!(
            order > 1.9,
            "consistency order {order:.3} (errors {errs:?})"
        );
    }

    #[test]
    fn coupling_blocks_are_adjoint_at_reference() {
        // at F = I, V = 0 the B block equals -C^T exactly
        let pr = small_problem(BoundaryTags::default());
        let n = pr.space.n_vel_ctrl();
        let u = vec![0.0; 3 * n];
        let p = vec![0.0; pr.space.n_pres_ctrl()];
        let v = vec![0.0; 3 * n];
        let vd = vec![0.0; 3 * n];
        let sc = TangentScales {
            alpha_m: 5.0 / 6.0,
            alpha_f: 2.0 / 3.0,
            gamma: 2.0 / 3.0,
            dt: 0.1,
        };
        let vals = assemble_tangent(
            &pr,
            &Fields::Discrete {
                u: &u,
                p: &p,
                v: &v,
                vdot: &vd,
            },
            sc,
            0.0,
        )
        .unwrap();
        let dense = pr.mat_ref(&vals).to_dense();
        let (nv, np) = (pr.pattern.n_v, pr.pattern.n_p);
        let mut scale = 0.0f64;
        for r in 0..nv {
            for c in 0..np {
                scale = scale.max(dense[(r, nv + c)].abs());
            }
        }
        assert!(scale > 0.0);
        for r in 0..nv {
            for c in 0..np {
                let b = dense[(r, nv + c)];
                let ct = dense[(nv + c, r)];
                assert!(
                    (b + ct).abs() < 1e-12 * scale,
                    "B != -C^T at ({r},{c}): {b} vs {ct}"
                );
            }
        }
        // pressure-pressure block is structurally empty
        for r in 0..np {
            for c in 0..np {
                assert_eq!(dense[(nv + r, nv + c)], 0.0);
            }
        }
    }

    #[test]
    fn velocity_block_is_symmetric_at_generic_state() {
        let pr = small_problem(BoundaryTags::default());
        let n = pr.space.n_vel_ctrl();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut u = vec![0.0; 3 * n];
        let mut v = vec![0.0; 3 * n];
        let vd = vec![0.0; 3 * n];
        for x in u.iter_mut().chain(v.iter_mut()) {
            *x = 0.08 * (rng.random::<f64>() - 0.5);
        }
        let p: Vec<f64> = (0..pr.space.n_pres_ctrl())
            .map(|_| 0.5 * (rng.random::<f64>() - 0.5))
            .collect();
        let sc = TangentScales {
            alpha_m: 5.0 / 6.0,
            alpha_f: 2.0 / 3.0,
            gamma: 2.0 / 3.0,
            dt: 0.07,
        };
        let vals = assemble_tangent(
            &pr,
            &Fields::Discrete {
                u: &u,
                p: &p,
                v: &v,
                vdot: &vd,
            },
            sc,
            0.0,
        )
        .unwrap();
        let dense = pr.mat_ref(&vals).to_dense();
        let nv = pr.pattern.n_v;
        let mut scale = 0.0f64;
        for r in 0..nv {
            for c in 0..nv {
                scale = scale.max(dense[(r, c)].abs());
            }
        }
        for r in 0..nv {
            for c in 0..r {
                assert!(
                    (dense[(r, c)] - dense[(c, r)]).abs() < 1e-11 * scale,
                    "A asymmetric at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn quiescent_step_converges_without_correction() {
        let pr = small_problem(BoundaryTags::default());
        let st = TimeState::zeros(&pr, 0.0);
        let (next, log) = solve_step(
            &pr,
            &st,
            0.01,
            gen_alpha(0.5).unwrap(),
            NewtonSettings::default(),
        )
        .unwrap();
        assert_eq!(log.iters, 0);
        assert!(log.res[0] < 1e-10);
        assert!(next.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rigid_translation_marches_on_the_predictor() {
        // uniform velocity, no boundary conditions: the exact solution is
        // u = t v with zero stress, so every predictor already satisfies the
        // equations. The march must still move the body; a predictor that
        // only rescales udot freezes it.
        let pr = small_problem(BoundaryTags::default());
        let v0 = [0.4, -0.3, 0.2];
        let init = initial_state(&pr, &|_| v0, None, 0.0).unwrap();
        let cfg = MarchConfig {
            dt: 0.05,
            n_steps: 3,
            params: gen_alpha(0.5).unwrap(),
            settings: NewtonSettings::default(),
            start_index: 0,
            t_anchor: 0.0,
        };
        let out = run(&pr, init, &cfg).unwrap();
        let t = 0.15;
        for (i, &u) in out.state.u.iter().enumerate() {
            let expect = t * v0[i % 3];
            assert!((u - expect).abs() < 1e-12, "dof {i}: {u} vs {expect}");
        }
        for log in &out.logs {
            assert_eq!(log.iters, 0);
        }
    }

    fn mms_problem() -> (Problem, Mms) {
        let mms = Mms::default();
        let mut faces = Vec::new();
        for d in [1usize, 2] {
            for max_side in [false, true] {
                faces.push(FaceBc {
                    face: Face { dir: d, max_side },
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
        let patch = make_cube([1.0, 1.0, 1.0], 1, [2, 2, 2]).unwrap();
        let space = build_mixed_pair(patch, 1, 1, 0, [2, 2, 2], bc).unwrap();
        let mat = MaterialModel::new(Isochoric::NeoHookean { c1: mms.c1 }, mms.rho0).unwrap();
        let body: crate::assembly::BodyForce = Box::new(move |t, x| mms.body(t, x));
        (Problem::new(space, mat, Some(body)).unwrap(), mms)
    }

    #[test]
    fn newton_contraction_is_superlinear_on_manufactured_step() {
        let (pr, mms) = mms_problem();
        // start from the projected manufactured state at t = 0.3
        let t0 = 0.3;
        let space = &pr.space;
        let mut st = TimeState::zeros(&pr, t0);
        st.u = l2_project(space, ProjectTarget::Velocity, &|x| {
            let u = mms.displacement(t0, x);
            [u[0], u[1], u[2]]
        })
        .unwrap();
        st.v = l2_project(space, ProjectTarget::Velocity, &|x| {
            let v = mms.velocity(t0, x);
            [v[0], v[1], v[2]]
        })
        .unwrap();
        st.p = project_pressure(space, &|x| mms.pressure(t0, x)).unwrap();
        st.vdot = l2_project(space, ProjectTarget::Velocity, &|x| {
            let a = mms.acceleration(t0, x);
            [a[0], a[1], a[2]]
        })
        .unwrap();
        st.udot = st.v.clone();
        let settings = NewtonSettings {
            tol_r: 1e-10,
            tol_a: 1e-12,
            l_max: 20,
            mode: NewtonMode::Full,
        };
        let (_, log) = solve_step(&pr, &st, 0.05, gen_alpha(0.5).unwrap(), settings).unwrap();
        assert!(
            log.iters <= 6,
            "iterations {} with history {:?}",
            log.iters,
            log.res
        );
        // superlinear tail: the last contraction factor sharpens
        let r = &log.res;
        let k = r.len() - 1;
        assert!(k >= 2, "history too short: {r:?}");
        let q_last = r[k] / r[k - 1];
        let q_prev = r[k - 1] / r[k - 2];
        assert!(
            q_last < 0.3 * q_prev || r[k] <= 1e-12,
            "contraction not superlinear: {r:?}"
        );
    }

    #[test]
    fn free_spin_conserves_momentum_and_energy() {
        // stress-free cube spinning rigidly: Newton-converged steps keep
        // linear and angular momentum and drift energy only at O(dt^2)
        let patch = make_cube([1.0, 1.0, 1.0], 1, [2, 2, 2]).unwrap();
        let space = build_mixed_pair(patch, 1, 1, 0, [2, 2, 2], BoundaryTags::default()).unwrap();
        let mat = MaterialModel::new(Isochoric::NeoHookean { c1: 10.0 }, 1.0).unwrap();
        let pr = Problem::new(space, mat, None).unwrap();
        let omega = 0.8;
        let init = initial_state(
            &pr,
            &|x| {
                let r = [x[0] - 0.5, x[1] - 0.5, x[2] - 0.5];
                [-omega * r[1], omega * r[0], 0.0]
            },
            None,
            0.0,
        )
        .unwrap();
        let params = gen_alpha(1.0).unwrap();
        let settings = NewtonSettings {
            tol_r: 1e-10,
            tol_a: 1e-12,
            l_max: 20,
            mode: NewtonMode::Full,
        };
        let cfg = MarchConfig {
            dt: 2e-3,
            n_steps: 25,
            params,
            settings,
            start_index: 0,
            t_anchor: 0.0,
        };
        let out = run(&pr, init, &cfg).unwrap();
        let first = &out.rows[0];
        let last = out.rows.last().unwrap();
        let pscale = (first.te * pr.material.rho0).sqrt().max(1e-3);
        assert!((last.lx - first.lx).abs() < 1e-10 * pscale);
        assert!((last.ly - first.ly).abs() < 1e-10 * pscale);
        assert!((last.lz - first.lz).abs() < 1e-10 * pscale);
        assert!((last.az - first.az).abs() < 1e-4 * first.az.abs().max(1e-3));
        let drift = (last.te - first.te).abs() / first.te;
        assert!(drift < 1e-4, "energy drift {drift}");
    }

    #[test]
    fn zero_steps_emit_initial_diagnostics_only() {
        let pr = small_problem(BoundaryTags::default());
        let init = TimeState::zeros(&pr, 0.125);
        let cfg = MarchConfig {
            dt: 0.01,
            n_steps: 0,
            params: gen_alpha(0.5).unwrap(),
            settings: NewtonSettings::default(),
            start_index: 0,
            t_anchor: 0.125,
        };
        let out = run(&pr, init, &cfg).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].t, 0.125);
        assert_eq!(out.logs.len(), 0);
    }

    #[test]
    fn interrupted_march_resumes_bit_identically() {
        let (pr, _) = mms_problem();
        let init = initial_state(&pr, &|_| [0.0; 3], None, 0.0).unwrap();
        let params = gen_alpha(0.5).unwrap();
        let settings = NewtonSettings {
            tol_r: 1e-10,
            tol_a: 1e-12,
            l_max: 20,
            mode: NewtonMode::Modified { refresh_every: 1 },
        };
        let mk = |n_steps: usize, start: usize| MarchConfig {
            dt: 0.02,
            n_steps,
            params,
            settings,
            start_index: start,
            t_anchor: 0.0,
        };
        let full = run(&pr, init.clone(), &mk(8, 0)).unwrap();
        let part = run(&pr, init, &mk(4, 0)).unwrap();
        let rest = run(&pr, part.state, &mk(4, 4)).unwrap();
        assert_eq!(full.state.u, rest.state.u);
        assert_eq!(full.state.v, rest.state.v);
        assert_eq!(full.state.p, rest.state.p);
        assert_eq!(full.state.vdot, rest.state.vdot);
        assert_eq!(full.state.t, rest.state.t);
    }
}
