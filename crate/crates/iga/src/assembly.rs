//! Assembly of the material-frame weak form: residual blocks, consistent
//! tangent blocks, external loads, and the manufactured-solution family.
//!
//! All integrals live on the reference configuration. The momentum residual
//! per velocity test function N_A and component i is
//!
//! ```text
//! R^m_(A,i) = int  N_A rho0 vdot_i
//!           + grad N_A : (J sigma_dev F^{-T})_i     [= (F S_iso grad N_A)_i]
//!           - P (J F^{-T} grad N_A)_i
//!           - N_A rho0 B_i  dV  -  bdry< N_A H_i >
//! ```
//!
//! and the pressure residual is R^p_A = int M_A (grad V : J F^{-T}) dV. The
//! kinematic equation is never assembled; it enters through the algebraic
//! udot-vdot coupling in the time solver.

use crate::geometry::{self, TractionSpec};
use crate::materials::{self, DeformationState, MaterialError, MaterialModel};
use crate::spaces::{DofClass, Element, ElementTable, MixedSpace, SpaceError};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsmError {
    #[error("element {elem} inverted at t = {t}: {source}")]
    Inverted {
        elem: usize,
        t: f64,
        source: MaterialError,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Body force closure B(t, X) in acceleration units.
pub type BodyForce = Box<dyn Fn(f64, [f64; 3]) -> [f64; 3] + Send + Sync>;

/// Residual blocks over free equations.
pub struct ResidualBlocks {
    pub rm: Vec<f64>,
    pub rp: Vec<f64>,
}

impl ResidualBlocks {
    /// Stacked l2 norm used by the nonlinear convergence test.
    pub fn norm(&self) -> f64 {
        self.rm
            .iter()
            .chain(self.rp.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Pointwise state sampled analytically (manufactured solutions).
#[derive(Clone, Copy)]
pub struct AnalyticState {
    pub grad_u: Matrix3<f64>,
    pub p: f64,
    pub grad_v: Matrix3<f64>,
    pub vdot: Vector3<f64>,
}

/// How the assembly samples the unknown fields at quadrature points.
pub enum Fields<'a> {
    /// Full control-coefficient arrays (slaves synced): u, v, vdot are
    /// interleaved 3-vectors, p is scalar.
    Discrete {
        u: &'a [f64],
        p: &'a [f64],
        v: &'a [f64],
        vdot: &'a [f64],
    },
    /// Closure of the reference position, for consistency oracles.
    Analytic(&'a dyn Fn([f64; 3]) -> AnalyticState),
}

/// Sparsity of the combined saddle system, velocity equations first.
pub struct SystemPattern {
    pub n_v: usize,
    pub n_p: usize,
    pub symbolic: SymbolicSparseColMat<usize>,
}

impl SystemPattern {
    pub fn n_eq(&self) -> usize {
        self.n_v + self.n_p
    }

    /// Slot of (row, col) in the value array; the pattern is closed under
    /// every contribution the kernels generate.
    fn slot(&self, row: usize, col: usize) -> usize {
        let range = self.symbolic.col_range(col);
        let rows = &self.symbolic.row_idx()[range.clone()];
        range.start + rows.binary_search(&row).expect("entry outside pattern")
    }
}

/// Per-element referential geometry cache: physical basis gradients,
/// quadrature positions and measures.
pub(crate) struct ElemGeo {
    /// grad_phys[q * nloc + j]: referential gradient of velocity basis j.
    pub(crate) grad_phys: Vec<[f64; 3]>,
    pub(crate) x: Vec<[f64; 3]>,
    pub(crate) dvol: Vec<f64>,
}

/// One traction quadrature point on a boundary face.
struct FaceQp {
    elem: usize,
    x: [f64; 3],
    /// Tangential parametric coordinates (ascending directions).
    txi: [f64; 2],
    /// Referential area measure, quadrature weight included.
    da: f64,
    /// Velocity basis values aligned with the element's vel_idx.
    vals: Vec<f64>,
}

struct FaceData {
    bc_index: usize,
    qps: Vec<FaceQp>,
}

/// A discretized problem: space, material, loads, and the assembly caches.
pub struct Problem {
    pub space: MixedSpace,
    pub material: MaterialModel,
    pub body: Option<BodyForce>,
    pub pattern: SystemPattern,
    nq: usize,
    pub(crate) geo: Vec<ElemGeo>,
    faces: Vec<FaceData>,
}

pub(crate) fn jacobian_at_qp(space: &MixedSpace, el: &Element, q: usize) -> ([f64; 3], Matrix3<f64>) {
    let nloc = el.pres_idx.len();
    let mut x = [0.0; 3];
    let mut jac = Matrix3::zeros();
    for j in 0..nloc {
        let c = space.geo_ctrl[el.pres_idx[j] as usize];
        let v = el.pres_val[q * nloc + j];
        let g = el.pres_grad[q * nloc + j];
        for r in 0..3 {
            x[r] += v * c[r];
            for d in 0..3 {
                jac[(r, d)] += g[d] * c[r];
            }
        }
    }
    (x, jac)
}

fn build_geo(space: &MixedSpace, table: &ElementTable) -> Result<Vec<ElemGeo>, AsmError> {
    let mut out = Vec::with_capacity(table.elems.len());
    for (ei, el) in table.elems.iter().enumerate() {
        let nv = el.vel_idx.len();
        let mut g = ElemGeo {
            grad_phys: Vec::with_capacity(table.nq3 * nv),
            x: Vec::with_capacity(table.nq3),
            dvol: Vec::with_capacity(table.nq3),
        };
        for q in 0..table.nq3 {
            let (x, jac) = jacobian_at_qp(space, el, q);
            let det = jac.determinant();
            if det <= 0.0 {
                return Err(AsmError::Config(format!(
                    "degenerate geometry in element {ei}: det J0 = {det}"
                )));
            }
            let jinv = jac.try_inverse().unwrap();
            for j in 0..nv {
                let gp = el.vel_grad[q * nv + j];
                let gr = jinv.transpose() * Vector3::new(gp[0], gp[1], gp[2]);
                g.grad_phys.push([gr[0], gr[1], gr[2]]);
            }
            g.x.push(x);
            g.dvol.push(det * table.qp_weight(el, q));
        }
        out.push(g);
    }
    Ok(out)
}

fn build_pattern(space: &MixedSpace) -> SystemPattern {
    let n_v = space.vmap.n_eq;
    let n_p = space.pmap.n_eq;
    let n = n_v + n_p;
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for el in &space.table.elems {
        let mut veq = Vec::with_capacity(3 * el.vel_idx.len());
        for &a in &el.vel_idx {
            for c in 0..3 {
                if let DofClass::Free(e) = space.vmap.resolve(a as usize, c) {
                    veq.push(e as usize);
                }
            }
        }
        veq.sort_unstable();
        veq.dedup();
        let mut peq = Vec::with_capacity(el.pres_idx.len());
        for &a in &el.pres_idx {
            if let DofClass::Free(e) = space.pmap.resolve(a as usize) {
                peq.push(n_v + e as usize);
            }
        }
        peq.sort_unstable();
        peq.dedup();
        for &c in &veq {
            cols[c].extend(veq.iter().copied());
            cols[c].extend(peq.iter().copied());
        }
        for &c in &peq {
            cols[c].extend(veq.iter().copied());
        }
    }
    let mut col_ptr = Vec::with_capacity(n + 1);
    col_ptr.push(0usize);
    let mut row_idx = Vec::new();
    for col in cols.iter_mut() {
        col.sort_unstable();
        col.dedup();
        row_idx.extend(col.iter().copied());
        col.clear();
        col.shrink_to_fit();
        col_ptr.push(row_idx.len());
    }
    let symbolic = SymbolicSparseColMat::new_checked(n, n, col_ptr, None, row_idx);
    SystemPattern {
        n_v,
        n_p,
        symbolic,
    }
}

fn build_faces(space: &MixedSpace, nq: usize) -> Result<Vec<FaceData>, AsmError> {
    let rule = crate::quadrature::GaussRule::new(nq);
    let mut out = Vec::new();
    for (bc_index, fb) in space.bc.faces.iter().enumerate() {
        if fb.traction.is_none() {
            continue;
        }
        let face = fb.face;
        let d = face.dir;
        let [ta, tb] = face.tangent_dirs();
        let nel = space.nel;
        let ed_face = if face.max_side { nel[d] - 1 } else { 0 };
        let xi_d = if face.max_side { 1.0 } else { 0.0 };
        // orientation of t_a x t_b relative to the outward direction
        let orient = if d == 1 { -1.0 } else { 1.0 };
        let sign = if face.max_side { orient } else { -orient };
        let mut qps = Vec::new();
        for eb in 0..nel[tb] {
            for ea in 0..nel[ta] {
                let mut es = [0usize; 3];
                es[d] = ed_face;
                es[ta] = ea;
                es[tb] = eb;
                let elem = es[0] + nel[0] * (es[1] + nel[1] * es[2]);
                let el = &space.table.elems[elem];
                for qb in 0..nq {
                    for qa in 0..nq {
                        let mut xi = [0.0; 3];
                        xi[d] = xi_d;
                        let [lo_a, hi_a] = el.bounds[ta];
                        let [lo_b, hi_b] = el.bounds[tb];
                        xi[ta] = lo_a + (hi_a - lo_a) * rule.nodes[qa];
                        xi[tb] = lo_b + (hi_b - lo_b) * rule.nodes[qb];
                        let (x, jac, _) = geometry::map_geometry(&space.patch, xi)
                            .map_err(|e| AsmError::Config(e.to_string()))?;
                        let t1 = jac.column(ta);
                        let t2 = jac.column(tb);
                        let avec = t1.cross(&t2) * sign;
                        let da = avec.norm()
                            * rule.weights[qa]
                            * rule.weights[qb]
                            * (hi_a - lo_a)
                            * (hi_b - lo_b);
                        // velocity basis values at the face point
                        let evals: Vec<_> = (0..3)
                            .map(|dd| space.vel.dir[dd].eval(xi[dd], 0))
                            .collect::<Result<_, _>>()
                            .map_err(SpaceError::from)?;
                        let nloc = el.vel_idx.len();
                        let mut vals = vec![0.0; nloc];
                        for (j, &gidx) in el.vel_idx.iter().enumerate() {
                            let gi = space.vel.unindex(gidx as usize);
                            let mut v = 1.0;
                            for dd in 0..3 {
                                let (span, ders) = &evals[dd];
                                let loc = gi[dd] as isize
                                    - (*span as isize - space.vel.dir[dd].kv.degree() as isize);
                                if !(0..ders[0].len() as isize).contains(&loc) {
                                    v = 0.0;
                                    break;
                                }
                                v *= ders[0][loc as usize];
                            }
                            vals[j] = v;
                        }
                        qps.push(FaceQp {
                            elem,
                            x: [x[0], x[1], x[2]],
                            txi: [xi[ta], xi[tb]],
                            da,
                            vals,
                        });
                    }
                }
            }
        }
        out.push(FaceData { bc_index, qps });
    }
    Ok(out)
}

impl Problem {
    pub fn new(
        space: MixedSpace,
        material: MaterialModel,
        body: Option<BodyForce>,
    ) -> Result<Problem, AsmError> {
        let nq = space.nq_default();
        Problem::with_quadrature(space, material, body, nq)
    }

    /// Explicit quadrature order (points per direction), for the
    /// quadrature-sufficiency oracle.
    pub fn with_quadrature(
        space: MixedSpace,
        material: MaterialModel,
        body: Option<BodyForce>,
        nq: usize,
    ) -> Result<Problem, AsmError> {
        space.bc.validate().map_err(|e| AsmError::Config(e.to_string()))?;
        let table = if nq == space.nq_default() {
            None
        } else {
            Some(space.table_with(nq)?)
        };
        let mut space = space;
        if let Some(t) = table {
            space.table = t;
        }
        let geo = build_geo(&space, &space.table)?;
        let pattern = build_pattern(&space);
        let faces = build_faces(&space, nq)?;
        Ok(Problem {
            space,
            material,
            body,
            pattern,
            nq,
            geo,
            faces,
        })
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    /// Sparse view of an assembled value array.
    pub fn mat_ref<'v>(&'v self, vals: &'v [f64]) -> SparseColMatRef<'v, usize, f64> {
        SparseColMatRef::new(self.pattern.symbolic.as_ref(), vals)
    }

    fn fields_at_qp(
        &self,
        fields: &Fields,
        elem: usize,
        q: usize,
    ) -> (Matrix3<f64>, f64, Matrix3<f64>, Vector3<f64>) {
        let el = &self.space.table.elems[elem];
        let geo = &self.geo[elem];
        match fields {
            Fields::Discrete { u, p, v, vdot } => {
                let nv = el.vel_idx.len();
                let np = el.pres_idx.len();
                let mut gu = Matrix3::zeros();
                let mut gv = Matrix3::zeros();
                let mut vd = Vector3::zeros();
                for j in 0..nv {
                    let a = el.vel_idx[j] as usize;
                    let g = geo.grad_phys[q * nv + j];
                    let nval = el.vel_val[q * nv + j];
                    for i in 0..3 {
                        let (ui, vi, ai) = (u[3 * a + i], v[3 * a + i], vdot[3 * a + i]);
                        vd[i] += nval * ai;
                        for dd in 0..3 {
                            gu[(i, dd)] += ui * g[dd];
                            gv[(i, dd)] += vi * g[dd];
                        }
                    }
                }
                let mut pv = 0.0;
                for j in 0..np {
                    pv += p[el.pres_idx[j] as usize] * el.pres_val[q * np + j];
                }
                (gu, pv, gv, vd)
            }
            Fields::Analytic(f) => {
                let s = f(geo.x[q]);
                (s.grad_u, s.p, s.grad_v, s.vdot)
            }
        }
    }

    fn kinematics_at(
        &self,
        gu: &Matrix3<f64>,
        elem: usize,
        t: f64,
    ) -> Result<DeformationState, AsmError> {
        materials::kinematics(Matrix3::identity() + gu)
            .map_err(|source| AsmError::Inverted { elem, t, source })
    }
}

/// External load vector over free velocity equations at time `t`:
/// body force rho0 B plus face tractions H.
pub fn external_load(pr: &Problem, t: f64) -> Vec<f64> {
    let space = &pr.space;
    let mut load = vec![0.0; pr.pattern.n_v];
    if let Some(body) = &pr.body {
        let rho0 = pr.material.rho0;
        for (ei, el) in space.table.elems.iter().enumerate() {
            let geo = &pr.geo[ei];
            let nv = el.vel_idx.len();
            for q in 0..space.table.nq3 {
                let b = body(t, geo.x[q]);
                let w = geo.dvol[q] * rho0;
                for j in 0..nv {
                    let nval = el.vel_val[q * nv + j];
                    let a = el.vel_idx[j] as usize;
                    for i in 0..3 {
                        if let DofClass::Free(e) = space.vmap.resolve(a, i) {
                            load[e as usize] += nval * w * b[i];
                        }
                    }
                }
            }
        }
    }
    for fd in &pr.faces {
        let fb = &space.bc.faces[fd.bc_index];
        let Some(tr) = &fb.traction else { continue };
        for qp in &fd.qps {
            let h = match tr {
                TractionSpec::Dead { h, ramp, region } => {
                    if let Some(r) = region {
                        if qp.txi[0] < r[0][0]
                            || qp.txi[0] > r[0][1]
                            || qp.txi[1] < r[1][0]
                            || qp.txi[1] > r[1][1]
                        {
                            continue;
                        }
                    }
                    let scale = match ramp {
                        Some(tr_time) => (t / tr_time).min(1.0),
                        None => 1.0,
                    };
                    [h[0] * scale, h[1] * scale, h[2] * scale]
                }
                TractionSpec::Field(f) => f(t, qp.x),
            };
            let el = &space.table.elems[qp.elem];
            for (j, &gidx) in el.vel_idx.iter().enumerate() {
                let nval = qp.vals[j];
                if nval == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    if let DofClass::Free(e) = space.vmap.resolve(gidx as usize, i) {
                        load[e as usize] += nval * h[i] * qp.da;
                    }
                }
            }
        }
    }
    load
}

/// Residual at the intermediate-stage fields (u, p at t_{n+alpha_f}; vdot at
/// t_{n+alpha_m}); loads are evaluated at `t`.
pub fn assemble_residual(pr: &Problem, fields: &Fields, t: f64) -> Result<ResidualBlocks, AsmError> {
    let space = &pr.space;
    let mut rm = external_load(pr, t);
    for x in rm.iter_mut() {
        *x = -*x;
    }
    let mut rp = vec![0.0; pr.pattern.n_p];
    let rho0 = pr.material.rho0;
    for (ei, el) in space.table.elems.iter().enumerate() {
        let geo = &pr.geo[ei];
        let nv = el.vel_idx.len();
        let np = el.pres_idx.len();
        let mut lrm = vec![0.0; 3 * nv];
        let mut lrp = vec![0.0; np];
        for q in 0..space.table.nq3 {
            let (gu, pv, gv, vd) = pr.fields_at_qp(fields, ei, q);
            let st = pr.kinematics_at(&gu, ei, t)?;
            let s_iso = materials::isochoric_pk2(&pr.material, &st);
            let pi = st.f * s_iso;
            let finv_t = st.f * st.c_inv;
            let w = geo.dvol[q];
            // grad V : J F^{-T}
            let trl = st.j * (gv.component_mul(&finv_t)).sum();
            for j in 0..np {
                lrp[j] += el.pres_val[q * np + j] * trl * w;
            }
            for j in 0..nv {
                let g = geo.grad_phys[q * nv + j];
                let gn = Vector3::new(g[0], g[1], g[2]);
                let gj = finv_t * gn;
                let nval = el.vel_val[q * nv + j];
                for i in 0..3 {
                    lrm[3 * j + i] += (nval * rho0 * vd[i] + (pi.row(i) * gn)[0]
                        - pv * st.j * gj[i])
                        * w;
                }
            }
        }
        for j in 0..nv {
            let a = el.vel_idx[j] as usize;
            for i in 0..3 {
                if let DofClass::Free(e) = space.vmap.resolve(a, i) {
                    rm[e as usize] += lrm[3 * j + i];
                }
            }
        }
        for j in 0..np {
            if let DofClass::Free(e) = space.pmap.resolve(el.pres_idx[j] as usize) {
                rp[e as usize] += lrp[j];
            }
        }
    }
    Ok(ResidualBlocks { rm, rp })
}

/// Generalized-alpha scaling factors entering the tangent blocks.
#[derive(Debug, Clone, Copy)]
pub struct TangentScales {
    pub alpha_m: f64,
    pub alpha_f: f64,
    pub gamma: f64,
    pub dt: f64,
}

impl TangentScales {
    /// d(u at alpha_f stage)/d(dvdot): the algorithmic udot-vdot coupling.
    pub fn disp(&self) -> f64 {
        let afgdt = self.alpha_f * self.gamma * self.dt;
        afgdt * afgdt / self.alpha_m
    }

    pub fn vel(&self) -> f64 {
        self.alpha_f * self.gamma * self.dt
    }
}

/// Consistent tangent of the stage residual with respect to (dvdot, dpdot),
/// assembled into the combined pattern (velocity rows/cols first).
pub fn assemble_tangent(
    pr: &Problem,
    fields: &Fields,
    sc: TangentScales,
    t: f64,
) -> Result<Vec<f64>, AsmError> {
    let space = &pr.space;
    let mut vals = vec![0.0; pr.pattern.symbolic.row_idx().len()];
    let rho0 = pr.material.rho0;
    let c_mass = sc.alpha_m;
    let c_disp = sc.disp();
    let c_vel = sc.vel();
    let n_v = pr.pattern.n_v;
    for (ei, el) in space.table.elems.iter().enumerate() {
        let geo = &pr.geo[ei];
        let nv = el.vel_idx.len();
        let np = el.pres_idx.len();
        let mut la = vec![0.0; 9 * nv * nv];
        let mut lb = vec![0.0; 3 * nv * np];
        let mut lc = vec![0.0; np * 3 * nv];
        let mut bmat = vec![0.0; 6 * 3 * nv];
        let mut wmat = vec![0.0; 6 * 3 * nv];
        let mut gphys = vec![Vector3::zeros(); nv];
        let mut gcur = vec![Vector3::zeros(); nv];
        for q in 0..space.table.nq3 {
            let (gu, pv, gv, _) = pr.fields_at_qp(fields, ei, q);
            let st = pr.kinematics_at(&gu, ei, t)?;
            let s_iso = materials::isochoric_pk2(&pr.material, &st);
            let dv = materials::material_tangent(&pr.material, &st).voigt();
            let finv_t = st.f * st.c_inv;
            let finv = st.c_inv * st.f.transpose();
            let l = gv * finv;
            let trl = l.trace();
            let w = geo.dvol[q];
            for j in 0..nv {
                let g = geo.grad_phys[q * nv + j];
                gphys[j] = Vector3::new(g[0], g[1], g[2]);
                gcur[j] = finv_t * gphys[j];
            }
            // strain-displacement rows in Voigt order (11,22,33,12,23,13)
            const PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)];
            for j in 0..nv {
                for k in 0..3 {
                    let col = 3 * j + k;
                    for (al, &(pp, qq)) in PAIRS.iter().enumerate() {
                        let v = if pp == qq {
                            st.f[(k, pp)] * gphys[j][pp]
                        } else {
                            st.f[(k, pp)] * gphys[j][qq] + st.f[(k, qq)] * gphys[j][pp]
                        };
                        bmat[al * 3 * nv + col] = v;
                    }
                }
            }
            for al in 0..6 {
                for col in 0..3 * nv {
                    let mut acc = 0.0;
                    for be in 0..6 {
                        acc += dv[al][be] * bmat[be * 3 * nv + col];
                    }
                    wmat[al * 3 * nv + col] = acc;
                }
            }
            // mass + geometric + material + pressure-geometric stiffness
            for j in 0..nv {
                let nj = el.vel_val[q * nv + j];
                for j2 in 0..nv {
                    let n2 = el.vel_val[q * nv + j2];
                    let kgeo = gphys[j].dot(&(s_iso * gphys[j2]));
                    let mass = c_mass * rho0 * nj * n2;
                    for i in 0..3 {
                        let row = 3 * j + i;
                        for k in 0..3 {
                            let col = 3 * j2 + k;
                            let mut v = 0.0;
                            if i == k {
                                v += mass + c_disp * kgeo;
                            }
                            let mut mat = 0.0;
                            for al in 0..6 {
                                mat += bmat[al * 3 * nv + row] * wmat[al * 3 * nv + col];
                            }
                            v += c_disp
                                * (mat
                                    - pv * st.j
                                        * (gcur[j][i] * gcur[j2][k] - gcur[j2][i] * gcur[j][k]));
                            la[row * 3 * nv + col] += v * w;
                        }
                    }
                }
                // B block: -c_vel (J F^{-T} grad N_A)_i M_B
                for jp in 0..np {
                    let m = el.pres_val[q * np + jp];
                    for i in 0..3 {
                        lb[(3 * j + i) * np + jp] += -c_vel * st.j * gcur[j][i] * m * w;
                    }
                }
            }
            // C block: c_vel G^T plus the displacement part of R^p
            let lt = l.transpose();
            for jp in 0..np {
                let m = el.pres_val[q * np + jp];
                for j in 0..nv {
                    let ltg = lt * gcur[j];
                    for k in 0..3 {
                        lc[jp * 3 * nv + 3 * j + k] += (c_vel * m * st.j * gcur[j][k]
                            + c_disp * m * st.j * (trl * gcur[j][k] - ltg[k]))
                            * w;
                    }
                }
            }
        }
        // scatter with Dirichlet rows/cols dropped
        let resolve_v = |j: usize, i: usize| -> Option<usize> {
            match space.vmap.resolve(el.vel_idx[j] as usize, i) {
                DofClass::Free(e) => Some(e as usize),
                _ => None,
            }
        };
        let resolve_p = |j: usize| -> Option<usize> {
            match space.pmap.resolve(el.pres_idx[j] as usize) {
                DofClass::Free(e) => Some(n_v + e as usize),
                _ => None,
            }
        };
        for j in 0..nv {
            for i in 0..3 {
                let Some(row) = resolve_v(j, i) else { continue };
                for j2 in 0..nv {
                    for k in 0..3 {
                        let Some(col) = resolve_v(j2, k) else { continue };
                        vals[pr.pattern.slot(row, col)] += la[(3 * j + i) * 3 * nv + 3 * j2 + k];
                    }
                }
                for jp in 0..np {
                    let Some(col) = resolve_p(jp) else { continue };
                    vals[pr.pattern.slot(row, col)] += lb[(3 * j + i) * np + jp];
                }
            }
        }
        for jp in 0..np {
            let Some(row) = resolve_p(jp) else { continue };
            for j in 0..nv {
                for k in 0..3 {
                    let Some(col) = resolve_v(j, k) else { continue };
                    vals[pr.pattern.slot(row, col)] += lc[jp * 3 * nv + 3 * j + k];
                }
            }
        }
    }
    Ok(vals)
}

/// Consistent mass matrix on the free velocity equations (SPD), used for the
/// initial acceleration solve.
pub fn assemble_mass(pr: &Problem) -> Result<faer::sparse::SparseColMat<usize, f64>, AsmError> {
    use faer::sparse::Triplet;
    let space = &pr.space;
    let n = pr.pattern.n_v;
    let rho0 = pr.material.rho0;
    let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
    for (ei, el) in space.table.elems.iter().enumerate() {
        let geo = &pr.geo[ei];
        let nv = el.vel_idx.len();
        let mut local = vec![0.0; nv * nv];
        for q in 0..space.table.nq3 {
            let w = geo.dvol[q] * rho0;
            for j in 0..nv {
                let nj = el.vel_val[q * nv + j] * w;
                for j2 in 0..nv {
                    local[j * nv + j2] += nj * el.vel_val[q * nv + j2];
                }
            }
        }
        for j in 0..nv {
            for j2 in 0..nv {
                let v = local[j * nv + j2];
                for i in 0..3 {
                    if let (DofClass::Free(r), DofClass::Free(c)) = (
                        space.vmap.resolve(el.vel_idx[j] as usize, i),
                        space.vmap.resolve(el.vel_idx[j2] as usize, i),
                    ) {
                        trips.push(Triplet::new(r as usize, c as usize, v));
                    }
                }
            }
        }
    }
    faer::sparse::SparseColMat::try_new_from_triplets(n, n, &trips)
        .map_err(|e| AsmError::Config(format!("mass assembly: {e:?}")))
}

/// Manufactured solution: isochoric shear-type displacement with a
/// trigonometric pressure, exercising every term of the weak form.
///
/// U = c t^2 sin(2 pi Y) sin(2 pi Z) e1, P = d t^2 sin(2 pi X) sin(2 pi Y)
/// sin(2 pi Z); det F = 1 identically.
#[derive(Debug, Clone, Copy)]
pub struct Mms {
    pub c: f64,
    pub d: f64,
    pub c1: f64,
    pub rho0: f64,
}

impl Default for Mms {
    fn default() -> Self {
        Mms {
            c: 0.2,
            d: 0.2,
            c1: 1.0,
            rho0: 1.0,
        }
    }
}

const TP: f64 = std::f64::consts::TAU;

impl Mms {
    fn s(x: [f64; 3]) -> f64 {
        (TP * x[1]).sin() * (TP * x[2]).sin()
    }
    fn s_y(x: [f64; 3]) -> f64 {
        TP * (TP * x[1]).cos() * (TP * x[2]).sin()
    }
    fn s_z(x: [f64; 3]) -> f64 {
        TP * (TP * x[1]).sin() * (TP * x[2]).cos()
    }
    fn s_yy(x: [f64; 3]) -> f64 {
        -TP * TP * Self::s(x)
    }
    fn s_zz(x: [f64; 3]) -> f64 {
        -TP * TP * Self::s(x)
    }
    fn s_yz(x: [f64; 3]) -> f64 {
        TP * TP * (TP * x[1]).cos() * (TP * x[2]).cos()
    }

    pub fn displacement(&self, t: f64, x: [f64; 3]) -> Vector3<f64> {
        Vector3::new(self.c * t * t * Self::s(x), 0.0, 0.0)
    }

    pub fn velocity(&self, t: f64, x: [f64; 3]) -> Vector3<f64> {
        Vector3::new(2.0 * self.c * t * Self::s(x), 0.0, 0.0)
    }

    pub fn acceleration(&self, _t: f64, x: [f64; 3]) -> Vector3<f64> {
        Vector3::new(2.0 * self.c * Self::s(x), 0.0, 0.0)
    }

    pub fn pressure(&self, t: f64, x: [f64; 3]) -> f64 {
        self.d * t * t * (TP * x[0]).sin() * (TP * x[1]).sin() * (TP * x[2]).sin()
    }

    pub fn grad_u(&self, t: f64, x: [f64; 3]) -> Matrix3<f64> {
        let g = self.c * t * t;
        let mut m = Matrix3::zeros();
        m[(0, 1)] = g * Self::s_y(x);
        m[(0, 2)] = g * Self::s_z(x);
        m
    }

    pub fn grad_v(&self, t: f64, x: [f64; 3]) -> Matrix3<f64> {
        let gd = 2.0 * self.c * t;
        let mut m = Matrix3::zeros();
        m[(0, 1)] = gd * Self::s_y(x);
        m[(0, 2)] = gd * Self::s_z(x);
        m
    }

    /// J sigma_dev F^{-T} = c1 [(F - F^{-T}) - (g^2 q2 / 3) F^{-T}].
    pub fn nominal_deviatoric(&self, t: f64, x: [f64; 3]) -> Matrix3<f64> {
        let g = self.c * t * t;
        let (sy, sz) = (Self::s_y(x), Self::s_z(x));
        let q2 = sy * sy + sz * sz;
        let f = Matrix3::identity() + self.grad_u(t, x);
        // (I + A)^{-1} = I - A for the nilpotent shear A
        let finv = Matrix3::identity() - self.grad_u(t, x);
        let finv_t = finv.transpose();
        (f - finv_t - finv_t * (g * g * q2 / 3.0)) * self.c1
    }

    /// Body force B from the strong momentum balance.
    pub fn body(&self, t: f64, x: [f64; 3]) -> [f64; 3] {
        let g = self.c * t * t;
        let (sy, sz) = (Self::s_y(x), Self::s_z(x));
        let (syy, szz, syz) = (Self::s_yy(x), Self::s_zz(x), Self::s_yz(x));
        let q2y = 2.0 * sy * syy + 2.0 * sz * syz;
        let q2z = 2.0 * sy * syz + 2.0 * sz * szz;
        let div_pi = Vector3::new(
            self.c1 * g * (syy + szz),
            -self.c1 * g * g / 3.0 * q2y,
            -self.c1 * g * g / 3.0 * q2z,
        );
        // div(P J F^{-T}) with the shear-structured inverse
        let pt = self.d * t * t;
        let (cx, sx) = ((TP * x[0]).cos(), (TP * x[0]).sin());
        let (cy, sy2) = ((TP * x[1]).cos(), (TP * x[1]).sin());
        let (cz, sz2) = ((TP * x[2]).cos(), (TP * x[2]).sin());
        let p_x = pt * TP * cx * sy2 * sz2;
        let p_y = pt * TP * sx * cy * sz2;
        let p_z = pt * TP * sx * sy2 * cz;
        let div_p = Vector3::new(p_x, p_y - g * sy * p_x, p_z - g * sz * p_x);
        let a = self.acceleration(t, x);
        let b = a - (div_pi - div_p) / self.rho0;
        [b[0], b[1], b[2]]
    }

    /// Nominal traction H = (J sigma_dev F^{-T} - P J F^{-T}) N.
    pub fn traction(&self, t: f64, x: [f64; 3], n: [f64; 3]) -> [f64; 3] {
        let finv_t = (Matrix3::identity() - self.grad_u(t, x)).transpose();
        let h = (self.nominal_deviatoric(t, x) - finv_t * self.pressure(t, x))
            * Vector3::new(n[0], n[1], n[2]);
        [h[0], h[1], h[2]]
    }

    pub fn analytic_state(&self, t: f64, x: [f64; 3]) -> AnalyticState {
        AnalyticState {
            grad_u: self.grad_u(t, x),
            p: self.pressure(t, x),
            grad_v: self.grad_v(t, x),
            vdot: self.acceleration(t, x),
        }
    }
}
