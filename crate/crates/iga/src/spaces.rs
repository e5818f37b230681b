//! Discrete mixed velocity/pressure spaces on a single patch.
//!
//! The pressure space has degree `p` and lives on the element grid of the
//! patch; the velocity space is its smoothness-graded superspace of degree
//! `p + a` with `b` extra interior multiplicities (see
//! [`splines::refine_space`]). The geometry is re-expressed exactly in the
//! pressure space so that one set of univariate tables serves geometry and
//! pressure alike.

use crate::geometry::{BoundaryTags, GeoError, Patch};
use crate::quadrature::GaussRule;
use crate::splines::{KnotVector, SplineError, TensorSpace, UnivariateSpace};
use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("factorization failed: {0}")]
    Solve(String),
}

/// Classification of a scalar control variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DofClass {
    /// Unknown, with its equation number.
    Free(u32),
    /// Prescribed to the stored value.
    Fixed(f64),
    /// Identified with the master control of a closed seam.
    Slave(u32),
}

/// Per-component dof classification for the velocity space.
pub struct VelocityMap {
    pub class: Vec<[DofClass; 3]>,
    pub n_eq: usize,
}

/// Dof classification for the pressure space (never clamped).
pub struct ScalarMap {
    pub class: Vec<DofClass>,
    pub n_eq: usize,
}

impl VelocityMap {
    /// Resolves slaves so lookups land on Free or Fixed directly.
    pub fn resolve(&self, ctrl: usize, comp: usize) -> DofClass {
        match self.class[ctrl][comp] {
            DofClass::Slave(m) => self.class[m as usize][comp],
            c => c,
        }
    }
}

impl ScalarMap {
    pub fn resolve(&self, ctrl: usize) -> DofClass {
        match self.class[ctrl] {
            DofClass::Slave(m) => self.class[m as usize],
            c => c,
        }
    }
}

/// Quadrature-ready data for one element: supported control indices and
/// basis values/parametric gradients at every quadrature point.
pub struct Element {
    pub spans: [usize; 3],
    pub bounds: [[f64; 2]; 3],
    pub vel_idx: Vec<u32>,
    pub pres_idx: Vec<u32>,
    /// `vel_val[q * vel_idx.len() + j]`
    pub vel_val: Vec<f64>,
    pub vel_grad: Vec<[f64; 3]>,
    pub pres_val: Vec<f64>,
    pub pres_grad: Vec<[f64; 3]>,
}

pub struct ElementTable {
    pub elems: Vec<Element>,
    pub rule: GaussRule,
    /// Quadrature points per element (rule cubed).
    pub nq3: usize,
}

/// Per-direction basis tables at the quadrature points of every span.
struct DirTable {
    n_loc: usize,
    /// `val[span][q][loc]` flattened.
    val: Vec<f64>,
    d1: Vec<f64>,
    /// Parametric coordinate of each (span, q).
    xi: Vec<f64>,
    first: Vec<usize>,
    bounds: Vec<[f64; 2]>,
}

impl DirTable {
    fn build(space: &UnivariateSpace, rule: &GaussRule) -> Result<DirTable, SplineError> {
        let kv = &space.kv;
        let p = kv.degree();
        let nq = rule.len();
        let spans = kv.nonempty_spans();
        let mut t = DirTable {
            n_loc: p + 1,
            val: Vec::with_capacity(spans.len() * nq * (p + 1)),
            d1: Vec::with_capacity(spans.len() * nq * (p + 1)),
            xi: Vec::with_capacity(spans.len() * nq),
            first: Vec::with_capacity(spans.len()),
            bounds: Vec::with_capacity(spans.len()),
        };
        for &s in &spans {
            let (lo, hi) = (kv.knots()[s], kv.knots()[s + 1]);
            t.first.push(kv.span_first_basis(s));
            t.bounds.push([lo, hi]);
            for q in 0..nq {
                let xi = lo + (hi - lo) * rule.nodes[q];
                let (span, ders) = space.eval(xi, 1)?;
                debug_assert_eq!(span, s);
                t.xi.push(xi);
                t.val.extend_from_slice(&ders[0]);
                t.d1.extend_from_slice(&ders[1]);
            }
        }
        Ok(t)
    }

    fn n_spans(&self) -> usize {
        self.first.len()
    }
}

impl ElementTable {
    pub fn build(
        vel: &TensorSpace,
        pres: &TensorSpace,
        nq: usize,
    ) -> Result<ElementTable, SpaceError> {
        let rule = GaussRule::new(nq);
        let vt: Vec<DirTable> = (0..3)
            .map(|d| DirTable::build(&vel.dir[d], &rule))
            .collect::<Result<_, _>>()?;
        let pt: Vec<DirTable> = (0..3)
            .map(|d| DirTable::build(&pres.dir[d], &rule))
            .collect::<Result<_, _>>()?;
        for d in 0..3 {
            if vt[d].n_spans() != pt[d].n_spans() {
                return Err(SpaceError::BadParameter(
                    "velocity and pressure element grids disagree".into(),
                ));
            }
        }
        let nel = [vt[0].n_spans(), vt[1].n_spans(), vt[2].n_spans()];
        let nq3 = nq * nq * nq;
        let vdims = vel.dims();
        let pdims = pres.dims();
        let mut elems = Vec::with_capacity(nel[0] * nel[1] * nel[2]);
        for e2 in 0..nel[2] {
            for e1 in 0..nel[1] {
                for e0 in 0..nel[0] {
                    let es = [e0, e1, e2];
                    let mut el = Element {
                        spans: es,
                        bounds: [vt[0].bounds[e0], vt[1].bounds[e1], vt[2].bounds[e2]],
                        vel_idx: Vec::new(),
                        pres_idx: Vec::new(),
                        vel_val: Vec::new(),
                        vel_grad: Vec::new(),
                        pres_val: Vec::new(),
                        pres_grad: Vec::new(),
                    };
                    fill_indices(&mut el.vel_idx, &vt, es, vdims);
                    fill_indices(&mut el.pres_idx, &pt, es, pdims);
                    fill_tables(&mut el.vel_val, &mut el.vel_grad, &vt, es, nq);
                    fill_tables(&mut el.pres_val, &mut el.pres_grad, &pt, es, nq);
                    elems.push(el);
                }
            }
        }
        Ok(ElementTable { elems, rule, nq3 })
    }

    /// Parametric coordinates of quadrature point `q` of element `el`.
    pub fn qp_xi(&self, el: &Element, q: usize) -> [f64; 3] {
        let nq = self.rule.len();
        let (q0, rest) = (q % nq, q / nq);
        let (q1, q2) = (rest % nq, rest / nq);
        let loc = [q0, q1, q2];
        let mut xi = [0.0; 3];
        for d in 0..3 {
            let [lo, hi] = el.bounds[d];
            xi[d] = lo + (hi - lo) * self.rule.nodes[loc[d]];
        }
        xi
    }

    /// Parametric quadrature weight (product rule scaled by span lengths).
    pub fn qp_weight(&self, el: &Element, q: usize) -> f64 {
        let nq = self.rule.len();
        let (q0, rest) = (q % nq, q / nq);
        let (q1, q2) = (rest % nq, rest / nq);
        let mut w = self.rule.weights[q0] * self.rule.weights[q1] * self.rule.weights[q2];
        for d in 0..3 {
            w *= el.bounds[d][1] - el.bounds[d][0];
        }
        w
    }
}

fn fill_indices(idx: &mut Vec<u32>, t: &[DirTable], es: [usize; 3], dims: [usize; 3]) {
    for l2 in 0..t[2].n_loc {
        for l1 in 0..t[1].n_loc {
            for l0 in 0..t[0].n_loc {
                let i = [
                    t[0].first[es[0]] + l0,
                    t[1].first[es[1]] + l1,
                    t[2].first[es[2]] + l2,
                ];
                idx.push((i[0] + dims[0] * (i[1] + dims[1] * i[2])) as u32);
            }
        }
    }
}

fn fill_tables(
    val: &mut Vec<f64>,
    grad: &mut Vec<[f64; 3]>,
    t: &[DirTable],
    es: [usize; 3],
    nq: usize,
) {
    // Rational tensor-product basis: R = (r0 r1 r2) where the univariate
    // factors are already rational, so products and product-rule gradients
    // are exact (weights factor per direction).
    let at = |d: usize, q: usize, l: usize| {
        let base = (es[d] * nq + q) * t[d].n_loc;
        (t[d].val[base + l], t[d].d1[base + l])
    };
    for q2 in 0..nq {
        for q1 in 0..nq {
            for q0 in 0..nq {
                for l2 in 0..t[2].n_loc {
                    let (v2, g2) = at(2, q2, l2);
                    for l1 in 0..t[1].n_loc {
                        let (v1, g1) = at(1, q1, l1);
                        for l0 in 0..t[0].n_loc {
                            let (v0, g0) = at(0, q0, l0);
                            val.push(v0 * v1 * v2);
                            grad.push([g0 * v1 * v2, v0 * g1 * v2, v0 * v1 * g2]);
                        }
                    }
                }
            }
        }
    }
}

/// Mixed pair with dof maps and default quadrature tables.
pub struct MixedSpace {
    pub patch: Patch,
    pub vel: TensorSpace,
    pub pres: TensorSpace,
    /// Geometry control points re-expressed in the pressure space.
    pub geo_ctrl: Vec<[f64; 3]>,
    pub p: usize,
    pub a: usize,
    pub b: usize,
    pub nel: [usize; 3],
    pub vmap: VelocityMap,
    pub pmap: ScalarMap,
    pub table: ElementTable,
    pub bc: BoundaryTags,
}

impl MixedSpace {
    pub fn n_vel_ctrl(&self) -> usize {
        self.vel.dim()
    }
    pub fn n_pres_ctrl(&self) -> usize {
        self.pres.dim()
    }
    pub fn n_eq(&self) -> usize {
        self.vmap.n_eq + self.pmap.n_eq
    }

    /// Default quadrature points per direction.
    pub fn nq_default(&self) -> usize {
        self.p + self.a + 1
    }

    /// Builds a fresh table with `nq` points per direction (error norms and
    /// inf-sup runs use `p + a + 2`).
    pub fn table_with(&self, nq: usize) -> Result<ElementTable, SpaceError> {
        ElementTable::build(&self.vel, &self.pres, nq)
    }

    /// Copies master values onto seam slaves (all three components).
    pub fn sync_vel_slaves(&self, x: &mut [f64]) {
        for (ctrl, cls) in self.vmap.class.iter().enumerate() {
            for c in 0..3 {
                if let DofClass::Slave(m) = cls[c] {
                    x[3 * ctrl + c] = x[3 * (m as usize) + c];
                }
            }
        }
    }

    pub fn sync_pres_slaves(&self, x: &mut [f64]) {
        for (ctrl, cls) in self.pmap.class.iter().enumerate() {
            if let DofClass::Slave(m) = *cls {
                x[ctrl] = x[m as usize];
            }
        }
    }

    /// Applies an equation-indexed increment to full control arrays.
    pub fn add_vel_increment(&self, x: &mut [f64], deq: &[f64], scale: f64) {
        for (ctrl, cls) in self.vmap.class.iter().enumerate() {
            for c in 0..3 {
                if let DofClass::Free(eq) = cls[c] {
                    x[3 * ctrl + c] += scale * deq[eq as usize];
                }
            }
        }
        self.sync_vel_slaves(x);
    }

    pub fn add_pres_increment(&self, x: &mut [f64], deq: &[f64], scale: f64) {
        for (ctrl, cls) in self.pmap.class.iter().enumerate() {
            if let DofClass::Free(eq) = *cls {
                x[ctrl] += scale * deq[eq as usize];
            }
        }
        self.sync_pres_slaves(x);
    }

    /// Writes prescribed boundary values into a full velocity control array.
    pub fn apply_dirichlet(&self, x: &mut [f64]) {
        for (ctrl, cls) in self.vmap.class.iter().enumerate() {
            for c in 0..3 {
                if let DofClass::Fixed(g) = cls[c] {
                    x[3 * ctrl + c] = g;
                }
            }
        }
        self.sync_vel_slaves(x);
    }
}

/// Builds the degree-`p` pressure knot vector on the element grid of `patch`
/// in direction `d`: coarse interior knots keep their coarse regularity,
/// refinement knots are simple.
fn pressure_kv(patch: &Patch, d: usize, p: usize) -> Result<KnotVector, SpaceError> {
    let coarse_kv = &patch.coarse.dir[d].kv;
    let p_geo = coarse_kv.degree();
    if p_geo > p {
        return Err(SpaceError::BadParameter(format!(
            "pressure degree {p} below geometry degree {p_geo} in direction {d}"
        )));
    }
    let coarse: Vec<(f64, usize)> = coarse_kv.distinct_knots();
    let fine = patch.space.dir[d].kv.distinct_knots();
    let mut knots = vec![0.0; p + 1];
    for &(z, _) in fine.iter().skip(1) {
        if z == 1.0 {
            break;
        }
        let mult = match coarse.iter().find(|&&(c, _)| c == z) {
            // preserve the coarse regularity alpha = p_geo - m across seams
            Some(&(_, m)) => p - (p_geo - m),
            None => 1,
        };
        knots.extend(std::iter::repeat(z).take(mult));
    }
    knots.extend(std::iter::repeat(1.0).take(p + 1));
    Ok(KnotVector::new(p, knots)?)
}

/// Constructs the mixed velocity/pressure pair on `patch`.
///
/// Pressure: degree `p` on the patch element grid. Velocity: degree `p + a`
/// with `b` extra interior multiplicities, per component. Seam closure
/// (annulus) is handled by slave identification in both spaces before
/// equation numbering. `nel` must match the patch grid.
pub fn build_mixed_pair(
    patch: Patch,
    p: usize,
    a: usize,
    b: usize,
    nel: [usize; 3],
    bc: BoundaryTags,
) -> Result<MixedSpace, SpaceError> {
    if a == 0 {
        return Err(SpaceError::BadParameter(
            "velocity degree must exceed pressure degree (a >= 1)".into(),
        ));
    }
    if b > a {
        return Err(SpaceError::BadParameter(format!(
            "smoothness drop b = {b} exceeds degree gap a = {a}"
        )));
    }
    if nel != patch.nel {
        return Err(SpaceError::BadParameter(format!(
            "requested grid {nel:?} does not match the patch grid {:?}",
            patch.nel
        )));
    }
    bc.validate()?;

    let pres_kv: [KnotVector; 3] = [
        pressure_kv(&patch, 0, p)?,
        pressure_kv(&patch, 1, p)?,
        pressure_kv(&patch, 2, p)?,
    ];
    let (pres, geo_ctrl) = patch.ctrl_in(&pres_kv)?;

    let mut vel_dir = Vec::with_capacity(3);
    for d in 0..3 {
        let kv = crate::splines::refine_space(&pres_kv[d], a, b).map_err(|e| {
            SpaceError::BadParameter(format!("velocity space in direction {d}: {e}"))
        })?;
        let w = patch.weights_in(d, &kv).map_err(|e| {
            SpaceError::BadParameter(format!(
                "patch weights are not representable in the velocity space \
                 (direction {d}, b = {b}): {e}"
            ))
        })?;
        vel_dir.push(UnivariateSpace::new(kv, w)?);
    }
    let vel = TensorSpace {
        dir: [
            vel_dir.remove(0),
            vel_dir.remove(0),
            vel_dir.remove(0),
        ],
    };

    let vmap = number_velocity(&patch, &vel, &bc)?;
    let pmap = number_pressure(&patch, &pres);
    let table = ElementTable::build(&vel, &pres, p + a + 1)?;
    Ok(MixedSpace {
        patch,
        vel,
        pres,
        geo_ctrl,
        p,
        a,
        b,
        nel,
        vmap,
        pmap,
        table,
        bc,
    })
}

fn seam_slaves(space: &TensorSpace, seam_dir: Option<usize>) -> Vec<Option<u32>> {
    let dims = space.dims();
    let mut out = vec![None; space.dim()];
    if let Some(d) = seam_dir {
        let n = dims[d];
        for a in 0..space.dim() {
            let idx = space.unindex(a);
            if idx[d] == n - 1 {
                let mut m = idx;
                m[d] = 0;
                out[a] = Some(space.index(m) as u32);
            }
        }
    }
    out
}

fn number_velocity(
    patch: &Patch,
    vel: &TensorSpace,
    bc: &BoundaryTags,
) -> Result<VelocityMap, SpaceError> {
    let dims = vel.dims();
    let n = vel.dim();
    let slaves = seam_slaves(vel, patch.seam_dir);
    // Greville abscissae of the velocity space locate the boundary data.
    let gre: [Vec<f64>; 3] = [
        vel.dir[0].kv.greville(),
        vel.dir[1].kv.greville(),
        vel.dir[2].kv.greville(),
    ];
    let mut fixed: Vec<[Option<f64>; 3]> = vec![[None; 3]; n];
    for fb in &bc.faces {
        let d = fb.face.dir;
        if d > 2 {
            return Err(SpaceError::BadParameter(format!("face direction {d}")));
        }
        if !fb.fixed.iter().any(|&f| f) {
            continue;
        }
        let layer = if fb.face.max_side { dims[d] - 1 } else { 0 };
        for a in 0..n {
            let idx = vel.unindex(a);
            if idx[d] != layer {
                continue;
            }
            let g = match &bc.dirichlet {
                Some(g) => {
                    let xi = [gre[0][idx[0]], gre[1][idx[1]], gre[2][idx[2]]];
                    let (x, _, _) = crate::geometry::map_geometry(patch, xi)?;
                    g([x[0], x[1], x[2]])
                }
                None => [0.0; 3],
            };
            for c in 0..3 {
                if fb.fixed[c] {
                    fixed[a][c] = Some(g[c]);
                }
            }
        }
    }
    let mut class = vec![[DofClass::Free(0); 3]; n];
    let mut eq = 0u32;
    for a in 0..n {
        for c in 0..3 {
            class[a][c] = if let Some(m) = slaves[a] {
                DofClass::Slave(m)
            } else if let Some(g) = fixed[a][c] {
                DofClass::Fixed(g)
            } else {
                let e = eq;
                eq += 1;
                DofClass::Free(e)
            };
        }
    }
    // A slave whose master is clamped inherits the clamp through resolve();
    // a clamped slave with a free master would silently lose its constraint.
    for a in 0..n {
        if let Some(m) = slaves[a] {
            for c in 0..3 {
                if fixed[a][c].is_some() && fixed[m as usize][c].is_none() {
                    return Err(SpaceError::BadParameter(
                        "seam slave clamped while its master is free".into(),
                    ));
                }
            }
        }
    }
    Ok(VelocityMap {
        class,
        n_eq: eq as usize,
    })
}

fn number_pressure(patch: &Patch, pres: &TensorSpace) -> ScalarMap {
    let n = pres.dim();
    let slaves = seam_slaves(pres, patch.seam_dir);
    let mut class = vec![DofClass::Free(0); n];
    let mut eq = 0u32;
    for a in 0..n {
        class[a] = if let Some(m) = slaves[a] {
            DofClass::Slave(m)
        } else {
            let e = eq;
            eq += 1;
            DofClass::Free(e)
        };
    }
    ScalarMap {
        class,
        n_eq: eq as usize,
    }
}

/// Which space an L2 projection targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectTarget {
    Velocity,
    Pressure,
}

/// L2 projection of an analytic field onto the discrete space, using the
/// physical measure. Velocity targets return interleaved `[u0x u0y u0z ...]`
/// control values with Dirichlet components pinned to their prescribed
/// values (the projection runs on the free equations); pressure targets
/// return one value per control.
pub fn l2_project(
    space: &MixedSpace,
    target: ProjectTarget,
    f: &dyn Fn([f64; 3]) -> [f64; 3],
) -> Result<Vec<f64>, SpaceError> {
    match target {
        ProjectTarget::Velocity => project_velocity(space, f),
        ProjectTarget::Pressure => project_pressure(space, &|x| f(x)[0]),
    }
}

fn geo_at_qp(space: &MixedSpace, el: &Element, q: usize) -> ([f64; 3], f64) {
    let nloc = el.pres_idx.len();
    let mut x = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for j in 0..nloc {
        let c = space.geo_ctrl[el.pres_idx[j] as usize];
        let v = el.pres_val[q * nloc + j];
        let g = el.pres_grad[q * nloc + j];
        for r in 0..3 {
            x[r] += v * c[r];
            for d in 0..3 {
                jac[r][d] += g[d] * c[r];
            }
        }
    }
    let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
    (x, det)
}

fn spd_solve(
    n: usize,
    triplets: &[Triplet<usize, usize, f64>],
    rhs: Mat<f64>,
) -> Result<Mat<f64>, SpaceError> {
    let m = SparseColMat::try_new_from_triplets(n, n, triplets)
        .map_err(|e| SpaceError::Solve(format!("{e:?}")))?;
    let llt = m
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| SpaceError::Solve(format!("{e:?}")))?;
    Ok(llt.solve(rhs))
}

fn project_velocity(
    space: &MixedSpace,
    f: &dyn Fn([f64; 3]) -> [f64; 3],
) -> Result<Vec<f64>, SpaceError> {
    let n_eq = space.vmap.n_eq;
    let mut out = vec![0.0; 3 * space.n_vel_ctrl()];
    space.apply_dirichlet(&mut out);
    if n_eq == 0 {
        return Ok(out);
    }
    let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
    let mut rhs = Mat::<f64>::zeros(n_eq, 1);
    for el in &space.table.elems {
        let nloc = el.vel_idx.len();
        let mut local = vec![0.0; nloc * nloc];
        let mut lrhs = vec![[0.0; 3]; nloc];
        for q in 0..space.table.nq3 {
            let (x, det) = geo_at_qp(space, el, q);
            let dvol = det * space.table.qp_weight(el, q);
            let fx = f(x);
            for i in 0..nloc {
                let ni = el.vel_val[q * nloc + i];
                for c in 0..3 {
                    lrhs[i][c] += ni * fx[c] * dvol;
                }
                for j in 0..nloc {
                    local[i * nloc + j] += ni * el.vel_val[q * nloc + j] * dvol;
                }
            }
        }
        for i in 0..nloc {
            let ai = el.vel_idx[i] as usize;
            for c in 0..3 {
                let (ri, mut radd) = match space.vmap.resolve(ai, c) {
                    DofClass::Free(e) => (e as usize, lrhs[i][c]),
                    DofClass::Fixed(_) => continue,
                    DofClass::Slave(_) => unreachable!(),
                };
                for j in 0..nloc {
                    let aj = el.vel_idx[j] as usize;
                    match space.vmap.resolve(aj, c) {
                        DofClass::Free(e2) => {
                            trips.push(Triplet::new(ri, e2 as usize, local[i * nloc + j]));
                        }
                        DofClass::Fixed(g) => radd -= local[i * nloc + j] * g,
                        DofClass::Slave(_) => unreachable!(),
                    }
                }
                rhs[(ri, 0)] += radd;
            }
        }
    }
    // The three components share the scalar mass but not the free sets, so
    // the interleaved system above is already the per-component solve.
    let sol = spd_solve(n_eq, &trips, rhs)?;
    for (ctrl, cls) in space.vmap.class.iter().enumerate() {
        for c in 0..3 {
            if let DofClass::Free(e) = cls[c] {
                out[3 * ctrl + c] = sol[(e as usize, 0)];
            }
        }
    }
    space.sync_vel_slaves(&mut out);
    Ok(out)
}

/// Scalar projection onto the pressure space.
pub fn project_pressure(
    space: &MixedSpace,
    f: &dyn Fn([f64; 3]) -> f64,
) -> Result<Vec<f64>, SpaceError> {
    let n_eq = space.pmap.n_eq;
    let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
    let mut rhs = Mat::<f64>::zeros(n_eq, 1);
    for el in &space.table.elems {
        let nloc = el.pres_idx.len();
        let mut local = vec![0.0; nloc * nloc];
        let mut lrhs = vec![0.0; nloc];
        for q in 0..space.table.nq3 {
            let (x, det) = geo_at_qp(space, el, q);
            let dvol = det * space.table.qp_weight(el, q);
            let fx = f(x);
            for i in 0..nloc {
                let ni = el.pres_val[q * nloc + i];
                lrhs[i] += ni * fx * dvol;
                for j in 0..nloc {
                    local[i * nloc + j] += ni * el.pres_val[q * nloc + j] * dvol;
                }
            }
        }
        for i in 0..nloc {
            let ri = match space.pmap.resolve(el.pres_idx[i] as usize) {
                DofClass::Free(e) => e as usize,
                _ => unreachable!(),
            };
            rhs[(ri, 0)] += lrhs[i];
            for j in 0..nloc {
                let cj = match space.pmap.resolve(el.pres_idx[j] as usize) {
                    DofClass::Free(e) => e as usize,
                    _ => unreachable!(),
                };
                trips.push(Triplet::new(ri, cj, local[i * nloc + j]));
            }
        }
    }
    let sol = spd_solve(n_eq, &trips, rhs)?;
    let mut out = vec![0.0; space.n_pres_ctrl()];
    for (ctrl, cls) in space.pmap.class.iter().enumerate() {
        if let DofClass::Free(e) = *cls {
            out[ctrl] = sol[(e as usize, 0)];
        }
    }
    space.sync_pres_slaves(&mut out);
    Ok(out)
}

/// Scalar L2 projection onto the velocity scalar space with no boundary
/// conditions. The field is given parametrically: `f(xi, x)` receives both
/// the parametric and the physical quadrature point, so discrete fields can
/// be projected without inverting the geometry map.
pub fn project_velocity_scalar(
    space: &MixedSpace,
    f: &dyn Fn([f64; 3], [f64; 3]) -> f64,
) -> Result<Vec<f64>, SpaceError> {
    let n = space.n_vel_ctrl();
    let slaves = seam_slaves(&space.vel, space.patch.seam_dir);
    let mut eq = 0u32;
    let class: Vec<DofClass> = (0..n)
        .map(|a| {
            if let Some(m) = slaves[a] {
                DofClass::Slave(m)
            } else {
                let e = eq;
                eq += 1;
                DofClass::Free(e)
            }
        })
        .collect();
    let n_eq = eq as usize;
    let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
    let mut rhs = Mat::<f64>::zeros(n_eq, 1);
    let resolve = |a: usize| match class[a] {
        DofClass::Slave(m) => match class[m as usize] {
            DofClass::Free(e) => e as usize,
            _ => unreachable!(),
        },
        DofClass::Free(e) => e as usize,
        DofClass::Fixed(_) => unreachable!(),
    };
    for el in &space.table.elems {
        let nloc = el.vel_idx.len();
        let mut local = vec![0.0; nloc * nloc];
        let mut lrhs = vec![0.0; nloc];
        for q in 0..space.table.nq3 {
            let (x, det) = geo_at_qp(space, el, q);
            let dvol = det * space.table.qp_weight(el, q);
            let fx = f(space.table.qp_xi(el, q), x);
            for i in 0..nloc {
                let ni = el.vel_val[q * nloc + i];
                lrhs[i] += ni * fx * dvol;
                for j in 0..nloc {
                    local[i * nloc + j] += ni * el.vel_val[q * nloc + j] * dvol;
                }
            }
        }
        for i in 0..nloc {
            let ri = resolve(el.vel_idx[i] as usize);
            rhs[(ri, 0)] += lrhs[i];
            for j in 0..nloc {
                let cj = resolve(el.vel_idx[j] as usize);
                trips.push(Triplet::new(ri, cj, local[i * nloc + j]));
            }
        }
    }
    let sol = spd_solve(n_eq, &trips, rhs)?;
    let mut out = vec![0.0; n];
    for a in 0..n {
        match class[a] {
            DofClass::Free(e) => out[a] = sol[(e as usize, 0)],
            DofClass::Slave(m) => out[a] = sol[(resolve(m as usize), 0)],
            DofClass::Fixed(_) => unreachable!(),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_annulus_disk, make_cube, make_quarter_cylinder};

    fn cube_space(p: usize, a: usize, b: usize, nel: [usize; 3]) -> MixedSpace {
        let patch = make_cube([1.0, 1.0, 1.0], p, nel).unwrap();
        build_mixed_pair(patch, p, a, b, nel, BoundaryTags::default()).unwrap()
    }

    #[test]
    fn cube_dimensions_match_hand_count() {
        // p=1, a=1, b=0 on 2x2x2: velocity quadratic C1 -> 5 per direction,
        // pressure linear C0 -> 3 per direction.
        let s = cube_space(1, 1, 0, [2, 2, 2]);
        assert_eq!(s.vel.dims(), [5, 5, 5]);
        assert_eq!(s.pres.dims(), [3, 3, 3]);
        assert_eq!(s.vmap.n_eq, 3 * 125);
        assert_eq!(s.pmap.n_eq, 27);
    }

    #[test]
    fn smoothness_graded_pair_constructible() {
        let s = cube_space(2, 2, 2, [2, 2, 2]);
        // pure k-refinement: velocity degree 4, C3 across the interior knot
        assert_eq!(s.vel.dir[0].kv.degree(), 4);
        let interior: Vec<(f64, usize)> = s.vel.dir[0]
            .kv
            .distinct_knots()
            .into_iter()
            .filter(|&(z, _)| z > 0.0 && z < 1.0)
            .collect();
        assert_eq!(interior, vec![(0.5, 1)]);
    }

    #[test]
    fn clamped_faces_leave_pressure_untouched() {
        let nel = [2, 2, 2];
        let patch = make_cube([1.0, 1.0, 1.0], 1, nel).unwrap();
        let s = build_mixed_pair(patch, 1, 1, 0, nel, BoundaryTags::clamp_all()).unwrap();
        // velocity free equations are the interior 3x3x3 grid per component
        assert_eq!(s.vmap.n_eq, 3 * 27);
        assert_eq!(s.pmap.n_eq, 27);
        assert!(s
            .pmap
            .class
            .iter()
            .all(|c| matches!(c, DofClass::Free(_))));
    }

    #[test]
    fn annulus_rejects_smoothness_drop() {
        let nel = [4, 1, 1];
        let patch = make_annulus_disk(0.5, 1.5, 1.0, nel).unwrap();
        let err = build_mixed_pair(patch, 2, 1, 1, nel, BoundaryTags::default());
        assert!(err.is_err());
    }

    #[test]
    fn annulus_seam_identification_counts() {
        let nel = [4, 1, 1];
        let patch = make_annulus_disk(0.5, 1.5, 1.0, nel).unwrap();
        let s = build_mixed_pair(patch, 2, 1, 0, nel, BoundaryTags::default()).unwrap();
        // circumferential: pressure deg 2, seams mult 2, 4 spans closed ->
        // 9 controls open, minus 1 identified = 8 distinct
        let pd = s.pres.dims();
        assert_eq!(pd[0], 9);
        assert_eq!(s.pmap.n_eq, 8 * pd[1] * pd[2]);
        let vd = s.vel.dims();
        assert_eq!(s.vmap.n_eq, 3 * (vd[0] - 1) * vd[1] * vd[2]);
    }

    #[test]
    fn element_table_matches_direct_evaluation() {
        let nel = [4, 2, 2];
        let patch = make_quarter_cylinder(0.5, 1.5, 1.0, nel).unwrap();
        let s = build_mixed_pair(patch, 2, 1, 0, nel, BoundaryTags::default()).unwrap();
        for (k, el) in s.table.elems.iter().enumerate().step_by(3) {
            let q = (k * 7 + 3) % s.table.nq3;
            let xi = s.table.qp_xi(el, q);
            // direct tensor-product rational evaluation per direction
            for (space, idxs, vals, grads) in [
                (&s.vel, &el.vel_idx, &el.vel_val, &el.vel_grad),
                (&s.pres, &el.pres_idx, &el.pres_val, &el.pres_grad),
            ] {
                let nloc = idxs.len();
                let evals: Vec<_> = (0..3)
                    .map(|d| space.dir[d].eval(xi[d], 1).unwrap())
                    .collect();
                for (j, &gidx) in idxs.iter().enumerate() {
                    let gi = space.unindex(gidx as usize);
                    let mut v = 1.0;
                    let mut g = [0.0; 3];
                    let mut loc = [0usize; 3];
                    for d in 0..3 {
                        let (span, ders) = &evals[d];
                        loc[d] = gi[d] - (span - space.dir[d].kv.degree());
                        v *= ders[0][loc[d]];
                    }
                    for d in 0..3 {
                        g[d] = 1.0;
                        for dd in 0..3 {
                            let (_, ders) = &evals[dd];
                            g[d] *= if dd == d {
                                ders[1][loc[dd]]
                            } else {
                                ders[0][loc[dd]]
                            };
                        }
                    }
                    assert!((vals[q * nloc + j] - v).abs() < 1e-14);
                    for d in 0..3 {
                        assert!((grads[q * nloc + j][d] - g[d]).abs() < 1e-13);
                    }
                }
            }
        }
    }

    fn eval_scalar(space: &crate::splines::TensorSpace, coef: &[f64], xi: [f64; 3]) -> f64 {
        let evals: Vec<_> = (0..3)
            .map(|d| space.dir[d].eval(xi[d], 0).unwrap())
            .collect();
        let dims = space.dims();
        let mut acc = 0.0;
        for a2 in 0..=space.dir[2].kv.degree() {
            for a1 in 0..=space.dir[1].kv.degree() {
                for a0 in 0..=space.dir[0].kv.degree() {
                    let i = [
                        evals[0].0 - space.dir[0].kv.degree() + a0,
                        evals[1].0 - space.dir[1].kv.degree() + a1,
                        evals[2].0 - space.dir[2].kv.degree() + a2,
                    ];
                    let idx = i[0] + dims[0] * (i[1] + dims[1] * i[2]);
                    acc += coef[idx] * evals[0].1[0][a0] * evals[1].1[0][a1] * evals[2].1[0][a2];
                }
            }
        }
        acc
    }

    fn pressure_projection_error(s: &MixedSpace) -> f64 {
        // project a generic pressure-space function onto the velocity space
        // and measure the worst pointwise mismatch
        let pc: Vec<f64> = (0..s.n_pres_ctrl())
            .map(|i| (1.3 * i as f64).sin() + 0.1)
            .collect();
        let vc = project_velocity_scalar(s, &|xi, _| eval_scalar(&s.pres, &pc, xi)).unwrap();
        let mut worst: f64 = 0.0;
        for trial in 0..60 {
            let t = trial as f64 / 59.0;
            let xi = [t, (0.7 * t + 0.13).fract(), (1.7 * t * t + 0.41).fract()];
            let pv = eval_scalar(&s.pres, &pc, xi);
            let vv = eval_scalar(&s.vel, &vc, xi);
            worst = worst.max((pv - vv).abs());
        }
        worst
    }

    #[test]
    fn velocity_space_reproduces_pressure_functions_at_matched_regularity() {
        // with b = 0 the velocity space keeps the pressure regularity, so
        // every pressure function is representable and the projection is
        // exact; the classical Taylor-Hood layout and the elevated pair
        for (p, a) in [(1usize, 1usize), (2, 2)] {
            let s = cube_space(p, a, 0, [2, 2, 2]);
            let worst = pressure_projection_error(&s);
            assert!(worst < 1e-10, "p={p} a={a}: mismatch {worst}");
        }
    }

    #[test]
    fn smoother_velocity_space_cannot_represent_pressure_kinks() {
        // b >= 1 raises the velocity regularity above the pressure space;
        // a generic pressure function keeps a derivative jump the smoother
        // space cannot match, so the projection has a genuine residual
        let s = cube_space(2, 2, 1, [2, 2, 2]);
        let worst = pressure_projection_error(&s);
        assert!(worst > 1e-6, "unexpected containment, mismatch {worst}");
    }

    #[test]
    fn velocity_projection_reproduces_affine_fields_with_clamps() {
        let nel = [2, 2, 2];
        let patch = make_cube([1.0, 1.0, 1.0], 1, nel).unwrap();
        let g = |x: [f64; 3]| [0.2 * x[2], 0.0, 0.1 * x[0] - 0.3 * x[1]];
        let bc = BoundaryTags {
            faces: vec![crate::geometry::FaceBc {
                face: crate::geometry::Face {
                    dir: 2,
                    max_side: false,
                },
                fixed: [true, true, true],
                traction: None,
            }],
            dirichlet: Some(Box::new(g)),
        };
        let s = build_mixed_pair(patch, 1, 1, 0, nel, bc).unwrap();
        let coefs = l2_project(&s, ProjectTarget::Velocity, &g).unwrap();
        // affine field, affine geometry: Greville pinning and the free
        // projection must both reproduce it exactly
        for trial in 0..20 {
            let t = trial as f64 / 19.0;
            let xi = [t, (0.31 + 0.6 * t).fract(), (0.87 * t + 0.05).fract()];
            let (x, _, _) = crate::geometry::map_geometry(&s.patch, xi).unwrap();
            let want = g([x[0], x[1], x[2]]);
            let evals: Vec<_> = (0..3)
                .map(|d| s.vel.dir[d].eval(xi[d], 0).unwrap())
                .collect();
            let dims = s.vel.dims();
            let mut got = [0.0; 3];
            for a2 in 0..=s.vel.dir[2].kv.degree() {
                for a1 in 0..=s.vel.dir[1].kv.degree() {
                    for a0 in 0..=s.vel.dir[0].kv.degree() {
                        let i = [
                            evals[0].0 - s.vel.dir[0].kv.degree() + a0,
                            evals[1].0 - s.vel.dir[1].kv.degree() + a1,
                            evals[2].0 - s.vel.dir[2].kv.degree() + a2,
                        ];
                        let idx = i[0] + dims[0] * (i[1] + dims[1] * i[2]);
                        let w = evals[0].1[0][a0] * evals[1].1[0][a1] * evals[2].1[0][a2];
                        for c in 0..3 {
                            got[c] += coefs[3 * idx + c] * w;
                        }
                    }
                }
            }
            for c in 0..3 {
                assert!(
                    (got[c] - want[c]).abs() < 1e-11,
                    "component {c} at {xi:?}: {} vs {}",
                    got[c],
                    want[c]
                );
            }
        }
    }

    #[test]
    fn pressure_projection_converges_quadratically_for_smooth_field() {
        // degree-1 pressure: L2 error order h^2 for a smooth field
        let f = |x: [f64; 3]| (2.0 * x[0]).sin() * (1.5 * x[1]).cos() * (x[2] + 0.3).powi(2);
        let mut errs = Vec::new();
        for nel in [2usize, 4] {
            let s = cube_space(1, 1, 0, [nel, nel, nel]);
            let pc = project_pressure(&s, &f).unwrap();
            // quadrature of the pointwise error over a finer table
            let table = s.table_with(4).unwrap();
            let mut e2 = 0.0;
            for el in &table.elems {
                let nloc = el.pres_idx.len();
                for q in 0..table.nq3 {
                    let (x, det) = geo_at_qp(&s, el, q);
                    let mut ph = 0.0;
                    for j in 0..nloc {
                        ph += pc[el.pres_idx[j] as usize] * el.pres_val[q * nloc + j];
                    }
                    let d = ph - f(x);
                    e2 += d * d * det * table.qp_weight(el, q);
                }
            }
            errs.push(e2.sqrt());
        }
        let rate = (errs[0] / errs[1]).log2();
        assert!(
            (rate - 2.0).abs() < 0.25,
            "L2 projection rate {rate}, errors {errs:?}"
        );
    }
}
