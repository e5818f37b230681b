//! Numerical inf-sup assessment of mixed pairs on the undeformed geometry.
//!
//! The harness assembles the divergence coupling D, the pressure mass W, and
//! the velocity H1 Gram V on a fully clamped velocity space, then computes
//! the spectrum of the pencil D V^-1 D^T psi = gamma W psi. The inf-sup
//! constant of the pair is the square root of the smallest eigenvalue above
//! the zero cluster; a stable element family keeps it bounded away from zero
//! under mesh refinement.

use crate::assembly::jacobian_at_qp;
use crate::geometry::{make_cube, make_quarter_cylinder, BoundaryTags, GeoError};
use crate::spaces::{build_mixed_pair, DofClass, MixedSpace, SpaceError};
use faer::linalg::solvers::Solve;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par, Side};
use nalgebra::Vector3;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InfSupError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("velocity components are constrained unequally at control {0}; the test needs the scalar block structure")]
    Mixed(usize),
    #[error("degenerate spaces: {0}")]
    Degenerate(String),
    #[error("factorization failed: {0}")]
    Solve(String),
}

/// A mixed pair staged for the inf-sup test: scalar equation numbering of
/// the (identically constrained) velocity components.
pub struct InfSupProblem {
    pub space: MixedSpace,
    sid: Vec<usize>,
    pub n_s: usize,
    /// Gauss points per direction, p + a + 2 by default.
    pub nq: usize,
}

impl InfSupProblem {
    pub fn new(space: MixedSpace) -> Result<Self, InfSupError> {
        let nq = space.p + space.a + 2;
        Self::with_quadrature(space, nq)
    }

    pub fn with_quadrature(space: MixedSpace, nq: usize) -> Result<Self, InfSupError> {
        let mut sid = vec![usize::MAX; space.n_vel_ctrl()];
        let mut n_s = 0;
        for (ctrl, cls) in space.vmap.class.iter().enumerate() {
            let kind = |c: &DofClass| match c {
                DofClass::Free(_) => 0u8,
                DofClass::Fixed(_) => 1,
                DofClass::Slave(_) => 2,
            };
            if kind(&cls[1]) != kind(&cls[0]) || kind(&cls[2]) != kind(&cls[0]) {
                return Err(InfSupError::Mixed(ctrl));
            }
            if kind(&cls[0]) == 0 {
                sid[ctrl] = n_s;
                n_s += 1;
            }
        }
        Ok(InfSupProblem { space, sid, n_s, nq })
    }

    /// Scalar equation of a velocity control, slaves folded onto masters.
    fn sid_of(&self, ctrl: usize) -> Option<usize> {
        let m = match self.space.vmap.class[ctrl][0] {
            DofClass::Slave(m) => m as usize,
            _ => ctrl,
        };
        (self.sid[m] != usize::MAX).then(|| self.sid[m])
    }

    fn peq_of(&self, ctrl: usize) -> Option<usize> {
        match self.space.pmap.resolve(ctrl) {
            DofClass::Free(e) => Some(e as usize),
            _ => None,
        }
    }
}

pub struct InfSupMatrices {
    /// Velocity dof count of the test, all three components.
    pub n_v: usize,
    pub n_p: usize,
    /// Per-component divergence couplings, n_s x n_p.
    pub d: [SparseColMat<usize, f64>; 3],
    /// Pressure mass, dense (dense eigensolve downstream).
    pub w: Mat<f64>,
    /// Scalar velocity H1 Gram; the full V is this block repeated per
    /// component.
    pub v: SparseColMat<usize, f64>,
}

pub fn assemble_infsup(ip: &InfSupProblem) -> Result<InfSupMatrices, InfSupError> {
    let space = &ip.space;
    let table = space.table_with(ip.nq)?;
    let n_p = space.pmap.n_eq;
    let n_s = ip.n_s;
    let mut w = Mat::<f64>::zeros(n_p, n_p);
    let mut v_trips: Vec<Triplet<usize, usize, f64>> = Vec::new();
    let mut d_trips: [Vec<Triplet<usize, usize, f64>>; 3] = Default::default();
    for el in &table.elems {
        let nv = el.vel_idx.len();
        let np = el.pres_idx.len();
        let mut lv = vec![0.0; nv * nv];
        let mut lw = vec![0.0; np * np];
        let mut ld = vec![[0.0; 3]; nv * np];
        let mut grads = vec![Vector3::<f64>::zeros(); nv];
        for q in 0..table.nq3 {
            let (_, jac) = jacobian_at_qp(space, el, q);
            let det = jac.determinant();
            let jinv_t = jac
                .try_inverse()
                .ok_or_else(|| InfSupError::Degenerate("singular geometry Jacobian".into()))?
                .transpose();
            let wq = det * table.qp_weight(el, q);
            for (j, g) in grads.iter_mut().enumerate() {
                let gp = el.vel_grad[q * nv + j];
                *g = jinv_t * Vector3::new(gp[0], gp[1], gp[2]);
            }
            for j in 0..nv {
                let nj = el.vel_val[q * nv + j];
                for j2 in 0..=j {
                    lv[j * nv + j2] +=
                        (nj * el.vel_val[q * nv + j2] + grads[j].dot(&grads[j2])) * wq;
                }
                for m in 0..np {
                    let mv = el.pres_val[q * np + m] * wq;
                    for i in 0..3 {
                        ld[j * np + m][i] += grads[j][i] * mv;
                    }
                }
            }
            for m in 0..np {
                let mm = el.pres_val[q * np + m];
                for m2 in 0..=m {
                    lw[m * np + m2] += mm * el.pres_val[q * np + m2] * wq;
                }
            }
        }
        let vs: Vec<Option<usize>> = el
            .vel_idx
            .iter()
            .map(|&a| ip.sid_of(a as usize))
            .collect();
        let ps: Vec<Option<usize>> = el
            .pres_idx
            .iter()
            .map(|&a| ip.peq_of(a as usize))
            .collect();
        for j in 0..nv {
            let Some(r) = vs[j] else { continue };
            for j2 in 0..=j {
                let Some(c) = vs[j2] else { continue };
                let x = lv[j * nv + j2];
                v_trips.push(Triplet::new(r, c, x));
                if j2 != j {
                    v_trips.push(Triplet::new(c, r, x));
                }
            }
            for m in 0..np {
                let Some(c) = ps[m] else { continue };
                for i in 0..3 {
                    d_trips[i].push(Triplet::new(r, c, ld[j * np + m][i]));
                }
            }
        }
        for m in 0..np {
            let Some(r) = ps[m] else { continue };
            for m2 in 0..=m {
                let Some(c) = ps[m2] else { continue };
                w[(r, c)] += lw[m * np + m2];
                if c != r {
                    w[(c, r)] += lw[m * np + m2];
                }
            }
        }
    }
    let sp = |t: &[Triplet<usize, usize, f64>], r: usize, c: usize| {
        SparseColMat::try_new_from_triplets(r, c, t)
            .map_err(|e| InfSupError::Solve(format!("{e:?}")))
    };
    let [d0, d1, d2] = d_trips;
    Ok(InfSupMatrices {
        n_v: 3 * n_s,
        n_p,
        d: [
            sp(&d0, n_s, n_p)?,
            sp(&d1, n_s, n_p)?,
            sp(&d2, n_s, n_p)?,
        ],
        w,
        v: sp(&v_trips, n_s, n_s)?,
    })
}

/// Spectrum of the reduced pencil, nondecreasing. All eigenvalues are real
/// and nonnegative up to roundoff.
pub fn pencil_eigenvalues(m: &InfSupMatrices) -> Result<Vec<f64>, InfSupError> {
    let n_p = m.n_p;
    let n_s = m.v.nrows();
    if n_p == 0 || n_s == 0 {
        return Err(InfSupError::Degenerate(format!(
            "empty test spaces (n_s = {n_s}, n_p = {n_p})"
        )));
    }
    let llt_v = m
        .v
        .sp_cholesky(Side::Lower)
        .map_err(|e| InfSupError::Solve(format!("V Cholesky: {e:?}")))?;
    // S = sum_i D_i^T V^-1 D_i, upper triangle then mirrored
    let mut s = Mat::<f64>::zeros(n_p, n_p);
    let chunk = 256;
    for di in &m.d {
        let sym = di.symbolic();
        let col = |c: usize| {
            let range = sym.col_range(c);
            sym.row_idx()[range.clone()]
                .iter()
                .zip(&di.val()[range])
        };
        for c0 in (0..n_p).step_by(chunk) {
            let c1 = (c0 + chunk).min(n_p);
            let mut rhs = Mat::<f64>::zeros(n_s, c1 - c0);
            for c in c0..c1 {
                for (&r, &x) in col(c) {
                    rhs[(r, c - c0)] = x;
                }
            }
            let x = llt_v.solve(rhs);
            for a in 0..=(c1 - 1) {
                for c in c0.max(a)..c1 {
                    let mut acc = 0.0;
                    for (&r, &val) in col(a) {
                        acc += val * x[(r, c - c0)];
                    }
                    s[(a, c)] += acc;
                }
            }
        }
    }
    for r in 0..n_p {
        for c in 0..r {
            s[(r, c)] = s[(c, r)];
        }
    }
    // reduce with W = L L^T to a standard symmetric problem L^-1 S L^-T
    let llt_w = m
        .w
        .llt(Side::Lower)
        .map_err(|e| InfSupError::Solve(format!("W Cholesky: {e:?}")))?;
    let lmat = llt_w.L();
    solve_lower_triangular_in_place(lmat, s.as_mut(), Par::Seq);
    let mut st = s.transpose().to_owned();
    solve_lower_triangular_in_place(lmat, st.as_mut(), Par::Seq);
    st.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| InfSupError::Solve(format!("eigensolve: {e:?}")))
}

/// The inf-sup constant: square root of the smallest eigenvalue above the
/// zero cluster (threshold `zero_tol` relative to the largest eigenvalue).
pub fn beta_h(m: &InfSupMatrices, zero_tol: f64) -> Result<f64, InfSupError> {
    let eigs = pencil_eigenvalues(m)?;
    let lam_max = *eigs.last().unwrap();
    if !(lam_max > 0.0) {
        return Err(InfSupError::Degenerate(
            "all pencil eigenvalues vanish".into(),
        ));
    }
    let thresh = zero_tol * lam_max;
    eigs.iter()
        .copied()
        .find(|&l| l > thresh)
        .map(f64::sqrt)
        .ok_or_else(|| InfSupError::Degenerate("all pencil eigenvalues vanish".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepGeometry {
    /// Unit cube.
    Cube,
    /// 90 degree annular sector, Ri = 0.5, Ro = 1.5, H = 1.
    Cylinder,
}

impl fmt::Display for SweepGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepGeometry::Cube => "cube",
            SweepGeometry::Cylinder => "cylinder",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepCell {
    pub geometry: SweepGeometry,
    pub p: usize,
    pub a: usize,
    pub b: usize,
    pub nel: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub n_v: usize,
    pub n_p: usize,
    pub beta_h: Option<f64>,
    pub status: String,
    pub seconds: f64,
}

pub fn run_cell(cell: &SweepCell) -> SweepRow {
    let t0 = Instant::now();
    let res = (|| -> Result<(usize, usize, f64), InfSupError> {
        let nel = [cell.nel; 3];
        let patch = match cell.geometry {
            SweepGeometry::Cube => make_cube([1.0; 3], cell.p, nel)?,
            SweepGeometry::Cylinder => make_quarter_cylinder(0.5, 1.5, 1.0, nel)?,
        };
        let space = build_mixed_pair(patch, cell.p, cell.a, cell.b, nel, BoundaryTags::clamp_all())?;
        let ip = InfSupProblem::new(space)?;
        let m = assemble_infsup(&ip)?;
        let beta = beta_h(&m, 1e-10)?;
        Ok((m.n_v, m.n_p, beta))
    })();
    let (n_v, n_p, beta, status) = match res {
        Ok((n_v, n_p, beta)) => (n_v, n_p, Some(beta), "ok".to_string()),
        Err(e) => (0, 0, None, format!("{e}").replace(',', ";")),
    };
    SweepRow {
        cell: *cell,
        n_v,
        n_p,
        beta_h: beta,
        status,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs every cell, continuing past per-cell failures.
pub fn sweep(cells: &[SweepCell]) -> Vec<SweepRow> {
    cells.iter().map(run_cell).collect()
}

pub fn write_infsup_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "geometry,p,a,b,nel,n_v,n_p,beta_h,status,seconds")?;
    for r in rows {
        let beta = r
            .beta_h
            .map(|b| format!("{b:.12e}"))
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.cell.geometry,
            r.cell.p,
            r.cell.a,
            r.cell.b,
            r.cell.nel,
            r.n_v,
            r.n_p,
            beta,
            r.status,
            r.seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unclamped_unit_cell() -> InfSupProblem {
        let patch = make_cube([1.0; 3], 1, [1, 1, 1]).unwrap();
        let space =
            build_mixed_pair(patch, 1, 1, 0, [1, 1, 1], BoundaryTags::default()).unwrap();
        InfSupProblem::new(space).unwrap()
    }

    #[test]
    fn pressure_mass_matches_trilinear_values_and_is_spd() {
        let ip = unclamped_unit_cell();
        let m = assemble_infsup(&ip).unwrap();
        assert_eq!(m.n_p, 8);
        // trilinear mass on the unit cube: tensor of [1/3 1/6; 1/6 1/3]
        let peq: Vec<usize> = (0..8).map(|c| ip.peq_of(c).unwrap()).collect();
        let m1 = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
        for a in 0..8usize {
            let (ia, ja, ka) = (a & 1, (a >> 1) & 1, (a >> 2) & 1);
            for b in 0..8usize {
                let (ib, jb, kb) = (b & 1, (b >> 1) & 1, (b >> 2) & 1);
                let exact = m1[ia][ib] * m1[ja][jb] * m1[ka][kb];
                let got = m.w[(peq[a], peq[b])];
                assert!((got - exact).abs() < 1e-14, "W[{a},{b}] = {got} vs {exact}");
            }
        }
        let eigs = m.w.self_adjoint_eigenvalues(Side::Lower).unwrap();
        assert!(eigs[0] > 0.0);
        assert!(m.w.llt(Side::Lower).is_ok());
    }

    #[test]
    fn velocity_gram_matches_hand_integrated_values() {
        // one-element unit cube, quadratic velocity: 1D factors
        //   mass [1/5 1/10 1/30; ...], stiffness (2/3)[2 -1 -1; ...]
        let ip = unclamped_unit_cell();
        let m = assemble_infsup(&ip).unwrap();
        assert_eq!(m.v.nrows(), 27);
        let dense = m.v.to_dense();
        // corner-corner: (1/5)^3 + 3*(4/3)(1/5)^2 = 21/125
        assert!((dense[(0, 0)] - 21.0 / 125.0).abs() < 1e-14);
        // center-center: (2/15)^3 + 3*(4/3)(2/15)^2 = 248/3375
        assert!((dense[(13, 13)] - 248.0 / 3375.0).abs() < 1e-14);
        // corner to x-neighbor: 23/750
        assert!((dense[(0, 1)] - 23.0 / 750.0).abs() < 1e-14);
        // symmetry of the assembled Gram
        for r in 0..27 {
            for c in 0..r {
                assert!((dense[(r, c)] - dense[(c, r)]).abs() < 1e-15);
            }
        }
    }

    fn worst_divergence_row_sum(geom: SweepGeometry, p: usize, a: usize, b: usize, extra_nq: usize) -> f64 {
        let nel = [2, 2, 2];
        let patch = match geom {
            SweepGeometry::Cube => make_cube([1.0; 3], p, nel).unwrap(),
            SweepGeometry::Cylinder => make_quarter_cylinder(0.5, 1.5, 1.0, nel).unwrap(),
        };
        let space = build_mixed_pair(patch, p, a, b, nel, BoundaryTags::clamp_all()).unwrap();
        let ip = InfSupProblem::with_quadrature(space, p + a + 2 + extra_nq).unwrap();
        let m = assemble_infsup(&ip).unwrap();
        let mut worst = 0.0f64;
        for di in &m.d {
            let dense = di.to_dense();
            for r in 0..di.nrows() {
                let sum: f64 = (0..di.ncols()).map(|c| dense[(r, c)]).sum();
                worst = worst.max(sum.abs());
            }
        }
        worst
    }

    #[test]
    fn divergence_rows_vanish_on_constant_pressure() {
        // sum_B of D^i_{AB} integrates d_i N_A against the pressure partition
        // of unity; clamped (interior-supported) N_A make it a pure boundary
        // term, hence zero. The cube integrand is polynomial, so the Gauss
        // rule sees it exactly; the rational cylinder carries a quadrature
        // residue that must die out fast under rule refinement.
        assert!(worst_divergence_row_sum(SweepGeometry::Cube, 1, 2, 1, 0) < 1e-13);
        let coarse = worst_divergence_row_sum(SweepGeometry::Cylinder, 2, 1, 0, 0);
        let fine = worst_divergence_row_sum(SweepGeometry::Cylinder, 2, 1, 0, 4);
        assert!(coarse < 1e-6, "default rule residue {coarse}");
        assert!(
            fine < coarse * 1e-2,
            "residue {coarse} -> {fine} is not quadrature-dominated"
        );
    }

    #[test]
    fn pencil_spectrum_is_nonnegative_with_constant_null_mode() {
        let nel = [4, 4, 4];
        let patch = make_cube([1.0; 3], 1, nel).unwrap();
        let space = build_mixed_pair(patch, 1, 1, 0, nel, BoundaryTags::clamp_all()).unwrap();
        let ip = InfSupProblem::new(space).unwrap();
        let m = assemble_infsup(&ip).unwrap();
        assert!(m.n_v >= m.n_p, "pressure space must be the smaller one here");
        let eigs = pencil_eigenvalues(&m).unwrap();
        let lam_max = *eigs.last().unwrap();
        assert!(lam_max > 0.0);
        for &l in &eigs {
            assert!(l >= -1e-10 * lam_max, "negative eigenvalue {l}");
        }
        let zeros = eigs.iter().filter(|&&l| l <= 1e-10 * lam_max).count();
        assert_eq!(zeros, 1, "expected only the constant-pressure null mode");
        let beta = beta_h(&m, 1e-10).unwrap();
        assert!((beta - eigs[1].sqrt()).abs() < 1e-15);
        assert!(beta > 1e-2, "quadratic/linear pair should be stable");
    }

    #[test]
    fn coarse_refinement_separates_stable_from_unstable_family() {
        let beta_of = |b: usize, nel: usize| {
            run_cell(&SweepCell {
                geometry: SweepGeometry::Cube,
                p: 1,
                a: 1,
                b,
                nel,
            })
            .beta_h
            .unwrap()
        };
        let stable = (beta_of(0, 2), beta_of(0, 4));
        let unstable = (beta_of(1, 2), beta_of(1, 4));
        assert!(
            stable.1 > 0.7 * stable.0,
            "degree-elevated family degraded: {stable:?}"
        );
        assert!(
            unstable.1 < unstable.0,
            "pure smoothness elevation should decay: {unstable:?}"
        );
    }

    #[test]
    fn beta_is_invariant_under_weight_rescaling() {
        let cell = SweepCell {
            geometry: SweepGeometry::Cylinder,
            p: 2,
            a: 1,
            b: 0,
            nel: 2,
        };
        let base = run_cell(&cell).beta_h.unwrap();
        let mut patch = make_quarter_cylinder(0.5, 1.5, 1.0, [2, 2, 2]).unwrap();
        patch.rescale_weights(0, 3.0).unwrap();
        let space =
            build_mixed_pair(patch, 2, 1, 0, [2, 2, 2], BoundaryTags::clamp_all()).unwrap();
        let m = assemble_infsup(&InfSupProblem::new(space).unwrap()).unwrap();
        let scaled = beta_h(&m, 1e-10).unwrap();
        assert!(
            (scaled - base).abs() < 1e-10 * base,
            "beta {base} changed to {scaled} under weight normalization"
        );
    }

    #[test]
    fn repeated_cells_are_deterministic() {
        let cell = SweepCell {
            geometry: SweepGeometry::Cylinder,
            p: 2,
            a: 1,
            b: 1,
            nel: 2,
        };
        let a = run_cell(&cell).beta_h.unwrap();
        let b = run_cell(&cell).beta_h.unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let dir = std::env::temp_dir().join("infsup_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("infsup.csv");
        write_infsup_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "geometry,p,a,b,nel,n_v,n_p,beta_h,status,seconds\n");
        let rows = sweep(&[SweepCell {
            geometry: SweepGeometry::Cube,
            p: 1,
            a: 1,
            b: 0,
            nel: 2,
        }]);
        write_infsup_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("cube,1,1,0,2,"));
        assert!(lines[1].contains(",ok,"));
    }
}
