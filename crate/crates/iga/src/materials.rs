//! Constitutive models: isochoric Gibbs free energies, deviatoric stress via
//! the isochoric projector, density/compressibility closures, and consistent
//! material tangents.
//!
//! Stress measures follow the multiplicative split F = J^{1/3} F_tilde. The
//! fictitious second Piola-Kirchhoff stress S_tilde = 2 d(rho0 G_ich)/dC_tilde
//! is mapped to the physical deviatoric stress through the projector
//! P : S = S - (1/3)(S : C) C^{-1}.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("element inversion: det F = {det}")]
    Inverted { det: f64 },
    #[error("bad material parameter: {0}")]
    BadParameter(String),
}

/// Kinematic quantities derived from one deformation gradient.
#[derive(Debug, Clone)]
pub struct DeformationState {
    pub f: Matrix3<f64>,
    pub j: f64,
    pub c: Matrix3<f64>,
    pub c_inv: Matrix3<f64>,
    /// C_tilde = J^{-2/3} C (unimodular).
    pub c_tilde: Matrix3<f64>,
    /// F_tilde = J^{-1/3} F.
    pub f_tilde: Matrix3<f64>,
    pub i1_tilde: f64,
    pub i2_tilde: f64,
}

pub fn kinematics(f: Matrix3<f64>) -> Result<DeformationState, MaterialError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(MaterialError::Inverted { det: j });
    }
    let c = f.transpose() * f;
    let c_inv = c.try_inverse().ok_or(MaterialError::Inverted { det: j })?;
    let s = j.powf(-2.0 / 3.0);
    let c_tilde = c * s;
    let f_tilde = f * j.powf(-1.0 / 3.0);
    let i1 = c_tilde.trace();
    let i2 = 0.5 * (i1 * i1 - (c_tilde * c_tilde).trace());
    Ok(DeformationState {
        f,
        j,
        c,
        c_inv,
        c_tilde,
        f_tilde,
        i1_tilde: i1,
        i2_tilde: i2,
    })
}

/// Current mass density under exact incompressible kinematics is rho0; the
/// dynamic residuals use the referential identity rho(J) J = rho0.
pub fn current_density(rho0: f64, j: f64) -> f64 {
    rho0 / j
}

/// Isochoric energy family.
#[derive(Debug, Clone)]
pub enum Isochoric {
    NeoHookean {
        c1: f64,
    },
    MooneyRivlin {
        c1: f64,
        c2: f64,
    },
    /// Dispersed two-fiber model on a Neo-Hookean ground matrix. Fibers
    /// contribute only in tension unless `tension_only` is cleared.
    Goh {
        c1: f64,
        k1: f64,
        k2: f64,
        kd: f64,
        fibers: [Vector3<f64>; 2],
        tension_only: bool,
    },
}

#[derive(Debug, Clone)]
pub struct MaterialModel {
    pub iso: Isochoric,
    pub rho0: f64,
}

impl MaterialModel {
    pub fn new(iso: Isochoric, rho0: f64) -> Result<Self, MaterialError> {
        if !(rho0 > 0.0) {
            return Err(MaterialError::BadParameter(format!("rho0 = {rho0}")));
        }
        let bad = |what: &str, v: f64| MaterialError::BadParameter(format!("{what} = {v}"));
        match &iso {
            Isochoric::NeoHookean { c1 } => {
                if !(*c1 > 0.0) {
                    return Err(bad("c1", *c1));
                }
            }
            Isochoric::MooneyRivlin { c1, c2 } => {
                if !(*c1 > 0.0) {
                    return Err(bad("c1", *c1));
                }
                if !(*c2 > 0.0) {
                    return Err(bad("c2", *c2));
                }
            }
            Isochoric::Goh {
                c1,
                k1,
                k2,
                kd,
                fibers,
                ..
            } => {
                if !(*c1 > 0.0) {
                    return Err(bad("c1", *c1));
                }
                if !(*k1 > 0.0) {
                    return Err(bad("k1", *k1));
                }
                if !(*k2 > 0.0) {
                    return Err(bad("k2", *k2));
                }
                if !(0.0..=1.0 / 3.0).contains(kd) {
                    return Err(bad("kd", *kd));
                }
                for a in fibers {
                    if (a.norm() - 1.0).abs() > 1e-12 {
                        return Err(MaterialError::BadParameter(format!(
                            "fiber direction not unit: |a| = {}",
                            a.norm()
                        )));
                    }
                }
            }
        }
        Ok(MaterialModel { iso, rho0 })
    }
}

/// Structure tensor H = kd I + (1 - 3 kd) a (x) a; tr H = 1 by construction.
fn structure_tensor(kd: f64, a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() * kd + (a * a.transpose()) * (1.0 - 3.0 * kd)
}

/// Fiber strain invariant E_i = H_i : C_tilde - 1.
fn fiber_strains(kd: f64, fibers: &[Vector3<f64>; 2], ct: &Matrix3<f64>) -> [(Matrix3<f64>, f64); 2] {
    [0, 1].map(|i| {
        let h = structure_tensor(kd, &fibers[i]);
        ((h), (h.component_mul(ct)).sum() - 1.0)
    })
}

/// rho0 G_ich in Pa.
pub fn isochoric_energy(m: &MaterialModel, s: &DeformationState) -> f64 {
    match &m.iso {
        Isochoric::NeoHookean { c1 } => 0.5 * c1 * (s.i1_tilde - 3.0),
        Isochoric::MooneyRivlin { c1, c2 } => {
            0.5 * c1 * (s.i1_tilde - 3.0) + 0.5 * c2 * (s.i2_tilde - 3.0)
        }
        Isochoric::Goh {
            c1,
            k1,
            k2,
            kd,
            fibers,
            tension_only,
        } => {
            let mut e = 0.5 * c1 * (s.i1_tilde - 3.0);
            for (_, ei) in fiber_strains(*kd, fibers, &s.c_tilde) {
                if !tension_only || ei > 0.0 {
                    e += 0.5 * k1 / k2 * ((k2 * ei * ei).exp() - 1.0);
                }
            }
            e
        }
    }
}

/// Fictitious stress S_tilde = 2 d(rho0 G_ich)/dC_tilde.
pub fn fictitious_stress(m: &MaterialModel, s: &DeformationState) -> Matrix3<f64> {
    match &m.iso {
        Isochoric::NeoHookean { c1 } => Matrix3::identity() * *c1,
        Isochoric::MooneyRivlin { c1, c2 } => {
            Matrix3::identity() * *c1
                + (Matrix3::identity() * s.i1_tilde - s.c_tilde) * *c2
        }
        Isochoric::Goh {
            c1,
            k1,
            k2,
            kd,
            fibers,
            tension_only,
        } => {
            let mut st = Matrix3::identity() * *c1;
            for (h, ei) in fiber_strains(*kd, fibers, &s.c_tilde) {
                if !tension_only || ei > 0.0 {
                    st += h * (2.0 * k1 * ei * (k2 * ei * ei).exp());
                }
            }
            st
        }
    }
}

/// Deviatoric (isochoric) second Piola-Kirchhoff stress
/// S_iso = J^{-2/3} (S_tilde - (1/3)(S_tilde : C) C^{-1}).
pub fn isochoric_pk2(m: &MaterialModel, s: &DeformationState) -> Matrix3<f64> {
    let st = fictitious_stress(m, s);
    let trace = (st.component_mul(&s.c)).sum();
    (st - s.c_inv * (trace / 3.0)) * s.j.powf(-2.0 / 3.0)
}

/// Deviatoric Cauchy stress sigma_dev = J^{-1} F_tilde (P : S_tilde) F_tilde^T
/// = J^{-1} F S_iso F^T; exactly trace-free.
pub fn deviatoric_cauchy(m: &MaterialModel, s: &DeformationState) -> Matrix3<f64> {
    s.f * isochoric_pk2(m, s) * s.f.transpose() / s.j
}

/// Volumetric closure.
#[derive(Debug, Clone, Copy)]
pub enum VolumetricModel {
    Incompressible,
    ExponentialBulk { kappa: f64 },
}

/// (rho(p), beta_theta(p)): incompressible gives (rho0, 0); the exponential
/// bulk model gives (rho0 e^{p/kappa}, 1/kappa).
pub fn density_and_beta(v: VolumetricModel, p: f64, rho0: f64) -> (f64, f64) {
    match v {
        VolumetricModel::Incompressible => (rho0, 0.0),
        VolumetricModel::ExponentialBulk { kappa } => ((p / kappa).exp() * rho0, 1.0 / kappa),
    }
}

/// Fourth-order tensor on symmetric slots, stored densely.
#[derive(Clone)]
pub struct Tangent4(pub [[[[f64; 3]; 3]; 3]; 3]);

impl Tangent4 {
    pub fn zeros() -> Self {
        Tangent4([[[[0.0; 3]; 3]; 3]; 3])
    }

    /// A (x) B, components A_ij B_kl.
    pub fn dyad(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        t.0[i][j][k][l] = a[(i, j)] * b[(k, l)];
                    }
                }
            }
        }
        t
    }

    /// Symmetrized product (A . B)_{ijkl} = (A_ik B_jl + A_il B_jk)/2.
    pub fn odot(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        t.0[i][j][k][l] =
                            0.5 * (a[(i, k)] * b[(j, l)] + a[(i, l)] * b[(j, k)]);
                    }
                }
            }
        }
        t
    }

    pub fn scale(mut self, s: f64) -> Self {
        for x in self.0.iter_mut().flatten().flatten().flatten() {
            *x *= s;
        }
        self
    }

    pub fn add(mut self, o: &Tangent4) -> Self {
        for (x, y) in self
            .0
            .iter_mut()
            .flatten()
            .flatten()
            .flatten()
            .zip(o.0.iter().flatten().flatten().flatten())
        {
            *x += *y;
        }
        self
    }

    /// Double contraction with a symmetric matrix on the last two slots.
    pub fn contract(&self, h: &Matrix3<f64>) -> Matrix3<f64> {
        let mut out = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        acc += self.0[i][j][k][l] * h[(k, l)];
                    }
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    /// Voigt 6x6 in the order (11, 22, 33, 12, 23, 13): raw tensor
    /// components, with engineering shear doubling left to the B-operator.
    pub fn voigt(&self) -> [[f64; 6]; 6] {
        const P: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)];
        let mut d = [[0.0; 6]; 6];
        for (al, &(i, j)) in P.iter().enumerate() {
            for (be, &(k, l)) in P.iter().enumerate() {
                d[al][be] = self.0[i][j][k][l];
            }
        }
        d
    }
}

/// Fictitious elasticity tensor C_tilde4 = 2 dS_tilde/dC_tilde.
fn fictitious_tangent(m: &MaterialModel, s: &DeformationState) -> Tangent4 {
    match &m.iso {
        Isochoric::NeoHookean { .. } => Tangent4::zeros(),
        Isochoric::MooneyRivlin { c2, .. } => {
            let id = Matrix3::identity();
            Tangent4::dyad(&id, &id)
                .add(&Tangent4::odot(&id, &id).scale(-1.0))
                .scale(2.0 * c2)
        }
        Isochoric::Goh {
            k1,
            k2,
            kd,
            fibers,
            tension_only,
            ..
        } => {
            let mut t = Tangent4::zeros();
            for (h, ei) in fiber_strains(*kd, fibers, &s.c_tilde) {
                if !tension_only || ei > 0.0 {
                    let w = 4.0 * k1 * (1.0 + 2.0 * k2 * ei * ei) * (k2 * ei * ei).exp();
                    t = t.add(&Tangent4::dyad(&h, &h).scale(w));
                }
            }
            t
        }
    }
}

/// Material tangent of the deviatoric stress: C_iso = 2 dS_iso/dC, with
/// S_iso from [`isochoric_pk2`]. Minor and major symmetric.
pub fn material_tangent(m: &MaterialModel, s: &DeformationState) -> Tangent4 {
    let st = fictitious_stress(m, s);
    let s_iso = isochoric_pk2(m, s);
    let jm23 = s.j.powf(-2.0 / 3.0);
    let jm43 = jm23 * jm23;
    let tr = (st.component_mul(&s.c)).sum();
    let ct = fictitious_tangent(m, s).scale(jm43);

    // project: (P : C4 : P^T)_{ijkl} = P_ijmn C_mnpq P_klpq with
    // P : A = A - (1/3)(C : A) C^{-1}
    let project = |a: &Matrix3<f64>| -> Matrix3<f64> {
        a - s.c_inv * ((a.component_mul(&s.c)).sum() / 3.0)
    };
    let mut projected = Tangent4::zeros();
    {
        // apply P^T on the right first (columns), then P on the left (rows)
        let mut right = Tangent4::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut row = Matrix3::zeros();
                for k in 0..3 {
                    for l in 0..3 {
                        row[(k, l)] = ct.0[i][j][k][l];
                    }
                }
                // (A : P^T)_{ijkl} = A_{ijpq} P_{klpq} with
                // P_{klpq} = I_{klpq} - (1/3) Cinv_{kl} C_{pq}, so each row
                // A_{ij..} maps to row - (1/3)(row : C) C^{-1}
                let c_dot = (row.component_mul(&s.c)).sum();
                let adj = row - s.c_inv * (c_dot / 3.0);
                for k in 0..3 {
                    for l in 0..3 {
                        right.0[i][j][k][l] = adj[(k, l)];
                    }
                }
            }
        }
        for k in 0..3 {
            for l in 0..3 {
                let mut col = Matrix3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        col[(i, j)] = right.0[i][j][k][l];
                    }
                }
                let adj = project(&col);
                for i in 0..3 {
                    for j in 0..3 {
                        projected.0[i][j][k][l] = adj[(i, j)];
                    }
                }
            }
        }
    }

    let p_tilde = Tangent4::odot(&s.c_inv, &s.c_inv)
        .add(&Tangent4::dyad(&s.c_inv, &s.c_inv).scale(-1.0 / 3.0));
    projected
        .add(&p_tilde.scale(2.0 / 3.0 * jm23 * tr))
        .add(&Tangent4::dyad(&s.c_inv, &s_iso).scale(-2.0 / 3.0))
        .add(&Tangent4::dyad(&s_iso, &s.c_inv).scale(-2.0 / 3.0))
}
