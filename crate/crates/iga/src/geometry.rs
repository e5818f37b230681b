//! NURBS patch construction for the three computational domains (cube,
//! quarter thick-walled cylinder, full annular disk) and evaluation of the
//! geometric map and its Jacobian.
//!
//! Every patch keeps its coarse Bezier-segmented representation. Refined or
//! degree-elevated copies are always produced from the coarse net by
//! elevation followed by knot insertion, both exact, so the geometry is
//! identical in every representation.

use crate::splines::{
    elevate_bezier, h_refine, insert_knots, insertion_diff, CoefArray, KnotVector, SplineError,
    TensorSpace, UnivariateSpace,
};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("invalid geometry parameters: {0}")]
    BadParameter(String),
    #[error("nonpositive Jacobian determinant {det} at xi = {xi:?}")]
    Degenerate { det: f64, xi: [f64; 3] },
}

/// Weight of the middle control point of a rational quadratic 90 degree arc.
pub const ARC_WEIGHT: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One of the six parametric faces of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub dir: usize,
    pub max_side: bool,
}

impl Face {
    pub fn all() -> [Face; 6] {
        let mut out = [Face {
            dir: 0,
            max_side: false,
        }; 6];
        for d in 0..3 {
            out[2 * d] = Face {
                dir: d,
                max_side: false,
            };
            out[2 * d + 1] = Face {
                dir: d,
                max_side: true,
            };
        }
        out
    }

    /// The two parametric directions running along the face, ascending.
    pub fn tangent_dirs(&self) -> [usize; 2] {
        match self.dir {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }
}

/// Referential traction applied to a face.
pub enum TractionSpec {
    /// Fixed traction vector H (first Piola-Kirchhoff type, per unit
    /// referential area), optionally ramped linearly over [0, ramp] and
    /// optionally restricted to a parameter-space rectangle of the face
    /// (bounds along `Face::tangent_dirs`).
    Dead {
        h: [f64; 3],
        ramp: Option<f64>,
        region: Option<[[f64; 2]; 2]>,
    },
    /// Analytic traction field H(t, X) over the whole face.
    Field(Box<dyn Fn(f64, [f64; 3]) -> [f64; 3] + Send + Sync>),
}

/// Boundary data for one face: clamped components and traction.
pub struct FaceBc {
    pub face: Face,
    pub fixed: [bool; 3],
    pub traction: Option<TractionSpec>,
}

/// Problem boundary conditions. `dirichlet` supplies time-independent values
/// for the clamped components (defaults to zero); it is sampled at the
/// physical images of the Greville points of the boundary control layer.
#[derive(Default)]
pub struct BoundaryTags {
    pub faces: Vec<FaceBc>,
    pub dirichlet: Option<Box<dyn Fn([f64; 3]) -> [f64; 3] + Send + Sync>>,
}

impl BoundaryTags {
    pub fn clamp_all() -> Self {
        BoundaryTags {
            faces: Face::all()
                .into_iter()
                .map(|face| FaceBc {
                    face,
                    fixed: [true; 3],
                    traction: None,
                })
                .collect(),
            dirichlet: None,
        }
    }

    /// Checks that no clamped component also receives traction on any face.
    pub fn validate(&self) -> Result<(), GeoError> {
        for fb in &self.faces {
            if let Some(tr) = &fb.traction {
                if fb.fixed.iter().all(|&f| f) {
                    return Err(GeoError::BadParameter(
                        "traction on a fully clamped face".into(),
                    ));
                }
                if let TractionSpec::Dead { h, .. } = tr {
                    for c in 0..3 {
                        if fb.fixed[c] && h[c] != 0.0 {
                            return Err(GeoError::BadParameter(format!(
                                "dead load component {c} conflicts with a clamp on the same face"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tensor-product NURBS volume. `ctrl` is dehomogenized and ordered
/// lexicographically with the first parametric direction fastest; the
/// multivariate weight of control point (i,j,k) is the product of the
/// univariate direction weights.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Coarse exact representation, Bezier-segmented per direction.
    pub coarse: TensorSpace,
    coarse_net: Vec<[f64; 4]>,
    /// Current (h-refined) space the control net below lives in.
    pub space: TensorSpace,
    pub ctrl: Vec<[f64; 3]>,
    pub nel: [usize; 3],
    /// Direction whose first and last control slabs coincide (annulus).
    pub seam_dir: Option<usize>,
}

enum NetOp<'a> {
    Insert(&'a [f64]),
    Elevate(usize),
}

fn apply_op(
    kv: &KnotVector,
    coefs: &CoefArray,
    op: &NetOp,
) -> Result<(KnotVector, CoefArray), SplineError> {
    match op {
        NetOp::Insert(us) => insert_knots(kv, coefs, us),
        NetOp::Elevate(t) => elevate_bezier(kv, coefs, *t),
    }
}

/// Applies a univariate refinement along direction `d` of a homogeneous net.
fn refine_net(
    dims: [usize; 3],
    net: &[[f64; 4]],
    d: usize,
    kv: &KnotVector,
    op: NetOp,
) -> Result<(KnotVector, [usize; 3], Vec<[f64; 4]>), SplineError> {
    let stride = [1, dims[0], dims[0] * dims[1]];
    let (oa, ob) = match d {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };

    // probe one line to size the output
    let mut line = CoefArray::zeros(dims[d], 4);
    for t in 0..dims[d] {
        line.row_mut(t).copy_from_slice(&net[t * stride[d]]);
    }
    let (new_kv, first) = apply_op(kv, &line, &op)?;
    let n_new = new_kv.num_basis();
    let mut new_dims = dims;
    new_dims[d] = n_new;
    let new_stride = [1, new_dims[0], new_dims[0] * new_dims[1]];
    let mut out = vec![[0.0; 4]; new_dims[0] * new_dims[1] * new_dims[2]];

    for ib in 0..dims[ob] {
        for ia in 0..dims[oa] {
            let base = ia * stride[oa] + ib * stride[ob];
            let refined = if ia == 0 && ib == 0 {
                first.clone()
            } else {
                for t in 0..dims[d] {
                    line.row_mut(t).copy_from_slice(&net[base + t * stride[d]]);
                }
                apply_op(kv, &line, &op)?.1
            };
            let new_base = ia * new_stride[oa] + ib * new_stride[ob];
            for t in 0..n_new {
                out[new_base + t * new_stride[d]].copy_from_slice(refined.row(t));
            }
        }
    }
    Ok((new_kv, new_dims, out))
}

fn refine_weights(
    kv: &KnotVector,
    w: &[f64],
    op: NetOp,
) -> Result<(KnotVector, Vec<f64>), SplineError> {
    let mut c = CoefArray::zeros(w.len(), 1);
    for (i, &wi) in w.iter().enumerate() {
        c.row_mut(i)[0] = wi;
    }
    let (kv2, c2) = apply_op(kv, &c, &op)?;
    Ok((kv2, (0..c2.n).map(|i| c2.row(i)[0]).collect()))
}

impl Patch {
    /// Builds a patch from coarse per-direction spaces and a dehomogenized
    /// coarse control net, then h-refines each direction so that direction
    /// `d` has `nel[d]` spans.
    fn from_coarse(
        dirs: [UnivariateSpace; 3],
        ctrl: Vec<[f64; 3]>,
        nel: [usize; 3],
        seam_dir: Option<usize>,
    ) -> Result<Self, GeoError> {
        let coarse = TensorSpace { dir: dirs };
        let mut dims = coarse.dims();
        let mut net: Vec<[f64; 4]> = Vec::with_capacity(ctrl.len());
        for (a, p) in ctrl.iter().enumerate() {
            let [i, j, k] = coarse.unindex(a);
            let w = coarse.dir[0].weights[i] * coarse.dir[1].weights[j] * coarse.dir[2].weights[k];
            net.push([w * p[0], w * p[1], w * p[2], w]);
        }
        let coarse_net = net.clone();

        let mut dir_out: Vec<UnivariateSpace> = Vec::with_capacity(3);
        for d in 0..3 {
            let spans = coarse.dir[d].kv.num_spans();
            if nel[d] % spans != 0 || nel[d] == 0 {
                return Err(GeoError::BadParameter(format!(
                    "direction {d}: element count {} must be a positive multiple of {spans}",
                    nel[d]
                )));
            }
            let target = h_refine(&coarse.dir[d].kv, nel[d] / spans)?;
            let us = insertion_diff(&coarse.dir[d].kv, &target)?;
            let (kv2, w2) = refine_weights(&coarse.dir[d].kv, &coarse.dir[d].weights, NetOp::Insert(&us))?;
            let (kv3, nd, nn) = refine_net(dims, &net, d, &coarse.dir[d].kv, NetOp::Insert(&us))?;
            debug_assert_eq!(kv2.knots(), kv3.knots());
            dims = nd;
            net = nn;
            dir_out.push(UnivariateSpace::new(kv2, w2)?);
        }
        let dir_out: [UnivariateSpace; 3] = dir_out.try_into().unwrap();
        let space = TensorSpace { dir: dir_out };
        let ctrl = dehomogenize(&space, &net);
        Ok(Patch {
            coarse,
            coarse_net,
            space,
            ctrl,
            nel,
            seam_dir,
        })
    }

    /// Rescales every NURBS weight of direction `dir` by `s`. The rational
    /// basis is invariant under this normalization, so the geometry and all
    /// spaces derived from the patch are unchanged.
    pub fn rescale_weights(&mut self, dir: usize, s: f64) -> Result<(), GeoError> {
        if !(s > 0.0) || dir > 2 {
            return Err(GeoError::BadParameter(format!(
                "weight scale {s} in direction {dir}"
            )));
        }
        for w in self.coarse.dir[dir].weights.iter_mut() {
            *w *= s;
        }
        for w in self.space.dir[dir].weights.iter_mut() {
            *w *= s;
        }
        // every tensor weight carries one factor from this direction, so the
        // homogeneous net scales uniformly
        for e in self.coarse_net.iter_mut() {
            for c in e.iter_mut() {
                *c *= s;
            }
        }
        Ok(())
    }

    /// Re-expresses the exact geometry in the per-direction target knot
    /// vectors (degree >= coarse degree, distinct knots a superset), by
    /// elevation of the coarse net followed by knot insertion.
    pub fn ctrl_in(
        &self,
        target: &[KnotVector; 3],
    ) -> Result<(TensorSpace, Vec<[f64; 3]>), GeoError> {
        let mut dims = self.coarse.dims();
        let mut net = self.coarse_net.clone();
        let mut dirs: Vec<UnivariateSpace> = Vec::with_capacity(3);
        for d in 0..3 {
            let kv0 = &self.coarse.dir[d].kv;
            let t = target[d].degree().checked_sub(kv0.degree()).ok_or_else(|| {
                GeoError::BadParameter(format!(
                    "target degree {} below geometry degree {} in direction {d}",
                    target[d].degree(),
                    kv0.degree()
                ))
            })?;
            let (kv1, w1) = refine_weights(kv0, &self.coarse.dir[d].weights, NetOp::Elevate(t))?;
            let (kv1b, dims1, net1) = refine_net(dims, &net, d, kv0, NetOp::Elevate(t))?;
            debug_assert_eq!(kv1.knots(), kv1b.knots());
            let us = insertion_diff(&kv1, &target[d])?;
            let (kv2, w2) = refine_weights(&kv1, &w1, NetOp::Insert(&us))?;
            let (_, dims2, net2) = refine_net(dims1, &net1, d, &kv1, NetOp::Insert(&us))?;
            assert_eq!(kv2.knots(), target[d].knots());
            dims = dims2;
            net = net2;
            dirs.push(UnivariateSpace::new(kv2, w2)?);
        }
        let dirs: [UnivariateSpace; 3] = dirs.try_into().unwrap();
        let space = TensorSpace { dir: dirs };
        let ctrl = dehomogenize(&space, &net);
        Ok((space, ctrl))
    }

    /// Univariate weight vector of the exact geometry weight function
    /// expressed in a target knot vector for one direction.
    pub fn weights_in(&self, d: usize, target: &KnotVector) -> Result<Vec<f64>, GeoError> {
        let kv0 = &self.coarse.dir[d].kv;
        let t = target.degree().checked_sub(kv0.degree()).ok_or_else(|| {
            GeoError::BadParameter(format!(
                "target degree {} below geometry degree {} in direction {d}",
                target.degree(),
                kv0.degree()
            ))
        })?;
        let (kv1, w1) = refine_weights(kv0, &self.coarse.dir[d].weights, NetOp::Elevate(t))?;
        let us = insertion_diff(&kv1, target)?;
        let (kv2, w2) = refine_weights(&kv1, &w1, NetOp::Insert(&us))?;
        assert_eq!(kv2.knots(), target.knots());
        Ok(w2)
    }
}

fn dehomogenize(space: &TensorSpace, net: &[[f64; 4]]) -> Vec<[f64; 3]> {
    (0..net.len())
        .map(|a| {
            let [i, j, k] = space.unindex(a);
            let w = space.dir[0].weights[i] * space.dir[1].weights[j] * space.dir[2].weights[k];
            [net[a][0] / w, net[a][1] / w, net[a][2] / w]
        })
        .collect()
}

/// Axis-aligned box [0,L1]x[0,L2]x[0,L3]; trilinear net elevated to degree p
/// per direction, exact affine geometry.
pub fn make_cube(lengths: [f64; 3], p: usize, nel: [usize; 3]) -> Result<Patch, GeoError> {
    if lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(GeoError::BadParameter("lengths must be positive".into()));
    }
    if p < 1 {
        return Err(GeoError::BadParameter("degree must be >= 1".into()));
    }
    let lin = KnotVector::single_span(1);
    let mut dims = [2, 2, 2];
    let mut net: Vec<[f64; 4]> = Vec::with_capacity(8);
    for k in 0..2 {
        for j in 0..2 {
            for i in 0..2 {
                net.push([
                    lengths[0] * i as f64,
                    lengths[1] * j as f64,
                    lengths[2] * k as f64,
                    1.0,
                ]);
            }
        }
    }
    // elevate the trilinear net once, then let from_coarse h-refine
    let mut dirs: Vec<UnivariateSpace> = Vec::with_capacity(3);
    let mut kv = [lin.clone(), lin.clone(), lin];
    for d in 0..3 {
        let (kv2, nd, nn) = refine_net(dims, &net, d, &kv[d], NetOp::Elevate(p - 1))?;
        dims = nd;
        net = nn;
        kv[d] = kv2.clone();
        dirs.push(UnivariateSpace::polynomial(kv2));
    }
    let dirs: [UnivariateSpace; 3] = dirs.try_into().unwrap();
    let space = TensorSpace { dir: dirs };
    let ctrl = dehomogenize(&space, &net);
    Patch::from_coarse(space.dir, ctrl, nel, None)
}

/// Quarter arc control columns at radius r in the XY plane, running from
/// angle 90 down to 0 so that (circumferential, radial, axial) is
/// right-handed.
fn quarter_arc(r: f64) -> [[f64; 2]; 3] {
    [[0.0, r], [r, r], [r, 0.0]]
}

/// 90 degree annular sector of height H: direction 0 circumferential
/// (quadratic rational), 1 radial, 2 axial (both linear).
pub fn make_quarter_cylinder(
    ri: f64,
    ro: f64,
    h: f64,
    nel: [usize; 3],
) -> Result<Patch, GeoError> {
    if !(0.0 < ri && ri < ro) || !(h > 0.0) {
        return Err(GeoError::BadParameter("need 0 < Ri < Ro and H > 0".into()));
    }
    let circ = UnivariateSpace::new(KnotVector::single_span(2), vec![1.0, ARC_WEIGHT, 1.0])
        .expect("arc weights are positive");
    let lin = UnivariateSpace::polynomial(KnotVector::single_span(1));
    let mut ctrl = Vec::with_capacity(3 * 2 * 2);
    for k in 0..2 {
        for &r in &[ri, ro] {
            for a in quarter_arc(r) {
                ctrl.push([a[0], a[1], h * k as f64]);
            }
        }
    }
    Patch::from_coarse([circ, lin.clone(), lin], ctrl, nel, None)
}

/// Full 360 degree annular disk as a single patch of four C0-joined quarter
/// arcs; the coincident first and last circumferential control slabs are
/// identified later through the DOF map (`seam_dir = 0`).
pub fn make_annulus_disk(ri: f64, ro: f64, h: f64, nel: [usize; 3]) -> Result<Patch, GeoError> {
    if !(0.0 < ri && ri < ro) || !(h > 0.0) {
        return Err(GeoError::BadParameter("need 0 < Ri < Ro and H > 0".into()));
    }
    if nel[0] % 4 != 0 {
        return Err(GeoError::BadParameter(
            "circumferential element count must be divisible by 4".into(),
        ));
    }
    let kv = KnotVector::new(
        2,
        vec![0.0, 0.0, 0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 1.0, 1.0, 1.0],
    )?;
    let w = ARC_WEIGHT;
    let circ = UnivariateSpace::new(kv, vec![1.0, w, 1.0, w, 1.0, w, 1.0, w, 1.0])?;
    let lin = UnivariateSpace::polynomial(KnotVector::single_span(1));
    // clockwise ring so the (circumferential, radial, axial) frame is
    // right-handed; seam at angle 0
    let ring = |r: f64| -> [[f64; 2]; 9] {
        [
            [r, 0.0],
            [r, -r],
            [0.0, -r],
            [-r, -r],
            [-r, 0.0],
            [-r, r],
            [0.0, r],
            [r, r],
            [r, 0.0],
        ]
    };
    let mut ctrl = Vec::with_capacity(9 * 2 * 2);
    for k in 0..2 {
        for &r in &[ri, ro] {
            for a in ring(r) {
                ctrl.push([a[0], a[1], h * k as f64]);
            }
        }
    }
    Patch::from_coarse([circ, lin.clone(), lin], ctrl, nel, Some(0))
}

/// Evaluates the geometric map: position, Jacobian dX/dxi, and determinant.
pub fn map_geometry(
    patch: &Patch,
    xi: [f64; 3],
) -> Result<(Vector3<f64>, Matrix3<f64>, f64), GeoError> {
    let mut spans = [0usize; 3];
    let mut tabs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
    for d in 0..3 {
        let (s, t) = patch.space.dir[d].eval(xi[d], 1)?;
        spans[d] = s;
        tabs.push(t);
    }
    let degs = [
        patch.space.dir[0].kv.degree(),
        patch.space.dir[1].kv.degree(),
        patch.space.dir[2].kv.degree(),
    ];
    let mut x = Vector3::zeros();
    let mut j = Matrix3::zeros();
    for k in 0..=degs[2] {
        let i2 = spans[2] - degs[2] + k;
        for jj in 0..=degs[1] {
            let i1 = spans[1] - degs[1] + jj;
            for i in 0..=degs[0] {
                let i0 = spans[0] - degs[0] + i;
                let p = patch.ctrl[patch.space.index([i0, i1, i2])];
                let v = tabs[0][0][i] * tabs[1][0][jj] * tabs[2][0][k];
                let g = [
                    tabs[0][1][i] * tabs[1][0][jj] * tabs[2][0][k],
                    tabs[0][0][i] * tabs[1][1][jj] * tabs[2][0][k],
                    tabs[0][0][i] * tabs[1][0][jj] * tabs[2][1][k],
                ];
                for c in 0..3 {
                    x[c] += v * p[c];
                    for d in 0..3 {
                        j[(c, d)] += g[d] * p[c];
                    }
                }
            }
        }
    }
    let det = j.determinant();
    if det <= 0.0 {
        return Err(GeoError::Degenerate { det, xi });
    }
    Ok((x, j, det))
}
