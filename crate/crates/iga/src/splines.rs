//! B-spline and NURBS basis evaluation, regularity bookkeeping, and the
//! knot-vector refinements used to construct the mixed spaces.
//!
//! Knot vectors are open (end knots repeated degree+1 times), live on [0, 1],
//! and are compared by exact binary equality; every knot value is constructed
//! once and reused, never re-derived through arithmetic that could drift.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("knot vector is not open or not sorted on [0,1]: {0}")]
    InvalidKnots(String),
    #[error("parameter out of [0,1]: {0}")]
    OutOfDomain(f64),
    #[error("invalid refinement parameters: {0}")]
    BadParameter(String),
    #[error("weights must be strictly positive")]
    NonpositiveWeight,
    #[error("degree elevation requires all interior knots at multiplicity = degree")]
    NotBezierSegmented,
}

/// Open knot vector with degree. Derived quantities (distinct knots,
/// multiplicities, regularity) are recomputed on demand; exact equality of
/// knot values makes them unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    p: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn new(p: usize, knots: Vec<f64>) -> Result<Self, SplineError> {
        if knots.len() < 2 * (p + 1) {
            return Err(SplineError::InvalidKnots(format!(
                "need at least {} knots for degree {p}",
                2 * (p + 1)
            )));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(SplineError::InvalidKnots("knots decrease".into()));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(SplineError::InvalidKnots(
                "domain must be exactly [0,1]".into(),
            ));
        }
        let kv = KnotVector { p, knots };
        let (first_mult, last_mult) = {
            let d = kv.distinct_knots();
            (d[0].1, d[d.len() - 1].1)
        };
        if first_mult != p + 1 || last_mult != p + 1 {
            return Err(SplineError::InvalidKnots(format!(
                "end multiplicities {first_mult}/{last_mult}, expected {}",
                p + 1
            )));
        }
        if kv.distinct_knots()[1..kv.distinct_knots().len() - 1]
            .iter()
            .any(|&(_, m)| m > p)
        {
            return Err(SplineError::InvalidKnots(
                "interior multiplicity exceeds degree".into(),
            ));
        }
        Ok(kv)
    }

    /// Uniform open knot vector with `nel` spans, maximal interior smoothness.
    pub fn open_uniform(p: usize, nel: usize) -> Self {
        assert!(nel >= 1);
        let mut knots = vec![0.0; p + 1];
        for k in 1..nel {
            knots.push(k as f64 / nel as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(p + 1));
        KnotVector { p, knots }
    }

    /// Single-span knot vector (Bernstein basis of degree p).
    pub fn single_span(p: usize) -> Self {
        Self::open_uniform(p, 1)
    }

    pub fn degree(&self) -> usize {
        self.p
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Space dimension n = #knots - p - 1.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.p - 1
    }

    /// Distinct knot values with multiplicities.
    pub fn distinct_knots(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &k in &self.knots {
            match out.last_mut() {
                Some((v, m)) if *v == k => *m += 1,
                _ => out.push((k, 1)),
            }
        }
        out
    }

    /// Regularity vector: -1 at the ends, p - multiplicity at interior knots.
    pub fn regularity(&self) -> Vec<i64> {
        let d = self.distinct_knots();
        let m = d.len();
        d.iter()
            .enumerate()
            .map(|(i, &(_, r))| {
                if i == 0 || i == m - 1 {
                    -1
                } else {
                    self.p as i64 - r as i64
                }
            })
            .collect()
    }

    /// Number of nonempty spans (elements in this direction).
    pub fn num_spans(&self) -> usize {
        self.distinct_knots().len() - 1
    }

    /// Knot index i of the span containing xi, with xi = 1 evaluated in the
    /// last nonempty span (left-limit convention).
    pub fn find_span(&self, xi: f64) -> Result<usize, SplineError> {
        if !(0.0..=1.0).contains(&xi) {
            return Err(SplineError::OutOfDomain(xi));
        }
        let n = self.num_basis();
        if xi >= self.knots[n] {
            return Ok(n - 1);
        }
        let mut lo = self.p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if xi < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    /// Nonzero basis values of the degree-q basis (q <= p) at xi in the given
    /// degree-p span; returns q+1 values N_{span-q+j,q}, j = 0..=q.
    fn basis_funs(&self, span: usize, xi: f64, q: usize) -> Vec<f64> {
        let k = &self.knots;
        let mut vals = vec![0.0; q + 1];
        vals[0] = 1.0;
        let mut left = vec![0.0; q + 1];
        let mut right = vec![0.0; q + 1];
        for j in 1..=q {
            left[j] = xi - k[span + 1 - j];
            right[j] = k[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Values and derivatives (knot-difference formula) of the p+1 nonzero
    /// basis functions at xi. Returns (span, ders) with ders[d][j] the d-th
    /// derivative of basis function span - p + j.
    pub fn eval(&self, xi: f64, max_deriv: usize) -> Result<(usize, Vec<Vec<f64>>), SplineError> {
        assert!(max_deriv <= 2, "derivatives above order 2 are not supported");
        let span = self.find_span(xi)?;
        let p = self.p;
        let k = &self.knots;
        let mut ders = vec![vec![0.0; p + 1]; max_deriv + 1];
        ders[0] = self.basis_funs(span, xi, p);
        if max_deriv == 0 || p == 0 {
            return Ok((span, ders));
        }

        // ratio N_g^q / (k[g+q+1] - k[g]) with the 0/0 = 0 convention;
        // window[j] holds the value for g = span - q + j
        let scaled = |window: &[f64], q: usize| -> Vec<f64> {
            (0..=q)
                .map(|j| {
                    let g = span - q + j;
                    let d = k[g + q + 1] - k[g];
                    if d > 0.0 {
                        window[j] / d
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        // derivative window of degree q from the scaled degree q-1 window:
        // N'_{g,q} = q * (s_{g} - s_{g+1}) for g = span - q + j
        let diff = |s: &[f64], q: usize| -> Vec<f64> {
            (0..=q)
                .map(|j| {
                    let a = if j == 0 { 0.0 } else { s[j - 1] };
                    let b = if j <= q - 1 { s[j] } else { 0.0 };
                    q as f64 * (a - b)
                })
                .collect()
        };

        let vals_pm1 = self.basis_funs(span, xi, p - 1);
        let s1 = scaled(&vals_pm1, p - 1);
        ders[1] = diff(&s1, p);

        if max_deriv == 2 {
            if p >= 2 {
                let vals_pm2 = self.basis_funs(span, xi, p - 2);
                let s2 = scaled(&vals_pm2, p - 2);
                let d1_pm1 = diff(&s2, p - 1);
                let s1d = scaled(&d1_pm1, p - 1);
                ders[2] = diff(&s1d, p);
            }
            // p < 2: second derivative is identically zero
        }
        Ok((span, ders))
    }

    /// Greville abscissae (knot averages); span midpoints for p = 0.
    pub fn greville(&self) -> Vec<f64> {
        let n = self.num_basis();
        if self.p == 0 {
            return (0..n)
                .map(|i| 0.5 * (self.knots[i] + self.knots[i + 1]))
                .collect();
        }
        (0..n)
            .map(|i| self.knots[i + 1..i + 1 + self.p].iter().sum::<f64>() / self.p as f64)
            .collect()
    }

    /// First global basis index supported on the span with knot index `span`.
    pub fn span_first_basis(&self, span: usize) -> usize {
        span - self.p
    }

    /// Knot indices of the nonempty spans, in parameter order.
    pub fn nonempty_spans(&self) -> Vec<usize> {
        (self.p..self.num_basis())
            .filter(|&i| self.knots[i] < self.knots[i + 1])
            .collect()
    }
}

/// Univariate NURBS space: knot vector plus strictly positive weights.
#[derive(Debug, Clone)]
pub struct UnivariateSpace {
    pub kv: KnotVector,
    pub weights: Vec<f64>,
}

impl UnivariateSpace {
    pub fn new(kv: KnotVector, weights: Vec<f64>) -> Result<Self, SplineError> {
        if weights.len() != kv.num_basis() {
            return Err(SplineError::BadParameter(format!(
                "{} weights for a space of dimension {}",
                weights.len(),
                kv.num_basis()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(SplineError::NonpositiveWeight);
        }
        Ok(UnivariateSpace { kv, weights })
    }

    /// Polynomial space (all weights one).
    pub fn polynomial(kv: KnotVector) -> Self {
        let w = vec![1.0; kv.num_basis()];
        UnivariateSpace { kv, weights: w }
    }

    pub fn dim(&self) -> usize {
        self.kv.num_basis()
    }

    /// Rational basis values and derivatives (quotient rule) of the p+1
    /// nonzero functions at xi.
    pub fn eval(&self, xi: f64, max_deriv: usize) -> Result<(usize, Vec<Vec<f64>>), SplineError> {
        let (span, nd) = self.kv.eval(xi, max_deriv)?;
        let p = self.kv.degree();
        let first = span - p;
        let w = &self.weights[first..=span];

        let mut wsum = [0.0; 3];
        for d in 0..=max_deriv {
            wsum[d] = (0..=p).map(|j| w[j] * nd[d][j]).sum();
        }
        let mut out = vec![vec![0.0; p + 1]; max_deriv + 1];
        for j in 0..=p {
            let r0 = w[j] * nd[0][j] / wsum[0];
            out[0][j] = r0;
            if max_deriv >= 1 {
                let r1 = (w[j] * nd[1][j] - r0 * wsum[1]) / wsum[0];
                out[1][j] = r1;
                if max_deriv >= 2 {
                    out[2][j] =
                        (w[j] * nd[2][j] - 2.0 * r1 * wsum[1] - r0 * wsum[2]) / wsum[0];
                }
            }
        }
        Ok((span, out))
    }
}

/// Tensor-product space of three univariate directions; multivariate weights
/// are the products of univariate weights, so the trivariate rational basis
/// factorizes into univariate rational factors.
#[derive(Debug, Clone)]
pub struct TensorSpace {
    pub dir: [UnivariateSpace; 3],
}

impl TensorSpace {
    pub fn dims(&self) -> [usize; 3] {
        [self.dir[0].dim(), self.dir[1].dim(), self.dir[2].dim()]
    }

    pub fn dim(&self) -> usize {
        self.dims().iter().product()
    }

    /// Lexicographic index with the first direction fastest.
    pub fn index(&self, i: [usize; 3]) -> usize {
        let d = self.dims();
        i[0] + d[0] * (i[1] + d[1] * i[2])
    }

    pub fn unindex(&self, a: usize) -> [usize; 3] {
        let d = self.dims();
        [a % d[0], (a / d[0]) % d[1], a / (d[0] * d[1])]
    }
}

/// Velocity-direction knot vector for the mixed pair: degree p + a with the
/// interior regularity of the pressure vector raised by b.
pub fn refine_space(pressure_kv: &KnotVector, a: usize, b: usize) -> Result<KnotVector, SplineError> {
    if a < 1 || b > a {
        return Err(SplineError::BadParameter(format!(
            "need 1 <= a and 0 <= b <= a, got a={a} b={b}"
        )));
    }
    let p = pressure_kv.degree();
    let pv = p + a;
    let d = pressure_kv.distinct_knots();
    let alpha = pressure_kv.regularity();
    let mut knots = vec![0.0; pv + 1];
    for (i, &(z, _)) in d.iter().enumerate().take(d.len() - 1).skip(1) {
        let target = alpha[i] + b as i64;
        if target > pv as i64 - 1 {
            return Err(SplineError::BadParameter(format!(
                "continuity {target} unreachable at degree {pv}"
            )));
        }
        let mult = pv as i64 - target;
        knots.extend(std::iter::repeat(z).take(mult as usize));
    }
    knots.extend(std::iter::repeat(1.0).take(pv + 1));
    KnotVector::new(pv, knots)
}

/// Subdivides every nonempty span uniformly into n_splits parts. New knots
/// get multiplicity 1 (the maximal-smoothness class p - (p-1)); existing
/// knots keep their multiplicity.
pub fn h_refine(kv: &KnotVector, n_splits: usize) -> Result<KnotVector, SplineError> {
    if n_splits < 1 {
        return Err(SplineError::BadParameter("n_splits must be >= 1".into()));
    }
    let d = kv.distinct_knots();
    let mut knots: Vec<f64> = Vec::new();
    for (i, &(z, m)) in d.iter().enumerate() {
        knots.extend(std::iter::repeat(z).take(m));
        if i + 1 < d.len() {
            let z1 = d[i + 1].0;
            for s in 1..n_splits {
                knots.push(z + (z1 - z) * s as f64 / n_splits as f64);
            }
        }
    }
    KnotVector::new(kv.degree(), knots)
}

/// Row-major coefficient block: one row of `m` components per basis function.
/// Rows are homogeneous coordinates when the caller refines NURBS data.
#[derive(Debug, Clone)]
pub struct CoefArray {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl CoefArray {
    pub fn zeros(n: usize, m: usize) -> Self {
        CoefArray {
            n,
            m,
            data: vec![0.0; n * m],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.m..(i + 1) * self.m]
    }
}

/// Single-knot Boehm insertion; the control rows transform linearly.
pub fn insert_knot(
    kv: &KnotVector,
    coefs: &CoefArray,
    u: f64,
) -> Result<(KnotVector, CoefArray), SplineError> {
    if !(0.0 < u && u < 1.0) {
        return Err(SplineError::BadParameter(format!(
            "inserted knot {u} must lie strictly inside (0,1)"
        )));
    }
    let p = kv.degree();
    let n = kv.num_basis();
    assert_eq!(coefs.n, n, "coefficient rows must match space dimension");
    let k = kv.find_span(u)?;
    let knots = kv.knots();

    let mut out = CoefArray::zeros(n + 1, coefs.m);
    for i in 0..=k - p {
        out.row_mut(i).copy_from_slice(coefs.row(i));
    }
    for i in k - p + 1..=k {
        let alpha = (u - knots[i]) / (knots[i + p] - knots[i]);
        let prev = coefs.row(i - 1);
        let cur = coefs.row(i);
        let dst = out.row_mut(i);
        for c in 0..coefs.m {
            dst[c] = alpha * cur[c] + (1.0 - alpha) * prev[c];
        }
    }
    for i in k + 1..=n {
        out.row_mut(i).copy_from_slice(coefs.row(i - 1));
    }

    let mut new_knots = knots.to_vec();
    new_knots.insert(k + 1, u);
    Ok((KnotVector::new(p, new_knots)?, out))
}

/// Inserts a list of knots (values repeated for multiplicity) one at a time.
pub fn insert_knots(
    kv: &KnotVector,
    coefs: &CoefArray,
    us: &[f64],
) -> Result<(KnotVector, CoefArray), SplineError> {
    let mut kv = kv.clone();
    let mut c = coefs.clone();
    for &u in us {
        let (k2, c2) = insert_knot(&kv, &c, u)?;
        kv = k2;
        c = c2;
    }
    Ok((kv, c))
}

/// Knot values (with repetition) that take `from` to `to` by insertion alone.
/// Errors if `to` is not a superset refinement of `from` at equal degree.
pub fn insertion_diff(from: &KnotVector, to: &KnotVector) -> Result<Vec<f64>, SplineError> {
    if from.degree() != to.degree() {
        return Err(SplineError::BadParameter(
            "insertion cannot change the degree".into(),
        ));
    }
    let mut out = Vec::new();
    let df = from.distinct_knots();
    let dt = to.distinct_knots();
    for &(z, m_from) in &df {
        let m_to = dt.iter().find(|&&(zt, _)| zt == z).map(|&(_, m)| m).unwrap_or(0);
        if m_from > m_to {
            return Err(SplineError::BadParameter(format!(
                "knot {z} has multiplicity {m_from} > target {m_to}; removal not supported"
            )));
        }
    }
    for &(z, m_to) in &dt {
        let m_from = df
            .iter()
            .find(|&&(zf, _)| zf == z)
            .map(|&(_, m)| m)
            .unwrap_or(0);
        out.extend(std::iter::repeat(z).take(m_to - m_from));
    }
    Ok(out)
}

/// Degree elevation by t on a Bezier-segmented knot vector (every interior
/// knot at multiplicity = degree). Exact for the coarse geometry vectors,
/// which all satisfy the precondition.
pub fn elevate_bezier(
    kv: &KnotVector,
    coefs: &CoefArray,
    t: usize,
) -> Result<(KnotVector, CoefArray), SplineError> {
    let p = kv.degree();
    if t == 0 {
        return Ok((kv.clone(), coefs.clone()));
    }
    let d = kv.distinct_knots();
    if d[1..d.len() - 1].iter().any(|&(_, m)| m != p) {
        return Err(SplineError::NotBezierSegmented);
    }
    let nseg = d.len() - 1;
    assert_eq!(coefs.n, nseg * p + 1);
    let q = p + t;
    let m = coefs.m;

    let mut out = CoefArray::zeros(nseg * q + 1, m);
    for s in 0..nseg {
        // Bernstein coefficients of segment s, elevated one degree at a time
        let mut seg: Vec<Vec<f64>> = (0..=p).map(|j| coefs.row(s * p + j).to_vec()).collect();
        for cur in p..q {
            let mut next = vec![vec![0.0; m]; cur + 2];
            next[0] = seg[0].clone();
            next[cur + 1] = seg[cur].clone();
            for i in 1..=cur {
                let a = i as f64 / (cur + 1) as f64;
                for c in 0..m {
                    next[i][c] = a * seg[i - 1][c] + (1.0 - a) * seg[i][c];
                }
            }
            seg = next;
        }
        for (j, row) in seg.iter().enumerate() {
            out.row_mut(s * q + j).copy_from_slice(row);
        }
    }

    let mut knots = vec![0.0; q + 1];
    for &(z, _) in &d[1..d.len() - 1] {
        knots.extend(std::iter::repeat(z).take(q));
    }
    knots.extend(std::iter::repeat(1.0).take(q + 1));
    Ok((KnotVector::new(q, knots)?, out))
}
