//! Squared-exponential kernels, the product kernel used for joint
//! context/query inputs, and finite point domains.

use std::fmt;

use crate::error::{Error, Result};

/// A positive-definite covariance function on fixed-dimension inputs.
pub trait Kernel: Clone + fmt::Debug + PartialEq + Send + Sync {
    /// Input dimension.
    fn dim(&self) -> usize;

    /// Unchecked evaluation. Callers guarantee both slices have length `dim()`.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// Prior variance `k(x, x)`, identical for every `x` (stationary kernels only).
    fn prior_variance(&self) -> f64;

    /// `(context, query)` factors of a separable kernel.
    fn separable(&self) -> Option<(&SqExpKernel, &SqExpKernel)> {
        None
    }

    /// Checked evaluation.
    fn try_eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dim(self.dim(), a.len())?;
        check_dim(self.dim(), b.len())?;
        Ok(self.eval(a, b))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// `variance * exp(-0.5 * sum_i ((a_i - b_i) / l_i)^2)` with one lengthscale per
/// input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SqExpKernel {
    lengthscales: Vec<f64>,
    variance: f64,
}

impl SqExpKernel {
    pub fn new(lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid("lengthscales must be positive and finite"));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::invalid("kernel variance must be positive and finite"));
        }
        Ok(Self {
            lengthscales,
            variance,
        })
    }

    /// Same lengthscale on every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim.max(1)], variance)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Copy with every lengthscale replaced and a new variance.
    pub fn with_params(&self, lengthscale: f64, variance: f64) -> Result<Self> {
        Self::isotropic(self.lengthscales.len(), lengthscale, variance)
    }
}

impl Kernel for SqExpKernel {
    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            r2 += d * d;
        }
        self.variance * (-0.5 * r2).exp()
    }

    fn prior_variance(&self) -> f64 {
        self.variance
    }
}

/// Separable kernel over concatenated `(z, x)` inputs:
/// `k((z, x), (z', x')) = k_z(z, z') * k_x(x, x')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductKernel {
    context: SqExpKernel,
    query: SqExpKernel,
}

impl ProductKernel {
    pub fn new(context: SqExpKernel, query: SqExpKernel) -> Self {
        Self { context, query }
    }

    pub fn context_kernel(&self) -> &SqExpKernel {
        &self.context
    }

    pub fn query_kernel(&self) -> &SqExpKernel {
        &self.query
    }

    pub fn with_query(&self, query: SqExpKernel) -> Self {
        Self {
            context: self.context.clone(),
            query,
        }
    }

    fn split(&self) -> usize {
        self.context.dim()
    }
}

impl Kernel for ProductKernel {
    fn dim(&self) -> usize {
        self.context.dim() + self.query.dim()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let s = self.split();
        self.context.eval(&a[..s], &b[..s]) * self.query.eval(&a[s..], &b[s..])
    }

    fn prior_variance(&self) -> f64 {
        self.context.variance * self.query.variance
    }

    fn separable(&self) -> Option<(&SqExpKernel, &SqExpKernel)> {
        Some((&self.context, &self.query))
    }
}

/// Kernel matrix of `points` plus `lambda` on the diagonal, row-major.
pub fn gram_matrix<K: Kernel>(kernel: &K, points: &[&[f64]], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    for p in points {
        check_dim(kernel.dim(), p.len())?;
    }
    let n = points.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(points[i], points[j]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
        out[i * n + i] += lambda;
    }
    Ok(out)
}

/// Finite, duplicate-free set of points in `R^n`, indexed by position.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    dim: usize,
    coords: Vec<f64>,
    factors: Option<Box<(Domain, Domain)>>,
}

impl Domain {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("domain must contain at least one point"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("domain points must have dimension >= 1"));
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in &points {
            check_dim(dim, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("domain coordinates must be finite"));
            }
            coords.extend_from_slice(p);
        }
        let domain = Self {
            dim,
            coords,
            factors: None,
        };
        if let Some((a, b)) = domain.first_duplicate() {
            return Err(Error::invalid(format!(
                "duplicate domain points at indices {a} and {b}"
            )));
        }
        Ok(domain)
    }

    fn first_duplicate(&self) -> Option<(usize, usize)> {
        let mut seen = std::collections::HashMap::with_capacity(self.len());
        for i in 0..self.len() {
            // +0.0 folds -0.0 onto 0.0
            let key: Vec<u64> = self.point(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            if let Some(prev) = seen.insert(key, i) {
                return Some((prev, i));
            }
        }
        None
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.coords[id * self.dim..(id + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Joint domain `Z x Q`; id of `(z, q)` is `z * |Q| + q`.
    pub fn product(contexts: &Domain, queries: &Domain) -> Result<Self> {
        let mut pts = Vec::with_capacity(contexts.len() * queries.len());
        for z in contexts.points() {
            for q in queries.points() {
                let mut p = Vec::with_capacity(z.len() + q.len());
                p.extend_from_slice(z);
                p.extend_from_slice(q);
                pts.push(p);
            }
        }
        let mut joint = Self::new(pts)?;
        joint.factors = Some(Box::new((contexts.clone(), queries.clone())));
        Ok(joint)
    }

    /// `(Z, Q)` when built by [`Domain::product`].
    pub fn factors(&self) -> Option<(&Domain, &Domain)> {
        self.factors.as_deref().map(|(z, q)| (z, q))
    }

    pub fn contains_id(&self, id: usize) -> bool {
        id < self.len()
    }
}

/// Equally spaced 1-D grid on `[lo, hi]` including both endpoints.
pub fn grid_domain(lo: f64, hi: f64, size: usize) -> Result<Domain> {
    if size < 2 {
        return Err(Error::invalid("grid size must be at least 2"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("grid bounds must satisfy lo < hi"));
    }
    let step = (hi - lo) / (size - 1) as f64;
    let pts = (0..size)
        .map(|i| {
            if i == size - 1 {
                vec![hi]
            } else {
                vec![lo + step * i as f64]
            }
        })
        .collect();
    Domain::new(pts)
}

/// Distinct lengthscale values tried during hyperparameter refits.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
