//! Objective functions over finite domains: GP-sampled synthetic functions and
//! tabular benchmarks loaded from CSV.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{Domain, Kernel};
use crate::linalg::{jittered_cholesky, lower_mul};
use crate::table;

/// A function known at every point of a finite domain.
pub trait Objective {
    fn domain(&self) -> &Arc<Domain>;

    fn values(&self) -> &[f64];

    fn value(&self, id: usize) -> f64 {
        self.values()[id]
    }

    /// `(argmax id, max value)`, lowest id on ties.
    fn optimum(&self) -> (usize, f64) {
        let v = self.values();
        let id = crate::policy::argmax(v);
        (id, v[id])
    }
}

/// Additive Gaussian noise clipped to `[-bound, bound]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub scale: f64,
    pub bound: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            scale: 0.05,
            bound: 1.0,
        }
    }
}

/// `y = f(x) + eps`, `eps ~ N(0, R^2)`, clipped to `[-B_y, B_y]`.
pub fn observe<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    id: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    (objective.value(id) + noise.scale * e).clamp(-noise.bound, noise.bound)
}

/// Affine map onto `[0, 1]` with the minimum at exactly `0` and the maximum at
/// exactly `1`. A constant vector maps to all zeros.
pub fn normalize_unit(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == 0.0 && hi == 1.0 {
        return;
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Cached jittered factor of a prior kernel matrix for repeated joint draws.
#[derive(Clone, Debug)]
pub struct PriorSampler {
    n: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl PriorSampler {
    pub fn new<K: Kernel>(kernel: &K, domain: &Domain) -> Result<Self> {
        if kernel.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: kernel.dim(),
            });
        }
        let n = domain.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = kernel.eval(domain.point(i), domain.point(j));
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        let (lower, jitter) = jittered_cholesky(&gram, n)?;
        Ok(Self { n, lower, jitter })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        self.apply(&z)
    }

    /// `L z` for a caller-supplied standard normal vector.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n, "input length must match the domain size");
        lower_mul(&self.lower, self.n, z)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticObjective<K> {
    domain: Arc<Domain>,
    values: Vec<f64>,
    kernel: K,
    seed: u64,
}

impl<K: Kernel> SyntheticObjective<K> {
    /// Normalizes an existing prior draw.
    pub fn from_draw(domain: Arc<Domain>, mut values: Vec<f64>, kernel: K, seed: u64) -> Self {
        normalize_unit(&mut values);
        Self {
            domain,
            values,
            kernel,
            seed,
        }
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl<K> Objective for SyntheticObjective<K> {
    fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Joint prior draw over `domain`, normalized to `[0, 1]`.
pub fn sample_synthetic<K: Kernel>(kernel: &K, domain: Arc<Domain>, seed: u64) -> Result<SyntheticObjective<K>> {
    let sampler = PriorSampler::new(kernel, &domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = sampler.draw(&mut rng);
    Ok(SyntheticObjective::from_draw(domain, draw, kernel.clone(), seed))
}

/// Benchmark table: one configuration per row, final column the observed score.
#[derive(Clone, Debug)]
pub struct TabularObjective {
    names: Vec<String>,
    domain: Arc<Domain>,
    values: Vec<f64>,
}

impl TabularObjective {
    /// Builds a table from parallel point and value lists.
    pub fn new(names: Vec<String>, domain: Arc<Domain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::DimensionMismatch {
                expected: domain.len(),
                got: values.len(),
            });
        }
        if names.len() != domain.dim() {
            return Err(Error::invalid("one name per domain dimension required"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("tabular values must lie in [0, 1]"));
        }
        Ok(Self {
            names,
            domain,
            values,
        })
    }

    /// Hyperparameter column names (the value column excluded).
    pub fn dimension_names(&self) -> &[String] {
        &self.names
    }
}

impl Objective for TabularObjective {
    fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn load_tabular(path: impl AsRef<Path>) -> Result<TabularObjective> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tabular(&text)
}

/// Parses a tabular benchmark: a header naming every column, then numeric rows.
pub fn parse_tabular(text: &str) -> Result<TabularObjective> {
    let mut rows = table::records(text);
    let (hline, header) = rows
        .next()
        .ok_or_else(|| Error::parse(1, "empty file: expected a header row"))?;
    if header.len() < 2 {
        return Err(Error::parse(
            hline,
            "header needs at least one dimension column and a value column",
        ));
    }
    let ncols = header.len();
    let names: Vec<String> = header[..ncols - 1].iter().map(|s| s.to_string()).collect();
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (line, fields) in rows {
        let nums = table::numeric_row(line, &fields, ncols)?;
        let (cfg, v) = nums.split_at(ncols - 1);
        let v = v[0];
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(line, format!("value {v} outside [0, 1]")));
        }
        let key: Vec<u64> = cfg.iter().map(|x| (x + 0.0).to_bits()).collect();
        if let Some(prev) = seen.insert(key, line) {
            return Err(Error::parse(
                line,
                format!("duplicate configuration (first seen on line {prev})"),
            ));
        }
        points.push(cfg.to_vec());
        values.push(v);
    }
    if points.is_empty() {
        return Err(Error::parse(hline, "no data rows"));
    }
    Ok(TabularObjective {
        names,
        domain: Arc::new(Domain::new(points)?),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{grid_domain, SqExpKernel};
    use std::io::Write;

    struct Fixed(Arc<Domain>, Vec<f64>);

    impl Objective for Fixed {
        fn domain(&self) -> &Arc<Domain> {
            &self.0
        }
        fn values(&self) -> &[f64] {
            &self.1
        }
    }

    fn fixed(vals: Vec<f64>) -> Fixed {
        Fixed(Arc::new(grid_domain(0.0, 1.0, vals.len()).unwrap()), vals)
    }

    #[test]
    fn synthetic_is_normalized_and_deterministic() {
        let d = Arc::new(grid_domain(0.0, 1.0, 200).unwrap());
        let k = SqExpKernel::isotropic(1, 0.05, 1.0).unwrap();
        for seed in 0..5 {
            let a = sample_synthetic(&k, d.clone(), seed).unwrap();
            let lo = a.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
            let b = sample_synthetic(&k, d.clone(), seed).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    fn local_maxima(v: &[f64]) -> usize {
        // sign changes of the discrete gradient from + to -
        let grad: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
        grad.windows(2).filter(|g| g[0] > 0.0 && g[1] <= 0.0).count()
    }

    #[test]
    fn short_lengthscale_is_multimodal() {
        let d = Arc::new(grid_domain(0.0, 1.0, 1000).unwrap());
        let k = SqExpKernel::isotropic(1, 0.02, 1.0).unwrap();
        let sampler = PriorSampler::new(&k, &d).unwrap();
        let mut total = 0;
        for seed in 0..20 {
            let draw = sampler.draw(&mut ChaCha8Rng::seed_from_u64(seed));
            let obj = SyntheticObjective::from_draw(d.clone(), draw, k.clone(), seed);
            total += local_maxima(obj.values());
        }
        assert!(total as f64 / 20.0 >= 5.0, "average maxima {}", total as f64 / 20.0);
    }

    #[test]
    fn observe_examples() {
        let obj = fixed(vec![0.2, 1.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = NoiseModel { scale: 0.0, bound: 1.0 };
        assert_eq!(observe(&obj, 0, &exact, &mut rng), 0.2);

        let noisy = NoiseModel { scale: 0.05, bound: 1.0 };
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| observe(&obj, 2, &noisy, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * 0.05 / (n as f64).sqrt());

        let wild = NoiseModel { scale: 1e6, bound: 1.0 };
        for _ in 0..100 {
            assert!(observe(&obj, 1, &wild, &mut rng).abs() <= 1.0);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut v = vec![0.0, 0.25, 1.0, 0.5];
        let before = v.clone();
        normalize_unit(&mut v);
        assert_eq!(v, before);
        let mut w = vec![3.0, -1.0, 7.0];
        normalize_unit(&mut w);
        assert_eq!(w, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn optimum_lowest_index_on_ties() {
        let obj = fixed(vec![0.2, 0.9, 0.9]);
        assert_eq!(obj.optimum(), (1, 0.9));
    }

    #[test]
    fn tabular_288_rows() {
        let mut text = String::from("kernel_linear,kernel_poly,kernel_rbf,C,degree,gamma,accuracy\n");
        let mut n = 0;
        for k in 0..3 {
            for c in 0..8 {
                for g in 0..12 {
                    let one_hot = [0, 1, 2].map(|i| if i == k { 1 } else { 0 });
                    text.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        one_hot[0], one_hot[1], one_hot[2], c, 2, g, (n % 97) as f64 / 97.0
                    ));
                    n += 1;
                }
            }
        }
        assert_eq!(n, 288);
        let t = parse_tabular(&text).unwrap();
        assert_eq!(t.domain().len(), 288);
        assert_eq!(t.dimension_names().len(), 6);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        assert_eq!(load_tabular(f.path()).unwrap().values().len(), 288);
    }

    #[test]
    fn tabular_rejections() {
        assert!(matches!(parse_tabular(""), Err(Error::Parse { line: 1, .. })));
        assert!(parse_tabular("a,value\n").is_err());
        let dup = "a,b,value\n0,1,0.5\n1,1,0.2\n0,1,0.9\n";
        match parse_tabular(dup) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("line 2"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        assert!(matches!(
            parse_tabular("a,value\n0.1,0.5\n0.2\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_tabular("a,value\n0.1,abc\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_tabular("a,value\n0.1,1.5\n").is_err());
        assert!(load_tabular("/nonexistent/table.csv").is_err());
    }
}
