//! Synthetic Gaussian-blob classification data and per-class Dirichlet
//! partitioning across clients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Batch;

/// Labelled feature matrix in which every class appears at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let mut seen = vec![false; n_classes];
        for &y in &labels {
            if y >= n_classes {
                return Err(Error::OutOfRange {
                    op: "dataset label",
                    requested: y,
                    limit: n_classes,
                });
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices` as a training batch.
    pub fn shard(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("shard"));
        }
        let d = self.d_in();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Matrix::new(indices.len(), d, data)?, labels)
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone()).expect("datasets are nonempty")
    }

    /// Per-class stratified hold-out split. Every class keeps at least one
    /// sample on each side when it has two or more.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "test fraction must be in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if idx.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "class {c} needs at least two samples to split"
                )));
            }
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        let pick = |idx: &[usize]| -> Result<Dataset> {
            let b = self.shard(idx)?;
            Dataset::new(b.inputs, b.labels, self.n_classes)
        };
        Ok((pick(&train)?, pick(&test)?))
    }

    /// Plain-text export: a header line `n d_in n_classes`, then one row per
    /// sample holding the features followed by the label.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.len(), self.d_in(), self.n_classes);
        for i in 0..self.len() {
            for x in self.features.row(i) {
                out.push_str(&format!("{x:?} "));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Empty("dataset text"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: hline + 1,
                message: format!("bad header: {e}"),
            })?;
        let [n, d_in, n_classes] = dims[..] else {
            return Err(Error::Parse {
                line: hline + 1,
                message: "header must be `n d_in n_classes`".into(),
            });
        };
        let mut data = Vec::with_capacity(n * d_in);
        let mut labels = Vec::with_capacity(n);
        for (lineno, line) in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != d_in + 1 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected {} fields, got {}", d_in + 1, tokens.len()),
                });
            }
            for t in &tokens[..d_in] {
                data.push(t.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: e.to_string(),
                })?);
            }
            labels.push(tokens[d_in].parse::<usize>().map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?);
        }
        if labels.len() != n {
            return Err(Error::Parse {
                line: hline + 1,
                message: format!("header says {n} rows, found {}", labels.len()),
            });
        }
        Dataset::new(Matrix::new(n, d_in, data)?, labels, n_classes)
    }
}

/// Class means at pairwise distance 1: scaled basis vectors when
/// `n_classes <= d_in`, otherwise seeded random directions of the same norm.
pub fn blob_means(n_classes: usize, d_in: usize, seed: u64) -> Matrix {
    let radius = std::f64::consts::FRAC_1_SQRT_2;
    if n_classes <= d_in {
        return Matrix::from_fn(n_classes, d_in, |c, j| if c == j { radius } else { 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006d_6561_6e73);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut means = Matrix::from_fn(n_classes, d_in, |_, _| normal.sample(&mut rng));
    for c in 0..n_classes {
        let norm = means.row(c).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for j in 0..d_in {
            means.set(c, j, means.get(c, j) * radius / norm);
        }
    }
    means
}

/// Isotropic Gaussian clusters around [`blob_means`], class-major order.
pub fn generate_blobs(
    n_classes: usize,
    samples_per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || samples_per_class == 0 || d_in == 0 {
        return Err(Error::InvalidArgument("blob dimensions must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid spread {spread}")));
    }
    let means = blob_means(n_classes, d_in, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = n_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for _ in 0..samples_per_class {
            for j in 0..d_in {
                let noise: f64 = normal.sample(&mut rng);
                data.push(means.get(c, j) + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::new(n, d_in, data)?, labels, n_classes)
}

/// Assignment of samples to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignments: Vec<usize>,
    pub client_counts: Vec<usize>,
    pub alpha: f64,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.client_counts.len()
    }

    pub fn total(&self) -> usize {
        self.assignments.len()
    }

    /// Sample indices of one client, ascending.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == client).then_some(i))
            .collect()
    }

    /// `n_k / n` per client.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.client_counts.iter().map(|&c| c as f64 / n).collect()
    }
}

fn dirichlet_sample(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // every draw underflowed: put all mass on one uniformly chosen client
        let pick = rng.random_range(0..n);
        Ok((0..n).map(|i| if i == pick { 1.0 } else { 0.0 }).collect())
    }
}

fn categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Per-class `Dir(alpha)` proportions over clients, samples assigned by
/// independent categorical draws. Empty clients are repaired by moving the
/// highest-index sample of the currently largest client.
pub fn dirichlet_partition(ds: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_clients} clients but only {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; ds.len()];
    for c in 0..ds.n_classes {
        let props = dirichlet_sample(n_clients, alpha, &mut rng)?;
        for (i, &y) in ds.labels.iter().enumerate() {
            if y == c {
                assignments[i] = categorical(&props, &mut rng);
            }
        }
    }
    let mut counts = vec![0usize; n_clients];
    for &a in &assignments {
        counts[a] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignments
            .iter()
            .rposition(|&a| a == largest)
            .expect("largest client is nonempty");
        assignments[moved] = empty;
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    Ok(PartitionPlan {
        assignments,
        client_counts: counts,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate_at, Architecture};

    #[test]
    fn separable_limit() {
        let ds = generate_blobs(4, 20, 6, 0.0, 1).unwrap();
        // W = means transposed scores the true class highest
        let w = blob_means(4, 6, 1).transpose();
        let acc = evaluate_at(&Architecture::Linear, &w, &Matrix::zeros(1, 4), &ds.as_batch()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn blobs_deterministic() {
        let a = generate_blobs(3, 50, 4, 0.3, 17).unwrap();
        let b = generate_blobs(3, 50, 4, 0.3, 17).unwrap();
        assert_eq!(a.features.as_slice(), b.features.as_slice());
        assert_eq!(a.labels, b.labels);
        let c = generate_blobs(3, 50, 4, 0.3, 18).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn class_means_converge() {
        let spread = 0.5;
        let n = 10_000;
        let ds = generate_blobs(3, n, 2, spread, 5).unwrap();
        let means = blob_means(3, 2, 5);
        let bound = 3.0 * spread / (n as f64).sqrt();
        for c in 0..3 {
            for j in 0..2 {
                let m: f64 = (0..ds.len())
                    .filter(|&i| ds.labels[i] == c)
                    .map(|i| ds.features.get(i, j))
                    .sum::<f64>()
                    / n as f64;
                assert!((m - means.get(c, j)).abs() <= bound, "class {c} coord {j}");
            }
        }
    }

    #[test]
    fn random_means_when_more_classes_than_dims() {
        let means = blob_means(5, 2, 3);
        for c in 0..5 {
            let norm = means.row(c).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = generate_blobs(3, 10, 2, 0.1, 1).unwrap();
        let plan = dirichlet_partition(&ds, 1, 0.5, 2).unwrap();
        assert_eq!(plan.client_counts, vec![30]);
        assert_eq!(plan.weights(), vec![1.0]);
    }

    fn label_entropy(ds: &Dataset, plan: &PartitionPlan) -> f64 {
        let mut total = 0.0;
        for k in 0..plan.n_clients() {
            let idx = plan.client_indices(k);
            let mut hist = vec![0.0; ds.n_classes];
            for &i in &idx {
                hist[ds.labels[i]] += 1.0;
            }
            let n = idx.len() as f64;
            total -= hist
                .iter()
                .filter(|&&h| h > 0.0)
                .map(|&h| (h / n) * (h / n).ln())
                .sum::<f64>();
        }
        total / plan.n_clients() as f64
    }

    #[test]
    fn near_iid_limit_is_balanced() {
        let ds = generate_blobs(10, 1000, 4, 0.2, 3).unwrap();
        for seed in 0..20 {
            let plan = dirichlet_partition(&ds, 10, 1e6, seed).unwrap();
            for &c in &plan.client_counts {
                assert!((c as f64 - 1000.0).abs() <= 100.0, "seed {seed}: {c}");
            }
        }
    }

    #[test]
    fn small_alpha_lowers_label_entropy() {
        let ds = generate_blobs(10, 200, 4, 0.2, 3).unwrap();
        for seed in 0..5 {
            let skewed = dirichlet_partition(&ds, 8, 0.1, seed).unwrap();
            let iid = dirichlet_partition(&ds, 8, 1e6, seed).unwrap();
            assert!(label_entropy(&ds, &skewed) < label_entropy(&ds, &iid));
        }
    }

    #[test]
    fn partition_is_exact_and_repaired() {
        let ds = generate_blobs(2, 6, 2, 0.1, 4).unwrap();
        for seed in 0..30 {
            let plan = dirichlet_partition(&ds, 12, 0.05, seed).unwrap();
            assert_eq!(plan.client_counts.iter().sum::<usize>(), 12);
            assert!(plan.client_counts.iter().all(|&c| c >= 1));
            let mut seen = [0; 12];
            for k in 0..12 {
                for i in plan.client_indices(k) {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
        assert!(dirichlet_partition(&ds, 13, 1.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, 0).is_err());
    }

    #[test]
    fn partition_reproducible() {
        let ds = generate_blobs(5, 40, 3, 0.4, 8).unwrap();
        assert_eq!(
            dirichlet_partition(&ds, 6, 0.3, 9).unwrap(),
            dirichlet_partition(&ds, 6, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn text_round_trip() {
        let ds = generate_blobs(3, 4, 2, 0.7, 2).unwrap();
        let back = Dataset::from_text(&ds.to_text()).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(
            Dataset::from_text("2 2 2\n0.1 0.2 0\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            Dataset::from_text("1 2 1\n0.1 x 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn holdout_split_keeps_classes() {
        let ds = generate_blobs(4, 10, 3, 0.5, 1).unwrap();
        let (train, test) = ds.split_holdout(0.25, 3).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 4 * 3);
    }
}
