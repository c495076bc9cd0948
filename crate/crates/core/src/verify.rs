//! Named self-check suites run by `ilora verify`.
//!
//! Each suite returns one [`Check`] per property with the measured value,
//! so a failing run says by how much it missed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{baseline_factor_average, concat_reconstruct, qr_compress, ClientUpdate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::{load_data, preset, ExperimentSpec};
use crate::federation::{
    account_communication, federated_step_count, init_federation, run_federation, run_round,
    train_centralized, Execution, FederationConfig, Method, RoundContext, RoundMetrics, TaskData,
};
use crate::linalg::{matmul, Matrix};
use crate::lora::{factor_gradients, effective_weight, BaseWeight, LoraAdapter};
use crate::model::{forward_loss_at, Architecture, Batch};

pub const SUITES: [&str; 9] = [
    "exactness",
    "bias",
    "subspace",
    "gradients",
    "equivalence",
    "drift",
    "convergence",
    "communication",
    "all",
];

/// Seeds of the drift and convergence studies.
pub const STUDY_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Committed output of the pre-registered drift run.
pub const DRIFT_REFERENCE_JSON: &str = include_str!("../data/drift_reference.json");

/// `(S, r, d_in, n_classes)` points of the communication check.
pub const COMM_GRID: [(usize, usize, usize, usize); 3] = [(2, 2, 8, 6), (4, 3, 16, 10), (8, 4, 24, 12)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}: {}", self.criterion, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "suite {}: {} checks, {} failed", self.suite, self.checks.len(), failed)
    }
}

/// Runs a suite by name.
pub fn run_verify(suite: &str) -> Result<Report> {
    let checks = match suite {
        "exactness" => exactness()?,
        "bias" => bias()?,
        "subspace" => subspace()?,
        "gradients" => gradients()?,
        "equivalence" => equivalence()?,
        "drift" => drift()?,
        "convergence" => convergence()?,
        "communication" => communication()?,
        "all" => {
            let mut all = Vec::new();
            for s in &SUITES[..SUITES.len() - 1] {
                all.extend(run_verify(s)?.checks);
            }
            all
        }
        other => return Err(Error::UnknownSuite(other.to_string())),
    };
    Ok(Report {
        suite: suite.to_string(),
        checks,
    })
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = rand_distr::StandardNormal;
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(normal))
}

fn exactness() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let d = rng.random_range(8..=32);
        let k = rng.random_range(8..=32);
        let n = rng.random_range(2..=8);
        let mut updates = Vec::with_capacity(n);
        let mut expected = Matrix::zeros(d, k);
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=100)).collect();
        let total: usize = counts.iter().sum();
        for (id, &count) in counts.iter().enumerate() {
            let r = rng.random_range(1..=6);
            let adapter = LoraAdapter::new(gaussian_matrix(&mut rng, d, r), gaussian_matrix(&mut rng, r, k), 16.0 / r as f64)?;
            expected.add_scaled_assign(&adapter.delta(), count as f64 / total as f64)?;
            updates.push(ClientUpdate::new(id, adapter, count)?);
        }
        let got = concat_reconstruct(&updates)?;
        let err = got.sub(&expected)?.frobenius_norm() / (1.0 + expected.frobenius_norm());
        worst = worst.max(err);
    }
    let mut checks = vec![Check::new(
        1,
        "concatenation reconstructs the weighted sum",
        worst <= 1e-12,
        format!("worst relative error {worst:.3e} over 200 instances (limit 1e-12)"),
    )];

    let mut worst_gap = 0.0_f64;
    let mut worst_lossless = 0.0_f64;
    for i in 0..100 {
        let d = rng.random_range(4..=24);
        let k = rng.random_range(4..=24);
        let rs = rng.random_range(1..=d.min(k));
        let delta = if i % 2 == 0 {
            gaussian_matrix(&mut rng, d, k)
        } else {
            let q = rng.random_range(1..=rs);
            matmul(&gaussian_matrix(&mut rng, d, q), &gaussian_matrix(&mut rng, q, k))?
        };
        let result = qr_compress(&delta, rs)?;
        let direct = delta.sub(&result.compressed_delta())?.frobenius_norm();
        worst_gap = worst_gap.max((direct - result.truncation_error).abs());
        if i % 2 == 1 {
            worst_lossless = worst_lossless.max(direct);
        }
    }
    checks.push(Check::new(
        2,
        "truncation error equals the dropped R block",
        worst_gap <= 1e-9,
        format!("worst gap {worst_gap:.3e} over 100 compressions (limit 1e-9)"),
    ));
    checks.push(Check::new(
        2,
        "compression is lossless when rank <= server rank",
        worst_lossless <= 1e-10,
        format!("worst residual {worst_lossless:.3e} (limit 1e-10)"),
    ));
    Ok(checks)
}

fn bias() -> Result<Vec<Check>> {
    let unit = |b: [f64; 2], a: [f64; 2]| -> Result<LoraAdapter> {
        LoraAdapter::new(Matrix::new(2, 1, b.to_vec())?, Matrix::new(1, 2, a.to_vec())?, 1.0)
    };
    let updates = [
        ClientUpdate::new(0, unit([1.0, 0.0], [1.0, 0.0])?, 1)?,
        ClientUpdate::new(1, unit([0.0, 1.0], [0.0, 1.0])?, 1)?,
    ];
    let ideal = Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]])?;
    let averaged = baseline_factor_average(&updates)?;
    let bias = averaged.sub(&ideal)?.frobenius_norm();
    let exact_err = concat_reconstruct(&updates)?.sub(&ideal)?.frobenius_norm();
    Ok(vec![
        Check::new(
            3,
            "factor averaging bias on the two-client witness",
            (bias - 0.5).abs() <= 1e-12,
            format!("bias {bias:.15} (expected 0.5)"),
        ),
        Check::new(
            3,
            "concatenation is unbiased on the witness",
            exact_err <= 1e-12,
            format!("error {exact_err:.3e}"),
        ),
    ])
}

fn canonical(seed: u64) -> Result<(ExperimentSpec, TaskData)> {
    let spec = preset("canonical")?.with_seed(seed);
    let data = load_data(&spec)?;
    Ok((spec, data))
}

fn subspace() -> Result<Vec<Check>> {
    let (spec, data) = canonical(11)?;
    let config = FederationConfig {
        client_ranks: vec![1, 2, 3, 4, 5, 6, 2, 4],
        server_rank: 6,
        participation: 0.75,
        rounds: 10,
        method: Method::IloraS,
        ..spec.federation
    };
    let metrics = run_federation(&config, &data)?;
    let worst = metrics
        .iter()
        .map(|m| m.subspace_residual.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    Ok(vec![Check::new(
        4,
        "personalized bases stay inside the server subspace",
        worst <= 1e-10,
        format!("worst residual {worst:.3e} over 10 rounds (limit 1e-10)"),
    )])
}

fn relative_gap(a: &Matrix, b: &Matrix) -> Result<f64> {
    let scale = a.frobenius_norm().max(b.frobenius_norm()).max(1e-12);
    Ok(a.sub(b)?.frobenius_norm() / scale)
}

fn numeric_gradient(at: &Matrix, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let h = 1e-5;
    let mut g = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let x = at.get(i, j);
            probe.set(i, j, x + h);
            let up = f(&probe)?;
            probe.set(i, j, x - h);
            let down = f(&probe)?;
            probe.set(i, j, x);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    Ok(g)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d_in: usize, k: usize) -> Result<Batch> {
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    Batch::new(gaussian_matrix(rng, n, d_in), labels)
}

fn gradients() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_loss = 0.0_f64;
    let mut worst_factor = 0.0_f64;
    for i in 0..50 {
        let d_in = rng.random_range(2..=8);
        let k = rng.random_range(2..=6);
        let arch = if i % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::one_hidden(d_in, rng.random_range(2..=6), i as u64)
        };
        let d = arch.feature_dim(d_in);
        let batch = random_batch(&mut rng, 12, d_in, k)?;
        let weight = gaussian_matrix(&mut rng, d, k).scale(0.5);
        let bias = gaussian_matrix(&mut rng, 1, k).scale(0.1);
        let out = forward_loss_at(&arch, &weight, &bias, &batch)?;
        let gw = numeric_gradient(&weight, |w| Ok(forward_loss_at(&arch, w, &bias, &batch)?.loss))?;
        let gb = numeric_gradient(&bias, |b| Ok(forward_loss_at(&arch, &weight, b, &batch)?.loss))?;
        worst_loss = worst_loss
            .max(relative_gap(&out.weight_grad, &gw)?)
            .max(relative_gap(&out.bias_grad, &gb)?);

        let r = rng.random_range(1..=d.min(k));
        let base = BaseWeight::unmodified(gaussian_matrix(&mut rng, d, k).scale(0.5));
        let adapter = LoraAdapter::new(
            gaussian_matrix(&mut rng, d, r).scale(0.3),
            gaussian_matrix(&mut rng, r, k).scale(0.3),
            16.0 / r as f64,
        )?;
        let loss_at = |b: &Matrix, a: &Matrix| -> Result<f64> {
            let ad = LoraAdapter::new(b.clone(), a.clone(), adapter.scaling())?;
            Ok(forward_loss_at(&arch, &effective_weight(&base, &ad)?, &bias, &batch)?.loss)
        };
        let out = forward_loss_at(&arch, &effective_weight(&base, &adapter)?, &bias, &batch)?;
        let (grad_b, grad_a) = factor_gradients(&adapter, &out.weight_grad)?;
        let nb = numeric_gradient(&adapter.b_factor, |b| loss_at(b, &adapter.a_factor))?;
        let na = numeric_gradient(&adapter.a_factor, |a| loss_at(&adapter.b_factor, a))?;
        worst_factor = worst_factor
            .max(relative_gap(&grad_b, &nb)?)
            .max(relative_gap(&grad_a, &na)?);
    }
    Ok(vec![
        Check::new(
            5,
            "loss gradients match central differences",
            worst_loss <= 1e-5,
            format!("worst relative gap {worst_loss:.3e} over 50 instances (limit 1e-5)"),
        ),
        Check::new(
            5,
            "factor gradients match central differences",
            worst_factor <= 1e-5,
            format!("worst relative gap {worst_factor:.3e} over 50 instances (limit 1e-5)"),
        ),
    ])
}

fn first_round(config: &FederationConfig, data: &TaskData) -> Result<(Matrix, RoundMetrics)> {
    let (mut server, mut clients) = init_federation(config, data)?;
    let m = run_round(&mut server, &mut clients, config, data, Execution::Sequential)?;
    Ok((server.global_weight, m))
}

fn equivalence() -> Result<Vec<Check>> {
    let (spec, data) = canonical(3)?;
    // Local controls refresh after every epoch, so they are only guaranteed
    // to be zero throughout round 1 with a single local epoch.
    let hetero = preset("paper-hetero")?;
    let hetero_data = load_data(&hetero)?;
    let mut worst = 0.0_f64;
    let mut identical = true;
    for (base, data) in [(&spec.federation, &data), (&hetero.federation, &hetero_data)] {
        let cfg = |method| FederationConfig { method, local_epochs: 1, ..base.clone() };
        let (w_plain, m_plain) = first_round(&cfg(Method::Ilora), data)?;
        let (w_cv, m_cv) = first_round(&cfg(Method::IloraS), data)?;
        identical &= w_plain.as_slice() == w_cv.as_slice()
            && m_plain.train_loss.to_bits() == m_cv.train_loss.to_bits()
            && m_plain.drift.to_bits() == m_cv.drift.to_bits();
        worst = worst.max(w_plain.sub(&w_cv)?.max_abs());
    }
    let mut checks = vec![Check::new(
        6,
        "control-variate round 1 is bit-identical to plain round 1",
        identical,
        format!("max |diff| {worst:.3e} on the canonical and paper-hetero models"),
    )];

    let config = FederationConfig {
        n_clients: 3,
        client_ranks: vec![1, 2, 3],
        server_rank: 6,
        rounds: 5,
        ..spec.federation
    };
    let (mut s1, mut c1) = init_federation(&FederationConfig { method: Method::Ilora, ..config.clone() }, &data)?;
    let stack_cfg = FederationConfig { method: Method::FullStack, ..config.clone() };
    let ilora_cfg = FederationConfig { method: Method::Ilora, ..config };
    let (mut s2, mut c2) = init_federation(&stack_cfg, &data)?;
    let mut worst = 0.0_f64;
    for _ in 0..5 {
        run_round(&mut s1, &mut c1, &ilora_cfg, &data, Execution::Sequential)?;
        run_round(&mut s2, &mut c2, &stack_cfg, &data, Execution::Sequential)?;
        worst = worst.max(s1.global_weight.sub(&s2.global_weight)?.frobenius_norm());
    }
    checks.push(Check::new(
        7,
        "concatenated QR matches the full stack when r_s >= sum of ranks",
        worst <= 1e-9,
        format!("worst Frobenius gap {worst:.3e} over 5 rounds (limit 1e-9)"),
    ));
    Ok(checks)
}

/// Last-round numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub drift: f64,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

impl From<&RoundMetrics> for FinalMetrics {
    fn from(m: &RoundMetrics) -> Self {
        Self {
            drift: m.drift,
            train_loss: m.train_loss,
            holdout_accuracy: m.holdout_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub seed: u64,
    pub ilora: FinalMetrics,
    pub ilora_s: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStudy {
    pub preset: String,
    pub rows: Vec<DriftRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl DriftStudy {
    fn column(&self, f: impl Fn(&DriftRow) -> f64) -> f64 {
        median(&self.rows.iter().map(f).collect::<Vec<_>>())
    }

    /// The directional claims: medians of drift and loss lower with control
    /// variates, accuracy never more than half a point lower and higher in
    /// the median.
    pub fn claims(&self) -> Vec<Check> {
        let d = (self.column(|r| r.ilora.drift), self.column(|r| r.ilora_s.drift));
        let l = (self.column(|r| r.ilora.train_loss), self.column(|r| r.ilora_s.train_loss));
        let gaps: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.ilora_s.holdout_accuracy - r.ilora.holdout_accuracy)
            .collect();
        let worst_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let a = (self.column(|r| r.ilora.holdout_accuracy), self.column(|r| r.ilora_s.holdout_accuracy));
        vec![
            Check::new(8, "median final drift lower with control variates", d.1 < d.0, format!("ilora {:.4}, ilora_s {:.4}", d.0, d.1)),
            Check::new(8, "median final training loss lower with control variates", l.1 < l.0, format!("ilora {:.4}, ilora_s {:.4}", l.0, l.1)),
            Check::new(8, "held-out accuracy within 0.5 points in every seed", worst_gap >= -0.005, format!("worst per-seed gap {:+.2} points", 100.0 * worst_gap)),
            Check::new(8, "median held-out accuracy higher with control variates", a.1 > a.0, format!("ilora {:.4}, ilora_s {:.4}", a.0, a.1)),
        ]
    }
}

/// ILoRA against ILoRA-S on the canonical preset for each seed.
pub fn drift_study(seeds: &[u64]) -> Result<DriftStudy> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (spec, data) = canonical(seed)?;
        let run = |method| -> Result<FinalMetrics> {
            let config = FederationConfig { method, ..spec.federation.clone() };
            let metrics = run_federation(&config, &data)?;
            Ok(metrics.last().expect("at least one round").into())
        };
        rows.push(DriftRow {
            seed,
            ilora: run(Method::Ilora)?,
            ilora_s: run(Method::IloraS)?,
        });
    }
    Ok(DriftStudy {
        preset: "canonical".into(),
        rows,
    })
}

pub fn drift_reference() -> Result<DriftStudy> {
    serde_json::from_str(DRIFT_REFERENCE_JSON).map_err(|e| Error::InvalidArgument(format!("drift reference: {e}")))
}

fn drift() -> Result<Vec<Check>> {
    let study = drift_study(&STUDY_SEEDS)?;
    let reference = drift_reference()?;
    let mut worst = 0.0_f64;
    let mut same_seeds = reference.rows.len() == study.rows.len();
    for (a, b) in study.rows.iter().zip(&reference.rows) {
        same_seeds &= a.seed == b.seed;
        for (x, y) in [(a.ilora, b.ilora), (a.ilora_s, b.ilora_s)] {
            for (p, q) in [(x.drift, y.drift), (x.train_loss, y.train_loss), (x.holdout_accuracy, y.holdout_accuracy)] {
                worst = worst.max((p - q).abs() / (1.0 + q.abs()));
            }
        }
    }
    let mut checks = study.claims();
    checks.push(Check::new(
        8,
        "run reproduces the committed reference",
        same_seeds && worst <= 1e-9,
        format!("worst relative gap {worst:.3e}"),
    ));
    Ok(checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub steps: usize,
    pub best_holdout: f64,
    pub final_holdout: f64,
    pub centralized_holdout: f64,
}

impl ConvergenceRow {
    pub fn ratio(&self) -> f64 {
        self.best_holdout / self.centralized_holdout
    }
}

/// Near-IID canonical federation against pooled training with the same
/// number of optimizer steps.
pub fn convergence_study(seeds: &[u64]) -> Result<Vec<ConvergenceRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let (spec, data) = canonical(seed)?;
            let config = FederationConfig {
                dirichlet_alpha: 1e6,
                method: Method::Ilora,
                ..spec.federation
            };
            let (_, clients) = init_federation(&config, &data)?;
            let counts: Vec<usize> = clients.iter().map(|c| c.sample_count()).collect();
            let steps = federated_step_count(&config, &counts);
            let metrics = run_federation(&config, &data)?;
            let central = train_centralized(&config, &data, steps)?;
            Ok(ConvergenceRow {
                seed,
                steps,
                best_holdout: metrics.iter().map(|m| m.holdout_accuracy).fold(0.0, f64::max),
                final_holdout: metrics.last().map_or(0.0, |m| m.holdout_accuracy),
                centralized_holdout: central.holdout_accuracy,
            })
        })
        .collect()
}

fn convergence() -> Result<Vec<Check>> {
    let rows = convergence_study(&STUDY_SEEDS)?;
    let worst = rows.iter().map(ConvergenceRow::ratio).fold(f64::INFINITY, f64::min);
    Ok(vec![Check::new(
        9,
        "near-IID federation reaches 95% of centralized accuracy",
        worst >= 0.95,
        format!("worst ratio {worst:.4} over seeds {:?}", STUDY_SEEDS),
    )])
}

/// Small blob task with the given shape for communication checks.
fn comm_task(d_in: usize, n_classes: usize, n: usize) -> Result<TaskData> {
    let full = crate::data::generate_blobs(n_classes, n, d_in, 0.5, 5)?;
    let (train, holdout): (Dataset, Dataset) = full.split_holdout(0.25, 5)?;
    Ok(TaskData { train, holdout })
}

fn communication() -> Result<Vec<Check>> {
    let mut mismatches = Vec::new();
    let mut ratio_ok = true;
    let mut checked = 0;
    for &(s, r, d_in, k) in &COMM_GRID {
        let data = comm_task(d_in, k, 4 * s)?;
        let rs = r + 2;
        let mut down = std::collections::HashMap::new();
        let mut broadcast = std::collections::HashMap::new();
        for method in Method::ALL {
            for hetero in [false, true] {
                if hetero && method == Method::FeditAvg {
                    continue;
                }
                let ranks: Vec<usize> = (0..s).map(|i| if hetero { 1 + i % r } else { r }).collect();
                for train_bias in [false, true] {
                    let config = FederationConfig {
                        n_clients: s,
                        client_ranks: ranks.clone(),
                        server_rank: rs,
                        method,
                        rounds: 2,
                        batch_size: 16,
                        train_bias,
                        optimizer: crate::optim::AdamWConfig { lr: 1e-3, ..Default::default() },
                        ..FederationConfig::default()
                    };
                    let metrics = run_federation(&config, &data)?;
                    let ctx = RoundContext { d: d_in, k, sampled_ranks: ranks.clone(), bias_len: k };
                    let expected = account_communication(&config, &ctx);
                    for m in &metrics {
                        checked += 1;
                        if m.bytes_down != expected.down || m.bytes_up != expected.up {
                            mismatches.push(format!(
                                "{method} S={s} r={r}: measured {}/{} analytic {}/{}",
                                m.bytes_down, m.bytes_up, expected.down, expected.up
                            ));
                        }
                    }
                    if !hetero && !train_bias {
                        down.insert(method, expected.down);
                        broadcast.insert(method, expected.broadcast);
                    }
                }
            }
        }
        // full_stack broadcasts S·r columns where ILoRA broadcasts r_s.
        let lhs = broadcast[&Method::FullStack] as u128 * rs as u128;
        let rhs = broadcast[&Method::Ilora] as u128 * (s * r) as u128;
        ratio_ok &= lhs == rhs;
        ratio_ok &= down[&Method::FullStack] == s as u64 * down[&Method::Ilora];
    }
    Ok(vec![
        Check::new(
            10,
            "measured bytes equal the analytic counts",
            mismatches.is_empty(),
            if mismatches.is_empty() {
                format!("{checked} rounds across {} grid points", COMM_GRID.len())
            } else {
                mismatches.join("; ")
            },
        ),
        Check::new(
            10,
            "full_stack/ilora downlink ratio is S·r/r_s",
            ratio_ok,
            "broadcast payload ratio exact on every grid point",
        ),
    ])
}
