//! Softmax-regression classifier (optionally behind a frozen tanh layer)
//! whose output weight carries the LoRA adapter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::lora::{effective_weight, BaseWeight, LoraAdapter};

/// Inputs (`n x d_in`) with one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Feature map in front of the adapted weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    /// Logits are `x W + b`.
    Linear,
    /// Logits are `tanh(x H) W + b` with `H` frozen.
    OneHidden { hidden: Matrix },
}

impl Architecture {
    /// Frozen random hidden layer with `N(0, 1/d_in)` entries.
    pub fn one_hidden(d_in: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let hidden = Matrix::from_fn(d_in, width, |_, _| normal.sample(&mut rng));
        Architecture::OneHidden { hidden }
    }

    /// Dimension of the features that multiply the adapted weight.
    pub fn feature_dim(&self, d_in: usize) -> usize {
        match self {
            Architecture::Linear => d_in,
            Architecture::OneHidden { hidden } => hidden.cols(),
        }
    }

    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        match self {
            Architecture::Linear => Ok(inputs.clone()),
            Architecture::OneHidden { hidden } => Ok(matmul(inputs, hidden)?.map(f64::tanh)),
        }
    }
}

/// Loss and gradients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub loss: f64,
    pub weight_grad: Matrix,
    pub bias_grad: Matrix,
}

/// Classifier whose output weight is `base.frozen + scaling * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub base: BaseWeight,
    pub adapter: LoraAdapter,
    pub bias: Matrix,
    pub architecture: Architecture,
}

impl ToyModel {
    pub fn new(
        base: BaseWeight,
        adapter: LoraAdapter,
        bias: Matrix,
        architecture: Architecture,
    ) -> Result<Self> {
        let (_, k) = base.shape();
        if bias.shape() != (1, k) {
            return Err(Error::ShapeMismatch {
                op: "ToyModel::new",
                lhs: (1, k),
                rhs: bias.shape(),
            });
        }
        if base.shape() != adapter.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "ToyModel::new",
                lhs: base.shape(),
                rhs: adapter.weight_shape(),
            });
        }
        Ok(Self {
            base,
            adapter,
            bias,
            architecture,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.bias.cols()
    }

    pub fn weight(&self) -> Result<Matrix> {
        effective_weight(&self.base, &self.adapter)
    }

    pub fn forward_loss(&self, batch: &Batch) -> Result<ForwardOutput> {
        forward_loss_at(&self.architecture, &self.weight()?, &self.bias, batch)
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<f64> {
        evaluate_at(&self.architecture, &self.weight()?, &self.bias, batch)
    }
}

fn check_batch(arch: &Architecture, weight: &Matrix, bias: &Matrix, batch: &Batch) -> Result<()> {
    let d = arch.feature_dim(batch.inputs.cols());
    if let Architecture::OneHidden { hidden } = arch {
        if hidden.rows() != batch.inputs.cols() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: hidden.shape(),
                rhs: batch.inputs.shape(),
            });
        }
    }
    if weight.rows() != d || bias.shape() != (1, weight.cols()) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: weight.shape(),
            rhs: batch.inputs.shape(),
        });
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= weight.cols()) {
        return Err(Error::OutOfRange {
            op: "forward labels",
            requested: bad,
            limit: weight.cols(),
        });
    }
    Ok(())
}

pub fn logits_at(arch: &Architecture, weight: &Matrix, bias: &Matrix, inputs: &Matrix) -> Result<Matrix> {
    let feats = arch.features(inputs)?;
    let mut logits = matmul(&feats, weight)?;
    let k = logits.cols();
    for i in 0..logits.rows() {
        for j in 0..k {
            logits.set(i, j, logits.get(i, j) + bias.get(0, j));
        }
    }
    Ok(logits)
}

/// Mean cross-entropy and its gradients w.r.t. the full weight and bias.
pub fn forward_loss_at(
    arch: &Architecture,
    weight: &Matrix,
    bias: &Matrix,
    batch: &Batch,
) -> Result<ForwardOutput> {
    check_batch(arch, weight, bias, batch)?;
    let feats = arch.features(&batch.inputs)?;
    let mut logits = matmul(&feats, weight)?;
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    // logits -> (softmax - onehot) / n in place
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let z = logits.get(i, j) + bias.get(0, j);
            logits.set(i, j, z);
            max = max.max(z);
        }
        let mut sum = 0.0;
        for j in 0..k {
            sum += (logits.get(i, j) - max).exp();
        }
        let log_sum = sum.ln() + max;
        let y = batch.labels[i];
        loss += log_sum - logits.get(i, y);
        for j in 0..k {
            let p = (logits.get(i, j) - log_sum).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            logits.set(i, j, (p - target) * inv_n);
        }
    }
    let weight_grad = matmul(&feats.transpose(), &logits)?;
    let bias_grad = Matrix::from_fn(1, k, |_, j| (0..n).map(|i| logits.get(i, j)).sum());
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(ForwardOutput {
        loss,
        weight_grad,
        bias_grad,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit matches the label.
pub fn evaluate_at(arch: &Architecture, weight: &Matrix, bias: &Matrix, batch: &Batch) -> Result<f64> {
    check_batch(arch, weight, bias, batch)?;
    let logits = logits_at(arch, weight, bias, &batch.inputs)?;
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_batch(n: usize, d_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Batch {
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        Batch::new(random(n, d_in, rng), labels).unwrap()
    }

    fn fd_check(arch: &Architecture, d_in: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let d = arch.feature_dim(d_in);
        let weight = random(d, k, &mut rng);
        let bias = random(1, k, &mut rng);
        let batch = random_batch(9, d_in, k, &mut rng);
        let out = forward_loss_at(arch, &weight, &bias, &batch).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let (i, j) = (rng.random_range(0..d), rng.random_range(0..k));
            let mut wp = weight.clone();
            wp.set(i, j, weight.get(i, j) + h);
            let mut wm = weight.clone();
            wm.set(i, j, weight.get(i, j) - h);
            let lp = forward_loss_at(arch, &wp, &bias, &batch).unwrap().loss;
            let lm = forward_loss_at(arch, &wm, &bias, &batch).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.weight_grad.get(i, j);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
        }
        for j in 0..k {
            let mut bp = bias.clone();
            bp.set(0, j, bias.get(0, j) + h);
            let mut bm = bias.clone();
            bm.set(0, j, bias.get(0, j) - h);
            let fd = (forward_loss_at(arch, &weight, &bp, &batch).unwrap().loss
                - forward_loss_at(arch, &weight, &bm, &batch).unwrap().loss)
                / (2.0 * h);
            assert!((fd - out.bias_grad.get(0, j)).abs() <= 1e-8);
        }
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let batch = Batch::new(
            Matrix::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let out = forward_loss_at(
            &Architecture::Linear,
            &Matrix::zeros(2, 2),
            &Matrix::zeros(1, 2),
            &batch,
        )
        .unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() <= 1e-9);
    }

    #[test]
    fn saturated_softmax_loss_vanishes() {
        let batch = Batch::new(Matrix::from_rows(&[&[1.0]]).unwrap(), vec![1]).unwrap();
        let weight = Matrix::from_rows(&[&[0.0, 100.0]]).unwrap();
        let out = forward_loss_at(&Architecture::Linear, &weight, &Matrix::zeros(1, 2), &batch).unwrap();
        assert!(out.loss <= 1e-6);
    }

    #[test]
    fn gradient_check_linear() {
        fd_check(&Architecture::Linear, 5, 1);
    }

    #[test]
    fn gradient_check_one_hidden() {
        fd_check(&Architecture::one_hidden(5, 7, 99), 5, 2);
    }

    #[test]
    fn loss_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weight = random(3, 4, &mut rng);
        let bias = random(1, 4, &mut rng);
        let batch = random_batch(6, 3, 4, &mut rng);
        let base = forward_loss_at(&Architecture::Linear, &weight, &bias, &batch).unwrap();
        let shifted = bias.map(|b| b + 7.25);
        let moved = forward_loss_at(&Architecture::Linear, &weight, &shifted, &batch).unwrap();
        assert!((base.loss - moved.loss).abs() <= 1e-9);
    }

    #[test]
    fn accuracy_extremes() {
        let inputs = Matrix::identity(3);
        let weight = Matrix::identity(3);
        let bias = Matrix::zeros(1, 3);
        let good = Batch::new(inputs.clone(), vec![0, 1, 2]).unwrap();
        let bad = Batch::new(inputs, vec![1, 2, 0]).unwrap();
        assert_eq!(evaluate_at(&Architecture::Linear, &weight, &bias, &good).unwrap(), 1.0);
        assert_eq!(evaluate_at(&Architecture::Linear, &weight, &bias, &bad).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture::one_hidden(4, 6, 5);
        let weight = random(6, 3, &mut rng);
        let bias = random(1, 3, &mut rng);
        let batch = random_batch(40, 4, 3, &mut rng);
        let acc = evaluate_at(&arch, &weight, &bias, &batch).unwrap();
        let mut correct = 0;
        for i in 0..batch.len() {
            let x = batch.inputs.row_range(i, i + 1).unwrap();
            let z = logits_at(&arch, &weight, &bias, &x).unwrap();
            let mut best = 0;
            for j in 1..3 {
                if z.get(0, j) > z.get(0, best) {
                    best = j;
                }
            }
            if best == batch.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / 40.0);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn batch_validation() {
        assert_eq!(Batch::new(Matrix::zeros(1, 2), vec![]).unwrap_err(), Error::Empty("batch"));
        let batch = Batch::new(Matrix::zeros(1, 2), vec![5]).unwrap();
        assert!(forward_loss_at(&Architecture::Linear, &Matrix::zeros(2, 3), &Matrix::zeros(1, 3), &batch).is_err());
    }

    #[test]
    fn model_uses_effective_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta0 = random(4, 3, &mut rng);
        let (base, adapter) = crate::lora::qr_orthogonal_init(&theta0, 2, 3, 1.0).unwrap();
        let model = ToyModel::new(base, adapter, Matrix::zeros(1, 3), Architecture::Linear).unwrap();
        let batch = random_batch(5, 4, 3, &mut rng);
        let direct = forward_loss_at(&Architecture::Linear, &model.weight().unwrap(), &model.bias, &batch).unwrap();
        assert_eq!(model.forward_loss(&batch).unwrap(), direct);
    }
}
