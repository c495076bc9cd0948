//! LoRA adapters, QR-based orthonormal initialization and the chain rule
//! from full-weight gradients to factor gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, thin_qr, Matrix};

/// LoRA alpha; the adapter scaling defaults to `LORA_ALPHA / rank`.
pub const LORA_ALPHA: f64 = 16.0;

pub fn default_scaling(rank: usize) -> f64 {
    LORA_ALPHA / rank as f64
}

/// Low-rank factor pair contributing `scaling * B A` to a `d x k` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b_factor: Matrix,
    pub a_factor: Matrix,
    rank: usize,
    scaling: f64,
}

impl LoraAdapter {
    pub fn new(b_factor: Matrix, a_factor: Matrix, scaling: f64) -> Result<Self> {
        if b_factor.cols() != a_factor.rows() {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::new",
                lhs: b_factor.shape(),
                rhs: a_factor.shape(),
            });
        }
        let rank = b_factor.cols();
        if rank > b_factor.rows().min(a_factor.cols()) {
            return Err(Error::RankBounds(format!(
                "rank {rank} exceeds min(d, k) = {}",
                b_factor.rows().min(a_factor.cols())
            )));
        }
        if !(scaling > 0.0 && scaling.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adapter scaling must be positive, got {scaling}"
            )));
        }
        Ok(Self {
            b_factor,
            a_factor,
            rank,
            scaling,
        })
    }

    /// All-zero factors of the given shape.
    pub fn zeros(d: usize, k: usize, rank: usize, scaling: f64) -> Result<Self> {
        Self::new(Matrix::zeros(d, rank), Matrix::zeros(rank, k), scaling)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    /// `(d, k)` of the adapted weight.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.b_factor.rows(), self.a_factor.cols())
    }

    /// `scaling * B A` in weight units.
    pub fn delta(&self) -> Matrix {
        matmul(&self.b_factor, &self.a_factor)
            .expect("factor shapes checked at construction")
            .scale(self.scaling)
    }

    /// Replaces both factors, keeping rank and scaling.
    pub fn set_factors(&mut self, b_factor: Matrix, a_factor: Matrix) -> Result<()> {
        if b_factor.shape() != self.b_factor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_factors",
                lhs: self.b_factor.shape(),
                rhs: b_factor.shape(),
            });
        }
        if a_factor.shape() != self.a_factor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_factors",
                lhs: self.a_factor.shape(),
                rhs: a_factor.shape(),
            });
        }
        self.b_factor = b_factor;
        self.a_factor = a_factor;
        Ok(())
    }

    /// Adapter whose `scaling * B A` equals `q[:, :rank] r[:rank, :]`.
    pub fn from_qr_slices(q: &Matrix, r: &Matrix, rank: usize, scaling: f64) -> Result<Self> {
        let limit = q.cols().min(r.rows());
        if rank == 0 || rank > limit {
            return Err(Error::RankBounds(format!(
                "requested rank {rank}, available {limit}"
            )));
        }
        let b = q.slice_cols(rank)?;
        let a = r.slice_rows(rank)?.scale(1.0 / scaling);
        Self::new(b, a, scaling)
    }
}

/// Frozen base weight plus the untouched pre-trained weight it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseWeight {
    frozen: Matrix,
    origin: Matrix,
}

impl BaseWeight {
    pub fn new(frozen: Matrix, origin: Matrix) -> Result<Self> {
        if frozen.shape() != origin.shape() {
            return Err(Error::ShapeMismatch {
                op: "BaseWeight::new",
                lhs: frozen.shape(),
                rhs: origin.shape(),
            });
        }
        Ok(Self { frozen, origin })
    }

    /// Base with nothing subtracted (plain LoRA on top of `theta0`).
    pub fn unmodified(theta0: Matrix) -> Self {
        Self {
            frozen: theta0.clone(),
            origin: theta0,
        }
    }

    pub fn frozen(&self) -> &Matrix {
        &self.frozen
    }

    pub fn origin(&self) -> &Matrix {
        &self.origin
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frozen.shape()
    }
}

fn check_init_ranks(theta0: &Matrix, client_rank: usize, base_rank: usize) -> Result<()> {
    let limit = theta0.rows().min(theta0.cols());
    if client_rank == 0 || client_rank > base_rank || base_rank > limit {
        return Err(Error::RankBounds(format!(
            "need 1 <= client_rank ({client_rank}) <= base_rank ({base_rank}) <= min(d, k) ({limit})"
        )));
    }
    Ok(())
}

/// QR orthonormal initialization from a precomputed `thin_qr(theta0)`.
///
/// The adapter takes the leading `client_rank` slices; the frozen base
/// subtracts the leading `base_rank` slices so that every client of a
/// federation sharing `base_rank` holds the same base.
pub fn init_from_qr(
    theta0: &Matrix,
    q: &Matrix,
    r: &Matrix,
    client_rank: usize,
    base_rank: usize,
    scaling: f64,
) -> Result<(BaseWeight, LoraAdapter)> {
    check_init_ranks(theta0, client_rank, base_rank)?;
    let top = matmul(&q.slice_cols(base_rank)?, &r.slice_rows(base_rank)?)?;
    let base = BaseWeight::new(theta0.sub(&top)?, theta0.clone())?;
    let adapter = LoraAdapter::from_qr_slices(q, r, client_rank, scaling)?;
    Ok((base, adapter))
}

/// Computes `thin_qr(theta0)` and initializes as in [`init_from_qr`].
pub fn qr_orthogonal_init(
    theta0: &Matrix,
    client_rank: usize,
    base_rank: usize,
    scaling: f64,
) -> Result<(BaseWeight, LoraAdapter)> {
    check_init_ranks(theta0, client_rank, base_rank)?;
    let (q, r) = thin_qr(theta0);
    init_from_qr(theta0, &q, &r, client_rank, base_rank, scaling)
}

/// `frozen + scaling * B A`.
pub fn effective_weight(base: &BaseWeight, adapter: &LoraAdapter) -> Result<Matrix> {
    if base.shape() != adapter.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "effective_weight",
            lhs: base.shape(),
            rhs: adapter.weight_shape(),
        });
    }
    base.frozen.add(&adapter.delta())
}

/// Gradients of a loss w.r.t. `B` and `A` given its gradient w.r.t. the
/// effective weight: `s G Aᵀ` and `s Bᵀ G`.
pub fn factor_gradients(adapter: &LoraAdapter, weight_grad: &Matrix) -> Result<(Matrix, Matrix)> {
    if weight_grad.shape() != adapter.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "factor_gradients",
            lhs: adapter.weight_shape(),
            rhs: weight_grad.shape(),
        });
    }
    let s = adapter.scaling;
    let grad_b = matmul(weight_grad, &adapter.a_factor.transpose())?.scale(s);
    let grad_a = matmul(&adapter.b_factor.transpose(), weight_grad)?.scale(s);
    Ok((grad_b, grad_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_deviation, subspace_residual};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_rank_init_reconstructs_theta0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta0 = random(6, 4, &mut rng);
        let (base, adapter) = qr_orthogonal_init(&theta0, 4, 4, 1.0).unwrap();
        assert!(base.frozen().max_abs() <= 1e-9);
        let w = effective_weight(&base, &adapter).unwrap();
        assert!(w.sub(&theta0).unwrap().frobenius_norm() <= 1e-9);
    }

    #[test]
    fn identity_init() {
        let theta0 = Matrix::identity(4);
        let (base, adapter) = qr_orthogonal_init(&theta0, 2, 2, 1.0).unwrap();
        assert_eq!(adapter.b_factor, Matrix::identity(4).slice_cols(2).unwrap());
        assert_eq!(adapter.a_factor, Matrix::identity(4).slice_rows(2).unwrap());
        let expected = Matrix::from_fn(4, 4, |i, j| if i == j && i >= 2 { 1.0 } else { 0.0 });
        assert_eq!(base.frozen(), &expected);
        assert_eq!(base.origin(), &theta0);
    }

    #[test]
    fn scaled_init_keeps_effective_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta0 = random(8, 6, &mut rng);
        let (base, adapter) = qr_orthogonal_init(&theta0, 4, 4, default_scaling(4)).unwrap();
        let w = effective_weight(&base, &adapter).unwrap();
        assert!(w.sub(&theta0).unwrap().frobenius_norm() <= 1e-9);
        assert!((adapter.scaling() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn clients_share_leading_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta0 = random(10, 7, &mut rng);
        let (_, small) = qr_orthogonal_init(&theta0, 2, 5, 1.0).unwrap();
        let (_, large) = qr_orthogonal_init(&theta0, 5, 5, 1.0).unwrap();
        assert_eq!(small.b_factor, large.b_factor.slice_cols(2).unwrap());
        assert!(orthonormality_deviation(&large.b_factor) <= 1e-10);
    }

    #[test]
    fn heterogeneous_init_differs_only_in_tail_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta0 = random(9, 8, &mut rng);
        let (q, r) = thin_qr(&theta0);
        let q_s = q.slice_cols(5).unwrap();
        for client_rank in 1..=5 {
            let (base, adapter) = init_from_qr(&theta0, &q, &r, client_rank, 5, 2.0).unwrap();
            let diff = effective_weight(&base, &adapter)
                .unwrap()
                .sub(&theta0)
                .unwrap();
            assert!(subspace_residual(&q_s, &diff).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn init_rank_errors() {
        let theta0 = Matrix::identity(3);
        assert!(matches!(
            qr_orthogonal_init(&theta0, 3, 2, 1.0),
            Err(Error::RankBounds(_))
        ));
        assert!(matches!(
            qr_orthogonal_init(&theta0, 2, 4, 1.0),
            Err(Error::RankBounds(_))
        ));
        assert!(qr_orthogonal_init(&theta0, 0, 1, 1.0).is_err());
    }

    #[test]
    fn zero_adapter_effective_is_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = BaseWeight::unmodified(random(5, 3, &mut rng));
        let adapter = LoraAdapter::zeros(5, 3, 2, 8.0).unwrap();
        assert_eq!(&effective_weight(&base, &adapter).unwrap(), base.frozen());
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = BaseWeight::unmodified(random(4, 3, &mut rng));
        let b = random(4, 1, &mut rng);
        let a = random(1, 3, &mut rng);
        let adapter = LoraAdapter::new(b.clone(), a.clone(), 2.5).unwrap();
        let w = effective_weight(&base, &adapter).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expected = base.frozen().get(i, j) + 2.5 * b.get(i, 0) * a.get(0, j);
                assert!((w.get(i, j) - expected).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn factor_gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let adapter = LoraAdapter::new(random(3, 2, &mut rng), random(2, 4, &mut rng), 3.0).unwrap();
        let (gb, ga) = factor_gradients(&adapter, &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(gb, Matrix::zeros(3, 2));
        assert_eq!(ga, Matrix::zeros(2, 4));

        let ident = LoraAdapter::new(Matrix::identity(2), random(2, 3, &mut rng), 1.0).unwrap();
        let g = random(2, 3, &mut rng);
        let (_, ga) = factor_gradients(&ident, &g).unwrap();
        assert_eq!(ga, g);

        assert!(factor_gradients(&adapter, &Matrix::zeros(4, 3)).is_err());
    }

    /// Central differences of L(W) = 0.5 ||W - T||² through W = base + s B A.
    #[test]
    fn factor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let d = rng.random_range(2..7);
            let k = rng.random_range(2..7);
            let r = rng.random_range(1..=d.min(k));
            let s = rng.random_range(0.5..4.0);
            let base = random(d, k, &mut rng);
            let target = random(d, k, &mut rng);
            let b = random(d, r, &mut rng);
            let a = random(r, k, &mut rng);
            let loss = |b: &Matrix, a: &Matrix| -> f64 {
                let w = base.add(&matmul(b, a).unwrap().scale(s)).unwrap();
                0.5 * w.sub(&target).unwrap().frobenius_norm().powi(2)
            };
            let adapter = LoraAdapter::new(b.clone(), a.clone(), s).unwrap();
            let w = base.add(&adapter.delta()).unwrap();
            let (gb, ga) = factor_gradients(&adapter, &w.sub(&target).unwrap()).unwrap();
            let h = 1e-5;
            for i in 0..d {
                for j in 0..r {
                    let mut bp = b.clone();
                    bp.set(i, j, b.get(i, j) + h);
                    let mut bm = b.clone();
                    bm.set(i, j, b.get(i, j) - h);
                    let fd = (loss(&bp, &a) - loss(&bm, &a)) / (2.0 * h);
                    let an = gb.get(i, j);
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
                }
            }
            for i in 0..r {
                for j in 0..k {
                    let mut ap = a.clone();
                    ap.set(i, j, a.get(i, j) + h);
                    let mut am = a.clone();
                    am.set(i, j, a.get(i, j) - h);
                    let fd = (loss(&b, &ap) - loss(&b, &am)) / (2.0 * h);
                    let an = ga.get(i, j);
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn adapter_validation() {
        assert!(LoraAdapter::new(Matrix::zeros(3, 2), Matrix::zeros(3, 4), 1.0).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(2, 3), Matrix::zeros(3, 4), 1.0).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(3, 2), Matrix::zeros(2, 4), 0.0).is_err());
    }
}
