//! Server-side fusion of client adapters.
//!
//! The main path concatenates the sample-weighted factors so that
//! `B_c A_c = Σ p_k s_k B_k A_k` holds exactly for any mix of ranks, then
//! re-factors the sum with a thin QR and keeps the leading `r_s` slices.
//! Factor averaging, zero padding and full stacking are kept as baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, hstack, matmul, thin_qr, vstack, Matrix};
use crate::lora::LoraAdapter;
use crate::optim::ControlVariates;

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub adapter: LoraAdapter,
    pub sample_count: usize,
    pub control_deltas: Option<ControlVariates>,
}

impl ClientUpdate {
    pub fn new(client_id: usize, adapter: LoraAdapter, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {client_id} reported zero samples"
            )));
        }
        Ok(Self {
            client_id,
            adapter,
            sample_count,
            control_deltas: None,
        })
    }

    pub fn with_control_deltas(mut self, deltas: ControlVariates) -> Self {
        self.control_deltas = Some(deltas);
        self
    }
}

/// Compressed global update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub q: Matrix,
    pub r: Matrix,
    /// `(Q[:, :r_s], R[:r_s, :])` with unit scaling.
    pub server_adapter: LoraAdapter,
    /// `‖R[r_s:, :]‖_F`, equal to `‖Δ - B_s A_s‖_F`.
    pub truncation_error: f64,
    /// Uncompressed `Δ`, kept for diagnostics.
    pub delta_exact: Matrix,
}

impl AggregationResult {
    pub fn server_rank(&self) -> usize {
        self.server_adapter.rank()
    }

    /// `B_s A_s`.
    pub fn compressed_delta(&self) -> Matrix {
        self.server_adapter.delta()
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let shape = first.adapter.weight_shape();
    let mut out: Vec<&ClientUpdate> = updates.iter().collect();
    for u in &out {
        if u.adapter.weight_shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: shape,
                rhs: u.adapter.weight_shape(),
            });
        }
        if u.sample_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} reported zero samples",
                u.client_id
            )));
        }
    }
    out.sort_by_key(|u| u.client_id);
    Ok(out)
}

/// `p_k = n_k / N` over the given updates, in ascending client order.
pub fn sample_weights(updates: &[ClientUpdate]) -> Result<Vec<(usize, f64)>> {
    let ordered = sorted(updates)?;
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    Ok(ordered
        .iter()
        .map(|u| (u.client_id, u.sample_count as f64 / total as f64))
        .collect())
}

/// `B_c = [B_1 ... B_S]` and `A_c = [p_1 s_1 A_1; ...; p_S s_S A_S]`.
pub fn concat_factors(updates: &[ClientUpdate]) -> Result<(Matrix, Matrix)> {
    let ordered = sorted(updates)?;
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    let weighted_a: Vec<Matrix> = ordered
        .iter()
        .map(|u| {
            let p = u.sample_count as f64 / total as f64;
            u.adapter.a_factor.scale(p * u.adapter.scaling())
        })
        .collect();
    let bs: Vec<&Matrix> = ordered.iter().map(|u| &u.adapter.b_factor).collect();
    let as_: Vec<&Matrix> = weighted_a.iter().collect();
    Ok((hstack(&bs)?, vstack(&as_)?))
}

/// Exact weighted sum `Σ p_k s_k B_k A_k`, formed as `B_c A_c`.
pub fn concat_reconstruct(updates: &[ClientUpdate]) -> Result<Matrix> {
    let (b_c, a_c) = concat_factors(updates)?;
    matmul(&b_c, &a_c)
}

/// Thin QR of `delta` truncated to `server_rank`.
pub fn qr_compress(delta: &Matrix, server_rank: usize) -> Result<AggregationResult> {
    let limit = delta.rows().min(delta.cols());
    if server_rank == 0 || server_rank > limit {
        return Err(Error::RankBounds(format!(
            "server rank {server_rank} outside 1..={limit}"
        )));
    }
    if !delta.is_finite() {
        return Err(Error::NonFinite("aggregated update".into()));
    }
    let (q, r) = thin_qr(delta);
    let server_adapter = LoraAdapter::from_qr_slices(&q, &r, server_rank, 1.0)?;
    let truncation_error = if server_rank < r.rows() {
        frobenius_norm(&r.row_range(server_rank, r.rows())?)
    } else {
        0.0
    };
    let residual = frobenius_norm(&delta.sub(&server_adapter.delta())?);
    if (residual - truncation_error).abs() > 1e-9 * (1.0 + frobenius_norm(delta)) {
        return Err(Error::Numerical(format!(
            "truncation identity violated: residual {residual:e} vs ‖R22‖ {truncation_error:e}"
        )));
    }
    Ok(AggregationResult {
        q,
        r,
        server_adapter,
        truncation_error,
        delta_exact: delta.clone(),
    })
}

/// Leading `client_rank` slices of the global factors, rescaled so that
/// `scaling * B A = Q[:, :r_k] R[:r_k, :]`.
pub fn personalize(result: &AggregationResult, client_rank: usize, scaling: f64) -> Result<LoraAdapter> {
    LoraAdapter::from_qr_slices(&result.q, &result.r, client_rank, scaling)
}

/// `anchor + global_scale * B_s A_s`.
pub fn apply_global(anchor: &Matrix, result: &AggregationResult, global_scale: f64) -> Result<Matrix> {
    let delta = result.compressed_delta();
    if delta.shape() != anchor.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_global",
            lhs: anchor.shape(),
            rhs: delta.shape(),
        });
    }
    let mut out = anchor.clone();
    out.add_scaled_assign(&delta, global_scale)?;
    Ok(out)
}

/// Weighted factor means `(Σ p_k B_k, Σ p_k s_k A_k)`. Ranks must agree.
pub fn factor_average(updates: &[ClientUpdate]) -> Result<(Matrix, Matrix)> {
    let ordered = sorted(updates)?;
    let rank = ordered[0].adapter.rank();
    if let Some(odd) = ordered.iter().find(|u| u.adapter.rank() != rank) {
        return Err(Error::RankIncompatible(format!(
            "client {} has rank {} but client {} has rank {rank}",
            odd.client_id,
            odd.adapter.rank(),
            ordered[0].client_id
        )));
    }
    weighted_means(&ordered, rank)
}

fn weighted_means(ordered: &[&ClientUpdate], rank: usize) -> Result<(Matrix, Matrix)> {
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    let (d, k) = ordered[0].adapter.weight_shape();
    let mut b_bar = Matrix::zeros(d, rank);
    let mut a_bar = Matrix::zeros(rank, k);
    for u in ordered {
        let p = u.sample_count as f64 / total as f64;
        let b = u.adapter.b_factor.zero_pad(d, rank)?;
        let a = u.adapter.a_factor.zero_pad(rank, k)?;
        b_bar.add_scaled_assign(&b, p)?;
        a_bar.add_scaled_assign(&a, p * u.adapter.scaling())?;
    }
    Ok((b_bar, a_bar))
}

/// Factor-averaging baseline `(Σ p_k B_k)(Σ p_k s_k A_k)`.
pub fn baseline_factor_average(updates: &[ClientUpdate]) -> Result<Matrix> {
    let (b, a) = factor_average(updates)?;
    matmul(&b, &a)
}

/// Zero-padded factor means at `target_rank`.
pub fn zero_pad_average(updates: &[ClientUpdate], target_rank: usize) -> Result<(Matrix, Matrix)> {
    let ordered = sorted(updates)?;
    let max_rank = ordered.iter().map(|u| u.adapter.rank()).max().unwrap_or(0);
    let (d, k) = ordered[0].adapter.weight_shape();
    if target_rank < max_rank || target_rank > d.min(k) {
        return Err(Error::RankBounds(format!(
            "zero-pad target rank {target_rank} must be in {max_rank}..={}",
            d.min(k)
        )));
    }
    weighted_means(&ordered, target_rank)
}

/// Zero-padding baseline: pad every factor to `target_rank`, then average.
pub fn baseline_zero_pad(updates: &[ClientUpdate], target_rank: usize) -> Result<Matrix> {
    let (b, a) = zero_pad_average(updates, target_rank)?;
    matmul(&b, &a)
}

/// Unreduced stack of rank `Σ r_k`; its product is exactly
/// [`concat_reconstruct`].
pub fn baseline_full_stack(updates: &[ClientUpdate]) -> Result<(Matrix, Matrix)> {
    concat_factors(updates)
}
