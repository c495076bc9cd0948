//! QR orthonormal initialization: clients of different ranks start from
//! nested slices of one basis and share a single frozen base.

use ilora::linalg::{orthonormality_deviation, subspace_residual, thin_qr, Matrix};
use ilora::lora::{default_scaling, effective_weight, init_from_qr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ilora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta0 = Matrix::from_fn(12, 8, |_, _| rng.random_range(-1.0..1.0));
    let (q, r) = thin_qr(&theta0);
    println!("theta0 12x8, |Q^T Q - I| = {:.2e}", orthonormality_deviation(&q));

    let server_rank = 6;
    let q_s = q.slice_cols(server_rank)?;
    for rank in [2, 4, 6] {
        let (base, adapter) = init_from_qr(&theta0, &q, &r, rank, server_rank, default_scaling(rank))?;
        let w = effective_weight(&base, &adapter)?;
        let missing = theta0.sub(&w)?;
        println!(
            "rank {rank}: |B - Q[:, :r]| = {:.1e}, |theta0 - W_eff| = {:.4}, dropped part outside span(Q_s): {:.1e}",
            adapter.b_factor.sub(&q.slice_cols(rank)?)?.max_abs(),
            missing.frobenius_norm(),
            subspace_residual(&q_s, &missing)?,
        );
    }
    Ok(())
}
