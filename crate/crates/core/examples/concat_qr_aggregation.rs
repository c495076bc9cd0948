//! Heterogeneous-rank aggregation: stack the factors, rebuild the exact
//! weighted update, compress it with a thin QR and hand back nested slices.

use ilora::aggregation::{concat_reconstruct, personalize, qr_compress, ClientUpdate};
use ilora::linalg::{subspace_residual, Matrix};
use ilora::lora::{default_scaling, LoraAdapter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ilora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, k) = (16, 10);
    let mut random = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5));
    let mut updates = Vec::new();
    for (id, (rank, samples)) in [(2, 120), (4, 60), (8, 20)].into_iter().enumerate() {
        let adapter = LoraAdapter::new(random(d, rank), random(rank, k), default_scaling(rank))?;
        updates.push(ClientUpdate::new(id, adapter, samples)?);
    }
    let delta = concat_reconstruct(&updates)?;
    println!("exact weighted update: rank <= 10, |delta| = {:.4}", delta.frobenius_norm());
    for server_rank in [4, 6, 8, 10] {
        let result = qr_compress(&delta, server_rank)?;
        println!(
            "r_s = {server_rank:>2}: truncation error {:.6} (direct {:.6})",
            result.truncation_error,
            delta.sub(&result.compressed_delta())?.frobenius_norm()
        );
    }
    let result = qr_compress(&delta, 6)?;
    for u in &updates {
        let rank = u.adapter.rank().min(6);
        let personal = personalize(&result, rank, default_scaling(rank))?;
        println!(
            "client {} gets rank {rank}, residual outside the server basis {:.1e}",
            u.client_id,
            subspace_residual(&result.q, &personal.b_factor)?
        );
    }
    Ok(())
}
