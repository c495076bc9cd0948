//! Label skew under Dir(alpha): class histograms per client.

use ilora::data::{dirichlet_partition, generate_blobs};

fn main() -> ilora::Result<()> {
    let ds = generate_blobs(5, 200, 8, 0.5, 1)?;
    for alpha in [0.1, 1.0, 100.0] {
        let plan = dirichlet_partition(&ds, 4, alpha, 1)?;
        println!("alpha = {alpha}");
        for client in 0..plan.n_clients() {
            let mut hist = vec![0usize; ds.n_classes];
            for i in plan.client_indices(client) {
                hist[ds.labels[i]] += 1;
            }
            println!("  client {client}: {:>4} samples  {hist:?}", plan.client_counts[client]);
        }
    }
    Ok(())
}
