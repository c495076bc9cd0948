//! Per-round traffic of every method as the number of clients grows.

use ilora::federation::{account_communication, FederationConfig, Method, RoundContext};

fn main() {
    let (d, k, r, rs) = (768, 768, 4, 6);
    println!("d = k = {d}, client rank {r}, server rank {rs}; MiB per round");
    println!("{:>4} {:>12} {:>12} {:>12} {:>12}", "S", "ilora down", "ilora up", "stack down", "payload x");
    for s in [10, 50, 100] {
        let ctx = RoundContext { d, k, sampled_ranks: vec![r; s], bias_len: k };
        let cost = |method| {
            let config = FederationConfig {
                n_clients: s,
                client_ranks: vec![r; s],
                server_rank: rs,
                method,
                ..Default::default()
            };
            account_communication(&config, &ctx)
        };
        let (il, fs) = (cost(Method::Ilora), cost(Method::FullStack));
        let mib = |b: u64| b as f64 / (1024.0 * 1024.0);
        println!(
            "{s:>4} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
            mib(il.down),
            mib(il.up),
            mib(fs.down),
            fs.broadcast as f64 / il.broadcast as f64
        );
    }
}
