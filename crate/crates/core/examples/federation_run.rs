//! End-to-end federation on the canonical preset, comparing methods.

use ilora::experiment::{load_data, preset};
use ilora::federation::{run_federation, FederationConfig, Method};

fn main() -> ilora::Result<()> {
    let spec = preset("canonical")?;
    let data = load_data(&spec)?;
    println!("{} train / {} held-out samples, {} clients", data.train.len(), data.holdout.len(), spec.federation.n_clients);
    for method in [Method::Ilora, Method::IloraS, Method::FeditAvg, Method::ZeroPad, Method::FullStack] {
        let config = FederationConfig { method, ..spec.federation.clone() };
        let metrics = run_federation(&config, &data)?;
        let last = metrics.last().expect("rounds > 0");
        println!(
            "{method:<10} loss {:.4}  acc {:.3}  held-out {:.3}  drift {:.3}  truncation {:.3}  down {} KiB/round",
            last.train_loss,
            last.train_accuracy,
            last.holdout_accuracy,
            last.drift,
            last.truncation_error,
            last.bytes_down / 1024
        );
    }
    Ok(())
}
