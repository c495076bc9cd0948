//! ILoRA against ILoRA-S on the canonical non-IID preset, seeds 1 to 5.
//!
//! `cargo run --release --example drift_comparison -- --write` refreshes the
//! committed reference under `data/`.

use ilora::verify::{drift_study, median, STUDY_SEEDS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let study = drift_study(&STUDY_SEEDS)?;
    println!("seed   drift (ilora / ilora_s)   loss (ilora / ilora_s)   holdout acc (ilora / ilora_s)");
    for r in &study.rows {
        println!(
            "{:>4}   {:>8.4} / {:<8.4}        {:.4} / {:.4}          {:.4} / {:.4}",
            r.seed, r.ilora.drift, r.ilora_s.drift, r.ilora.train_loss, r.ilora_s.train_loss,
            r.ilora.holdout_accuracy, r.ilora_s.holdout_accuracy
        );
    }
    let col = |f: fn(&ilora::verify::DriftRow) -> f64| median(&study.rows.iter().map(f).collect::<Vec<_>>());
    println!(
        "median drift {:.4} -> {:.4}, loss {:.4} -> {:.4}",
        col(|r| r.ilora.drift),
        col(|r| r.ilora_s.drift),
        col(|r| r.ilora.train_loss),
        col(|r| r.ilora_s.train_loss)
    );
    for check in study.claims() {
        println!("{check}");
    }
    if std::env::args().any(|a| a == "--write") {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/drift_reference.json");
        std::fs::write(path, serde_json::to_string_pretty(&study)? + "\n")?;
        println!("wrote {path}");
    }
    Ok(())
}
