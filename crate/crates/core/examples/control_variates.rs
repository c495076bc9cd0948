//! Control-variate AdamW on two clients pulling a shared scalar towards
//! different optima.

use ilora::linalg::Matrix;
use ilora::optim::{corrected_gradient, local_control_update, server_control_aggregate, AdamWConfig, AdamWState};

fn main() -> ilora::Result<()> {
    let targets = [3.0, -1.0];
    let cfg = AdamWConfig { lr: 0.05, ..Default::default() };
    for corrected in [false, true] {
        let mut global = Matrix::zeros(1, 1);
        let mut local = [Matrix::zeros(1, 1), Matrix::zeros(1, 1)];
        let mut states = [AdamWState::new(1, 1, cfg), AdamWState::new(1, 1, cfg)];
        let mut x = 0.0;
        for _round in 0..40 {
            let mut finals = Vec::new();
            let mut deltas = Vec::new();
            for c in 0..2 {
                let mut p = Matrix::new(1, 1, vec![x])?;
                let mut last = Matrix::zeros(1, 1);
                for _ in 0..10 {
                    last = Matrix::new(1, 1, vec![p.get(0, 0) - targets[c]])?;
                    let g = if corrected { corrected_gradient(&last, &global, &local[c])? } else { last.clone() };
                    states[c].update(&mut p, &g)?;
                }
                if corrected {
                    let (delta, new_c) = local_control_update(&last, &local[c])?;
                    local[c] = new_c;
                    deltas.push(delta);
                }
                finals.push(p.get(0, 0));
            }
            if corrected {
                global = server_control_aggregate(&global, &deltas)?;
            }
            x = finals.iter().sum::<f64>() / 2.0;
        }
        println!("corrected = {corrected:<5}  x after 40 rounds = {x:.4} (joint optimum 1.0)");
    }
    Ok(())
}
