//! Averaging B and A separately is not averaging B·A. Two rank-1 clients
//! make the gap exact.

use ilora::aggregation::{baseline_factor_average, concat_reconstruct, ClientUpdate};
use ilora::linalg::Matrix;
use ilora::lora::LoraAdapter;

fn main() -> ilora::Result<()> {
    let adapter = |b: [f64; 2], a: [f64; 2]| LoraAdapter::new(Matrix::new(2, 1, b.to_vec())?, Matrix::new(1, 2, a.to_vec())?, 1.0);
    let updates = [
        ClientUpdate::new(0, adapter([1.0, 0.0], [1.0, 0.0])?, 50)?,
        ClientUpdate::new(1, adapter([0.0, 1.0], [0.0, 1.0])?, 50)?,
    ];
    let ideal = Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]])?;
    let averaged = baseline_factor_average(&updates)?;
    let exact = concat_reconstruct(&updates)?;
    println!("ideal      {ideal:?}");
    println!("averaged   {averaged:?}  bias {:.3}", averaged.sub(&ideal)?.frobenius_norm());
    println!("concat     {exact:?}  error {:.1e}", exact.sub(&ideal)?.frobenius_norm());
    Ok(())
}
