//! Compares random Fourier features and a trained network against the exact
//! Gaussian kernel.
//!
//! ```text
//! cargo run --release --example kernel_fit -- [RANK]
//! ```

use kernel_mfc::feature_map::{fit_mlp_features, rff_features, validate_kernel_fit, KernelSpec, MlpTrainingConfig};

fn main() -> kernel_mfc::Result<()> {
    let rank: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let unit = KernelSpec::gaussian(1.0)?;
    for r in [rank, 4 * rank, 1000] {
        let map = rff_features(&unit, r, 0)?;
        println!("rff  r={r:5}  mse {:.3e}", validate_kernel_fit(&map, &unit, 10_000, 1)?);
    }
    let cfg = MlpTrainingConfig {
        rank,
        ..MlpTrainingConfig::desk()
    };
    let (map, report) = fit_mlp_features(&unit, &cfg, 0)?;
    println!(
        "mlp  r={rank:5}  mse {:.3e}  (training loss {:.3e}, {} iterations)",
        validate_kernel_fit(&map, &unit, 10_000, 1)?,
        report.final_train_loss,
        report.num_iterations
    );
    Ok(())
}
