//! Checks adjoint gradients against central finite differences.
//!
//! ```text
//! cargo run --release --example gradient_check -- [INSTANCES]
//! ```

use kernel_mfc::gradcheck::gradient_suite;

fn main() -> kernel_mfc::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    for check in gradient_suite(n, 0)? {
        println!("{:45} {:.3e}", check.label, check.rel_error);
    }
    Ok(())
}
