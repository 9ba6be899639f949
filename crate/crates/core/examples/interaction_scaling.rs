//! Times the pairwise interaction cost against its feature form.
//!
//! ```text
//! cargo run --release --example interaction_scaling -- [N ...]
//! ```

use kernel_mfc::bench::bench_interaction;
use kernel_mfc::config::RunConfig;

fn main() -> kernel_mfc::Result<()> {
    let mut ns: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    if ns.is_empty() {
        ns = vec![500, 1000, 2000, 4000];
    }
    let cfg = RunConfig::desk_double_integrator();
    let (map, _) = cfg.build_feature_map()?;
    let bench = bench_interaction(&ns, &cfg.kernel, &map, 3, 0)?;
    print!("{}", bench.to_csv());
    if let (Some(d), Some(f)) = (bench.direct_slope, bench.features_slope) {
        println!("log-log slope: direct {d:.2}, features {f:.2}");
    }
    Ok(())
}
