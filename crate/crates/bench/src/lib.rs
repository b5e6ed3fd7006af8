//! Benchmark-only crate; see `benches/estimators.rs`.

use fme_core::simulate::{simulate_panel, DgpConfig, Distribution, SimulatedPanel};

/// A medium panel shared by the benchmarks.
pub fn bench_panel(n: usize, t: usize, seed: u64) -> SimulatedPanel {
    let config = DgpConfig {
        n,
        t,
        r: 2,
        tau: 0.5,
        delta: 0.5,
        theta_range: (0.25, 0.5),
        distribution: Distribution::Gaussian,
        band: 10,
        burn_in: 100,
        seed,
    };
    simulate_panel(&config).expect("benchmark panel simulates")
}
