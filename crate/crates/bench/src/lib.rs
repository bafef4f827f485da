//! Fixtures shared by the benchmarks.

use c2sdg_core::dataio::{synth_domain, BenchmarkSpec, Split};
use c2sdg_core::Sample;

/// `n` source-domain samples of the default benchmark.
pub fn source_samples(n: usize) -> Vec<Sample> {
    let spec = BenchmarkSpec::default();
    let domain = spec.domain("A").expect("default spec has domain A").clone();
    synth_domain(&spec, &domain, Split::Train, n, 0).expect("default spec is valid")
}
