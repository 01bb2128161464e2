//! Shared fixtures for the benchmarks.

use land_core::eval::gen_half_ellipsoid;
use land_core::{DataMatrix, LearnedMetric, MetricParams};

/// Half-ellipsoid data lifted to `dim` dimensions by small fixed offsets in
/// the extra coordinates, and a learned metric on it.
pub fn fixture(n: usize, dim: usize, seed: u64) -> (DataMatrix, LearnedMetric) {
    let ds = gen_half_ellipsoid(n, 0.05, seed).expect("valid generator arguments");
    let mut values = Vec::with_capacity(n * dim);
    for (i, x) in ds.points.rows().enumerate() {
        for d in 0..dim {
            values.push(if d < 2 { x[d] } else { 0.05 * (((i * 7 + d * 13) % 11) as f64 / 10.0 - 0.5) });
        }
    }
    let data = DataMatrix::new(n, dim, values).expect("consistent shape");
    let rho = MetricParams::suggested_rho(&data);
    let metric = LearnedMetric::new(data.clone(), MetricParams::new(0.25, rho).expect("positive")).expect("valid metric");
    (data, metric)
}
