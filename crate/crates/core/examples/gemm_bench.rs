//! Raw gemm throughput probe.

use statefield::Scalar;
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(40960usize, 64usize, 64usize), (30720, 64, 64), (24576, 48, 48), (40960, 39, 64)] {
        let a = vec![0.3f32; m * k];
        let b = vec![0.01f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let start = Instant::now();
        let iters = 10;
        for _ in 0..iters {
            f32::gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        }
        let dt = start.elapsed().as_secs_f64() / iters as f64;
        let gflops = (2.0 * m as f64 * k as f64 * n as f64) / dt / 1e9;
        println!("{m}x{k}x{n}: {:.4} s -> {gflops:.1} GFLOP/s", dt);
    }
}
