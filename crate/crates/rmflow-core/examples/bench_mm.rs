use rmflow_core::{Rng, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(0);
    // Training shapes: [256x384]x[384x256] fwd, [384x256...] etc.
    for (m, k, n) in [(256usize, 384usize, 256usize), (256, 256, 256), (384, 256, 256), (256, 256, 384)] {
        let a = rng.randn(&[m, k]);
        let b = rng.randn(&[k, n]);
        let mut best = f64::MAX;
        let mut sink = 0.0;
        for _ in 0..5 {
            let t0 = Instant::now();
            let reps = 20;
            for _ in 0..reps {
                let c = a.matmul(&b);
                sink += c.data()[0];
            }
            let dt = t0.elapsed().as_secs_f64() / reps as f64;
            if dt < best { best = dt; }
        }
        let gflops = (2.0 * m as f64 * k as f64 * n as f64) / best / 1e9;
        println!("{m}x{k}x{n}: {:.3} ms  {:.2} GFLOP/s   (sink {sink:.2})", best * 1e3, gflops);
    }
}
