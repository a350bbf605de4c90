//! Rough per-iteration cost probe for a training-step-shaped tape:
//! an MLP stack at realistic batch sizes, forward + backward.

use statefield::{Tape, Tensor};
use std::time::Instant;

fn main() {
    for &(rays, ns, width) in &[(640usize, 64usize, 64usize), (640, 48, 64), (512, 48, 48), (1152, 64, 64)] {
        let m = rays * ns;
        let enc = 39;
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[m, enc], 0.3f32));
        let w1 = tape.leaf(Tensor::full(&[enc, width], 0.01));
        let w2 = tape.leaf(Tensor::full(&[width, width], 0.01));
        let w3 = tape.leaf(Tensor::full(&[width, width], 0.01));
        let w4 = tape.leaf(Tensor::full(&[width, 17], 0.01));
        let w5 = tape.leaf(Tensor::full(&[31, width], 0.01));
        let w6 = tape.leaf(Tensor::full(&[width, width], 0.01));
        let w7 = tape.leaf(Tensor::full(&[width, 3], 0.01));
        let xd = tape.leaf(Tensor::full(&[m, 31], 0.2));
        let b = tape.leaf(Tensor::full(&[width], 0.0));

        let start = Instant::now();
        let iters = 5;
        for _ in 0..iters {
            let h1 = tape.relu(tape.add(tape.matmul(x, w1).unwrap(), tape.broadcast(b, &[m, width]).unwrap()).unwrap());
            let h2 = tape.relu(tape.add(tape.matmul(h1, w2).unwrap(), tape.broadcast(b, &[m, width]).unwrap()).unwrap());
            let h3 = tape.relu(tape.add(tape.matmul(h2, w3).unwrap(), tape.broadcast(b, &[m, width]).unwrap()).unwrap());
            let geo = tape.matmul(h3, w4).unwrap();
            let t1 = tape.relu(tape.add(tape.matmul(xd, w5).unwrap(), tape.broadcast(b, &[m, width]).unwrap()).unwrap());
            let t2 = tape.relu(tape.matmul(t1, w6).unwrap());
            let rgb = tape.sigmoid(tape.matmul(t2, w7).unwrap());
            let loss = tape.add(tape.mean(tape.square(geo)), tape.mean(rgb)).unwrap();
            tape.backward(loss).unwrap();
        }
        let dt = start.elapsed().as_secs_f64() / iters as f64;
        println!(
            "rays={rays} ns={ns} width={width}: {:.3} s/iter  ({:.1} min per 5000 iters)",
            dt,
            dt * 5000.0 / 60.0
        );
    }
}
