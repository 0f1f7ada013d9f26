//! Manual throughput probes (run with `cargo test --test perf -- --ignored --nocapture`).

use metaseg_core::autodiff::{kernels, Tape};
use metaseg_core::rng::Rng;
use metaseg_core::tensor::{LabelMap, Tensor};
use std::rc::Rc;
use std::time::Instant;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(-0.5, 0.5)).collect()
}

#[test]
#[ignore = "manual performance probe"]
fn conv_forward_throughput() {
    let mut rng = Rng::from_seed(1);
    // Encoder-decoder conv stack at 64x64, width 8.
    let dims: &[((usize, usize, usize), usize)] = &[
        ((4, 64, 64), 8),
        ((8, 32, 32), 16),
        ((16, 16, 16), 32),
        ((32, 32, 32), 16),
        ((16, 64, 64), 8),
    ];
    let mut total_macs = 0usize;
    let mut bufs = Vec::new();
    for &((ci, h, w), co) in dims {
        let x = rand_vec(&mut rng, ci * h * w);
        let k = rand_vec(&mut rng, co * ci * 9);
        total_macs += co * ci * 9 * h * w;
        bufs.push((x, k, (ci, h, w), (co, 3usize, 3usize)));
    }
    let reps = 200;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        for (x, k, xd, kd) in &bufs {
            let y = kernels::conv2d(x, k, *xd, *kd, 1, 1);
            sink += y[0];
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let gmacs = (total_macs * reps) as f64 / dt / 1e9;
    println!("conv2d forward: {gmacs:.2} GMAC/s (sink {sink:.3e})");
}

#[test]
#[ignore = "manual performance probe"]
fn training_step_walltime() {
    // One full forward+backward of a 6-conv stack on the tape, like a
    // single SGD step of the segmenter, plus a second-order double step.
    let mut rng = Rng::from_seed(2);
    let (h, w) = (64usize, 64usize);
    let widths = [(4usize, 8usize), (8, 16), (16, 32), (32, 16), (16, 8)];
    let kvals: Vec<Tensor> = widths
        .iter()
        .map(|&(ci, co)| Tensor::new(vec![co, ci, 3, 3], rand_vec(&mut rng, co * ci * 9)).unwrap())
        .collect();
    let head = Tensor::new(vec![4, 8, 1, 1], rand_vec(&mut rng, 32)).unwrap();
    let img = Tensor::new(vec![4, h, w], rand_vec(&mut rng, 4 * h * w)).unwrap();
    let labels = Rc::new(LabelMap::new(h, w, (0..h * w).map(|_| 0u8).collect()).unwrap());

    let run = |create_graph: bool, double: bool| -> f64 {
        let t0 = Instant::now();
        let tape = Tape::new();
        let x = tape.constant(img.clone());
        let ks: Vec<_> = kvals.iter().map(|k| tape.param(k.clone())).collect();
        let kh = tape.param(head.clone());
        let c1 = tape.relu(tape.conv2d(x, ks[0], 1, 1).unwrap()).unwrap();
        let p1 = tape.max_pool2(c1).unwrap();
        let c2 = tape.relu(tape.conv2d(p1, ks[1], 1, 1).unwrap()).unwrap();
        let p2 = tape.max_pool2(c2).unwrap();
        let c3 = tape.relu(tape.conv2d(p2, ks[2], 1, 1).unwrap()).unwrap();
        let u1 = tape.upsample2_nearest(c3).unwrap();
        let c4 = tape.relu(tape.conv2d(u1, ks[3], 1, 1).unwrap()).unwrap();
        let u2 = tape.upsample2_nearest(c4).unwrap();
        let c5 = tape.relu(tape.conv2d(u2, ks[4], 1, 1).unwrap()).unwrap();
        let logits = tape.conv2d(c5, kh, 1, 0).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        let mut wrt: Vec<_> = ks.clone();
        wrt.push(kh);
        let grads = tape.grad(loss, &wrt, create_graph).unwrap();
        if double {
            let gsum = grads
                .iter()
                .map(|g| tape.sum(tape.mul(*g, *g).unwrap()).unwrap())
                .reduce(|a, b| tape.add(a, b).unwrap())
                .unwrap();
            let _ = tape.grad(gsum, &wrt, false).unwrap();
        }
        t0.elapsed().as_secs_f64()
    };
    let fb = run(false, false);
    let so = run(true, true);
    println!("first-order step: {:.1} ms, grad-of-grad step: {:.1} ms", fb * 1e3, so * 1e3);
}
