//! Measures training-step throughput of the default backbone.
//!
//! `cargo run --release -p cil-core --example throughput`

use std::time::Instant;

use cil_core::autograd::Tape;
use cil_core::model::{BackboneConfig, Mode, Model};
use cil_core::optim::{Sgd, SgdConfig};
use cil_core::tensor::Tensor;

fn main() {
    let batch = 64;
    let mut model = Model::build(BackboneConfig::default(), 1).unwrap();
    model.expand_head(6).unwrap();
    let mut opt = Sgd::new(SgdConfig::default());
    let x = Tensor::full(vec![batch, 3, 32, 32], 0.1);
    let targets: Vec<usize> = (0..batch).map(|i| i % 6).collect();
    let mask = vec![true; 6];
    let steps: usize = std::env::var("STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let (mut fwd, mut bwd) = (0.0, 0.0);
    let start = Instant::now();
    for _ in 0..steps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = model
            .forward_from(&mut tape, &bound, xv, 0, Mode::Train)
            .unwrap();
        let loss = tape.masked_cross_entropy(logits, &targets, &mask).unwrap();
        let t1 = Instant::now();
        let grads = tape.backward(loss).unwrap();
        let t2 = Instant::now();
        model.absorb(&bound, &grads);
        opt.step(model.params_mut()).unwrap();
        fwd += (t1 - t0).as_secs_f64();
        bwd += (t2 - t1).as_secs_f64();
    }
    let per_step = start.elapsed().as_secs_f64() / steps as f64;
    println!(
        "batch {batch}: {:.1} ms/step (forward {:.1}, backward {:.1}), {:.0} samples/s",
        per_step * 1e3,
        fwd / steps as f64 * 1e3,
        bwd / steps as f64 * 1e3,
        batch as f64 / per_step
    );
}
