use std::time::Instant;

use terrafuse::nets::{EncoderConfig, Model, ModelKind, SegmentationNet};
use terrafuse::tensor::{Tape, Tensor};

fn main() {
    for kind in [ModelKind::UNet, ModelKind::DeepLab] {
        let mut m = Model::<f32>::build(kind, &EncoderConfig::default(), 0).unwrap();
        println!("{kind}: {} params", m.params().trainable_count());
        let x = Tensor::<f32>::from_fn([8, 11, 64, 64], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
        for _ in 0..3 {
            let t0 = Instant::now();
            let tape = Tape::new();
            let b = m.params().bind(&tape, true);
            let xv = tape.constant(x.clone());
            let y = m.forward(&b, xv, true).unwrap();
            let loss = y.mul(&y).unwrap().mean();
            let t1 = t0.elapsed();
            let _g = tape.backward(loss);
            println!("  fwd {:?} total {:?}", t1, t0.elapsed());
        }
    }
}
