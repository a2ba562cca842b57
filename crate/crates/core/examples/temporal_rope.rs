//! Temporal rotary embeddings: attention scores depend only on the time gap.

use dv4d::mta::{attention_weights, rope_temporal};
use dv4d::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (g, t, d) = (2, 4, 8);
    let q = Tensor::new(&[g, t, d], (0..g * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let k = Tensor::new(&[g, t, d], (0..g * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let tape = Tape::new();
    let weights = |shift: f64| -> Result<Tensor, Box<dyn std::error::Error>> {
        let times: Vec<f64> = (0..t).map(|i| i as f64 + shift).collect();
        let rq = rope_temporal(tape.constant(q.clone()), 1, &times, 10_000.0)?;
        let rk = rope_temporal(tape.constant(k.clone()), 1, &times, 10_000.0)?;
        Ok(attention_weights(&rq.value(), &rk.value(), 2))
    };

    let base = weights(0.0)?;
    for shift in [1.0, 7.5, -40.0] {
        let moved = weights(shift)?;
        let diff = base.zip_map(&moved, |a, b| (a - b).abs()).max_abs();
        println!("shift {shift:>6}: max |dA| = {diff:.1e}");
    }
    let row: f64 = base.data()[..t].iter().sum();
    println!("first row sums to {row:.15}");
    Ok(())
}
