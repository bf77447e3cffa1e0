//! Procedurally drawn shape images for the toy classification task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

pub const TOY_SIZE: usize = 32;
pub const SHAPES: [&str; 3] = ["disc", "rectangle", "cross"];

#[derive(Clone, Debug)]
pub struct ToySample {
    /// `(1, 3, 32, 32)`, standardized with mean 0.5 and std 0.5.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Sample `index` of the stream for `seed`; label is `index % num_classes`.
pub fn toy_sample(seed: u64, index: u64, num_classes: usize) -> ToySample {
    let label = (index % num_classes.max(1) as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = TOY_SIZE;
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let bg: [f32; 3] = [0.25; 3];
    let fg: [f32; 3] = [0.9; 3];
    let cy = rng.gen_range(11.0..21.0f32);
    let cx = rng.gen_range(11.0..21.0f32);
    let shape = label % SHAPES.len();
    let (a, b) = (rng.gen_range(5.0..9.0f32), rng.gen_range(5.0..9.0f32));
    let thick = rng.gen_range(1.2..2.2f32);
    let inside = |y: f32, x: f32| -> bool {
        let (dy, dx) = (y - cy, x - cx);
        match shape {
            0 => dy * dy + dx * dx <= a * a,
            1 => dy.abs() <= a * 0.8 && dx.abs() <= b * 0.8,
            _ => (dy.abs() <= thick && dx.abs() <= a) || (dx.abs() <= thick && dy.abs() <= a),
        }
    };
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let on = inside(y as f32 + 0.5, x as f32 + 0.5);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg[c] };
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data[(c * s + y) * s + x] = (v - 0.5) / 0.5;
            }
        }
    }
    ToySample { image: Tensor::new(&[1, 3, s, s], data).unwrap(), label }
}

/// Stacks samples `indices` into one `(n, 3, 32, 32)` batch.
pub fn toy_batch<T: Scalar>(seed: u64, indices: &[u64], num_classes: usize) -> (Tensor<T>, Vec<usize>) {
    let per = 3 * TOY_SIZE * TOY_SIZE;
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = toy_sample(seed, i, num_classes);
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        labels.push(s.label);
    }
    (Tensor::new(&[indices.len(), 3, TOY_SIZE, TOY_SIZE], data).unwrap(), labels)
}
