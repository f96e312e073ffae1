//! Deterministic synthetic tasks: a fixed random teacher generates targets,
//! inputs are uniform per step. Batch `s` is a pure function of (seed, s),
//! so any consumer can regenerate the stream.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkSpec;
use crate::matrix::Matrix;
use crate::nn::{DataBatch, LossKind};
use crate::scalar::Scalar;
use crate::seeds::{derived_seed, streams};

/// Seeded stream of training batches shaped for a network spec.
pub struct SyntheticStream<T> {
    input_dim: usize,
    output_dim: usize,
    batch_size: usize,
    loss: LossKind,
    teacher: Matrix<T>,
    seed: u64,
}

impl<T: Scalar> SyntheticStream<T> {
    pub fn new(net: &NetworkSpec, batch_size: usize, seed: u64) -> Self {
        let input_dim = net.input_dim();
        let output_dim = net.output_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, streams::TEACHER));
        let scale = 1.0 / (input_dim as f64).sqrt();
        let teacher = Matrix::from_fn(output_dim, input_dim, |_, _| {
            T::from_f64_lossy(rng.random_range(-scale..scale))
        });
        Self {
            input_dim,
            output_dim,
            batch_size,
            loss: net.loss,
            teacher,
            seed,
        }
    }

    /// The batch for a given step; independent of call order.
    pub fn batch(&self, step: u64) -> DataBatch<T> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derived_seed(derived_seed(self.seed, streams::DATA), step));
        let inputs = Matrix::from_fn(self.batch_size, self.input_dim, |_, _| {
            T::from_f64_lossy(rng.random_range(-1.0..1.0))
        });
        let mut logits = Matrix::zeros(self.batch_size, self.output_dim);
        for s in 0..self.batch_size {
            for o in 0..self.output_dim {
                let mut acc = T::zero();
                for i in 0..self.input_dim {
                    acc += inputs.at(s, i) * self.teacher.at(o, i);
                }
                *logits.at_mut(s, o) = acc;
            }
        }
        let targets = match self.loss {
            LossKind::SquaredError => {
                let mut t = logits;
                t.map_in_place(|v| v.tanh());
                t
            }
            LossKind::CrossEntropy => {
                let mut t = Matrix::zeros(self.batch_size, self.output_dim);
                for s in 0..self.batch_size {
                    let mut best = (T::neg_infinity(), 0usize);
                    for o in 0..self.output_dim {
                        if logits.at(s, o) > best.0 {
                            best = (logits.at(s, o), o);
                        }
                    }
                    *t.at_mut(s, best.1) = T::one();
                }
                t
            }
        };
        DataBatch::new(inputs, targets)
    }
}
