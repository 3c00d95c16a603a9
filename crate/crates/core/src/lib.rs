//! GPS-aided mmWave beam prediction and tracking for UAV links.
//!
//! The pipeline turns GPS traces into normalized position / UE-BS direction
//! features, splits the data with label-distribution balancing, trains a
//! compact 1D-conv + GRU encoder-decoder that predicts the current and next
//! `V` optimal beams, and scores it with Top-K accuracy, power loss,
//! overhead savings and power-loss reliability.
//!
//! Model math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

pub mod data;
pub mod error;
pub mod geo;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type Checkpoint64 = nn::Checkpoint<f64>;
pub type Checkpoint32 = nn::Checkpoint<f32>;
pub type ScoreSequence64 = nn::ScoreSequence<f64>;
pub type ScoreSequence32 = nn::ScoreSequence<f32>;

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::argmax;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[2]), 0);
    }
}
