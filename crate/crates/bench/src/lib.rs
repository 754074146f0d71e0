//! Deterministic fixtures shared by the benches.

use ndarray::Array2;

use engage_core::models::FRAME_CHANNELS;
use engage_core::preprocess::GAMEPAD_FEATURES;

/// A batch of `n` windows with smooth pseudo-random inputs.
pub struct Batch {
    pub gamepad: Array2<f64>,
    pub frames: Array2<f64>,
    pub levels: Vec<u8>,
    pub targets: Vec<usize>,
}

pub fn batch(n: usize) -> Batch {
    let wave = |i: usize, j: usize, k: f64| ((i * 31 + j) as f64 * k).sin();
    Batch {
        gamepad: Array2::from_shape_fn((n, GAMEPAD_FEATURES), |(i, j)| wave(i, j, 0.37).abs() * 0.2),
        frames: Array2::from_shape_fn((n, FRAME_CHANNELS), |(i, j)| wave(i, j, 0.11)),
        levels: (0..n).map(|i| (i % 3 + 1) as u8).collect(),
        targets: (0..n).map(|i| i % 2).collect(),
    }
}

/// Paired samples with a small shift and no exact ties.
pub fn paired(n: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..n).map(|i| 0.7 + 0.01 * (i as f64 * 1.3).sin()).collect();
    let b = a.iter().enumerate().map(|(i, x)| x - 0.002 - 1e-4 * i as f64).collect();
    (a, b)
}
