//! Shared fixtures for the benchmarks.

use lidctc::numcore::Tensor;

/// Deterministic `rows×cols` matrix of normalized log posteriors.
pub fn log_posteriors(rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let logits: Vec<f64> = (0..cols)
            .map(|c| ((r * 31 + c * 17) % 13) as f64 * 0.3)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|v| v - lse));
    }
    Tensor::new(vec![rows, cols], data).expect("sized")
}
