//! Dense matrices, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{sigmoid, softmax_rows, softplus, CustomOp, Mat, Tape, Var};

/// Norm below which a vector is treated as degenerate for cosine similarity.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine similarity clamped to [-1, 1]. Returns `(0.0, true)` when either
/// vector is degenerate.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> (f64, bool) {
    debug_assert_eq!(a.len(), b.len());
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        log::warn!("cosine similarity with a degenerate vector");
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}
