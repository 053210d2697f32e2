//! Latent similarity and the soft-target cross-entropy losses.
//!
//! For a pool of size `n` with target `T` and latent similarities `D`:
//!
//! ```text
//! L = -(1/n) * sum_i sum_j T[i][j] * log_softmax(D[i])[j]
//! dL/dD[i][j] = (softmax(D[i])[j] - T[i][j]) / n
//! ```
//!
//! The same form serves graph pools and node pools; the bi-level loss is
//! their sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{dot, log_softmax_in_place, softmax_in_place, DiffError, Tape, Tensor, Var};
use crate::similarity::TargetSimilarityMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("latent temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Unbounded inner product.
    Dot,
    /// `cos(a, b) / temperature`.
    ScaledCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSimilarityConfig {
    pub mode: LatentMode,
    pub temperature: f64,
}

impl Default for LatentSimilarityConfig {
    fn default() -> Self {
        LatentSimilarityConfig { mode: LatentMode::ScaledCosine, temperature: 0.1 }
    }
}

impl LatentSimilarityConfig {
    pub fn dot() -> Self {
        LatentSimilarityConfig { mode: LatentMode::Dot, temperature: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Temperature(self.temperature));
        }
        Ok(())
    }
}

pub fn latent_similarity(a: &[f64], b: &[f64], cfg: &LatentSimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    if a.len() != b.len() {
        return Err(LossError::Shape(format!("{} vs {} dimensions", a.len(), b.len())));
    }
    match cfg.mode {
        LatentMode::Dot => Ok(dot(a, b)),
        LatentMode::ScaledCosine => {
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                return Err(LossError::ZeroNorm);
            }
            Ok(dot(a, b) / (na * nb) / cfg.temperature)
        }
    }
}

/// Records the `n x n` latent similarity matrix of the rows of `embeddings`.
pub fn latent_matrix(tape: &mut Tape, embeddings: Var, cfg: &LatentSimilarityConfig) -> Result<Var> {
    cfg.validate()?;
    match cfg.mode {
        LatentMode::Dot => {
            let t = tape.transpose(embeddings)?;
            Ok(tape.matmul(embeddings, t)?)
        }
        LatentMode::ScaledCosine => {
            let c = tape.cosine_rows(embeddings, embeddings).map_err(|e| match e {
                DiffError::Domain(_) => LossError::ZeroNorm,
                other => LossError::Diff(other),
            })?;
            Ok(tape.scalar_mul(c, 1.0 / cfg.temperature))
        }
    }
}

fn target_tensor(target: &TargetSimilarityMatrix) -> Tensor {
    let n = target.n();
    Tensor::matrix(n, n, target.values().to_vec()).expect("square target")
}

/// Records the pool cross-entropy of `latent` against `target`.
pub fn graph_loss(tape: &mut Tape, target: &TargetSimilarityMatrix, latent: Var) -> Result<Var> {
    let n = target.n();
    if tape.value(latent).shape() != [n, n] {
        return Err(LossError::Shape(format!(
            "latent {:?} against a {n}x{n} target",
            tape.value(latent).shape()
        )));
    }
    let t = tape.constant(target_tensor(target));
    let ls = tape.log_softmax_rows(latent)?;
    let prod = tape.mul(t, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scalar_mul(s, -1.0 / n as f64))
}

/// Node-pool loss; the same contract as [`graph_loss`] over atoms.
pub fn node_loss(tape: &mut Tape, target: &TargetSimilarityMatrix, latent: Var) -> Result<Var> {
    graph_loss(tape, target, latent)
}

pub fn bilevel_loss(tape: &mut Tape, graph: Var, node: Var) -> Result<Var> {
    Ok(tape.add(graph, node)?)
}

/// Loss value without a tape. `latent` is row-major `n x n`.
pub fn cross_entropy_value(target: &TargetSimilarityMatrix, latent: &[f64]) -> f64 {
    let n = target.n();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = latent[i * n..(i + 1) * n].to_vec();
        log_softmax_in_place(&mut row);
        total -= target.row(i).iter().zip(&row).map(|(t, l)| t * l).sum::<f64>();
    }
    total / n as f64
}

/// Closed-form gradient `(softmax(D) - T) / n`.
pub fn analytic_gradient(target: &TargetSimilarityMatrix, latent: &[f64]) -> Vec<f64> {
    let n = target.n();
    let mut out = latent.to_vec();
    for (i, row) in out.chunks_mut(n).enumerate() {
        softmax_in_place(row);
        for (g, t) in row.iter_mut().zip(target.row(i)) {
            *g = (*g - t) / n as f64;
        }
    }
    out
}

/// Mean Shannon entropy (nats) of the target rows; the loss lower bound.
pub fn mean_row_entropy(target: &TargetSimilarityMatrix) -> f64 {
    let n = target.n();
    (0..n)
        .map(|i| -target.row(i).iter().filter(|&&t| t > 0.0).map(|t| t * t.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}
