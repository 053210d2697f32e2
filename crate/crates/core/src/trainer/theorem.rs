//! Numerical check that free latent similarities trained against a
//! row-stochastic target converge to `softmax(D) = T`, and that the
//! optimum preserves every within-row ordering of `T`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::TrainError;
use crate::diffcore::softmax_in_place;
use crate::par;
use crate::similarity::{SquareMatrix, TargetSimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremOptions {
    pub max_steps: u32,
    pub learning_rate: f64,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    /// Record the deviation every this many steps.
    pub trace_every: u32,
    /// Halve the step size after this many steps without a new best
    /// gradient norm. Constant-step Adam settles into a limit cycle whose
    /// gradient norm scales with the step size.
    pub patience: u32,
}

impl Default for TheoremOptions {
    fn default() -> Self {
        TheoremOptions { max_steps: 50_000, learning_rate: 0.05, grad_tol: 1e-10, trace_every: 50, patience: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub steps: u32,
    pub converged: bool,
    pub grad_norm: f64,
    pub max_softmax_deviation: f64,
    pub ordering_violations: usize,
    /// `max |softmax(D) - T|` sampled every `trace_every` steps.
    pub deviation_trace: Vec<f64>,
    #[serde(skip)]
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub converged: bool,
    pub max_softmax_deviation: f64,
    pub ordering_violations: usize,
    pub max_steps_taken: u32,
    pub trial_reports: Vec<TrialReport>,
}

/// Random strictly positive row-stochastic `n x n` matrix.
pub fn random_target(rng: &mut impl Rng, n: usize) -> TargetSimilarityMatrix {
    let mut values = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        values.extend(row.iter().map(|x| x / s));
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    TargetSimilarityMatrix { matrix: SquareMatrix::new(ids, values).expect("square") }
}

fn softmax_rows(latent: &[f64], n: usize) -> Vec<f64> {
    let mut p = latent.to_vec();
    p.chunks_mut(n).for_each(softmax_in_place);
    p
}

pub fn max_deviation(target: &TargetSimilarityMatrix, latent: &[f64]) -> f64 {
    softmax_rows(latent, target.n())
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t).abs())
        .fold(0.0, f64::max)
}

/// Within-row pairs with `t_ij > t_ij'` but `d_ij <= d_ij'`.
pub fn ordering_violations(target: &TargetSimilarityMatrix, latent: &[f64]) -> usize {
    let n = target.n();
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if target.get(i, j) > target.get(i, k) && latent[i * n + j] <= latent[i * n + k] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Minimizes the anchor-summed cross-entropy over free `D` (dot mode, no
/// encoder) with Adam, starting from `D = 0`.
pub fn optimize_free_latent(target: &TargetSimilarityMatrix, opts: &TheoremOptions) -> TrialReport {
    let n = target.n();
    let mut latent = vec![0.0; n * n];
    let mut state = AdamState::new(&[n * n]);
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut grad_norm;
    let mut lr = opts.learning_rate;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    loop {
        // Gradient of sum_i L(i) is softmax(D) - T.
        let grad: Vec<f64> = softmax_rows(&latent, n)
            .iter()
            .zip(target.values())
            .map(|(p, t)| p - t)
            .collect();
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if opts.trace_every > 0 && steps % opts.trace_every == 0 {
            trace.push(max_deviation(target, &latent));
        }
        if grad_norm < opts.grad_tol || steps >= opts.max_steps {
            break;
        }
        if grad_norm < best {
            best = grad_norm;
            stale = 0;
        } else {
            stale += 1;
            if opts.patience > 0 && stale >= opts.patience {
                lr *= 0.5;
                stale = 0;
            }
        }
        adam_step(&mut [&mut latent], &[&grad], &mut state, lr)
            .expect("buffer sizes fixed");
        steps += 1;
    }
    TrialReport {
        steps,
        converged: grad_norm < opts.grad_tol,
        grad_norm,
        max_softmax_deviation: max_deviation(target, &latent),
        ordering_violations: ordering_violations(target, &latent),
        deviation_trace: trace,
        latent,
    }
}

/// Runs `trials` independent random targets of size `n`. Trials are
/// seeded up front and may run in parallel; the report does not depend on
/// scheduling.
pub fn verify_theorem(n: usize, trials: usize, seed: u64, opts: &TheoremOptions) -> Result<TheoremReport, TrainError> {
    if n < 2 {
        return Err(TrainError::Config(format!("pool size {n} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<TargetSimilarityMatrix> = (0..trials).map(|_| random_target(&mut rng, n)).collect();
    let reports = par::map_slice(&targets, |t| optimize_free_latent(t, opts));
    let report = TheoremReport {
        n,
        trials,
        seed,
        converged: reports.iter().all(|r| r.converged),
        max_softmax_deviation: reports.iter().map(|r| r.max_softmax_deviation).fold(0.0, f64::max),
        ordering_violations: reports.iter().map(|r| r.ordering_violations).sum(),
        max_steps_taken: reports.iter().map(|r| r.steps).max().unwrap_or(0),
        trial_reports: reports,
    };
    if !report.converged {
        return Err(TrainError::NonConvergence(Box::new(report)));
    }
    Ok(report)
}
