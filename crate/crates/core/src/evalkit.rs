//! Downstream evaluation: ROC-AUC, RMSE, a frozen-embedding linear probe,
//! and a nearest-neighbour retrieval check.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::dot;
use crate::fingerprint::{tanimoto, Fingerprint};
use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error("classification label {0} is not 0 or 1")]
    BadLabel(f64),
    #[error("least-squares solve failed: {0}")]
    Solve(String),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Twice the Mann-Whitney U statistic of the positives, with tied scores
/// sharing their average rank, plus `(n_pos, n_neg)`. Kept in integers so
/// complementary statistics add up exactly.
pub fn mann_whitney_u2(scores: &[f64], labels: &[bool]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their 1-based average rank.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1; twice the mean is (i+1) + (j+1).
        let twice_avg = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += twice_avg * pos_in_group;
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos as u128) * (n_pos as u128 + 1);
    Ok((u2, n_pos, n_neg))
}

/// `P(score+ > score-) + P(tie) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (u2, p, n) = mann_whitney_u2(scores, labels)?;
    Ok(u2 as f64 / (2 * p as u128 * n as u128) as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::InsufficientData { needed: 1, got: 0 });
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Split {
    fn default() -> Self {
        Split { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl Split {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Split { train, val, test };
        if [train, val, test].iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(EvalError::BadSplit(format!("fractions must be positive: {train},{val},{test}")));
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(EvalError::BadSplit(format!("fractions sum to {}", train + val + test)));
        }
        Ok(s)
    }

    /// Seeded shuffle of `0..n` cut into the three parts, each non-empty.
    pub fn indices(&self, n: usize, seed: u64) -> Result<[Vec<usize>; 3]> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64 * self.train).round() as usize).clamp(1, n.saturating_sub(2));
        let n_val = ((n as f64 * self.val).round() as usize).clamp(1, n.saturating_sub(n_train + 1));
        if n_train + n_val >= n {
            return Err(EvalError::InsufficientData { needed: 3, got: n });
        }
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok([order, val, test])
    }
}

pub const MIN_PROBE_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: Task,
    /// `roc_auc` or `rmse`.
    pub metric: String,
    /// Test-split metric.
    pub value: f64,
    pub seed: u64,
    pub split: [f64; 3],
    #[serde(skip)]
    pub validation_value: f64,
    /// Gradient-descent iterations kept (0 for least squares).
    #[serde(skip)]
    pub iterations: usize,
    /// Weights over standardized features, then the intercept.
    #[serde(skip)]
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Validation loss is checked every this many iterations.
    pub eval_every: usize,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { learning_rate: 0.5, max_iterations: 2000, eval_every: 10, l2: 1e-4 }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[&[f64]]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for k in 0..d {
                scale[k] += (row[k] - mean[k]).powi(2) / n;
            }
        }
        let scale = scale.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_loss(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &t)| {
            let z = dot(row, w) + b;
            // log(1 + exp(-z)) for t = 1, log(1 + exp(z)) for t = 0
            let s = if t > 0.5 { -z } else { z };
            s.max(0.0) + (-s.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / x.len() as f64
}

/// Fits an affine head on the train split of frozen embeddings and
/// reports the test metric. Deterministic given the inputs and `seed`.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[f64], task: Task, split: Split, seed: u64) -> Result<ProbeResult> {
    linear_probe_with(embeddings, labels, task, split, seed, &ProbeOptions::default())
}

pub fn linear_probe_with(
    embeddings: &[Vec<f64>],
    labels: &[f64],
    task: Task,
    split: Split,
    seed: u64,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::LengthMismatch(embeddings.len(), labels.len()));
    }
    let n = embeddings.len();
    if n < MIN_PROBE_SAMPLES {
        return Err(EvalError::InsufficientData { needed: MIN_PROBE_SAMPLES, got: n });
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(EvalError::LengthMismatch(d, embeddings.iter().map(Vec::len).find(|&l| l != d).unwrap()));
    }
    if embeddings.iter().flatten().chain(labels).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    if task == Task::Classification {
        if let Some(&l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(EvalError::BadLabel(l));
        }
    }
    let [tr, va, te] = split.indices(n, seed)?;
    let train_rows: Vec<&[f64]> = tr.iter().map(|&i| embeddings[i].as_slice()).collect();
    let std = Standardizer::fit(&train_rows);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| std.apply(&embeddings[i])).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xt, yt) = pick(&tr);
    let (xv, yv) = pick(&va);
    let (xs, ys) = pick(&te);
    let split_arr = [split.train, split.val, split.test];

    match task {
        Task::Classification => {
            let pos = yt.iter().filter(|&&y| y > 0.5).count();
            if pos == 0 || pos == yt.len() {
                return Err(EvalError::DegenerateLabels);
            }
            let mut w = vec![0.0; d];
            let mut b = 0.0;
            let mut best = (log_loss(&xv, &yv, &w, b), 0usize, w.clone(), b);
            let m = xt.len() as f64;
            for it in 1..=opts.max_iterations {
                let mut gw = vec![0.0; d];
                let mut gb = 0.0;
                for (row, &y) in xt.iter().zip(&yt) {
                    let r = sigmoid(dot(row, &w) + b) - y;
                    for (g, x) in gw.iter_mut().zip(row) {
                        *g += r * x / m;
                    }
                    gb += r / m;
                }
                for (wk, g) in w.iter_mut().zip(&gw) {
                    *wk -= opts.learning_rate * (g + opts.l2 * *wk);
                }
                b -= opts.learning_rate * gb;
                if it % opts.eval_every == 0 {
                    let vl = log_loss(&xv, &yv, &w, b);
                    if vl < best.0 {
                        best = (vl, it, w.clone(), b);
                    }
                }
            }
            let (vl, iterations, w, b) = best;
            let scores: Vec<f64> = xs.iter().map(|r| dot(r, &w) + b).collect();
            let test_labels: Vec<bool> = ys.iter().map(|&y| y > 0.5).collect();
            let value = roc_auc(&scores, &test_labels)?;
            let mut head = w;
            head.push(b);
            Ok(ProbeResult {
                task,
                metric: "roc_auc".into(),
                value,
                seed,
                split: split_arr,
                validation_value: vl,
                iterations,
                head,
            })
        }
        Task::Regression => {
            let a = DMatrix::from_fn(xt.len(), d + 1, |i, j| if j < d { xt[i][j] } else { 1.0 });
            let y = DVector::from_column_slice(&yt);
            let beta = a.svd(true, true).solve(&y, 1e-12).map_err(|e| EvalError::Solve(e.to_string()))?;
            let head: Vec<f64> = beta.iter().copied().collect();
            let predict = |x: &[Vec<f64>]| -> Vec<f64> { x.iter().map(|r| dot(r, &head[..d]) + head[d]).collect() };
            let validation_value = rmse(&predict(&xv), &yv)?;
            let value = rmse(&predict(&xs), &ys)?;
            Ok(ProbeResult {
                task,
                metric: "rmse".into(),
                value,
                seed,
                split: split_arr,
                validation_value,
                iterations: 0,
                head,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub mean_nn_tanimoto: f64,
    pub mean_random_tanimoto: f64,
}

pub const MIN_RETRIEVAL_SAMPLES: usize = 20;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    // A zero embedding is equally far from everything.
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Mean Tanimoto between each molecule and its latent nearest neighbour
/// (cosine, lowest index on ties) against the mean to a seeded uniformly
/// random other molecule.
pub fn retrieval_check(embeddings: &[Vec<f64>], fingerprints: &[Fingerprint], seed: u64) -> Result<RetrievalReport> {
    let n = embeddings.len();
    if fingerprints.len() != n {
        return Err(EvalError::LengthMismatch(n, fingerprints.len()));
    }
    if n < MIN_RETRIEVAL_SAMPLES {
        return Err(EvalError::InsufficientData { needed: MIN_RETRIEVAL_SAMPLES, got: n });
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: Vec<usize> = (0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    let rows = par::map_range(n, |i| {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let c = cosine(&embeddings[i], &embeddings[j]);
            if c > best.0 {
                best = (c, j);
            }
        }
        let nn = tanimoto(&fingerprints[i], &fingerprints[best.1]);
        let rnd = tanimoto(&fingerprints[i], &fingerprints[random[i]]);
        (nn, rnd)
    });
    let mut nn_sum = 0.0;
    let mut rnd_sum = 0.0;
    for (nn, rnd) in rows {
        nn_sum += nn.map_err(|e| EvalError::Solve(e.to_string()))?;
        rnd_sum += rnd.map_err(|e| EvalError::Solve(e.to_string()))?;
    }
    Ok(RetrievalReport { n, mean_nn_tanimoto: nn_sum / n as f64, mean_random_tanimoto: rnd_sum / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn auc_edge_cases() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1.0, 2.0], &[true, true]), Err(EvalError::DegenerateLabels));
        assert_eq!(roc_auc(&[1.0], &[true, false]), Err(EvalError::LengthMismatch(1, 2)));
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.25), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count((s, l) in scored()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let a = roc_auc(&s, &l).unwrap();
            prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn auc_complement_is_exact((s, l) in scored()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let (u, p, n) = mann_whitney_u2(&s, &l).unwrap();
            let (v, _, _) = mann_whitney_u2(&neg, &l).unwrap();
            prop_assert_eq!(u + v, 2 * p as u128 * n as u128);
            prop_assert!((roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap() - 1.0).abs() <= f64::EPSILON);
        }

        #[test]
        fn auc_monotone_invariant((s, l) in scored()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let t: Vec<f64> = s.iter().map(|x| (x * 3.0).exp() + 7.0).collect();
            prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
        }

        #[test]
        fn rmse_symmetric_and_triangle(
            v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..30)
        ) {
            let a: Vec<f64> = v.iter().map(|x| x.0).collect();
            let b: Vec<f64> = v.iter().map(|x| x.1).collect();
            let c: Vec<f64> = v.iter().map(|x| x.2).collect();
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 2.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2)));
    }

    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = (i % 2) as f64;
                let c = if y > 0.5 { 3.0 } else { -3.0 };
                (vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], y)
            })
            .unzip()
    }

    #[test]
    fn separable_probe_is_perfect() {
        let (x, y) = clusters(100, 1);
        let r = linear_probe(&x, &y, Task::Classification, Split::default(), 3).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r, linear_probe(&x, &y, Task::Classification, Split::default(), 3).unwrap());
    }

    #[test]
    fn realizable_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.5 * r[0] - 2.0 * r[1] + 0.25 * r[3] + 4.0).collect();
        let r = linear_probe(&x, &y, Task::Regression, Split::default(), 9).unwrap();
        assert!(r.value < 1e-6, "{}", r.value);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        // Permutation null: averaged over label shuffles and split seeds.
        let (x, y) = clusters(200, 4);
        let mut total = 0.0;
        for s in 0..20 {
            let mut y = y.clone();
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + s));
            total += linear_probe(&x, &y, Task::Classification, Split::default(), s).unwrap().value;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() <= 0.15, "{mean}");
    }

    #[test]
    fn probe_input_checks() {
        let (x, y) = clusters(9, 1);
        assert!(matches!(
            linear_probe(&x, &y, Task::Regression, Split::default(), 0),
            Err(EvalError::InsufficientData { needed: 10, got: 9 })
        ));
        let (x, _) = clusters(20, 1);
        assert_eq!(
            linear_probe(&x, &[1.0; 20], Task::Classification, Split::default(), 0),
            Err(EvalError::DegenerateLabels)
        );
        assert_eq!(
            linear_probe(&x, &[2.0; 20], Task::Classification, Split::default(), 0),
            Err(EvalError::BadLabel(2.0))
        );
        assert!(Split::new(0.8, 0.1, 0.2).is_err());
    }

    #[test]
    fn json_has_documented_fields() {
        let (x, y) = clusters(50, 1);
        let r = linear_probe(&x, &y, Task::Classification, Split::default(), 3).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["metric", "seed", "split", "task", "value"]);
    }

    #[test]
    fn retrieval_by_fingerprint_itself() {
        let fps: Vec<Fingerprint> = (0..30)
            .map(|i| Fingerprint::from_indices(512, 2, (0..20).map(|k| (i * 7 + k * (i % 5 + 1)) % 512)))
            .collect();
        let emb: Vec<Vec<f64>> = fps.iter().map(Fingerprint::to_f64).collect();
        let r = retrieval_check(&emb, &fps, 1).unwrap();
        assert!(r.mean_nn_tanimoto >= r.mean_random_tanimoto);
        assert!(matches!(retrieval_check(&emb[..10], &fps[..10], 1), Err(EvalError::InsufficientData { .. })));
    }
}
