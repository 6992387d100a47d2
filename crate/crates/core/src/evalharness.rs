//! Test error, per-criterion rankings and the top-k metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::expr::ExprError;
use crate::optfit::{mse, FitError};
use crate::poolgen::FittedCandidate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("length mismatch: {got} values for {n} candidates")]
    LengthMismatch { got: usize, n: usize },
    #[error("candidate ids must be 0..n in order; found {id} at position {pos}")]
    BadIds { pos: usize, id: usize },
    #[error("pool has no ground-truth candidate")]
    NoGroundTruth,
    #[error("nothing to summarise")]
    Empty,
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Test MSE of every candidate at its training-fitted parameters.
pub fn test_mse_all(pool: &[FittedCandidate], test: &Dataset) -> Result<Vec<f64>, EvalError> {
    let mut pred = Vec::with_capacity(test.n());
    pool.iter()
        .map(|c| {
            let prog = c.tree.compile();
            prog.check_inputs(&c.fit.theta_hat, &test.x, test.dim)?;
            prog.evaluate_into(&c.fit.theta_hat, &test.x, test.dim, &mut pred);
            Ok(mse(&pred, &test.y)?)
        })
        .collect()
}

/// Candidate ids ordered best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    /// Adjacent pairs with equal scores, ordered by the size/id tie-break.
    pub tie_breaks: usize,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// 1-based position of `id`.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == id).map(|p| p + 1)
    }

    fn top(&self, k: usize) -> Result<&[usize], EvalError> {
        if k == 0 || k > self.order.len() {
            return Err(EvalError::KOutOfRange { k, n: self.order.len() });
        }
        Ok(&self.order[..k])
    }
}

fn score_cmp(a: f64, b: f64) -> Ordering {
    if a == b {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

/// Ascending by score; ties go to the smaller tree, then the smaller id.
/// `+inf` sorts last. Candidate `i` has id `i`.
pub fn rank(scores: &[f64], sizes: &[usize]) -> Result<Ranking, EvalError> {
    if sizes.len() != scores.len() {
        return Err(EvalError::LengthMismatch { got: sizes.len(), n: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_cmp(scores[a], scores[b]).then(sizes[a].cmp(&sizes[b])).then(a.cmp(&b)));
    let tie_breaks = order.windows(2).filter(|w| score_cmp(scores[w[0]], scores[w[1]]).is_eq()).count();
    Ok(Ranking { order, tie_breaks })
}

fn check_len(values: &[f64], ranking: &Ranking) -> Result<(), EvalError> {
    if values.len() != ranking.len() {
        return Err(EvalError::LengthMismatch { got: values.len(), n: ranking.len() });
    }
    Ok(())
}

pub fn avg_test_mse_at_k(ranking: &Ranking, mse_test: &[f64], k: usize) -> Result<f64, EvalError> {
    check_len(mse_test, ranking)?;
    let top = ranking.top(k)?;
    Ok(top.iter().map(|&i| mse_test[i]).sum::<f64>() / k as f64)
}

/// Share of the criterion's top k that lies in the true top k by test
/// MSE. Candidates tied with the k-th best test MSE all count as true top k.
pub fn precision_at_k(ranking: &Ranking, mse_test: &[f64], k: usize) -> Result<f64, EvalError> {
    check_len(mse_test, ranking)?;
    let top = ranking.top(k)?;
    let mut sorted = mse_test.to_vec();
    sorted.sort_by(|a, b| score_cmp(*a, *b));
    let cutoff = sorted[k - 1];
    let hits = top.iter().filter(|&&i| score_cmp(mse_test[i], cutoff).is_le()).count();
    Ok(hits as f64 / k as f64)
}

pub fn avg_size_at_k(ranking: &Ranking, sizes: &[usize], k: usize) -> Result<f64, EvalError> {
    if sizes.len() != ranking.len() {
        return Err(EvalError::LengthMismatch { got: sizes.len(), n: ranking.len() });
    }
    let top = ranking.top(k)?;
    Ok(top.iter().map(|&i| sizes[i] as f64).sum::<f64>() / k as f64)
}

/// 1-based rank of the tagged ground truth.
pub fn ground_truth_hit(ranking: &Ranking, pool: &[FittedCandidate]) -> Result<usize, EvalError> {
    let gt = pool.iter().find(|c| c.is_ground_truth).ok_or(EvalError::NoGroundTruth)?;
    ranking.position(gt.candidate_id).ok_or(EvalError::NoGroundTruth)
}

/// Checks that candidate ids are positions, as `rank` assumes.
pub fn check_ids(pool: &[FittedCandidate]) -> Result<(), EvalError> {
    match pool.iter().enumerate().find(|(pos, c)| c.candidate_id != *pos) {
        Some((pos, c)) => Err(EvalError::BadIds { pos, id: c.candidate_id }),
        None => Ok(()),
    }
}

/// All three curves for k = 1..=n plus the ground-truth hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurves {
    pub avg_mse_test: Vec<f64>,
    pub precision: Vec<f64>,
    pub avg_size: Vec<f64>,
    pub gt_first_hit: usize,
}

impl MetricCurves {
    pub fn compute(ranking: &Ranking, mse_test: &[f64], pool: &[FittedCandidate]) -> Result<Self, EvalError> {
        check_ids(pool)?;
        let sizes: Vec<usize> = pool.iter().map(|c| c.tree.size()).collect();
        let n = ranking.len();
        let mut curves = MetricCurves {
            avg_mse_test: Vec::with_capacity(n),
            precision: Vec::with_capacity(n),
            avg_size: Vec::with_capacity(n),
            gt_first_hit: ground_truth_hit(ranking, pool)?,
        };
        for k in 1..=n {
            curves.avg_mse_test.push(avg_test_mse_at_k(ranking, mse_test, k)?);
            curves.precision.push(precision_at_k(ranking, mse_test, k)?);
            curves.avg_size.push(avg_size_at_k(ranking, &sizes, k)?);
        }
        Ok(curves)
    }
}

/// Row statistics of ground-truth hits across benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1); zero for a single value.
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

pub fn summarize(hits: &[usize]) -> Result<Summary, EvalError> {
    if hits.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = hits.len() as f64;
    let mean = hits.iter().sum::<usize>() as f64 / n;
    let mut sorted = hits.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    let std = if hits.len() > 1 {
        (hits.iter().map(|&h| (h as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, median, std, min: sorted[0], max: sorted[sorted.len() - 1] })
}
