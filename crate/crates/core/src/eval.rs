//! Exact-span micro-F1, multi-seed aggregation with t-based 95% confidence
//! intervals, and a brute-force chance-level oracle for the lookahead task.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::{Span, TaskParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("micro_f1: {gold} gold sentences vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("aggregate: need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("chance oracle: unsupported task family '{0}'")]
    UnsupportedTask(String),
}

// ── Micro-F1 ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Result {
    /// Derives the rates from raw counts. The all-zero case (no gold and no
    /// predicted spans anywhere) scores 1.0: nothing to find, nothing
    /// invented.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> F1Result {
        if tp == 0 && fp == 0 && fn_ == 0 {
            return F1Result {
                tp,
                fp,
                fn_,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Result {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged exact-span F1 over sentence-aligned span sets: a predicted
/// span counts as a true positive only when (start, end, type) all match.
pub fn micro_f1(gold: &[BTreeSet<Span>], pred: &[BTreeSet<Span>]) -> Result<F1Result, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let hit = g.intersection(p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(F1Result::from_counts(tp, fp, fn_))
}

/// One evaluated run, in the shape emitted to JSON and CSV result tables.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub dataset: String,
    pub strategy: String,
    pub r: usize,
    pub exit_layer: usize,
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

// ── Seed aggregation ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci_halfwidth: f64,
}

/// Two-sided Student-t 97.5% quantile, i.e. the multiplier for a 95%
/// confidence interval with `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid t distribution");
    dist.inverse_cdf(0.975)
}

/// Mean and t-based 95% half-width: t(0.975, n−1) · s / √n with the sample
/// (n−1) standard deviation.
pub fn aggregate(values: &[f64]) -> Result<SeedAggregate, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let ci_halfwidth = t_quantile_975(n - 1) * var.sqrt() / (n as f64).sqrt();
    Ok(SeedAggregate {
        values: values.to_vec(),
        mean,
        ci_halfwidth,
    })
}

// ── Chance oracle ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceOracle {
    /// Mean over folds of the best causal micro-F1 on sampled data.
    pub ceiling: f64,
    pub ci_halfwidth: f64,
    /// Predict-rate that achieved the ceiling (grid argmax, last fold).
    pub best_q: f64,
    pub fold_values: Vec<f64>,
}

/// Closed-form ceiling for the lookahead task: past words carry no
/// information about the next one, so any causal strategy that predicts at
/// rate q over non-final positions has precision p and recall q, giving
/// F1 = 2pq/(p+q), maximized at q = 1 with value 2p/(1+p).
pub fn analytic_causal_ceiling(trigger_prob: f64) -> f64 {
    2.0 * trigger_prob / (1.0 + trigger_prob)
}

/// Best micro-F1 any causal predictor can reach on the lookahead task,
/// estimated on sampled corpora of at least `sample_words` words, `folds`
/// independent folds. The predictor is granted position and sentence-length
/// knowledge (it never wastes predictions on final words), which can only
/// raise the ceiling, so the returned value upper-bounds real causal models.
/// Only the "lookahead" family is supported.
pub fn causal_chance_oracle(
    task: &str,
    params: &TaskParams,
    sample_words: usize,
    folds: usize,
    seed: u64,
) -> Result<ChanceOracle, EvalError> {
    if task != "lookahead" {
        return Err(EvalError::UnsupportedTask(task.to_string()));
    }
    let p = params.trigger_prob;
    // degenerate distributions have exact ceilings: no positive class at all
    // (empty vs empty scores 1.0), or a deterministic next word
    if p == 0.0 || p == 1.0 {
        return Ok(ChanceOracle {
            ceiling: 1.0,
            ci_halfwidth: 0.0,
            best_q: if p == 0.0 { 0.0 } else { 1.0 },
            fold_values: vec![1.0; folds],
        });
    }
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut fold_values = Vec::with_capacity(folds);
    let mut best_q = 0.0;
    for fold in 0..folds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fold as u64));
        // tallies[qi] = (tp, fp, fn); one shared uniform per position couples
        // the grid points, so predict(q) is monotone in q by construction
        let mut tallies = vec![(0usize, 0usize, 0usize); grid.len()];
        let mut words_seen = 0usize;
        while words_seen < sample_words {
            let words = crate::data::sample_words(params, &mut rng);
            words_seen += words.len();
            for i in 0..words.len().saturating_sub(1) {
                let gold_positive = words[i + 1] == crate::data::TRIGGER_WORD;
                let u: f64 = rng.gen();
                for (qi, q) in grid.iter().enumerate() {
                    let predict = u < *q;
                    let t = &mut tallies[qi];
                    match (gold_positive, predict) {
                        (true, true) => t.0 += 1,
                        (false, true) => t.1 += 1,
                        (true, false) => t.2 += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        let (qi_best, f1_best) = tallies
            .iter()
            .enumerate()
            .map(|(qi, &(tp, fp, fn_))| (qi, F1Result::from_counts(tp, fp, fn_).f1))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty grid");
        best_q = grid[qi_best];
        fold_values.push(f1_best);
    }
    let (ceiling, ci_halfwidth) = if folds >= 2 {
        let agg = aggregate(&fold_values)?;
        (agg.mean, agg.ci_halfwidth)
    } else {
        (fold_values[0], 0.0)
    };
    Ok(ChanceOracle {
        ceiling,
        ci_halfwidth,
        best_q,
        fold_values,
    })
}

// ── Rank correlation ───────────────────────────────────────────────────

/// Spearman rank correlation with average ranks for ties. Returns NaN for
/// fewer than 2 points or zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman: length mismatch");
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; tied values share the average rank
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}
