//! Inference profiling: wall-clock speedup grids over (early exit, repetition)
//! pairs, plus a two-parameter analytic cost model fitted from calibration
//! timings so measured grids can be checked against theory.
//!
//! All timing is single-threaded by construction (the whole crate is) and
//! reports the median over repeated passes after a few warmups.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabeledSequence, PAD_ID};
use crate::eval::spearman;
use crate::model::{build_mask_config, LayerMaskConfig, ModelError, SLModel, Strategy};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ProfileError> {
    Err(ProfileError::Config(msg.into()))
}

/// Timing discipline. `reps` must be >= 1; the headline numbers use the
/// default (3 warmups, 21 timed passes, median).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub warmups: usize,
    pub reps: usize,
    pub batch_size: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { warmups: 3, reps: 21, batch_size: 8 }
    }
}

/// Scaled analogs of the reference exit depths {9, 14, 19, 24} quoted for a
/// 32-layer stack: each is rounded to the nearest layer of an `n_layers`
/// stack, clamped into the legal exit range [2, n_layers], deduplicated.
pub fn toy_exit_analogs(n_layers: usize) -> Vec<usize> {
    const REFERENCE: [f64; 4] = [9.0, 14.0, 19.0, 24.0];
    let mut out = Vec::new();
    for e in REFERENCE {
        let l = (e * n_layers as f64 / 32.0).round() as usize;
        let l = l.clamp(2, n_layers);
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// Per-layer cost model: one forward layer over a length-`len` sequence
/// costs `alpha * len + beta * len^2` in arbitrary (but fixed) units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
}

impl CostModel {
    pub fn cost(&self, active_layers: usize, len: usize) -> f64 {
        let l = len as f64;
        active_layers as f64 * (self.alpha * l + self.beta * l * l)
    }
}

/// Fit `c = alpha * l + beta * l^2` exactly through two measured points.
/// Negative coefficients (possible under timing noise) are clamped to a
/// degenerate one-term fit so the model stays monotone in `len`.
pub fn solve_cost_model(l1: f64, c1: f64, l2: f64, c2: f64) -> Result<CostModel, ProfileError> {
    if !(l1 > 0.0 && l2 > 0.0 && l1 != l2) {
        return cfg_err(format!("calibration lengths must be positive and distinct, got {l1} and {l2}"));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return cfg_err(format!("calibration costs must be positive, got {c1} and {c2}"));
    }
    let beta = (c2 / l2 - c1 / l1) / (l2 - l1);
    let alpha = c1 / l1 - beta * l1;
    if beta < 0.0 {
        // pure-linear least squares through the origin
        let alpha = (c1 * l1 + c2 * l2) / (l1 * l1 + l2 * l2);
        return Ok(CostModel { alpha, beta: 0.0 });
    }
    if alpha < 0.0 {
        // pure-quadratic least squares through the origin
        let beta = (c1 * l1 * l1 + c2 * l2 * l2) / (l1.powi(4) + l2.powi(4));
        return Ok(CostModel { alpha: 0.0, beta });
    }
    Ok(CostModel { alpha, beta })
}

/// Theoretical speedup grid: rows follow `exits` (1-indexed exit layer L,
/// running L-1 decoder layers), columns follow `rs`. The base is the full
/// stack at r = 0 over a length-`len_base` input.
pub fn theory_speedup_grid(
    cm: &CostModel,
    n_layers: usize,
    exits: &[usize],
    rs: &[usize],
    len_base: usize,
) -> Vec<Vec<f64>> {
    let base = cm.cost(n_layers, len_base);
    exits
        .iter()
        .map(|&l| {
            rs.iter()
                .map(|&r| base / cm.cost(l - 1, (r + 1) * len_base))
                .collect()
        })
        .collect()
}

/// Median of `reps` timed passes of `f`, preceded by `warmups` untimed ones.
pub fn median_seconds<F: FnMut()>(mut f: F, opts: &ProfileOptions) -> f64 {
    assert!(opts.reps >= 1, "median_seconds: reps must be >= 1");
    for _ in 0..opts.warmups {
        f();
    }
    let mut times = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

/// Everything `profile_model` produces: the measured grid, the fitted cost
/// model, its theoretical grid, and the rank agreement between the two.
/// Grids are indexed `[exit][r]`; speedups are relative to the full-depth
/// r = 0 base over the same batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileReport {
    pub exits: Vec<usize>,
    pub rs: Vec<usize>,
    pub len_base: usize,
    pub base_seconds: f64,
    pub measured_seconds: Vec<Vec<f64>>,
    pub measured_speedup: Vec<Vec<f64>>,
    pub theory_speedup: Vec<Vec<f64>>,
    pub cost_model: CostModel,
    pub spearman: f64,
}

struct PaddedChunks {
    ids: Vec<Vec<Vec<usize>>>,
    pads: Vec<Vec<Vec<bool>>>,
    len: usize,
}

/// Pad every sentence to the global max length so each grid cell times the
/// same token volume, then chunk.
fn pad_chunks(val: &[LabeledSequence], batch_size: usize) -> Result<PaddedChunks, ProfileError> {
    if val.is_empty() {
        return cfg_err("profiling needs a non-empty validation set");
    }
    if batch_size == 0 {
        return cfg_err("batch_size must be >= 1");
    }
    let mut len = 0;
    for s in val {
        if s.token_ids.is_empty() {
            return cfg_err("profiling needs tokenized sentences");
        }
        len = len.max(s.token_ids.len());
    }
    let mut ids = Vec::new();
    let mut pads = Vec::new();
    for chunk in val.chunks(batch_size) {
        let mut cid = Vec::with_capacity(chunk.len());
        let mut cpad = Vec::with_capacity(chunk.len());
        for s in chunk {
            let mut row = s.token_ids.clone();
            let mut flags = s.pad_flags.clone();
            row.resize(len, PAD_ID);
            flags.resize(len, true);
            cid.push(row);
            cpad.push(flags);
        }
        ids.push(cid);
        pads.push(cpad);
    }
    Ok(PaddedChunks { ids, pads, len })
}

fn timed_forward(
    model: &SLModel,
    chunks: &PaddedChunks,
    mask: &LayerMaskConfig,
    r: usize,
    opts: &ProfileOptions,
) -> f64 {
    median_seconds(
        || {
            crate::tensor::no_grad(|| {
                for (ids, pads) in chunks.ids.iter().zip(&chunks.pads) {
                    let out = model.forward_sl_batch(ids, pads, mask, r);
                    std::hint::black_box(out.data().len());
                }
            });
        },
        opts,
    )
}

/// Measure the speedup grid over `exits` x `rs`, fit the cost model from two
/// full-depth calibration timings (the r = 0 base and one run at the largest
/// requested r), and compare measured against theoretical ranks.
pub fn profile_model(
    model: &mut SLModel,
    val: &[LabeledSequence],
    exits: &[usize],
    rs: &[usize],
    opts: &ProfileOptions,
) -> Result<ProfileReport, ProfileError> {
    if exits.is_empty() || rs.is_empty() {
        return cfg_err("profiling needs at least one exit and one r");
    }
    let max_r = *rs.iter().max().unwrap();
    if max_r == 0 {
        return cfg_err("profiling needs a nonzero r to calibrate the cost model");
    }
    let chunks = pad_chunks(val, opts.batch_size)?;
    let n_layers = model.cfg.n_layers;
    let mask = build_mask_config(Strategy::Repeat, n_layers)?;
    model.set_train_mode(false);
    let saved_exit = model.exit_layer();
    model.clear_early_exit();

    // calibration point 1 doubles as the grid's base
    let base_seconds = timed_forward(model, &chunks, &mask, 0, opts);
    let calib_seconds = timed_forward(model, &chunks, &mask, max_r, opts);
    let l1 = chunks.len as f64;
    let l2 = ((max_r + 1) * chunks.len) as f64;
    let cm = solve_cost_model(
        l1,
        base_seconds / n_layers as f64,
        l2,
        calib_seconds / n_layers as f64,
    )?;

    let mut measured_seconds = Vec::with_capacity(exits.len());
    let mut measured_speedup = Vec::with_capacity(exits.len());
    for &l in exits {
        model.set_early_exit(l)?;
        let mut row_s = Vec::with_capacity(rs.len());
        let mut row_x = Vec::with_capacity(rs.len());
        for &r in rs {
            let t = timed_forward(model, &chunks, &mask, r, opts);
            row_x.push(base_seconds / t);
            row_s.push(t);
        }
        measured_seconds.push(row_s);
        measured_speedup.push(row_x);
    }
    match saved_exit {
        Some(l) => model.set_early_exit(l)?,
        None => model.clear_early_exit(),
    }

    let theory = theory_speedup_grid(&cm, n_layers, exits, rs, chunks.len);
    let flat_m: Vec<f64> = measured_speedup.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = theory.iter().flatten().copied().collect();
    let rho = spearman(&flat_m, &flat_t);

    Ok(ProfileReport {
        exits: exits.to_vec(),
        rs: rs.to_vec(),
        len_base: chunks.len,
        base_seconds,
        measured_seconds,
        measured_speedup,
        theory_speedup: theory,
        cost_model: cm,
        spearman: rho,
    })
}

/// True iff every row decreases left to right and every column decreases top
/// to bottom (strictly). The shape the speedup grid must have: more
/// repetitions or a later exit can only cost more.
pub fn grid_strictly_decreasing(grid: &[Vec<f64>]) -> bool {
    // partial_cmp so a NaN anywhere fails the check instead of passing it
    let strictly_greater = |a: f64, b: f64| a.partial_cmp(&b) == Some(std::cmp::Ordering::Greater);
    for row in grid {
        for w in row.windows(2) {
            if !strictly_greater(w[0], w[1]) {
                return false;
            }
        }
    }
    for pair in grid.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            if !strictly_greater(*a, *b) {
                return false;
            }
        }
    }
    true
}

/// Random token batch for ad-hoc calibration outside a dataset context.
pub fn synthetic_batch(vocab: usize, batch: usize, len: usize, seed: u64) -> Vec<LabeledSequence> {
    assert!(vocab >= 2, "synthetic_batch: vocab must include pad and unk");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
            LabeledSequence::from_token_ids(ids)
        })
        .collect()
}
