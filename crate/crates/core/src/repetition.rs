//! Input-level sequence repetition and block-structure analysis.
//!
//! Repeating an n-token input k = r+1 times under a causal mask gives the
//! attention matrix a k×k block structure over n×n blocks: strictly above
//! the block diagonal everything is masked (Zero), the diagonal blocks are
//! LowerTriangular, and every block below the diagonal is Dense, because
//! instance i ≥ j sees all of instance j. The dense share among nonzero
//! blocks is (k−1)/(k+1), which approaches 1 as k grows: later instances
//! effectively see the whole sequence both ways.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// An input sequence concatenated to itself k = r+1 times, pads included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatedSequence {
    /// Length k·n; ids[i] == ids[i mod n].
    pub ids: Vec<usize>,
    /// Original length, pads included.
    pub n: usize,
    /// Instance count, k = r + 1.
    pub k: usize,
    /// Repetition count.
    pub r: usize,
}

/// Concatenates `ids` to itself r additional times. Pad tokens are repeated
/// verbatim along with everything else; r = 0 returns the input unchanged.
pub fn repeat(ids: &[usize], r: usize) -> RepeatedSequence {
    assert!(!ids.is_empty(), "repeat: empty input");
    let n = ids.len();
    let k = r + 1;
    let mut out = Vec::with_capacity(k * n);
    for _ in 0..k {
        out.extend_from_slice(ids);
    }
    RepeatedSequence { ids: out, n, k, r }
}

/// Repeats any per-position slice (pad flags, word-start flags) the same way
/// token ids are repeated.
pub fn repeat_flags<T: Copy>(flags: &[T], r: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(flags.len() * (r + 1));
    for _ in 0..=r {
        out.extend_from_slice(flags);
    }
    out
}

/// Fraction of nonzero attention blocks that are dense under k instances:
/// (k·(k+1)/2 − k) / (k·(k+1)/2) = (k−1)/(k+1).
pub fn bidirectional_share(k: usize) -> f64 {
    assert!(k >= 1, "bidirectional_share: k must be >= 1");
    (k as f64 - 1.0) / (k as f64 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockClass {
    Dense,
    LowerTriangular,
    Zero,
    /// Matches none of the three expected shapes; reported as a
    /// verification failure by consumers.
    Irregular,
}

/// Classification of a k·n × k·n attention-weight matrix into k² blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub k: usize,
    pub n: usize,
    /// Row-major k×k grid; entry [i][j] covers rows of instance i, columns
    /// of instance j.
    pub classes: Vec<Vec<BlockClass>>,
    /// Dense blocks over nonzero blocks, from the actual grid.
    pub share_bidirectional: f64,
}

impl BlockReport {
    /// True when the grid is exactly Zero above / LT on / Dense below the
    /// block diagonal.
    pub fn matches_expected_pattern(&self) -> bool {
        self.classes.iter().enumerate().all(|(i, row)| {
            row.iter().enumerate().all(|(j, &c)| {
                c == match i.cmp(&j) {
                    std::cmp::Ordering::Less => BlockClass::Zero,
                    std::cmp::Ordering::Equal => BlockClass::LowerTriangular,
                    std::cmp::Ordering::Greater => BlockClass::Dense,
                }
            })
        })
    }
}

/// Partitions `weights` (a [k·n, k·n] attention matrix) into k² blocks of
/// n×n and classifies each: Zero when all |entries| < tol, LowerTriangular
/// when the strict upper triangle is < tol and some lower entry is ≥ tol,
/// Dense when every entry is ≥ tol, Irregular otherwise. Softmax makes
/// masked weights exactly 0.0 and open weights strictly positive, so
/// tol only needs to separate 0 from positive (1e-300 works; tests use
/// looser values to prove there is no fuzz).
pub fn classify_blocks(weights: &Tensor, n: usize, k: usize, tol: f64) -> BlockReport {
    let shape = weights.shape();
    let seq = k * n;
    assert!(
        shape == [seq, seq],
        "classify_blocks: weights {shape:?} do not factor as k·n = {k}·{n}"
    );
    let w = weights.data();
    let mut classes = vec![vec![BlockClass::Irregular; k]; k];
    for bi in 0..k {
        for bj in 0..k {
            let mut all_small = true;
            let mut all_big = true;
            let mut upper_small = true;
            let mut lower_any_big = false;
            for r in 0..n {
                for c in 0..n {
                    let v = w[(bi * n + r) * seq + bj * n + c].abs();
                    let small = v < tol;
                    all_small &= small;
                    all_big &= !small;
                    if c > r {
                        upper_small &= small;
                    } else {
                        lower_any_big |= !small;
                    }
                }
            }
            classes[bi][bj] = if all_small {
                BlockClass::Zero
            } else if upper_small && lower_any_big {
                BlockClass::LowerTriangular
            } else if all_big {
                BlockClass::Dense
            } else {
                BlockClass::Irregular
            };
        }
    }
    let n_zero = classes
        .iter()
        .flatten()
        .filter(|&&c| c == BlockClass::Zero)
        .count();
    let n_dense = classes
        .iter()
        .flatten()
        .filter(|&&c| c == BlockClass::Dense)
        .count();
    let nonzero = k * k - n_zero;
    let share_bidirectional = if nonzero == 0 {
        0.0
    } else {
        n_dense as f64 / nonzero as f64
    };
    BlockReport {
        k,
        n,
        classes,
        share_bidirectional,
    }
}

/// Rows of the final instance: (k−1)·n .. k·n−1 along axis 0. Predictions
/// and losses for sequence labeling come exclusively from these rows.
pub fn extract_final_instance(per_position: &Tensor, n: usize, k: usize) -> Tensor {
    let shape = per_position.shape();
    assert!(
        !shape.is_empty() && shape[0] == k * n,
        "extract_final_instance: leading dim {:?} != k·n = {k}·{n}",
        shape.first()
    );
    per_position.slice(0, (k - 1) * n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend, causal_mask, AttnProjections};
    use crate::tensor::{backward, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn repeat_examples() {
        assert_eq!(repeat(&[5, 7], 1).ids, vec![5, 7, 5, 7]);
        let r0 = repeat(&[5, 7], 0);
        assert_eq!(r0.ids, vec![5, 7]);
        assert_eq!((r0.n, r0.k, r0.r), (2, 1, 0));
        // pads (id 0) are repeated verbatim
        assert_eq!(repeat(&[5, 7, 0, 0], 1).ids, vec![5, 7, 0, 0, 5, 7, 0, 0]);
    }

    #[test]
    fn repeat_periodicity_invariant() {
        let rep = repeat(&[3, 1, 4, 1, 5], 3);
        assert_eq!(rep.ids.len(), rep.k * rep.n);
        for (i, &id) in rep.ids.iter().enumerate() {
            assert_eq!(id, rep.ids[i % rep.n]);
        }
    }

    #[test]
    fn share_formula_values() {
        assert_eq!(bidirectional_share(1), 0.0);
        assert_eq!(bidirectional_share(2), 1.0 / 3.0);
        assert_eq!(bidirectional_share(100), 99.0 / 101.0);
        assert!((bidirectional_share(100) - 0.9802).abs() < 1e-4);
    }

    #[test]
    fn share_strictly_increasing_and_bounded() {
        let mut prev = -1.0;
        for k in 1..=100 {
            let s = bidirectional_share(k);
            assert!(s > prev, "share not increasing at k={k}");
            assert!(s < 1.0);
            prev = s;
        }
    }

    /// Attention weights for a repeated random input under a causal mask.
    fn causal_weights(n: usize, k: usize, seed: u64) -> Vec<Tensor> {
        let d = 8;
        let heads = 2;
        let mut r = rng(seed);
        let proj = AttnProjections {
            wq: Tensor::randn(&[d, d], 0.5, &mut r),
            wk: Tensor::randn(&[d, d], 0.5, &mut r),
            wv: Tensor::randn(&[d, d], 0.5, &mut r),
            wo: Tensor::randn(&[d, d], 0.5, &mut r),
        };
        // embed a repeated id pattern: same rows for same ids
        let table = Tensor::randn(&[16, d], 1.0, &mut r);
        let ids: Vec<usize> = (0..n).map(|i| 2 + (i % 13)).collect();
        let rep = repeat(&ids, k - 1);
        let x = Tensor::embedding_lookup(&table, &rep.ids);
        let out = attend(&x, &proj, &causal_mask(k * n), heads, 10_000.0);
        (0..heads)
            .map(|h| out.weights.slice(0, h, 1).reshape(&[k * n, k * n]))
            .collect()
    }

    #[test]
    fn classify_k1_single_lower_triangular() {
        for w in causal_weights(4, 1, 21) {
            let report = classify_blocks(&w, 4, 1, 1e-12);
            assert_eq!(report.classes, vec![vec![BlockClass::LowerTriangular]]);
            assert_eq!(report.share_bidirectional, 0.0);
        }
    }

    #[test]
    fn classify_n2_k2_pattern() {
        for w in causal_weights(2, 2, 22) {
            let report = classify_blocks(&w, 2, 2, 1e-12);
            assert_eq!(
                report.classes,
                vec![
                    vec![BlockClass::LowerTriangular, BlockClass::Zero],
                    vec![BlockClass::Dense, BlockClass::LowerTriangular],
                ]
            );
            assert_eq!(report.share_bidirectional, bidirectional_share(2));
        }
    }

    #[test]
    fn classify_n3_k3_nine_blocks() {
        for w in causal_weights(3, 3, 23) {
            let report = classify_blocks(&w, 3, 3, 1e-12);
            assert!(report.matches_expected_pattern(), "{:?}", report.classes);
            // 3 LT on the diagonal, 3 Dense below, 3 Zero above
            let flat: Vec<BlockClass> = report.classes.iter().flatten().copied().collect();
            assert_eq!(flat.iter().filter(|&&c| c == BlockClass::Zero).count(), 3);
            assert_eq!(flat.iter().filter(|&&c| c == BlockClass::Dense).count(), 3);
            assert_eq!(report.share_bidirectional, bidirectional_share(3));
        }
    }

    #[test]
    fn zero_blocks_are_bit_exact() {
        for w in causal_weights(3, 2, 24) {
            let v = w.to_vec();
            let seq = 6;
            for r in 0..3 {
                for c in 3..6 {
                    assert_eq!(v[r * seq + c], 0.0, "upper block entry not exact zero");
                }
            }
        }
    }

    #[test]
    fn extract_final_instance_slices() {
        // k=1: identity
        let x = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(extract_final_instance(&x, 2, 1).to_vec(), x.to_vec());
        // k=3, n=2: rows 4..5
        let x = Tensor::from_vec(&[6, 1], (0..6).map(|v| v as f64).collect());
        assert_eq!(extract_final_instance(&x, 2, 3).to_vec(), vec![4.0, 5.0]);
    }

    #[test]
    fn right_context_flows_only_with_repetition() {
        // With k=2, the final-instance output at position p must feel the
        // first-instance token at q > p; with k=1 that gradient is exactly 0.
        let (d, heads, n) = (8, 2, 4);
        let mut r = rng(31);
        let proj = AttnProjections {
            wq: Tensor::randn(&[d, d], 0.5, &mut r),
            wk: Tensor::randn(&[d, d], 0.5, &mut r),
            wv: Tensor::randn(&[d, d], 0.5, &mut r),
            wo: Tensor::randn(&[d, d], 0.5, &mut r),
        };
        let (p, q) = (1usize, 3usize);
        for (k, expect_flow) in [(1usize, false), (2usize, true)] {
            let emb = Tensor::randn(&[n, d], 1.0, &mut r).requires_grad(true);
            let parts: Vec<&Tensor> = (0..k).map(|_| &emb).collect();
            let x = Tensor::concat(&parts, 0);
            let out = attend(&x, &proj, &causal_mask(k * n), heads, 10_000.0);
            let fin = extract_final_instance(&out.values, n, k);
            backward(&fin.slice(0, p, 1).sum());
            let g = emb.grad().unwrap();
            let row = &g[q * d..(q + 1) * d];
            if expect_flow {
                assert!(row.iter().any(|&v| v.abs() > 1e-12), "no right-context flow at k=2");
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "causal leak at k=1: {row:?}");
            }
        }
    }

    #[test]
    fn repeated_forward_is_deterministic() {
        let a = causal_weights(3, 2, 77)[0].to_vec();
        let b = causal_weights(3, 2, 77)[0].to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn block_report_serializes_with_share() {
        let report = classify_blocks(&causal_weights(2, 2, 41)[0], 2, 2, 1e-12);
        let js = serde_json::to_string(&report).unwrap();
        assert!(js.contains("\"share_bidirectional\""));
        assert!(js.contains("\"LowerTriangular\""));
        let back: BlockReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back.classes, report.classes);
    }
}
