//! Rotary multi-head scaled dot-product attention with additive masks.
//!
//! Masks are {0, −∞} matrices added to the score logits before softmax, so
//! masked weights are exactly 0.0 (softmax subtracts the row max and
//! exp(−∞) = +0.0). A fully masked query row would make softmax undefined;
//! the [`AttentionMask`] invariant and the padding rule below make that
//! unrepresentable.

use crate::tensor::Tensor;

/// Additive attention mask: a [seq, seq] matrix whose entries are 0 (attend)
/// or −∞ (blocked). Every row keeps at least one 0 entry.
#[derive(Clone)]
pub struct AttentionMask {
    matrix: Tensor,
}

impl AttentionMask {
    /// Validates and wraps a mask matrix.
    pub fn new(matrix: Tensor) -> AttentionMask {
        let s = matrix.shape().to_vec();
        assert!(
            s.len() == 2 && s[0] == s[1],
            "AttentionMask: want square [seq, seq], got {s:?}"
        );
        {
            let d = matrix.data();
            for (i, row) in d.chunks_exact(s[1]).enumerate() {
                let mut any_open = false;
                for &v in row {
                    assert!(
                        v == 0.0 || v == f64::NEG_INFINITY,
                        "AttentionMask: entry must be 0 or -inf, found {v} in row {i}"
                    );
                    any_open |= v == 0.0;
                }
                assert!(any_open, "AttentionMask: row {i} is fully masked");
            }
        }
        AttentionMask { matrix }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn seq_len(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Lower triangle (diagonal included) open, strict upper triangle blocked.
pub fn causal_mask(seq_len: usize) -> AttentionMask {
    assert!(seq_len >= 1, "causal_mask: seq_len must be >= 1");
    let mut m = vec![f64::NEG_INFINITY; seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..=i {
            m[i * seq_len + j] = 0.0;
        }
    }
    AttentionMask::new(Tensor::from_vec(&[seq_len, seq_len], m))
}

/// All-zero mask: every position attends everywhere.
pub fn bidirectional_mask(seq_len: usize) -> AttentionMask {
    assert!(seq_len >= 1, "bidirectional_mask: seq_len must be >= 1");
    AttentionMask::new(Tensor::zeros(&[seq_len, seq_len]))
}

/// Makes keys at pad positions unattendable: pad columns go to −∞ for every
/// non-pad query row, and each pad query row attends only to itself (its
/// diagonal entry is forced open). Pad outputs are inert garbage by
/// construction; they are excluded from every loss and metric.
pub fn combine_padding(mask: &AttentionMask, pad_positions: &[bool]) -> AttentionMask {
    let s = mask.seq_len();
    assert_eq!(
        pad_positions.len(),
        s,
        "combine_padding: {} flags for seq (len {s})",
        pad_positions.len()
    );
    let mut m = mask.matrix.to_vec();
    for (i, &row_is_pad) in pad_positions.iter().enumerate() {
        let row = &mut m[i * s..(i + 1) * s];
        if row_is_pad {
            row.fill(f64::NEG_INFINITY);
            row[i] = 0.0;
        } else {
            for (j, v) in row.iter_mut().enumerate() {
                if pad_positions[j] {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    AttentionMask::new(Tensor::from_vec(&[s, s], m))
}

/// Rotary rotation of per-head features; re-exported from the tensor layer
/// where the differentiable kernel lives. `x` is [heads, seq, d_head] (any
/// leading dims work; positions index the second-to-last axis).
pub fn rope_rotate(x: &Tensor, base: f64) -> Tensor {
    x.rope_rotate(base)
}

/// Q/K/V/output projection weights for one attention layer, each [d, d].
#[derive(Clone)]
pub struct AttnProjections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// One attention application on a single sequence.
pub struct AttentionOutput {
    /// [seq, d_model] after the output projection.
    pub values: Tensor,
    /// [heads, seq, seq] post-softmax attention weights, for inspection.
    pub weights: Tensor,
}

/// Core multi-head attention on projected activations. `q`, `k`, `v` are
/// [batch, seq, d_model]; `mask` is [seq, seq] (shared) or [batch, seq, seq].
/// Per head: scores = rope(Q_h)·rope(K_h)ᵀ/√d_head + mask, weights = softmax,
/// out_h = weights·V_h; heads are concatenated on the feature axis. Returns
/// the pre-output-projection values and, when `capture` is set, the per-head
/// weight tensors.
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &Tensor,
    heads: usize,
    rope_base: f64,
    capture: bool,
) -> (Tensor, Option<Vec<Tensor>>) {
    let shape = q.shape().to_vec();
    assert_eq!(shape.len(), 3, "attention_core: want [batch, seq, d], got {shape:?}");
    let (_, seq, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(k.shape(), &shape[..], "attention_core: k shape {:?} != q shape {shape:?}", k.shape());
    assert_eq!(v.shape(), &shape[..], "attention_core: v shape {:?} != q shape {shape:?}", v.shape());
    assert!(
        heads >= 1 && d % heads == 0,
        "attention_core: d_model {d} not divisible by heads {heads}"
    );
    let ms = mask.shape();
    assert!(
        ms == [seq, seq] || (ms.len() == 3 && ms[0] == shape[0] && ms[1] == seq && ms[2] == seq),
        "attention_core: mask shape {ms:?} incompatible with seq {seq}"
    );
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut captured = capture.then(Vec::new);
    for h in 0..heads {
        let qh = q.slice(2, h * dh, dh).rope_rotate(rope_base);
        let kh = k.slice(2, h * dh, dh).rope_rotate(rope_base);
        let vh = v.slice(2, h * dh, dh);
        let scores = qh.matmul(&kh.transpose_last_two()).scale(scale).add(mask);
        let weights = scores.softmax_lastdim();
        outs.push(weights.matmul(&vh));
        if let Some(c) = captured.as_mut() {
            c.push(weights);
        }
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    (Tensor::concat(&refs, 2), captured)
}

/// Full single-sequence attention: projects `x` ([seq, d_model]) with the
/// given weights, runs [`attention_core`], applies the output projection,
/// and returns values plus the [heads, seq, seq] weight stack.
pub fn attend(
    x: &Tensor,
    proj: &AttnProjections,
    mask: &AttentionMask,
    heads: usize,
    rope_base: f64,
) -> AttentionOutput {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 2, "attend: want [seq, d_model], got {shape:?}");
    let (seq, d) = (shape[0], shape[1]);
    assert_eq!(
        mask.seq_len(),
        seq,
        "attend: mask for seq {} but input seq {seq}",
        mask.seq_len()
    );
    let xb = x.reshape(&[1, seq, d]);
    let q = xb.matmul(&proj.wq);
    let k = xb.matmul(&proj.wk);
    let v = xb.matmul(&proj.wv);
    let (pre, captured) = attention_core(&q, &k, &v, mask.matrix(), heads, rope_base, true);
    let values = pre.reshape(&[seq, d]).matmul(&proj.wo);
    let per_head = captured.expect("attention_core: capture requested");
    let refs: Vec<&Tensor> = per_head.iter().collect();
    let weights = Tensor::concat(&refs, 0); // [heads·1, seq, seq] since batch = 1
    AttentionOutput {
        values,
        weights: weights.reshape(&[heads, seq, seq]),
    }
}
