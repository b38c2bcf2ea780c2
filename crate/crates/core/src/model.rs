//! N-layer pre-norm decoder stack with per-layer mask configuration,
//! sequence repetition, early exit, LoRA adapters, and two heads: next-token
//! prediction (pretraining) and token classification (sequence labeling).
//!
//! Block layout (pre-norm residual):
//!   x ← x + Wo·attention(rope, mask)(q,k,v of RMSNorm(x)·g₁)
//!   x ← x + W_down·gelu(W_up·(RMSNorm(x)·g₂))
//! followed by a final RMSNorm before either head.
//!
//! Layers are 1-indexed at every interface (early exit at L runs layers
//! 1..L−1); the per-layer mask table is 0-indexed because it is a plain
//! vector. Both conventions are stated where they appear.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attention_core, bidirectional_mask, causal_mask, combine_padding};
use crate::repetition::{extract_final_instance, repeat, repeat_flags};
use crate::tensor::{dropout_key, Tensor};

/// Longest accepted original (pre-repetition) token sequence. Repetition may
/// exceed this; the limit protects the quadratic attention cost on inputs.
pub const MAX_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Config(msg.into()))
}

// ── Configuration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Desk-scale default: small enough that the full five-seed experiment
    /// grid trains in well under an hour on one CPU core, deep enough that
    /// middle unmasking and early exit have room to act (n_layers ≥ 6).
    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 32,
            heads: 4,
            n_layers: 6,
            d_ff: 128,
            rope_base: 10_000.0,
            dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers < 1 {
            return cfg_err("n_layers must be >= 1");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return cfg_err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !(self.d_model / self.heads).is_multiple_of(2) {
            return cfg_err("d_head must be even for rotary pairs");
        }
        if self.vocab_size < 2 || self.d_ff == 0 {
            return cfg_err("vocab_size must be >= 2 and d_ff positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return cfg_err("dropout_p must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Causal,
    Bidirectional,
}

/// Per-layer mask table, index 0 = first layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMaskConfig {
    pub per_layer: Vec<MaskKind>,
}

/// Experiment strategies. `Masked` is the plain causal baseline and is what
/// `Repeat` uses for its masks (repetition changes the input, not the mask).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Masked,
    Repeat,
    FullUnmask,
    MiddleUnmask,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Masked => "masked",
            Strategy::Repeat => "repeat",
            Strategy::FullUnmask => "full_unmask",
            Strategy::MiddleUnmask => "middle_unmask",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Strategy, String> {
        match s {
            "masked" => Ok(Strategy::Masked),
            "repeat" => Ok(Strategy::Repeat),
            "full_unmask" => Ok(Strategy::FullUnmask),
            "middle_unmask" => Ok(Strategy::MiddleUnmask),
            other => Err(format!(
                "unknown strategy '{other}' (expected masked | repeat | full_unmask | middle_unmask)"
            )),
        }
    }
}

/// The symmetric middle band of layers to unmask, as inclusive 0-indexed
/// bounds: N_u = ⌊N/3⌋ rounded down to even, lb = N/2 − 1 − N_u/2,
/// ub = N/2 + N_u/2. The band has N_u + 2 layers. Needs N ≥ 6 to leave a
/// meaningful interval.
pub fn middle_unmask_interval(n_layers: usize) -> Result<(usize, usize), ModelError> {
    if n_layers < 6 {
        return cfg_err(format!(
            "middle_unmask_interval: N = {n_layers} < 6 degenerates"
        ));
    }
    let mut n_u = n_layers / 3;
    n_u -= n_u % 2; // round down to even
    let lb = n_layers / 2 - 1 - n_u / 2;
    let ub = n_layers / 2 + n_u / 2;
    Ok((lb, ub))
}

/// Mask table for a strategy: Masked (and Repeat) → all causal, FullUnmask →
/// all bidirectional, MiddleUnmask → bidirectional exactly on the inclusive
/// interval from [`middle_unmask_interval`].
pub fn build_mask_config(strategy: Strategy, n_layers: usize) -> Result<LayerMaskConfig, ModelError> {
    let per_layer = match strategy {
        Strategy::Masked | Strategy::Repeat => vec![MaskKind::Causal; n_layers],
        Strategy::FullUnmask => vec![MaskKind::Bidirectional; n_layers],
        Strategy::MiddleUnmask => {
            let (lb, ub) = middle_unmask_interval(n_layers)?;
            (0..n_layers)
                .map(|i| {
                    if (lb..=ub).contains(&i) {
                        MaskKind::Bidirectional
                    } else {
                        MaskKind::Causal
                    }
                })
                .collect()
        }
    };
    Ok(LayerMaskConfig { per_layer })
}

// ── LoRA ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

pub const LORA_ALL_TARGETS: [LoraTarget; 4] =
    [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O];

/// Low-rank adapter on one projection: effective output is
/// x·W + (alpha/rank) · dropout(x) · A · B. B starts at zero, so a freshly
/// attached adapter is exactly the identity on the base model.
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraMeta {
    pub targets: Vec<LoraTarget>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

// ── Model ──────────────────────────────────────────────────────────────

struct DecoderBlock {
    norm1_g: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    lora: BTreeMap<&'static str, LoraAdapter>, // keyed "q"/"k"/"v"/"o"
    norm2_g: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

pub struct SLModel {
    pub cfg: ModelConfig,
    pub n_labels: usize,
    emb: Tensor,
    blocks: Vec<DecoderBlock>,
    final_norm_g: Tensor,
    cls_w: Tensor,
    cls_b: Tensor,
    lm_w: Tensor,
    lm_b: Tensor,
    lora_meta: Option<LoraMeta>,
    exit_layer: Option<usize>, // 1-indexed L; forward runs layers 1..L−1
    train_mode: Cell<bool>,
    dropout_stream: Cell<u64>,
    dropout_call: Cell<u64>,
}

fn target_key(t: LoraTarget) -> &'static str {
    match t {
        LoraTarget::Q => "q",
        LoraTarget::K => "k",
        LoraTarget::V => "v",
        LoraTarget::O => "o",
    }
}

impl SLModel {
    /// Fresh model with Xavier-normal weights (std = sqrt(2/(fan_in+fan_out)),
    /// variance-preserving at any width), unit norm gains, zero biases.
    /// Deterministic in `seed`.
    pub fn new(cfg: ModelConfig, n_labels: usize, seed: u64) -> Result<SLModel, ModelError> {
        cfg.validate()?;
        if n_labels < 1 {
            return cfg_err("n_labels must be >= 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let xavier = |rows: usize, cols: usize| (2.0 / (rows + cols) as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| DecoderBlock {
                norm1_g: Tensor::full(&[d], 1.0).requires_grad(true),
                wq: Tensor::randn(&[d, d], xavier(d, d), &mut rng).requires_grad(true),
                wk: Tensor::randn(&[d, d], xavier(d, d), &mut rng).requires_grad(true),
                wv: Tensor::randn(&[d, d], xavier(d, d), &mut rng).requires_grad(true),
                wo: Tensor::randn(&[d, d], xavier(d, d), &mut rng).requires_grad(true),
                lora: BTreeMap::new(),
                norm2_g: Tensor::full(&[d], 1.0).requires_grad(true),
                w_up: Tensor::randn(&[d, cfg.d_ff], xavier(d, cfg.d_ff), &mut rng)
                    .requires_grad(true),
                w_down: Tensor::randn(&[cfg.d_ff, d], xavier(cfg.d_ff, d), &mut rng)
                    .requires_grad(true),
            })
            .collect();
        Ok(SLModel {
            emb: Tensor::randn(&[cfg.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng)
                .requires_grad(true),
            blocks,
            final_norm_g: Tensor::full(&[d], 1.0).requires_grad(true),
            cls_w: Tensor::randn(&[d, n_labels], xavier(d, n_labels), &mut rng)
                .requires_grad(true),
            cls_b: Tensor::zeros(&[n_labels]).requires_grad(true),
            lm_w: Tensor::randn(&[d, cfg.vocab_size], xavier(d, cfg.vocab_size), &mut rng)
                .requires_grad(true),
            lm_b: Tensor::zeros(&[cfg.vocab_size]).requires_grad(true),
            lora_meta: None,
            exit_layer: None,
            train_mode: Cell::new(false),
            dropout_stream: Cell::new(0),
            dropout_call: Cell::new(0),
            cfg,
            n_labels,
        })
    }

    // ── Parameter registry ──────────────────────────────────────────────

    /// All named parameters in a stable order (checkpoint and optimizer
    /// state both key off this order).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![("emb".into(), self.emb.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{i}.norm1_g"), b.norm1_g.clone()));
            out.push((format!("layer{i}.wq"), b.wq.clone()));
            out.push((format!("layer{i}.wk"), b.wk.clone()));
            out.push((format!("layer{i}.wv"), b.wv.clone()));
            out.push((format!("layer{i}.wo"), b.wo.clone()));
            for (key, ad) in &b.lora {
                out.push((format!("layer{i}.lora_{key}.a"), ad.a.clone()));
                out.push((format!("layer{i}.lora_{key}.b"), ad.b.clone()));
            }
            out.push((format!("layer{i}.norm2_g"), b.norm2_g.clone()));
            out.push((format!("layer{i}.w_up"), b.w_up.clone()));
            out.push((format!("layer{i}.w_down"), b.w_down.clone()));
        }
        out.push(("final_norm_g".into(), self.final_norm_g.clone()));
        out.push(("cls_w".into(), self.cls_w.clone()));
        out.push(("cls_b".into(), self.cls_b.clone()));
        out.push(("lm_w".into(), self.lm_w.clone()));
        out.push(("lm_b".into(), self.lm_b.clone()));
        out
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .filter(|(_, t)| t.needs_grad())
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }

    /// Copies all parameter values out (best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snap: &[Vec<f64>]) {
        let params = self.params();
        assert_eq!(params.len(), snap.len(), "restore: snapshot layout mismatch");
        for ((_, t), s) in params.iter().zip(snap) {
            t.data_mut().copy_from_slice(s);
        }
    }

    // ── Mode switches ───────────────────────────────────────────────────

    pub fn set_train_mode(&self, on: bool) {
        self.train_mode.set(on);
    }

    /// Seeds the dropout stream for the next forward passes; each dropout
    /// call inside a forward consumes one counter slot.
    pub fn set_dropout_stream(&self, seed: u64, step: u64) {
        self.dropout_stream.set(dropout_key(seed, step, 0));
        self.dropout_call.set(0);
    }

    fn next_dropout_key(&self) -> u64 {
        let call = self.dropout_call.get();
        self.dropout_call.set(call + 1);
        dropout_key(self.dropout_stream.get(), 1, call)
    }

    /// Early exit at 1-indexed layer L: forward passes use layers 1..L−1
    /// only. Requires 2 ≤ L ≤ N.
    pub fn set_early_exit(&mut self, l: usize) -> Result<(), ModelError> {
        if l < 2 || l > self.cfg.n_layers {
            return cfg_err(format!(
                "early exit L = {l} outside 2..={}",
                self.cfg.n_layers
            ));
        }
        self.exit_layer = Some(l);
        Ok(())
    }

    pub fn clear_early_exit(&mut self) {
        self.exit_layer = None;
    }

    pub fn exit_layer(&self) -> Option<usize> {
        self.exit_layer
    }

    /// Number of decoder layers a forward pass actually runs.
    pub fn active_layers(&self) -> usize {
        match self.exit_layer {
            Some(l) => l - 1,
            None => self.cfg.n_layers,
        }
    }

    // ── LoRA ────────────────────────────────────────────────────────────

    /// Attaches rank-`rank` adapters to the chosen projections of every
    /// layer, freezes everything except the adapters and the classification
    /// head. B = 0 at init so outputs are unchanged until training moves it.
    pub fn attach_lora(
        &mut self,
        targets: &[LoraTarget],
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        seed: u64,
    ) -> Result<(), ModelError> {
        if self.lora_meta.is_some() {
            return cfg_err("LoRA already attached");
        }
        if targets.is_empty() {
            return cfg_err("attach_lora: no targets");
        }
        if rank == 0 {
            return cfg_err("attach_lora: rank must be >= 1");
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return cfg_err("attach_lora: dropout_p must be in [0, 1)");
        }
        let d = self.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LORA_SEED_SALT);
        for b in self.blocks.iter_mut() {
            for &t in targets {
                let key = target_key(t);
                if b.lora.contains_key(key) {
                    return cfg_err(format!("duplicate LoRA target {key}"));
                }
                b.lora.insert(
                    key,
                    LoraAdapter {
                        rank,
                        alpha,
                        dropout_p,
                        a: Tensor::randn(&[d, rank], (2.0 / (d + rank) as f64).sqrt(), &mut rng)
                            .requires_grad(true),
                        b: Tensor::zeros(&[rank, d]).requires_grad(true),
                    },
                );
            }
        }
        // freeze the base; adapters and the classification head stay live
        self.emb.set_requires_grad(false);
        for b in &self.blocks {
            for t in [&b.norm1_g, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm2_g, &b.w_up, &b.w_down] {
                t.set_requires_grad(false);
            }
        }
        self.final_norm_g.set_requires_grad(false);
        self.lm_w.set_requires_grad(false);
        self.lm_b.set_requires_grad(false);
        self.lora_meta = Some(LoraMeta {
            targets: targets.to_vec(),
            rank,
            alpha,
            dropout_p,
        });
        Ok(())
    }

    pub fn lora_meta(&self) -> Option<&LoraMeta> {
        self.lora_meta.as_ref()
    }

    /// x·W plus the adapter path when one is attached to this projection.
    fn project(&self, x: &Tensor, w: &Tensor, adapter: Option<&LoraAdapter>) -> Tensor {
        let base = x.matmul(w);
        match adapter {
            None => base,
            Some(ad) => {
                let inp = if self.train_mode.get() && ad.dropout_p > 0.0 {
                    x.dropout(ad.dropout_p, self.next_dropout_key())
                } else {
                    x.clone()
                };
                let update = inp
                    .matmul(&ad.a)
                    .matmul(&ad.b)
                    .scale(ad.alpha / ad.rank as f64);
                base.add(&update)
            }
        }
    }

    // ── Forward passes ──────────────────────────────────────────────────

    /// Shared decoder trunk. `ids_flat` is a [batch·seq] id list (already
    /// repeated and padded), `masks` one [batch, seq, seq] tensor per layer
    /// kind as produced by [`SLModel::build_layer_masks`]. Returns final
    /// hidden states [batch, seq, d] and, when `capture` is set, per-layer
    /// per-head attention weights.
    #[allow(clippy::type_complexity)]
    fn body(
        &self,
        ids_flat: &[usize],
        batch: usize,
        seq: usize,
        layer_masks: &[Tensor],
        capture: bool,
    ) -> (Tensor, Option<Vec<Vec<Tensor>>>) {
        assert_eq!(ids_flat.len(), batch * seq, "body: id count mismatch");
        let d = self.cfg.d_model;
        let active = layer_masks.len();
        assert!(active <= self.cfg.n_layers, "body: more masks than layers");
        let mut x = Tensor::embedding_lookup(&self.emb, ids_flat).reshape(&[batch, seq, d]);
        let mut all_weights = capture.then(Vec::new);
        let dropout_on = self.train_mode.get() && self.cfg.dropout_p > 0.0;
        for (blk, mask) in self.blocks[..active].iter().zip(layer_masks) {
            let xn = x.rms_normalize_lastdim().multiply(&blk.norm1_g);
            let q = self.project(&xn, &blk.wq, blk.lora.get("q"));
            let k = self.project(&xn, &blk.wk, blk.lora.get("k"));
            let v = self.project(&xn, &blk.wv, blk.lora.get("v"));
            let (pre, cap) =
                attention_core(&q, &k, &v, mask, self.cfg.heads, self.cfg.rope_base, capture);
            let mut attn = self.project(&pre, &blk.wo, blk.lora.get("o"));
            if dropout_on {
                attn = attn.dropout(self.cfg.dropout_p, self.next_dropout_key());
            }
            x = x.add(&attn);
            let hn = x.rms_normalize_lastdim().multiply(&blk.norm2_g);
            let mut ff = hn.matmul(&blk.w_up).gelu().matmul(&blk.w_down);
            if dropout_on {
                ff = ff.dropout(self.cfg.dropout_p, self.next_dropout_key());
            }
            x = x.add(&ff);
            if let Some(ws) = all_weights.as_mut() {
                ws.push(cap.expect("attention_core capture"));
            }
        }
        let hid = x.rms_normalize_lastdim().multiply(&self.final_norm_g);
        (hid, all_weights)
    }

    /// One [batch, seq, seq] additive mask for each of the first `active`
    /// layers: the layer-kind base combined with per-sentence padding.
    /// `pad_flags` are the already-repeated per-position flags. Identical
    /// layer kinds share one tensor (handle clone).
    fn build_layer_masks(
        &self,
        mask_config: &LayerMaskConfig,
        pad_flags: &[Vec<bool>],
        seq: usize,
        active: usize,
    ) -> Vec<Tensor> {
        assert_eq!(
            mask_config.per_layer.len(),
            self.cfg.n_layers,
            "mask config covers {} layers, model has {}",
            mask_config.per_layer.len(),
            self.cfg.n_layers
        );
        let batch = pad_flags.len();
        let mut by_kind: BTreeMap<&'static str, Tensor> = BTreeMap::new();
        let build = |kind: MaskKind| -> Tensor {
            let base = match kind {
                MaskKind::Causal => causal_mask(seq),
                MaskKind::Bidirectional => bidirectional_mask(seq),
            };
            let mut data = Vec::with_capacity(batch * seq * seq);
            for flags in pad_flags {
                let combined = combine_padding(&base, flags);
                data.extend_from_slice(&combined.matrix().data());
            }
            Tensor::from_vec(&[batch, seq, seq], data)
        };
        for &kind in &mask_config.per_layer[..active] {
            let key = match kind {
                MaskKind::Causal => "causal",
                MaskKind::Bidirectional => "bidirectional",
            };
            if !by_kind.contains_key(key) {
                let t = build(kind);
                by_kind.insert(key, t);
            }
        }
        mask_config.per_layer[..active]
            .iter()
            .map(|kind| {
                let key = match kind {
                    MaskKind::Causal => "causal",
                    MaskKind::Bidirectional => "bidirectional",
                };
                by_kind[key].clone()
            })
            .collect()
    }

    /// Batched sequence-labeling forward. Every sentence must already be
    /// padded to the common length `seq`; repetition by `r` happens inside
    /// (pads repeated too). Returns final-instance logits
    /// [batch, seq, n_labels].
    pub fn forward_sl_batch(
        &self,
        ids: &[Vec<usize>],
        pad_flags: &[Vec<bool>],
        mask_config: &LayerMaskConfig,
        r: usize,
    ) -> Tensor {
        let batch = ids.len();
        assert!(batch > 0, "forward_sl_batch: empty batch");
        let seq = ids[0].len();
        assert!(seq > 0 && seq <= MAX_LEN, "forward_sl_batch: seq {seq} outside 1..={MAX_LEN}");
        let k = r + 1;
        let mut flat = Vec::with_capacity(batch * seq * k);
        let mut rep_pads = Vec::with_capacity(batch);
        for (row, pads) in ids.iter().zip(pad_flags) {
            assert_eq!(row.len(), seq, "forward_sl_batch: ragged batch");
            assert_eq!(pads.len(), seq, "forward_sl_batch: pad flags misaligned");
            flat.extend_from_slice(&repeat(row, r).ids);
            rep_pads.push(repeat_flags(pads, r));
        }
        let rseq = seq * k;
        let masks = self.build_layer_masks(mask_config, &rep_pads, rseq, self.active_layers());
        let (hid, _) = self.body(&flat, batch, rseq, &masks, false);
        let logits = self
            .project_head(&hid)
            .reshape(&[batch * rseq, self.n_labels]);
        // per-sentence final instance: rows (b·k + k−1)·seq .. (b·k + k)·seq
        let per_sentence: Vec<Tensor> = (0..batch)
            .map(|b| {
                extract_final_instance(
                    &logits.slice(0, b * rseq, rseq),
                    seq,
                    k,
                )
            })
            .collect();
        let refs: Vec<&Tensor> = per_sentence.iter().collect();
        Tensor::concat(&refs, 0).reshape(&[batch, seq, self.n_labels])
    }

    fn project_head(&self, hid: &Tensor) -> Tensor {
        hid.matmul(&self.cls_w).add(&self.cls_b)
    }

    /// Single-sequence labeling forward: final-instance logits
    /// [n, n_labels].
    pub fn forward_sl(
        &self,
        ids: &[usize],
        pad_flags: &[bool],
        mask_config: &LayerMaskConfig,
        r: usize,
    ) -> Tensor {
        let n = ids.len();
        self.forward_sl_batch(
            &[ids.to_vec()],
            &[pad_flags.to_vec()],
            mask_config,
            r,
        )
        .reshape(&[n, self.n_labels])
    }

    /// Like [`SLModel::forward_sl`] but starting from an explicit embedding
    /// matrix [n, d] instead of token ids, so sensitivity tests can
    /// differentiate with respect to the input. Repetition concatenates the
    /// embedding block k times, exactly what id-level repetition produces.
    pub fn forward_sl_from_embeddings(
        &self,
        emb: &Tensor,
        pad_flags: &[bool],
        mask_config: &LayerMaskConfig,
        r: usize,
    ) -> Tensor {
        let shape = emb.shape().to_vec();
        assert!(
            shape.len() == 2 && shape[1] == self.cfg.d_model,
            "forward_sl_from_embeddings: want [n, d_model], got {shape:?}"
        );
        let n = shape[0];
        let k = r + 1;
        let parts: Vec<&Tensor> = (0..k).map(|_| emb).collect();
        let x = Tensor::concat(&parts, 0).reshape(&[1, k * n, self.cfg.d_model]);
        let rep_pads = vec![repeat_flags(pad_flags, r)];
        let masks = self.build_layer_masks(mask_config, &rep_pads, k * n, self.active_layers());
        let hid = self.body_from_embeddings(&x, &masks);
        let logits = self.project_head(&hid).reshape(&[k * n, self.n_labels]);
        extract_final_instance(&logits, n, k)
    }

    /// Trunk variant that takes pre-built embeddings (no lookup).
    fn body_from_embeddings(&self, x0: &Tensor, layer_masks: &[Tensor]) -> Tensor {
        let active = layer_masks.len();
        let mut x = x0.clone();
        let dropout_on = self.train_mode.get() && self.cfg.dropout_p > 0.0;
        for (blk, mask) in self.blocks[..active].iter().zip(layer_masks) {
            let xn = x.rms_normalize_lastdim().multiply(&blk.norm1_g);
            let q = self.project(&xn, &blk.wq, blk.lora.get("q"));
            let k = self.project(&xn, &blk.wk, blk.lora.get("k"));
            let v = self.project(&xn, &blk.wv, blk.lora.get("v"));
            let (pre, _) =
                attention_core(&q, &k, &v, mask, self.cfg.heads, self.cfg.rope_base, false);
            let mut attn = self.project(&pre, &blk.wo, blk.lora.get("o"));
            if dropout_on {
                attn = attn.dropout(self.cfg.dropout_p, self.next_dropout_key());
            }
            x = x.add(&attn);
            let hn = x.rms_normalize_lastdim().multiply(&blk.norm2_g);
            let mut ff = hn.matmul(&blk.w_up).gelu().matmul(&blk.w_down);
            if dropout_on {
                ff = ff.dropout(self.cfg.dropout_p, self.next_dropout_key());
            }
            x = x.add(&ff);
        }
        x.rms_normalize_lastdim().multiply(&self.final_norm_g)
    }

    /// Batched next-token logits [batch, seq, vocab] under all-causal
    /// masking at full depth (early exit never applies to the LM head).
    pub fn forward_lm_batch(&self, ids: &[Vec<usize>], pad_flags: &[Vec<bool>]) -> Tensor {
        let batch = ids.len();
        assert!(batch > 0, "forward_lm_batch: empty batch");
        let seq = ids[0].len();
        assert!(seq > 0 && seq <= MAX_LEN, "forward_lm_batch: seq {seq} outside 1..={MAX_LEN}");
        let mut flat = Vec::with_capacity(batch * seq);
        for (row, pads) in ids.iter().zip(pad_flags) {
            assert_eq!(row.len(), seq, "forward_lm_batch: ragged batch");
            assert_eq!(pads.len(), seq, "forward_lm_batch: pad flags misaligned");
            flat.extend_from_slice(row);
        }
        let all_causal = LayerMaskConfig {
            per_layer: vec![MaskKind::Causal; self.cfg.n_layers],
        };
        let masks = self.build_layer_masks(&all_causal, pad_flags, seq, self.cfg.n_layers);
        let (hid, _) = self.body(&flat, batch, seq, &masks, false);
        hid.matmul(&self.lm_w)
            .add(&self.lm_b)
            .reshape(&[batch, seq, self.cfg.vocab_size])
    }

    /// Single-sequence next-token logits [n, vocab].
    pub fn forward_lm(&self, ids: &[usize], pad_flags: &[bool]) -> Tensor {
        let n = ids.len();
        self.forward_lm_batch(&[ids.to_vec()], &[pad_flags.to_vec()])
            .reshape(&[n, self.cfg.vocab_size])
    }

    /// Inspection forward on one sequence: final-instance logits plus
    /// per-layer, per-head attention matrices [k·n, k·n].
    #[allow(clippy::type_complexity)]
    pub fn forward_inspect(
        &self,
        ids: &[usize],
        pad_flags: &[bool],
        mask_config: &LayerMaskConfig,
        r: usize,
    ) -> (Tensor, Vec<Vec<Tensor>>) {
        let n = ids.len();
        assert!(n > 0 && n <= MAX_LEN, "forward_inspect: n {n} outside 1..={MAX_LEN}");
        let k = r + 1;
        let rep = repeat(ids, r);
        let rep_pads = vec![repeat_flags(pad_flags, r)];
        let rseq = n * k;
        let masks = self.build_layer_masks(mask_config, &rep_pads, rseq, self.active_layers());
        let (hid, weights) = self.body(&rep.ids, 1, rseq, &masks, true);
        let logits = self.project_head(&hid).reshape(&[rseq, self.n_labels]);
        let final_logits = extract_final_instance(&logits, n, k);
        let weights = weights
            .expect("capture on")
            .into_iter()
            .map(|heads| {
                heads
                    .into_iter()
                    .map(|w| w.reshape(&[rseq, rseq]))
                    .collect()
            })
            .collect();
        (final_logits, weights)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    /// Writes config plus all named parameters as JSON with magic "BDLAB1".
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let params: BTreeMap<String, Vec<f64>> = self
            .params()
            .into_iter()
            .map(|(name, t)| (name, t.to_vec()))
            .collect();
        let ck = Checkpoint {
            magic: MAGIC.to_string(),
            config: self.cfg.clone(),
            n_labels: self.n_labels,
            lora: self.lora_meta.clone(),
            params,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ck)
            .map_err(|e| ModelError::Checkpoint(format!("serialize: {e}")))?;
        Ok(())
    }

    /// Loads a checkpoint, rebuilding LoRA adapters when the file carries
    /// them. Parameter sets must match the rebuilt model exactly.
    pub fn load(path: &Path) -> Result<SLModel, ModelError> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| ModelError::Checkpoint(format!("parse: {e}")))?;
        if ck.magic != MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic '{}', want '{MAGIC}'",
                ck.magic
            )));
        }
        let mut model = SLModel::new(ck.config, ck.n_labels, 0)?;
        if let Some(meta) = &ck.lora {
            model.attach_lora(&meta.targets, meta.rank, meta.alpha, meta.dropout_p, 0)?;
        }
        let params = model.params();
        if params.len() != ck.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count mismatch: model {} vs file {}",
                params.len(),
                ck.params.len()
            )));
        }
        for (name, t) in params {
            let vals = ck.params.get(&name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing parameter '{name}'"))
            })?;
            if vals.len() != t.numel() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter '{name}': {} values for shape {:?}",
                    vals.len(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(vals);
        }
        Ok(model)
    }
}

const MAGIC: &str = "BDLAB1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    config: ModelConfig,
    n_labels: usize,
    lora: Option<LoraMeta>,
    params: BTreeMap<String, Vec<f64>>,
}

// Decorrelates the LoRA init stream from the base init stream.
const LORA_SEED_SALT: u64 = 0x4c6f_5261_4c6f_5261;
