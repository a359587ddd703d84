//! Deterministic decoder-only toy model.
//!
//! The model exists to drive the caches, staged attention, and beam search
//! end to end: weights are seeded pseudo-randomly (bit-reproducible, with
//! a frozen checksum in the tests), positions are mixed in rotary-style so
//! they ride with stored KV through cache reorders, and every forward pass
//! is a pure function of `(weights, caches, inputs)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_shared, attend_unshared, merge_final, AttentionConfig, AttentionWorkspace,
    PartialAttention,
};
use crate::error::{Error, Result};
use crate::kvcache::paged::PagedKvCache;
use crate::kvcache::{SharedKvCache, UnsharedKvCache};

/// Feed-forward width multiplier (hidden -> ff).
const FF_MULT: usize = 2;
const RMS_EPS: f32 = 1e-5;
const ROPE_BASE: f64 = 10000.0;

fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_head_dim() -> usize {
    16
}
fn default_vocab() -> usize {
    256
}
fn default_tile() -> usize {
    16
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: default_layers(),
            heads: default_heads(),
            head_dim: default_head_dim(),
            vocab_size: default_vocab(),
            tile_size: default_tile(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ff(&self) -> usize {
        self.hidden() * FF_MULT
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("model dims must be nonzero: {self:?}")));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// All projections stored `[out][in]` row-major.
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub(crate) embed: Vec<f32>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_norm: Vec<f32>,
    pub(crate) lm_head: Vec<f32>,
}

fn unit_float(rng: &mut ChaCha8Rng) -> f32 {
    // 24 mantissa bits of the next word give an exact dyadic in [0, 1);
    // the construction is platform-independent.
    ((rng.next_u32() >> 8) as f32) * (1.0 / 16_777_216.0)
}

fn fill_symmetric(rng: &mut ChaCha8Rng, buf: &mut [f32], amplitude: f32) {
    for x in buf.iter_mut() {
        *x = (2.0 * unit_float(rng) - 1.0) * amplitude;
    }
}

impl Weights {
    /// Seeded initialization; the same seed yields bit-identical weights on
    /// every platform.
    pub fn init(cfg: &ModelConfig) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hidden = cfg.hidden();
        let ff = cfg.ff();
        let a_h = 1.0 / (hidden as f32).sqrt();
        let a_ff = 1.0 / (ff as f32).sqrt();

        let mut embed = vec![0.0; cfg.vocab_size * hidden];
        fill_symmetric(&mut rng, &mut embed, 0.5);

        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut wq = vec![0.0; hidden * hidden];
            let mut wk = vec![0.0; hidden * hidden];
            let mut wv = vec![0.0; hidden * hidden];
            let mut wo = vec![0.0; hidden * hidden];
            let mut w_up = vec![0.0; ff * hidden];
            let mut w_down = vec![0.0; hidden * ff];
            fill_symmetric(&mut rng, &mut wq, a_h);
            fill_symmetric(&mut rng, &mut wk, a_h);
            fill_symmetric(&mut rng, &mut wv, a_h);
            fill_symmetric(&mut rng, &mut wo, a_h);
            fill_symmetric(&mut rng, &mut w_up, a_h);
            fill_symmetric(&mut rng, &mut w_down, a_ff);
            layers.push(LayerWeights {
                attn_norm: vec![1.0; hidden],
                wq,
                wk,
                wv,
                wo,
                mlp_norm: vec![1.0; hidden],
                w_up,
                w_down,
            });
        }

        let mut lm_head = vec![0.0; cfg.vocab_size * hidden];
        fill_symmetric(&mut rng, &mut lm_head, a_h);

        Weights {
            embed,
            layers,
            final_norm: vec![1.0; hidden],
            lm_head,
        }
    }

    /// FNV-1a over the little-endian bytes of every parameter, in
    /// definition order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |xs: &[f32]| {
            for x in xs {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&self.embed);
        for l in &self.layers {
            eat(&l.attn_norm);
            eat(&l.wq);
            eat(&l.wk);
            eat(&l.wv);
            eat(&l.wo);
            eat(&l.mlp_norm);
            eat(&l.w_up);
            eat(&l.w_down);
        }
        eat(&self.final_norm);
        eat(&self.lm_head);
        h
    }
}

// ── Elementwise helpers ─────────────────────────────────────────────

pub(crate) fn rmsnorm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * r * gain[i];
    }
}

/// `y = W x` with `W` stored `[out][in]`.
pub(crate) fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = 0f32;
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        *y = acc;
    }
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotary position mixing over `[heads][head_dim]`, pairwise.
pub(crate) fn rope(x: &mut [f32], heads: usize, head_dim: usize, pos: usize) {
    for h in 0..heads {
        let row = &mut x[h * head_dim..(h + 1) * head_dim];
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos as f32 - b * sin as f32;
            row[2 * i + 1] = a * sin as f32 + b * cos as f32;
        }
    }
}

/// Numerically stable log-softmax: max-subtracted, exp of the outputs sums
/// to one.
pub fn log_softmax(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for &x in row {
        sum += ((x - max) as f64).exp();
    }
    let log_z = sum.ln() as f32;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = x - max - log_z;
    }
}

// ── Workspace ───────────────────────────────────────────────────────

/// Per-request scratch for forward passes; allocated once, reused across
/// steps.
#[derive(Debug, Default)]
pub struct ModelWorkspace {
    pub attn: AttentionWorkspace,
    x: Vec<f32>,
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn_out: Vec<f32>,
    proj: Vec<f32>,
    up: Vec<f32>,
    p_shared: Option<PartialAttention>,
    p_unshared: Option<PartialAttention>,
    gather_k: Vec<f32>,
    gather_v: Vec<f32>,
    prefill_k: Vec<Vec<f32>>,
    prefill_v: Vec<Vec<f32>>,
}

impl ModelWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn take_partials(&mut self, bw: usize, heads: usize, head_dim: usize) -> (PartialAttention, PartialAttention) {
        let take = |p: &mut Option<PartialAttention>| match p.take() {
            Some(p) if p.beam_width() == bw && p.heads() == heads && p.head_dim() == head_dim => p,
            _ => PartialAttention::empty(bw, heads, head_dim),
        };
        (take(&mut self.p_shared), take(&mut self.p_unshared))
    }

    fn return_partials(&mut self, shared: PartialAttention, unshared: PartialAttention) {
        self.p_shared = Some(shared);
        self.p_unshared = Some(unshared);
    }
}

// ── Model ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
    attn_cfg: AttentionConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let attn_cfg = AttentionConfig::new(cfg.heads, cfg.head_dim, cfg.tile_size)?;
        Ok(Model {
            weights: Weights::init(&cfg),
            cfg,
            attn_cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn attention_config(&self) -> &AttentionConfig {
        &self.attn_cfg
    }

    pub(crate) fn embed_row(&self, tok: u32) -> Result<&[f32]> {
        let hidden = self.cfg.hidden();
        if tok as usize >= self.cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {tok} out of range (vocab size {})",
                self.cfg.vocab_size
            )));
        }
        Ok(&self.weights.embed[tok as usize * hidden..(tok as usize + 1) * hidden])
    }

    pub(crate) fn layer_weights(&self, li: usize) -> &LayerWeights {
        &self.weights.layers[li]
    }

    pub(crate) fn final_norm(&self) -> &[f32] {
        &self.weights.final_norm
    }

    pub(crate) fn lm_head(&self) -> &[f32] {
        &self.weights.lm_head
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} out of range (vocab size {})",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Prefill: fill the shared cache for all layers and return the logits
    /// at the final prompt position.
    pub fn prefill(
        &self,
        prompt: &[u32],
        shared: &mut SharedKvCache,
        ws: &mut ModelWorkspace,
    ) -> Result<Vec<f32>> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        self.check_tokens(prompt)?;
        if shared.filled(0) != 0 {
            return Err(Error::State("shared cache must be empty before prefill".into()));
        }
        if shared.prompt_len() != prompt.len() {
            return Err(Error::Shape(format!(
                "shared cache sized for {} positions, prompt has {}",
                shared.prompt_len(),
                prompt.len()
            )));
        }
        let hidden = self.cfg.hidden();
        let mut last_logits = vec![0.0; self.cfg.vocab_size];
        for (pos, &tok) in prompt.iter().enumerate() {
            let x = self.forward_position(tok, pos, shared, ws)?;
            if pos + 1 == prompt.len() {
                matvec(&self.weights.lm_head, &x[..hidden], &mut last_logits);
            }
        }
        debug_assert!(shared.is_complete());
        Ok(last_logits)
    }

    /// One prompt position through all layers, appending its KV to the
    /// shared cache and attending causally over the filled prefix.
    fn forward_position(
        &self,
        tok: u32,
        pos: usize,
        shared: &mut SharedKvCache,
        ws: &mut ModelWorkspace,
    ) -> Result<Vec<f32>> {
        let hidden = self.cfg.hidden();
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim;
        ws.x.resize(hidden, 0.0);
        ws.normed.resize(hidden, 0.0);
        ws.q.resize(hidden, 0.0);
        ws.k.resize(hidden, 0.0);
        ws.v.resize(hidden, 0.0);
        ws.attn_out.resize(hidden, 0.0);
        ws.proj.resize(hidden, 0.0);
        ws.up.resize(self.cfg.ff(), 0.0);

        let emb = &self.weights.embed[tok as usize * hidden..(tok as usize + 1) * hidden];
        ws.x.copy_from_slice(emb);
        for (li, lw) in self.weights.layers.iter().enumerate() {
            rmsnorm(&ws.x, &lw.attn_norm, &mut ws.normed);
            matvec(&lw.wq, &ws.normed, &mut ws.q);
            matvec(&lw.wk, &ws.normed, &mut ws.k);
            matvec(&lw.wv, &ws.normed, &mut ws.v);
            rope(&mut ws.q, heads, d, pos);
            rope(&mut ws.k, heads, d, pos);
            shared.push_position(li, &ws.k, &ws.v)?;

            // Causal attention over the filled prefix (inclusive).
            let (kc, vc) = shared.layer(li);
            for h in 0..heads {
                let q_row = &ws.q[h * d..(h + 1) * d];
                let mut m = f32::NEG_INFINITY;
                let mut s = 0f32;
                let acc = &mut ws.attn_out[h * d..(h + 1) * d];
                acc.fill(0.0);
                for p in 0..=pos {
                    let off = (p * heads + h) * d;
                    let mut z = 0f32;
                    for j in 0..d {
                        z += q_row[j] * kc[off + j];
                    }
                    z *= self.attn_cfg.scale;
                    if z > m {
                        let factor = if m == f32::NEG_INFINITY { 0.0 } else { (m - z).exp() };
                        s *= factor;
                        for a in acc.iter_mut() {
                            *a *= factor;
                        }
                        m = z;
                    }
                    let e = (z - m).exp();
                    s += e;
                    for j in 0..d {
                        acc[j] += e * vc[off + j];
                    }
                }
                let inv = 1.0 / s;
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
            matvec(&lw.wo, &ws.attn_out, &mut ws.proj);
            for i in 0..hidden {
                ws.x[i] += ws.proj[i];
            }
            self.mlp(lw, ws, hidden);
        }
        let mut out = vec![0.0; hidden];
        rmsnorm(&ws.x, &self.weights.final_norm, &mut out);
        Ok(out)
    }

    fn mlp(&self, lw: &LayerWeights, ws: &mut ModelWorkspace, hidden: usize) {
        rmsnorm(&ws.x, &lw.mlp_norm, &mut ws.normed);
        matvec(&lw.w_up, &ws.normed, &mut ws.up);
        for u in ws.up.iter_mut() {
            *u = silu(*u);
        }
        matvec(&lw.w_down, &ws.up, &mut ws.proj);
        for i in 0..hidden {
            ws.x[i] += ws.proj[i];
        }
    }

    /// Decode step over the separated caches: appends the step's KV for the
    /// live beams, runs staged attention per layer, and returns one logits
    /// row per beam.
    pub fn decode(
        &self,
        tips: &[u32],
        shared: &SharedKvCache,
        unshared: &mut UnsharedKvCache,
        step: usize,
        ws: &mut ModelWorkspace,
    ) -> Result<Vec<f32>> {
        self.check_tokens(tips)?;
        if step >= unshared.decode_steps() {
            return Err(Error::Sequencing {
                expected: unshared.decode_steps(),
                got: step,
            });
        }
        let live = tips.len();
        if live == 0 || live > unshared.beam_width() {
            return Err(Error::Shape(format!(
                "{live} tips for a cache of width {}",
                unshared.beam_width()
            )));
        }
        let hidden = self.cfg.hidden();
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim;
        let pos = shared.prompt_len() + step;

        ws.x.resize(live * hidden, 0.0);
        ws.normed.resize(live * hidden, 0.0);
        ws.q.resize(live * hidden, 0.0);
        ws.k.resize(live * hidden, 0.0);
        ws.v.resize(live * hidden, 0.0);
        ws.attn_out.resize(live * hidden, 0.0);
        ws.proj.resize(hidden, 0.0);
        ws.up.resize(self.cfg.ff(), 0.0);

        for (b, &tok) in tips.iter().enumerate() {
            let emb = &self.weights.embed[tok as usize * hidden..(tok as usize + 1) * hidden];
            ws.x[b * hidden..(b + 1) * hidden].copy_from_slice(emb);
        }

        for (li, lw) in self.weights.layers.iter().enumerate() {
            for b in 0..live {
                let xb = &ws.x[b * hidden..(b + 1) * hidden];
                let nb = &mut ws.normed[b * hidden..(b + 1) * hidden];
                rmsnorm(xb, &lw.attn_norm, nb);
                matvec(&lw.wq, nb, &mut ws.q[b * hidden..(b + 1) * hidden]);
                matvec(&lw.wk, nb, &mut ws.k[b * hidden..(b + 1) * hidden]);
                matvec(&lw.wv, nb, &mut ws.v[b * hidden..(b + 1) * hidden]);
                rope(&mut ws.q[b * hidden..(b + 1) * hidden], heads, d, pos);
                rope(&mut ws.k[b * hidden..(b + 1) * hidden], heads, d, pos);
            }
            unshared.append_step(li, step, &ws.k[..live * hidden], &ws.v[..live * hidden])?;

            // Staged attention: shared and unshared stages touch disjoint
            // caches, then merge exactly.
            let (mut p_shared, mut p_unshared) = ws.take_partials(live, heads, d);
            attend_unshared(&ws.q[..live * hidden], live, unshared, li, step, &self.attn_cfg, &mut p_unshared)?;
            attend_shared(
                &ws.q[..live * hidden],
                live,
                shared,
                li,
                &self.attn_cfg,
                &mut ws.attn,
                &mut p_shared,
            )?;
            merge_final(&p_shared, &p_unshared, &mut ws.attn_out[..live * hidden])?;
            ws.return_partials(p_shared, p_unshared);

            for b in 0..live {
                matvec(&lw.wo, &ws.attn_out[b * hidden..(b + 1) * hidden], &mut ws.proj);
                for i in 0..hidden {
                    ws.x[b * hidden + i] += ws.proj[i];
                }
                self.mlp_beam(lw, ws, b, hidden);
            }
        }

        let mut logits = vec![0.0; live * self.cfg.vocab_size];
        let mut normed = vec![0.0; hidden];
        for b in 0..live {
            rmsnorm(&ws.x[b * hidden..(b + 1) * hidden], &self.weights.final_norm, &mut normed);
            matvec(
                &self.weights.lm_head,
                &normed,
                &mut logits[b * self.cfg.vocab_size..(b + 1) * self.cfg.vocab_size],
            );
        }
        Ok(logits)
    }

    fn mlp_beam(&self, lw: &LayerWeights, ws: &mut ModelWorkspace, b: usize, hidden: usize) {
        let xb = &ws.x[b * hidden..(b + 1) * hidden];
        rmsnorm(xb, &lw.mlp_norm, &mut ws.normed[..hidden]);
        matvec(&lw.w_up, &ws.normed[..hidden], &mut ws.up);
        for u in ws.up.iter_mut() {
            *u = silu(*u);
        }
        matvec(&lw.w_down, &ws.up, &mut ws.proj);
        for i in 0..hidden {
            ws.x[b * hidden + i] += ws.proj[i];
        }
    }

    // ── Paged-baseline forward paths ────────────────────────────────

    /// Prefill for the paged baseline: prompt KV lands in blocks (for the
    /// decode-phase gathers) and in a contiguous prefill scratch that the
    /// causal attention reads.
    pub fn prefill_paged(
        &self,
        prompt: &[u32],
        paged: &mut PagedKvCache,
        ws: &mut ModelWorkspace,
    ) -> Result<Vec<f32>> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        self.check_tokens(prompt)?;
        let hidden = self.cfg.hidden();
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim;
        ws.prefill_k = vec![Vec::with_capacity(prompt.len() * hidden); self.cfg.layers];
        ws.prefill_v = vec![Vec::with_capacity(prompt.len() * hidden); self.cfg.layers];
        ws.x.resize(hidden, 0.0);
        ws.normed.resize(hidden, 0.0);
        ws.q.resize(hidden, 0.0);
        ws.k.resize(hidden, 0.0);
        ws.v.resize(hidden, 0.0);
        ws.attn_out.resize(hidden, 0.0);
        ws.proj.resize(hidden, 0.0);
        ws.up.resize(self.cfg.ff(), 0.0);

        let mut last_logits = vec![0.0; self.cfg.vocab_size];
        for (pos, &tok) in prompt.iter().enumerate() {
            let emb = &self.weights.embed[tok as usize * hidden..(tok as usize + 1) * hidden];
            ws.x.copy_from_slice(emb);
            for (li, lw) in self.weights.layers.iter().enumerate() {
                rmsnorm(&ws.x, &lw.attn_norm, &mut ws.normed);
                matvec(&lw.wq, &ws.normed, &mut ws.q);
                matvec(&lw.wk, &ws.normed, &mut ws.k);
                matvec(&lw.wv, &ws.normed, &mut ws.v);
                rope(&mut ws.q, heads, d, pos);
                rope(&mut ws.k, heads, d, pos);
                paged.prefill_push(li, &ws.k, &ws.v)?;
                ws.prefill_k[li].extend_from_slice(&ws.k);
                ws.prefill_v[li].extend_from_slice(&ws.v);

                single_query_attention(
                    &ws.q,
                    &ws.prefill_k[li],
                    &ws.prefill_v[li],
                    pos + 1,
                    heads,
                    d,
                    self.attn_cfg.scale,
                    &mut ws.attn_out,
                );
                matvec(&lw.wo, &ws.attn_out, &mut ws.proj);
                for i in 0..hidden {
                    ws.x[i] += ws.proj[i];
                }
                self.mlp(lw, ws, hidden);
            }
            if pos + 1 == prompt.len() {
                let mut normed = vec![0.0; hidden];
                rmsnorm(&ws.x, &self.weights.final_norm, &mut normed);
                matvec(&self.weights.lm_head, &normed, &mut last_logits);
            }
        }
        ws.prefill_k.clear();
        ws.prefill_v.clear();
        Ok(last_logits)
    }

    /// Decode step for the paged baseline: every beam gathers its visible
    /// KV from the block pool into a contiguous scratch (the per-beam
    /// redundant load) and attends with a single-query scan.
    pub fn decode_paged(
        &self,
        tips: &[u32],
        paged: &mut PagedKvCache,
        ws: &mut ModelWorkspace,
    ) -> Result<Vec<f32>> {
        self.check_tokens(tips)?;
        let live = tips.len();
        if live != paged.num_beams() {
            return Err(Error::Shape(format!(
                "{live} tips for {} paged beams",
                paged.num_beams()
            )));
        }
        let hidden = self.cfg.hidden();
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim;

        ws.x.resize(live * hidden, 0.0);
        ws.normed.resize(live * hidden, 0.0);
        ws.q.resize(live * hidden, 0.0);
        ws.k.resize(hidden, 0.0);
        ws.v.resize(hidden, 0.0);
        ws.attn_out.resize(hidden, 0.0);
        ws.proj.resize(hidden, 0.0);
        ws.up.resize(self.cfg.ff(), 0.0);

        paged.begin_append()?;
        for (b, &tok) in tips.iter().enumerate() {
            let emb = &self.weights.embed[tok as usize * hidden..(tok as usize + 1) * hidden];
            ws.x[b * hidden..(b + 1) * hidden].copy_from_slice(emb);
        }

        for (li, lw) in self.weights.layers.iter().enumerate() {
            for b in 0..live {
                let pos = paged.beam_tokens(b);
                let xb = &ws.x[b * hidden..(b + 1) * hidden];
                rmsnorm(xb, &lw.attn_norm, &mut ws.normed[..hidden]);
                matvec(&lw.wq, &ws.normed[..hidden], &mut ws.q[b * hidden..(b + 1) * hidden]);
                matvec(&lw.wk, &ws.normed[..hidden], &mut ws.k);
                matvec(&lw.wv, &ws.normed[..hidden], &mut ws.v);
                rope(&mut ws.q[b * hidden..(b + 1) * hidden], heads, d, pos);
                rope(&mut ws.k, heads, d, pos);
                paged.write_token(li, b, &ws.k, &ws.v);

                let visible = pos + 1;
                paged.gather_visible(li, b, visible, &mut ws.gather_k, &mut ws.gather_v);
                single_query_attention(
                    &ws.q[b * hidden..(b + 1) * hidden],
                    &ws.gather_k,
                    &ws.gather_v,
                    visible,
                    heads,
                    d,
                    self.attn_cfg.scale,
                    &mut ws.attn_out,
                );
                matvec(&lw.wo, &ws.attn_out, &mut ws.proj);
                for i in 0..hidden {
                    ws.x[b * hidden + i] += ws.proj[i];
                }
                self.mlp_beam(lw, ws, b, hidden);
            }
        }
        paged.commit_append();

        let mut logits = vec![0.0; live * self.cfg.vocab_size];
        let mut normed = vec![0.0; hidden];
        for b in 0..live {
            rmsnorm(&ws.x[b * hidden..(b + 1) * hidden], &self.weights.final_norm, &mut normed);
            matvec(
                &self.weights.lm_head,
                &normed,
                &mut logits[b * self.cfg.vocab_size..(b + 1) * self.cfg.vocab_size],
            );
        }
        Ok(logits)
    }
}

/// Single-query causal attention over a contiguous `[pos][head][dim]`
/// buffer (token-serial online softmax).
#[allow(clippy::too_many_arguments)]
fn single_query_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    len: usize,
    heads: usize,
    d: usize,
    scale: f32,
    out: &mut [f32],
) {
    for h in 0..heads {
        let q_row = &q[h * d..(h + 1) * d];
        let mut m = f32::NEG_INFINITY;
        let mut s = 0f32;
        let acc = &mut out[h * d..(h + 1) * d];
        acc.fill(0.0);
        for p in 0..len {
            let off = (p * heads + h) * d;
            let mut z = 0f32;
            for j in 0..d {
                z += q_row[j] * k[off + j];
            }
            z *= scale;
            if z > m {
                let factor = if m == f32::NEG_INFINITY { 0.0 } else { (m - z).exp() };
                s *= factor;
                for a in acc.iter_mut() {
                    *a *= factor;
                }
                m = z;
            }
            let e = (z - m).exp();
            s += e;
            for j in 0..d {
                acc[j] += e * v[off + j];
            }
        }
        let inv = 1.0 / s;
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            vocab_size: 32,
            tile_size: 8,
            seed,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Weights::init(&tiny_cfg(7));
        let b = Weights::init(&tiny_cfg(7));
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.embed, b.embed);
    }

    #[test]
    fn different_seeds_differ() {
        let a = Weights::init(&tiny_cfg(7));
        let b = Weights::init(&tiny_cfg(8));
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn prefill_single_token() {
        let model = Model::new(tiny_cfg(1)).unwrap();
        let mut shared = SharedKvCache::new(2, 2, 8, 1).unwrap();
        let mut ws = ModelWorkspace::new();
        let logits = model.prefill(&[3], &mut shared, &mut ws).unwrap();
        assert_eq!(logits.len(), 32);
        assert!(shared.is_complete());
        assert_eq!(shared.token_slots(), 1);
        assert!(logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn prefill_is_deterministic_and_full_context() {
        let model = Model::new(tiny_cfg(2)).unwrap();
        let prompt: Vec<u32> = (0..10).collect();
        let run = |p: &[u32]| {
            let mut shared = SharedKvCache::new(2, 2, 8, p.len()).unwrap();
            let mut ws = ModelWorkspace::new();
            model.prefill(p, &mut shared, &mut ws).unwrap()
        };
        assert_eq!(run(&prompt), run(&prompt));

        // Perturbing token 0 must change the final logits: the model sees
        // the whole prompt, not just a suffix.
        let mut perturbed = prompt.clone();
        perturbed[0] = 11;
        assert_ne!(run(&prompt), run(&perturbed));
    }

    #[test]
    fn prefill_rejects_out_of_vocab() {
        let model = Model::new(tiny_cfg(1)).unwrap();
        let mut shared = SharedKvCache::new(2, 2, 8, 1).unwrap();
        let mut ws = ModelWorkspace::new();
        assert!(matches!(
            model.prefill(&[99], &mut shared, &mut ws),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn identical_tips_get_identical_rows() {
        let model = Model::new(tiny_cfg(3)).unwrap();
        let mut shared = SharedKvCache::new(2, 2, 8, 4).unwrap();
        let mut ws = ModelWorkspace::new();
        model.prefill(&[1, 2, 3, 4], &mut shared, &mut ws).unwrap();
        let mut unshared = UnsharedKvCache::init(2, 3, 2, 2, 8).unwrap();
        let logits = model.decode(&[5, 5], &shared, &mut unshared, 0, &mut ws).unwrap();
        let v = model.config().vocab_size;
        assert_eq!(&logits[..v], &logits[v..2 * v]);
    }

    #[test]
    fn decode_step_out_of_range_is_sequencing_error() {
        let model = Model::new(tiny_cfg(3)).unwrap();
        let mut shared = SharedKvCache::new(2, 2, 8, 1).unwrap();
        let mut ws = ModelWorkspace::new();
        model.prefill(&[1], &mut shared, &mut ws).unwrap();
        let mut unshared = UnsharedKvCache::init(1, 3, 2, 2, 8).unwrap();
        assert!(matches!(
            model.decode(&[0], &shared, &mut unshared, 3, &mut ws),
            Err(Error::Sequencing { .. })
        ));
    }

    #[test]
    fn log_softmax_matches_hand_values() {
        let mut out = vec![0.0; 2];
        log_softmax(&[0.0, 0.0], &mut out);
        let ln2 = (2.0f32).ln();
        assert!((out[0] + ln2).abs() < 1e-6 && (out[1] + ln2).abs() < 1e-6);

        log_softmax(&[1000.0, 0.0], &mut out);
        assert!(out[0].abs() < 1e-6);
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn log_softmax_normalizes() {
        let row: Vec<f32> = (0..64).map(|i| ((i * 37 % 19) as f32) * 0.3 - 2.0).collect();
        let mut out = vec![0.0; 64];
        log_softmax(&row, &mut out);
        let sum: f64 = out.iter().map(|&x| (x as f64).exp()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
