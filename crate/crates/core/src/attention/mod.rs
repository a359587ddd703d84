//! Staged beam attention over separated KV caches.
//!
//! Decode attention runs in two independent stages: the shared stage scans
//! the prompt KV tile by tile, loading each tile exactly once and applying
//! it to every beam's query; the unshared stage scans each beam's own
//! generated tokens. Both stages produce [`PartialAttention`] statistics
//! (running max, exp-sum, weighted output) that an online-softmax
//! [`merge`] combines exactly.
//!
//! [`naive_beam_attention`] is the per-beam baseline that treats each beam
//! as an independent sequence and re-stages the prompt tiles for every
//! beam; the benchmark harness compares the two.

pub mod planner;

use crate::error::{Error, Result};
use crate::kvcache::{SharedKvCache, UnsharedKvCache};

/// Beams processed together per tile in the staged kernel; keys and values
/// stay in registers across the block.
const BEAM_BLOCK: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    /// Logit scale, `1/sqrt(head_dim)`.
    pub scale: f32,
    /// Tokens per KV tile in the shared stage.
    pub tile_size: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, head_dim: usize, tile_size: usize) -> Result<Self> {
        if heads == 0 || head_dim == 0 || tile_size == 0 {
            return Err(Error::Config(format!(
                "attention dims must be nonzero: heads={heads}, head_dim={head_dim}, tile_size={tile_size}"
            )));
        }
        Ok(AttentionConfig {
            heads,
            head_dim,
            scale: 1.0 / (head_dim as f32).sqrt(),
            tile_size,
        })
    }
}

// ── Partial statistics ──────────────────────────────────────────────

/// Online-softmax statistics per `(beam, head)`: running max `m` of scaled
/// logits, running sum `s` of `exp(logit - m)`, and the value accumulator
/// `o` weighted by the same exponentials.
///
/// An empty partial (no keys seen) is `m = -inf, s = 0, o = 0`; it is the
/// identity element of [`merge`].
#[derive(Debug, Clone)]
pub struct PartialAttention {
    bw: usize,
    heads: usize,
    head_dim: usize,
    pub m: Vec<f32>,
    pub s: Vec<f32>,
    pub o: Vec<f32>,
}

impl PartialAttention {
    pub fn empty(bw: usize, heads: usize, head_dim: usize) -> Self {
        PartialAttention {
            bw,
            heads,
            head_dim,
            m: vec![f32::NEG_INFINITY; bw * heads],
            s: vec![0.0; bw * heads],
            o: vec![0.0; bw * heads * head_dim],
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(f32::NEG_INFINITY);
        self.s.fill(0.0);
        self.o.fill(0.0);
    }

    pub fn beam_width(&self) -> usize {
        self.bw
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn is_empty_at(&self, beam: usize, head: usize) -> bool {
        self.s[beam * self.heads + head] == 0.0
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.bw == other.bw && self.heads == other.heads && self.head_dim == other.head_dim
    }
}

/// Scratch buffers reused across attention calls, plus the tile-load
/// instrumentation the harness reports.
#[derive(Debug, Default)]
pub struct AttentionWorkspace {
    k_tile: Vec<f32>,
    v_tile: Vec<f32>,
    z: Vec<f32>,
    /// Shared-stage tile loads by the staged kernel (one per tile,
    /// independent of beam width).
    pub shared_tile_loads: u64,
    /// Shared-stage tile loads by the per-beam baseline (one per tile per
    /// beam).
    pub naive_tile_loads: u64,
}

impl AttentionWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset_counters(&mut self) {
        self.shared_tile_loads = 0;
        self.naive_tile_loads = 0;
    }

    /// Stage one KV tile into the scratch buffers, transposed to
    /// `[head][token][dim]` so per-head scans are contiguous.
    fn stage_tile(
        &mut self,
        k: &[f32],
        v: &[f32],
        start: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    ) {
        let need = len * heads * head_dim;
        self.k_tile.resize(need.max(self.k_tile.len()), 0.0);
        self.v_tile.resize(need.max(self.v_tile.len()), 0.0);
        for t in 0..len {
            let src = (start + t) * heads * head_dim;
            for h in 0..heads {
                let dst = (h * len + t) * head_dim;
                let s = src + h * head_dim;
                self.k_tile[dst..dst + head_dim].copy_from_slice(&k[s..s + head_dim]);
                self.v_tile[dst..dst + head_dim].copy_from_slice(&v[s..s + head_dim]);
            }
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0f32; 4];
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

/// Four dot products against one key row; the key is loaded once.
#[inline]
fn dot4(q: [&[f32]; 4], k: &[f32], out: &mut [f32; 4]) {
    let n = k.len();
    let mut a0 = 0f32;
    let mut a1 = 0f32;
    let mut a2 = 0f32;
    let mut a3 = 0f32;
    for j in 0..n {
        let kv = k[j];
        a0 += q[0][j] * kv;
        a1 += q[1][j] * kv;
        a2 += q[2][j] * kv;
        a3 += q[3][j] * kv;
    }
    *out = [a0, a1, a2, a3];
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

#[inline]
fn scale_in_place(alpha: f32, y: &mut [f32]) {
    for yi in y.iter_mut() {
        *yi *= alpha;
    }
}

fn check_query_shape(q: &[f32], bw: usize, cfg: &AttentionConfig) -> Result<()> {
    let expect = bw * cfg.heads * cfg.head_dim;
    if q.len() != expect {
        return Err(Error::Shape(format!(
            "queries must hold {expect} values ({bw} beams x {} heads x {} dims), got {}",
            cfg.heads,
            cfg.head_dim,
            q.len()
        )));
    }
    Ok(())
}

// ── Shared stage ────────────────────────────────────────────────────

/// Attention of all beams over the shared prompt cache.
///
/// Each KV tile is staged once and applied to every query; the tile-load
/// counter therefore advances by `ceil(prompt_len / tile_size)` per call
/// regardless of beam width. An empty prompt yields an empty partial.
pub fn attend_shared(
    q: &[f32],
    bw: usize,
    shared: &SharedKvCache,
    layer: usize,
    cfg: &AttentionConfig,
    ws: &mut AttentionWorkspace,
    out: &mut PartialAttention,
) -> Result<()> {
    if !shared.is_complete() {
        return Err(Error::State("shared cache incomplete: prefill has not finished".into()));
    }
    check_query_shape(q, bw, cfg)?;
    out.reset();
    let plen = shared.prompt_len();
    if plen == 0 {
        return Ok(());
    }
    let (k, v) = shared.layer(layer);
    attend_rows_staged(q, bw, k, v, 0, plen, cfg, ws, out, true);
    Ok(())
}

/// Staged scan over rows `[start, start+len)` of a `[slot][head][dim]`
/// panel. `count_loads` feeds the shared-stage counter.
#[allow(clippy::too_many_arguments)]
fn attend_rows_staged(
    q: &[f32],
    bw: usize,
    k: &[f32],
    v: &[f32],
    start: usize,
    len: usize,
    cfg: &AttentionConfig,
    ws: &mut AttentionWorkspace,
    out: &mut PartialAttention,
    count_loads: bool,
) {
    let d = cfg.head_dim;
    let heads = cfg.heads;
    let tile = cfg.tile_size;
    ws.z.resize((BEAM_BLOCK * tile).max(ws.z.len()), 0.0);

    let mut t0 = 0;
    while t0 < len {
        let tlen = tile.min(len - t0);
        ws.stage_tile(k, v, start + t0, tlen, heads, d);
        if count_loads {
            ws.shared_tile_loads += 1;
        }
        for h in 0..heads {
            let k_h = &ws.k_tile[h * tlen * d..(h + 1) * tlen * d];
            let v_h = &ws.v_tile[h * tlen * d..(h + 1) * tlen * d];
            let mut b0 = 0;
            while b0 < bw {
                let nb = BEAM_BLOCK.min(bw - b0);
                score_block(q, b0, nb, h, heads, d, cfg.scale, k_h, tlen, &mut ws.z);
                accumulate_block(&ws.z, b0, nb, h, heads, d, v_h, tlen, out);
                b0 += nb;
            }
        }
        t0 += tlen;
    }
}

/// Scaled q.k scores for a block of up to four beams over one staged tile.
#[allow(clippy::too_many_arguments)]
fn score_block(
    q: &[f32],
    b0: usize,
    nb: usize,
    h: usize,
    heads: usize,
    d: usize,
    scale: f32,
    k_h: &[f32],
    tlen: usize,
    z: &mut [f32],
) {
    if nb == BEAM_BLOCK {
        let qr = |i: usize| &q[((b0 + i) * heads + h) * d..((b0 + i) * heads + h) * d + d];
        let (q0, q1, q2, q3) = (qr(0), qr(1), qr(2), qr(3));
        let mut quad = [0f32; 4];
        for t in 0..tlen {
            dot4([q0, q1, q2, q3], &k_h[t * d..(t + 1) * d], &mut quad);
            z[t] = quad[0] * scale;
            z[tlen + t] = quad[1] * scale;
            z[2 * tlen + t] = quad[2] * scale;
            z[3 * tlen + t] = quad[3] * scale;
        }
    } else {
        for i in 0..nb {
            let q_row = &q[((b0 + i) * heads + h) * d..((b0 + i) * heads + h) * d + d];
            for t in 0..tlen {
                z[i * tlen + t] = dot(q_row, &k_h[t * d..(t + 1) * d]) * scale;
            }
        }
    }
}

/// Fold one tile's scores and values into the running statistics of a
/// block of beams. Values are loaded once per token and reused across the
/// block.
#[allow(clippy::too_many_arguments)]
fn accumulate_block(
    z: &[f32],
    b0: usize,
    nb: usize,
    h: usize,
    heads: usize,
    d: usize,
    v_h: &[f32],
    tlen: usize,
    out: &mut PartialAttention,
) {
    let mut m_new = [0f32; BEAM_BLOCK];
    for i in 0..nb {
        let idx = (b0 + i) * heads + h;
        let mut tile_max = f32::NEG_INFINITY;
        for t in 0..tlen {
            tile_max = tile_max.max(z[i * tlen + t]);
        }
        let m_old = out.m[idx];
        let m = m_old.max(tile_max);
        if m_old > f32::NEG_INFINITY && m > m_old {
            let factor = (m_old - m).exp();
            out.s[idx] *= factor;
            scale_in_place(factor, &mut out.o[idx * d..(idx + 1) * d]);
        }
        out.m[idx] = m;
        m_new[i] = m;
    }
    for t in 0..tlen {
        let v_row = &v_h[t * d..(t + 1) * d];
        for i in 0..nb {
            let idx = (b0 + i) * heads + h;
            let e = (z[i * tlen + t] - m_new[i]).exp();
            out.s[idx] += e;
            axpy(e, v_row, &mut out.o[idx * d..(idx + 1) * d]);
        }
    }
}

// ── Unshared stage ──────────────────────────────────────────────────

/// Attention of each beam over its own generated tokens, steps
/// `0..=step`. Beams only ever read their own rows; `bw` is the live beam
/// count, at most the cache width.
pub fn attend_unshared(
    q: &[f32],
    bw: usize,
    unshared: &UnsharedKvCache,
    layer: usize,
    step: usize,
    cfg: &AttentionConfig,
    out: &mut PartialAttention,
) -> Result<()> {
    if bw > unshared.beam_width() {
        return Err(Error::Shape(format!(
            "{bw} live beams exceed cache width {}",
            unshared.beam_width()
        )));
    }
    check_query_shape(q, bw, cfg)?;
    if unshared.layer_filled(layer) != step + 1 {
        return Err(Error::Sequencing {
            expected: unshared.layer_filled(layer),
            got: step + 1,
        });
    }
    out.reset();
    let d = cfg.head_dim;
    let heads = cfg.heads;
    let (k, v) = unshared.layer(layer);
    for b in 0..bw {
        for h in 0..heads {
            let idx = b * heads + h;
            let q_row = &q[(b * heads + h) * d..(b * heads + h) * d + d];
            let mut m = f32::NEG_INFINITY;
            let mut zs = [0f32; 64];
            debug_assert!(step < 64, "unshared stage supports up to 64 decode steps");
            for s in 0..=step {
                let off = unshared.slot_offset(b, s) + h * d;
                let z = dot(q_row, &k[off..off + d]) * cfg.scale;
                zs[s] = z;
                m = m.max(z);
            }
            let o_row = &mut out.o[idx * d..(idx + 1) * d];
            let mut sum = 0f32;
            for s in 0..=step {
                let e = (zs[s] - m).exp();
                sum += e;
                let off = unshared.slot_offset(b, s) + h * d;
                axpy(e, &v[off..off + d], o_row);
            }
            out.m[idx] = m;
            out.s[idx] = sum;
        }
    }
    Ok(())
}

// ── Merge ───────────────────────────────────────────────────────────

/// Exact online-softmax combination of two partials.
///
/// With `m = max(m1, m2)`, `w_i = exp(m_i - m)`:
/// `s = s1*w1 + s2*w2`, `o = o1*w1 + o2*w2`. The formula is symmetric, so
/// the merge commutes bit-for-bit; an empty partial is the identity.
pub fn merge(p1: &PartialAttention, p2: &PartialAttention) -> Result<PartialAttention> {
    if !p1.same_shape(p2) {
        return Err(Error::Shape(format!(
            "partial shapes differ: ({}, {}, {}) vs ({}, {}, {})",
            p1.bw, p1.heads, p1.head_dim, p2.bw, p2.heads, p2.head_dim
        )));
    }
    let mut out = PartialAttention::empty(p1.bw, p1.heads, p1.head_dim);
    let d = p1.head_dim;
    for i in 0..p1.bw * p1.heads {
        let m = if p1.m[i] >= p2.m[i] { p1.m[i] } else { p2.m[i] };
        let w1 = weight(p1.m[i], m);
        let w2 = weight(p2.m[i], m);
        out.m[i] = m;
        out.s[i] = p1.s[i] * w1 + p2.s[i] * w2;
        let o = &mut out.o[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = p1.o[i * d + j] * w1 + p2.o[i * d + j] * w2;
        }
    }
    Ok(out)
}

#[inline]
fn weight(m_i: f32, m: f32) -> f32 {
    // exp(-inf - -inf) would be NaN; an empty partial contributes weight 0.
    if m_i == f32::NEG_INFINITY {
        0.0
    } else {
        (m_i - m).exp()
    }
}

/// Normalize a partial into the attention output `[bw][head][dim]`.
/// Errors if any `(beam, head)` saw no key at all.
pub fn finalize(p: &PartialAttention, out: &mut [f32]) -> Result<()> {
    let d = p.head_dim;
    if out.len() != p.bw * p.heads * d {
        return Err(Error::Shape(format!(
            "output must hold {} values, got {}",
            p.bw * p.heads * d,
            out.len()
        )));
    }
    for i in 0..p.bw * p.heads {
        if p.s[i] == 0.0 {
            return Err(Error::UndefinedAttention);
        }
        let inv = 1.0 / p.s[i];
        for j in 0..d {
            out[i * d + j] = p.o[i * d + j] * inv;
        }
    }
    Ok(())
}

/// Merge two partials and normalize: the final staged attention output.
pub fn merge_final(p1: &PartialAttention, p2: &PartialAttention, out: &mut [f32]) -> Result<()> {
    let merged = merge(p1, p2)?;
    finalize(&merged, out)
}

// ── Per-beam baseline ───────────────────────────────────────────────

/// The independent-sequence baseline: every beam stages the prompt tiles
/// for itself (the per-beam tile-load counter advances `bw` times faster
/// than the staged kernel's) and scans them with a single query. The math
/// is identical; only the data movement differs.
#[allow(clippy::too_many_arguments)]
pub fn naive_beam_attention(
    q: &[f32],
    bw: usize,
    shared: &SharedKvCache,
    unshared: Option<(&UnsharedKvCache, usize)>,
    layer: usize,
    cfg: &AttentionConfig,
    ws: &mut AttentionWorkspace,
    out: &mut [f32],
) -> Result<()> {
    check_query_shape(q, bw, cfg)?;
    let d = cfg.head_dim;
    let heads = cfg.heads;
    let tile = cfg.tile_size;
    let plen = shared.prompt_len();
    let (k, v) = shared.layer(layer);
    let mut z = vec![0f32; tile];

    for b in 0..bw {
        let mut m = vec![f32::NEG_INFINITY; heads];
        let mut s = vec![0f32; heads];
        let mut acc = vec![0f32; heads * d];
        let mut t0 = 0;
        while t0 < plen {
            let tlen = tile.min(plen - t0);
            ws.stage_tile(k, v, t0, tlen, heads, d);
            ws.naive_tile_loads += 1;
            for h in 0..heads {
                let q_row = &q[(b * heads + h) * d..(b * heads + h) * d + d];
                let k_h = &ws.k_tile[h * tlen * d..(h + 1) * tlen * d];
                let v_h = &ws.v_tile[h * tlen * d..(h + 1) * tlen * d];
                let mut tile_max = f32::NEG_INFINITY;
                for t in 0..tlen {
                    let zt = dot(q_row, &k_h[t * d..(t + 1) * d]) * cfg.scale;
                    z[t] = zt;
                    tile_max = tile_max.max(zt);
                }
                let m_old = m[h];
                let m_new = m_old.max(tile_max);
                if m_old > f32::NEG_INFINITY && m_new > m_old {
                    let factor = (m_old - m_new).exp();
                    s[h] *= factor;
                    scale_in_place(factor, &mut acc[h * d..(h + 1) * d]);
                }
                m[h] = m_new;
                for t in 0..tlen {
                    let e = (z[t] - m_new).exp();
                    s[h] += e;
                    axpy(e, &v_h[t * d..(t + 1) * d], &mut acc[h * d..(h + 1) * d]);
                }
            }
            t0 += tlen;
        }
        if let Some((un, step)) = unshared {
            let (uk, uv) = un.layer(layer);
            for h in 0..heads {
                let q_row = &q[(b * heads + h) * d..(b * heads + h) * d + d];
                for st in 0..=step {
                    let off = un.slot_offset(b, st) + h * d;
                    let zt = dot(q_row, &uk[off..off + d]) * cfg.scale;
                    let m_old = m[h];
                    let m_new = m_old.max(zt);
                    if m_old > f32::NEG_INFINITY && m_new > m_old {
                        let factor = (m_old - m_new).exp();
                        s[h] *= factor;
                        scale_in_place(factor, &mut acc[h * d..(h + 1) * d]);
                    }
                    m[h] = m_new;
                    let e = (zt - m_new).exp();
                    s[h] += e;
                    axpy(e, &uv[off..off + d], &mut acc[h * d..(h + 1) * d]);
                }
            }
        }
        for h in 0..heads {
            if s[h] == 0.0 {
                return Err(Error::UndefinedAttention);
            }
            let inv = 1.0 / s[h];
            for j in 0..d {
                out[(b * heads + h) * d + j] = acc[h * d + j] * inv;
            }
        }
    }
    Ok(())
}

// ── Multi-lane staged execution ─────────────────────────────────────

/// Run the two stages and the merge across execution lanes per a
/// partition setting: the shared stage splits its tile range over
/// `lanes_shared` threads, the unshared stage splits beams over
/// `lanes_unshared`, and the merge splits beams over `lanes_merge` once
/// both producer stages have completed (join is the completion handoff).
///
/// Lane partials merge in fixed tile-range order, so the result is
/// independent of scheduling (within tile-invariance tolerance of the
/// single-lane kernel).
#[allow(clippy::too_many_arguments)]
pub fn staged_attention_lanes(
    q: &[f32],
    bw: usize,
    shared: &SharedKvCache,
    unshared: &UnsharedKvCache,
    layer: usize,
    step: usize,
    cfg: &AttentionConfig,
    setting: &planner::PartitionSetting,
    out: &mut [f32],
) -> Result<()> {
    if out.len() != bw * cfg.heads * cfg.head_dim {
        return Err(Error::Shape(format!(
            "output must hold {} values, got {}",
            bw * cfg.heads * cfg.head_dim,
            out.len()
        )));
    }
    let plen = shared.prompt_len();
    if plen > 0 && setting.lanes_shared == 0 {
        return Err(Error::Config("shared stage is non-empty but has zero lanes".into()));
    }
    let lanes_s = setting.lanes_shared.max(1);
    let tiles = plen.div_ceil(cfg.tile_size).max(1);
    let tiles_per_lane = tiles.div_ceil(lanes_s);

    let mut shared_parts: Vec<Result<(PartialAttention, u64)>> = Vec::new();
    let mut unshared_part: Option<Result<PartialAttention>> = None;

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        if plen > 0 {
            for lane in 0..lanes_s {
                let lo = (lane * tiles_per_lane * cfg.tile_size).min(plen);
                let hi = (((lane + 1) * tiles_per_lane) * cfg.tile_size).min(plen);
                handles.push(scope.spawn(move || {
                    let mut ws = AttentionWorkspace::new();
                    let mut part = PartialAttention::empty(bw, cfg.heads, cfg.head_dim);
                    if hi > lo {
                        let (k, v) = shared.layer(layer);
                        attend_rows_staged(q, bw, k, v, lo, hi - lo, cfg, &mut ws, &mut part, true);
                    }
                    Ok((part, ws.shared_tile_loads))
                }));
            }
        }
        let u_handle = scope.spawn(move || {
            let mut part = PartialAttention::empty(bw, cfg.heads, cfg.head_dim);
            attend_unshared(q, bw, unshared, layer, step, cfg, &mut part)?;
            Ok(part)
        });
        shared_parts = handles.into_iter().map(|h| h.join().expect("lane panicked")).collect();
        unshared_part = Some(u_handle.join().expect("lane panicked"));
    });

    let mut shared_acc = PartialAttention::empty(bw, cfg.heads, cfg.head_dim);
    for part in shared_parts {
        let (p, _loads) = part?;
        shared_acc = merge(&shared_acc, &p)?;
    }
    let u = unshared_part.expect("unshared stage ran")?;
    let merged = merge(&shared_acc, &u)?;

    // Merge/normalize stage: beams split across lanes_merge.
    let lanes_m = setting.lanes_merge.max(1);
    let per = bw.div_ceil(lanes_m).max(1);
    let d = cfg.head_dim;
    let heads = cfg.heads;
    let mut failed = false;
    std::thread::scope(|scope| {
        let merged = &merged;
        let chunks = out.chunks_mut(per * heads * d);
        let mut handles = Vec::new();
        for (i, chunk) in chunks.enumerate() {
            handles.push(scope.spawn(move || -> bool {
                let b_lo = i * per;
                for (bi, _) in (b_lo..(b_lo + per).min(bw)).enumerate() {
                    let idx = (b_lo + bi) * heads;
                    for h in 0..heads {
                        if merged.s[idx + h] == 0.0 {
                            return false;
                        }
                        let inv = 1.0 / merged.s[idx + h];
                        for j in 0..d {
                            chunk[(bi * heads + h) * d + j] = merged.o[(idx + h) * d + j] * inv;
                        }
                    }
                }
                true
            }));
        }
        for h in handles {
            if !h.join().expect("merge lane panicked") {
                failed = true;
            }
        }
    });
    if failed {
        return Err(Error::UndefinedAttention);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shared_with(rows: &[(Vec<f32>, Vec<f32>)], heads: usize, d: usize) -> SharedKvCache {
        let mut c = SharedKvCache::new(1, heads, d, rows.len()).unwrap();
        for (k, v) in rows {
            c.push_position(0, k, v).unwrap();
        }
        c
    }

    #[test]
    fn empty_prompt_yields_empty_partial() {
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let shared = SharedKvCache::new(1, 1, 2, 0).unwrap();
        assert!(shared.is_complete());
        let q = vec![1.0, 0.0];
        let mut ws = AttentionWorkspace::new();
        let mut p = PartialAttention::empty(1, 1, 2);
        attend_shared(&q, 1, &shared, 0, &cfg, &mut ws, &mut p).unwrap();
        assert_eq!(p.m[0], f32::NEG_INFINITY);
        assert_eq!(p.s[0], 0.0);
        assert!(p.o.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_orthogonal_key_gives_unit_weight() {
        // q.k = 0 => one key with weight exp(0) = 1: s = 1, o = v.
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let shared = shared_with(&[(vec![0.0, 1.0], vec![3.0, -2.0])], 1, 2);
        let q = vec![1.0, 0.0];
        let mut ws = AttentionWorkspace::new();
        let mut p = PartialAttention::empty(1, 1, 2);
        attend_shared(&q, 1, &shared, 0, &cfg, &mut ws, &mut p).unwrap();
        assert_eq!(p.s[0], 1.0);
        assert_eq!(&p.o, &[3.0, -2.0]);
        let mut out = vec![0.0; 2];
        finalize(&p, &mut out).unwrap();
        assert_eq!(out, vec![3.0, -2.0]);
    }

    #[test]
    fn unshared_first_step_single_token() {
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let mut un = UnsharedKvCache::init(2, 3, 1, 1, 2).unwrap();
        un.append_step(0, 0, &[0.0, 1.0, 0.0, -1.0], &[5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let q = vec![1.0, 0.0, 1.0, 0.0];
        let mut p = PartialAttention::empty(2, 1, 2);
        attend_unshared(&q, 2, &un, 0, 0, &cfg, &mut p).unwrap();
        assert_eq!(p.s, vec![1.0, 1.0]);
        assert_eq!(&p.o, &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn unshared_requires_current_step_appended() {
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let un = UnsharedKvCache::init(1, 3, 1, 1, 2).unwrap();
        let q = vec![1.0, 0.0];
        let mut p = PartialAttention::empty(1, 1, 2);
        let err = attend_unshared(&q, 1, &un, 0, 0, &cfg, &mut p).unwrap_err();
        assert!(matches!(err, Error::Sequencing { .. }));
    }

    #[test]
    fn beam_isolation_is_bitwise() {
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let mut un = UnsharedKvCache::init(2, 3, 1, 1, 2).unwrap();
        un.append_step(0, 0, &[0.5, 1.0, 2.0, -1.0], &[5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let q = vec![1.0, 0.25, -0.5, 0.75];
        let mut p = PartialAttention::empty(2, 1, 2);
        attend_unshared(&q, 2, &un, 0, 0, &cfg, &mut p).unwrap();
        let beam0 = (p.m[0], p.s[0], p.o[0], p.o[1]);

        // Perturb beam 1's KV; beam 0 must be bit-identical.
        un.write_beam_step(0, 1, 0, &[9.0, 9.0], &[-9.0, -9.0]);
        let mut p2 = PartialAttention::empty(2, 1, 2);
        attend_unshared(&q, 2, &un, 0, 0, &cfg, &mut p2).unwrap();
        assert_eq!((p2.m[0], p2.s[0], p2.o[0], p2.o[1]), beam0);
        assert_ne!(p2.o[2], p.o[2]);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let cfg = AttentionConfig::new(1, 2, 4).unwrap();
        let shared = shared_with(&[(vec![1.0, 0.5], vec![2.0, 4.0]), (vec![-1.0, 0.0], vec![1.0, 1.0])], 1, 2);
        let q = vec![0.3, -0.2];
        let mut ws = AttentionWorkspace::new();
        let mut p1 = PartialAttention::empty(1, 1, 2);
        attend_shared(&q, 1, &shared, 0, &cfg, &mut ws, &mut p1).unwrap();
        let p2 = PartialAttention::empty(1, 1, 2);

        let mut direct = vec![0.0; 2];
        finalize(&p1, &mut direct).unwrap();
        let mut merged = vec![0.0; 2];
        merge_final(&p1, &p2, &mut merged).unwrap();
        assert_eq!(direct, merged);
    }

    #[test]
    fn merge_is_bitwise_commutative() {
        let mut p1 = PartialAttention::empty(2, 1, 2);
        let mut p2 = PartialAttention::empty(2, 1, 2);
        for i in 0..2 {
            p1.m[i] = 0.3 + i as f32;
            p1.s[i] = 1.7;
            p2.m[i] = -0.1 * i as f32;
            p2.s[i] = 0.9;
        }
        for j in 0..4 {
            p1.o[j] = j as f32 * 0.25 - 0.3;
            p2.o[j] = 1.0 - j as f32 * 0.125;
        }
        let a = merge(&p1, &p2).unwrap();
        let b = merge(&p2, &p1).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.s, b.s);
        assert_eq!(a.o, b.o);
    }

    #[test]
    fn merging_two_empties_is_undefined() {
        let p1 = PartialAttention::empty(1, 1, 2);
        let p2 = PartialAttention::empty(1, 1, 2);
        let mut out = vec![0.0; 2];
        assert!(matches!(
            merge_final(&p1, &p2, &mut out),
            Err(Error::UndefinedAttention)
        ));
    }

    #[test]
    fn shared_tile_loads_independent_of_beam_width() {
        let cfg = AttentionConfig::new(2, 4, 16).unwrap();
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..100)
            .map(|i| (vec![i as f32 * 0.01; 8], vec![1.0; 8]))
            .collect();
        let shared = shared_with(&rows, 2, 4);
        for bw in [1usize, 8, 32] {
            let q = vec![0.1; bw * 8];
            let mut ws = AttentionWorkspace::new();
            let mut p = PartialAttention::empty(bw, 2, 4);
            attend_shared(&q, bw, &shared, 0, &cfg, &mut ws, &mut p).unwrap();
            assert_eq!(ws.shared_tile_loads, 100usize.div_ceil(16) as u64);
        }
    }
}
