//! Independent reference implementations.
//!
//! Everything here is ground truth for the equivalence suites: dense
//! wide-accumulation attention, out-of-place gather reordering, full-sort
//! candidate selection, and a from-scratch forward pass. None of it shares
//! the staged/cached code paths it checks; `cmd validate` runs these at
//! runtime, the test suites freeze values computed from them.

use crate::beam::{ranks_above, Candidate};
use crate::error::Result;
use crate::kvcache::{SharedKvCache, UnsharedKvCache};
use crate::model::{log_softmax, matvec, rmsnorm, rope, silu, Model};

/// Dense attention for one query over an explicit key/value list, two-pass
/// softmax with f64 accumulation throughout.
pub fn dense_attention_f64(
    q: &[f32],
    keys: &[&[f32]],
    values: &[&[f32]],
    scale: f64,
    out: &mut [f32],
) {
    assert_eq!(keys.len(), values.len());
    assert!(!keys.is_empty(), "dense attention needs at least one key");
    let d = q.len();
    let mut zs = Vec::with_capacity(keys.len());
    let mut m = f64::NEG_INFINITY;
    for k in keys {
        let mut z = 0f64;
        for j in 0..d {
            z += q[j] as f64 * k[j] as f64;
        }
        z *= scale;
        m = m.max(z);
        zs.push(z);
    }
    let mut sum = 0f64;
    let mut acc = vec![0f64; d];
    for (z, v) in zs.iter().zip(values.iter()) {
        let e = (z - m).exp();
        sum += e;
        for j in 0..d {
            acc[j] += e * v[j] as f64;
        }
    }
    for j in 0..d {
        out[j] = (acc[j] / sum) as f32;
    }
}

/// Ground truth for staged decode attention: for every beam, dense
/// attention over the concatenation of all prompt positions and the beam's
/// own generated tokens (steps `0..=step`), honoring per-beam visibility.
pub fn staged_attention_reference(
    q: &[f32],
    bw: usize,
    shared: &SharedKvCache,
    unshared: Option<(&UnsharedKvCache, usize)>,
    layer: usize,
    heads: usize,
    head_dim: usize,
) -> Vec<f32> {
    let d = head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; bw * heads * d];
    let (sk, sv) = shared.layer(layer);
    let plen = shared.prompt_len();
    for b in 0..bw {
        for h in 0..heads {
            let mut keys: Vec<&[f32]> = Vec::new();
            let mut values: Vec<&[f32]> = Vec::new();
            for p in 0..plen {
                let off = (p * heads + h) * d;
                keys.push(&sk[off..off + d]);
                values.push(&sv[off..off + d]);
            }
            if let Some((un, step)) = unshared {
                let (uk, uv) = un.layer(layer);
                for s in 0..=step {
                    let off = un.slot_offset(b, s) + h * d;
                    keys.push(&uk[off..off + d]);
                    values.push(&uv[off..off + d]);
                }
            }
            let q_row = &q[(b * heads + h) * d..(b * heads + h) * d + d];
            let o = (b * heads + h) * d;
            dense_attention_f64(q_row, &keys, &values, scale, &mut out[o..o + d]);
        }
    }
    out
}

/// Out-of-place gather oracle for in-place reordering: a fresh cache whose
/// row `dst` is the old row `src[dst]`, built with plain reads and writes.
pub fn gather_reorder(cache: &UnsharedKvCache, src: &[usize]) -> UnsharedKvCache {
    let mut out = cache.clone();
    let row = cache.heads() * cache.head_dim();
    for layer in 0..cache.layer_count() {
        let (k, v) = cache.layer(layer);
        for (dst, &s) in src.iter().enumerate() {
            for step in 0..cache.decode_steps() {
                let off = cache.slot_offset(s, step);
                out.write_beam_step(layer, dst, step, &k[off..off + row], &v[off..off + row]);
            }
        }
    }
    out
}

/// Full-sort selection oracle: flatten, sort under the total order
/// (score desc, beam asc, token asc), truncate.
pub fn full_sort_select(lists: &[Vec<Candidate>], bw: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = lists.iter().flatten().copied().collect();
    all.sort_by(|a, b| ranks_above(b, a));
    all.truncate(bw);
    all
}

/// From-scratch forward pass: runs the whole token sequence as one fresh
/// input with dense f64 attention and no caches, returning the logits at
/// the last position. This is the recompute oracle that incremental
/// decoding must match.
pub fn recompute_logits(model: &Model, tokens: &[u32]) -> Result<Vec<f32>> {
    let cfg = *model.config();
    let hidden = cfg.hidden();
    let heads = cfg.heads;
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let n = tokens.len();

    // Per-layer K/V history, [pos][head][dim].
    let mut hist_k: Vec<Vec<f32>> = vec![Vec::with_capacity(n * hidden); cfg.layers];
    let mut hist_v: Vec<Vec<f32>> = vec![Vec::with_capacity(n * hidden); cfg.layers];

    let mut x = vec![0.0f32; hidden];
    let mut normed = vec![0.0f32; hidden];
    let mut q = vec![0.0f32; hidden];
    let mut k = vec![0.0f32; hidden];
    let mut v = vec![0.0f32; hidden];
    let mut attn = vec![0.0f32; hidden];
    let mut proj = vec![0.0f32; hidden];
    let mut up = vec![0.0f32; cfg.ff()];
    let mut logits = vec![0.0f32; cfg.vocab_size];

    for (pos, &tok) in tokens.iter().enumerate() {
        let emb = model.embed_row(tok)?;
        x.copy_from_slice(emb);
        for li in 0..cfg.layers {
            let lw = model.layer_weights(li);
            rmsnorm(&x, &lw.attn_norm, &mut normed);
            matvec(&lw.wq, &normed, &mut q);
            matvec(&lw.wk, &normed, &mut k);
            matvec(&lw.wv, &normed, &mut v);
            rope(&mut q, heads, d, pos);
            rope(&mut k, heads, d, pos);
            hist_k[li].extend_from_slice(&k);
            hist_v[li].extend_from_slice(&v);

            for h in 0..heads {
                let keys: Vec<&[f32]> = (0..=pos)
                    .map(|p| &hist_k[li][(p * heads + h) * d..(p * heads + h) * d + d])
                    .collect();
                let values: Vec<&[f32]> = (0..=pos)
                    .map(|p| &hist_v[li][(p * heads + h) * d..(p * heads + h) * d + d])
                    .collect();
                dense_attention_f64(
                    &q[h * d..(h + 1) * d],
                    &keys,
                    &values,
                    scale,
                    &mut attn[h * d..(h + 1) * d],
                );
            }
            matvec(&lw.wo, &attn, &mut proj);
            for i in 0..hidden {
                x[i] += proj[i];
            }
            rmsnorm(&x, &lw.mlp_norm, &mut normed);
            matvec(&lw.w_up, &normed, &mut up);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            matvec(&lw.w_down, &up, &mut proj);
            for i in 0..hidden {
                x[i] += proj[i];
            }
        }
    }
    rmsnorm(&x, model.final_norm(), &mut normed);
    matvec(model.lm_head(), &normed, &mut logits);
    Ok(logits)
}

/// Log-probability of one token sequence under the recompute oracle,
/// summing per-step log-softmax values (score-additivity reference).
pub fn sequence_log_prob(model: &Model, prompt: &[u32], generated: &[u32]) -> Result<f32> {
    let mut tokens = prompt.to_vec();
    let mut total = 0f32;
    let mut lp = vec![0.0f32; model.config().vocab_size];
    for &g in generated {
        let logits = recompute_logits(model, &tokens)?;
        log_softmax(&logits, &mut lp);
        total += lp[g as usize];
        tokens.push(g);
    }
    Ok(total)
}

/// Max relative error between two buffers, row-normalized: for each row of
/// `row_len` values, `max|a-b| / max(max|b|, floor)`.
pub fn max_rel_err(a: &[f32], b: &[f32], row_len: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0f64;
    for (ra, rb) in a.chunks(row_len).zip(b.chunks(row_len)) {
        let scale = rb
            .iter()
            .map(|x| x.abs() as f64)
            .fold(0.0, f64::max)
            .max(1e-8);
        for (x, y) in ra.iter().zip(rb.iter()) {
            worst = worst.max(((x - y).abs() as f64) / scale);
        }
    }
    worst
}
