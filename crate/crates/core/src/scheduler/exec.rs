//! Engine tier: one batch through prefill and the per-step
//! beam-search/decode rounds.
//!
//! Requests in a batch run their phases in lockstep (prefill together,
//! then step `t` together), modeling batched kernels. Per step, host-side
//! mask preparation overlaps the forward pass that produces the logits the
//! mask will filter; selection applies the mask, picks the global top-BW,
//! commits the pool in place, and reorders the KV cache, after which the
//! decode forward appends the selected tokens' KV and yields the next
//! step's logits. The final decode completes the unshared cache, matching
//! a fixed per-request execution graph.
//!
//! The same code drives both clocks: wall mode timestamps real execution,
//! virtual mode executes the same work but takes span durations from a
//! deterministic cost model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::beam::{
    mask_for_prefix, per_beam_topk, select_top_bw, BeamPool, ItemVocabulary, MaskBuffer, MaskMode,
    SelectionStats,
};
use crate::error::{Error, Result};
use crate::kvcache::paged::PagedKvCache;
use crate::kvcache::{memory_report, SharedKvCache, UnsharedKvCache};
use crate::model::{log_softmax, Model, ModelWorkspace};
use crate::scheduler::{Batch, CacheMode, EngineConfig, PhaseSpan, Request, RequestOutput};

/// Everything a lane needs to execute batches.
#[derive(Debug)]
pub struct EngineContext {
    pub model: Model,
    pub vocab: Option<ItemVocabulary>,
    pub engine: EngineConfig,
}

impl EngineContext {
    pub fn new(model: Model, vocab: Option<ItemVocabulary>, engine: EngineConfig) -> Result<Self> {
        engine.validate()?;
        Ok(EngineContext { model, vocab, engine })
    }
}

// ── Virtual cost model ──────────────────────────────────────────────

/// Deterministic synthetic per-op costs (microseconds) for virtual time.
/// Affine in the obvious shape parameters; per-submission overhead models
/// the host-side dispatch cost that graph dispatch amortizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub submission_us: u64,
    pub prefill_base_us: u64,
    pub prefill_per_token_us: u64,
    pub decode_base_us: u64,
    pub decode_per_beam_us: u64,
    pub decode_per_prompt_token_us_x16: u64,
    pub mask_base_us: u64,
    pub mask_per_beam_us_x2: u64,
    pub beam_base_us: u64,
    pub beam_per_candidate_us_x64: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            submission_us: 5,
            prefill_base_us: 50,
            prefill_per_token_us: 2,
            decode_base_us: 40,
            decode_per_beam_us: 2,
            decode_per_prompt_token_us_x16: 4,
            mask_base_us: 10,
            mask_per_beam_us_x2: 1,
            beam_base_us: 15,
            beam_per_candidate_us_x64: 2,
        }
    }
}

impl CostModel {
    fn prefill(&self, tokens: usize) -> u64 {
        self.prefill_base_us + self.prefill_per_token_us * tokens as u64
    }

    fn decode(&self, bw: usize, prompt: usize) -> u64 {
        self.decode_base_us
            + self.decode_per_beam_us * bw as u64
            + self.decode_per_prompt_token_us_x16 * (prompt as u64 / 16)
    }

    fn mask_prep(&self, bw: usize) -> u64 {
        self.mask_base_us + self.mask_per_beam_us_x2 * (bw as u64 / 2)
    }

    fn beam(&self, bw: usize, k: usize) -> u64 {
        self.beam_base_us + self.beam_per_candidate_us_x64 * ((bw * k) as u64 / 64)
    }
}

/// Operation submissions per phase; graph dispatch coalesces each phase
/// into a single handoff.
fn submissions(per_op: u32, graph_dispatch: bool) -> u32 {
    if graph_dispatch {
        1
    } else {
        per_op
    }
}

/// Time source for one lane executing one batch.
pub enum LaneClock<'a> {
    Wall { origin: Instant },
    Virtual { cursor_us: u64, costs: &'a CostModel },
}

impl LaneClock<'_> {
    fn now_us(&self) -> u64 {
        match self {
            LaneClock::Wall { origin } => origin.elapsed().as_micros() as u64,
            LaneClock::Virtual { cursor_us, .. } => *cursor_us,
        }
    }

    pub fn end_us(&self) -> u64 {
        self.now_us()
    }
}

/// Run one op as a span. In virtual mode the span's duration comes from
/// the cost model plus submission overhead.
fn timed<T>(
    clock: &mut LaneClock,
    cost_us: u64,
    subs: u32,
    f: impl FnOnce() -> T,
) -> (T, u64, u64) {
    match clock {
        LaneClock::Wall { origin } => {
            let t0 = origin.elapsed().as_micros() as u64;
            let r = f();
            let t1 = origin.elapsed().as_micros() as u64;
            (r, t0, t1)
        }
        LaneClock::Virtual { cursor_us, costs } => {
            let t0 = *cursor_us;
            let r = f();
            *cursor_us = t0 + cost_us + costs.submission_us * subs as u64;
            (r, t0, *cursor_us)
        }
    }
}

/// Run a producer op and a helper op, overlapped when configured: in wall
/// mode the helper runs on a scoped thread, in virtual mode both start at
/// the same instant and the lane advances by the longer of the two.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn timed_pair<T: Send, U: Send>(
    clock: &mut LaneClock,
    overlap: bool,
    cost_prod: u64,
    subs_prod: u32,
    cost_help: u64,
    subs_help: u32,
    producer: impl FnOnce() -> T + Send,
    helper: impl FnOnce() -> U + Send,
) -> ((T, u64, u64), (U, u64, u64)) {
    match clock {
        LaneClock::Wall { origin } => {
            if overlap {
                let origin = *origin;
                std::thread::scope(|scope| {
                    let h = scope.spawn(move || {
                        let t0 = origin.elapsed().as_micros() as u64;
                        let r = helper();
                        let t1 = origin.elapsed().as_micros() as u64;
                        (r, t0, t1)
                    });
                    let t0 = origin.elapsed().as_micros() as u64;
                    let r = producer();
                    let t1 = origin.elapsed().as_micros() as u64;
                    ((r, t0, t1), h.join().expect("mask helper panicked"))
                })
            } else {
                let t0 = origin.elapsed().as_micros() as u64;
                let hr = helper();
                let t1 = origin.elapsed().as_micros() as u64;
                let pr = producer();
                let t2 = origin.elapsed().as_micros() as u64;
                ((pr, t1, t2), (hr, t0, t1))
            }
        }
        LaneClock::Virtual { cursor_us, costs } => {
            let t0 = *cursor_us;
            let hr = helper();
            let pr = producer();
            let d_prod = cost_prod + costs.submission_us * subs_prod as u64;
            let d_help = cost_help + costs.submission_us * subs_help as u64;
            if overlap {
                *cursor_us = t0 + d_prod.max(d_help);
                ((pr, t0, t0 + d_prod), (hr, t0, t0 + d_help))
            } else {
                *cursor_us = t0 + d_help + d_prod;
                ((pr, t0 + d_help, t0 + d_help + d_prod), (hr, t0, t0 + d_help))
            }
        }
    }
}

// ── Per-request state ───────────────────────────────────────────────

enum CacheState {
    Separated {
        shared: SharedKvCache,
        unshared: UnsharedKvCache,
    },
    Paged(PagedKvCache),
}

struct RequestRun {
    req: Request,
    pool: BeamPool,
    cache: CacheState,
    ws: ModelWorkspace,
    mask_buf: MaskBuffer,
    mask_lists: Vec<Vec<u32>>,
    logits: Vec<f32>,
    lp: Vec<f32>,
    scores: Vec<f32>,
    selection: SelectionStats,
    failed: Option<String>,
    spans: Vec<PhaseSpan>,
}

impl RequestRun {
    fn init(ctx: &EngineContext, req: Request) -> Result<RequestRun> {
        let m = ctx.model.config();
        let p = &req.params;
        p.validate(m.vocab_size)?;
        if p.masking && ctx.vocab.is_none() {
            return Err(Error::Config(format!(
                "request {} has masking enabled but the engine holds no vocabulary",
                req.id
            )));
        }
        if let Some(vocab) = &ctx.vocab {
            if vocab.nd() != p.nd {
                return Err(Error::Config(format!(
                    "request nd {} does not match vocabulary depth {}",
                    p.nd,
                    vocab.nd()
                )));
            }
        }
        let cache = match ctx.engine.cache_mode {
            CacheMode::Separated => CacheState::Separated {
                shared: SharedKvCache::new(m.layers, m.heads, m.head_dim, req.prompt.len())?,
                unshared: UnsharedKvCache::init(p.bw, p.nd, m.layers, m.heads, m.head_dim)?,
            },
            CacheMode::Paged => {
                let bs = ctx.engine.paged_block_size;
                let blocks = PagedKvCache::blocks_for_request(req.prompt.len(), p.bw, p.nd, bs);
                CacheState::Paged(PagedKvCache::new(m.layers, m.heads, m.head_dim, bs, blocks)?)
            }
        };
        Ok(RequestRun {
            pool: BeamPool::init(p.bw, p.nd)?,
            cache,
            ws: ModelWorkspace::new(),
            mask_buf: MaskBuffer::new(m.vocab_size),
            mask_lists: Vec::new(),
            logits: Vec::new(),
            lp: vec![0.0; m.vocab_size],
            scores: vec![0.0; m.vocab_size],
            selection: SelectionStats::default(),
            failed: None,
            spans: Vec::new(),
            req,
        })
    }

    fn fail(&mut self, err: &Error) {
        self.failed = Some(err.to_string());
    }
}

fn prep_mask_lists(
    vocab: &ItemVocabulary,
    pool: &BeamPool,
    lists: &mut Vec<Vec<u32>>,
) -> Result<()> {
    let live = pool.live();
    while lists.len() < live {
        lists.push(Vec::new());
    }
    for b in 0..live {
        vocab.children_into(pool.slot(b).tokens(), &mut lists[b])?;
    }
    Ok(())
}

/// Selection for step `t` (1-based): mask, normalize, per-beam top-K,
/// global top-BW, in-place pool commit, cache reorder.
fn select_step(ctx: &EngineContext, run: &mut RequestRun, t: usize) -> Result<()> {
    let v = ctx.model.config().vocab_size;
    let p = run.req.params;
    let masking = p.masking;
    let vocab = ctx.vocab.as_ref();

    if t == 1 {
        // Bootstrap: top-BW distinct first tokens from the prefill row.
        let row = &mut run.logits[0..v];
        if masking {
            let vocab = vocab.expect("masking requires vocab");
            let mut scratch = Vec::new();
            mask_for_prefix(vocab, &[], &mut run.mask_buf, MaskMode::Dense, &mut scratch)?;
            run.mask_buf.apply(row);
        }
        log_softmax(row, &mut run.lp);
        let cands = per_beam_topk(&run.lp, 0, p.bw.min(v))?;
        run.pool.bootstrap(&cands)?;
        if let CacheState::Paged(paged) = &mut run.cache {
            paged.init_beams(run.pool.live())?;
            let identity: Vec<usize> = (0..run.pool.live()).collect();
            paged.fork_tables(&identity)?;
        }
        return Ok(());
    }

    let live = run.pool.live();
    let mut lists: Vec<Vec<crate::beam::Candidate>> = Vec::with_capacity(live);
    for b in 0..live {
        let row = &mut run.logits[b * v..(b + 1) * v];
        if masking {
            let vocab = vocab.expect("masking requires vocab");
            let list = run
                .mask_lists
                .get(b)
                .ok_or_else(|| Error::State(format!("mask list missing for beam {b}")))?;
            debug_assert!(!list.is_empty() || vocab.item_count() == 0);
            run.mask_buf.load_sparse(list);
            run.mask_buf.apply(row);
        }
        log_softmax(row, &mut run.lp);
        let cum = run.pool.slot(b).cum_log_prob();
        for (s, &l) in run.scores.iter_mut().zip(run.lp.iter()) {
            *s = cum + l;
        }
        lists.push(per_beam_topk(&run.scores, b as u32, p.k)?);
    }
    let (selected, stats) = select_top_bw(&lists, p.bw);
    run.selection.accumulate(&stats);
    let plan = run.pool.commit_step(&selected, t - 1)?;
    match &mut run.cache {
        CacheState::Separated { unshared, .. } => unshared.apply_reorder_in_place(&plan)?,
        CacheState::Paged(paged) => paged.fork_tables(plan.src())?,
    }
    Ok(())
}

fn finish_output(ctx: &EngineContext, run: &RequestRun, completion_us: u64) -> RequestOutput {
    let items = if run.failed.is_none() {
        run.pool.final_items()
    } else {
        Vec::new()
    };
    let invalid_items = match &ctx.vocab {
        Some(vocab) => items.iter().filter(|(toks, _)| !vocab.contains(toks)).count() as u64,
        None => 0,
    };
    let memory = match &run.cache {
        CacheState::Separated { shared, unshared } => {
            memory_report(Some(shared), Some(unshared), None)
        }
        CacheState::Paged(paged) => memory_report(None, None, Some(paged)),
    };
    RequestOutput {
        id: run.req.id,
        items,
        live_beams: run.pool.live(),
        invalid_items,
        selection: run.selection,
        memory,
        arrival_us: run.req.arrival_us,
        completion_us,
        error: run.failed.clone(),
    }
}

/// Execute one batch on one lane. Per-request failures isolate: a failed
/// request reports its error and the rest of the batch continues.
pub fn run_batch(
    ctx: &EngineContext,
    batch: Batch,
    lane: u32,
    mut clock: LaneClock,
    spans_out: &mut Vec<PhaseSpan>,
    outputs_out: &mut Vec<RequestOutput>,
) -> u64 {
    let graph = ctx.engine.graph_dispatch;
    let overlap = ctx.engine.overlap;
    let layers = ctx.model.config().layers as u32;
    // Wall mode measures; the cost values only shape virtual spans.
    let costs = match &clock {
        LaneClock::Virtual { costs, .. } => **costs,
        LaneClock::Wall { .. } => CostModel::default(),
    };

    let mut runs: Vec<RequestRun> = Vec::with_capacity(batch.requests.len());
    for req in batch.requests {
        match RequestRun::init(ctx, req.clone()) {
            Ok(run) => runs.push(run),
            Err(e) => {
                let mut run = RequestRun {
                    pool: BeamPool::init(1, 1).expect("trivial pool"),
                    cache: CacheState::Separated {
                        shared: SharedKvCache::new(1, 1, 1, 1).expect("trivial cache"),
                        unshared: UnsharedKvCache::init(1, 1, 1, 1, 1).expect("trivial cache"),
                    },
                    ws: ModelWorkspace::new(),
                    mask_buf: MaskBuffer::new(1),
                    mask_lists: Vec::new(),
                    logits: Vec::new(),
                    lp: Vec::new(),
                    scores: Vec::new(),
                    selection: SelectionStats::default(),
                    failed: None,
                    spans: Vec::new(),
                    req,
                };
                run.fail(&e);
                runs.push(run);
            }
        }
    }

    let nd = runs
        .iter()
        .filter(|r| r.failed.is_none())
        .map(|r| r.req.params.nd)
        .max()
        .unwrap_or(0);

    // Phase: prefill, overlapped with level-1 mask preparation.
    for run in runs.iter_mut().filter(|r| r.failed.is_none()) {
        let prompt_len = run.req.prompt.len();
        let masking = run.req.params.masking;
        let id = run.req.id;

        let model = &ctx.model;
        let vocab = ctx.vocab.as_ref();
        let RequestRun {
            req, cache, ws, mask_lists, ..
        } = run;
        let prompt = &req.prompt;
        let ((prod, p0, p1), (help, h0, h1)) = timed_pair(
            &mut clock,
            overlap,
            costs.prefill(prompt_len),
            submissions(layers * 4, graph),
            if masking { costs.mask_prep(1) } else { 0 },
            if masking { submissions(1, graph) } else { 0 },
            move || match cache {
                CacheState::Separated { shared, .. } => model.prefill(prompt, shared, ws),
                CacheState::Paged(paged) => model.prefill_paged(prompt, paged, ws),
            },
            move || -> Result<()> {
                // Level-1 masks are pre-generated at vocabulary load; the
                // helper just validates availability.
                if masking {
                    let vocab = vocab.expect("masking requires vocab");
                    mask_lists.clear();
                    mask_lists.push(vocab.level1_tokens().to_vec());
                }
                Ok(())
            },
        );
        run.spans.push(PhaseSpan {
            request_id: id,
            phase: "prefill".into(),
            start_us: p0,
            end_us: p1,
            lane,
            submissions: submissions(layers * 4, graph),
        });
        if masking {
            run.spans.push(PhaseSpan {
                request_id: id,
                phase: "mask_prep:1".into(),
                start_us: h0,
                end_us: h1,
                lane,
                submissions: submissions(1, graph),
            });
        }
        match prod {
            Ok(logits) => run.logits = logits,
            Err(e) => run.fail(&e),
        }
        if let Err(e) = help {
            run.fail(&e);
        }
    }

    // Steps 1..=nd: beam selection, then decode overlapped with the next
    // step's mask preparation.
    for t in 1..=nd {
        for run in runs.iter_mut().filter(|r| r.failed.is_none() && r.req.params.nd >= t) {
            let id = run.req.id;
            let p = run.req.params;
            let (beam_cost, beam_subs) = (costs.beam(p.bw, p.k), submissions(3, graph));
            let (sel, b0, b1) = timed(&mut clock, beam_cost, beam_subs, || select_step(ctx, run, t));
            run.spans.push(PhaseSpan {
                request_id: id,
                phase: format!("beam:{t}"),
                start_us: b0,
                end_us: b1,
                lane,
                submissions: beam_subs,
            });
            if let Err(e) = sel {
                run.fail(&e);
                continue;
            }

            let prompt_len = run.req.prompt.len();
            let live = run.pool.live();
            let masking = p.masking;
            let prep_next = masking && t < p.nd;
            let model = &ctx.model;
            let vocab = ctx.vocab.as_ref();
            let RequestRun {
                pool, cache, ws, mask_lists, ..
            } = run;
            let pool_ref: &BeamPool = pool;
            let tips = pool_ref.tips();
            let ((prod, d0, d1), (help, h0, h1)) = timed_pair(
                &mut clock,
                overlap,
                costs.decode(live, prompt_len),
                submissions(layers * 6, graph),
                if prep_next { costs.mask_prep(live) } else { 0 },
                if prep_next { submissions(1, graph) } else { 0 },
                move || match cache {
                    CacheState::Separated { shared, unshared } => {
                        model.decode(&tips, shared, unshared, t - 1, ws)
                    }
                    CacheState::Paged(paged) => model.decode_paged(&tips, paged, ws),
                },
                move || -> Result<()> {
                    if prep_next {
                        prep_mask_lists(vocab.expect("masking requires vocab"), pool_ref, mask_lists)?;
                    }
                    Ok(())
                },
            );
            run.spans.push(PhaseSpan {
                request_id: id,
                phase: format!("decode:{t}"),
                start_us: d0,
                end_us: d1,
                lane,
                submissions: submissions(layers * 6, graph),
            });
            if prep_next {
                run.spans.push(PhaseSpan {
                    request_id: id,
                    phase: format!("mask_prep:{}", t + 1),
                    start_us: h0,
                    end_us: h1,
                    lane,
                    submissions: submissions(1, graph),
                });
            }
            match prod {
                Ok(logits) => run.logits = logits,
                Err(e) => run.fail(&e),
            }
            if let Err(e) = help {
                run.fail(&e);
            }
        }
    }

    // Completion.
    let end = clock.end_us();
    for mut run in runs {
        let completion = end;
        run.spans
            .push(PhaseSpan::point(run.req.id, "complete", completion, lane));
        let output = finish_output(ctx, &run, completion);
        spans_out.append(&mut run.spans);
        outputs_out.push(output);
    }
    end
}
