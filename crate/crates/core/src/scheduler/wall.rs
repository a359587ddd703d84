//! Threaded wall-clock engine: one admission/forming authority, N
//! execution lanes, shared state limited to the queue and the metrics
//! sinks.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport};
use crate::scheduler::exec::{run_batch, EngineContext, LaneClock};
use crate::scheduler::{form_batch, pick_lane, Batch, BeamParams, PhaseSpan, Request, RequestOutput};

struct LaneQueue {
    batches: Mutex<VecDeque<Batch>>,
    ready: Condvar,
}

struct Shared {
    ctx: Arc<EngineContext>,
    origin: Instant,
    queue: Mutex<VecDeque<Request>>,
    lane_queues: Vec<LaneQueue>,
    lane_loads: Vec<AtomicU64>,
    stop: AtomicBool,
    intake_closed: AtomicBool,
    next_id: AtomicU64,
    inflight: AtomicU64,
    rejected: AtomicU64,
    spans: Mutex<Vec<PhaseSpan>>,
    outputs: Mutex<Vec<RequestOutput>>,
}

impl Shared {
    fn now_us(&self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}

/// Wall-clock engine handle. Spawns the forming thread and the lane
/// workers on start; [`WallEngine::drain`] completes in-flight work and
/// emits the metrics report.
pub struct WallEngine {
    shared: Arc<Shared>,
    former: Option<JoinHandle<()>>,
    lanes: Vec<JoinHandle<()>>,
}

impl WallEngine {
    pub fn start(ctx: Arc<EngineContext>) -> Result<WallEngine> {
        ctx.engine.validate()?;
        let lanes_n = ctx.engine.num_lanes;
        let shared = Arc::new(Shared {
            origin: Instant::now(),
            queue: Mutex::new(VecDeque::new()),
            lane_queues: (0..lanes_n)
                .map(|_| LaneQueue {
                    batches: Mutex::new(VecDeque::new()),
                    ready: Condvar::new(),
                })
                .collect(),
            lane_loads: (0..lanes_n).map(|_| AtomicU64::new(0)).collect(),
            stop: AtomicBool::new(false),
            intake_closed: AtomicBool::new(false),
            next_id: AtomicU64::new(0),
            inflight: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            spans: Mutex::new(Vec::new()),
            outputs: Mutex::new(Vec::new()),
            ctx,
        });

        let former = {
            let s = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("former".into())
                .spawn(move || former_loop(&s))
                .map_err(Error::Io)?
        };
        let lanes = (0..lanes_n)
            .map(|lane| {
                let s = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("lane-{lane}"))
                    .spawn(move || lane_loop(&s, lane))
                    .map_err(Error::Io)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(WallEngine {
            shared,
            former: Some(former),
            lanes,
        })
    }

    /// Enqueue a request; rejects with backpressure when the queue bound is
    /// reached (recorded, not silently dropped).
    pub fn submit(&self, prompt: Vec<u32>, params: BeamParams) -> Result<u64> {
        if self.shared.intake_closed.load(Ordering::SeqCst) {
            return Err(Error::State("engine is draining; intake closed".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        let mut queue = self.shared.queue.lock().expect("queue lock");
        if queue.len() >= self.shared.ctx.engine.queue_bound {
            self.shared.rejected.fetch_add(1, Ordering::SeqCst);
            return Err(Error::Backpressure {
                bound: self.shared.ctx.engine.queue_bound,
            });
        }
        let id = self.shared.next_id.fetch_add(1, Ordering::SeqCst);
        let arrival_us = self.shared.now_us();
        queue.push_back(Request {
            id,
            prompt,
            arrival_us,
            params,
        });
        self.shared.inflight.fetch_add(1, Ordering::SeqCst);
        drop(queue);
        self.shared
            .spans
            .lock()
            .expect("spans lock")
            .push(PhaseSpan::point(id, "enqueue", arrival_us, u32::MAX));
        Ok(id)
    }

    pub fn rejected(&self) -> u64 {
        self.shared.rejected.load(Ordering::SeqCst)
    }

    /// Close intake, complete in-flight work, and emit the report. On
    /// timeout the report is flagged partial.
    pub fn drain(mut self, timeout: Duration) -> MetricsReport {
        self.shared.intake_closed.store(true, Ordering::SeqCst);
        let deadline = Instant::now() + timeout;
        let mut partial = false;
        while self.shared.inflight.load(Ordering::SeqCst) > 0 {
            if Instant::now() > deadline {
                partial = true;
                break;
            }
            std::thread::sleep(Duration::from_micros(self.shared.ctx.engine.tick_us));
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        for lq in &self.shared.lane_queues {
            lq.ready.notify_all();
        }
        if let Some(former) = self.former.take() {
            let _ = former.join();
        }
        for lane in self.lanes.drain(..) {
            let _ = lane.join();
        }
        let outputs = self.shared.outputs.lock().expect("outputs lock");
        let spans = self.shared.spans.lock().expect("spans lock");
        let mut report = build_report(
            &outputs,
            &spans,
            self.shared.rejected.load(Ordering::SeqCst),
            self.shared.ctx.engine.slo_p99_target_us,
        );
        report.partial = partial;
        report
    }

    /// Copy of all phase spans recorded so far.
    pub fn spans_snapshot(&self) -> Vec<PhaseSpan> {
        self.shared.spans.lock().expect("spans lock").clone()
    }

    /// Copy of all request outputs recorded so far.
    pub fn outputs_snapshot(&self) -> Vec<RequestOutput> {
        self.shared.outputs.lock().expect("outputs lock").clone()
    }
}

impl Drop for WallEngine {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for lq in &self.shared.lane_queues {
            lq.ready.notify_all();
        }
        if let Some(former) = self.former.take() {
            let _ = former.join();
        }
        for lane in self.lanes.drain(..) {
            let _ = lane.join();
        }
    }
}

fn former_loop(s: &Shared) {
    let tick = Duration::from_micros(s.ctx.engine.tick_us);
    loop {
        std::thread::sleep(tick);
        let stop = s.stop.load(Ordering::SeqCst);
        let now = s.now_us();
        loop {
            let batch = {
                let mut queue = s.queue.lock().expect("queue lock");
                form_batch(&mut queue, now, &s.ctx.engine)
            };
            let Some(batch) = batch else { break };
            let loads: Vec<u64> = s.lane_loads.iter().map(|l| l.load(Ordering::SeqCst)).collect();
            let lane = pick_lane(&loads);
            {
                let mut spans = s.spans.lock().expect("spans lock");
                for req in &batch.requests {
                    spans.push(PhaseSpan::point(req.id, "batch_formed", now, lane as u32));
                }
            }
            s.lane_loads[lane].fetch_add(batch.total_tokens as u64, Ordering::SeqCst);
            let lq = &s.lane_queues[lane];
            lq.batches.lock().expect("lane lock").push_back(batch);
            lq.ready.notify_one();
        }
        if stop {
            break;
        }
    }
}

fn lane_loop(s: &Shared, lane: usize) {
    let lq = &s.lane_queues[lane];
    loop {
        let batch = {
            let mut guard = lq.batches.lock().expect("lane lock");
            loop {
                if let Some(b) = guard.pop_front() {
                    break Some(b);
                }
                if s.stop.load(Ordering::SeqCst) {
                    break None;
                }
                let (g, _) = lq
                    .ready
                    .wait_timeout(guard, Duration::from_millis(5))
                    .expect("lane wait");
                guard = g;
            }
        };
        let Some(batch) = batch else { break };
        let tokens = batch.total_tokens as u64;
        let n = batch.requests.len() as u64;
        let mut spans = Vec::new();
        let mut outputs = Vec::new();
        run_batch(
            &s.ctx,
            batch,
            lane as u32,
            LaneClock::Wall { origin: s.origin },
            &mut spans,
            &mut outputs,
        );
        s.spans.lock().expect("spans lock").append(&mut spans);
        s.outputs.lock().expect("outputs lock").append(&mut outputs);
        s.lane_loads[lane].fetch_sub(tokens, Ordering::SeqCst);
        s.inflight.fetch_sub(n, Ordering::SeqCst);
    }
}
