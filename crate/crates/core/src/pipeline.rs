//! Concurrent capture, fusion and beamforming.
//!
//! Four threads share a run clock (seconds since the run started):
//!
//! * the audio producer cuts the recording into 50%-overlapped chunks,
//! * the detection producer replays detector events,
//! * the vision consumer turns detections into steering angles and appends
//!   them to the DoA history,
//! * the beamformer consumer steers every chunk with the newest DoA whose
//!   timestamp is not after the chunk midpoint, then beamforms it.
//!
//! In `realtime_paced` mode both producers release items on the wall clock.
//! In `as_fast_as_possible` mode nothing sleeps; instead the beamformer waits
//! until vision has appended every detection up to the chunk midpoint, and
//! vision never evicts a history entry a pending chunk may still need. The
//! output then depends only on the data and matches the offline driver bit
//! for bit.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::audio::MultichannelSignal;
use crate::beamformer::{chunk_timestamp, AudioChunk, BeamformerState, FrameSpec};
use crate::error::{Error, Result};
use crate::geometry::{DoaAngles, MicArray, PropagationConfig};
use crate::output::atomic_write;
use crate::vision::{detection_to_doa, CameraModel, DetectionEvent, MountingOffset};

pub const DEFAULT_HISTORY_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    RealtimePaced,
    #[default]
    AsFastAsPossible,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::RealtimePaced => "realtime_paced",
            PipelineMode::AsFastAsPossible => "as_fast_as_possible",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "realtime_paced" | "realtime" => Ok(PipelineMode::RealtimePaced),
            "as_fast_as_possible" | "afap" => Ok(PipelineMode::AsFastAsPossible),
            other => Err(format!(
                "unknown mode '{other}' (expected realtime_paced or as_fast_as_possible)"
            )),
        }
    }
}

/// What a full queue does with a new item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// The producer waits for space (lossless).
    #[default]
    Block,
    /// The oldest queued item is discarded and counted.
    DropOldest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub mode: PipelineMode,
    pub history_capacity: usize,
    pub audio_queue_depth: usize,
    pub vision_queue_depth: usize,
    pub overflow: OverflowPolicy,
    pub watchdog_s: f64,
    /// Records captured before this run time are left out of the statistics.
    /// Paced runs only; an unpaced run has no steady state to wait for.
    pub warmup_s: f64,
    /// Fault injection: the vision consumer sleeps this long per detection.
    pub vision_stall_ms: f64,
    /// Run length; the recording and the detections are looped to fill it.
    /// Defaults to the recording length.
    pub run_duration_s: Option<f64>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            mode: PipelineMode::default(),
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            audio_queue_depth: 4,
            vision_queue_depth: 2,
            overflow: OverflowPolicy::Block,
            watchdog_s: 5.0,
            warmup_s: 10.0,
            vision_stall_ms: 0.0,
            run_duration_s: None,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.history_capacity == 0 {
            return Err(Error::invalid("history_capacity must be > 0"));
        }
        if self.audio_queue_depth == 0 || self.vision_queue_depth == 0 {
            return Err(Error::invalid("queue depths must be > 0"));
        }
        if !(self.watchdog_s.is_finite() && self.watchdog_s > 0.0) {
            return Err(Error::invalid("watchdog_s must be > 0"));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return Err(Error::invalid("warmup_s must be >= 0"));
        }
        if !(self.vision_stall_ms.is_finite() && self.vision_stall_ms >= 0.0) {
            return Err(Error::invalid("vision_stall_ms must be >= 0"));
        }
        if let Some(d) = self.run_duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid("run_duration_s must be > 0"));
            }
        }
        Ok(())
    }

    fn watchdog(&self) -> Duration {
        Duration::from_secs_f64(self.watchdog_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueError {
    Closed,
    Timeout,
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
    high_water: usize,
}

/// Fixed-capacity FIFO shared between one producer and one consumer.
pub struct BoundedQueue<T> {
    state: Mutex<QueueState<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    policy: OverflowPolicy,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, policy: OverflowPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue capacity must be > 0"));
        }
        Ok(Self {
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                dropped: 0,
                high_water: 0,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
            policy,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&self, item: T, timeout: Duration) -> std::result::Result<(), QueueError> {
        let deadline = Instant::now() + timeout;
        let mut st = lock(&self.state);
        loop {
            if st.closed {
                return Err(QueueError::Closed);
            }
            if st.items.len() < self.capacity {
                break;
            }
            match self.policy {
                OverflowPolicy::DropOldest => {
                    st.items.pop_front();
                    st.dropped += 1;
                }
                OverflowPolicy::Block => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(QueueError::Timeout);
                    }
                    st = self
                        .not_full
                        .wait_timeout(st, deadline - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                }
            }
        }
        st.items.push_back(item);
        st.high_water = st.high_water.max(st.items.len());
        drop(st);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Next item; `Ok(None)` once the queue is closed and drained.
    pub fn pop(&self, timeout: Option<Duration>) -> std::result::Result<Option<T>, QueueError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = lock(&self.state);
        loop {
            if let Some(item) = st.items.pop_front() {
                drop(st);
                self.not_full.notify_one();
                return Ok(Some(item));
            }
            if st.closed {
                return Ok(None);
            }
            st = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(QueueError::Timeout);
                    }
                    self.not_empty
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
                None => self.not_empty.wait(st).unwrap_or_else(|p| p.into_inner()),
            };
        }
    }

    /// Wakes every waiter; later pushes fail, pops drain what is left.
    pub fn close(&self) {
        lock(&self.state).closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn len(&self) -> usize {
        lock(&self.state).items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        lock(&self.state).dropped
    }

    pub fn high_water(&self) -> usize {
        lock(&self.state).high_water
    }
}

/// Ring buffer of timestamped steering estimates, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaHistory {
    entries: VecDeque<(f64, DoaAngles)>,
    capacity: usize,
}

impl DoaHistory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("history capacity must be > 0"));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, timestamp: f64, doa: DoaAngles) -> Result<()> {
        if !timestamp.is_finite() {
            return Err(Error::invalid("history timestamp must be finite"));
        }
        if let Some((last, _)) = self.entries.back() {
            if timestamp < *last {
                return Err(Error::invalid(format!(
                    "history timestamps must be non-decreasing ({timestamp} after {last})"
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((timestamp, doa));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, DoaAngles)> {
        self.entries.iter()
    }

    /// Timestamp of the oldest entry that would remain after one more push.
    fn oldest_after_push(&self, incoming: f64) -> Option<f64> {
        if self.entries.len() < self.capacity {
            None
        } else if self.capacity == 1 {
            Some(incoming)
        } else {
            Some(self.entries[1].0)
        }
    }
}

/// Newest entry with timestamp `<= t_mid`; among equal timestamps the one
/// inserted last.
pub fn lookup_closest_not_future(history: &DoaHistory, t_mid: f64) -> Option<(f64, DoaAngles)> {
    let i = history.entries.partition_point(|(ts, _)| *ts <= t_mid);
    i.checked_sub(1).map(|i| history.entries[i])
}

pub fn chunk_midpoint(chunk: &AudioChunk, spec: &FrameSpec, sample_rate: f64) -> f64 {
    chunk.midpoint(spec, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    AudioE2e,
    VisionE2e,
    Beamforming,
    OverlapAdd,
    DoaComputation,
    PacingError,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::AudioE2e,
        Stage::VisionE2e,
        Stage::Beamforming,
        Stage::OverlapAdd,
        Stage::DoaComputation,
        Stage::PacingError,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::AudioE2e => "audio_e2e",
            Stage::VisionE2e => "vision_e2e",
            Stage::Beamforming => "beamforming",
            Stage::OverlapAdd => "overlap_add",
            Stage::DoaComputation => "doa_computation",
            Stage::PacingError => "pacing_error",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timed span on the run clock. For the e2e stages `t_capture` is the
/// sensor capture time; for processing stages it is the start of the work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyRecord {
    pub stage: Stage,
    pub t_capture: f64,
    pub t_end: f64,
}

impl LatencyRecord {
    pub fn new(stage: Stage, t_capture: f64, t_end: f64) -> Result<Self> {
        if !(t_capture.is_finite() && t_end.is_finite()) || t_end < t_capture {
            return Err(Error::invalid(format!(
                "latency record needs finite t_end >= t_capture, got {t_capture} .. {t_end}"
            )));
        }
        Ok(Self { stage, t_capture, t_end })
    }

    /// `t_end - t_capture`, seconds.
    pub fn e2e(&self) -> f64 {
        self.t_end - self.t_capture
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageStats {
    pub stage: Stage,
    pub count: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (zero for a single record).
    pub std_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Per-stage statistics of the given records, in [`Stage::ALL`] order.
/// Stages without records are omitted.
pub fn latency_stats(records: &[LatencyRecord]) -> Result<Vec<StageStats>> {
    if records.is_empty() {
        return Err(Error::invalid("no latency records"));
    }
    let mut out = Vec::new();
    for stage in Stage::ALL {
        let mut ms: Vec<f64> = records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.e2e() * 1e3)
            .collect();
        if ms.is_empty() {
            continue;
        }
        let n = ms.len();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        ms.sort_by(f64::total_cmp);
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        out.push(StageStats {
            stage,
            count: n,
            mean_ms: mean,
            std_ms: std,
            p95_ms: ms[rank - 1],
            max_ms: ms[n - 1],
        });
    }
    Ok(out)
}

/// Records captured at or after `warmup_s` on the run clock.
pub fn exclude_warmup(records: &[LatencyRecord], warmup_s: f64) -> Vec<LatencyRecord> {
    records.iter().filter(|r| r.t_capture >= warmup_s).copied().collect()
}

/// DoA applied to one chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringEntry {
    pub chunk_index: u64,
    pub chunk_midpoint_s: f64,
    /// `None` when no estimate was available and broadside was used.
    pub doa_timestamp_s: Option<f64>,
    pub doa: DoaAngles,
}

/// Everything the pipeline needs besides its settings.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub signal: MultichannelSignal,
    pub detections: Vec<DetectionEvent>,
    pub array: MicArray,
    pub prop: PropagationConfig,
    pub camera: CameraModel,
    pub mounting_offset: MountingOffset,
    pub frame: FrameSpec,
    /// Only detections with this label steer the beam; `None` accepts all.
    pub steer_label: Option<String>,
    /// Detector latency per label, used to recover frame capture times in
    /// realtime mode. Unknown labels count as zero latency.
    pub detection_latency: HashMap<String, f64>,
}

impl PipelineInputs {
    fn accepts(&self, e: &DetectionEvent) -> bool {
        self.steer_label.as_ref().is_none_or(|l| *l == e.target_label)
    }

    /// The `(timestamp, DoA)` list the vision consumer will build, for
    /// replay through [`crate::beamformer::process_offline`].
    pub fn steering_schedule(&self) -> Vec<(f64, DoaAngles)> {
        self.detections
            .iter()
            .filter(|e| self.accepts(e))
            .filter_map(|e| {
                detection_to_doa(&self.camera, self.mounting_offset, e)
                    .ok()
                    .map(|d| (e.t_s, d))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub output: MultichannelSignal,
    pub steering_log: Vec<SteeringEntry>,
    pub latency: Vec<LatencyRecord>,
    pub chunks_produced: u64,
    pub audio_chunks_dropped: u64,
    pub detections_received: u64,
    pub detections_dropped: u64,
    pub doa_updates: u64,
    pub doa_failures: u64,
    pub audio_queue_high_water: usize,
    pub warmup_s: f64,
    pub wall_time_s: f64,
}

impl PipelineReport {
    pub fn chunks_processed(&self) -> u64 {
        self.steering_log.len() as u64
    }

    /// True once at least one chunk was steered by a visual estimate.
    pub fn visual_lock(&self) -> bool {
        self.steering_log.iter().any(|e| e.doa_timestamp_s.is_some())
    }

    /// Chunks steered with a DoA newer than their midpoint.
    pub fn causality_violations(&self) -> usize {
        self.steering_log
            .iter()
            .filter(|e| e.doa_timestamp_s.is_some_and(|ts| ts > e.chunk_midpoint_s))
            .count()
    }

    /// `(missing, duplicated)` chunk indices in the steering log.
    pub fn sequence_audit(&self) -> (u64, u64) {
        let mut seen = vec![0u32; self.chunks_produced as usize];
        let mut stray = 0;
        for e in &self.steering_log {
            match seen.get_mut(e.chunk_index as usize) {
                Some(c) => *c += 1,
                None => stray += 1,
            }
        }
        let missing = seen.iter().filter(|c| **c == 0).count() as u64;
        let dup = seen.iter().map(|c| c.saturating_sub(1) as u64).sum::<u64>() + stray;
        (missing, dup)
    }

    /// Statistics after the warm-up discard, one slot per stage.
    pub fn stage_stats(&self) -> Vec<(Stage, Option<StageStats>)> {
        let kept = exclude_warmup(&self.latency, self.warmup_s);
        let stats = latency_stats(&kept).unwrap_or_default();
        Stage::ALL
            .iter()
            .map(|s| (*s, stats.iter().find(|x| x.stage == *s).copied()))
            .collect()
    }

    /// Structured text summary (TOML).
    pub fn to_toml_string(&self, output_wav: Option<&Path>) -> String {
        use toml::{Table, Value};
        let mut run = Table::new();
        run.insert("mode".into(), Value::from(self.mode.as_str()));
        if let Some(p) = output_wav {
            run.insert("output_wav".into(), Value::from(p.display().to_string()));
        }
        let (missing, dup) = self.sequence_audit();
        let ints = [
            ("chunks_produced", self.chunks_produced),
            ("chunks_processed", self.chunks_processed()),
            ("missing_chunks", missing),
            ("duplicated_chunks", dup),
            ("audio_chunks_dropped", self.audio_chunks_dropped),
            ("detections_received", self.detections_received),
            ("detections_dropped", self.detections_dropped),
            ("doa_updates", self.doa_updates),
            ("doa_failures", self.doa_failures),
            ("causality_violations", self.causality_violations() as u64),
            ("audio_queue_high_water", self.audio_queue_high_water as u64),
        ];
        for (k, v) in ints {
            run.insert(k.into(), Value::Integer(v as i64));
        }
        run.insert("visual_lock".into(), Value::Boolean(self.visual_lock()));
        if !self.visual_lock() {
            run.insert(
                "note".into(),
                Value::from("no visual lock: every chunk was beamformed at broadside"),
            );
        }
        run.insert("warmup_s".into(), Value::Float(self.warmup_s));
        run.insert("wall_time_s".into(), Value::Float(self.wall_time_s));
        let mut latency = Table::new();
        for (stage, stats) in self.stage_stats() {
            let mut t = Table::new();
            match stats {
                Some(s) => {
                    t.insert("count".into(), Value::Integer(s.count as i64));
                    t.insert("mean_ms".into(), Value::Float(s.mean_ms));
                    t.insert("std_ms".into(), Value::Float(s.std_ms));
                    t.insert("p95_ms".into(), Value::Float(s.p95_ms));
                    t.insert("max_ms".into(), Value::Float(s.max_ms));
                }
                None => {
                    t.insert("count".into(), Value::Integer(0));
                }
            }
            latency.insert(stage.as_str().into(), Value::Table(t));
        }
        let mut root = Table::new();
        root.insert("run".into(), Value::Table(run));
        root.insert("latency".into(), Value::Table(latency));
        toml::to_string(&root).unwrap_or_default()
    }
}

pub fn write_steering_log_csv(path: &Path, log: &[SteeringEntry]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["chunk_index", "chunk_midpoint_s", "doa_timestamp_s", "theta_rad", "phi_rad"])?;
        for e in log {
            let ts = e.doa_timestamp_s.map_or_else(|| "NONE".to_string(), |t| t.to_string());
            wr.write_record([
                e.chunk_index.to_string(),
                e.chunk_midpoint_s.to_string(),
                ts,
                e.doa.theta.to_string(),
                e.doa.phi.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn write_latency_csv(path: &Path, records: &[LatencyRecord]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["stage", "t_capture", "t_end", "e2e_ms"])?;
        for r in records {
            wr.write_record([
                r.stage.as_str().to_string(),
                r.t_capture.to_string(),
                r.t_end.to_string(),
                (r.e2e() * 1e3).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}

struct AudioItem {
    chunk: AudioChunk,
    capture: f64,
}

struct DetectionItem {
    event: DetectionEvent,
    capture: f64,
    /// Timestamp of the next event in the stream (infinite after the last).
    horizon: f64,
}

/// Coordination state shared by all threads.
struct Progress {
    /// Every detection with `t_s < complete_through` has been handled.
    complete_through: f64,
    /// Midpoint of the next chunk the beamformer will look up.
    next_midpoint: f64,
    beamformer_done: bool,
    stop: bool,
    abort: Option<String>,
}

struct Shared {
    progress: Mutex<Progress>,
    changed: Condvar,
    history: Mutex<DoaHistory>,
    audio_q: BoundedQueue<AudioItem>,
    det_q: BoundedQueue<DetectionItem>,
    clock: Instant,
}

impl Shared {
    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    fn abort(&self, msg: String) {
        {
            let mut p = lock(&self.progress);
            if p.abort.is_none() {
                log::error!("pipeline watchdog: {msg}");
                p.abort = Some(msg);
            }
            p.stop = true;
        }
        self.changed.notify_all();
        self.audio_q.close();
        self.det_q.close();
    }

    fn update(&self, f: impl FnOnce(&mut Progress)) {
        f(&mut lock(&self.progress));
        self.changed.notify_all();
    }

    /// Waits until `ready` holds, the run stops, or the watchdog fires.
    /// Returns false if the caller should bail out.
    fn wait_for(&self, what: &str, watchdog: Duration, ready: impl Fn(&Progress) -> bool) -> bool {
        let deadline = Instant::now() + watchdog;
        let mut p = lock(&self.progress);
        loop {
            if p.stop {
                return false;
            }
            if ready(&p) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                drop(p);
                self.abort(format!("{what} made no progress for {:.1} s", watchdog.as_secs_f64()));
                return false;
            }
            p = self
                .changed
                .wait_timeout(p, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Sleeps until run time `t`, waking early if the run stops.
    fn sleep_until(&self, t: f64) -> bool {
        loop {
            let remaining = t - self.now();
            if remaining <= 0.0 {
                return true;
            }
            let p = lock(&self.progress);
            if p.stop {
                return false;
            }
            let slice = Duration::from_secs_f64(remaining.min(0.05));
            drop(self.changed.wait_timeout(p, slice).unwrap_or_else(|e| e.into_inner()));
        }
    }
}

/// Zero-padded, looped view of the recording.
struct LoopedSource<'a> {
    signal: &'a MultichannelSignal,
    total_len: usize,
    spec: FrameSpec,
}

impl LoopedSource<'_> {
    fn chunk(&self, index: u64) -> AudioChunk {
        let hop = self.spec.hop() as i64;
        let start = (index as i64 - 1) * hop;
        let loop_len = self.signal.len();
        let samples = self
            .signal
            .channels()
            .iter()
            .map(|ch| {
                (0..self.spec.frame_length() as i64)
                    .map(|j| {
                        let i = start + j;
                        if i < 0 || i >= self.total_len as i64 {
                            0.0
                        } else {
                            ch[i as usize % loop_len]
                        }
                    })
                    .collect()
            })
            .collect();
        AudioChunk {
            samples,
            timestamp: chunk_timestamp(self.signal.start_time(), index, &self.spec, self.signal.sample_rate()),
            chunk_index: index,
        }
    }
}

fn push_record(records: &mut Vec<LatencyRecord>, stage: Stage, t0: f64, t1: f64) {
    // Clock reads are monotonic, so t1 >= t0 always holds here.
    records.push(LatencyRecord {
        stage,
        t_capture: t0,
        t_end: t1.max(t0),
    });
}

/// Runs the four-thread pipeline to completion.
pub fn run_pipeline(inputs: &PipelineInputs, settings: &PipelineSettings) -> Result<PipelineReport> {
    settings.validate()?;
    let signal = &inputs.signal;
    if signal.is_empty() {
        return Err(Error::invalid("pipeline input signal is empty"));
    }
    if signal.num_channels() != inputs.array.len() {
        return Err(Error::invalid(format!(
            "signal has {} channels, array has {} microphones",
            signal.num_channels(),
            inputs.array.len()
        )));
    }
    let fs = signal.sample_rate();
    if (fs - inputs.prop.sample_rate()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "signal rate {fs} Hz differs from the configured {} Hz",
            inputs.prop.sample_rate()
        )));
    }
    let spec = inputs.frame;
    let total_len = match settings.run_duration_s {
        Some(d) => (d * fs).round() as usize,
        None => signal.len(),
    };
    let chunk_count = spec.chunk_count(total_len) as u64;
    let loop_period = signal.len() as f64 / fs;
    let loops = (total_len as f64 / signal.len() as f64).ceil().max(1.0) as usize;
    let realtime = settings.mode == PipelineMode::RealtimePaced;
    let watchdog = settings.watchdog();
    let hop_s = spec.hop() as f64 / fs;

    let source = LoopedSource { signal, total_len, spec };
    let first_mid = source.chunk(0).midpoint(&spec, fs);
    let shared = Shared {
        progress: Mutex::new(Progress {
            complete_through: f64::NEG_INFINITY,
            next_midpoint: first_mid,
            beamformer_done: false,
            stop: false,
            abort: None,
        }),
        changed: Condvar::new(),
        history: Mutex::new(DoaHistory::new(settings.history_capacity)?),
        audio_q: BoundedQueue::new(settings.audio_queue_depth, settings.overflow)?,
        det_q: BoundedQueue::new(settings.vision_queue_depth, settings.overflow)?,
        clock: Instant::now(),
    };

    let (audio_rec, bf_result, vision_result) = thread::scope(|s| {
        let sh = &shared;
        let src = &source;

        let audio = thread::Builder::new()
            .name("audio-producer".into())
            .spawn_scoped(s, move || {
                let mut records = Vec::new();
                for r in 0..chunk_count {
                    if realtime {
                        let deadline = (r + 1) as f64 * hop_s;
                        if !sh.sleep_until(deadline) {
                            break;
                        }
                        push_record(&mut records, Stage::PacingError, deadline, sh.now());
                    }
                    let chunk = src.chunk(r);
                    let capture = if realtime { chunk.timestamp } else { sh.now() };
                    match sh.audio_q.push(AudioItem { chunk, capture }, watchdog) {
                        Ok(()) => {}
                        Err(QueueError::Closed) => break,
                        Err(QueueError::Timeout) => {
                            sh.abort("audio queue stayed full: the beamformer is stalled".into());
                            break;
                        }
                    }
                }
                sh.audio_q.close();
                records
            })
            .expect("spawn audio producer");

        let detection = thread::Builder::new()
            .name("detection-producer".into())
            .spawn_scoped(s, move || {
                let mut stream = (0..loops)
                    .flat_map(|k| {
                        inputs.detections.iter().map(move |e| {
                            let mut e = e.clone();
                            e.t_s += k as f64 * loop_period;
                            e
                        })
                    })
                    .peekable();
                while let Some(event) = stream.next() {
                    let horizon = stream.peek().map_or(f64::INFINITY, |e| e.t_s);
                    let capture = if realtime {
                        if !sh.sleep_until(event.t_s) {
                            break;
                        }
                        let lat = inputs.detection_latency.get(&event.target_label).copied().unwrap_or(0.0);
                        event.t_s - lat
                    } else {
                        sh.now()
                    };
                    let item = DetectionItem { event, capture, horizon };
                    match sh.det_q.push(item, watchdog) {
                        Ok(()) => {}
                        Err(QueueError::Closed) => break,
                        Err(QueueError::Timeout) => {
                            sh.abort("detection queue stayed full: the vision consumer is stalled".into());
                            break;
                        }
                    }
                }
                sh.det_q.close();
            })
            .expect("spawn detection producer");

        let vision = thread::Builder::new()
            .name("vision-consumer".into())
            .spawn_scoped(s, move || {
                let mut records = Vec::new();
                let (mut received, mut updates, mut failures) = (0u64, 0u64, 0u64);
                let stall = Duration::from_secs_f64(settings.vision_stall_ms / 1e3);
                while let Ok(Some(item)) = sh.det_q.pop(None) {
                    received += 1;
                    if !stall.is_zero() {
                        thread::sleep(stall);
                    }
                    if inputs.accepts(&item.event) {
                        let t0 = sh.now();
                        match detection_to_doa(&inputs.camera, inputs.mounting_offset, &item.event) {
                            Ok(doa) => {
                                let ts = item.event.t_s;
                                if !realtime {
                                    let oldest = lock(&sh.history).oldest_after_push(ts);
                                    if let Some(oldest) = oldest {
                                        let ok = sh.wait_for("vision consumer (history gate)", watchdog, |p| {
                                            p.beamformer_done || p.next_midpoint >= oldest
                                        });
                                        if !ok {
                                            break;
                                        }
                                    }
                                }
                                if let Err(e) = lock(&sh.history).push(ts, doa) {
                                    log::warn!("dropping detection: {e}");
                                    failures += 1;
                                } else {
                                    updates += 1;
                                    let t1 = sh.now();
                                    push_record(&mut records, Stage::DoaComputation, t0, t1);
                                    push_record(&mut records, Stage::VisionE2e, item.capture, t1);
                                }
                            }
                            Err(e) => {
                                log::warn!("detection at {} s rejected: {e}", item.event.t_s);
                                failures += 1;
                            }
                        }
                    }
                    if !realtime {
                        sh.update(|p| p.complete_through = p.complete_through.max(item.horizon));
                    }
                }
                sh.update(|p| p.complete_through = f64::INFINITY);
                (records, received, updates, failures)
            })
            .expect("spawn vision consumer");

        let beamformer = thread::Builder::new()
            .name("beamformer".into())
            .spawn_scoped(s, move || -> Result<(Vec<f64>, Vec<SteeringEntry>, Vec<LatencyRecord>)> {
                let mut state = BeamformerState::new(spec, inputs.array.len(), fs)?;
                let mut out = vec![0.0; total_len];
                let mut log_entries = Vec::with_capacity(chunk_count as usize);
                let mut records = Vec::with_capacity(3 * chunk_count as usize);
                let hop = spec.hop();
                loop {
                    let item = match sh.audio_q.pop(Some(watchdog)) {
                        Ok(Some(item)) => item,
                        Ok(None) => break,
                        Err(_) => {
                            sh.abort("no audio chunk arrived: the audio producer is stalled".into());
                            break;
                        }
                    };
                    let chunk = item.chunk;
                    let mid = chunk_midpoint(&chunk, &spec, fs);
                    if !realtime && !sh.wait_for("beamformer (vision gate)", watchdog, |p| p.complete_through > mid) {
                        break;
                    }
                    let entry = lookup_closest_not_future(&lock(&sh.history), mid);
                    if !realtime {
                        sh.update(|p| p.next_midpoint = mid + hop_s);
                    }
                    let applied = match entry {
                        Some((ts, doa)) => match state.steer(&doa, &inputs.array, &inputs.prop) {
                            Ok(()) => (Some(ts), doa),
                            Err(e) => {
                                log::warn!("steering to {doa:?} failed, keeping previous delays: {e}");
                                (None, DoaAngles::BROADSIDE)
                            }
                        },
                        None => {
                            state.steer_broadside();
                            (None, DoaAngles::BROADSIDE)
                        }
                    };
                    let t_start = sh.now();
                    let (block, timing) = match state.process_chunk_timed(&chunk) {
                        Ok(v) => v,
                        Err(e) => {
                            sh.abort(format!("chunk {} failed: {e}", chunk.chunk_index));
                            return Err(e);
                        }
                    };
                    let t_end = sh.now();
                    let at = chunk.chunk_index as usize * hop;
                    if at < total_len {
                        let n = block.len().min(total_len - at);
                        out[at..at + n].copy_from_slice(&block[..n]);
                    }
                    log_entries.push(SteeringEntry {
                        chunk_index: chunk.chunk_index,
                        chunk_midpoint_s: mid,
                        doa_timestamp_s: applied.0,
                        doa: applied.1,
                    });
                    let bf = timing.beamform.as_secs_f64();
                    push_record(&mut records, Stage::Beamforming, t_start, t_start + bf);
                    push_record(
                        &mut records,
                        Stage::OverlapAdd,
                        t_start + bf,
                        t_start + bf + timing.overlap_add.as_secs_f64(),
                    );
                    push_record(&mut records, Stage::AudioE2e, item.capture, t_end);
                }
                sh.update(|p| {
                    p.beamformer_done = true;
                    p.stop = true;
                });
                sh.det_q.close();
                Ok((out, log_entries, records))
            })
            .expect("spawn beamformer");

        let audio_rec = audio.join().expect("audio producer panicked");
        detection.join().expect("detection producer panicked");
        let vision_result = vision.join().expect("vision consumer panicked");
        let bf_result = beamformer.join().expect("beamformer panicked");
        (audio_rec, bf_result, vision_result)
    });

    let wall_time_s = shared.now();
    if let Some(msg) = lock(&shared.progress).abort.clone() {
        return Err(Error::Aborted(msg));
    }
    let (out, steering_log, mut latency) = bf_result?;
    let (vision_rec, received, updates, failures) = vision_result;
    latency.extend(vision_rec);
    latency.extend(audio_rec);
    latency.sort_by(|a, b| a.stage.cmp(&b.stage).then(a.t_capture.total_cmp(&b.t_capture)));
    Ok(PipelineReport {
        mode: settings.mode,
        output: MultichannelSignal::mono(fs, out)?.with_start_time(signal.start_time()),
        steering_log,
        latency,
        chunks_produced: chunk_count,
        audio_chunks_dropped: shared.audio_q.dropped(),
        detections_received: received,
        detections_dropped: shared.det_q.dropped(),
        doa_updates: updates,
        doa_failures: failures,
        audio_queue_high_water: shared.audio_q.high_water(),
        warmup_s: if realtime { settings.warmup_s } else { 0.0 },
        wall_time_s,
    })
}
