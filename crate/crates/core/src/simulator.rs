//! Discrete-event driver feeding a request stream to a [`Scheduler`].

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use crate::ensemble::{predict_ensemble, LabelId, ShardId};
use crate::error::{invalid, Error, Result};
use crate::oracle::{hash_words, Oracle, OracleConfig, Predictor, SampleId};
use crate::scheduler::{
    JobId, MitigationOutcome, Request, RequestKind, Scheduler, SchedulerAction, SchedulerStats,
    Timing, VariantConfig,
};
use crate::workload::validate_stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// time to retrain one constituent model
    pub retrain_duration: f64,
    pub inference_service_time: f64,
    /// extra delay for inferences released after a single-context update
    pub switch_latency: f64,
    pub horizon: f64,
    /// mixed into the mitigation seed
    pub seed: u64,
}

impl SimParams {
    pub fn new(retrain_duration: f64, horizon: f64) -> Self {
        Self {
            retrain_duration,
            inference_service_time: 0.0,
            switch_latency: 0.0,
            horizon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retrain_duration > 0.0) || !self.retrain_duration.is_finite() {
            return Err(invalid(format!(
                "retrain duration {} must be positive",
                self.retrain_duration
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.inference_service_time >= 0.0) || !(self.switch_latency >= 0.0) {
            return Err(invalid("service time and switch latency must be non-negative"));
        }
        Ok(())
    }

    fn timing(&self) -> Timing {
        Timing {
            retrain_duration: self.retrain_duration,
            service_time: self.inference_service_time,
            switch_latency: self.switch_latency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    RetrainComplete(JobId),
    Arrival(Request),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
}

impl SimEvent {
    /// Completions first, then unlearning arrivals, then inferences.
    pub fn priority(&self) -> u8 {
        match self.kind {
            EventKind::RetrainComplete(_) => 0,
            EventKind::Arrival(r) if !r.is_inference() => 1,
            EventKind::Arrival(_) => 2,
        }
    }
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.priority().cmp(&other.priority()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue of events with insertion order breaking remaining ties.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(SimEvent { time, kind, seq }));
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Certified,
    Uncertified,
    /// answered without certification (baseline or disabled mode)
    Unchecked,
    RefusedDetected,
    RefusedLowConfidence,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Certified => "certified",
            Verdict::Uncertified => "uncertified",
            Verdict::Unchecked => "unchecked",
            Verdict::RefusedDetected => "refused_detected",
            Verdict::RefusedLowConfidence => "refused_low_confidence",
        }
    }

    pub fn is_refused(self) -> bool {
        matches!(self, Verdict::RefusedDetected | Verdict::RefusedLowConfidence)
    }
}

/// One terminal inference outcome. Event indices count processed events
/// from 1 and order everything that happened in the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival: f64,
    pub response: f64,
    pub verdict: Verdict,
    pub label: Option<LabelId>,
    pub postponed: bool,
    pub arrival_event: u64,
    pub response_event: u64,
}

impl RequestRecord {
    pub fn wait(&self) -> f64 {
        self.response - self.arrival
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearningRecord {
    pub request_id: u64,
    pub arrival: f64,
    /// shard the request was recorded against, after any shuffling
    pub shard: ShardId,
    pub event: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub job: JobId,
    pub shard: ShardId,
    pub start: f64,
    pub completion: f64,
    pub covers: Vec<u64>,
    pub completion_event: u64,
    /// shard version serving once the job finished
    pub version_after: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    /// sorted by request id
    pub requests: Vec<RequestRecord>,
    pub unlearning: Vec<UnlearningRecord>,
    /// sorted by completion
    pub jobs: Vec<JobRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// mean wait over answered inferences; 0 when none were answered
    pub awt: f64,
    pub answered: usize,
    pub refused: usize,
    /// retraining job completions
    pub nor: u64,
    pub uncertified_responses: usize,
    pub postponed_count: usize,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub p_uc: f64,
    pub updates: u64,
    pub stats: SchedulerStats,
}

impl Metrics {
    /// Derives latency figures from the per-request log.
    pub fn from_log(log: &RunLog, stats: SchedulerStats, updates: u64) -> Self {
        let answered: Vec<&RequestRecord> =
            log.requests.iter().filter(|r| !r.verdict.is_refused()).collect();
        let awt = mean_wait(&log.requests);
        let mut waits: Vec<f64> = answered.iter().map(|r| r.wait()).collect();
        waits.sort_by(f64::total_cmp);
        Self {
            awt,
            answered: answered.len(),
            refused: log.requests.len() - answered.len(),
            nor: log.jobs.len() as u64,
            uncertified_responses: answered
                .iter()
                .filter(|r| r.verdict == Verdict::Uncertified)
                .count(),
            postponed_count: log.requests.iter().filter(|r| r.postponed).count(),
            p50: percentile(&waits, 50.0),
            p95: percentile(&waits, 95.0),
            p99: percentile(&waits, 99.0),
            p_uc: estimate_p_uc(&stats),
            updates,
            stats,
        }
    }
}

/// Mean wait over non-refused records, summed in log order.
pub fn mean_wait(records: &[RequestRecord]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records.iter().filter(|r| !r.verdict.is_refused()) {
        sum += r.wait();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Nearest-rank percentile of sorted values; 0 for an empty slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (pct / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Fraction of judgements against a non-empty impacted set that failed.
pub fn estimate_p_uc(stats: &SchedulerStats) -> f64 {
    if stats.judgements == 0 {
        0.0
    } else {
        stats.uncertified_judgements as f64 / stats.judgements as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub log: RunLog,
}

/// Runs a workload against the oracle described by `oracle_cfg`.
pub fn run(
    workload: &[Request],
    variant: &VariantConfig,
    oracle_cfg: &OracleConfig,
    params: &SimParams,
) -> Result<RunOutput> {
    let oracle = Oracle::from_config(oracle_cfg, None)?;
    run_with(workload, variant, &oracle, params)
}

struct Pending {
    arrival: f64,
    arrival_event: u64,
    postponed: bool,
}

struct Engine<'p, P: Predictor> {
    sched: Scheduler<'p, P>,
    queue: EventQueue,
    event: u64,
    inflight: HashMap<u64, Pending>,
    started: HashMap<JobId, JobRecord>,
    log: RunLog,
    updates: u64,
}

impl<P: Predictor> Engine<'_, P> {
    fn apply(&mut self, actions: Vec<SchedulerAction>, now: f64) -> Result<()> {
        for action in actions {
            match action {
                SchedulerAction::RecordPending { request, shard } => {
                    self.log.unlearning.push(UnlearningRecord {
                        request_id: request,
                        arrival: now,
                        shard,
                        event: self.event,
                    });
                }
                SchedulerAction::RespondCertified { request, label, at } => {
                    self.respond(request, Verdict::Certified, Some(label), at)?
                }
                SchedulerAction::RespondUncertified { request, label, at } => {
                    self.respond(request, Verdict::Uncertified, Some(label), at)?
                }
                SchedulerAction::RespondUnchecked { request, label, at } => {
                    self.respond(request, Verdict::Unchecked, Some(label), at)?
                }
                SchedulerAction::Refuse { request, reason, at } => {
                    let verdict = match reason {
                        MitigationOutcome::RejectDetected => Verdict::RefusedDetected,
                        _ => Verdict::RefusedLowConfidence,
                    };
                    self.respond(request, verdict, None, at)?
                }
                SchedulerAction::PostponeInference { request } => {
                    if let Some(p) = self.inflight.get_mut(&request) {
                        p.postponed = true;
                    }
                }
                SchedulerAction::HaltInference { .. } => {}
                SchedulerAction::StartRetraining { jobs } => {
                    for j in jobs {
                        self.queue
                            .push(j.completion, EventKind::RetrainComplete(j.job));
                        self.started.insert(
                            j.job,
                            JobRecord {
                                job: j.job,
                                shard: j.shard,
                                start: j.start,
                                completion: j.completion,
                                covers: j.covers,
                                completion_event: 0,
                                version_after: 0,
                            },
                        );
                    }
                }
                SchedulerAction::CompleteUpdate { .. } => self.updates += 1,
            }
        }
        Ok(())
    }

    fn respond(&mut self, request: u64, verdict: Verdict, label: Option<LabelId>, at: f64) -> Result<()> {
        let p = self.inflight.remove(&request).ok_or_else(|| {
            Error::Internal(format!("response for unknown or already answered request {request}"))
        })?;
        if at < p.arrival {
            return Err(Error::Internal(format!(
                "request {request} answered at {at} before its arrival {}",
                p.arrival
            )));
        }
        self.log.requests.push(RequestRecord {
            request_id: request,
            arrival: p.arrival,
            response: at,
            verdict,
            label,
            postponed: p.postponed,
            arrival_event: p.arrival_event,
            response_event: self.event,
        });
        Ok(())
    }
}

/// Runs a workload to quiescence against any predictor.
///
/// When the event queue drains while unlearning requests are still pending,
/// the scheduler is asked to retrain them so that every request is served.
pub fn run_with<P: Predictor>(
    workload: &[Request],
    variant: &VariantConfig,
    predictor: &P,
    params: &SimParams,
) -> Result<RunOutput> {
    params.validate()?;
    validate_stream(workload, params.horizon)?;
    let mut cfg = variant.clone();
    cfg.mitigation.seed = hash_words(&[cfg.mitigation.seed, params.seed]);
    let mut engine = Engine {
        sched: Scheduler::new(cfg, params.timing(), predictor)?,
        queue: EventQueue::new(),
        event: 0,
        inflight: HashMap::new(),
        started: HashMap::new(),
        log: RunLog::default(),
        updates: 0,
    };
    for r in workload {
        engine.queue.push(r.arrival, EventKind::Arrival(*r));
    }

    let mut now = 0.0;
    loop {
        let Some(ev) = engine.queue.pop() else {
            let actions = engine.sched.flush(now)?;
            if actions.is_empty() {
                break;
            }
            engine.event += 1;
            engine.apply(actions, now)?;
            continue;
        };
        engine.event += 1;
        now = ev.time;
        let actions = match ev.kind {
            EventKind::Arrival(req) => match req.kind {
                RequestKind::Inference(_) => {
                    engine.inflight.insert(
                        req.id,
                        Pending {
                            arrival: req.arrival,
                            arrival_event: engine.event,
                            postponed: false,
                        },
                    );
                    engine.sched.on_inference_arrival(&req, now)?
                }
                RequestKind::Unlearning(_) => engine.sched.on_unlearning_arrival(&req, now)?,
            },
            EventKind::RetrainComplete(job) => {
                let actions = engine.sched.on_retraining_complete(job, now)?;
                let mut rec = engine
                    .started
                    .remove(&job)
                    .ok_or_else(|| Error::Internal(format!("job {job} completed without starting")))?;
                rec.completion_event = engine.event;
                rec.version_after = engine.sched.serving_versions()[rec.shard.0];
                engine.log.jobs.push(rec);
                actions
            }
        };
        engine.apply(actions, now)?;
    }

    if !engine.inflight.is_empty() || engine.sched.waiting_inferences() > 0 {
        return Err(Error::Internal(format!(
            "{} inference requests never answered",
            engine.inflight.len()
        )));
    }
    let stats = engine.sched.stats();
    let mut log = engine.log;
    log.requests.sort_by_key(|r| r.request_id);
    let metrics = Metrics::from_log(&log, stats, engine.updates);
    Ok(RunOutput { metrics, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrivacyReport {
    /// certified responses replayed
    pub certified_checked: usize,
    pub certified_violations: usize,
    /// responses given without certification
    pub unchecked_checked: usize,
    pub unchecked_violations: usize,
    /// uncertified responses, excluded from the check
    pub uncertified_skipped: usize,
}

impl PrivacyReport {
    pub fn violations(&self) -> usize {
        self.certified_violations + self.unchecked_violations
    }
}

/// Replays every answered inference against the models it would have seen
/// had all unlearning requests received before it been executed, and counts
/// answers that differ.
pub fn replay_privacy_check<P: Predictor>(
    log: &RunLog,
    workload: &[Request],
    predictor: &P,
) -> Result<PrivacyReport> {
    let k = predictor.num_shards();
    let samples: HashMap<u64, SampleId> = workload
        .iter()
        .filter_map(|r| match r.kind {
            RequestKind::Inference(s) => Some((r.id, s)),
            _ => None,
        })
        .collect();
    let mut covering: HashMap<u64, (u64, u32)> = HashMap::new();
    let mut completions: Vec<Vec<u64>> = vec![Vec::new(); k];
    for job in &log.jobs {
        completions[job.shard.0].push(job.completion_event);
        for &req in &job.covers {
            covering.insert(req, (job.completion_event, job.version_after));
        }
    }
    for c in &mut completions {
        c.sort_unstable();
    }
    // per shard: (arrival event, completion event and version of covering job)
    let mut obligations: Vec<Vec<(u64, u64, u32)>> = vec![Vec::new(); k];
    for u in &log.unlearning {
        let &(done, version) = covering.get(&u.request_id).ok_or_else(|| {
            Error::Internal(format!("unlearning request {} never retrained", u.request_id))
        })?;
        obligations[u.shard.0].push((u.event, done, version));
    }
    for o in &mut obligations {
        o.sort_unstable();
    }

    let mut report = PrivacyReport::default();
    let mut current = vec![0u32; k];
    let mut hypothetical = vec![0u32; k];
    for rec in &log.requests {
        let (unchecked, label) = match (rec.verdict, rec.label) {
            (Verdict::Certified, Some(l)) => (false, l),
            (Verdict::Unchecked, Some(l)) => (true, l),
            (Verdict::Uncertified, _) => {
                report.uncertified_skipped += 1;
                continue;
            }
            _ => continue,
        };
        let sample = *samples
            .get(&rec.request_id)
            .ok_or_else(|| invalid(format!("request {} missing from workload", rec.request_id)))?;
        for shard in 0..k {
            current[shard] = completions[shard].partition_point(|&e| e <= rec.response_event) as u32;
            let obl = &obligations[shard];
            let before = obl.partition_point(|o| o.0 < rec.arrival_event);
            hypothetical[shard] = match before.checked_sub(1).map(|i| obl[i]) {
                Some((_, done, version)) if done > rec.response_event => version,
                _ => current[shard],
            };
        }
        let served = predict_ensemble(&predictor.predict_all(sample, &current)?, predictor.num_classes())?;
        if served != label {
            return Err(Error::Internal(format!(
                "request {} logged label {} but replay serves {}",
                rec.request_id, label.0, served.0
            )));
        }
        let ideal =
            predict_ensemble(&predictor.predict_all(sample, &hypothetical)?, predictor.num_classes())?;
        let violated = ideal != label;
        if unchecked {
            report.unchecked_checked += 1;
            report.unchecked_violations += usize::from(violated);
        } else {
            report.certified_checked += 1;
            report.certified_violations += usize::from(violated);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Variant;

    fn oracle_cfg() -> OracleConfig {
        OracleConfig::synthetic(10, 5, 1.0, 3)
    }

    fn hand_trace() -> Vec<Request> {
        vec![
            Request::unlearning(0, 0.0, ShardId(1)),
            Request::inference(1, 2.0, SampleId::clean(42)),
        ]
    }

    #[test]
    fn empty_workload() {
        let out = run(&[], &VariantConfig::new(Variant::Dimp), &oracle_cfg(), &SimParams::new(5.0, 10.0))
            .unwrap();
        assert_eq!(out.metrics.awt, 0.0);
        assert_eq!(out.metrics.answered, 0);
        assert_eq!(out.metrics.nor, 0);
    }

    #[test]
    fn sisa_hand_trace() {
        let out = run(
            &hand_trace(),
            &VariantConfig::new(Variant::Sisa),
            &oracle_cfg(),
            &SimParams::new(5.0, 10.0),
        )
        .unwrap();
        assert_eq!(out.metrics.awt, 3.0);
        assert_eq!(out.metrics.nor, 1);
    }

    #[test]
    fn dimp_hand_trace() {
        let out = run(
            &hand_trace(),
            &VariantConfig::new(Variant::Dimp),
            &oracle_cfg(),
            &SimParams::new(5.0, 10.0),
        )
        .unwrap();
        assert_eq!(out.metrics.awt, 0.0);
        assert_eq!(out.metrics.nor, 1);
        assert_eq!(out.log.requests[0].verdict, Verdict::Certified);
    }

    #[test]
    fn rejects_bad_workloads() {
        let cfg = VariantConfig::new(Variant::Dimp);
        let params = SimParams::new(5.0, 10.0);
        let mut unsorted = hand_trace();
        unsorted.reverse();
        assert!(matches!(
            run(&unsorted, &cfg, &oracle_cfg(), &params),
            Err(Error::InvalidInput(_))
        ));
        let late = vec![Request::unlearning(0, 11.0, ShardId(0))];
        assert!(matches!(run(&late, &cfg, &oracle_cfg(), &params), Err(Error::InvalidInput(_))));
        assert!(run(&[], &cfg, &oracle_cfg(), &SimParams::new(0.0, 10.0)).is_err());
    }

    #[test]
    fn pending_work_is_flushed_at_quiescence() {
        let out = run(
            &hand_trace(),
            &VariantConfig::new(Variant::Sutp),
            &oracle_cfg(),
            &SimParams::new(5.0, 10.0),
        )
        .unwrap();
        assert_eq!(out.metrics.nor, 1);
        assert_eq!(out.metrics.stats.flush_updates, 1);
        assert_eq!(out.log.jobs[0].start, 2.0);
    }

    #[test]
    fn event_order() {
        let mut q = EventQueue::new();
        q.push(1.0, EventKind::Arrival(Request::inference(0, 1.0, SampleId::clean(0))));
        q.push(1.0, EventKind::Arrival(Request::unlearning(1, 1.0, ShardId(0))));
        q.push(1.0, EventKind::RetrainComplete(4));
        q.push(0.5, EventKind::RetrainComplete(9));
        let order: Vec<u8> = std::iter::from_fn(|| q.pop()).map(|e| e.priority()).collect();
        assert_eq!(order, vec![0, 0, 1, 2]);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }
}
