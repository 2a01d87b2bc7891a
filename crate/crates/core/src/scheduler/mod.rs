//! Request-handling policies for inference and unlearning traffic.
//!
//! A [`Scheduler`] is a deterministic state machine. The simulator feeds it
//! arrivals and retraining completions and applies the returned
//! [`SchedulerAction`]s (scheduling completion events, logging responses).
//!
//! Decisions are split in two layers:
//!
//! * The control plane judges each inference once, on arrival, against all
//!   pending unlearning requests. That judgement alone drives update
//!   triggers and the uncertification-ratio window, so the single- and
//!   double-context twin of a variant retrain exactly the same shards at
//!   exactly the same times.
//! * The data plane decides when each inference is answered. Double-context
//!   variants answer certified requests at once and re-judge postponed ones
//!   after every retraining completion. Single-context variants hold every
//!   inference that arrives while retraining is outstanding and release it
//!   once the jobs that existed at its arrival are done.
//!
//! An inference is obliged to be consistent with the unlearning requests
//! received before it. Re-judgements therefore consider only shards that
//! still hold such a request.

mod variant;

use std::collections::{BTreeMap, VecDeque};

pub use variant::*;

use crate::certification::certify_fine;
use crate::ensemble::{predict_ensemble, ImpactedSet, LabelId, PredictionVector, ShardId};
use crate::error::{invalid, Error, Result};
use crate::oracle::{hash_words, Predictor, SampleId};

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequestKind {
    Inference(SampleId),
    Unlearning(ShardId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub kind: RequestKind,
}

impl Request {
    pub fn inference(id: u64, arrival: f64, sample: SampleId) -> Self {
        Self {
            id,
            arrival,
            kind: RequestKind::Inference(sample),
        }
    }

    pub fn unlearning(id: u64, arrival: f64, shard: ShardId) -> Self {
        Self {
            id,
            arrival,
            kind: RequestKind::Unlearning(shard),
        }
    }

    pub fn is_inference(&self) -> bool {
        matches!(self.kind, RequestKind::Inference(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobStart {
    pub job: JobId,
    pub shard: ShardId,
    pub start: f64,
    pub completion: f64,
    /// unlearning request ids cleared by this job
    pub covers: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MitigationOutcome {
    Pass,
    RejectDetected,
    DiscardLowConfidence,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerAction {
    /// An unlearning request was recorded against `shard` (after any shuffling).
    RecordPending { request: u64, shard: ShardId },
    RespondCertified { request: u64, label: LabelId, at: f64 },
    RespondUncertified { request: u64, label: LabelId, at: f64 },
    /// Answered without consulting certification (baseline or disabled mode).
    RespondUnchecked { request: u64, label: LabelId, at: f64 },
    Refuse { request: u64, reason: MitigationOutcome, at: f64 },
    PostponeInference { request: u64 },
    HaltInference { request: u64 },
    StartRetraining { jobs: Vec<JobStart> },
    /// All outstanding retraining finished.
    CompleteUpdate { at: f64 },
}

/// Durations the scheduler needs to stamp its actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub retrain_duration: f64,
    pub service_time: f64,
    /// delay before halted inferences are answered after a context switch
    pub switch_latency: f64,
}

impl Timing {
    pub fn new(retrain_duration: f64) -> Self {
        Self {
            retrain_duration,
            service_time: 0.0,
            switch_latency: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerStats {
    /// certification judgements made against a non-empty impacted set
    pub judgements: u64,
    pub uncertified_judgements: u64,
    /// judgements made when an inference arrived, including trivial ones
    pub arrival_judgements: u64,
    pub arrival_uncertified: u64,
    /// updates started because of uncertified inferences
    pub triggered_updates: u64,
    /// updates started to drain pending requests at quiescence
    pub flush_updates: u64,
    pub refused_detected: u64,
    pub refused_low_confidence: u64,
}

#[derive(Debug, Clone)]
struct PendingUnlearn {
    request: u64,
    ordinal: u64,
    covered_by: Option<JobId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobStatus {
    Queued,
    Running,
}

#[derive(Debug, Clone)]
struct Job {
    shard: ShardId,
    covers: Vec<u64>,
    status: JobStatus,
}

#[derive(Debug, Clone)]
struct WaitingInference {
    request: u64,
    sample: SampleId,
    /// unlearning requests with ordinal below this arrived earlier
    bound: u64,
    /// single context: released once every job up to this id is done;
    /// `None` waits for the end of the next update
    barrier: Option<JobId>,
    permit_uncertified: bool,
}

pub struct Scheduler<'a, P: Predictor> {
    cfg: VariantConfig,
    timing: Timing,
    predictor: &'a P,
    num_classes: usize,
    serving_version: Vec<u32>,
    pending: Vec<VecDeque<PendingUnlearn>>,
    jobs: BTreeMap<JobId, Job>,
    job_queue: VecDeque<JobId>,
    running: usize,
    shard_busy: Vec<bool>,
    next_job: JobId,
    unlearn_arrivals: u64,
    waiting: Vec<WaitingInference>,
    inference_count: u64,
    uncertified_count: u64,
    stats: SchedulerStats,
}

const TAG_DETECTOR: u64 = 0xde7;
const TAG_SHUFFLE: u64 = 0x5f1;

impl<'a, P: Predictor> Scheduler<'a, P> {
    pub fn new(cfg: VariantConfig, timing: Timing, predictor: &'a P) -> Result<Self> {
        cfg.validate()?;
        if !(timing.retrain_duration > 0.0) || !timing.retrain_duration.is_finite() {
            return Err(invalid("retrain duration must be positive and finite"));
        }
        if timing.service_time < 0.0 || timing.switch_latency < 0.0 {
            return Err(invalid("service time and switch latency must be non-negative"));
        }
        let k = predictor.num_shards();
        Ok(Self {
            cfg,
            timing,
            predictor,
            num_classes: predictor.num_classes(),
            serving_version: vec![0; k],
            pending: vec![VecDeque::new(); k],
            jobs: BTreeMap::new(),
            job_queue: VecDeque::new(),
            running: 0,
            shard_busy: vec![false; k],
            next_job: 0,
            unlearn_arrivals: 0,
            waiting: Vec::new(),
            inference_count: 0,
            uncertified_count: 0,
            stats: SchedulerStats::default(),
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    pub fn serving_versions(&self) -> &[u32] {
        &self.serving_version
    }

    pub fn pending_count(&self, shard: ShardId) -> usize {
        self.pending[shard.0].len()
    }

    /// Shards with at least one pending unlearning request.
    pub fn impacted_set(&self) -> ImpactedSet {
        self.impacted_before(u64::MAX)
    }

    pub fn outstanding_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn running_jobs(&self) -> usize {
        self.running
    }

    pub fn waiting_inferences(&self) -> usize {
        self.waiting.len()
    }

    /// (uncertified, total) inference counts in the current window.
    pub fn window(&self) -> (u64, u64) {
        (self.uncertified_count, self.inference_count)
    }

    fn single_context(&self) -> bool {
        self.cfg.option_i == ContextMode::SingleContext
    }

    fn impacted_before(&self, bound: u64) -> ImpactedSet {
        self.pending
            .iter()
            .enumerate()
            .filter(|(_, q)| q.front().is_some_and(|p| p.ordinal < bound))
            .map(|(k, _)| ShardId(k))
            .collect()
    }

    fn current_predictions(&self, sample: SampleId) -> Result<PredictionVector> {
        self.predictor.predict_all(sample, &self.serving_version)
    }

    fn judge(&mut self, preds: &PredictionVector, impacted: &ImpactedSet) -> Result<(bool, LabelId)> {
        let verdict = certify_fine(preds, impacted, self.num_classes)?;
        if !impacted.is_empty() {
            self.stats.judgements += 1;
            if !verdict.certified {
                self.stats.uncertified_judgements += 1;
            }
        }
        Ok((verdict.certified, verdict.winner))
    }

    fn barrier_cleared(&self, barrier: Option<JobId>) -> bool {
        match (barrier, self.jobs.keys().next()) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(b), Some(&oldest)) => oldest > b,
        }
    }

    fn last_job(&self) -> Option<JobId> {
        self.next_job.checked_sub(1)
    }

    /// Screens an inference before it touches the certification logic.
    pub fn mitigation_filter(&self, request: u64, sample: SampleId) -> Result<MitigationOutcome> {
        let m = &self.cfg.mitigation;
        if let Some(d) = m.detector {
            let p = if sample.is_noise {
                d.true_positive_rate
            } else {
                d.false_positive_rate
            };
            let coin = (hash_words(&[m.seed, TAG_DETECTOR, request]) >> 11) as f64
                / (1u64 << 53) as f64;
            if coin < p {
                return Ok(MitigationOutcome::RejectDetected);
            }
        }
        if let Some(threshold) = m.discard_below {
            if self.predictor.confidence(sample, &self.serving_version)? < threshold {
                return Ok(MitigationOutcome::DiscardLowConfidence);
            }
        }
        Ok(MitigationOutcome::Pass)
    }

    pub fn on_unlearning_arrival(&mut self, req: &Request, now: f64) -> Result<Vec<SchedulerAction>> {
        let RequestKind::Unlearning(target) = req.kind else {
            return Err(invalid(format!("request {} is not an unlearning request", req.id)));
        };
        let k = self.serving_version.len();
        if target.0 >= k {
            return Err(invalid(format!("request {} targets shard {target} of {k}", req.id)));
        }
        let shard = if self.cfg.mitigation.shard_shuffle {
            ShardId((hash_words(&[self.cfg.mitigation.seed, TAG_SHUFFLE, req.id]) % k as u64) as usize)
        } else {
            target
        };
        let ordinal = self.unlearn_arrivals;
        self.unlearn_arrivals += 1;
        self.pending[shard.0].push_back(PendingUnlearn {
            request: req.id,
            ordinal,
            covered_by: None,
        });
        let mut actions = vec![SchedulerAction::RecordPending {
            request: req.id,
            shard,
        }];
        if self.cfg.option_ii == UnlearnTiming::Immediate {
            // one job per request, even if the shard is already retraining
            self.create_job(shard, vec![req.id]);
            push_starts(&mut actions, self.start_jobs(now));
        }
        Ok(actions)
    }

    pub fn on_inference_arrival(&mut self, req: &Request, now: f64) -> Result<Vec<SchedulerAction>> {
        let RequestKind::Inference(sample) = req.kind else {
            return Err(invalid(format!("request {} is not an inference request", req.id)));
        };
        let respond_at = now + self.timing.service_time;

        match self.mitigation_filter(req.id, sample)? {
            MitigationOutcome::Pass => {}
            reason => {
                match reason {
                    MitigationOutcome::RejectDetected => self.stats.refused_detected += 1,
                    _ => self.stats.refused_low_confidence += 1,
                }
                return Ok(vec![SchedulerAction::Refuse {
                    request: req.id,
                    reason,
                    at: now,
                }]);
            }
        }

        if self.cfg.certification == CertificationMode::Disabled {
            let label = predict_ensemble(&self.current_predictions(sample)?, self.num_classes)?;
            return Ok(vec![SchedulerAction::RespondUnchecked {
                request: req.id,
                label,
                at: respond_at,
            }]);
        }

        let bound = self.unlearn_arrivals;
        if self.cfg.is_sisa() {
            if self.jobs.is_empty() {
                let label = predict_ensemble(&self.current_predictions(sample)?, self.num_classes)?;
                return Ok(vec![SchedulerAction::RespondUnchecked {
                    request: req.id,
                    label,
                    at: respond_at,
                }]);
            }
            self.waiting.push(WaitingInference {
                request: req.id,
                sample,
                bound,
                barrier: self.last_job(),
                permit_uncertified: false,
            });
            return Ok(vec![SchedulerAction::HaltInference { request: req.id }]);
        }

        // control plane
        let preds = self.current_predictions(sample)?;
        let impacted = self.impacted_set();
        let (certified, label) = self.judge(&preds, &impacted)?;
        self.stats.arrival_judgements += 1;
        if !certified {
            self.stats.arrival_uncertified += 1;
        }
        let mut actions = Vec::new();
        let mut permit = false;
        match self.cfg.option_ii {
            UnlearnTiming::Immediate => {}
            UnlearnTiming::UncertTriggered => {
                if !certified {
                    actions.extend(self.trigger(now, Some(&preds))?);
                }
            }
            UnlearnTiming::ThresholdTriggered => {
                self.inference_count += 1;
                if !certified {
                    self.uncertified_count += 1;
                    let ratio = self.uncertified_count as f64 / self.inference_count as f64;
                    if ratio > self.cfg.threshold {
                        actions.extend(self.trigger(now, Some(&preds))?);
                    } else {
                        permit = self.cfg.option_iii == UncertifiedHandling::RespondUncertified;
                    }
                }
            }
        }

        // data plane
        if self.single_context() && !self.jobs.is_empty() {
            self.waiting.push(WaitingInference {
                request: req.id,
                sample,
                bound,
                barrier: self.last_job(),
                permit_uncertified: permit,
            });
            actions.push(if certified {
                SchedulerAction::HaltInference { request: req.id }
            } else {
                SchedulerAction::PostponeInference { request: req.id }
            });
        } else if certified {
            actions.push(SchedulerAction::RespondCertified {
                request: req.id,
                label,
                at: respond_at,
            });
        } else if permit {
            actions.push(SchedulerAction::RespondUncertified {
                request: req.id,
                label,
                at: respond_at,
            });
        } else {
            self.waiting.push(WaitingInference {
                request: req.id,
                sample,
                bound,
                barrier: None,
                permit_uncertified: false,
            });
            actions.push(SchedulerAction::PostponeInference { request: req.id });
        }
        Ok(actions)
    }

    pub fn on_retraining_complete(&mut self, job_id: JobId, now: f64) -> Result<Vec<SchedulerAction>> {
        let job = match self.jobs.get(&job_id) {
            Some(job) if job.status == JobStatus::Running => {
                self.jobs.remove(&job_id).expect("job was just found")
            }
            Some(_) => {
                return Err(Error::Internal(format!(
                    "completion for job {job_id} which never started"
                )))
            }
            None => {
                return Err(Error::Internal(format!(
                    "completion for job {job_id} with no in-flight retraining"
                )))
            }
        };
        let shard = job.shard;
        self.serving_version[shard.0] += 1;
        self.pending[shard.0].retain(|p| p.covered_by != Some(job_id));
        self.running -= 1;
        self.shard_busy[shard.0] = false;

        let mut actions = Vec::new();
        push_starts(&mut actions, self.start_jobs(now));
        if self.jobs.is_empty() {
            actions.push(SchedulerAction::CompleteUpdate { at: now });
            if self.cfg.option_ii == UnlearnTiming::ThresholdTriggered {
                self.inference_count = 0;
                self.uncertified_count = 0;
            }
        }
        actions.extend(self.reevaluate_waiting(now)?);
        Ok(actions)
    }

    /// Starts retraining for shards with pending requests not yet covered by
    /// a job. `trigger` carries the predictions of the inference that caused
    /// the update; it is needed by [`RetrainPolicy::RetrainMinimal`].
    pub fn trigger_update(
        &mut self,
        now: f64,
        trigger: Option<&PredictionVector>,
    ) -> Result<Vec<SchedulerAction>> {
        self.trigger(now, trigger)
    }

    /// Retrains everything still pending; used when the event stream runs dry.
    pub fn flush(&mut self, now: f64) -> Result<Vec<SchedulerAction>> {
        let (created, actions) = self.launch(now, None)?;
        if created > 0 {
            self.stats.flush_updates += 1;
        }
        Ok(actions)
    }

    fn trigger(&mut self, now: f64, trigger: Option<&PredictionVector>) -> Result<Vec<SchedulerAction>> {
        let (created, actions) = self.launch(now, trigger)?;
        if created > 0 {
            self.stats.triggered_updates += 1;
        }
        Ok(actions)
    }

    /// Creates jobs and starts what capacity allows. Returns the number of
    /// jobs created alongside the actions.
    fn launch(
        &mut self,
        now: f64,
        trigger: Option<&PredictionVector>,
    ) -> Result<(usize, Vec<SchedulerAction>)> {
        let mut candidates: Vec<(ShardId, usize)> = self
            .pending
            .iter()
            .enumerate()
            .map(|(k, q)| (ShardId(k), q.iter().filter(|p| p.covered_by.is_none()).count()))
            .filter(|&(_, n)| n > 0)
            .collect();
        if candidates.is_empty() {
            return Ok((0, Vec::new()));
        }

        let selected: Vec<ShardId> = match (self.cfg.retrain_policy, trigger) {
            (RetrainPolicy::RetrainMinimal, Some(preds)) => {
                candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                let order: Vec<ShardId> = candidates.iter().map(|c| c.0).collect();
                let mut take = order.len();
                for m in 0..=order.len() {
                    let remaining: ImpactedSet = order[m..].iter().copied().collect();
                    if certify_fine(preds, &remaining, self.num_classes)?.certified {
                        take = m;
                        break;
                    }
                }
                // fill idle capacity with further impacted shards
                let busy = self.running + self.job_queue.len();
                while take < order.len() && busy + take < self.cfg.parallel_capacity {
                    take += 1;
                }
                order[..take].to_vec()
            }
            _ => candidates.iter().map(|c| c.0).collect(),
        };

        let created = selected.len();
        for shard in selected {
            let covers: Vec<u64> = self.pending[shard.0]
                .iter()
                .filter(|p| p.covered_by.is_none())
                .map(|p| p.request)
                .collect();
            self.create_job(shard, covers);
        }
        let mut actions = Vec::new();
        push_starts(&mut actions, self.start_jobs(now));
        Ok((created, actions))
    }

    fn create_job(&mut self, shard: ShardId, covers: Vec<u64>) -> JobId {
        let id = self.next_job;
        self.next_job += 1;
        for p in self.pending[shard.0].iter_mut() {
            if covers.contains(&p.request) {
                p.covered_by = Some(id);
            }
        }
        self.jobs.insert(
            id,
            Job {
                shard,
                covers,
                status: JobStatus::Queued,
            },
        );
        self.job_queue.push_back(id);
        id
    }

    fn start_jobs(&mut self, now: f64) -> Vec<JobStart> {
        let mut started = Vec::new();
        while self.running < self.cfg.parallel_capacity {
            let Some(pos) = self
                .job_queue
                .iter()
                .position(|id| !self.shard_busy[self.jobs[id].shard.0])
            else {
                break;
            };
            let id = self.job_queue.remove(pos).expect("position is in range");
            let job = self.jobs.get_mut(&id).expect("queued job exists");
            job.status = JobStatus::Running;
            self.running += 1;
            self.shard_busy[job.shard.0] = true;
            started.push(JobStart {
                job: id,
                shard: job.shard,
                start: now,
                completion: now + self.timing.retrain_duration,
                covers: job.covers.clone(),
            });
        }
        started
    }

    fn reevaluate_waiting(&mut self, now: f64) -> Result<Vec<SchedulerAction>> {
        let single = self.single_context();
        let at = now
            + self.timing.service_time
            + if single { self.timing.switch_latency } else { 0.0 };
        let mut actions = Vec::new();
        let waiting = std::mem::take(&mut self.waiting);
        let mut still = Vec::with_capacity(waiting.len());
        for mut w in waiting {
            if single && !self.barrier_cleared(w.barrier) {
                still.push(w);
                continue;
            }
            let preds = self.current_predictions(w.sample)?;
            if self.cfg.is_sisa() {
                let label = predict_ensemble(&preds, self.num_classes)?;
                actions.push(SchedulerAction::RespondUnchecked {
                    request: w.request,
                    label,
                    at,
                });
                continue;
            }
            let impacted = self.impacted_before(w.bound);
            let (certified, label) = self.judge(&preds, &impacted)?;
            if certified {
                actions.push(SchedulerAction::RespondCertified {
                    request: w.request,
                    label,
                    at,
                });
            } else if w.permit_uncertified {
                actions.push(SchedulerAction::RespondUncertified {
                    request: w.request,
                    label,
                    at,
                });
            } else {
                if single {
                    w.barrier = None;
                }
                still.push(w);
            }
        }
        self.waiting = still;
        Ok(actions)
    }
}

fn push_starts(actions: &mut Vec<SchedulerAction>, jobs: Vec<JobStart>) {
    if !jobs.is_empty() {
        actions.push(SchedulerAction::StartRetraining { jobs });
    }
}
