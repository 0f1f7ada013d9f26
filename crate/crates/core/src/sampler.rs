//! Task decomposition and input ordering for fine-tuning.
//!
//! A fine-tuning pool is split into inner-loop and outer-loop halves, scored
//! with the current model, partitioned into good (score at or above the
//! threshold) and bad (below) tasks, and ordered for consumption:
//!
//! * `naive`: one seeded shuffle, no pairing — the plain-SGD baseline.
//! * `passive`: seeded random order within good and bad, alternating
//!   bad, good, bad, good; outer samples drawn at random.
//! * `active`: bad tasks ascending by score (least learned first), good
//!   tasks descending (strongest anchor first), alternating; outer samples
//!   picked score-extremal.
//!
//! Scores are mean foreground Dice of the current parameters, so a partition
//! is only valid for the parameters it was built with; rebuild it whenever
//! the model changes.

use crate::metrics::{dice_report, MetricsError};
use crate::rng::Rng;
use crate::segnet::{predict, ParamVector, SegNetError};
use crate::tensor::Sample;
use rayon::prelude::*;
use std::fmt;

#[derive(Debug)]
pub enum SamplerError {
    TooFewSlices(usize),
    BadRatio(f64),
    EmptyPool(&'static str),
    Net(SegNetError),
    Metrics(MetricsError),
}

impl fmt::Display for SamplerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerError::TooFewSlices(n) => {
                write!(f, "need at least 2 slices to split, got {n}")
            }
            SamplerError::BadRatio(r) => {
                write!(f, "split ratio must lie strictly between 0 and 1, got {r}")
            }
            SamplerError::EmptyPool(which) => write!(f, "{which} pool is empty"),
            SamplerError::Net(e) => write!(f, "scoring failed: {e}"),
            SamplerError::Metrics(e) => write!(f, "scoring failed: {e}"),
        }
    }
}

impl std::error::Error for SamplerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SamplerError::Net(e) => Some(e),
            SamplerError::Metrics(e) => Some(e),
            _ => None,
        }
    }
}

impl From<SegNetError> for SamplerError {
    fn from(e: SegNetError) -> Self {
        SamplerError::Net(e)
    }
}

impl From<MetricsError> for SamplerError {
    fn from(e: MetricsError) -> Self {
        SamplerError::Metrics(e)
    }
}

/// Which half of the split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSide {
    Inner,
    Outer,
}

impl PoolSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolSide::Inner => "inner",
            PoolSide::Outer => "outer",
        }
    }
}

/// Good tasks the model already handles; bad tasks it has not learned yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskClass {
    Good,
    Bad,
}

impl TaskClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskClass::Good => "good",
            TaskClass::Bad => "bad",
        }
    }
}

/// Identifies one slice of one patient within a fine-tuning pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub patient: String,
    pub slice: usize,
    pub pool: PoolSide,
}

/// A sample together with the mean foreground Dice the current model scores
/// on it.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub sample: SampleRef,
    pub score: f64,
}

/// Pool partition at a fixed parameter vector: good = score >= tau.
#[derive(Debug, Clone)]
pub struct TaskPartition {
    pub good: Vec<ScoredSample>,
    pub bad: Vec<ScoredSample>,
    pub tau: f64,
}

impl TaskPartition {
    pub fn len(&self) -> usize {
        self.good.len() + self.bad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.good.is_empty() && self.bad.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMethod {
    Naive,
    Passive,
    Active,
}

impl OrderMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrderMethod::Naive => "naive",
            OrderMethod::Passive => "passive",
            OrderMethod::Active => "active",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "naive" => Some(OrderMethod::Naive),
            "passive" => Some(OrderMethod::Passive),
            "active" => Some(OrderMethod::Active),
            _ => None,
        }
    }
}

/// One scheduled step: an inner-loop sample, and for the meta methods the
/// outer-loop sample it is paired with plus which partition it came from.
/// Naive schedules carry neither pairing nor scores (scores are zero).
#[derive(Debug, Clone)]
pub struct SchedulePair {
    pub inner: ScoredSample,
    pub outer: Option<ScoredSample>,
    pub origin: Option<TaskClass>,
}

#[derive(Debug, Clone)]
pub struct OrderedSchedule {
    pub method: OrderMethod,
    pub seed: u64,
    pub pairs: Vec<SchedulePair>,
}

/// Shuffle the slice refs by seed, then cut: the first floor(ratio * n) go
/// to the inner pool, the rest to the outer pool. The cut is clamped so both
/// pools stay nonempty.
pub fn split_inner_outer(
    slices: &[SampleRef],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SampleRef>, Vec<SampleRef>), SamplerError> {
    if slices.len() < 2 {
        return Err(SamplerError::TooFewSlices(slices.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SamplerError::BadRatio(ratio));
    }
    let mut pool: Vec<SampleRef> = slices.to_vec();
    let mut rng = Rng::from_seed(seed);
    rng.shuffle(&mut pool);
    let cut = ((ratio * pool.len() as f64).floor() as usize).clamp(1, pool.len() - 1);
    let outer = pool.split_off(cut);
    let inner = pool
        .into_iter()
        .map(|mut r| {
            r.pool = PoolSide::Inner;
            r
        })
        .collect();
    let outer = outer
        .into_iter()
        .map(|mut r| {
            r.pool = PoolSide::Outer;
            r
        })
        .collect();
    Ok((inner, outer))
}

/// Threshold rule shared by `decompose_tasks` and tests: score >= tau is good.
pub fn partition_scored(scored: Vec<ScoredSample>, tau: f64) -> TaskPartition {
    let (good, bad) = scored.into_iter().partition(|s| s.score >= tau);
    TaskPartition { good, bad, tau }
}

/// Score every pool sample with the current model (mean foreground Dice of
/// its prediction) and split at tau. Scoring runs in parallel; the partition
/// itself is assembled in pool order, so the result is deterministic.
pub fn decompose_tasks(
    params: &ParamVector,
    pool: &[(SampleRef, &Sample)],
    tau: f64,
) -> Result<TaskPartition, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool("task"));
    }
    // Config validation caps num_classes at 255, so the cast is lossless.
    let num_classes = params.config().num_classes as u8;
    let scored: Vec<ScoredSample> = pool
        .par_iter()
        .map(|(sample_ref, sample)| {
            let pred = predict(params, &sample.image)?;
            let report = dice_report(&pred, &sample.labels, num_classes)?;
            Ok(ScoredSample { sample: sample_ref.clone(), score: report.mean_foreground })
        })
        .collect::<Result<_, SamplerError>>()?;
    Ok(partition_scored(scored, tau))
}

/// Outer-loop sample source that hands out each sample at most once until
/// the whole pool is exhausted, preferring the partition that matches the
/// inner sample's origin.
struct OuterQueue<'a> {
    partition: &'a TaskPartition,
    consumed_good: Vec<bool>,
    consumed_bad: Vec<bool>,
}

impl<'a> OuterQueue<'a> {
    fn new(partition: &'a TaskPartition) -> Self {
        Self {
            partition,
            consumed_good: vec![false; partition.good.len()],
            consumed_bad: vec![false; partition.bad.len()],
        }
    }

    fn side(&self, class: TaskClass) -> (&'a [ScoredSample], &[bool]) {
        match class {
            TaskClass::Good => (&self.partition.good, &self.consumed_good),
            TaskClass::Bad => (&self.partition.bad, &self.consumed_bad),
        }
    }

    fn mark(&mut self, class: TaskClass, idx: usize) -> ScoredSample {
        let (samples, consumed) = match class {
            TaskClass::Good => (&self.partition.good, &mut self.consumed_good),
            TaskClass::Bad => (&self.partition.bad, &mut self.consumed_bad),
        };
        consumed[idx] = true;
        samples[idx].clone()
    }

    /// Candidate index lists in falling priority: unconsumed matching
    /// partition, unconsumed anywhere, then reuse (matching, anywhere).
    /// The outer pool is nonempty, so some bucket is always nonempty.
    fn buckets(&self, origin: TaskClass) -> Vec<Vec<(TaskClass, usize)>> {
        let other = match origin {
            TaskClass::Good => TaskClass::Bad,
            TaskClass::Bad => TaskClass::Good,
        };
        let list = |class: TaskClass, want_unconsumed: bool| -> Vec<(TaskClass, usize)> {
            let (samples, consumed) = self.side(class);
            (0..samples.len())
                .filter(|&i| !want_unconsumed || !consumed[i])
                .map(|i| (class, i))
                .collect()
        };
        let mut fresh_any = list(origin, true);
        fresh_any.extend(list(other, true));
        let mut all_any = list(origin, false);
        all_any.extend(list(other, false));
        vec![list(origin, true), fresh_any, list(origin, false), all_any]
    }

    /// Extremal pick for the active method: lowest score for bad-origin
    /// pairs, highest for good-origin; ties broken by (patient, slice).
    fn take_extreme(&mut self, origin: TaskClass) -> ScoredSample {
        for bucket in self.buckets(origin) {
            let Some(&(class, idx)) = bucket.iter().min_by(|&&(ca, ia), &&(cb, ib)| {
                let a = &self.side(ca).0[ia];
                let b = &self.side(cb).0[ib];
                let by_score = match origin {
                    TaskClass::Bad => a.score.total_cmp(&b.score),
                    TaskClass::Good => b.score.total_cmp(&a.score),
                };
                by_score
                    .then_with(|| a.sample.patient.cmp(&b.sample.patient))
                    .then_with(|| a.sample.slice.cmp(&b.sample.slice))
            }) else {
                continue;
            };
            return self.mark(class, idx);
        }
        unreachable!("outer pool is nonempty");
    }

    /// Seeded uniform pick for the passive method, same bucket priority.
    fn take_random(&mut self, origin: TaskClass, rng: &mut Rng) -> ScoredSample {
        for bucket in self.buckets(origin) {
            if bucket.is_empty() {
                continue;
            }
            let (class, idx) = bucket[rng.below(bucket.len())];
            return self.mark(class, idx);
        }
        unreachable!("outer pool is nonempty");
    }
}

fn check_pools(inner: &TaskPartition, outer: &TaskPartition) -> Result<(), SamplerError> {
    if inner.is_empty() {
        return Err(SamplerError::EmptyPool("inner"));
    }
    if outer.is_empty() {
        return Err(SamplerError::EmptyPool("outer"));
    }
    Ok(())
}

/// Alternate bad, good, bad, good...; when one side runs out, the rest of
/// the other side follows in order.
fn alternate(
    bad: Vec<ScoredSample>,
    good: Vec<ScoredSample>,
) -> Vec<(ScoredSample, TaskClass)> {
    let mut out = Vec::with_capacity(bad.len() + good.len());
    let (mut bi, mut gi) = (bad.into_iter(), good.into_iter());
    loop {
        match (bi.next(), gi.next()) {
            (Some(b), Some(g)) => {
                out.push((b, TaskClass::Bad));
                out.push((g, TaskClass::Good));
            }
            (Some(b), None) => {
                out.push((b, TaskClass::Bad));
                out.extend(bi.map(|s| (s, TaskClass::Bad)));
                break;
            }
            (None, Some(g)) => {
                out.push((g, TaskClass::Good));
                out.extend(gi.map(|s| (s, TaskClass::Good)));
                break;
            }
            (None, None) => break,
        }
    }
    out
}

/// Random order within each partition, random outer draws; all seeded.
pub fn order_passive(
    inner: &TaskPartition,
    outer: &TaskPartition,
    seed: u64,
) -> Result<OrderedSchedule, SamplerError> {
    check_pools(inner, outer)?;
    let mut rng = Rng::from_seed(seed);
    let mut bad = inner.bad.clone();
    let mut good = inner.good.clone();
    rng.shuffle(&mut bad);
    rng.shuffle(&mut good);
    let mut queue = OuterQueue::new(outer);
    let pairs = alternate(bad, good)
        .into_iter()
        .map(|(sample, origin)| SchedulePair {
            outer: Some(queue.take_random(origin, &mut rng)),
            origin: Some(origin),
            inner: sample,
        })
        .collect();
    Ok(OrderedSchedule { method: OrderMethod::Passive, seed, pairs })
}

/// Score-driven order: bad ascending (least learned first), good descending
/// (strongest anchor first), score-extremal outer draws. Ties fall back to
/// (patient, slice), so the schedule depends only on score ranks.
pub fn order_active(
    inner: &TaskPartition,
    outer: &TaskPartition,
) -> Result<OrderedSchedule, SamplerError> {
    check_pools(inner, outer)?;
    let tie = |a: &ScoredSample, b: &ScoredSample| {
        a.sample.patient.cmp(&b.sample.patient).then_with(|| a.sample.slice.cmp(&b.sample.slice))
    };
    let mut bad = inner.bad.clone();
    bad.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| tie(a, b)));
    let mut good = inner.good.clone();
    good.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| tie(a, b)));
    let mut queue = OuterQueue::new(outer);
    let pairs = alternate(bad, good)
        .into_iter()
        .map(|(sample, origin)| SchedulePair {
            outer: Some(queue.take_extreme(origin)),
            origin: Some(origin),
            inner: sample,
        })
        .collect();
    Ok(OrderedSchedule { method: OrderMethod::Active, seed: 0, pairs })
}

/// Plain seeded shuffle over the whole pool; no pairing, no scores.
pub fn order_naive(pool: &[SampleRef], seed: u64) -> Result<OrderedSchedule, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool("task"));
    }
    let mut refs = pool.to_vec();
    let mut rng = Rng::from_seed(seed);
    rng.shuffle(&mut refs);
    let pairs = refs
        .into_iter()
        .map(|sample| SchedulePair {
            inner: ScoredSample { sample, score: 0.0 },
            outer: None,
            origin: None,
        })
        .collect();
    Ok(OrderedSchedule { method: OrderMethod::Naive, seed, pairs })
}

/// CSV rows auditing a schedule: `meta_batch,position,pool,origin,patient,slice,dsc`,
/// one row per inner sample and one per outer sample, no header.
pub fn order_log_rows(meta_batch: usize, schedule: &OrderedSchedule) -> String {
    let mut out = String::new();
    for (position, pair) in schedule.pairs.iter().enumerate() {
        let origin = pair.origin.map_or("none", |o| o.as_str());
        let mut push = |s: &ScoredSample| {
            out.push_str(&format!(
                "{meta_batch},{position},{},{origin},{},{},{:.6}\n",
                s.sample.pool.as_str(),
                s.sample.patient,
                s.sample.slice,
                s.score
            ));
        };
        push(&pair.inner);
        if let Some(outer) = &pair.outer {
            push(outer);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<SampleRef> {
        (0..n)
            .map(|i| SampleRef { patient: "p0".into(), slice: i, pool: PoolSide::Inner })
            .collect()
    }

    fn scored(items: &[(usize, f64)]) -> Vec<ScoredSample> {
        items
            .iter()
            .map(|&(slice, score)| ScoredSample {
                sample: SampleRef { patient: "p0".into(), slice, pool: PoolSide::Inner },
                score,
            })
            .collect()
    }

    fn outer_partition(items: &[(usize, f64)], tau: f64) -> TaskPartition {
        let mut scored = scored(items);
        for s in &mut scored {
            s.sample.pool = PoolSide::Outer;
        }
        partition_scored(scored, tau)
    }

    #[test]
    fn split_uses_floor_and_tags_pools() {
        let (inner, outer) = split_inner_outer(&refs(25), 0.5, 7).unwrap();
        assert_eq!(inner.len(), 12);
        assert_eq!(outer.len(), 13);
        assert!(inner.iter().all(|r| r.pool == PoolSide::Inner));
        assert!(outer.iter().all(|r| r.pool == PoolSide::Outer));

        let (i2, o2) = split_inner_outer(&refs(25), 0.5, 7).unwrap();
        assert_eq!(inner, i2, "same seed must reproduce the split");
        assert_eq!(outer, o2);

        let (i3, o3) = split_inner_outer(&refs(2), 0.5, 7).unwrap();
        assert_eq!((i3.len(), o3.len()), (1, 1));
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        assert!(matches!(
            split_inner_outer(&refs(1), 0.5, 0),
            Err(SamplerError::TooFewSlices(1))
        ));
        assert!(matches!(split_inner_outer(&refs(4), 0.0, 0), Err(SamplerError::BadRatio(_))));
        assert!(matches!(split_inner_outer(&refs(4), 1.0, 0), Err(SamplerError::BadRatio(_))));
    }

    #[test]
    fn threshold_rule_matches_contract() {
        let p = partition_scored(scored(&[(0, 0.9), (1, 0.3), (2, 0.6)]), 0.5);
        let good: Vec<usize> = p.good.iter().map(|s| s.sample.slice).collect();
        let bad: Vec<usize> = p.bad.iter().map(|s| s.sample.slice).collect();
        assert_eq!(good, vec![0, 2]);
        assert_eq!(bad, vec![1]);

        let all_good = partition_scored(scored(&[(0, 0.9), (1, 0.3)]), 0.0);
        assert!(all_good.bad.is_empty(), "tau 0 puts everything in good");

        let at_tau = partition_scored(scored(&[(0, 0.5)]), 0.5);
        assert_eq!(at_tau.good.len(), 1, "score exactly tau counts as good");
    }

    #[test]
    fn passive_alternates_and_covers() {
        let inner = partition_scored(scored(&[(0, 0.2), (1, 0.8), (2, 0.1), (3, 0.9)]), 0.5);
        let outer = outer_partition(&[(10, 0.3), (11, 0.7)], 0.5);
        let s = order_passive(&inner, &outer, 5).unwrap();
        assert_eq!(s.pairs.len(), inner.len());
        let origins: Vec<TaskClass> = s.pairs.iter().map(|p| p.origin.unwrap()).collect();
        assert_eq!(origins, vec![TaskClass::Bad, TaskClass::Good, TaskClass::Bad, TaskClass::Good]);
        assert!(s.pairs.iter().all(|p| p.outer.is_some()));

        let again = order_passive(&inner, &outer, 5).unwrap();
        for (a, b) in s.pairs.iter().zip(&again.pairs) {
            assert_eq!(a.inner.sample, b.inner.sample);
            assert_eq!(a.outer.as_ref().unwrap().sample, b.outer.as_ref().unwrap().sample);
        }
    }

    #[test]
    fn active_orders_by_score_with_slice_tie_break() {
        let inner = partition_scored(
            scored(&[(0, 0.30), (1, 0.10), (2, 0.45), (3, 0.80), (4, 0.95)]),
            0.5,
        );
        let outer = outer_partition(&[(10, 0.2), (11, 0.9), (12, 0.6)], 0.5);
        let s = order_active(&inner, &outer).unwrap();
        let seq: Vec<usize> = s.pairs.iter().map(|p| p.inner.sample.slice).collect();
        assert_eq!(seq, vec![1, 4, 0, 3, 2], "bad ascending, good descending, alternating");

        let tied = partition_scored(scored(&[(2, 0.3), (0, 0.3), (1, 0.3)]), 0.5);
        let s = order_active(&tied, &outer).unwrap();
        let seq: Vec<usize> = s.pairs.iter().map(|p| p.inner.sample.slice).collect();
        assert_eq!(seq, vec![0, 1, 2], "equal scores fall back to slice order");
    }

    #[test]
    fn active_outer_is_extremal_and_consumed_once() {
        let inner = partition_scored(scored(&[(0, 0.1), (1, 0.2), (2, 0.9)]), 0.5);
        let outer = outer_partition(&[(10, 0.40), (11, 0.05), (12, 0.30), (13, 0.95)], 0.5);
        let s = order_active(&inner, &outer).unwrap();
        let outers: Vec<usize> =
            s.pairs.iter().map(|p| p.outer.as_ref().unwrap().sample.slice).collect();
        // Bad-origin pairs take the lowest-scoring outer bad samples in
        // turn; the good-origin pair takes the highest-scoring outer good.
        assert_eq!(outers, vec![11, 13, 12]);
    }

    #[test]
    fn outer_falls_back_when_matching_partition_is_empty() {
        let inner = partition_scored(scored(&[(0, 0.1), (1, 0.2)]), 0.5);
        let outer = outer_partition(&[(10, 0.9), (11, 0.8)], 0.5);
        assert!(outer.bad.is_empty());
        let s = order_active(&inner, &outer).unwrap();
        let outers: Vec<usize> =
            s.pairs.iter().map(|p| p.outer.as_ref().unwrap().sample.slice).collect();
        assert_eq!(outers, vec![11, 10], "bad-origin pairs fall back to the good outer pool");
    }

    #[test]
    fn outer_reuses_only_after_exhaustion() {
        let inner = partition_scored(scored(&[(0, 0.1), (1, 0.2), (2, 0.3)]), 0.9);
        let outer = outer_partition(&[(10, 0.2), (11, 0.4)], 0.9);
        let s = order_active(&inner, &outer).unwrap();
        let outers: Vec<usize> =
            s.pairs.iter().map(|p| p.outer.as_ref().unwrap().sample.slice).collect();
        assert_eq!(outers, vec![10, 11, 10], "third pair reuses the most extreme sample");
    }

    #[test]
    fn naive_is_a_bare_shuffled_pass() {
        let pool = refs(6);
        let s = order_naive(&pool, 3).unwrap();
        assert_eq!(s.pairs.len(), 6);
        assert!(s.pairs.iter().all(|p| p.outer.is_none() && p.origin.is_none()));
        let mut seen: Vec<usize> = s.pairs.iter().map(|p| p.inner.sample.slice).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>(), "every sample exactly once");

        let again = order_naive(&pool, 3).unwrap();
        for (a, b) in s.pairs.iter().zip(&again.pairs) {
            assert_eq!(a.inner.sample, b.inner.sample);
        }
        assert!(matches!(order_naive(&[], 0), Err(SamplerError::EmptyPool(_))));
    }

    #[test]
    fn order_log_has_one_row_per_scheduled_sample() {
        let inner = partition_scored(scored(&[(0, 0.1), (1, 0.9)]), 0.5);
        let outer = outer_partition(&[(10, 0.3)], 0.5);
        let s = order_active(&inner, &outer).unwrap();
        let log = order_log_rows(4, &s);
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 4, "two pairs, inner and outer row each");
        assert_eq!(lines[0], "4,0,inner,bad,p0,0,0.100000");
        assert_eq!(lines[1], "4,0,outer,bad,p0,10,0.300000");
    }
}
