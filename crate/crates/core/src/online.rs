//! Slot-by-slot simulation over a non-stationary schedule: SVR adaptation on
//! a current-slot or cumulative buffer, the FTML baseline, and per-slot
//! reference solutions.
//!
//! Slot data is drawn and labelled once by [`prepare_slots`] and shared by
//! every method, so all traces are evaluated on identical test channels.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_fast, baseline_nonadaptive, draw_labeled, evaluate, label_channels, maml_adapt_net, AdaptBundle};
use crate::channel::{derive_seed, next_slot, ScenarioSchedule};
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::maml::{maml_pretrain, MamlConfig};
use crate::metrics::{mean, std_dev};
use crate::net::{EmbeddingParams, TrainSample};
use crate::solvers::Problem;
use crate::svr::SvrConfig;
use crate::system::SystemConfig;

/// Which adaptation pairs the buffer exposes to the per-slot fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferVariant {
    /// Only the pairs received in the current slot.
    CurrentSlot,
    /// Every pair received so far, up to an optional capacity.
    Cumulative,
}

impl BufferVariant {
    /// Method tag used in traces.
    pub fn method_name(self) -> &'static str {
        match self {
            Self::CurrentSlot => "fast_current",
            Self::Cumulative => "fast_cumulative",
        }
    }
}

/// Adaptation buffer `B_t`.
#[derive(Clone, Debug)]
pub struct SlotBuffer {
    variant: BufferVariant,
    /// Cumulative variant only: the oldest pairs are evicted beyond this.
    capacity: Option<usize>,
    samples: Vec<TrainSample>,
}

impl SlotBuffer {
    pub fn new(variant: BufferVariant, capacity: Option<usize>) -> Self {
        Self {
            variant,
            capacity,
            samples: Vec::new(),
        }
    }

    pub fn variant(&self) -> BufferVariant {
        self.variant
    }

    /// Ingests the pairs of a new slot.
    pub fn push_slot(&mut self, pairs: &[TrainSample]) {
        match self.variant {
            BufferVariant::CurrentSlot => self.samples = pairs.to_vec(),
            BufferVariant::Cumulative => {
                self.samples.extend_from_slice(pairs);
                if let Some(cap) = self.capacity {
                    let excess = self.samples.len().saturating_sub(cap);
                    self.samples.drain(..excess);
                }
            }
        }
    }

    /// Pairs visible to the fit at the current slot.
    pub fn exposed(&self) -> &[TrainSample] {
        &self.samples
    }
}

/// Labelled adaptation pairs and test channels of one slot.
#[derive(Clone, Debug)]
pub struct OnlineSlot {
    pub slot: usize,
    pub segment: usize,
    pub adapt: Vec<TrainSample>,
    /// Adaptation channels dropped because the solver failed on them.
    pub label_failures: usize,
    pub test: Vec<CMat>,
}

/// Draws and labels slot `t` on its own; identical to the corresponding
/// entry of [`prepare_slots`].
pub fn prepare_slot(
    schedule: &ScenarioSchedule,
    sys: &SystemConfig,
    problem: Problem,
    t: usize,
    n_adapt: usize,
    u_test: usize,
    seed: u64,
) -> Result<OnlineSlot> {
    let data = next_slot(schedule, sys, t, n_adapt, u_test, seed)?;
    let (adapt, label_failures) = label_channels(problem, sys, data.adapt)?;
    Ok(OnlineSlot {
        slot: data.slot,
        segment: data.segment,
        adapt,
        label_failures,
        test: data.test,
    })
}

/// Every slot of the schedule, in order.
pub fn prepare_slots(
    schedule: &ScenarioSchedule,
    sys: &SystemConfig,
    problem: Problem,
    n_adapt: usize,
    u_test: usize,
    seed: u64,
) -> Result<Vec<OnlineSlot>> {
    schedule.validate()?;
    if u_test == 0 {
        return Err(Error::Empty("test channels per slot"));
    }
    (0..schedule.horizon())
        .map(|t| prepare_slot(schedule, sys, problem, t, n_adapt, u_test, seed))
        .collect()
}

/// One `(slot, method)` point of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineRecord {
    pub slot: usize,
    pub segment: usize,
    pub method: String,
    /// Mean metric over the slot's test channels.
    pub metric_mean: f64,
    pub metric_std: f64,
    /// Wall-clock time of the slot's model update, in milliseconds.
    pub fit_ms: f64,
    /// Wall-clock time to predict all test channels, in milliseconds.
    pub predict_ms: f64,
    /// Labelled pairs the slot's model was fitted on (zero if not refitted).
    pub train_size: usize,
    pub label_failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrace {
    pub records: Vec<OnlineRecord>,
}

impl OnlineTrace {
    pub fn extend(&mut self, other: OnlineTrace) {
        self.records.extend(other.records);
    }

    /// Method tags in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Records of one method, ordered by slot.
    pub fn method(&self, name: &str) -> Vec<&OnlineRecord> {
        let mut v: Vec<&OnlineRecord> = self.records.iter().filter(|r| r.method == name).collect();
        v.sort_by_key(|r| r.slot);
        v
    }

    /// Slot means of one method.
    pub fn metric_series(&self, name: &str) -> Vec<f64> {
        self.method(name).iter().map(|r| r.metric_mean).collect()
    }

    /// Mean of one method's slot means over `slots`.
    pub fn window_mean(&self, name: &str, slots: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self
            .method(name)
            .iter()
            .filter(|r| slots.contains(&r.slot))
            .map(|r| r.metric_mean)
            .collect();
        mean(&v)
    }
}

/// Mean of a method over the `window` slots before and after every segment
/// boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryChange {
    pub method: String,
    pub boundary: usize,
    pub before: f64,
    pub after: f64,
}

impl BoundaryChange {
    pub fn dropped(&self) -> bool {
        self.after < self.before
    }
}

pub fn boundary_changes(trace: &OnlineTrace, schedule: &ScenarioSchedule, window: usize) -> Vec<BoundaryChange> {
    let mut out = Vec::new();
    for m in trace.methods() {
        for b in schedule.boundaries() {
            out.push(BoundaryChange {
                method: m.clone(),
                boundary: b,
                before: trace.window_mean(&m, b.saturating_sub(window)..b),
                after: trace.window_mean(&m, b..b + window),
            });
        }
    }
    out
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn record(slot: &OnlineSlot, method: &str, values: &[f64], fit_ms: f64, predict_ms: f64, train_size: usize) -> OnlineRecord {
    OnlineRecord {
        slot: slot.slot,
        segment: slot.segment,
        method: method.to_string(),
        metric_mean: mean(values),
        metric_std: std_dev(values),
        fit_ms,
        predict_ms,
        train_size,
        label_failures: slot.label_failures,
    }
}

/// Online SVR adaptation on the frozen embedding. Every slot ingests its
/// pairs, refits the SVR on the buffer (when it holds at least two pairs)
/// and predicts the slot's test channels. Before the first fit the
/// embedding output is used directly.
pub fn run_online_fast(
    theta: &EmbeddingParams,
    slots: &[OnlineSlot],
    problem: Problem,
    sys: &SystemConfig,
    variant: BufferVariant,
    capacity: Option<usize>,
    svr: &SvrConfig,
) -> Result<OnlineTrace> {
    svr.validate()?;
    let mut buffer = SlotBuffer::new(variant, capacity);
    let mut model: Option<AdaptBundle> = None;
    let mut trace = OnlineTrace::default();
    for slot in slots {
        buffer.push_slot(&slot.adapt);
        let start = Instant::now();
        let data = buffer.exposed();
        let train_size = if data.len() >= 2 {
            model = Some(adapt_fast(theta, data, problem, svr, slot.slot as u64)?);
            data.len()
        } else {
            0
        };
        let fit_ms = millis(start);
        let start = Instant::now();
        let values = evaluate(&slot.test, |h| match &model {
            Some(b) => Ok(b.predict(h, sys)?.metric),
            None => Ok(baseline_nonadaptive(theta, h, problem, sys)?.metric),
        })?;
        trace.records.push(record(slot, variant.method_name(), &values, fit_ms, millis(start), train_size));
    }
    Ok(trace)
}

/// Online MAML (follow-the-meta-leader) settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtmlConfig {
    /// Inner/outer rates and inner steps; `tasks_per_batch` and
    /// `meta_iters` are replaced by the two fields below.
    pub maml: MamlConfig,
    /// Past tasks sampled per meta-update, `N_task`.
    pub n_task: usize,
    /// Meta-updates performed at every slot.
    pub meta_iters_per_slot: usize,
}

impl Default for FtmlConfig {
    fn default() -> Self {
        Self {
            maml: MamlConfig::default(),
            n_task: 4,
            meta_iters_per_slot: 5,
        }
    }
}

/// FTML baseline: every slot's pairs form one task. At slot `t >= 1` the
/// meta-parameters take `meta_iters_per_slot` updates on tasks sampled from
/// the stored slots `0..t`, then adapt on slot `t` and predict. Slot 0 predicts with
/// the unadapted model.
pub fn run_online_ftml(
    theta0: &EmbeddingParams,
    slots: &[OnlineSlot],
    problem: Problem,
    sys: &SystemConfig,
    cfg: &FtmlConfig,
) -> Result<OnlineTrace> {
    if cfg.n_task == 0 {
        return Err(Error::InvalidSpec("FTML needs at least one task per update".into()));
    }
    cfg.maml.validate()?;
    let mut theta = theta0.clone();
    let mut pools: Vec<Vec<TrainSample>> = Vec::new();
    let mut trace = OnlineTrace::default();
    for (i, slot) in slots.iter().enumerate() {
        let start = Instant::now();
        let usable = pools.iter().any(|p| p.len() >= 2);
        let (net, train_size) = if i > 0 && usable && !slot.adapt.is_empty() {
            let meta = MamlConfig {
                tasks_per_batch: cfg.n_task,
                meta_iters: cfg.meta_iters_per_slot,
                seed: derive_seed(cfg.maml.seed, 0xF7, slot.slot as u64),
                ..cfg.maml
            };
            theta = maml_pretrain(&theta, &pools, &meta)?.model;
            (maml_adapt_net(&theta, &slot.adapt, &cfg.maml)?, slot.adapt.len())
        } else {
            (theta.clone(), 0)
        };
        let fit_ms = millis(start);
        pools.push(slot.adapt.clone());
        let start = Instant::now();
        let values = evaluate(&slot.test, |h| Ok(baseline_nonadaptive(&net, h, problem, sys)?.metric))?;
        trace.records.push(record(slot, "ftml", &values, fit_ms, millis(start), train_size));
    }
    Ok(trace)
}

/// Per-slot optimal (SINR balancing) or WMMSE (sum rate) solutions.
pub fn run_online_reference(slots: &[OnlineSlot], problem: Problem, sys: &SystemConfig) -> Result<OnlineTrace> {
    let mut trace = OnlineTrace::default();
    for slot in slots {
        let start = Instant::now();
        let values = evaluate(&slot.test, |h| problem.reference_metric(h, sys))?;
        trace.records.push(record(slot, "reference", &values, 0.0, millis(start), 0));
    }
    Ok(trace)
}

/// The pretrained embedding without any adaptation.
pub fn run_online_nonadaptive(
    theta: &EmbeddingParams,
    slots: &[OnlineSlot],
    problem: Problem,
    sys: &SystemConfig,
) -> Result<OnlineTrace> {
    let mut trace = OnlineTrace::default();
    for slot in slots {
        let start = Instant::now();
        let values = evaluate(&slot.test, |h| Ok(baseline_nonadaptive(theta, h, problem, sys)?.metric))?;
        trace.records.push(record(slot, "non_adaptive", &values, 0.0, millis(start), 0));
    }
    Ok(trace)
}

/// Offline upper bound for the SVR method: one SVR per segment, fitted on
/// `n_offline` labelled pairs drawn from that segment ahead of time.
#[allow(clippy::too_many_arguments)]
pub fn run_online_offline_fast(
    theta: &EmbeddingParams,
    schedule: &ScenarioSchedule,
    slots: &[OnlineSlot],
    problem: Problem,
    sys: &SystemConfig,
    svr: &SvrConfig,
    n_offline: usize,
    seed: u64,
) -> Result<OnlineTrace> {
    let bundles = schedule
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let (data, _) = draw_labeled(problem, sys, &seg.fading, &seg.large, n_offline, seed, 0x0FF + i as u64)?;
            adapt_fast(theta, &data, problem, svr, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = OnlineTrace::default();
    for slot in slots {
        let b = &bundles[slot.segment];
        let start = Instant::now();
        let values = evaluate(&slot.test, |h| Ok(b.predict(h, sys)?.metric))?;
        trace.records.push(record(slot, "offline_fast", &values, 0.0, millis(start), b.n_adapt));
    }
    Ok(trace)
}
