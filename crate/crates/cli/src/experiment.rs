//! Experiment stages built from a [`RunConfig`]: data generation,
//! pretraining, adaptation, paired evaluation, sensitivity, pass counts,
//! the online simulation and the parameter sweeps.
//!
//! Every random draw uses a seed derived from the run seed and a fixed
//! stage tag, so each stage is reproducible on its own.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use beamadapt::adaptation::{
    adapt_fast, baseline_nonadaptive, baseline_transfer, count_cost, draw_labeled, evaluate, maml_adapt_net, AdaptBundle,
    CostReport, Method, PassCounter,
};
use beamadapt::channel::{derive_seed, LargeScaleSpec};
use beamadapt::dataset::{build_pretrain_dataset, draw_channels, Dataset};
use beamadapt::maml::{maml_pretrain_until, MamlConfig, MamlOutcome};
use beamadapt::metrics::{mean, sensitivity_study, summarize, PairedSummary, Sensitivity};
use beamadapt::net::{train, Arch, EmbeddingParams, Objective, TrainOutcome, TrainSample};
use beamadapt::online::{
    boundary_changes, prepare_slots, run_online_fast, run_online_ftml, run_online_nonadaptive, run_online_offline_fast,
    run_online_reference, BoundaryChange, BufferVariant, OnlineTrace,
};
use beamadapt::{CMat, Problem, SystemConfig};
use serde::{Deserialize, Serialize};

use crate::config::{parse_power, OnlineMethod, RunConfig};

mod tag {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const MAML: u64 = 4;
    pub const TEST: u64 = 5;
    pub const ADAPT: u64 = 6;
    pub const SENSITIVITY: u64 = 7;
    pub const ONLINE: u64 = 8;
    pub const OFFLINE: u64 = 9;
    pub const TRANSFER: u64 = 10;
}

fn seed(cfg: &RunConfig, tag: u64) -> u64 {
    derive_seed(cfg.seed, tag, 0)
}

/// Whether pretraining data needs solver labels: always for SINR
/// balancing, and for sum rate only when MAML is meta-trained on it.
pub fn needs_labels(cfg: &RunConfig) -> bool {
    cfg.problem == Problem::SinrBalancing || cfg.wants(Method::Maml)
}

/// The fading-family mixture without large-scale fading.
pub fn pretrain_dataset(cfg: &RunConfig, labeled: bool) -> Result<Dataset> {
    let sys = cfg.system_config()?;
    let problem = cfg.problem;
    let labeler = |h: &CMat| problem.label(h, &sys);
    let ds = build_pretrain_dataset(
        &sys,
        &cfg.data.families,
        cfg.data.n_per_family,
        &LargeScaleSpec::disabled(),
        labeled.then_some(&labeler),
        seed(cfg, tag::DATA),
    )?;
    Ok(ds)
}

pub fn initial_params(cfg: &RunConfig) -> Result<EmbeddingParams> {
    let sys = cfg.system_config()?;
    Ok(EmbeddingParams::init(Arch::new(sys.nt, sys.k_users), sys.power_budget, seed(cfg, tag::INIT)))
}

/// Objective of the embedding network: supervised for SINR balancing,
/// the sum rate itself for sum rate.
pub fn pretrain_objective(problem: Problem) -> Objective {
    match problem {
        Problem::SinrBalancing => Objective::SupervisedMse,
        Problem::SumRate => Objective::UnsupervisedSumRate,
    }
}

pub fn pretrain_embedding(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let sys = cfg.system_config()?;
    let objective = pretrain_objective(cfg.problem);
    ensure!(
        objective != Objective::SupervisedMse || ds.is_labeled(),
        "supervised pretraining needs a labelled dataset"
    );
    let data = TrainSample::from_dataset(ds)?;
    let tc = cfg.pretrain.train_config(seed(cfg, tag::TRAIN));
    Ok(train(&initial_params(cfg)?, &data, objective, &sys.noise_power, &tc)?)
}

/// One task pool per fading family.
pub fn family_pools(ds: &Dataset) -> Result<Vec<Vec<TrainSample>>> {
    let groups = ds.samples.iter().map(|s| s.group).max().map_or(0, |g| g as usize + 1);
    let mut pools = vec![Vec::new(); groups];
    for s in &ds.samples {
        pools[s.group as usize].push(TrainSample::new(s.channel.clone(), s.label.clone())?);
    }
    Ok(pools)
}

pub fn maml_config(cfg: &RunConfig) -> MamlConfig {
    MamlConfig {
        seed: seed(cfg, tag::MAML),
        ..cfg.maml
    }
}

/// MAML meta-training of the embedding architecture on the family pools.
pub fn meta_train(cfg: &RunConfig, ds: &Dataset) -> Result<MamlOutcome<EmbeddingParams>> {
    ensure!(ds.is_labeled(), "MAML meta-training needs a labelled dataset");
    let pools = family_pools(ds)?;
    Ok(maml_pretrain_until(&initial_params(cfg)?, &pools, &maml_config(cfg), |_, _| false)?)
}

pub fn test_channels(cfg: &RunConfig, sys: &SystemConfig, n: usize) -> Vec<CMat> {
    let sc = &cfg.eval.scenario;
    draw_channels(sys, &sc.fading, &sc.large, n, seed(cfg, tag::TEST), 0)
}

/// Labelled adaptation set `index` from the test scenario.
pub fn adaptation_set(cfg: &RunConfig, sys: &SystemConfig, index: u64) -> beamadapt::Result<Vec<TrainSample>> {
    let sc = &cfg.eval.scenario;
    let (set, _) = draw_labeled(cfg.problem, sys, &sc.fading, &sc.large, cfg.adapt.n_adapt, seed(cfg, tag::ADAPT), index)?;
    Ok(set)
}

pub fn fast_bundle(cfg: &RunConfig, sys: &SystemConfig, theta: &EmbeddingParams, index: u64) -> Result<AdaptBundle> {
    let set = adaptation_set(cfg, sys, index)?;
    Ok(adapt_fast(theta, &set, cfg.problem, &cfg.adapt.svr, index)?)
}

/// Networks available to an evaluation.
#[derive(Clone, Debug)]
pub struct Models {
    pub embedding: EmbeddingParams,
    pub pretrain_passes: usize,
    pub maml: Option<EmbeddingParams>,
    pub maml_passes: usize,
    /// Fitted SVR bundle; refitted from adaptation set 0 when absent.
    pub bundle: Option<AdaptBundle>,
}

/// Per-channel metrics of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodColumn {
    pub method: Method,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub problem: Problem,
    pub unit: String,
    pub columns: Vec<MethodColumn>,
    pub summary: PairedSummary,
    pub costs: Vec<CostReport>,
}

impl Evaluation {
    pub fn column(&self, m: Method) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.method == m).map(|c| c.values.as_slice())
    }
}

/// Per-channel mean over repetitions.
fn average_columns(reps: &[Vec<f64>]) -> Vec<f64> {
    (0..reps[0].len())
        .map(|i| mean(&reps.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect()
}

/// Metrics of one method on `test`. Transfer and MAML are averaged over
/// `adapt.repetitions` adaptation sets; the SVR method uses set 0 only.
pub fn method_metrics(cfg: &RunConfig, sys: &SystemConfig, models: &Models, m: Method, test: &[CMat]) -> Result<Vec<f64>> {
    let problem = cfg.problem;
    let theta = &models.embedding;
    Ok(match m {
        Method::Reference => evaluate(test, |h| problem.reference_metric(h, sys))?,
        Method::NonAdaptive => evaluate(test, |h| Ok(baseline_nonadaptive(theta, h, problem, sys)?.metric))?,
        Method::Fast => {
            let b = match &models.bundle {
                Some(b) => b.clone(),
                None => fast_bundle(cfg, sys, theta, 0)?,
            };
            evaluate(test, |h| Ok(b.predict(h, sys)?.metric))?
        }
        Method::Transfer => {
            let reps = (0..cfg.adapt.repetitions as u64)
                .map(|r| {
                    let set = adaptation_set(cfg, sys, r)?;
                    let tuned = baseline_transfer(theta, &set, &cfg.adapt.transfer_config(derive_seed(cfg.seed, tag::TRANSFER, r)))?.params;
                    Ok(evaluate(test, |h| Ok(baseline_nonadaptive(&tuned, h, problem, sys)?.metric))?)
                })
                .collect::<Result<Vec<_>>>()?;
            average_columns(&reps)
        }
        Method::Maml => {
            let meta = models.maml.as_ref().context("MAML requested but no meta-trained model is available")?;
            let reps = (0..cfg.adapt.repetitions as u64)
                .map(|r| {
                    let set = adaptation_set(cfg, sys, r)?;
                    let tuned = maml_adapt_net(meta, &set, &cfg.maml)?;
                    Ok(evaluate(test, |h| Ok(baseline_nonadaptive(&tuned, h, problem, sys)?.metric))?)
                })
                .collect::<Result<Vec<_>>>()?;
            average_columns(&reps)
        }
    })
}

/// Pass counts and adapted-parameter counts per method. An adaptation pass
/// is one forward (and backward) evaluation on the adaptation set.
pub fn cost_reports(cfg: &RunConfig, models: &Models) -> Vec<CostReport> {
    let k = cfg.system.k;
    let count = models.embedding.param_count();
    cfg.methods
        .iter()
        .map(|&m| {
            let passes = match m {
                Method::Fast => PassCounter {
                    pretrain: models.pretrain_passes,
                    adapt: 1,
                },
                Method::Transfer => PassCounter {
                    pretrain: models.pretrain_passes,
                    adapt: cfg.adapt.transfer_epochs,
                },
                Method::Maml => PassCounter {
                    pretrain: models.maml_passes,
                    adapt: cfg.maml.inner_steps,
                },
                Method::NonAdaptive => PassCounter {
                    pretrain: models.pretrain_passes,
                    adapt: 0,
                },
                Method::Reference => PassCounter::default(),
            };
            count_cost(m, k, count, passes)
        })
        .collect()
}

pub fn evaluate_methods(cfg: &RunConfig, models: &Models, n_test: usize) -> Result<Evaluation> {
    let sys = cfg.system_config()?;
    let test = test_channels(cfg, &sys, n_test);
    let columns = cfg
        .methods
        .iter()
        .map(|&m| {
            log::info!("evaluating {}", m.name());
            Ok(MethodColumn {
                method: m,
                values: method_metrics(cfg, &sys, models, m, &test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(&str, &[f64])> = columns.iter().map(|c| (c.method.name(), c.values.as_slice())).collect();
    let summary = summarize(&named)?;
    Ok(Evaluation {
        problem: cfg.problem,
        unit: cfg.problem.metric_unit().to_string(),
        columns,
        summary,
        costs: cost_reports(cfg, models),
    })
}

/// Pretrains the embedding (and the MAML model when requested) from
/// scratch.
pub fn build_models(cfg: &RunConfig) -> Result<Models> {
    let ds = pretrain_dataset(cfg, needs_labels(cfg))?;
    let out = pretrain_embedding(cfg, &ds)?;
    let (maml, maml_passes) = if cfg.wants(Method::Maml) {
        let m = meta_train(cfg, &ds)?;
        (Some(m.model), m.passes)
    } else {
        (None, 0)
    };
    Ok(Models {
        embedding: out.params,
        pretrain_passes: out.passes,
        maml,
        maml_passes,
        bundle: None,
    })
}

/// Mean test metric of `method` for each of `sensitivity.n_datasets`
/// random adaptation sets.
pub fn sensitivity(cfg: &RunConfig, models: &Models, method: Method) -> Result<Sensitivity> {
    let sys = cfg.system_config()?;
    let test = test_channels(cfg, &sys, cfg.sensitivity.n_test);
    let problem = cfg.problem;
    let base = 1 << 20;
    let result = sensitivity_study(method.name(), cfg.sensitivity.n_datasets, cfg.adapt.n_adapt, |d| {
        let index = base + d as u64;
        let set = adaptation_set(cfg, &sys, index)?;
        let values = match method {
            Method::Fast => {
                let b = adapt_fast(&models.embedding, &set, problem, &cfg.adapt.svr, index)?;
                evaluate(&test, |h| Ok(b.predict(h, &sys)?.metric))?
            }
            Method::Transfer => {
                let tc = cfg.adapt.transfer_config(derive_seed(cfg.seed, tag::SENSITIVITY, index));
                let tuned = baseline_transfer(&models.embedding, &set, &tc)?.params;
                evaluate(&test, |h| Ok(baseline_nonadaptive(&tuned, h, problem, &sys)?.metric))?
            }
            Method::Maml => {
                let meta = models.maml.as_ref().ok_or(beamadapt::Error::Empty("meta-trained model"))?;
                let tuned = maml_adapt_net(meta, &set, &cfg.maml)?;
                evaluate(&test, |h| Ok(baseline_nonadaptive(&tuned, h, problem, &sys)?.metric))?
            }
            Method::NonAdaptive | Method::Reference => {
                return Err(beamadapt::Error::InvalidSpec(format!("{} does not use an adaptation set", method.name())))
            }
        };
        Ok(mean(&values))
    })?;
    Ok(result)
}

/// Passes needed by supervised pretraining and by MAML meta-training to
/// reach the same training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassStudy {
    /// Mini-batch passes of the early-stopped supervised pretraining.
    pub fast_passes: usize,
    /// Training-set MSE of the pretrained network (the target).
    pub target_loss: f64,
    /// Gradient passes of MAML until its smoothed per-task query loss
    /// reached the target (or the iteration cap).
    pub maml_passes: usize,
    pub maml_iters: usize,
    pub maml_final_loss: f64,
    pub maml_reached: bool,
}

/// Window of the moving average of the MAML meta-loss.
const PASS_STUDY_WINDOW: usize = 10;

/// Compares pass counts on the labelled pretraining set of the problem.
/// Both methods use the supervised loss so the losses are comparable.
pub fn pass_study(cfg: &RunConfig) -> Result<PassStudy> {
    let sys = cfg.system_config()?;
    let ds = pretrain_dataset(cfg, true)?;
    let data = TrainSample::from_dataset(&ds)?;
    let tc = cfg.pretrain.train_config(seed(cfg, tag::TRAIN));
    let theta0 = initial_params(cfg)?;
    let fast = train(&theta0, &data, Objective::SupervisedMse, &sys.noise_power, &tc)?;
    let refs: Vec<&TrainSample> = data.iter().collect();
    let target = fast.params.eval_loss(Objective::SupervisedMse, &refs, &sys.noise_power)?;

    let mcfg = MamlConfig {
        meta_iters: cfg.report.pass_study_max_iters,
        ..maml_config(cfg)
    };
    // The meta-loss is summed over tasks and scaled by (K/P)^2.
    let scale = (sys.k_users as f64 / sys.power_budget).powi(2) * mcfg.tasks_per_batch as f64;
    let mut recent: Vec<f64> = Vec::new();
    let mut reached = false;
    let mut last = f64::NAN;
    let pools = family_pools(&ds)?;
    let outcome = maml_pretrain_until(&theta0, &pools, &mcfg, |_, loss| {
        recent.push(loss / scale);
        if recent.len() > PASS_STUDY_WINDOW {
            recent.remove(0);
        }
        last = mean(&recent);
        reached = recent.len() == PASS_STUDY_WINDOW && last <= target;
        reached
    })?;
    Ok(PassStudy {
        fast_passes: fast.passes,
        target_loss: target,
        maml_passes: outcome.passes,
        maml_iters: outcome.meta_loss_trace.len(),
        maml_final_loss: last,
        maml_reached: reached,
    })
}

/// Online simulation over the mobility schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineResult {
    pub trace: OnlineTrace,
    pub boundaries: Vec<BoundaryChange>,
    /// Mean slot metric per method and segment.
    pub segment_means: Vec<(String, usize, f64)>,
}

/// Slots averaged on each side of a segment boundary.
pub const BOUNDARY_WINDOW: usize = 5;

pub fn online_experiment(cfg: &RunConfig, theta: &EmbeddingParams) -> Result<OnlineResult> {
    let sys = cfg.system_config()?;
    let oc = &cfg.online;
    let schedule = oc.schedule();
    let problem = cfg.problem;
    let slots = prepare_slots(&schedule, &sys, problem, oc.n_adapt, oc.u_test, seed(cfg, tag::ONLINE))?;
    let mut trace = OnlineTrace::default();
    for &m in &oc.methods {
        log::info!("online method {m:?}");
        trace.extend(match m {
            OnlineMethod::Reference => run_online_reference(&slots, problem, &sys)?,
            OnlineMethod::FastCurrent => {
                run_online_fast(theta, &slots, problem, &sys, BufferVariant::CurrentSlot, None, &cfg.adapt.svr)?
            }
            OnlineMethod::FastCumulative => {
                run_online_fast(theta, &slots, problem, &sys, BufferVariant::Cumulative, oc.capacity, &cfg.adapt.svr)?
            }
            OnlineMethod::Ftml => {
                let mut fc = oc.ftml;
                fc.maml.seed = derive_seed(cfg.seed, tag::ONLINE, 1);
                run_online_ftml(theta, &slots, problem, &sys, &fc)?
            }
            OnlineMethod::NonAdaptive => run_online_nonadaptive(theta, &slots, problem, &sys)?,
            OnlineMethod::OfflineFast => run_online_offline_fast(
                theta,
                &schedule,
                &slots,
                problem,
                &sys,
                &cfg.adapt.svr,
                oc.n_offline,
                seed(cfg, tag::OFFLINE),
            )?,
        });
    }
    let boundaries = boundary_changes(&trace, &schedule, BOUNDARY_WINDOW);
    let mut segment_means = Vec::new();
    for m in trace.methods() {
        for s in 0..schedule.segments.len() {
            let v: Vec<f64> = trace.method(&m).iter().filter(|r| r.segment == s).map(|r| r.metric_mean).collect();
            segment_means.push((m.clone(), s, mean(&v)));
        }
    }
    Ok(OnlineResult {
        trace,
        boundaries,
        segment_means,
    })
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nt: usize,
    pub k: usize,
    pub power: String,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
}

fn sweep_point(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let models = build_models(cfg)?;
    let ev = evaluate_methods(cfg, &models, cfg.report.grid_n_test)?;
    Ok(ev
        .columns
        .iter()
        .map(|c| {
            let s = ev.summary.method(c.method.name()).expect("summarised");
            SweepRow {
                nt: cfg.system.nt,
                k: cfg.system.k,
                power: cfg.system.power.clone(),
                method: c.method,
                mean: s.mean,
                std: s.std,
                std_error: s.std_error,
            }
        })
        .collect())
}

/// Mean metric of every method over the power grid.
pub fn power_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for p in &cfg.report.power_grid {
        parse_power(p)?;
        let mut c = cfg.clone();
        c.system.power = p.clone();
        log::info!("power sweep at {p}");
        rows.extend(sweep_point(&c)?);
    }
    Ok(rows)
}

/// Mean metric of every method over the user-count grid.
pub fn users_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.report.users_grid {
        let mut c = cfg.clone();
        c.system.nt = cfg.report.users_grid_nt;
        c.system.k = k;
        log::info!("user sweep at K = {k}");
        rows.extend(sweep_point(&c)?);
    }
    Ok(rows)
}

/// Wall-clock adaptation and per-channel prediction time of each learned
/// method, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub adapt_ms: f64,
    pub predict_ms_per_channel: f64,
}

pub fn timing(cfg: &RunConfig, models: &Models) -> Result<Vec<TimingRow>> {
    let sys = cfg.system_config()?;
    let problem = cfg.problem;
    let test = test_channels(cfg, &sys, cfg.report.grid_n_test);
    let set = adaptation_set(cfg, &sys, 0)?;
    let per_channel = |t: Instant| t.elapsed().as_secs_f64() * 1e3 / test.len() as f64;
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        let (adapt_ms, predict_ms_per_channel) = match m {
            Method::Fast => {
                let t = Instant::now();
                let b = adapt_fast(&models.embedding, &set, problem, &cfg.adapt.svr, 0)?;
                let a = t.elapsed().as_secs_f64() * 1e3;
                let t = Instant::now();
                for h in &test {
                    b.predict(h, &sys)?;
                }
                (a, per_channel(t))
            }
            Method::Transfer | Method::Maml => {
                let t = Instant::now();
                let tuned = if m == Method::Transfer {
                    baseline_transfer(&models.embedding, &set, &cfg.adapt.transfer_config(0))?.params
                } else {
                    let meta = models.maml.as_ref().context("no meta-trained model")?;
                    maml_adapt_net(meta, &set, &cfg.maml)?
                };
                let a = t.elapsed().as_secs_f64() * 1e3;
                let t = Instant::now();
                for h in &test {
                    baseline_nonadaptive(&tuned, h, problem, &sys)?;
                }
                (a, per_channel(t))
            }
            Method::NonAdaptive => {
                let t = Instant::now();
                for h in &test {
                    baseline_nonadaptive(&models.embedding, h, problem, &sys)?;
                }
                (0.0, per_channel(t))
            }
            Method::Reference => {
                let t = Instant::now();
                for h in &test {
                    problem.reference_metric(h, &sys)?;
                }
                (0.0, per_channel(t))
            }
        };
        rows.push(TimingRow {
            method: m,
            adapt_ms,
            predict_ms_per_channel,
        });
    }
    Ok(rows)
}
