//! Offline adaptation pipelines: the frozen-embedding SVR adaptation and the
//! non-adaptive, last-layer transfer and MAML baselines.
//!
//! The SVR works on normalised powers: features `K q_hat / P` from the
//! embedding network and targets `K q / P` from the labels, both of mean
//! one, so the default `C` and `epsilon` are meaningful for any budget.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{rng_for, sample_channel, FadingSpec, LargeScaleSpec};
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::maml::{maml_adapt, MamlConfig};
use crate::net::{train, EmbeddingParams, NetInput, Objective, ParamCount, ParamGroup, TrainConfig, TrainOutcome, TrainSample};
use crate::solvers::Problem;
use crate::svr::{svr_fit, SvrConfig, SvrModel};
use crate::system::SystemConfig;

pub const BUNDLE_FORMAT: &str = "beamadapt-bundle";
pub const BUNDLE_VERSION: u32 = 1;

/// Power vector, beamformers and metric for one channel.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub q: Vec<f64>,
    pub beamformers: CMat,
    /// Balanced SINR in dB or sum rate in bit/s/Hz.
    pub metric: f64,
}

/// Clips negative entries and rescales to sum to `power`; an all-zero
/// vector becomes the uniform split.
pub fn feasible_powers(raw: &[f64], power: f64) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|v| power * v / total).collect()
    } else {
        vec![power / raw.len() as f64; raw.len()]
    }
}

/// Recovers beamformers from `q` and evaluates the problem's metric.
pub fn predict_from_q(problem: Problem, h: &CMat, q: Vec<f64>, sys: &SystemConfig) -> Result<Prediction> {
    let beamformers = problem.recover(h, &q, sys)?;
    let metric = problem.metric(h, &beamformers, sys)?;
    Ok(Prediction { q, beamformers, metric })
}

/// Normalised embedding feature `K q_hat / P` of one channel.
pub fn embed(theta: &EmbeddingParams, h: &CMat) -> Result<Vec<f64>> {
    let q = theta.predict(&NetInput::from_channel(h)?)?;
    let s = theta.arch.k as f64 / theta.power_budget;
    Ok(q.iter().map(|v| v * s).collect())
}

/// Embedding network followed by a fitted SVR.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptBundle {
    pub problem: Problem,
    pub embedding: EmbeddingParams,
    pub svr: SvrModel,
    pub n_adapt: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    format: String,
    version: u32,
    problem: Problem,
    n_adapt: usize,
    seed: u64,
}

impl AdaptBundle {
    /// SVR output mapped back to a feasible power vector.
    pub fn predict_q(&self, h: &CMat, power: f64) -> Result<Vec<f64>> {
        let y = self.svr.predict_row(&embed(&self.embedding, h)?)?;
        let s = power / self.embedding.arch.k as f64;
        Ok(feasible_powers(&y.iter().map(|v| v * s).collect::<Vec<_>>(), power))
    }

    pub fn predict(&self, h: &CMat, sys: &SystemConfig) -> Result<Prediction> {
        predict_from_q(self.problem, h, self.predict_q(h, sys.power_budget)?, sys)
    }

    /// Writes `embedding.json`, `svr.json` and `bundle.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.embedding.save(&dir.join("embedding.json"))?;
        fs::write(dir.join("svr.json"), serde_json::to_string_pretty(&self.svr)?)?;
        let meta = BundleMeta {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            problem: self.problem,
            n_adapt: self.n_adapt,
            seed: self.seed,
        };
        fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("bundle.json"))?)?;
        if meta.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!("expected {BUNDLE_FORMAT}, found {}", meta.format)));
        }
        if meta.version != BUNDLE_VERSION {
            return Err(Error::Version {
                found: meta.version,
                expected: BUNDLE_VERSION,
            });
        }
        Ok(Self {
            problem: meta.problem,
            embedding: EmbeddingParams::load(&dir.join("embedding.json"))?,
            svr: serde_json::from_str(&fs::read_to_string(dir.join("svr.json"))?)?,
            n_adapt: meta.n_adapt,
            seed: meta.seed,
        })
    }
}

/// Features of the adaptation set through the frozen embedding, then one
/// SVR per user fit against the normalised labels.
pub fn adapt_fast(
    theta: &EmbeddingParams,
    d_ad: &[TrainSample],
    problem: Problem,
    cfg: &SvrConfig,
    seed: u64,
) -> Result<AdaptBundle> {
    if d_ad.is_empty() {
        return Err(Error::Empty("adaptation set"));
    }
    let s = theta.arch.k as f64 / theta.power_budget;
    let mut x = Vec::with_capacity(d_ad.len());
    let mut y = Vec::with_capacity(d_ad.len());
    for sample in d_ad {
        let label = sample.label.as_ref().ok_or(Error::Empty("label of an adaptation sample"))?;
        let q = theta.predict(&sample.input)?;
        x.push(q.iter().map(|v| v * s).collect::<Vec<_>>());
        y.push(label.iter().map(|v| v * s).collect::<Vec<_>>());
    }
    Ok(AdaptBundle {
        problem,
        embedding: theta.clone(),
        svr: svr_fit(&x, &y, cfg)?,
        n_adapt: d_ad.len(),
        seed,
    })
}

/// The pretrained network's own output, no adaptation.
pub fn baseline_nonadaptive(theta: &EmbeddingParams, h: &CMat, problem: Problem, sys: &SystemConfig) -> Result<Prediction> {
    let q = theta.predict(&NetInput::from_channel(h)?)?;
    predict_from_q(problem, h, feasible_powers(&q, sys.power_budget), sys)
}

/// Fine-tunes the fully-connected layer on the labelled adaptation set;
/// every other parameter and the normalisation statistics stay fixed.
pub fn baseline_transfer(theta: &EmbeddingParams, d_ad: &[TrainSample], ft: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        params: ParamGroup::FcOnly,
        ..ft.clone()
    };
    train(theta, d_ad, Objective::SupervisedMse, &[], &cfg)
}

/// Fine-tuning defaults for the transfer baseline: full-batch Adam on the
/// adaptation set.
pub fn default_transfer_config(n_adapt: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: n_adapt.max(1),
        early_stop: None,
        params: ParamGroup::FcOnly,
        seed,
        ..TrainConfig::default()
    }
}

/// Labels `channels` with the problem's solver in parallel, keeping input
/// order. Channels whose solve fails are skipped; the second value counts
/// them.
pub fn label_channels(problem: Problem, sys: &SystemConfig, channels: Vec<CMat>) -> Result<(Vec<TrainSample>, usize)> {
    let total = channels.len();
    let labeled: Vec<Option<TrainSample>> = channels
        .into_par_iter()
        .map(|h| problem.label(&h, sys).ok().map(|q| TrainSample::new(h, Some(q))))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|s| s.transpose())
        .collect::<Result<_>>()?;
    let kept: Vec<TrainSample> = labeled.into_iter().flatten().collect();
    let failed = total - kept.len();
    Ok((kept, failed))
}

/// Maximum candidate channels per requested labelled sample.
const MAX_LABEL_ATTEMPTS: usize = 4;

/// `n` labelled samples from one scenario. Candidate `i` is always drawn
/// from the same generator, so the set depends on `(seed, stream)` only.
/// Returns the samples and the number of skipped solver failures.
pub fn draw_labeled(
    problem: Problem,
    sys: &SystemConfig,
    fading: &FadingSpec,
    large: &LargeScaleSpec,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<TrainSample>, usize)> {
    let mut out = Vec::with_capacity(n);
    let mut failed = 0;
    let mut next = 0;
    while out.len() < n {
        if next >= MAX_LABEL_ATTEMPTS * n.max(1) {
            return Err(Error::LabelDropRate { dropped: failed, total: next });
        }
        let want = n - out.len();
        let batch: Vec<CMat> = (next..next + want)
            .into_par_iter()
            .map(|i| sample_channel(sys, fading, large, &mut rng_for(seed, stream, i as u64)))
            .collect();
        next += want;
        let (kept, f) = label_channels(problem, sys, batch)?;
        failed += f;
        out.extend(kept);
    }
    Ok((out, failed))
}

/// Task adaptation of a meta-trained network on the adaptation set.
pub fn maml_adapt_net(theta_meta: &EmbeddingParams, d_ad: &[TrainSample], cfg: &MamlConfig) -> Result<EmbeddingParams> {
    if d_ad.is_empty() {
        return Err(Error::Empty("adaptation set"));
    }
    let refs: Vec<&TrainSample> = d_ad.iter().collect();
    Ok(maml_adapt(theta_meta, &refs, cfg)?.0)
}

/// Metric of `f` on every channel, evaluated in parallel, in input order.
pub fn evaluate<F>(channels: &[CMat], f: F) -> Result<Vec<f64>>
where
    F: Fn(&CMat) -> Result<f64> + Sync,
{
    channels.par_iter().map(&f).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Classical solver: the optimum (SINR balancing) or WMMSE (sum rate).
    Reference,
    Fast,
    NonAdaptive,
    Transfer,
    Maml,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Reference, Method::Fast, Method::NonAdaptive, Method::Transfer, Method::Maml];

    pub fn name(self) -> &'static str {
        match self {
            Method::Reference => "reference",
            Method::Fast => "fast",
            Method::NonAdaptive => "non_adaptive",
            Method::Transfer => "transfer",
            Method::Maml => "maml",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method {s:?}")))
    }
}

/// Trainable parameters touched during adaptation, and network passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub adapted_params: usize,
    pub pretrain_passes: usize,
    pub adapt_passes: usize,
}

/// Pass counters accumulated by a pipeline run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    pub pretrain: usize,
    pub adapt: usize,
}

/// Parameter counts per method: the SVR's linear reading `K^2 + K`, the FC
/// layer for transfer, the full network for MAML, none for the others.
pub fn count_cost(method: Method, k_users: usize, arch_params: ParamCount, passes: PassCounter) -> CostReport {
    let adapted_params = match method {
        Method::Fast => k_users * k_users + k_users,
        Method::Transfer => arch_params.fc,
        Method::Maml => arch_params.total,
        Method::NonAdaptive | Method::Reference => 0,
    };
    CostReport {
        method,
        adapted_params,
        pretrain_passes: passes.pretrain,
        adapt_passes: passes.adapt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{rayleigh_channel, ChannelRng};
    use crate::net::Arch;
    use rand::SeedableRng;

    fn sys44() -> SystemConfig {
        SystemConfig::new(4, 4, 10.0, 1.0).unwrap()
    }

    fn samples(n: usize, seed: u64, problem: Problem, sys: &SystemConfig) -> Vec<TrainSample> {
        let mut rng = ChannelRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let h = rayleigh_channel(sys.nt, sys.k_users, &mut rng);
                let q = problem.label(&h, sys).unwrap();
                TrainSample::new(h, Some(q)).unwrap()
            })
            .collect()
    }

    #[test]
    fn feasible_powers_clip_and_rescale() {
        assert_eq!(feasible_powers(&[-1.0, 1.0, 3.0], 2.0), vec![0.0, 0.5, 1.5]);
        assert_eq!(feasible_powers(&[-1.0, 0.0], 2.0), vec![1.0, 1.0]);
        assert_eq!(feasible_powers(&[f64::NAN, 1.0], 2.0), vec![0.0, 2.0]);
    }

    #[test]
    fn identity_regression_reproduces_embedding() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 1);
        let mut data = samples(20, 2, Problem::SinrBalancing, &sys);
        for s in &mut data {
            s.label = Some(theta.predict(&s.input).unwrap());
        }
        let before = theta.clone();
        let cfg = SvrConfig::default();
        let bundle = adapt_fast(&theta, &data, Problem::SinrBalancing, &cfg, 0).unwrap();
        assert_eq!(theta, before);
        let scale = sys.power_budget / 4.0;
        for s in &data {
            let raw = bundle.svr.predict_row(&embed(&theta, &s.channel).unwrap()).unwrap();
            let own = theta.predict(&s.input).unwrap();
            for (r, o) in raw.iter().zip(&own) {
                assert!((r * scale - o).abs() <= (cfg.epsilon + cfg.smo_tol) * scale);
            }
        }
    }

    #[test]
    fn single_user_always_gets_mrt() {
        let sys = SystemConfig::new(3, 1, 2.0, 0.5).unwrap();
        let theta = EmbeddingParams::init(Arch::new(3, 1), sys.power_budget, 3);
        let data = samples(5, 4, Problem::SinrBalancing, &sys);
        let bundle = adapt_fast(&theta, &data, Problem::SinrBalancing, &SvrConfig::default(), 0).unwrap();
        let h = rayleigh_channel(3, 1, &mut ChannelRng::seed_from_u64(9));
        let mrt = crate::system::mrt(&h, sys.power_budget);
        for problem in [Problem::SinrBalancing, Problem::SumRate] {
            let b = AdaptBundle { problem, ..bundle.clone() };
            let p = b.predict(&h, &sys).unwrap();
            for n in 0..3 {
                assert!((p.beamformers[(n, 0)] - mrt[(n, 0)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn prediction_metric_matches_direct_recomputation() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 5);
        for problem in [Problem::SinrBalancing, Problem::SumRate] {
            let data = samples(12, 6, problem, &sys);
            let bundle = adapt_fast(&theta, &data, problem, &SvrConfig::default(), 0).unwrap();
            let h = rayleigh_channel(4, 4, &mut ChannelRng::seed_from_u64(10));
            let p = bundle.predict(&h, &sys).unwrap();
            assert!((p.q.iter().sum::<f64>() - sys.power_budget).abs() < 1e-9);
            let s = crate::system::compute_sinr(&h, &p.beamformers, &sys.noise_power).unwrap();
            let direct = match problem {
                Problem::SinrBalancing => crate::system::linear_to_db(s.min()),
                Problem::SumRate => s.sum_rate(),
            };
            assert_eq!(p.metric, direct);
        }
    }

    #[test]
    fn nonadaptive_equals_identity_svr_prediction_path() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 7);
        let h = rayleigh_channel(4, 4, &mut ChannelRng::seed_from_u64(11));
        let a = baseline_nonadaptive(&theta, &h, Problem::SumRate, &sys).unwrap();
        let b = baseline_nonadaptive(&theta, &h, Problem::SumRate, &sys).unwrap();
        assert_eq!(a.metric, b.metric);
        let q = theta.predict(&NetInput::from_channel(&h).unwrap()).unwrap();
        let direct = predict_from_q(Problem::SumRate, &h, q, &sys).unwrap();
        assert!((a.metric - direct.metric).abs() < 1e-12);
    }

    #[test]
    fn transfer_updates_only_the_last_layer() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 8);
        let data = samples(20, 12, Problem::SinrBalancing, &sys);
        let zero = TrainConfig {
            epochs: 0,
            ..default_transfer_config(20, 0)
        };
        assert_eq!(baseline_transfer(&theta, &data, &zero).unwrap().params, theta);
        let out = baseline_transfer(&theta, &data, &default_transfer_config(20, 0)).unwrap();
        let fc = theta.fc_range();
        assert_eq!(out.params.theta[..fc.start], theta.theta[..fc.start]);
        assert_eq!((out.params.bn1.clone(), out.params.bn2.clone()), (theta.bn1.clone(), theta.bn2.clone()));
        assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
        assert_eq!(out.passes, 100);
    }

    #[test]
    fn maml_adaptation_reduces_adaptation_loss() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 9);
        let data = samples(20, 13, Problem::SinrBalancing, &sys);
        let refs: Vec<&TrainSample> = data.iter().collect();
        let cfg = MamlConfig {
            inner_steps: 0,
            ..MamlConfig::default()
        };
        assert_eq!(maml_adapt_net(&theta, &data, &cfg).unwrap(), theta);
        let cfg = MamlConfig {
            inner_lr: 0.01,
            inner_steps: 10,
            ..MamlConfig::default()
        };
        let (_, losses) = maml_adapt(&theta, &refs, &cfg).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{losses:?}");
    }

    #[test]
    fn cost_counts() {
        let arch = Arch::new(4, 4);
        let pc = ParamCount::analytic(arch);
        let passes = PassCounter { pretrain: 7, adapt: 3 };
        assert_eq!(count_cost(Method::Fast, 4, pc, passes).adapted_params, 20);
        assert_eq!(count_cost(Method::Transfer, 4, pc, passes).adapted_params, pc.fc);
        assert_eq!(count_cost(Method::Maml, 4, pc, passes).adapted_params, pc.total);
        assert_eq!(count_cost(Method::Fast, 4, pc, passes).pretrain_passes, 7);
    }

    #[test]
    fn pass_counter_matches_loop_totals() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 10);
        let data = samples(25, 14, Problem::SinrBalancing, &sys);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            early_stop: None,
            ..TrainConfig::default()
        };
        let out = train(&theta, &data, Objective::SupervisedMse, &[], &cfg).unwrap();
        // ceil(25 / 10) = 3 batches per epoch.
        assert_eq!(out.passes, 9);
        assert_eq!(out.loss_trace.len(), 9);
    }

    #[test]
    fn bundle_round_trip() {
        let sys = sys44();
        let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 11);
        let data = samples(10, 15, Problem::SumRate, &sys);
        let bundle = adapt_fast(&theta, &data, Problem::SumRate, &SvrConfig::default(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        assert_eq!(AdaptBundle::load(dir.path()).unwrap(), bundle);
    }

    #[test]
    fn empty_adaptation_set_is_rejected() {
        let theta = EmbeddingParams::init(Arch::new(2, 2), 1.0, 0);
        assert!(adapt_fast(&theta, &[], Problem::SumRate, &SvrConfig::default(), 0).is_err());
    }
}
