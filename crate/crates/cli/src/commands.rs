//! The subcommands. Each reads its inputs from and writes its outputs to
//! `cfg.out_dir`, together with the exact configuration used.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use beamadapt::adaptation::{AdaptBundle, Method};
use beamadapt::dataset::Dataset;
use beamadapt::net::EmbeddingParams;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::experiment::{self, Models};
use crate::output;

pub const DATA_FILE: &str = "pretrain_data.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDING_FILE: &str = "embedding.json";
pub const MAML_FILE: &str = "maml_embedding.json";
pub const PASSES_FILE: &str = "passes.json";
pub const BUNDLE_DIR: &str = "bundle";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COSTS_FILE: &str = "costs.csv";
pub const TRACE_FILE: &str = "online_trace.csv";
pub const ONLINE_SUMMARY_FILE: &str = "online_summary.json";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    ensure!(path.exists(), "{} is missing; run `{producer}` first", path.display());
    Ok(())
}

fn start(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save_to(&cfg.out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub problem: beamadapt::Problem,
    pub families: String,
    pub n_per_family: usize,
    pub samples: usize,
    pub dropped: usize,
    pub labeled: bool,
    pub seed: u64,
}

/// Generates the pretraining mixture.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    start(cfg)?;
    let ds = experiment::pretrain_dataset(cfg, experiment::needs_labels(cfg))?;
    ds.save(&out(cfg, DATA_FILE))?;
    let manifest = Manifest {
        problem: cfg.problem,
        families: ds.family.clone(),
        n_per_family: cfg.data.n_per_family,
        samples: ds.len(),
        dropped: ds.dropped,
        labeled: ds.is_labeled(),
        seed: ds.seed,
    };
    output::write_json(&out(cfg, MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Passes {
    pub pretrain: usize,
    pub pretrain_epochs: usize,
    pub maml: usize,
}

/// Pretrains the embedding and, when requested, the MAML baseline.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Passes> {
    start(cfg)?;
    let path = out(cfg, DATA_FILE);
    require(&path, "gen-data")?;
    let ds = Dataset::load(&path)?;
    let trained = experiment::pretrain_embedding(cfg, &ds)?;
    trained.params.save(&out(cfg, EMBEDDING_FILE))?;
    let unit = output::loss_unit(experiment::pretrain_objective(cfg.problem));
    output::write_loss_trace(&out(cfg, "pretrain_trace.csv"), &trained.loss_trace, "pass", unit)?;
    output::write_loss_trace(&out(cfg, "validation_trace.csv"), &trained.val_trace, "epoch", unit)?;
    let mut passes = Passes {
        pretrain: trained.passes,
        pretrain_epochs: trained.epochs_run,
        maml: 0,
    };
    if cfg.wants(Method::Maml) {
        let meta = experiment::meta_train(cfg, &ds)?;
        meta.model.save(&out(cfg, MAML_FILE))?;
        output::write_loss_trace(&out(cfg, "maml_trace.csv"), &meta.meta_loss_trace, "iteration", "normalized")?;
        passes.maml = meta.passes;
    }
    output::write_json(&out(cfg, PASSES_FILE), &passes)?;
    Ok(passes)
}

fn load_embedding(cfg: &RunConfig) -> Result<EmbeddingParams> {
    let path = out(cfg, EMBEDDING_FILE);
    require(&path, "pretrain")?;
    let theta = EmbeddingParams::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let sys = cfg.system_config()?;
    ensure!(
        theta.arch.nt == sys.nt && theta.arch.k == sys.k_users,
        "model is for Nt = {}, K = {} but the configuration has Nt = {}, K = {}",
        theta.arch.nt,
        theta.arch.k,
        sys.nt,
        sys.k_users
    );
    Ok(theta)
}

/// Fits the SVR on adaptation set 0 and stores the bundle.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<AdaptBundle> {
    start(cfg)?;
    let theta = load_embedding(cfg)?;
    let sys = cfg.system_config()?;
    let bundle = experiment::fast_bundle(cfg, &sys, &theta, 0)?;
    bundle.save(&out(cfg, BUNDLE_DIR))?;
    Ok(bundle)
}

/// Paired evaluation of every configured method on the test scenario.
pub fn cmd_eval(cfg: &RunConfig) -> Result<experiment::Evaluation> {
    start(cfg)?;
    let embedding = load_embedding(cfg)?;
    let passes_path = out(cfg, PASSES_FILE);
    require(&passes_path, "pretrain")?;
    let passes: Passes = serde_json::from_str(&std::fs::read_to_string(&passes_path)?)?;
    let maml = if cfg.wants(Method::Maml) {
        let p = out(cfg, MAML_FILE);
        require(&p, "pretrain")?;
        Some(EmbeddingParams::load(&p)?)
    } else {
        None
    };
    let bundle = if cfg.wants(Method::Fast) {
        let p = out(cfg, BUNDLE_DIR);
        require(&p, "adapt")?;
        Some(AdaptBundle::load(&p)?)
    } else {
        None
    };
    let models = Models {
        embedding,
        pretrain_passes: passes.pretrain,
        maml,
        maml_passes: passes.maml,
        bundle,
    };
    let ev = experiment::evaluate_methods(cfg, &models, cfg.eval.n_test)?;
    output::write_metrics(&out(cfg, METRICS_FILE), &ev, cfg.seed)?;
    output::write_costs(&out(cfg, COSTS_FILE), &ev.costs)?;
    output::write_json(&out(cfg, SUMMARY_FILE), &ev.summary)?;
    Ok(ev)
}

/// Online simulation over the three-segment mobility schedule.
pub fn cmd_online(cfg: &RunConfig) -> Result<experiment::OnlineResult> {
    start(cfg)?;
    let theta = load_embedding(cfg)?;
    let result = experiment::online_experiment(cfg, &theta)?;
    output::write_trace(&out(cfg, TRACE_FILE), &result.trace, cfg.problem, cfg.online.record_timing)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        boundaries: &'a [beamadapt::online::BoundaryChange],
        segment_means: &'a [(String, usize, f64)],
    }
    output::write_json(
        &out(cfg, ONLINE_SUMMARY_FILE),
        &Summary {
            boundaries: &result.boundaries,
            segment_means: &result.segment_means,
        },
    )?;
    Ok(result)
}

/// Sweeps over transmit power and user count, the sensitivity study, the
/// pass-count comparison and (optionally) timing tables. Self-contained:
/// every point is pretrained from scratch.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    start(cfg)?;
    output::write_sweep(&out(cfg, "report_power.csv"), &experiment::power_sweep(cfg)?, cfg.problem)?;
    output::write_sweep(&out(cfg, "report_users.csv"), &experiment::users_sweep(cfg)?, cfg.problem)?;

    let models = experiment::build_models(cfg)?;
    let studies = cfg
        .sensitivity
        .methods
        .iter()
        .filter(|m| cfg.wants(**m))
        .map(|&m| experiment::sensitivity(cfg, &models, m))
        .collect::<Result<Vec<_>>>()?;
    output::write_sensitivity(&out(cfg, "sensitivity.csv"), &studies, cfg.problem)?;
    let stats: Vec<_> = studies
        .iter()
        .map(|s| serde_json::json!({"method": s.method, "mean": s.mean, "std": s.std, "median": s.median}))
        .collect();
    output::write_json(&out(cfg, "sensitivity_summary.json"), &stats)?;

    if cfg.wants(Method::Maml) {
        output::write_json(&out(cfg, "pass_study.json"), &experiment::pass_study(cfg)?)?;
    }
    output::write_costs(&out(cfg, COSTS_FILE), &experiment::cost_reports(cfg, &models))?;
    if cfg.report.record_timing {
        output::write_timing(&out(cfg, "timing.csv"), &experiment::timing(cfg, &models)?)?;
    }
    Ok(())
}
