//! Run configuration: one TOML document covering every stage of an
//! experiment. Power levels are written with units (`"25 dBm"`, `"0.3 W"`)
//! and converted to watts when the configuration is used.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use beamadapt::adaptation::{default_transfer_config, Method};
use beamadapt::channel::{FadingSpec, LargeScaleSpec, ScenarioSchedule, SLOTS_PER_SEGMENT};
use beamadapt::maml::MamlConfig;
use beamadapt::net::{AdamConfig, EarlyStop, TrainConfig};
use beamadapt::online::FtmlConfig;
use beamadapt::svr::SvrConfig;
use beamadapt::system::{dbm_to_watts, noise_power_watts, BANDWIDTH_HZ, THERMAL_NOISE_DBM_HZ};
use beamadapt::{Problem, SystemConfig};
use serde::{Deserialize, Serialize};

/// Parses a power level with its unit: `dBm`, `dBW`, `W` or `mW`.
pub fn parse_power(text: &str) -> Result<f64> {
    let t = text.trim();
    let split = t
        .find(|c: char| c.is_ascii_alphabetic())
        .with_context(|| format!("power {text:?} has no unit (use dBm, dBW, W or mW)"))?;
    let (num, unit) = t.split_at(split);
    let v: f64 = num.trim().parse().with_context(|| format!("bad number in power {text:?}"))?;
    let watts = match unit.trim() {
        "dBm" => dbm_to_watts(v),
        "dBW" => dbm_to_watts(v + 30.0),
        "W" => v,
        "mW" => v * 1e-3,
        u => bail!("unknown power unit {u:?} in {text:?}"),
    };
    ensure!(watts > 0.0 && watts.is_finite(), "power {text:?} must be positive");
    Ok(watts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub nt: usize,
    pub k: usize,
    /// Total transmit power, with unit.
    pub power: String,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_hz: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            nt: 4,
            k: 4,
            power: "25 dBm".into(),
            noise_psd_dbm_hz: THERMAL_NOISE_DBM_HZ,
            bandwidth_hz: BANDWIDTH_HZ,
        }
    }
}

impl SystemSection {
    pub fn build(&self) -> Result<SystemConfig> {
        let noise = noise_power_watts(self.noise_psd_dbm_hz, self.bandwidth_hz);
        Ok(SystemConfig::new(self.nt, self.k, parse_power(&self.power)?, noise)?)
    }
}

/// Pretraining data: `n_per_family` channels from each fading family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_per_family: usize,
    pub families: Vec<FadingSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_per_family: 500,
            families: FadingSpec::pretraining_mixture(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early-stopping patience in epochs; omit to train every epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    pub val_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let es = EarlyStop::default();
        Self {
            epochs: 100,
            batch_size: 100,
            lr: AdamConfig::default().lr,
            patience: Some(es.patience),
            val_fraction: es.val_fraction,
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.lr),
            early_stop: self.patience.map(|patience| EarlyStop {
                patience,
                val_fraction: self.val_fraction,
            }),
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    /// Labelled samples in one adaptation set.
    pub n_adapt: usize,
    /// Adaptation sets averaged for the transfer and MAML baselines.
    pub repetitions: usize,
    pub svr: SvrConfig,
    pub transfer_epochs: usize,
    pub transfer_lr: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let ft = default_transfer_config(20, 0);
        Self {
            n_adapt: 20,
            repetitions: 15,
            svr: SvrConfig::default(),
            transfer_epochs: ft.epochs,
            transfer_lr: ft.adam.lr,
        }
    }
}

impl AdaptSection {
    pub fn transfer_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.transfer_epochs,
            adam: AdamConfig::with_lr(self.transfer_lr),
            ..default_transfer_config(self.n_adapt, seed)
        }
    }
}

/// Channel distribution of the test environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub fading: FadingSpec,
    pub large: LargeScaleSpec,
}

impl Default for Scenario {
    /// Users uniformly placed in a 500 m cell with path loss and shadowing.
    fn default() -> Self {
        Self {
            fading: FadingSpec::rayleigh(),
            large: LargeScaleSpec::cell(500.0, 50.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub scenario: Scenario,
    pub n_test: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub n_datasets: usize,
    /// Test channels per dataset evaluation.
    pub n_test: usize,
    pub methods: Vec<Method>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self {
            n_datasets: 100,
            n_test: 200,
            methods: vec![Method::Fast, Method::Transfer],
        }
    }
}

/// Methods of the online simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineMethod {
    Reference,
    FastCurrent,
    FastCumulative,
    Ftml,
    NonAdaptive,
    OfflineFast,
}

impl OnlineMethod {
    pub const ALL: [OnlineMethod; 6] = [
        Self::Reference,
        Self::FastCurrent,
        Self::FastCumulative,
        Self::Ftml,
        Self::NonAdaptive,
        Self::OfflineFast,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub slots_per_segment: usize,
    /// Adaptation pairs per slot, `N`.
    pub n_adapt: usize,
    /// Test channels per slot, `U`.
    pub u_test: usize,
    /// Cumulative buffer capacity; omit for unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    pub ftml: FtmlConfig,
    /// Labelled pairs per segment for the offline SVR bound.
    pub n_offline: usize,
    pub methods: Vec<OnlineMethod>,
    /// Fill the timing columns of the trace. Off by default because
    /// wall-clock times differ between runs.
    pub record_timing: bool,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            slots_per_segment: SLOTS_PER_SEGMENT,
            n_adapt: 5,
            u_test: 10,
            capacity: None,
            ftml: FtmlConfig::default(),
            n_offline: 100,
            methods: OnlineMethod::ALL.to_vec(),
            record_timing: false,
        }
    }
}

impl OnlineSection {
    pub fn schedule(&self) -> ScenarioSchedule {
        ScenarioSchedule::mobility_proxy(self.slots_per_segment)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Transmit powers of the power sweep, with units.
    pub power_grid: Vec<String>,
    /// User counts of the user sweep.
    pub users_grid: Vec<usize>,
    /// Antennas used in the user sweep.
    pub users_grid_nt: usize,
    /// Test channels per grid point.
    pub grid_n_test: usize,
    /// Meta-iteration cap of the pass-count comparison.
    pub pass_study_max_iters: usize,
    /// Write wall-clock timing tables. Off by default because they differ
    /// between runs.
    pub record_timing: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            power_grid: ["15 dBm", "20 dBm", "25 dBm", "30 dBm"].map(String::from).to_vec(),
            users_grid: vec![2, 4, 6, 8],
            users_grid_nt: 8,
            grid_n_test: 100,
            pass_study_max_iters: 2000,
            record_timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    pub system: SystemSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
    pub maml: MamlConfig,
    pub eval: EvalSection,
    pub sensitivity: SensitivitySection,
    pub online: OnlineSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: Problem::SinrBalancing,
            seed: 1,
            methods: Method::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
            system: SystemSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptSection::default(),
            maml: MamlConfig::default(),
            eval: EvalSection::default(),
            sensitivity: SensitivitySection::default(),
            online: OnlineSection::default(),
            report: ReportSection::default(),
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the configuration into `dir` as `config.toml`.
    pub fn save_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.to_toml()?)?;
        Ok(())
    }

    pub fn system_config(&self) -> Result<SystemConfig> {
        self.system.build()
    }

    /// The dataset sizes and dimensions of the published experiments:
    /// 8 antennas and 8 users, 5,000 (SINR) or 10,000 (sum rate) channels
    /// per family.
    pub fn apply_paper_scale(&mut self) {
        self.system.nt = 8;
        self.system.k = 8;
        self.data.n_per_family = match self.problem {
            Problem::SinrBalancing => 5000,
            Problem::SumRate => 10000,
        };
        self.sensitivity.n_datasets = 100;
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.methods.is_empty(), "method list is empty");
        self.system_config()?;
        for p in &self.report.power_grid {
            parse_power(p)?;
        }
        ensure!(self.data.n_per_family > 0, "data.n_per_family must be positive");
        ensure!(!self.data.families.is_empty(), "data.families is empty");
        for f in &self.data.families {
            f.validate()?;
        }
        self.eval.scenario.fading.validate()?;
        self.eval.scenario.large.validate()?;
        ensure!(self.eval.n_test > 0, "eval.n_test must be positive");
        ensure!(self.adapt.n_adapt >= 2, "adapt.n_adapt must be at least 2");
        ensure!(self.adapt.repetitions > 0, "adapt.repetitions must be positive");
        self.adapt.svr.validate()?;
        self.maml.validate()?;
        ensure!(self.pretrain.epochs > 0 && self.pretrain.batch_size > 0, "pretrain epochs and batch size must be positive");
        ensure!(self.sensitivity.n_datasets > 0, "sensitivity.n_datasets must be positive");
        ensure!(!self.online.methods.is_empty(), "online method list is empty");
        ensure!(self.online.u_test > 0 && self.online.slots_per_segment > 0, "online slot sizes must be positive");
        ensure!(self.online.ftml.n_task > 0, "online.ftml.n_task must be positive");
        Ok(())
    }

    pub fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_units() {
        assert!((parse_power("30 dBm").unwrap() - 1.0).abs() < 1e-12);
        assert!((parse_power("0dBW").unwrap() - 1.0).abs() < 1e-12);
        assert!((parse_power("250 mW").unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(parse_power(" 2 W ").unwrap(), 2.0);
        assert!(parse_power("25").is_err());
        assert!(parse_power("25 dBx").is_err());
        assert!(parse_power("0 W").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            problem: Problem::SumRate,
            ..RunConfig::default()
        };
        cfg.online.capacity = Some(40);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[system]\npower = \"20 dBm\"\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.system.nt, 4);
        assert!((cfg.system_config().unwrap().power_budget - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_method_list_rejected() {
        assert!(RunConfig::from_toml("methods = []\n").is_err());
        assert!(RunConfig::from_toml("[online]\nmethods = []\n").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 1\n").is_err());
    }

    #[test]
    fn paper_scale_sizes() {
        let mut cfg = RunConfig::default();
        cfg.apply_paper_scale();
        assert_eq!((cfg.system.nt, cfg.system.k, cfg.data.n_per_family), (8, 8, 5000));
        cfg.problem = Problem::SumRate;
        cfg.apply_paper_scale();
        assert_eq!(cfg.data.n_per_family, 10000);
    }
}
