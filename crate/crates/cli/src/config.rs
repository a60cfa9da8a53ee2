use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stepq::cost::{Budget, CostModel};
use stepq::diffusion::{GaussianMixture, NoiseSchedule, ScheduleConfig, TrainConfig};
use stepq::grouping::{GroupingKind, GroupingScheme};
use stepq::metrics::DEFAULT_FITNESS_SAMPLES;
use stepq::nn::{DenoiserNet, NetConfig};
use stepq::numerics::{derive_seed, Rng};
use stepq::search::{Constraint, SearchConfig, SearchSpace};

use crate::error::{bad_input, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mixture: GaussianMixture,
    pub samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { mixture: GaussianMixture::default(), samples: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub samples: usize,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { samples: 256, iterations: 512, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantBits {
    pub weight_bits: Vec<u8>,
    pub act_bits: Vec<u8>,
}

impl Default for QuantBits {
    fn default() -> Self {
        Self { weight_bits: vec![5, 6, 7, 8], act_bits: vec![5, 6, 7, 8] }
    }
}

impl QuantBits {
    /// Bit-widths the bank must hold: the union of both candidate sets.
    pub fn bank_bits(&self) -> Vec<u8> {
        let mut b: Vec<u8> = self.weight_bits.iter().chain(&self.act_bits).copied().collect();
        b.sort_unstable();
        b.dedup();
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub groups: usize,
    pub kind: GroupingKind,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self { groups: 5, kind: GroupingKind::NonUniform }
    }
}

/// Budget as "uniform `W_b A_b` at `steps` steps"; `steps` defaults to the
/// group count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub bits: u8,
    pub steps: Option<usize>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { bits: 6, steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresampleConfig {
    pub count: usize,
    pub seeds: Vec<u64>,
    /// Draw fresh random candidates from the pool during search.
    pub use_pool: bool,
}

impl Default for PresampleConfig {
    fn default() -> Self {
        Self { count: 2000, seeds: (0..8).collect(), use_pool: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training data CSV, relative to the config file.
    pub dataset: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub quant: QuantBits,
    pub grouping: GroupingConfig,
    pub budget: BudgetConfig,
    pub search: SearchConfig,
    pub presample: PresampleConfig,
    pub fitness_samples: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.csv"),
            data: DataConfig::default(),
            net: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig { steps: 12000, ..TrainConfig::default() },
            calibration: CalibrationConfig::default(),
            quant: QuantBits::default(),
            grouping: GroupingConfig::default(),
            budget: BudgetConfig::default(),
            search: SearchConfig::default(),
            presample: PresampleConfig::default(),
            fitness_samples: DEFAULT_FITNESS_SAMPLES,
            seed: 0,
        }
    }
}

/// Independent seeds of the pipeline stages, derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Data = 1,
    Init = 2,
    Train = 3,
    Calibration = 4,
    Search = 5,
    Sample = 6,
}

impl RunConfig {
    /// Loads a config; a relative dataset path is resolved against the
    /// config's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
        if config.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset = dir.join(&config.dataset);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.quant.weight_bits.is_empty() || self.quant.act_bits.is_empty() {
            return Err(bad_input("bit-width candidate sets must be non-empty"));
        }
        if self.quant.bank_bits().iter().any(|&b| !(2..=16).contains(&b)) {
            return Err(bad_input("bit-widths must lie in [2, 16]"));
        }
        if self.grouping.groups < 2 {
            return Err(bad_input(format!("need at least 2 groups, got {}", self.grouping.groups)));
        }
        if self.fitness_samples < 2 {
            return Err(bad_input("fitness needs at least 2 samples"));
        }
        if self.calibration.samples == 0 {
            return Err(bad_input("calibration set must be non-empty"));
        }
        self.search.validate().map_err(|e| bad_input(e.to_string()))?;
        Ok(())
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[stage as u64])
    }

    pub fn rng_for(&self, stage: Stage) -> Rng {
        Rng::new(self.seed_for(stage))
    }

    /// SHA-256 over the canonical JSON of the effective config, leaving out
    /// where the dataset file lives.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("dataset");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        self.schedule.build().map_err(|e| bad_input(e.to_string()))
    }

    pub fn grouping(&self) -> CliResult<GroupingScheme> {
        GroupingScheme::build(self.schedule.timesteps, self.grouping.groups, self.grouping.kind)
            .map_err(|e| bad_input(e.to_string()))
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { seed: self.seed_for(Stage::Search), ..self.search.clone() }
    }

    pub fn space(&self, net: &DenoiserNet) -> CliResult<SearchSpace> {
        let kinds = net.slots().iter().map(|s| s.kind).collect();
        SearchSpace::new(self.grouping()?, kinds, &self.quant.weight_bits, &self.quant.act_bits)
            .map_err(|e| bad_input(e.to_string()))
    }

    pub fn budget(&self, cost: &CostModel) -> CliResult<Budget> {
        let steps = self.budget.steps.unwrap_or(self.grouping.groups);
        cost.uniform_budget(self.budget.bits, steps).map_err(|e| bad_input(e.to_string()))
    }

    pub fn constraint(&self, net: &DenoiserNet) -> CliResult<Constraint> {
        let cost = CostModel::from_net(net);
        let budget = self.budget(&cost)?;
        Ok(Constraint { cost, budget })
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }
}
