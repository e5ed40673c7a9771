//! Environment dispatch: one dataset type and one environment handle that
//! cover ShopSim, GridHouse and the toy tree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::store::read_instructions;
use crate::env::{EnvId, Instruction, Trajectory};
use crate::error::{Error, Result};
use crate::gridhouse::{self, GridHouse, HouseDataConfig, HouseDataset};
use crate::shopsim::{self, ShopDataConfig, ShopDataset, ShopSim};
use crate::toy::{self, ToyDataset, ToyEnv};

/// Generation sizes for every environment; only the chosen one is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub shop: ShopDataConfig,
    pub house: HouseDataConfig,
    pub toy_train: usize,
    pub toy_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shop: ShopDataConfig::default(),
            house: HouseDataConfig::default(),
            toy_train: 200,
            toy_test: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Shop(ShopDataset),
    House(HouseDataset),
    Toy(ToyDataset),
}

/// A concrete environment ready for rollouts.
#[derive(Debug, Clone)]
pub enum EnvHandle {
    Shop(ShopSim),
    House(GridHouse),
    Toy(ToyEnv),
}

/// Evaluates `$body` with `$env` bound to the concrete environment.
#[macro_export]
macro_rules! with_env {
    ($handle:expr, $env:ident => $body:expr) => {
        match $handle {
            $crate::dataset::EnvHandle::Shop($env) => $body,
            $crate::dataset::EnvHandle::House($env) => $body,
            $crate::dataset::EnvHandle::Toy($env) => $body,
        }
    };
}

impl EnvHandle {
    pub fn id(&self) -> EnvId {
        match self {
            EnvHandle::Shop(_) => EnvId::ShopSim,
            EnvHandle::House(_) => EnvId::GridHouse,
            EnvHandle::Toy(_) => EnvId::Toy,
        }
    }

    pub fn num_slots(&self) -> usize {
        match self {
            EnvHandle::Shop(_) => shopsim::NUM_SLOTS,
            EnvHandle::House(_) => gridhouse::NUM_SLOTS,
            EnvHandle::Toy(_) => toy::BRANCHING,
        }
    }

    /// The oracle planner's trajectory for one task.
    pub fn expert(&self, instruction: &Instruction) -> Result<Trajectory> {
        match self {
            EnvHandle::Shop(env) => shopsim::shop_expert(env, instruction),
            EnvHandle::House(env) => gridhouse::house_expert(env, instruction),
            EnvHandle::Toy(_) => toy::toy_expert(instruction),
        }
    }
}

impl Dataset {
    pub fn generate(env: EnvId, config: &DataConfig, seed: u64) -> Result<Self> {
        Ok(match env {
            EnvId::ShopSim => Dataset::Shop(shopsim::generate_shop_dataset(&config.shop, seed)?),
            EnvId::GridHouse => Dataset::House(gridhouse::generate_house_dataset(&config.house, seed)?),
            EnvId::Toy => Dataset::Toy(ToyDataset::generate(config.toy_train, config.toy_test, seed)),
        })
    }

    /// Loads a dataset directory, reading the environment from its tasks.
    pub fn load(dir: &Path) -> Result<Self> {
        let train = read_instructions(&dir.join("train.jsonl"))?;
        let env = train
            .first()
            .map(|i| i.env_id)
            .ok_or_else(|| Error::format(dir.join("train.jsonl").display().to_string(), "no tasks"))?;
        Self::load_as(env, dir)
    }

    pub fn load_as(env: EnvId, dir: &Path) -> Result<Self> {
        let ds = match env {
            EnvId::ShopSim => Dataset::Shop(ShopDataset::load(dir)?),
            EnvId::GridHouse => Dataset::House(HouseDataset::load(dir)?),
            EnvId::Toy => Dataset::Toy(ToyDataset::load(dir)?),
        };
        if let Some(bad) = ds.all_tasks().find(|i| i.env_id != env) {
            return Err(Error::format(
                dir.display().to_string(),
                format!("task {} belongs to {}, not {env}", bad.task_id, bad.env_id),
            ));
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Dataset::Shop(d) => d.save(dir),
            Dataset::House(d) => d.save(dir),
            Dataset::Toy(d) => d.save(dir),
        }
    }

    /// Files written by [`Dataset::save`], relative to the directory.
    pub fn files(&self) -> &'static [&'static str] {
        match self {
            Dataset::Shop(_) => &["catalog.jsonl", "train.jsonl", "test.jsonl"],
            Dataset::House(_) => &["train.jsonl", "test_seen.jsonl", "test_unseen.jsonl"],
            Dataset::Toy(_) => &["train.jsonl", "test.jsonl"],
        }
    }

    pub fn env_id(&self) -> EnvId {
        match self {
            Dataset::Shop(_) => EnvId::ShopSim,
            Dataset::House(_) => EnvId::GridHouse,
            Dataset::Toy(_) => EnvId::Toy,
        }
    }

    pub fn handle(&self) -> EnvHandle {
        match self {
            Dataset::Shop(d) => EnvHandle::Shop(d.env()),
            Dataset::House(_) => EnvHandle::House(GridHouse),
            Dataset::Toy(_) => EnvHandle::Toy(ToyEnv),
        }
    }

    pub fn train(&self) -> &[Instruction] {
        match self {
            Dataset::Shop(d) => &d.train,
            Dataset::House(d) => &d.train,
            Dataset::Toy(d) => &d.train,
        }
    }

    /// The main test split; GridHouse's seen split.
    pub fn test(&self) -> &[Instruction] {
        match self {
            Dataset::Shop(d) => &d.test,
            Dataset::House(d) => &d.test_seen,
            Dataset::Toy(d) => &d.test,
        }
    }

    pub fn test_unseen(&self) -> Option<&[Instruction]> {
        match self {
            Dataset::House(d) => Some(&d.test_unseen),
            _ => None,
        }
    }

    /// Split by name: `train`, `test`, `seen` or `unseen`.
    pub fn split(&self, name: &str) -> Result<&[Instruction]> {
        match name {
            "train" => Ok(self.train()),
            "test" | "seen" => Ok(self.test()),
            "unseen" => self
                .test_unseen()
                .ok_or_else(|| Error::config("split", format!("{} has no unseen split", self.env_id()))),
            other => Err(Error::config(
                "split",
                format!("unknown split `{other}` (expected train, test, seen or unseen)"),
            )),
        }
    }

    fn all_tasks(&self) -> impl Iterator<Item = &Instruction> {
        self.train()
            .iter()
            .chain(self.test())
            .chain(self.test_unseen().unwrap_or(&[]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;

    #[test]
    fn toy_round_trip_detects_environment() {
        let cfg = DataConfig {
            toy_train: 5,
            toy_test: 2,
            ..DataConfig::default()
        };
        let ds = Dataset::generate(EnvId::Toy, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.env_id(), EnvId::Toy);
        assert_eq!(back.train(), ds.train());
        for f in ds.files() {
            assert!(dir.path().join(f).exists());
        }
        let h = back.handle();
        assert_eq!(with_env!(&h, e => e.num_slots()), h.num_slots());
        assert_eq!(h.expert(&back.train()[0]).unwrap().len(), toy::DEPTH);
    }

    #[test]
    fn unknown_split_is_a_config_error() {
        let ds = Dataset::generate(EnvId::Toy, &DataConfig::default(), 1).unwrap();
        assert!(matches!(ds.split("unseen"), Err(Error::Config { .. })));
        assert!(matches!(ds.split("bogus"), Err(Error::Config { .. })));
        assert_eq!(ds.split("train").unwrap().len(), 200);
    }
}
