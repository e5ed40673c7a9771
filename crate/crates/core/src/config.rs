//! Run configuration: a TOML file with nested sections, parsed strictly.
//!
//! Unknown keys are errors with a closest-match suggestion, every value is
//! range-checked, and absent keys take documented defaults. The scorer's
//! `tau` defaults per environment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DataConfig;
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::gridhouse::HouseDataConfig;
use crate::mixture::OptimizeConfig;
use crate::reward_model::RmConfig;
use crate::shopsim::ShopDataConfig;
use crate::sft::SftConfig;

/// How step rewards are obtained during pair construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    /// Monte-Carlo rollouts of the frozen SFT agent.
    Mc,
    /// Exact enumeration under the SFT agent (small environments only).
    Exact,
    /// A regressor distilled from Monte-Carlo labels.
    Rm,
    /// Seeded uniform values, a null baseline.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset directory; generated from the sizes below if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub shop: ShopDataConfig,
    pub house: HouseDataConfig,
    pub toy_train: usize,
    pub toy_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            path: None,
            shop: d.shop,
            house: d.house,
            toy_train: d.toy_train,
            toy_test: d.toy_test,
        }
    }
}

impl DataSection {
    pub fn generation(&self) -> DataConfig {
        DataConfig {
            shop: self.shop.clone(),
            house: self.house.clone(),
            toy_train: self.toy_train,
            toy_test: self.toy_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub d: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            d: crate::policy::DEFAULT_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tolerance: f64,
    /// Existing SFT checkpoint; SFT is trained in the run if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl Default for SftSection {
    fn default() -> Self {
        let s = SftConfig::default();
        SftSection {
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            batch_size: s.batch_size,
            tolerance: s.tolerance,
            checkpoint: None,
        }
    }
}

impl SftSection {
    pub fn training(&self) -> SftConfig {
        SftConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSection {
    #[serde(default = "default_mode")]
    pub mode: ScorerMode,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Step-reward margin a pair must exceed.
    pub tau: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Trained reward model for `mode = "rm"`; trained in the run if absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rm_path: Option<String>,
}

fn default_mode() -> ScorerMode {
    ScorerMode::Mc
}

fn default_n_samples() -> usize {
    5
}

fn default_temperature() -> f64 {
    1.0
}

impl ScorerSection {
    pub fn for_env(env: EnvId) -> Self {
        ScorerSection {
            mode: default_mode(),
            n_samples: default_n_samples(),
            tau: default_tau(env),
            temperature: default_temperature(),
            rm_path: None,
        }
    }
}

/// Environment-specific default pair margin.
pub fn default_tau(env: EnvId) -> f64 {
    match env {
        EnvId::ShopSim | EnvId::Toy => 0.01,
        EnvId::GridHouse => 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Whether each iteration also measures the average reward per step.
    pub step_reward: bool,
    pub step_reward_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            step_reward: true,
            step_reward_samples: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Iteration cap.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub sft: SftSection,
    pub scorer: ScorerSection,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub reward_model: RmConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> String {
    "runs/ipr".into()
}

fn default_iterations() -> usize {
    4
}

/// Keys that may appear although the default configuration omits them.
const OPTIONAL_KEYS: &[(&str, &str)] = &[("data", "path"), ("sft", "checkpoint"), ("scorer", "rm_path")];

impl RunConfig {
    /// Fully defaulted configuration.
    pub fn new(env: EnvId, seed: u64) -> Self {
        RunConfig {
            env,
            seed,
            out_dir: default_out_dir(),
            iterations: default_iterations(),
            data: DataSection::default(),
            policy: PolicySection::default(),
            sft: SftSection::default(),
            scorer: ScorerSection::for_env(env),
            optimize: OptimizeConfig::default(),
            reward_model: RmConfig::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Rendering with `out_dir = "."`, as stored inside the run directory.
    /// Runs that differ only in location share it.
    pub fn render_portable(&self) -> String {
        RunConfig {
            out_dir: ".".into(),
            ..self.clone()
        }
        .render()
    }

    /// SHA-256 of the portable rendering.
    pub fn hash(&self) -> String {
        crate::env::store::sha256_hex(self.render_portable().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 19] = [
            ("iterations", self.iterations >= 1, "must be at least 1"),
            ("policy.d", self.policy.d >= 1, "must be at least 1"),
            ("sft.learning_rate", positive(self.sft.learning_rate), "must be positive"),
            ("sft.epochs", self.sft.epochs >= 1, "must be at least 1"),
            ("sft.batch_size", self.sft.batch_size >= 1, "must be at least 1"),
            ("sft.tolerance", non_negative(self.sft.tolerance), "must be non-negative"),
            ("scorer.n_samples", self.scorer.n_samples >= 1, "must be at least 1"),
            ("scorer.tau", non_negative(self.scorer.tau), "must be non-negative"),
            ("scorer.temperature", non_negative(self.scorer.temperature), "must be non-negative"),
            ("optimize.beta", positive(self.optimize.beta), "must be positive"),
            ("optimize.learning_rate", positive(self.optimize.learning_rate), "must be positive"),
            ("optimize.epochs", self.optimize.epochs >= 1, "must be at least 1"),
            ("optimize.batch_size", self.optimize.batch_size >= 1, "must be at least 1"),
            ("reward_model.d", self.reward_model.d >= 1, "must be at least 1"),
            ("reward_model.learning_rate", positive(self.reward_model.learning_rate), "must be positive"),
            ("reward_model.batch_size", self.reward_model.batch_size >= 1, "must be at least 1"),
            (
                "reward_model.heldout_fraction",
                self.reward_model.heldout_fraction > 0.0 && self.reward_model.heldout_fraction < 1.0,
                "must lie strictly between 0 and 1",
            ),
            ("eval.step_reward_samples", self.eval.step_reward_samples >= 1, "must be at least 1"),
            ("data.house.holdout_fraction", (0.0..1.0).contains(&self.data.house.holdout_fraction), "must lie in [0, 1)"),
        ];
        for (key, ok, message) in checks {
            if !ok {
                return Err(Error::config(key, message));
            }
        }
        Ok(())
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    parse_str(&text)
}

/// Parses and validates configuration text.
pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut value: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    for key in ["env", "seed"] {
        if !value.contains_key(key) {
            return Err(Error::config(key, "missing required key"));
        }
    }
    let env: EnvId = match value.get("env") {
        Some(toml::Value::String(s)) => s.parse()?,
        _ => return Err(Error::config("env", "must be a string")),
    };
    let schema = toml::Table::try_from(RunConfig::new(env, 0)).expect("defaults serialize");
    check_keys(&value, &schema, "")?;
    let scorer = value
        .entry("scorer")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(scorer) = scorer else {
        return Err(Error::config("scorer", "must be a table"));
    };
    scorer
        .entry("tau")
        .or_insert(toml::Value::Float(default_tau(env)));
    let config: RunConfig = toml::Value::Table(value)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

fn check_keys(value: &toml::Table, schema: &toml::Table, path: &str) -> Result<()> {
    for (key, v) in value {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match schema.get(key) {
            Some(toml::Value::Table(sub)) => match v {
                toml::Value::Table(t) => check_keys(t, sub, &full)?,
                _ => return Err(Error::config(full, "must be a table")),
            },
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&(path, key.as_str())) => {}
            None => {
                let known = schema
                    .keys()
                    .map(String::as_str)
                    .chain(OPTIONAL_KEYS.iter().filter(|(p, _)| *p == path).map(|(_, k)| *k));
                let message = match suggest(key, known) {
                    Some(s) => format!("unknown key; did you mean `{s}`?"),
                    None => "unknown key".to_string(),
                };
                return Err(Error::config(full, message));
            }
        }
    }
    Ok(())
}

fn suggest<'a>(key: &str, known: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    known
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .filter(|(d, k)| *d <= 2.max(k.len() / 3))
        .min()
        .map(|(_, k)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let c = parse_str("env = \"shopsim\"\nseed = 3\n").unwrap();
        assert_eq!(c, RunConfig::new(EnvId::ShopSim, 3));
        assert_eq!(c.scorer.n_samples, 5);
        assert_eq!(c.iterations, 4);
        assert_eq!(c.optimize.beta, 0.2);
        assert_eq!(c.scorer.tau, 0.01);
        let h = parse_str("env = \"gridhouse\"\nseed = 3\n").unwrap();
        assert_eq!(h.scorer.tau, 0.5);
    }

    #[test]
    fn negative_tau_names_the_key() {
        let err = parse_str("env = \"shopsim\"\nseed = 1\n[scorer]\ntau = -0.1\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "scorer.tau"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_suggests_the_closest() {
        let err = parse_str("env = \"shopsim\"\nseed = 1\n[scorer]\ntua = 0.1\n").unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "scorer.tua");
                assert!(message.contains("`tau`"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
        let err = parse_str("env = \"toy\"\nseed = 1\nitertions = 2\n").unwrap_err();
        assert!(err.to_string().contains("`iterations`"));
    }

    #[test]
    fn missing_and_mistyped_keys_are_errors() {
        assert!(matches!(parse_str("seed = 1\n"), Err(Error::Config { key, .. }) if key == "env"));
        assert!(matches!(parse_str("env = \"toy\"\n"), Err(Error::Config { key, .. }) if key == "seed"));
        assert!(parse_str("env = \"mars\"\nseed = 1\n").is_err());
        assert!(parse_str("env = \"toy\"\nseed = 1\n[optimize]\nbeta = \"high\"\n").is_err());
    }

    #[test]
    fn optional_paths_are_accepted() {
        let c = parse_str("env = \"toy\"\nseed = 1\n[data]\npath = \"d\"\n[scorer]\nmode = \"rm\"\nrm_path = \"rm.json\"\n")
            .unwrap();
        assert_eq!(c.data.path.as_deref(), Some("d"));
        assert_eq!(c.scorer.mode, ScorerMode::Rm);
        assert_eq!(parse_str(&c.render()).unwrap(), c);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            prop::sample::select(vec![EnvId::ShopSim, EnvId::GridHouse, EnvId::Toy]),
            0u64..(i64::MAX as u64),
            1usize..10,
            1usize..50,
            0.0f64..2.0,
            0.001f64..3.0,
            any::<bool>(),
            prop::option::of("[a-z]{1,8}"),
        )
            .prop_map(|(env, seed, iters, n, tau, beta, flag, path)| {
                let mut c = RunConfig::new(env, seed);
                c.iterations = iters;
                c.scorer.n_samples = n;
                c.scorer.tau = tau;
                c.optimize.beta = beta;
                c.optimize.no_sdpo = flag;
                c.eval.step_reward = !flag;
                c.data.path = path.clone();
                c.sft.checkpoint = path;
                c
            })
    }

    proptest! {
        #[test]
        fn parse_inverts_render(c in arb_config()) {
            prop_assert_eq!(parse_str(&c.render()).unwrap(), c);
        }
    }
}
