//! The JSON experiment configuration.
//!
//! Sections: `suite`, `training`, `methods`, `supermerge`, `hierarchical`
//! and `cost`. A config file is laid over the shipped default, so it only
//! needs the fields it changes. Any field can then be overridden with a
//! dotted path, e.g. `methods.dare_drop_prob=0.5`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mergeforge_core::cost::{calibrate_flops, FlopsCoefficients, FlopsTarget};
use mergeforge_core::hierarchy::PlanNode;
use mergeforge_core::merge::{default_lambda_grid, BaselineMethod, TrimScope};
use mergeforge_core::optim::OptimizerConfig;
use mergeforge_core::train::TrainConfig;
use mergeforge_core::{Activation, FitConfig, ModelSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::suite::SuiteConfig;

/// The shipped configuration, including the calibrated FLOPs coefficients.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pretrained,
    Individual,
    Multitask,
    TaskArithmetic,
    DareTa,
    Ties,
    DareTies,
    Supermerge,
    SupermergeNoTanh,
    Hierarchical,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Pretrained,
        Method::Individual,
        Method::Multitask,
        Method::TaskArithmetic,
        Method::DareTa,
        Method::Ties,
        Method::DareTies,
        Method::Supermerge,
        Method::SupermergeNoTanh,
        Method::Hierarchical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Individual => "individual",
            Method::Multitask => "multitask",
            Method::TaskArithmetic => "task_arithmetic",
            Method::DareTa => "dare_ta",
            Method::Ties => "ties",
            Method::DareTies => "dare_ties",
            Method::Supermerge => "supermerge",
            Method::SupermergeNoTanh => "supermerge_no_tanh",
            Method::Hierarchical => "hierarchical",
        }
    }

    /// Reference rows are reported but never ranked.
    pub fn is_reference(self) -> bool {
        matches!(self, Method::Pretrained | Method::Individual | Method::Multitask)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Method::TaskArithmetic | Method::DareTa | Method::Ties | Method::DareTies)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Used for the multitask reference on the union of training sets.
    pub multitask: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let base = TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::adamw(3e-3),
        };
        TrainingConfig {
            hidden: vec![64, 64, 32],
            activation: Activation::Relu,
            pretrain: base,
            finetune: base,
            multitask: base,
        }
    }
}

impl TrainingConfig {
    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        Ok(ModelSpec::mlp(input_dim, &self.hidden, num_classes, self.activation)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsConfig {
    pub list: Vec<Method>,
    pub lambda_grid: Vec<f64>,
    pub dare_drop_prob: f64,
    pub ties_density: f64,
    pub trim_scope: TrimScope,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        MethodsConfig {
            list: Method::ALL.to_vec(),
            lambda_grid: default_lambda_grid(),
            dare_drop_prob: 0.9,
            ties_density: 0.2,
            trim_scope: TrimScope::default(),
        }
    }
}

impl MethodsConfig {
    /// The core merge for a baseline method; `seed` drives DARE's masks.
    pub fn baseline(&self, method: Method, seed: u64) -> Option<BaselineMethod> {
        let (drop_prob, density, scope) = (self.dare_drop_prob, self.ties_density, self.trim_scope);
        match method {
            Method::TaskArithmetic => Some(BaselineMethod::TaskArithmetic),
            Method::DareTa => Some(BaselineMethod::Dare { drop_prob, seed }),
            Method::Ties => Some(BaselineMethod::Ties { density, scope }),
            Method::DareTies => Some(BaselineMethod::DareTies {
                drop_prob,
                density,
                seed,
                scope,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalConfig {
    pub fan_in_limit: usize,
    /// An explicit plan over the in-domain tasks; built by similarity when
    /// absent.
    pub plan: Option<PlanNode>,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig {
            fan_in_limit: 2,
            plan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CostConfig {
    pub flops: FlopsCoefficients,
    /// Measured rows the coefficients were calibrated against.
    pub calibration_targets: Vec<FlopsTarget>,
}


impl CostConfig {
    /// Refits the coefficients to `calibration_targets`, keeping the
    /// configured forward and training coefficients.
    pub fn recalibrate(&self) -> Result<FlopsCoefficients> {
        Ok(calibrate_flops(
            self.flops.fwd_coeff,
            self.flops.train_coeff,
            &self.calibration_targets,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub methods: MethodsConfig,
    #[serde(default)]
    pub supermerge: FitConfig,
    #[serde(default)]
    pub hierarchical: HierarchicalConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_json("{}", &[]).expect("the shipped config parses")
    }
}

impl Config {
    /// Lays `text` over the shipped default, then applies `key=value`
    /// overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(DEFAULT_CONFIG).map_err(|e| Error::config(e.to_string()))?;
        let user: Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        merge_into(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the shipped default when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Config::from_json(&text, overrides)
            }
            None => Config::from_json("{}", overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        let bad = |e: mergeforge_core::Error| Error::config(e.to_string());
        self.supermerge.validate().map_err(bad)?;
        if self.methods.lambda_grid.is_empty() {
            return Err(Error::config("methods.lambda_grid is empty"));
        }
        if self.methods.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::config("methods.lambda_grid values must lie in [0, 1]"));
        }
        mergeforge_core::merge::MergeHyperParams {
            lambda: 1.0,
            drop_prob: self.methods.dare_drop_prob,
            density: self.methods.ties_density,
            seed: 0,
        }
        .validate()
        .map_err(bad)?;
        if self.hierarchical.fan_in_limit < 2 {
            return Err(Error::config("hierarchical.fan_in_limit must be at least 2"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config always serializes");
        s.push('\n');
        s
    }
}

/// Objects merge key by key; anything else replaces.
fn merge_into(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_into(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

/// Sets `a.b.c=value`; the value is parsed as JSON, falling back to a
/// string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::config(format!("override `{assignment}` has an empty key")));
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => return Err(Error::config(format!("override `{assignment}`: `{key}` is not inside an object"))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_parses() {
        let cfg = Config::default();
        assert_eq!(cfg.suite.in_domain, 6);
        assert_eq!(cfg.suite.out_of_domain, 3);
        assert_eq!(cfg.suite.validation_per_task, 32);
        assert_eq!(cfg.methods.list.len(), 10);
        assert_eq!(cfg.cost.calibration_targets.len(), 3);
    }

    #[test]
    fn recorded_calibration_is_current() {
        let cfg = Config::default();
        let fresh = cfg.cost.recalibrate().unwrap();
        assert!((fresh.scale - cfg.cost.flops.scale).abs() <= 1e-9 * fresh.scale);
        assert!((fresh.merge_backward_fraction - cfg.cost.flops.merge_backward_fraction).abs() <= 1e-9);
    }

    #[test]
    fn overrides() {
        let cfg = Config::from_json(
            "{}",
            &[
                "methods.dare_drop_prob=0.5".into(),
                "methods.list=[\"ties\",\"supermerge\"]".into(),
                "training.activation=tanh".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.methods.dare_drop_prob, 0.5);
        assert_eq!(cfg.methods.list, vec![Method::Ties, Method::Supermerge]);
        assert_eq!(cfg.training.activation, Activation::Tanh);

        assert!(Config::from_json("{}", &["methods.nope=1".into()]).is_err());
        assert!(Config::from_json("{}", &["methods.dare_drop_prob=1.0".into()]).is_err());
        assert!(Config::from_json("{}", &["noequals".into()]).is_err());
        assert!(Config::from_json("{}", &["methods.list=[\"bogus\"]".into()]).is_err());
    }

    #[test]
    fn partial_files_keep_shipped_values() {
        let cfg = Config::from_json(r#"{"suite": {"in_domain": 3}}"#, &[]).unwrap();
        assert_eq!(cfg.suite.in_domain, 3);
        assert_eq!(cfg.suite.out_of_domain, 3);
        assert_eq!(cfg.cost, Config::default().cost);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), Value::String(m.name().into()));
        }
        assert!(matches!("x".parse::<Method>(), Err(Error::UnknownMethod(_))));
    }
}
