use std::path::Path;

use dstc_core::{DstcConfig, GradcheckOptions, OptimizerConfig, ToyTask, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

fn default_steps() -> usize {
    500
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "one")]
    pub log_every: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        TrainBlock {
            steps: default_steps(),
            init_seed: 0,
            log_every: 1,
        }
    }
}

/// A run configuration: the layer fields at top level plus optional
/// `task`, `optimizer`, `train` and `gradcheck` blocks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub layer: DstcConfig,
    pub task: Option<ToyTask>,
    pub optimizer: OptimizerConfig,
    pub train: TrainBlock,
    pub gradcheck: GradcheckOptions,
}

fn block<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| CliError::new(format!("bad `{key}` block: {e}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::new(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::new(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::new(format!("invalid JSON: {e}")))?;
        let Value::Object(mut obj) = value else {
            return Err(CliError::new("config must be a JSON object"));
        };
        let task: Option<ToyTask> = block(&mut obj, "task")?;
        let optimizer = block(&mut obj, "optimizer")?.unwrap_or_else(|| OptimizerConfig::adam(1e-2));
        let train = block(&mut obj, "train")?.unwrap_or_default();
        let gradcheck = block(&mut obj, "gradcheck")?.unwrap_or_default();

        let variant: Variant = match obj.get("variant") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::new(format!("bad variant: {e}")))?,
            None => return Err(CliError::new("missing field `variant`")),
        };
        let (offset_mode, score_mode) = variant.default_modes();
        obj.entry("offset_mode").or_insert(serde_json::to_value(offset_mode)?);
        obj.entry("score_mode").or_insert(serde_json::to_value(score_mode)?);
        let keys: Vec<String> = obj.keys().cloned().collect();
        let layer: DstcConfig = serde_json::from_value(Value::Object(obj))?;
        let known = serde_json::to_value(&layer)?;
        if let Some(k) = keys.iter().find(|k| known.get(k.as_str()).is_none()) {
            return Err(CliError::new(format!("unknown config field `{k}`")));
        }
        let rc = RunConfig {
            layer,
            task,
            optimizer,
            train,
            gradcheck,
        };
        rc.validate()?;
        Ok(rc)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.layer.validate()?;
        if let Some(t) = &self.task {
            t.validate()?;
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(CliError::new("optimizer.lr must be positive"));
        }
        if self.train.log_every == 0 {
            return Err(CliError::new("train.log_every must be at least 1"));
        }
        Ok(())
    }

    /// Reads a task file, falling back to the config's `task` block.
    pub fn resolve_task(&mut self, task_file: Option<&Path>) -> Result<ToyTask, CliError> {
        if let Some(p) = task_file {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::new(format!("cannot read {}: {e}", p.display())))?;
            let t: ToyTask = serde_json::from_str(&text).map_err(|e| CliError::new(format!("{}: {e}", p.display())))?;
            self.task = Some(t);
        }
        let t = self
            .task
            .clone()
            .ok_or_else(|| CliError::new("no task given: pass --task or add a `task` block"))?;
        t.validate()?;
        Ok(t)
    }
}
