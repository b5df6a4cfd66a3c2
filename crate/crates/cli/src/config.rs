// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a JSON file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use probesteer::dataset::SplitSpec;
use probesteer::model::HookKind;
use probesteer::probes::{Pooling, ProbeConfig};
use probesteer::steering::GenerationConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum HookSelection {
    ResidPost,
    AttnZ,
    Both,
}

impl HookSelection {
    pub fn kinds(self) -> &'static [HookKind] {
        match self {
            HookSelection::ResidPost => &[HookKind::ResidPost],
            HookSelection::AttnZ => &[HookKind::AttnZ],
            HookSelection::Both => &[HookKind::AttnZ, HookKind::ResidPost],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_preset: String,
    /// Checkpoint file or weights directory. Falls back to `$PROBESTEER_WEIGHTS_DIR`.
    pub weights_path: Option<PathBuf>,
    /// JSONL corpus; the builtin corpus when absent.
    pub dataset_path: Option<PathBuf>,
    pub hooks: HookSelection,
    pub pooling: Pooling,
    pub split: SplitSpec,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Steering strength; copied into `generation.alpha`.
    pub alpha: f32,
    /// Residual layer to steer at; the best resid_post probe when absent.
    pub steer_layer: Option<usize>,
    pub generation: GenerationConfig,
    pub prompts: Vec<String>,
    pub output_dir: PathBuf,
    /// Root seed. The split and sampler seeds are derived from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        RunConfig {
            model_preset: "gpt2-small".into(),
            weights_path: None,
            dataset_path: None,
            hooks: HookSelection::Both,
            pooling: Pooling::Mean,
            split: SplitSpec::default(),
            l2: probe.l2,
            max_iter: probe.max_iter,
            tol: probe.tol,
            alpha: 4.0,
            steer_layer: None,
            generation: GenerationConfig::default(),
            prompts: probesteer::steering::demo_prompts(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Propagates the root seed and alpha into the subsystem settings.
    pub fn resolved(mut self) -> RunConfig {
        self.split.seed = self.seed;
        self.generation.seed = self.seed.wrapping_add(1);
        self.generation.alpha = self.alpha;
        self
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            l2: self.l2,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"model_preset": "tiny-test", "l2": 2.0}"#).unwrap();
        assert_eq!(cfg.model_preset, "tiny-test");
        assert_eq!(cfg.l2, 2.0);
        assert_eq!(cfg.prompts.len(), 3);
        assert_eq!(cfg.hooks, HookSelection::Both);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": "x"}"#).is_err());
    }

    #[test]
    fn seed_flows_into_subsystems() {
        let cfg = RunConfig {
            seed: 9,
            alpha: 2.5,
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!(cfg.split.seed, 9);
        assert_eq!(cfg.generation.seed, 10);
        assert_eq!(cfg.generation.alpha, 2.5);
        let again: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(again.resolved(), cfg);
    }
}
