// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-difference steering vectors and steered autoregressive generation.
//!
//! The steering direction at a residual-stream hook is the neutral class
//! mean minus the biased class mean of pooled activations. During
//! generation, `alpha · vector` is added to that hook at every step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::{HookKind, HookPoint, InterventionHook, InterventionPositions, Model};
use crate::numerics::{mean_rows, Tensor};
use crate::probes::{statement_ids, PooledFeatures};
use crate::tokenizer::{BpeVocab, END_OF_TEXT};

pub const STEERING_FORMAT_VERSION: u32 = 1;

/// The three biased prompts used for the steering comparison demo.
pub fn demo_prompts() -> Vec<String> {
    include_str!("../data/steer_prompts.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub hook: HookPoint,
    pub mean_neutral: Tensor,
    pub mean_biased: Tensor,
    /// `mean_neutral − mean_biased`.
    pub vector: Tensor,
    pub source_dataset_id: String,
}

fn class_rows(features: &PooledFeatures, label: Label) -> Result<Tensor> {
    let rows: Vec<&[f32]> = features
        .x
        .rows()
        .zip(&features.y)
        .filter(|(_, &l)| l == label)
        .map(|(r, _)| r)
        .collect();
    if rows.is_empty() {
        return Err(Error::SingleClass(format!(
            "no {label} (label {}) examples at {}",
            label.as_u8(),
            features.hook
        )));
    }
    Tensor::from_rows(&rows)
}

fn difference(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
    )
}

/// Builds the steering vector from pooled features at a residual hook.
pub fn compute_steering_vector(
    features: &PooledFeatures,
    source_dataset_id: &str,
) -> Result<SteeringVector> {
    if features.hook.kind != HookKind::ResidPost {
        return Err(Error::Domain(format!(
            "steering vectors live on the residual stream, got `{}`",
            features.hook
        )));
    }
    let mean_neutral = mean_rows(&class_rows(features, Label::Neutral)?)?;
    let mean_biased = mean_rows(&class_rows(features, Label::Biased)?)?;
    let vector = difference(&mean_neutral, &mean_biased);
    vector.ensure_finite("steering vector")?;
    Ok(SteeringVector {
        hook: features.hook,
        mean_neutral,
        mean_biased,
        vector,
        source_dataset_id: source_dataset_id.to_owned(),
    })
}

#[derive(Serialize, Deserialize)]
struct SteeringFile {
    format_version: u32,
    hook: HookPoint,
    source_dataset_id: String,
    vector: Vec<f32>,
    mean_neutral: Vec<f32>,
    mean_biased: Vec<f32>,
}

impl SteeringVector {
    pub fn to_json(&self) -> String {
        let file = SteeringFile {
            format_version: STEERING_FORMAT_VERSION,
            hook: self.hook,
            source_dataset_id: self.source_dataset_id.clone(),
            vector: self.vector.data().to_vec(),
            mean_neutral: self.mean_neutral.data().to_vec(),
            mean_biased: self.mean_biased.data().to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("steering vectors always serialize") + "\n"
    }

    /// Parses a steering file and re-checks `vector == mean_neutral − mean_biased`.
    pub fn from_json(text: &str) -> Result<SteeringVector> {
        let file: SteeringFile = serde_json::from_str(text)
            .map_err(|e| Error::Invalid(format!("steering vector JSON: {e}")))?;
        if file.format_version != STEERING_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported steering format version {}",
                file.format_version
            )));
        }
        if file.hook.kind != HookKind::ResidPost {
            return Err(Error::Invalid(format!(
                "steering hook must be resid_post, got `{}`",
                file.hook
            )));
        }
        let d = file.vector.len();
        if file.mean_neutral.len() != d || file.mean_biased.len() != d {
            return Err(Error::Invalid(format!(
                "steering vector length {d} disagrees with class means ({}, {})",
                file.mean_neutral.len(),
                file.mean_biased.len()
            )));
        }
        let sv = SteeringVector {
            hook: file.hook,
            mean_neutral: Tensor::vector(file.mean_neutral)?,
            mean_biased: Tensor::vector(file.mean_biased)?,
            vector: Tensor::vector(file.vector)?,
            source_dataset_id: file.source_dataset_id,
        };
        let expected = difference(&sv.mean_neutral, &sv.mean_biased);
        if let Some(i) = (0..d).find(|&i| expected.data()[i] != sv.vector.data()[i]) {
            return Err(Error::Invalid(format!(
                "vector[{i}] = {} but mean_neutral − mean_biased = {}",
                sv.vector.data()[i],
                expected.data()[i]
            )));
        }
        Ok(sv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SteeringVector> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.tagged(path.display().to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    /// The last prompt position (whose output predicts the first new
    /// token) and every generated position.
    GeneratedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub alpha: f32,
    pub positions: Positions,
    /// Feed `<|endoftext|>` before the prompt.
    pub prepend_bos: bool,
    /// Stop as soon as `<|endoftext|>` is produced.
    pub stop_at_eos: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 20,
            strategy: Strategy::TopK,
            k: 40,
            temperature: 0.7,
            seed: 0,
            alpha: 4.0,
            positions: Positions::All,
            prepend_bos: true,
            stop_at_eos: true,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationConfig {
            max_new_tokens,
            strategy: Strategy::Greedy,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Domain("max_new_tokens must be at least 1".into()));
        }
        if self.strategy == Strategy::TopK {
            if self.k == 0 {
                return Err(Error::Domain("top-k sampling needs k >= 1".into()));
            }
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return Err(Error::Domain(format!(
                    "temperature must be positive, got {}",
                    self.temperature
                )));
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Samples from the `k` highest logits at `temperature` given a uniform draw `u ∈ [0, 1)`.
pub fn sample_top_k(logits: &[f32], k: usize, temperature: f64, u: f64) -> u32 {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    let k = k.min(idx.len()).max(1);
    let by_logit = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_logit);
        idx.truncate(k);
    }
    idx.sort_by(by_logit);
    let top = f64::from(logits[idx[0]]);
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((f64::from(logits[i]) - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (&i, w) in idx.iter().zip(&weights) {
        acc += w;
        if target < acc {
            return i as u32;
        }
    }
    *idx.last().expect("k >= 1") as u32
}

/// Residual-stream injection applied at every generation step.
#[derive(Debug, Clone, Copy)]
pub struct Steering<'a> {
    pub hook: HookPoint,
    pub vector: &'a Tensor,
}

/// Generates up to `max_new_tokens` ids after `prompt_ids`.
pub fn generate_ids(
    model: &Model,
    prompt_ids: &[u32],
    cfg: &GenerationConfig,
    steering: Option<Steering<'_>>,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    if prompt_ids.is_empty() {
        return Err(Error::EmptyInput("generation needs a non-empty prompt".into()));
    }
    let n_ctx = model.config().n_ctx;
    if prompt_ids.len() + cfg.max_new_tokens > n_ctx {
        return Err(Error::ContextOverflow {
            len: prompt_ids.len() + cfg.max_new_tokens,
            max: n_ctx,
        });
    }
    let intervention = steering
        .map(|s| -> Result<InterventionHook> {
            if s.hook.layer >= model.config().n_layers {
                return Err(Error::HookOutOfRange {
                    name: s.hook.to_string(),
                    n_layers: model.config().n_layers,
                });
            }
            Ok(InterventionHook {
                target: s.hook,
                delta: s.vector.clone(),
                scale: cfg.alpha,
                positions: match cfg.positions {
                    Positions::All => InterventionPositions::All,
                    Positions::GeneratedOnly => {
                        InterventionPositions::StartingAt(prompt_ids.len() - 1)
                    }
                },
            })
        })
        .transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::with_capacity(cfg.max_new_tokens);
    for _ in 0..cfg.max_new_tokens {
        let logits = model.next_token_logits(&ids, intervention.as_ref())?;
        let next = match cfg.strategy {
            Strategy::Greedy => argmax(&logits),
            Strategy::TopK => {
                let u: f64 = rng.random();
                sample_top_k(&logits, cfg.k, cfg.temperature, u)
            }
        };
        if cfg.stop_at_eos && next == END_OF_TEXT {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}

/// A decoded continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub ids: Vec<u32>,
}

fn complete(
    model: &Model,
    vocab: &BpeVocab,
    prompt: &str,
    cfg: &GenerationConfig,
    steering: Option<Steering<'_>>,
) -> Result<Completion> {
    let prompt_ids = statement_ids(vocab, prompt, cfg.prepend_bos);
    let ids = generate_ids(model, &prompt_ids, cfg, steering)?;
    Ok(Completion {
        text: vocab.decode(&ids)?,
        ids,
    })
}

/// Unsteered generation.
pub fn generate(
    model: &Model,
    vocab: &BpeVocab,
    prompt: &str,
    cfg: &GenerationConfig,
) -> Result<Completion> {
    complete(model, vocab, prompt, cfg, None)
}

/// Generation with `cfg.alpha · sv.vector` injected at `sv.hook`. Returns the
/// completion only, without the prompt.
pub fn steered_generate(
    model: &Model,
    vocab: &BpeVocab,
    prompt: &str,
    sv: &SteeringVector,
    cfg: &GenerationConfig,
) -> Result<Completion> {
    if sv.vector.len() != model.config().d_model {
        return Err(Error::Shape(format!(
            "steering vector has {} dims, model d_model is {}",
            sv.vector.len(),
            model.config().d_model
        )));
    }
    let steering = Steering {
        hook: sv.hook,
        vector: &sv.vector,
    };
    complete(model, vocab, prompt, cfg, Some(steering))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub prompt: String,
    pub baseline: Option<String>,
    pub steered: Option<String>,
    pub error: Option<String>,
}

/// Baseline (α forced to 0, same seed and strategy) versus steered
/// completions for each prompt, in input order.
pub fn compare(
    model: &Model,
    vocab: &BpeVocab,
    prompts: &[String],
    sv: &SteeringVector,
    cfg: &GenerationConfig,
) -> Vec<ComparisonRow> {
    let baseline_cfg = GenerationConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    prompts
        .par_iter()
        .map(|prompt| {
            let run = || -> Result<(String, String)> {
                let base = steered_generate(model, vocab, prompt, sv, &baseline_cfg)?;
                let steered = steered_generate(model, vocab, prompt, sv, cfg)?;
                Ok((base.text, steered.text))
            };
            match run() {
                Ok((b, s)) => ComparisonRow {
                    prompt: prompt.clone(),
                    baseline: Some(b),
                    steered: Some(s),
                    error: None,
                },
                Err(e) => ComparisonRow {
                    prompt: prompt.clone(),
                    baseline: None,
                    steered: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
