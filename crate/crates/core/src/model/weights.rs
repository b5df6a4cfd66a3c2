// SPDX-License-Identifier: MIT OR Apache-2.0

//! Safetensors checkpoint I/O in the published GPT-2 tensor layout.
//!
//! Names follow the Hugging Face `GPT2Model` state dict (`wte.weight`,
//! `h.<i>.attn.c_attn.weight`, ...), optionally prefixed with `transformer.`.
//! Linear weights are stored `[in, out]`; they are transposed once on load.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Block, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One expected tensor: archive name and shape in checkpoint layout.
struct Spec {
    name: String,
    shape: Vec<usize>,
}

fn expected_tensors(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push(Spec { name, shape });
    // Blocks first, so a preset mismatch reports layer 0.
    for i in 0..cfg.n_layers {
        push(format!("h.{i}.ln_1.weight"), vec![d]);
        push(format!("h.{i}.ln_1.bias"), vec![d]);
        push(format!("h.{i}.attn.c_attn.weight"), vec![d, 3 * d]);
        push(format!("h.{i}.attn.c_attn.bias"), vec![3 * d]);
        push(format!("h.{i}.attn.c_proj.weight"), vec![d, d]);
        push(format!("h.{i}.attn.c_proj.bias"), vec![d]);
        push(format!("h.{i}.ln_2.weight"), vec![d]);
        push(format!("h.{i}.ln_2.bias"), vec![d]);
        push(format!("h.{i}.mlp.c_fc.weight"), vec![d, m]);
        push(format!("h.{i}.mlp.c_fc.bias"), vec![m]);
        push(format!("h.{i}.mlp.c_proj.weight"), vec![m, d]);
        push(format!("h.{i}.mlp.c_proj.bias"), vec![d]);
    }
    push("wte.weight".into(), vec![cfg.vocab_size, d]);
    push("wpe.weight".into(), vec![cfg.n_ctx, d]);
    push("ln_f.weight".into(), vec![d]);
    push("ln_f.bias".into(), vec![d]);
    specs
}

fn to_f32(view: &TensorView<'_>, name: &str) -> Result<Vec<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Load(format!(
            "tensor `{name}` has dtype {:?}; only F32 archives are supported",
            view.dtype()
        )));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Environment variable holding the default checkpoint directory.
pub const WEIGHTS_DIR_ENV: &str = "PROBESTEER_WEIGHTS_DIR";

/// File name of a checkpoint inside a weights directory.
pub const WEIGHTS_FILE: &str = "model.safetensors";

/// Resolves a checkpoint for `preset` from a file or directory path.
///
/// A directory is searched for `<preset>/model.safetensors`, then
/// `model.safetensors`. The error lists every path tried.
pub fn locate_weights(path: &Path, preset: &str) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let candidates = [path.join(preset).join(WEIGHTS_FILE), path.join(WEIGHTS_FILE)];
    if let Some(found) = candidates.iter().find(|c| c.is_file()) {
        return Ok(found.clone());
    }
    let tried: Vec<String> = std::iter::once(path.display().to_string())
        .chain(candidates.iter().map(|c| c.display().to_string()))
        .collect();
    Err(Error::Load(format!(
        "no {preset} weights found; tried {}",
        tried.join(", ")
    )))
}

impl Model {
    /// Loads and validates a safetensors checkpoint against `config`.
    ///
    /// Every required tensor is checked for presence, dtype and shape before
    /// any of them is converted, so a bad file never yields a partial model.
    pub fn load(weights_path: &Path, config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let bytes = std::fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
        Self::from_safetensors_bytes(&bytes, config)
            .map_err(|e| e.tagged(weights_path.display().to_string()))
    }

    pub fn from_safetensors_bytes(bytes: &[u8], config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let archive = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Load(format!("not a valid safetensors archive: {e}")))?;
        let prefix = if archive.tensor("wte.weight").is_err()
            && archive.tensor("transformer.wte.weight").is_ok()
        {
            "transformer."
        } else {
            ""
        };

        let specs = expected_tensors(&config);
        let mut views = HashMap::with_capacity(specs.len());
        for spec in &specs {
            let full = format!("{prefix}{}", spec.name);
            let view = archive
                .tensor(&full)
                .map_err(|_| Error::Load(format!("missing tensor `{full}`")))?;
            if view.shape() != spec.shape.as_slice() {
                return Err(Error::Load(format!(
                    "tensor `{full}` has shape {:?}, expected {:?}",
                    view.shape(),
                    spec.shape
                )));
            }
            if view.dtype() != Dtype::F32 {
                return Err(Error::Load(format!(
                    "tensor `{full}` has dtype {:?}; only F32 archives are supported",
                    view.dtype()
                )));
            }
            views.insert(spec.name.as_str(), (view, spec.shape.clone()));
        }

        let take = |name: &str| -> Result<Tensor> {
            let (view, shape) = &views[name];
            Tensor::new(shape.clone(), to_f32(view, name)?).map_err(|e| e.tagged(name))
        };
        // Checkpoint linear weights are [in, out]; kernels want [out, in].
        let take_t = |name: &str| -> Result<Tensor> { take(name)?.transpose() };
        let take_v = |name: &str| -> Result<Vec<f32>> { Ok(take(name)?.into_data()) };

        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block {
                ln1_g: take(&format!("h.{i}.ln_1.weight"))?,
                ln1_b: take(&format!("h.{i}.ln_1.bias"))?,
                qkv_w: take_t(&format!("h.{i}.attn.c_attn.weight"))?,
                qkv_b: take_v(&format!("h.{i}.attn.c_attn.bias"))?,
                out_w: take_t(&format!("h.{i}.attn.c_proj.weight"))?,
                out_b: take_v(&format!("h.{i}.attn.c_proj.bias"))?,
                ln2_g: take(&format!("h.{i}.ln_2.weight"))?,
                ln2_b: take(&format!("h.{i}.ln_2.bias"))?,
                fc_w: take_t(&format!("h.{i}.mlp.c_fc.weight"))?,
                fc_b: take_v(&format!("h.{i}.mlp.c_fc.bias"))?,
                proj_w: take_t(&format!("h.{i}.mlp.c_proj.weight"))?,
                proj_b: take_v(&format!("h.{i}.mlp.c_proj.bias"))?,
            });
        }
        Ok(Model {
            wte: take("wte.weight")?,
            wpe: take("wpe.weight")?,
            blocks,
            lnf_g: take("ln_f.weight")?,
            lnf_b: take("ln_f.bias")?,
            config,
        })
    }

    /// Serializes the model in checkpoint layout.
    pub fn to_safetensors_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut add = |name: String, t: &Tensor| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            named.push((name, t.shape().to_vec(), bytes));
        };
        let vec_t = |v: &[f32]| Tensor::from_raw(vec![v.len()], v.to_vec());
        for (i, b) in self.blocks.iter().enumerate() {
            add(format!("h.{i}.ln_1.weight"), &b.ln1_g);
            add(format!("h.{i}.ln_1.bias"), &b.ln1_b);
            add(format!("h.{i}.attn.c_attn.weight"), &b.qkv_w.transpose()?);
            add(format!("h.{i}.attn.c_attn.bias"), &vec_t(&b.qkv_b));
            add(format!("h.{i}.attn.c_proj.weight"), &b.out_w.transpose()?);
            add(format!("h.{i}.attn.c_proj.bias"), &vec_t(&b.out_b));
            add(format!("h.{i}.ln_2.weight"), &b.ln2_g);
            add(format!("h.{i}.ln_2.bias"), &b.ln2_b);
            add(format!("h.{i}.mlp.c_fc.weight"), &b.fc_w.transpose()?);
            add(format!("h.{i}.mlp.c_fc.bias"), &vec_t(&b.fc_b));
            add(format!("h.{i}.mlp.c_proj.weight"), &b.proj_w.transpose()?);
            add(format!("h.{i}.mlp.c_proj.bias"), &vec_t(&b.proj_b));
        }
        add("wte.weight".into(), &self.wte);
        add("wpe.weight".into(), &self.wpe);
        add("ln_f.weight".into(), &self.lnf_g);
        add("ln_f.bias".into(), &self.lnf_b);

        let views: Vec<(String, TensorView<'_>)> = named
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Invalid(format!("{name}: {e}")))
            })
            .collect::<Result<_>>()?;
        safetensors::serialize(views, &None).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_safetensors_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// A randomly initialised model, deterministic in `seed`.
    ///
    /// Weights are N(0, 0.02²) and projections into the residual stream are
    /// scaled down by `sqrt(2 · n_layers)`, as in GPT-2's initialisation;
    /// layer-norm gains and all biases get small perturbations so no
    /// parameter is degenerate.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let m = config.d_mlp;
        let resid_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let mut normal = |shape: Vec<usize>, mean: f32, std: f32| -> Tensor {
            let dist = Normal::new(mean, std).expect("finite std");
            let n = shape.iter().product();
            Tensor::from_raw(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1_g: normal(vec![d], 1.0, 0.05),
                ln1_b: normal(vec![d], 0.0, 0.02),
                qkv_w: normal(vec![3 * d, d], 0.0, 0.02),
                qkv_b: normal(vec![3 * d], 0.0, 0.02).into_data(),
                out_w: normal(vec![d, d], 0.0, resid_std),
                out_b: normal(vec![d], 0.0, 0.02).into_data(),
                ln2_g: normal(vec![d], 1.0, 0.05),
                ln2_b: normal(vec![d], 0.0, 0.02),
                fc_w: normal(vec![m, d], 0.0, 0.02),
                fc_b: normal(vec![m], 0.0, 0.02).into_data(),
                proj_w: normal(vec![d, m], 0.0, resid_std),
                proj_b: normal(vec![d], 0.0, 0.02).into_data(),
            });
        }
        Ok(Model {
            wte: normal(vec![config.vocab_size, d], 0.0, 0.02),
            wpe: normal(vec![config.n_ctx, d], 0.0, 0.01),
            blocks,
            lnf_g: normal(vec![d], 1.0, 0.05),
            lnf_b: normal(vec![d], 0.0, 0.02),
            config,
        })
    }
}
