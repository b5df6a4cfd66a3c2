// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 decoder forward pass with capture and intervention hook points.
//!
//! The block structure is the standard pre-layernorm GPT-2 one:
//!
//! ```text
//! x = wte[ids] + wpe[0..n]
//! for each block:
//!     z     = causal_attention(ln_1(x))         <- blocks.L.attn.hook_z
//!     x     = x + c_proj(z)
//!     x     = x + mlp(ln_2(x))                  <- blocks.L.hook_resid_post
//! logits = ln_f(x) · wteᵀ
//! ```
//!
//! A loaded [`Model`] is immutable; every pass owns its own scratch, so a
//! model can be shared across threads freely.

mod config;
mod hooks;
mod weights;

pub use config::{ModelConfig, PRESET_NAMES};
pub use weights::{locate_weights, WEIGHTS_DIR_ENV, WEIGHTS_FILE};
pub use hooks::{
    ActivationCache, HookKind, HookPoint, InterventionHook, InterventionPositions,
};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, layer_norm, matmul_transposed, softmax_slice, Tensor};

struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    /// `[3·d_model, d_model]`, rows ordered q, k, v.
    qkv_w: Tensor,
    qkv_b: Vec<f32>,
    out_w: Tensor,
    out_b: Vec<f32>,
    ln2_g: Tensor,
    ln2_b: Tensor,
    fc_w: Tensor,
    fc_b: Vec<f32>,
    proj_w: Tensor,
    proj_b: Vec<f32>,
}

pub struct Model {
    config: ModelConfig,
    /// `[vocab, d_model]`; doubles as the tied unembedding.
    wte: Tensor,
    wpe: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Per-block side outputs requested by the caller.
#[derive(Default)]
struct BlockTaps {
    z: Option<Tensor>,
    patterns: Option<Vec<Tensor>>,
}

#[derive(Clone, Copy)]
enum Unembed {
    All,
    Last,
}

/// Everything a single pass needs to know beyond the token ids.
struct Pass<'a> {
    capture: BTreeSet<HookPoint>,
    intervention: Option<&'a InterventionHook>,
    unembed: Unembed,
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += *b;
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("forward pass needs at least one token".into()));
        }
        if ids.len() > self.config.n_ctx {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                max: self.config.n_ctx,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} is outside the vocabulary [0, {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_hook(&self, hook: &HookPoint) -> Result<()> {
        if hook.layer >= self.config.n_layers {
            return Err(Error::HookOutOfRange {
                name: hook.to_string(),
                n_layers: self.config.n_layers,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Tensor {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let tok = self.wte.row(id as usize);
            let p = self.wpe.row(pos);
            x.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        Tensor::from_raw(vec![ids.len(), d], x)
    }

    /// Causal multi-head attention over a fused `[n, 3·d_model]` qkv matrix.
    /// Returns per-head outputs concatenated along columns, `[n, d_model]`.
    fn attention(&self, qkv: &Tensor, patterns: Option<&mut Vec<Tensor>>) -> Tensor {
        let n = qkv.shape()[0];
        let d = self.config.d_model;
        let dh = self.config.d_head;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut z = vec![0.0f32; n * d];
        let mut pats = patterns.map(|p| {
            p.clear();
            p
        });
        let mut scores = vec![0.0f32; n];
        let mut probs = vec![0.0f32; n];
        let mut acc = vec![0.0f64; dh];
        for h in 0..self.config.n_heads {
            let mut pattern = pats.as_ref().map(|_| vec![0.0f32; n * n]);
            for i in 0..n {
                let q = &qkv.row(i)[h * dh..(h + 1) * dh];
                for j in 0..=i {
                    let k = &qkv.row(j)[d + h * dh..d + (h + 1) * dh];
                    scores[j] = (dot(q, k) * scale) as f32;
                }
                softmax_slice(&scores[..=i], &mut probs[..=i]);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for j in 0..=i {
                    let v = &qkv.row(j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                    let p = f64::from(probs[j]);
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p * f64::from(vv);
                    }
                }
                for (t, a) in acc.iter().enumerate() {
                    z[i * d + h * dh + t] = *a as f32;
                }
                if let Some(pat) = pattern.as_mut() {
                    pat[i * n..i * n + i + 1].copy_from_slice(&probs[..=i]);
                }
            }
            if let (Some(p), Some(pat)) = (pats.as_mut(), pattern) {
                p.push(Tensor::from_raw(vec![n, n], pat));
            }
        }
        Tensor::from_raw(vec![n, d], z)
    }

    fn block_forward(&self, b: &Block, x: &Tensor, taps: &mut BlockTaps) -> Result<Tensor> {
        let eps = self.config.layer_norm_eps;
        let h = layer_norm(x, &b.ln1_g, &b.ln1_b, eps)?;
        let qkv = matmul_transposed(&h, &b.qkv_w, Some(&b.qkv_b))?;
        let z = self.attention(&qkv, taps.patterns.as_mut());
        let attn_out = matmul_transposed(&z, &b.out_w, Some(&b.out_b))?;
        if taps.z.is_some() {
            taps.z = Some(z);
        }
        let mut x1 = x.clone();
        add_in_place(&mut x1, &attn_out);
        let h2 = layer_norm(&x1, &b.ln2_g, &b.ln2_b, eps)?;
        let f = gelu(&matmul_transposed(&h2, &b.fc_w, Some(&b.fc_b))?)?;
        let m = matmul_transposed(&f, &b.proj_w, Some(&b.proj_b))?;
        add_in_place(&mut x1, &m);
        x1.ensure_finite("residual stream")?;
        Ok(x1)
    }

    fn unembed(&self, x: &Tensor, which: Unembed) -> Result<Tensor> {
        let x = match which {
            Unembed::All => x.clone(),
            Unembed::Last => {
                let (n, d) = x.dims2()?;
                Tensor::from_raw(vec![1, d], x.row(n - 1).to_vec())
            }
        };
        let h = layer_norm(&x, &self.lnf_g, &self.lnf_b, self.config.layer_norm_eps)?;
        matmul_transposed(&h, &self.wte, None)
    }

    fn check_intervention(&self, hook: &InterventionHook) -> Result<()> {
        self.check_hook(&hook.target)?;
        if hook.target.kind != HookKind::ResidPost {
            return Err(Error::Domain(format!(
                "interventions act on the residual stream only, got `{}`",
                hook.target
            )));
        }
        if hook.delta.len() != self.config.d_model || hook.delta.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "intervention delta has shape {:?}, expected [{}]",
                hook.delta.shape(),
                self.config.d_model
            )));
        }
        if !hook.scale.is_finite() {
            return Err(Error::NonFinite(format!("intervention scale {}", hook.scale)));
        }
        Ok(())
    }

    fn apply_intervention(hook: &InterventionHook, x: &mut Tensor) -> Result<()> {
        let d = hook.delta.len();
        for (pos, row) in x.data_mut().chunks_exact_mut(d).enumerate() {
            if !hook.positions.contains(pos) {
                continue;
            }
            for (v, &dv) in row.iter_mut().zip(hook.delta.data()) {
                let add = hook.scale * dv;
                // Skipping exact zeros keeps α = 0 and zero deltas bit-identical
                // to the plain pass (x + 0.0 would flip -0.0).
                if add != 0.0 {
                    *v += add;
                }
            }
        }
        x.ensure_finite("intervened residual stream")
    }

    fn run(&self, ids: &[u32], pass: &Pass<'_>) -> Result<(Tensor, ActivationCache)> {
        self.check_ids(ids)?;
        for hook in &pass.capture {
            self.check_hook(hook)?;
        }
        if let Some(iv) = pass.intervention {
            self.check_intervention(iv)?;
        }
        let mut cache = ActivationCache::default();
        let mut x = self.embed(ids);
        for (layer, block) in self.blocks.iter().enumerate() {
            let z_hook = HookPoint::attn_z(layer);
            let mut taps = BlockTaps::default();
            if pass.capture.contains(&z_hook) {
                taps.z = Some(Tensor::zeros(vec![0]));
            }
            x = self.block_forward(block, &x, &mut taps)?;
            if let Some(z) = taps.z {
                cache.insert(z_hook, z);
            }
            let resid_hook = HookPoint::resid_post(layer);
            if let Some(iv) = pass.intervention.filter(|iv| iv.target == resid_hook) {
                Self::apply_intervention(iv, &mut x)?;
            }
            if pass.capture.contains(&resid_hook) {
                cache.insert(resid_hook, x.clone());
            }
        }
        let logits = self.unembed(&x, pass.unembed)?;
        Ok((logits, cache))
    }

    /// Logits for every position, `[n_tokens, vocab_size]`.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let pass = Pass {
            capture: BTreeSet::new(),
            intervention: None,
            unembed: Unembed::All,
        };
        Ok(self.run(ids, &pass)?.0)
    }

    /// Forward pass that also captures the requested hook points.
    pub fn run_with_cache(
        &self,
        ids: &[u32],
        hooks: &[HookPoint],
    ) -> Result<(Tensor, ActivationCache)> {
        let pass = Pass {
            capture: hooks.iter().copied().collect(),
            intervention: None,
            unembed: Unembed::All,
        };
        self.run(ids, &pass)
    }

    /// Like [`Model::run_with_cache`], with hooks given by name.
    pub fn run_with_cache_named(
        &self,
        ids: &[u32],
        names: &[&str],
    ) -> Result<(Tensor, ActivationCache)> {
        let hooks = names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<HookPoint>>>()?;
        self.run_with_cache(ids, &hooks)
    }

    /// Forward pass with `scale · delta` added to the residual stream at the hook.
    pub fn forward_with_intervention(&self, ids: &[u32], hook: &InterventionHook) -> Result<Tensor> {
        let pass = Pass {
            capture: BTreeSet::new(),
            intervention: Some(hook),
            unembed: Unembed::All,
        };
        Ok(self.run(ids, &pass)?.0)
    }

    /// Intervention and capture in the same pass; captures at the intervened
    /// hook observe the modified activation.
    pub fn run_with_intervention_and_cache(
        &self,
        ids: &[u32],
        hooks: &[HookPoint],
        intervention: Option<&InterventionHook>,
    ) -> Result<(Tensor, ActivationCache)> {
        let pass = Pass {
            capture: hooks.iter().copied().collect(),
            intervention,
            unembed: Unembed::All,
        };
        self.run(ids, &pass)
    }

    /// Logits of the final position only. Bit-identical to the last row of
    /// the corresponding full pass.
    pub fn next_token_logits(
        &self,
        ids: &[u32],
        intervention: Option<&InterventionHook>,
    ) -> Result<Vec<f32>> {
        let pass = Pass {
            capture: BTreeSet::new(),
            intervention,
            unembed: Unembed::Last,
        };
        Ok(self.run(ids, &pass)?.0.into_data())
    }

    /// The residual stream after block `layer`, computed by running only
    /// blocks `0..=layer` with no hook machinery involved.
    pub fn residual_prefix(&self, ids: &[u32], layer: usize) -> Result<Tensor> {
        self.check_ids(ids)?;
        self.check_hook(&HookPoint::resid_post(layer))?;
        let mut x = self.embed(ids);
        for block in &self.blocks[..=layer] {
            x = self.block_forward(block, &x, &mut BlockTaps::default())?;
        }
        Ok(x)
    }

    /// Per-head attention probabilities `[n, n]` at `layer`.
    pub fn attention_patterns(&self, ids: &[u32], layer: usize) -> Result<Vec<Tensor>> {
        self.check_ids(ids)?;
        self.check_hook(&HookPoint::attn_z(layer))?;
        let mut x = self.embed(ids);
        for (l, block) in self.blocks[..=layer].iter().enumerate() {
            let mut taps = BlockTaps::default();
            if l == layer {
                taps.patterns = Some(Vec::new());
            }
            x = self.block_forward(block, &x, &mut taps)?;
            if let Some(p) = taps.patterns {
                return Ok(p);
            }
        }
        unreachable!("layer {layer} was checked against n_layers")
    }
}
