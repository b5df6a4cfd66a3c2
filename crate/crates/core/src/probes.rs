// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes on pooled activations.
//!
//! Features are z-scored with statistics from the training rows only, then
//! an L2-regularised logistic regression is fitted by full-batch gradient
//! descent with Armijo backtracking. The objective is
//!
//! ```text
//! f(w, b) = (1/n) Σ [softplus(zᵢ) − yᵢ zᵢ] + (λ / 2n) ‖w‖²,   zᵢ = w·xᵢ + b
//! ```
//!
//! which is the scikit-learn form `C = 1/λ` divided through by `n`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Label, LabeledStatement, SplitSpec, MAX_STATEMENT_TOKENS};
use crate::error::{Error, Result};
use crate::model::{HookPoint, Model};
use crate::numerics::Tensor;
use crate::tokenizer::{BpeVocab, END_OF_TEXT};

pub const PROBE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    LastToken,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last_token" | "last" => Ok(Pooling::LastToken),
            other => Err(Error::Domain(format!(
                "unknown pooling `{other}` (expected mean or last_token)"
            ))),
        }
    }
}

/// One feature row per statement at a single hook point.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub hook: HookPoint,
    pub x: Tensor,
    pub y: Vec<Label>,
    pub pooling: Pooling,
}

/// Reduces each statement's `[n_tokens, width]` activations to one row.
pub fn pool(
    hook: HookPoint,
    activations: &[Tensor],
    labels: &[Label],
    pooling: Pooling,
) -> Result<PooledFeatures> {
    if activations.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} activation sequences but {} labels",
            activations.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::with_capacity(activations.len());
    for (i, act) in activations.iter().enumerate() {
        let (n, _) = act.dims2()?;
        if n == 0 {
            return Err(Error::EmptyInput(format!(
                "statement {i} has no token activations at {hook}"
            )));
        }
        let row = match pooling {
            Pooling::Mean => crate::numerics::mean_rows(act)?.into_data(),
            Pooling::LastToken => act.row(n - 1).to_vec(),
        };
        rows.push(row);
    }
    Ok(PooledFeatures {
        hook,
        x: Tensor::from_rows(&rows)?,
        y: labels.to_vec(),
        pooling,
    })
}

/// Token ids fed to the model for a statement: `<|endoftext|>` then the text.
pub fn statement_ids(vocab: &BpeVocab, text: &str, prepend_bos: bool) -> Vec<u32> {
    let mut ids = Vec::new();
    if prepend_bos {
        ids.push(END_OF_TEXT);
    }
    ids.extend(vocab.encode(text));
    ids
}

/// Runs every statement through the model and pools the requested hooks.
///
/// With `prepend_bos` the leading `<|endoftext|>` position is fed to the
/// model but excluded from pooling. Output follows the order of `hooks`.
pub fn collect_features(
    model: &Model,
    vocab: &BpeVocab,
    data: &[LabeledStatement],
    hooks: &[HookPoint],
    pooling: Pooling,
    prepend_bos: bool,
) -> Result<Vec<PooledFeatures>> {
    let mut per_hook: Vec<Vec<Tensor>> = vec![Vec::with_capacity(data.len()); hooks.len()];
    for (i, s) in data.iter().enumerate() {
        let n_text = vocab.encode(&s.text).len();
        if n_text == 0 || n_text > MAX_STATEMENT_TOKENS {
            return Err(Error::Invalid(format!(
                "statement {i} tokenizes to {n_text} tokens (allowed 1..={MAX_STATEMENT_TOKENS})"
            )));
        }
        let ids = statement_ids(vocab, &s.text, prepend_bos);
        let (_, cache) = model
            .run_with_cache(&ids, hooks)
            .map_err(|e| e.tagged(format!("statement {i}")))?;
        let skip = usize::from(prepend_bos);
        for (slot, hook) in per_hook.iter_mut().zip(hooks) {
            let act = cache.get(hook).expect("every requested hook is captured");
            let (n, w) = act.dims2()?;
            let kept: Vec<f32> = act.data()[skip * w..].to_vec();
            slot.push(Tensor::from_raw(vec![n - skip, w], kept));
        }
    }
    let labels: Vec<Label> = data.iter().map(|s| s.label).collect();
    hooks
        .iter()
        .zip(per_hook)
        .map(|(&hook, acts)| pool(hook, &acts, &labels, pooling))
        .collect()
}

/// Writes pooled features as a safetensors archive, one tensor per hook,
/// with labels, pooling and dataset id in the header metadata.
pub fn save_features(features: &[PooledFeatures], dataset_id: &str, path: &Path) -> Result<()> {
    let first = features
        .first()
        .ok_or_else(|| Error::EmptyInput("no feature sets to save".into()))?;
    if features.iter().any(|f| f.y != first.y || f.pooling != first.pooling) {
        return Err(Error::Invalid("feature sets disagree on labels or pooling".into()));
    }
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = features
        .iter()
        .map(|f| {
            let raw = f.x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (f.hook.to_string(), raw, f.x.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Invalid(format!("feature tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: String = first.y.iter().map(|l| char::from(b'0' + l.as_u8())).collect();
    let pooling = serde_json::to_value(first.pooling).expect("pooling serializes");
    let metadata = HashMap::from([
        ("labels".to_owned(), labels),
        ("pooling".to_owned(), pooling.as_str().unwrap_or_default().to_owned()),
        ("dataset_id".to_owned(), dataset_id.to_owned()),
    ]);
    let out = safetensors::serialize(views, &Some(metadata))
        .map_err(|e| Error::Invalid(format!("serializing features: {e}")))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`save_features`]. Returns the feature sets
/// ordered by hook, and the dataset id.
pub fn load_features(path: &Path) -> Result<(Vec<PooledFeatures>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Load(format!("{}: {msg}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}` metadata")));
    let y = field("labels")?
        .chars()
        .map(|c| match c {
            '0' => Ok(Label::Neutral),
            '1' => Ok(Label::Biased),
            other => Err(bad(format!("bad label `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let pooling: Pooling = field("pooling")?.parse()?;
    let dataset_id = field("dataset_id")?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let hook: HookPoint = name.parse()?;
        if view.dtype() != safetensors::Dtype::F32 || view.shape().len() != 2 {
            return Err(bad(format!("{name} must be a 2-D F32 tensor")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let x = Tensor::new(view.shape().to_vec(), data)?;
        if x.shape()[0] != y.len() {
            return Err(bad(format!("{name} has {} rows for {} labels", x.shape()[0], y.len())));
        }
        out.push(PooledFeatures {
            hook,
            x,
            y: y.clone(),
            pooling,
        });
    }
    out.sort_by_key(|f| (f.hook.layer, f.hook.kind));
    Ok((out, dataset_id))
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows; zero-variance dimensions get unit scale.
    pub fn fit(rows: &[&[f32]]) -> Standardizer {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0f64; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(*r).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (f64::from(v) - m) / s)
            .collect()
    }
}

/// Optimizer settings for [`train_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1.0,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub hook: HookPoint,
    /// Weights in standardized feature space.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Test-split AUC.
    pub auc: f64,
    pub standardizer: Standardizer,
    pub iterations: usize,
    pub converged: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeResult {
    /// Decision value `w·standardize(x) + b` for a raw feature row.
    pub fn score(&self, row: &[f32]) -> f64 {
        let z = self.standardizer.transform(row);
        z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    pub fn predict(&self, row: &[f32]) -> Label {
        if self.score(row) > 0.0 {
            Label::Biased
        } else {
            Label::Neutral
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    l2: f64,
}

impl Objective<'_> {
    fn n(&self) -> f64 {
        self.x.len() as f64
    }

    fn logits(&self, w: &[f64], b: f64) -> Vec<f64> {
        self.x
            .iter()
            .map(|r| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    fn value(&self, w: &[f64], b: f64) -> f64 {
        let data: f64 = self
            .logits(w, b)
            .iter()
            .zip(self.y)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let reg: f64 = w.iter().map(|v| v * v).sum();
        data / self.n() + 0.5 * self.l2 * reg / self.n()
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.n();
        let mut gw: Vec<f64> = w.iter().map(|v| self.l2 * v / n).collect();
        let mut gb = 0.0;
        for (row, (z, &y)) in self.x.iter().zip(self.logits(w, b).into_iter().zip(self.y)) {
            let r = (sigmoid(z) - y) / n;
            for (g, &a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
            gb += r;
        }
        (gw, gb)
    }
}

struct Fit {
    weights: Vec<f64>,
    bias: f64,
    iterations: usize,
    converged: bool,
}

fn fit_logistic(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> Fit {
    let d = x.first().map_or(0, Vec::len);
    let obj = Objective { x, y, l2: cfg.l2 };
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut f = obj.value(&w, b);
    let mut step = 1.0f64;
    for iter in 0..cfg.max_iter {
        let (gw, gb) = obj.gradient(&w, b);
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax < cfg.tol {
            return Fit {
                weights: w,
                bias: b,
                iterations: iter,
                converged: true,
            };
        }
        let gnorm2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        // Try a larger step first, then halve until the Armijo condition holds.
        step = (step * 2.0).min(1e6);
        loop {
            let wn: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let bn = b - step * gb;
            let fnew = obj.value(&wn, bn);
            if fnew <= f - 0.5 * step * gnorm2 {
                w = wn;
                b = bn;
                f = fnew;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Fit {
                    weights: w,
                    bias: b,
                    iterations: iter,
                    converged: false,
                };
            }
        }
    }
    let (gw, gb) = obj.gradient(&w, b);
    let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
    Fit {
        weights: w,
        bias: b,
        iterations: cfg.max_iter,
        converged: gmax < cfg.tol,
    }
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_biased()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(
            "AUC is undefined unless both classes are present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied groups stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k].is_biased()).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u64) as f64)
}

fn accuracy(scores: &[f64], labels: &[Label]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > 0.0) == l.is_biased())
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn lexicographic(a: &[f32], b: &[f32]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Fits a probe on `train` rows and evaluates on `test` rows of `features`.
///
/// Training rows are visited in a canonical (content-sorted) order, so the
/// result does not depend on how rows are arranged within each side.
pub fn train_probe_on_indices(
    features: &PooledFeatures,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let hook = features.hook;
    features
        .x
        .ensure_finite(&format!("features at {hook}"))
        .map_err(|e| e.tagged(hook.to_string()))?;
    let (n, _) = features.x.dims2()?;
    if features.y.len() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} labels", features.y.len())));
    }
    let has = |idx: &[usize], l: Label| idx.iter().any(|&i| features.y[i] == l);
    if !(has(train, Label::Neutral) && has(train, Label::Biased)) {
        return Err(Error::SingleClass(format!(
            "training split at {hook} contains a single class"
        )));
    }

    let mut train = train.to_vec();
    train.sort_by(|&a, &b| {
        lexicographic(features.x.row(a), features.x.row(b)).then(features.y[a].cmp(&features.y[b]))
    });
    let train_rows: Vec<&[f32]> = train.iter().map(|&i| features.x.row(i)).collect();
    let standardizer = Standardizer::fit(&train_rows);
    let xs: Vec<Vec<f64>> = train_rows.iter().map(|r| standardizer.transform(r)).collect();
    let ys: Vec<f64> = train
        .iter()
        .map(|&i| f64::from(features.y[i].as_u8()))
        .collect();
    let fit = fit_logistic(&xs, &ys, cfg);

    let mut result = ProbeResult {
        hook,
        weights: fit.weights,
        bias: fit.bias,
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        auc: 0.0,
        standardizer,
        iterations: fit.iterations,
        converged: fit.converged,
        n_train: train.len(),
        n_test: test.len(),
    };
    let train_scores: Vec<f64> = train.iter().map(|&i| result.score(features.x.row(i))).collect();
    let train_labels: Vec<Label> = train.iter().map(|&i| features.y[i]).collect();
    result.train_accuracy = accuracy(&train_scores, &train_labels);
    let test_scores: Vec<f64> = test.iter().map(|&i| result.score(features.x.row(i))).collect();
    let test_labels: Vec<Label> = test.iter().map(|&i| features.y[i]).collect();
    result.test_accuracy = accuracy(&test_scores, &test_labels);
    result.auc = auc(&test_scores, &test_labels).map_err(|e| e.tagged(hook.to_string()))?;
    Ok(result)
}

/// Splits `features` per `split` and trains a probe.
pub fn train_probe(
    features: &PooledFeatures,
    split: &SplitSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (train, test) = split_indices(&features.y, split)?;
    train_probe_on_indices(features, &train, &test, cfg)
}

/// Trains one probe per feature set on a shared split, ordered by (layer, kind).
pub fn sweep_features(
    features: &[PooledFeatures],
    split: &SplitSpec,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let (train, test) = split_indices(&first.y, split)?;
    if features.iter().any(|f| f.y != first.y) {
        return Err(Error::Invalid("feature sets disagree on labels".into()));
    }
    let mut results = features
        .par_iter()
        .map(|f| {
            train_probe_on_indices(f, &train, &test, cfg).map_err(|e| e.tagged(f.hook.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| (r.hook.layer, r.hook.kind));
    Ok(results)
}

/// Collects activations for every hook and trains a probe on each.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    model: &Model,
    vocab: &BpeVocab,
    data: &[LabeledStatement],
    hooks: &[HookPoint],
    split: &SplitSpec,
    pooling: Pooling,
    cfg: &ProbeConfig,
    prepend_bos: bool,
) -> Result<Vec<ProbeResult>> {
    let features = collect_features(model, vocab, data, hooks, pooling, prepend_bos)?;
    sweep_features(&features, split, cfg)
}

/// Picks the best probe: highest AUC, then test accuracy, then lowest layer.
pub fn best_probe(results: &[ProbeResult]) -> Option<&ProbeResult> {
    results.iter().min_by(|a, b| {
        b.auc
            .total_cmp(&a.auc)
            .then(b.test_accuracy.total_cmp(&a.test_accuracy))
            .then(a.hook.layer.cmp(&b.hook.layer))
            .then(b.hook.kind.cmp(&a.hook.kind))
    })
}

/// Persisted set of trained probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub format_version: u32,
    pub pooling: Pooling,
    pub probes: Vec<ProbeResult>,
}

impl ProbeSet {
    pub fn new(pooling: Pooling, probes: Vec<ProbeResult>) -> Self {
        ProbeSet {
            format_version: PROBE_FORMAT_VERSION,
            pooling,
            probes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: ProbeSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if set.format_version != PROBE_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "{}: unsupported probe format version {}",
                path.display(),
                set.format_version
            )));
        }
        Ok(set)
    }

    pub fn by_hook(&self) -> HashMap<HookPoint, &ProbeResult> {
        self.probes.iter().map(|p| (p.hook, p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::try_from(b).unwrap()).collect()
    }

    fn brute_force_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (sp, lp) in scores.iter().zip(labels) {
            for (sn, ln) in scores.iter().zip(labels) {
                if lp.is_biased() && !ln.is_biased() {
                    den += 1.0;
                    num += match sp.partial_cmp(sn).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn pool_single_token() {
        let act = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        for p in [Pooling::Mean, Pooling::LastToken] {
            let f = pool(HookPoint::resid_post(0), std::slice::from_ref(&act), &[Label::Neutral], p).unwrap();
            assert_eq!(f.x.row(0), &[1.0, -2.0]);
        }
    }

    #[test]
    fn pool_two_tokens() {
        let act = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap();
        let h = HookPoint::resid_post(0);
        let mean = pool(h, std::slice::from_ref(&act), &[Label::Biased], Pooling::Mean).unwrap();
        assert_eq!(mean.x.row(0), &[1.0, 2.0]);
        let last = pool(h, &[act], &[Label::Biased], Pooling::LastToken).unwrap();
        assert_eq!(last.x.row(0), &[2.0, 4.0]);
    }

    #[test]
    fn pool_rejects_empty_sequence() {
        let ok = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let empty = Tensor::zeros(vec![0, 1]);
        let err = pool(
            HookPoint::resid_post(0),
            &[ok, empty],
            &labels(&[0, 1]),
            Pooling::Mean,
        )
        .unwrap_err();
        assert!(err.to_string().contains("statement 1"), "{err}");
    }

    #[test]
    fn auc_examples() {
        let l = labels(&[0, 0, 1, 1]);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        // pos = {0.9, 0.4}, neg = {0.5, 0.1}
        assert_eq!(auc(&[0.5, 0.1, 0.9, 0.4], &l).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &labels(&[1, 1])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn separable_one_dimensional_probe() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let biased = i % 2 == 1;
            rows.push(vec![if biased { 1.0 } else { -1.0 }]);
            y.push(if biased { Label::Biased } else { Label::Neutral });
        }
        let f = PooledFeatures {
            hook: HookPoint::resid_post(0),
            x: Tensor::from_rows(&rows).unwrap(),
            y,
            pooling: Pooling::Mean,
        };
        let r = train_probe(&f, &SplitSpec::default(), &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.train_accuracy, 1.0);
        assert_eq!(r.auc, 1.0);
        assert!(r.converged);
        assert_eq!(r.n_test, 12);
    }

    #[test]
    fn single_class_train_split_is_rejected() {
        let f = PooledFeatures {
            hook: HookPoint::attn_z(1),
            x: Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            y: labels(&[0, 0, 1]),
            pooling: Pooling::Mean,
        };
        let err = train_probe_on_indices(&f, &[0, 1], &[2], &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SingleClass(_)), "{err}");
    }

    #[test]
    fn converges_to_stationary_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|r| f64::from(u8::from(r[0] + 0.3 * r[1] + rng.random_range(-0.5..0.5) > 0.0)))
            .collect();
        let cfg = ProbeConfig::default();
        let fit = fit_logistic(&xs, &ys, &cfg);
        assert!(fit.converged, "{} iterations", fit.iterations);
        // Finite-difference check of stationarity on the bias.
        let obj = Objective { x: &xs, y: &ys, l2: cfg.l2 };
        let h = 1e-4;
        let fd = (obj.value(&fit.weights, fit.bias + h) - obj.value(&fit.weights, fit.bias - h)) / (2.0 * h);
        assert!(fd.abs() < 1e-5, "{fd}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..20).map(|i| f64::from(i % 2)).collect();
        let obj = Objective { x: &xs, y: &ys, l2: 0.7 };
        let w = vec![0.3, -0.2, 0.9, 0.1];
        let b = -0.4;
        let (gw, gb) = obj.gradient(&w, b);
        let h = 1e-6;
        for k in 0..4 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let fd = (obj.value(&wp, b) - obj.value(&wm, b)) / (2.0 * h);
            assert!((fd - gw[k]).abs() < 1e-7, "{k}: {fd} vs {}", gw[k]);
        }
        let fd = (obj.value(&w, b + h) - obj.value(&w, b - h)) / (2.0 * h);
        assert!((fd - gb).abs() < 1e-7);
    }

    #[test]
    fn best_probe_breaks_ties_by_lowest_layer() {
        let mk = |layer, acc, auc| ProbeResult {
            hook: HookPoint::resid_post(layer),
            weights: vec![],
            bias: 0.0,
            train_accuracy: 1.0,
            test_accuracy: acc,
            auc,
            standardizer: Standardizer { mean: vec![], std: vec![] },
            iterations: 0,
            converged: true,
            n_train: 0,
            n_test: 0,
        };
        let results = vec![mk(35, 1.0, 1.0), mk(5, 0.833, 0.959), mk(16, 1.0, 1.0), mk(25, 0.976, 1.0)];
        assert_eq!(best_probe(&results).unwrap().hook.layer, 16);
        assert!(best_probe(&[]).is_none());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..20),
            force in any::<bool>(),
        ) {
            let mut raw = raw;
            if force {
                raw[0].1 = true;
                raw[1].1 = false;
            }
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let ls: Vec<Label> = raw.iter().map(|(_, b)| if *b { Label::Biased } else { Label::Neutral }).collect();
            let n_pos = ls.iter().filter(|l| l.is_biased()).count();
            prop_assume!(n_pos > 0 && n_pos < ls.len());
            prop_assert_eq!(auc(&scores, &ls).unwrap(), brute_force_auc(&scores, &ls));
        }

        #[test]
        fn auc_negation_complements(seed in 0u64..10_000, n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut ls: Vec<Label> = (0..n).map(|_| if rng.random::<bool>() { Label::Biased } else { Label::Neutral }).collect();
            ls[0] = Label::Biased;
            ls[1] = Label::Neutral;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let total = auc(&scores, &ls).unwrap() + auc(&neg, &ls).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn features_archive_round_trip() {
        let f = |hook| PooledFeatures {
            hook,
            x: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.5]]).unwrap(),
            y: vec![Label::Neutral, Label::Biased],
            pooling: Pooling::LastToken,
        };
        let feats = vec![f(HookPoint::attn_z(1)), f(HookPoint::resid_post(0))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.safetensors");
        save_features(&feats, "sha256:00", &path).unwrap();
        let (back, id) = load_features(&path).unwrap();
        assert_eq!(id, "sha256:00");
        assert_eq!(back, vec![feats[1].clone(), feats[0].clone()]);
    }
}
