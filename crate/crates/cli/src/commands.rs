// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use probesteer::analysis::{self, ModelSection, Report};
use probesteer::dataset::{self, LabeledStatement, BUILTIN_DATASET_ID};
use probesteer::model::{locate_weights, HookKind, HookPoint, Model, ModelConfig, WEIGHTS_DIR_ENV};
use probesteer::probes::{self, collect_features, sweep_features, PooledFeatures, ProbeResult, ProbeSet};
use probesteer::steering::{self, compare, compute_steering_vector, ComparisonRow, SteeringVector};
use probesteer::tokenizer::BpeVocab;
use probesteer::Error;

use crate::config::{HookSelection, RunConfig};

pub struct Session {
    pub model: Model,
    pub vocab: BpeVocab,
}

fn weights_root(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.weights_path {
        return Ok(p.clone());
    }
    match std::env::var_os(WEIGHTS_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => Err(Error::Load(format!(
            "no weights configured; pass --weights or set {WEIGHTS_DIR_ENV}"
        ))
        .into()),
    }
}

impl Session {
    pub fn open(cfg: &RunConfig) -> Result<Session> {
        let config = ModelConfig::preset(&cfg.model_preset)?;
        let root = weights_root(cfg)?;
        let path = locate_weights(&root, &cfg.model_preset)?;
        let model = Model::load(&path, config)
            .with_context(|| format!("loading {} weights", cfg.model_preset))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let vocab = if dir.join("vocab.json").is_file() && dir.join("merges.txt").is_file() {
            BpeVocab::load_dir(dir).context("loading tokenizer")?
        } else {
            BpeVocab::gpt2()
        };
        Ok(Session { model, vocab })
    }

    fn n_layers(&self) -> usize {
        self.model.config().n_layers
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<LabeledStatement>, String)> {
    match &cfg.dataset_path {
        None => Ok((dataset::generate_builtin_dataset(), BUILTIN_DATASET_ID.to_owned())),
        Some(p) => {
            let data = dataset::load_jsonl(p).context("loading dataset")?;
            let id = dataset::dataset_id(&data);
            Ok((data, id))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn hooks_for(selection: HookSelection, n_layers: usize) -> Vec<HookPoint> {
    HookPoint::all(n_layers, selection.kinds())
}

fn collect(session: &Session, cfg: &RunConfig, data: &[LabeledStatement], hooks: &[HookPoint]) -> Result<Vec<PooledFeatures>> {
    collect_features(
        &session.model,
        &session.vocab,
        data,
        hooks,
        cfg.pooling,
        cfg.generation.prepend_bos,
    )
    .context("collecting activations")
}

fn model_section(session: &Session, cfg: &RunConfig) -> ModelSection {
    ModelSection {
        preset: cfg.model_preset.clone(),
        config: session.model.config().clone(),
    }
}

fn run_config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config serializes")
}

pub fn dataset_gen(out: &Path) -> Result<()> {
    let data = dataset::generate_builtin_dataset();
    dataset::save_jsonl(&data, out)?;
    println!("wrote {} statements to {}", data.len(), out.display());
    Ok(())
}

pub fn init_random(cfg: &RunConfig, out: &Path) -> Result<()> {
    let config = ModelConfig::preset(&cfg.model_preset)?;
    let model = Model::random(config, cfg.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    model.save(out)?;
    println!("wrote random {} weights to {}", cfg.model_preset, out.display());
    Ok(())
}

pub fn collect_cmd(cfg: &RunConfig) -> Result<()> {
    let session = Session::open(cfg)?;
    let (data, id) = load_dataset(cfg)?;
    let hooks = hooks_for(cfg.hooks, session.n_layers());
    let features = collect(&session, cfg, &data, &hooks)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("features.safetensors");
    probes::save_features(&features, &id, &path)?;
    write(&cfg.output_dir, "run_config.json", &cfg.to_json())?;
    println!("wrote {} hook feature sets for {} statements to {}", features.len(), data.len(), path.display());
    Ok(())
}

fn train(cfg: &RunConfig, features: &[PooledFeatures]) -> Result<Vec<ProbeResult>> {
    sweep_features(features, &cfg.split, &cfg.probe_config()).context("training probes")
}

fn write_sweep_outputs(cfg: &RunConfig, results: &[ProbeResult]) -> Result<()> {
    analysis::emit_sweep_csv(results, &cfg.output_dir.join("sweep.csv"))?;
    ProbeSet::new(cfg.pooling, results.to_vec()).save(&cfg.output_dir.join("probes.json"))?;
    Ok(())
}

fn print_best(results: &[ProbeResult]) {
    if let Some(best) = probes::best_probe(results) {
        println!(
            "best hook: {} (auc {:.4}, test accuracy {:.4})",
            best.hook, best.auc, best.test_accuracy
        );
    }
}

pub fn sweep_cmd(cfg: &RunConfig, features_path: Option<&Path>) -> Result<()> {
    let session = Session::open(cfg)?;
    let (features, id) = match features_path {
        Some(p) => probes::load_features(p).context("loading features")?,
        None => {
            let (data, id) = load_dataset(cfg)?;
            let hooks = hooks_for(cfg.hooks, session.n_layers());
            (collect(&session, cfg, &data, &hooks)?, id)
        }
    };
    let results = train(cfg, &features)?;
    ensure_dir(&cfg.output_dir)?;
    write_sweep_outputs(cfg, &results)?;
    let report = Report::new(model_section(&session, cfg), &id, run_config_value(cfg), &results, Vec::new());
    analysis::emit_report_json(&report, &cfg.output_dir.join("report.json"))?;
    write(&cfg.output_dir, "run_config.json", &cfg.to_json())?;
    print_best(&results);
    Ok(())
}

/// The residual hook to steer at: explicit layer, else the best resid_post
/// probe from a previous sweep in the output directory, else a fresh sweep.
fn steering_hook(session: &Session, cfg: &RunConfig, data: &[LabeledStatement]) -> Result<HookPoint> {
    if let Some(layer) = cfg.steer_layer {
        if layer >= session.n_layers() {
            return Err(Error::HookOutOfRange {
                name: HookPoint::resid_post(layer).to_string(),
                n_layers: session.n_layers(),
            }
            .into());
        }
        return Ok(HookPoint::resid_post(layer));
    }
    let saved = cfg.output_dir.join("probes.json");
    let resid: Vec<ProbeResult> = if saved.is_file() {
        ProbeSet::load(&saved)?.probes
    } else {
        let hooks = hooks_for(HookSelection::ResidPost, session.n_layers());
        train(cfg, &collect(session, cfg, data, &hooks)?)?
    }
    .into_iter()
    .filter(|r| r.hook.kind == HookKind::ResidPost && r.hook.layer < session.n_layers())
    .collect();
    let best = probes::best_probe(&resid).context("no resid_post probes to choose a steering layer from")?;
    eprintln!("steering at best resid_post hook {} (auc {:.4})", best.hook, best.auc);
    Ok(best.hook)
}

fn steering_vector(session: &Session, cfg: &RunConfig, file: Option<&Path>) -> Result<SteeringVector> {
    if let Some(p) = file {
        return Ok(SteeringVector::load(p)?);
    }
    let (data, id) = load_dataset(cfg)?;
    let hook = steering_hook(session, cfg, &data)?;
    let features = collect(session, cfg, &data, &[hook])?;
    Ok(compute_steering_vector(&features[0], &id)?)
}

fn print_rows(rows: &[ComparisonRow]) {
    for r in rows {
        println!("prompt:   {}", r.prompt);
        match &r.error {
            Some(e) => println!("error:    {e}"),
            None => {
                println!("baseline: {}", r.baseline.as_deref().unwrap_or_default());
                println!("steered:  {}", r.steered.as_deref().unwrap_or_default());
            }
        }
        println!();
    }
}

fn failed_rows(rows: &[ComparisonRow]) -> Result<()> {
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} prompts failed to generate", rows.len());
    }
    Ok(())
}

pub fn steer_cmd(cfg: &RunConfig, steering_file: Option<&Path>) -> Result<()> {
    if cfg.prompts.is_empty() {
        return Err(crate::UsageError("no prompts given".into()).into());
    }
    let session = Session::open(cfg)?;
    let sv = steering_vector(&session, cfg, steering_file)?;
    let rows = compare(&session.model, &session.vocab, &cfg.prompts, &sv, &cfg.generation);
    ensure_dir(&cfg.output_dir)?;
    sv.save(&cfg.output_dir.join("steering_vector.json"))?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    write(&cfg.output_dir, "comparison.json", &json)?;
    write(&cfg.output_dir, "run_config.json", &cfg.to_json())?;
    println!("steering {} with alpha {}\n", sv.hook, cfg.generation.alpha);
    print_rows(&rows);
    failed_rows(&rows)
}

pub fn generate_cmd(cfg: &RunConfig, prompt: &str, steer: bool, steering_file: Option<&Path>) -> Result<()> {
    let session = Session::open(cfg)?;
    let completion = if steer || steering_file.is_some() {
        let sv = steering_vector(&session, cfg, steering_file)?;
        steering::steered_generate(&session.model, &session.vocab, prompt, &sv, &cfg.generation)?
    } else {
        steering::generate(&session.model, &session.vocab, prompt, &cfg.generation)?
    };
    println!("{prompt}{}", completion.text);
    Ok(())
}

pub fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let session = Session::open(cfg)?;
    let (data, id) = load_dataset(cfg)?;
    let mut hooks = hooks_for(cfg.hooks, session.n_layers());
    if cfg.hooks == HookSelection::AttnZ {
        hooks.extend(hooks_for(HookSelection::ResidPost, session.n_layers()));
    }
    let features = collect(&session, cfg, &data, &hooks)?;
    let results = train(cfg, &features)?;
    ensure_dir(&cfg.output_dir)?;
    write_sweep_outputs(cfg, &results)?;

    let resid: Vec<ProbeResult> = results
        .iter()
        .filter(|r| r.hook.kind == HookKind::ResidPost)
        .cloned()
        .collect();
    let target = match cfg.steer_layer {
        Some(layer) => HookPoint::resid_post(layer),
        None => probes::best_probe(&resid).context("no resid_post probes")?.hook,
    };
    let feats = features
        .iter()
        .find(|f| f.hook == target)
        .with_context(|| format!("{target} was not collected"))?;

    let labels: Vec<_> = data.iter().map(|s| s.label).collect();
    let categories: Vec<_> = data.iter().map(|s| s.category).collect();
    let pca = analysis::pca_2d(&feats.x)
        .and_then(|p| p.with_annotations(&labels, &categories))
        .with_context(|| format!("PCA at {target}"))?;
    analysis::emit_pca_csv(&pca, &cfg.output_dir.join("pca.csv"))?;

    let sv = compute_steering_vector(feats, &id)?;
    sv.save(&cfg.output_dir.join("steering_vector.json"))?;
    let rows = compare(&session.model, &session.vocab, &cfg.prompts, &sv, &cfg.generation);
    let report = Report::new(model_section(&session, cfg), &id, run_config_value(cfg), &results, rows.clone());
    analysis::emit_report_json(&report, &cfg.output_dir.join("report.json"))?;
    write(&cfg.output_dir, "run_config.json", &cfg.to_json())?;
    print_best(&results);
    println!("PCA and steering at {target}; outputs in {}\n", cfg.output_dir.display());
    print_rows(&rows);
    failed_rows(&rows)
}
