// SPDX-License-Identifier: MIT OR Apache-2.0

use probesteer::model::{
    HookKind, HookPoint, InterventionHook, InterventionPositions, Model, ModelConfig,
};
use probesteer::numerics::Tensor;
use probesteer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Model {
    Model::random(ModelConfig::preset("tiny-test").unwrap(), 7).unwrap()
}

fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn unit_delta(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    Tensor::vector(v.into_iter().map(|x| x / n).collect()).unwrap()
}

#[test]
fn cached_residual_matches_prefix_recomputation() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hooks = HookPoint::all(2, &[HookKind::ResidPost]);
    for _ in 0..10 {
        let len = rng.random_range(1..20);
        let ids = random_ids(&mut rng, 50257, len);
        let (logits, cache) = model.run_with_cache(&ids, &hooks).unwrap();
        assert_eq!(logits, model.forward(&ids).unwrap());
        for h in &hooks {
            let prefix = model.residual_prefix(&ids, h.layer).unwrap();
            assert_eq!(cache.get(h).unwrap(), &prefix, "{h}");
        }
    }
}

#[test]
fn cache_holds_exactly_the_requested_hooks() {
    let model = tiny();
    let ids = [464, 3290, 318, 257, 1332];
    let (_, empty) = model.run_with_cache(&ids, &[]).unwrap();
    assert!(empty.is_empty());
    let (_, cache) = model
        .run_with_cache_named(&ids, &["blocks.0.hook_resid_post", "blocks.1.attn.hook_z"])
        .unwrap();
    let mut names = cache.names();
    names.sort();
    assert_eq!(names, ["blocks.0.hook_resid_post", "blocks.1.attn.hook_z"]);
    assert_eq!(cache.get_by_name("blocks.0.hook_resid_post").unwrap().shape(), [5, 16]);
    assert_eq!(cache.get_by_name("blocks.1.attn.hook_z").unwrap().shape(), [5, 16]);
}

#[test]
fn later_tokens_do_not_affect_earlier_logits() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_ids(&mut rng, 50257, 12);
    let full = model.forward(&ids).unwrap();
    for t in [0, 3, 11] {
        let truncated = model.forward(&ids[..=t]).unwrap();
        for p in 0..=t {
            assert_eq!(truncated.row(p), full.row(p), "position {p} with prefix {t}");
        }
        let mut altered = ids.clone();
        for id in altered.iter_mut().skip(t + 1) {
            *id = (*id + 17) % 50257;
        }
        let other = model.forward(&altered).unwrap();
        for p in 0..=t {
            assert_eq!(other.row(p), full.row(p));
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids = random_ids(&mut rng, 50257, 9);
    for layer in 0..2 {
        let patterns = model.attention_patterns(&ids, layer).unwrap();
        assert_eq!(patterns.len(), 2);
        for p in &patterns {
            for (i, row) in p.rows().enumerate() {
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn zero_interventions_are_exact_identities() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = random_ids(&mut rng, 50257, 6);
    let base = model.forward(&ids).unwrap();
    let delta = unit_delta(&mut rng, 16);
    let alpha_zero = InterventionHook {
        target: HookPoint::resid_post(0),
        delta: delta.clone(),
        scale: 0.0,
        positions: InterventionPositions::All,
    };
    assert_eq!(model.forward_with_intervention(&ids, &alpha_zero).unwrap(), base);
    let zero_delta = InterventionHook {
        delta: Tensor::zeros(vec![16]),
        scale: 1.0,
        ..alpha_zero
    };
    assert_eq!(model.forward_with_intervention(&ids, &zero_delta).unwrap(), base);
}

#[test]
fn intervention_leaves_earlier_hooks_untouched() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = random_ids(&mut rng, 50257, 8);
    let hooks = HookPoint::all(2, &[HookKind::AttnZ, HookKind::ResidPost]);
    let (base_logits, base) = model.run_with_cache(&ids, &hooks).unwrap();
    let hook = InterventionHook {
        target: HookPoint::resid_post(1),
        delta: unit_delta(&mut rng, 16),
        scale: 4.0,
        positions: InterventionPositions::All,
    };
    let (logits, steered) = model
        .run_with_intervention_and_cache(&ids, &hooks, Some(&hook))
        .unwrap();
    for h in [HookPoint::attn_z(0), HookPoint::resid_post(0), HookPoint::attn_z(1)] {
        assert_eq!(steered.get(&h), base.get(&h), "{h}");
    }
    assert_ne!(logits, base_logits);
}

#[test]
fn captured_activation_is_baseline_plus_scaled_delta() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids = random_ids(&mut rng, 50257, 7);
    let target = HookPoint::resid_post(0);
    let (_, base) = model.run_with_cache(&ids, &[target]).unwrap();
    let delta = unit_delta(&mut rng, 16);
    for (alpha, positions) in [
        (0.5, InterventionPositions::All),
        (4.0, InterventionPositions::StartingAt(3)),
    ] {
        let hook = InterventionHook {
            target,
            delta: delta.clone(),
            scale: alpha,
            positions,
        };
        let (_, cache) = model
            .run_with_intervention_and_cache(&ids, &[target], Some(&hook))
            .unwrap();
        let got = cache.get(&target).unwrap();
        let want = base.get(&target).unwrap();
        for p in 0..ids.len() {
            if !positions.contains(p) {
                assert_eq!(got.row(p), want.row(p));
                continue;
            }
            let expected: Vec<f32> = want
                .row(p)
                .iter()
                .zip(delta.data())
                .map(|(b, d)| b + alpha * d)
                .collect();
            let scale = expected.iter().fold(0f32, |m, v| m.max(v.abs()));
            for (g, e) in got.row(p).iter().zip(&expected) {
                assert!((g - e).abs() <= 1e-5 * scale, "{g} vs {e}");
            }
        }
    }
}

#[test]
fn concurrent_passes_agree_with_serial() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prompts: Vec<Vec<u32>> = (0..8).map(|i| random_ids(&mut rng, 50257, 3 + i)).collect();
    let serial: Vec<Tensor> = prompts.iter().map(|p| model.forward(p).unwrap()).collect();
    let parallel: Vec<Tensor> = std::thread::scope(|s| {
        let handles: Vec<_> = prompts
            .iter()
            .map(|p| s.spawn(|| model.forward(p).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn forward_rejects_bad_inputs() {
    let model = tiny();
    assert!(matches!(model.forward(&[]), Err(Error::EmptyInput(_))));
    let long = vec![0u32; 129];
    assert!(matches!(
        model.forward(&long),
        Err(Error::ContextOverflow { len: 129, max: 128 })
    ));
    assert!(matches!(model.forward(&[50257]), Err(Error::Domain(_))));
    let err = model
        .run_with_cache_named(&[1], &["blocks.0.hook_mlp_out"])
        .unwrap_err();
    assert!(err.to_string().contains("resid_post"), "{err}");
    assert!(matches!(
        model.run_with_cache(&[1], &[HookPoint::resid_post(2)]),
        Err(Error::HookOutOfRange { .. })
    ));
    let attn = InterventionHook {
        target: HookPoint::attn_z(0),
        delta: Tensor::zeros(vec![16]),
        scale: 1.0,
        positions: InterventionPositions::All,
    };
    assert!(model.forward_with_intervention(&[1], &attn).is_err());
    let short = InterventionHook {
        target: HookPoint::resid_post(0),
        delta: Tensor::zeros(vec![15]),
        ..attn
    };
    assert!(matches!(
        model.forward_with_intervention(&[1], &short),
        Err(Error::Shape(_))
    ));
}
