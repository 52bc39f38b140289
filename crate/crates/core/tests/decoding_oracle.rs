mod common;

use common::{exhaustive_best, random_prompt, rng, seed7, Hashed};
use proptest::prelude::*;
use steer_core::decoding::{
    beam, generate, generate_with, greedy, nucleus_distribution, refine, sample_nucleus, DecodeConfig, Engine,
    LogitVector, Strategy,
};
use steer_core::intervention::{InterventionConfig, LayerGate};
use steer_core::model::{LanguageModel, Model, ModelConfig, EOS_ID};

#[test]
fn wide_beam_equals_exhaustive_search() {
    for salt in 0..40 {
        let src = Hashed { vocab: 4, salt };
        let got = beam(&src, 64, 3, EOS_ID).unwrap();
        let (tokens, finished, score) = exhaustive_best(&src, 3);
        assert_eq!(got.best.tokens, tokens, "salt {salt}");
        assert_eq!(got.best.finished, finished);
        assert!((got.best.score() - score).abs() < 1e-12);
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let model = seed7();
    let mut r = rng(31);
    for _ in 0..50 {
        let p = random_prompt(&mut r, model.config());
        let engine = Engine::vanilla(&model, p);
        let g = greedy(&engine, 8, EOS_ID).unwrap();
        let b = beam(&engine, 1, 8, EOS_ID).unwrap();
        assert_eq!(g.tokens, b.best.tokens);
        assert_eq!(g.finished, b.best.finished);
    }
}

#[test]
fn nucleus_frequencies_match_distribution() {
    let model = Model::build(ModelConfig {
        vocab_size: 8,
        ..ModelConfig::fixture()
    })
    .unwrap();
    let p = steer_core::model::Prompt::text(vec![3, 4, 5]);
    let logits = model.run(&p, None).unwrap().logits;
    // Sharpen so the top-p cut drops some tokens but keeps several.
    let logits = LogitVector::new(logits.values().iter().map(|v| v * 2.0).collect()).unwrap();
    let dist = nucleus_distribution(&logits, 0.9, 1.0).unwrap();
    assert!(dist.len() > 2 && dist.len() < 8, "{dist:?}");
    let mut r = rng(32);
    let n = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..n {
        counts[sample_nucleus(&logits, 0.9, 1.0, &mut r).unwrap() as usize] += 1;
    }
    let mut tv = 0.0;
    for (t, c) in counts.iter().enumerate() {
        let p = dist.iter().find(|(id, _)| *id as usize == t).map_or(0.0, |x| x.1);
        tv += (*c as f64 / n as f64 - p).abs();
    }
    assert!(tv / 2.0 < 0.02, "total variation {}", tv / 2.0);
}

#[test]
fn nucleus_is_seed_deterministic() {
    let model = seed7();
    let cfg = DecodeConfig {
        strategy: Strategy::Nucleus {
            top_p: 0.9,
            temperature: 1.0,
            seed: 5,
        },
        ..DecodeConfig::greedy(10)
    };
    let p = steer_core::model::Prompt::text(vec![3, 4, 5]);
    let a = generate_with(&model, p.clone(), &cfg, None).unwrap();
    let b = generate_with(&model, p, &cfg, None).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn identity_intervention_matches_vanilla() {
    let model = seed7();
    let mut r = rng(33);
    for _ in 0..10 {
        let p = random_prompt(&mut r, model.config());
        let icfg = InterventionConfig {
            gate: LayerGate::AllLayers,
            ..InterventionConfig::identity()
        };
        let cfg = DecodeConfig {
            contrastive: true,
            ..DecodeConfig::greedy(6)
        };
        let a = generate(&Engine::vanilla(&model, p.clone()), &cfg).unwrap();
        let b = generate_with(&model, p, &cfg, Some(icfg)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.cond_logits, y.cond_logits);
        }
    }
}

#[test]
fn beam_traces_cover_emitted_tokens() {
    let model = seed7();
    let cfg = DecodeConfig {
        strategy: Strategy::Beam { width: 5 },
        ..DecodeConfig::greedy(6)
    };
    let g = generate_with(&model, steer_core::model::Prompt::text(vec![7, 8]), &cfg, None).unwrap();
    assert_eq!(g.steps.len(), g.tokens.len() + usize::from(g.finished));
    for (s, t) in g.steps.iter().zip(&g.tokens) {
        assert_eq!(s.token, *t);
    }
}

proptest! {
    #[test]
    fn refine_is_exact(
        pairs in prop::collection::vec((-5f32..5.0, -5f32..5.0), 1..64),
        gamma in 1f32..2.0,
    ) {
        let c = LogitVector::new(pairs.iter().map(|p| p.0).collect()).unwrap();
        let t = LogitVector::new(pairs.iter().map(|p| p.1).collect()).unwrap();
        let r = refine(&c, &t, gamma).unwrap();
        let g = gamma as f64;
        for ((a, b), out) in pairs.iter().zip(r.values()) {
            prop_assert!((*out as f64 - (g * *a as f64 - (g - 1.0) * *b as f64)).abs() < 1e-6);
        }
        prop_assert_eq!(refine(&c, &t, 1.0).unwrap(), c);
    }

    #[test]
    fn nucleus_keeps_minimal_prefix(
        logits in prop::collection::vec(-6f32..6.0, 1..40),
        top_p in 0.05f32..1.0,
        temperature in 0.3f32..2.0,
    ) {
        let v = LogitVector::new(logits).unwrap();
        let d = nucleus_distribution(&v, top_p, temperature).unwrap();
        let total: f64 = d.iter().map(|x| x.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(d.windows(2).all(|w| w[0].1 >= w[1].1));
        // Dropping the last kept token must fall below top_p.
        let full = nucleus_distribution(&v, 1.0, temperature).unwrap();
        let before: f64 = full.iter().take(d.len() - 1).map(|x| x.1).sum();
        prop_assert!(before < top_p as f64);
    }
}
