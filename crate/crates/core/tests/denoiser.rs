//! Prompt embedding and adapter plumbing on an untrained model.

use sketchmotion_core::noise;
use sketchmotion_core::{
    AttentionHooks, Denoiser, DenoiserConfig, DenoiserWeights, LoraAdapter, Motion, Prompt, Shape,
};

#[test]
fn prompt_embedding_is_deterministic_and_additive() {
    let w = DenoiserWeights::init(DenoiserConfig::default(), 2);
    let p = Prompt::new(Shape::Circle, Motion::Right);
    let a = w.embed_prompt(p).vector;
    let b = w.embed_prompt(p).vector;
    let bits = |t: &sketchmotion_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, w.embed_prompt(Prompt::Null).vector);
}

#[test]
fn zero_b_adapters_leave_output_unchanged() {
    let w = DenoiserWeights::init(DenoiserConfig::default(), 3);
    let adapters: Vec<LoraAdapter> = w
        .config()
        .attention_projections()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let shape = w.get(&name).unwrap().shape().to_vec();
            LoraAdapter::init(name, shape[0], shape[1], 4, 5, i as u64).unwrap()
        })
        .collect();
    assert!(!adapters.is_empty());
    let base = Denoiser::base(&w);
    let tuned = Denoiser::new(&w, &adapters).unwrap();
    let x = noise::normal(&[3, 16, 16, 1], 4, 0);
    let p = base.embed_prompt(Prompt::new(Shape::Line, Motion::Rotate));
    let a = base
        .predict_noise(&x, 50, &p, &mut AttentionHooks::none())
        .unwrap();
    let b = tuned
        .predict_noise(&x, 50, &p, &mut AttentionHooks::none())
        .unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
}
