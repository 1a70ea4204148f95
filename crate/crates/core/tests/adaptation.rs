use accept_core::backbone::{assemble_input, BackboneConfig, BackboneModel};
use accept_core::factorization::{init_random, ComposedPrompt, PromptDims, ScaleSpec, WeightSet};
use accept_core::graph::Graph;
use accept_core::optim::warmup_lr;
use accept_core::prompt::{PromptComponent, PromptParams};
use accept_core::taskbench::{gen_task, Dataset, MetricName, TaskKind};
use accept_core::trainer::{
    apply_init, evaluate, load_checkpoint, save_checkpoint, train, InitStrategy, PromptLayout, RunConfig,
};
use accept_core::Error;
use proptest::prelude::*;

fn config() -> BackboneConfig {
    BackboneConfig { d: 16, layers: 2, heads: 2, vocab_size: 16, max_len: 8, ffn_mult: 2, num_outputs: 2 }
}

fn frozen<T: accept_core::tensor::Scalar>(seed: u64) -> BackboneModel<T> {
    let mut m = BackboneModel::<T>::init(config(), seed).unwrap();
    m.freeze(false);
    m
}

fn layout() -> PromptLayout {
    PromptLayout {
        scpp: Some(PromptDims { positions: 4, d: 16, k: 2, r: 3 }),
        scap: Some(PromptDims { positions: 8, d: 16, k: 4, r: 2 }),
    }
}

fn data(seed: u64) -> (Dataset, Dataset) {
    let mut train = gen_task(TaskKind::PairMatch, 16, 7, 96, seed).unwrap();
    let dev = train.split_off(32, "dev");
    (train, dev)
}

fn short_run(steps: usize) -> RunConfig {
    RunConfig {
        steps,
        batch_size: 4,
        warmup_steps: steps / 10,
        eval_interval: (steps / 4).max(1),
        lr_scpp: 0.05,
        lr_scap: 0.01,
        ..RunConfig::default()
    }
}

#[test]
fn shifting_between_embeddings_and_added_prompt_leaves_logits_unchanged() {
    let model = frozen::<f64>(1);
    let dims = PromptDims { positions: 8, d: 16, k: 1, r: 8 };
    for seed in 0..10 {
        let p = init_random::<f64>(&PromptDims { positions: 3, ..dims }, seed, &ScaleSpec::default()).unwrap();
        let q = init_random::<f64>(&dims, seed + 100, &ScaleSpec::default()).unwrap();
        let delta = init_random::<f64>(&dims, seed + 200, &ScaleSpec::default()).unwrap();
        let p = accept_core::factorization::compose(&p.0, &p.1).unwrap();
        let q = accept_core::factorization::compose(&q.0, &q.1).unwrap();
        let delta = accept_core::factorization::compose(&delta.0, &delta.1).unwrap();
        let tokens = &gen_task(TaskKind::Parity, 16, 6, 2, seed).unwrap().examples[0].tokens;
        let (e, mask) = model.embed(tokens, 8).unwrap();

        let base = model.forward(&assemble_input(&p, &q, &e, &mask).unwrap()).unwrap();
        let e_shift: Vec<f64> = e.data().iter().zip(delta.values()).map(|(a, b)| a + b).collect();
        let q_shift: Vec<f64> = q.values().iter().zip(delta.values()).map(|(a, b)| a - b).collect();
        let e_shift = accept_core::tensor::Tensor::new(&[8, 16], e_shift).unwrap();
        let q_shift = ComposedPrompt::new(8, 16, q_shift).unwrap();
        let moved = model.forward(&assemble_input(&p, &q_shift, &e_shift, &mask).unwrap()).unwrap();
        assert!(base.max_abs_diff(&moved) < 1e-6, "seed {seed}");
    }
}

#[test]
fn gradients_reach_every_prompt_tensor() {
    let model = frozen::<f64>(2);
    let (train_set, _) = data(2);
    for seed in 0..20 {
        let prompts = apply_init::<f64>(&InitStrategy::random(), &layout(), seed).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, accept_core::backbone::BindMode::Frozen);
        let bp = prompts.bind(&mut g).unwrap();
        let ex = &train_set.examples[seed as usize];
        let (e, mask) = model.embed_var(&mut g, &bound, &ex.tokens, 8).unwrap();
        let (x, mask, m) = accept_core::backbone::assemble_var(&mut g, bp.prepended, bp.added, e, &mask).unwrap();
        let logits = model.forward_var(&mut g, &bound, x, &mask, m).unwrap();
        let loss = accept_core::backbone::example_loss(&mut g, logits, ex.label, false).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 4, "only the four prompt tensors receive gradients");
        for (role, slot, var) in &bp.leaves {
            let norm = grads.get(*var).unwrap().sq_norm();
            assert!(norm > 0.0, "seed {seed}: zero gradient for {role:?} {slot:?}");
        }
    }
}

#[test]
fn adaptation_never_touches_the_backbone() {
    let model = frozen::<f32>(3);
    let before = model.theta_hash();
    let snapshot = model.tensors().to_vec();
    let (train_set, dev) = data(3);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 3).unwrap();
    let out = train(&short_run(60), &model, prompts.clone(), &train_set, &dev).unwrap();
    assert_eq!(model.theta_hash(), before);
    assert_eq!(model.tensors(), snapshot.as_slice());
    assert!(out.model.is_none());
    // and the prompts did move
    assert_ne!(out.prompts, prompts);
}

#[test]
fn unfrozen_backbone_is_refused() {
    let model = BackboneModel::<f32>::init(config(), 0).unwrap();
    let (train_set, dev) = data(0);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 0).unwrap();
    assert!(matches!(train(&short_run(4), &model, prompts, &train_set, &dev), Err(Error::Contract(_))));
}

#[test]
fn trainable_head_moves_only_head_tensors() {
    let mut model = BackboneModel::<f32>::init(config(), 4).unwrap();
    model.freeze(true);
    let (train_set, dev) = data(4);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 4).unwrap();
    let out = train(&short_run(20), &model, prompts, &train_set, &dev).unwrap();
    let tuned = out.model.unwrap();
    for (name, (a, b)) in model.names().iter().zip(model.tensors().iter().zip(tuned.tensors())) {
        if name.starts_with("head.") {
            assert_ne!(a, b, "{name} should train");
        } else {
            assert_eq!(a, b, "{name} should stay frozen");
        }
    }
}

#[test]
fn runs_are_reproducible() {
    let model = frozen::<f32>(5);
    let (train_set, dev) = data(5);
    let run = || {
        let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 9).unwrap();
        train(&short_run(40), &model, prompts, &train_set, &dev).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.prompts, b.prompts);
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn zero_steps_returns_initial_prompts() {
    let model = frozen::<f32>(6);
    let (train_set, dev) = data(6);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 6).unwrap();
    let out = train(&short_run(0), &model, prompts.clone(), &train_set, &dev).unwrap();
    assert_eq!(out.prompts, prompts);
    assert!(out.history.records.is_empty());
    assert!(out.history.best.is_none());
}

#[test]
fn divergence_reports_the_step() {
    let model = frozen::<f32>(7);
    let (train_set, dev) = data(7);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 7).unwrap();
    let cfg = RunConfig { lr_scpp: 1e38, lr_scap: 1e38, warmup_steps: 0, ..short_run(8) };
    match train(&cfg, &model, prompts, &train_set, &dev) {
        Err(Error::Training { step, .. }) => assert!((1..=8).contains(&step)),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn best_checkpoint_reproduces_its_metric() {
    let model = frozen::<f32>(8);
    let (train_set, dev) = data(8);
    let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 8).unwrap();
    let out = train(&short_run(80), &model, prompts, &train_set, &dev).unwrap();
    let best = out.history.best.clone().unwrap();
    let max = out.history.records.iter().map(|r| r.eval_metric).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.metric, max);
    let first = out.history.records.iter().find(|r| r.eval_metric == max).unwrap();
    assert_eq!(best.step, first.step);

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), out.best_prompts.as_ref().unwrap(), Some(&out.history)).unwrap();
    let (reloaded, history) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(history.unwrap(), out.history);
    assert_eq!(evaluate(&model, &reloaded, &dev, MetricName::Accuracy).unwrap(), best.metric);
}

#[test]
fn single_subspace_one_hot_matches_vanilla_prompt_tuning() {
    let model = frozen::<f64>(9);
    let (train_set, dev) = data(9);
    let m = 4;
    let dims = PromptDims { positions: m, d: 16, k: 1, r: m };
    let (codebook, _) = init_random::<f64>(&dims, 9, &ScaleSpec::default()).unwrap();
    let accept = PromptParams {
        scpp: Some(PromptComponent::Factorized {
            codebook: codebook.clone(),
            weights: WeightSet::one_hot(m, 1),
            train_weights: false,
        }),
        scap: None,
    };
    let vanilla = PromptParams {
        scpp: Some(PromptComponent::Plain(ComposedPrompt::new(m, 16, codebook.entries().to_vec()).unwrap())),
        scap: None,
    };
    let cfg = RunConfig {
        steps: 200,
        batch_size: 4,
        warmup_steps: 20,
        eval_interval: 50,
        lr_scpp: 0.01,
        ..RunConfig::default()
    };
    let a = train(&cfg, &model, accept, &train_set, &dev).unwrap();
    let b = train(&cfg, &model, vanilla, &train_set, &dev).unwrap();
    assert_eq!(a.step_losses.len(), 200);
    let worst = a.step_losses.iter().zip(&b.step_losses).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
    assert!(worst <= 1e-8, "loss trajectories diverge by {worst}");
}

proptest! {
    #[test]
    fn warmup_is_linear_then_flat(base in 1e-5f64..1.0, warmup in 1usize..500, step in 1usize..1000) {
        let lr = warmup_lr(base, step, warmup);
        if step <= warmup {
            prop_assert_eq!(lr, base * step as f64 / warmup as f64);
        } else {
            prop_assert_eq!(lr, base);
        }
    }
}
