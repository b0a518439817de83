mod common;

use std::collections::BTreeSet;

use bridgetune::data::{BridgeStyle, PromptTemplate};
use bridgetune::finetune::*;
use bridgetune::networks::AttentionHook;
use bridgetune::scheduler::{SamplerConfig, SamplerKind};
use bridgetune::tensor::{RngStream, Tensor};
use bridgetune::Error;
use common::{probe, schedule, tiny_bundle, tiny_corpus};

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr: 1e-2,
    }
}

fn fast_sampler() -> SamplerConfig {
    SamplerConfig {
        kind: SamplerKind::DeterministicSkip,
        steps: 2,
        guidance: 7.5,
    }
}

#[test]
fn placeholder_extends_vocabulary_at_base_size() {
    let mut b = tiny_bundle();
    let bridge = b.vocab.id("bridge").unwrap() as usize;
    let art = ti_extend_vocab(&mut b, "<the core bridge>", "bridge").unwrap();
    assert_eq!(art.token_id, 256);
    let table = &b.params["text.tok_emb"];
    let d = table.shape()[1];
    assert_eq!(&table.data()[256 * d..257 * d], &table.data()[bridge * d..(bridge + 1) * d]);
    let second = ti_extend_vocab(&mut b, "<other>", "arch").unwrap();
    assert_eq!(second.token_id, 257);
    assert!(ti_extend_vocab(&mut b, "<third>", "a bridge").is_err());
    assert!(ti_extend_vocab(&mut b, "<other>", "bridge").is_err());
    assert_eq!(
        b.tokenize("a photo of a <the core bridge>").unwrap()[..7],
        [1, b.vocab.id("a").unwrap(), b.vocab.id("photo").unwrap(), b.vocab.id("of").unwrap(), b.vocab.id("a").unwrap(), 256, 2]
    );
}

#[test]
fn textual_inversion_touches_one_row() {
    let mut b = tiny_bundle();
    let corpus = tiny_corpus(4, BridgeStyle::Coral, 5);
    let init = ti_extend_vocab(&mut b, "<the core bridge>", "bridge").unwrap();
    let before = b.clone();
    let mut nonzero_rows = Vec::new();
    let (art, losses) = ti_train(
        &mut b,
        &schedule(),
        &corpus,
        "<the core bridge>",
        "a photo of a {}",
        &quick(3),
        &RngStream::new(1, 0),
        |_, r| {
            let g = &r.grads["text.tok_emb"];
            let d = g.shape()[1];
            nonzero_rows.push((0..g.shape()[0]).filter(|&i| g.data()[i * d..(i + 1) * d].iter().any(|v| *v != 0.0)).count());
            assert_eq!(r.grads.len(), 1);
        },
    )
    .unwrap();
    assert_eq!(losses.len(), 3);
    assert_eq!(nonzero_rows, vec![1, 1, 1]);
    let changed = changed_parameters(&parameter_digest(&before.params), &parameter_digest(&b.params));
    assert_eq!(changed, BTreeSet::from(["text.tok_emb".to_string()]));
    let (t0, t1) = (&before.params["text.tok_emb"], &b.params["text.tok_emb"]);
    let d = t0.shape()[1];
    for row in 0..t0.shape()[0] {
        let same = t0.data()[row * d..(row + 1) * d] == t1.data()[row * d..(row + 1) * d];
        assert_eq!(same, row != 256, "row {row}");
    }
    assert!(!art.vector.bit_eq(&init.vector));

    let mut b0 = before.clone();
    let (art0, l0) = ti_train(&mut b0, &schedule(), &corpus, "<the core bridge>", "a photo of a {}", &quick(0), &RngStream::new(1, 0), |_, _| {}).unwrap();
    assert!(l0.is_empty());
    assert!(art0.vector.bit_eq(&init.vector));
}

#[test]
fn applying_a_trained_placeholder_reproduces_the_table() {
    let mut b = tiny_bundle();
    let base = b.clone();
    ti_extend_vocab(&mut b, "<x>", "bridge").unwrap();
    let corpus = tiny_corpus(2, BridgeStyle::Coral, 5);
    let (art, _) = ti_train(&mut b, &schedule(), &corpus, "<x>", "a {}", &quick(2), &RngStream::new(2, 0), |_, _| {}).unwrap();
    let mut fresh = base.clone();
    apply_ti(&mut fresh, &art).unwrap();
    assert!(fresh.params["text.tok_emb"].bit_eq(&b.params["text.tok_emb"]));
    assert_eq!(fresh.vocab, b.vocab);
}

#[test]
fn fresh_lora_preserves_every_output_bit() {
    let b = tiny_bundle();
    let art = lora_attach(&b, "aki", 4, 4.0, 0.01, &RngStream::new(3, 0)).unwrap();
    let (x, temb, ctx) = probe(&b, 2, 0);
    let plain = b.predict_noise(&x, &temb, &ctx, &[]).unwrap();
    let set = AdapterSet {
        lora: Some((art, 1.0)),
        hypernet: None,
    };
    let hooks: [&dyn AttentionHook; 1] = [&set];
    assert!(b.predict_noise(&x, &temb, &ctx, &hooks).unwrap().bit_eq(&plain));
    assert!(lora_attach(&b, "big", 17, 17.0, 0.01, &RngStream::new(3, 0)).is_err());
    assert!(lora_attach(&b, "zero", 0, 1.0, 0.01, &RngStream::new(3, 0)).is_err());
}

#[test]
fn lora_merge_hand_example() {
    let w = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let b = Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
    let merged = lora_merge(&w, &a, &b, 1.0).unwrap();
    assert_eq!(merged.data(), &[4.0, 6.0, 4.0, 9.0]);
    assert!(lora_merge(&w, &a, &Tensor::zeros(&[2, 1]), 1.0).unwrap().bit_eq(&w));
    assert!(lora_merge(&w, &b, &a, 1.0).is_err());
}

fn trained_lora(b: &bridgetune::networks::ModelBundle) -> LoraArtifact {
    let mut art = lora_attach(b, "aki", 4, 8.0, 0.3, &RngStream::new(4, 0)).unwrap();
    let mut r = RngStream::new(4, 1);
    for t in art.params.values_mut() {
        *t = r.normal_tensor(t.shape(), 0.3);
    }
    art
}

#[test]
fn merged_weights_match_runtime_adapter() {
    let b = tiny_bundle();
    let art = trained_lora(&b);
    let merged = merge_lora_into(&b, &art, 0.7).unwrap();
    let set = AdapterSet {
        lora: Some((art.clone(), 0.7)),
        hypernet: None,
    };
    let hooks: [&dyn AttentionHook; 1] = [&set];
    for seed in 0..5 {
        let (x, temb, ctx) = probe(&b, 2, seed);
        let runtime = b.predict_noise(&x, &temb, &ctx, &hooks).unwrap();
        let folded = merged.predict_noise(&x, &temb, &ctx, &[]).unwrap();
        assert!(runtime.max_abs_diff(&folded) <= 1e-5, "seed {seed}");
        assert!(runtime.max_abs_diff(&b.predict_noise(&x, &temb, &ctx, &[]).unwrap()) > 1e-4);
    }
    let restored = merge_lora_into(&merged, &art, -0.7).unwrap();
    for (k, v) in &b.params {
        assert!(restored.params[k].max_abs_diff(v) <= 1e-6, "{k}");
    }
}

#[test]
fn hypernetwork_widths_and_zero_final_identity() {
    let b = tiny_bundle();
    let art = hn_build(&b, "coral_shell_bridge", &[1.0, 2.0, 1.0], HnActivation::Identity, HnInit::Normal, &RngStream::new(5, 0)).unwrap();
    assert_eq!(art.widths(), vec![16, 32, 16]);
    assert!(art.params.values().filter(|t| t.shape().len() == 1).all(|t| t.data().iter().all(|v| *v == 0.0)));
    assert!(hn_build(&b, "x", &[1.0, 2.0], HnActivation::Identity, HnInit::Normal, &RngStream::new(5, 0)).is_err());
    assert!(hn_build(&b, "x", &[2.0, 1.0], HnActivation::Identity, HnInit::Normal, &RngStream::new(5, 0)).is_err());

    let zero = hn_build(&b, "z", &[1.0, 2.0, 1.0], HnActivation::Relu, HnInit::ZeroFinal, &RngStream::new(5, 0)).unwrap();
    let (x, temb, ctx) = probe(&b, 2, 1);
    let plain = b.predict_noise(&x, &temb, &ctx, &[]).unwrap();
    for (art, weight, same) in [(zero, 1.0, true), (art.clone(), 0.0, true), (art, 1.0, false)] {
        let set = AdapterSet {
            lora: None,
            hypernet: Some((art, weight)),
        };
        let hooks: [&dyn AttentionHook; 1] = [&set];
        assert_eq!(b.predict_noise(&x, &temb, &ctx, &hooks).unwrap().bit_eq(&plain), same);
    }
}

#[test]
fn activation_names_parse() {
    assert_eq!("linear".parse::<HnActivation>().unwrap(), HnActivation::Identity);
    assert_eq!("ReLU".parse::<HnActivation>().unwrap(), HnActivation::Relu);
    assert!("tanh".parse::<HnActivation>().is_err());
}

#[test]
fn adapter_trainers_leave_the_base_untouched() {
    let b = tiny_bundle();
    let corpus = tiny_corpus(3, BridgeStyle::Coral, 6);
    let before = parameter_digest(&b.params);
    let tpl = PromptTemplate::new("a picture of [filewords], art by [name]").unwrap();

    let hn = hn_build(&b, "coral_shell_bridge", &[1.0, 2.0, 1.0], HnActivation::Identity, HnInit::Normal, &RngStream::new(6, 0)).unwrap();
    let hn_before = parameter_digest(&hn.params);
    let (hn_after, l) = hn_train(&b, &schedule(), &corpus, hn, &tpl, &quick(2), &RngStream::new(6, 1), |_, r| {
        assert!(r.grads.keys().all(|k| k.starts_with("hypernet.")));
    })
    .unwrap();
    assert_eq!(l.len(), 2);
    let changed = changed_parameters(&hn_before, &parameter_digest(&hn_after.params));
    assert!(!changed.is_empty());

    let lora = lora_attach(&b, "aki", 4, 4.0, 0.01, &RngStream::new(7, 0)).unwrap();
    let tpl = PromptTemplate::new("[filewords]").unwrap();
    let lora_before = parameter_digest(&lora.params);
    let (lora_after, _) = lora_train(&b, &schedule(), &corpus, lora, &tpl, &quick(2), &RngStream::new(7, 1), |_, _| {}).unwrap();
    let changed = changed_parameters(&lora_before, &parameter_digest(&lora_after.params));
    assert!(changed.iter().any(|k| k.ends_with(".B")));

    assert_eq!(parameter_digest(&b.params), before);
}

#[test]
fn dreambooth_without_prior_is_plain_finetuning() {
    let b = tiny_bundle();
    let instances = tiny_corpus(4, BridgeStyle::Coral, 8);
    let class = tiny_corpus(6, BridgeStyle::Arch, 9);
    let run = DreamboothRun {
        instance_token: "beike".into(),
        class_token: "bridge".into(),
        class_images: class,
        prior_weight: 0.0,
        train_text: false,
    };
    let rng = RngStream::new(10, 0);
    let mut a = b.clone();
    let la = db_train(&mut a, &schedule(), &instances, &run, &quick(3), &rng, |_, _| {}).unwrap();
    let mut p = b.clone();
    let lp = finetune_instances(&mut p, &schedule(), &instances, &run.instance_prompt(), &quick(3), &rng).unwrap();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lp.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a, p);

    let changed = changed_parameters(&parameter_digest(&b.params), &parameter_digest(&a.params));
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|k| k.starts_with("unet.")));

    let mut bad = run.clone();
    bad.instance_token = "not a token".into();
    assert!(db_train(&mut b.clone(), &schedule(), &instances, &bad, &quick(1), &rng, |_, _| {}).is_err());
}

#[test]
fn prior_term_adds_to_instance_term() {
    let b = tiny_bundle();
    let corpus = tiny_corpus(2, BridgeStyle::Coral, 11);
    let images = corpus.image_batch(&[0, 1]).unwrap();
    let tokens = vec![b.tokenize("a beike bridge").unwrap(); 2];
    let sel = TrainableSelector::dreambooth(&b, false);
    let rng = RngStream::new(12, 0);
    let loss = |w0: f64, w1: f64| {
        let mut bundle = b.clone();
        let terms = [
            DiffusionTerm { images: &images, tokens: &tokens, weight: w0 },
            DiffusionTerm { images: &images, tokens: &tokens, weight: w1 },
        ];
        let mut opt = Optimizer::new(1e-3).unwrap();
        train_step(&mut bundle, &mut AdapterSet::default(), &schedule(), &terms, &sel, &mut opt, &rng, 1)
            .unwrap()
            .loss
    };
    let (inst, prior, both) = (loss(1.0, 0.0), loss(0.0, 1.0), loss(1.0, 1.0));
    assert!(inst > 0.0 && prior > 0.0 && inst != prior);
    assert!((both - (inst + prior)).abs() <= 1e-6 * both);
}

#[test]
fn class_images_are_materialized_and_cached() {
    let b = tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("class");
    let rng = RngStream::new(13, 0);
    let c = db_generate_class_images(&b, &schedule(), "a bridge", 10, &fast_sampler(), &rng, Some(&cache)).unwrap();
    assert_eq!(c.len(), 10);
    let files: Vec<String> = std::fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".png")).count(), 10);
    assert_eq!(files.iter().filter(|f| f.ends_with(".txt")).count(), 10);
    assert!(c.pairs.iter().all(|p| p.caption == ["a bridge"]));
    let again = db_generate_class_images(&b, &schedule(), "a bridge", 10, &fast_sampler(), &rng, None).unwrap();
    let fresh = db_generate_class_images(&b, &schedule(), "a bridge", 10, &fast_sampler(), &RngStream::new(99, 0), Some(&cache)).unwrap();
    let reused = db_generate_class_images(&b, &schedule(), "a bridge", 10, &fast_sampler(), &RngStream::new(99, 0), Some(&cache)).unwrap();
    assert_eq!(c, again);
    assert_ne!(c, fresh);
    assert_eq!(fresh, reused);
    assert!(db_generate_class_images(&b, &schedule(), "a bridge", 0, &fast_sampler(), &rng, None).is_err());
    let mut untrained = b.clone();
    untrained.denoiser_steps = 0;
    assert!(matches!(
        db_generate_class_images(&untrained, &schedule(), "a bridge", 1, &fast_sampler(), &rng, None),
        Err(Error::State(_))
    ));
}

#[test]
fn pretraining_updates_only_the_denoiser() {
    let mut b = tiny_bundle();
    let corpus = tiny_corpus(4, BridgeStyle::Truss, 14);
    let before = b.clone();
    assert!(pretrain(&mut b, &schedule(), &corpus, &quick(0), 0.1, &RngStream::new(15, 0)).unwrap().is_empty());
    assert_eq!(b.params, before.params);
    let losses = pretrain(&mut b, &schedule(), &corpus, &quick(2), 0.5, &RngStream::new(15, 0)).unwrap();
    assert_eq!(losses.len(), 2);
    let changed = changed_parameters(&parameter_digest(&before.params), &parameter_digest(&b.params));
    assert_eq!(changed, b.component_names("unet"));

    let mut v = before.clone();
    pretrain_vae(&mut v, &corpus, &quick(2), 1e-4, &RngStream::new(16, 0)).unwrap();
    let changed = changed_parameters(&parameter_digest(&before.params), &parameter_digest(&v.params));
    assert_eq!(changed, v.component_names("vae"));
}

#[test]
fn zero_weight_trigger_matches_base_generation() {
    let b = tiny_bundle();
    let mut reg = AdapterRegistry::default();
    reg.add_lora(trained_lora(&b));
    reg.add_hypernet(hn_build(&b, "coral_shell_bridge", &[1.0, 2.0, 1.0], HnActivation::Identity, HnInit::Normal, &RngStream::new(17, 0)).unwrap());
    let rng = RngStream::new(18, 0);
    let s = schedule();
    let base = generate(&b, &s, "bridge,outdoors", &AdapterRegistry::default(), &fast_sampler(), 2, &rng).unwrap();
    let zero = generate(&b, &s, "bridge,outdoors,<lora:aki:0>,<hypernet:coral_shell_bridge:0>", &reg, &fast_sampler(), 2, &rng).unwrap();
    assert_eq!(base, zero);
    let full = generate(&b, &s, "bridge,outdoors,<lora:aki:1>", &reg, &fast_sampler(), 2, &rng).unwrap();
    assert_ne!(base, full);
    assert_eq!(full, generate(&b, &s, "bridge,outdoors,<lora:aki:1>", &reg, &fast_sampler(), 2, &rng).unwrap());
    match generate(&b, &s, "bridge, <lora:missing:1>", &reg, &fast_sampler(), 1, &rng) {
        Err(Error::UnknownAdapter { name, available }) => {
            assert_eq!(name, "lora:missing");
            assert_eq!(available, ["lora:aki", "hypernet:coral_shell_bridge"]);
        }
        other => panic!("expected unknown adapter, got {other:?}"),
    }
}

#[test]
fn loss_median_helper() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
}
