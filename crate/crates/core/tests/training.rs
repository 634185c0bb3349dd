// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training regimes on a miniature corpus: lineage checks, the freeze
//! contract, determinism, parameter accounting and the loss itself.

mod common;

use common::small_run_config;
use emotion_steer::checkpoint::{self, backbone_hash};
use emotion_steer::config::RunConfig;
use emotion_steer::model::{logits_for, ModelConfig, SequenceLayout, TransformerParams};
use emotion_steer::steer::{SteerBank, SteerInit};
use emotion_steer::synthdata::{gen_corpus, Corpus, CorpusKind};
use emotion_steer::tensor::Tensor;
use emotion_steer::training::{clip_grad_norm, compute_loss, layout_of, run_regime, Init, Regime, TrainedCheckpoint};
use emotion_steer::Error;
use proptest::prelude::*;

struct Fixture {
    config: RunConfig,
    pretraining: Corpus,
    emotional: Corpus,
    pretrain: TrainedCheckpoint,
    sft: TrainedCheckpoint,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = small_run_config();
        let spec = config.emotions.spec().unwrap();
        let pretraining = gen_corpus(&spec, &config.corpus, CorpusKind::Pretraining, config.seed).unwrap();
        let emotional = gen_corpus(&spec, &config.corpus, CorpusKind::Emotional, config.seed).unwrap();
        let pretrain = run_regime(
            &config.train_config(Regime::Pretrain),
            &pretraining,
            Init::Fresh(&config.model),
        )
        .unwrap()
        .checkpoint;
        let sft = run_regime(&config.train_config(Regime::Sft), &emotional, Init::From(&pretrain))
            .unwrap()
            .checkpoint;
        Fixture {
            config,
            pretraining,
            emotional,
            pretrain,
            sft,
        }
    })
}

fn train(regime: Regime, init: Init<'_>) -> emotion_steer::Result<TrainedCheckpoint> {
    let f = fixture();
    let corpus = match regime.corpus_kind() {
        CorpusKind::Pretraining => &f.pretraining,
        CorpusKind::Emotional => &f.emotional,
    };
    run_regime(&f.config.train_config(regime), corpus, init).map(|o| o.checkpoint)
}

#[test]
fn regime_and_init_must_agree() {
    let f = fixture();
    let emoshift = train(Regime::Emoshift, Init::From(&f.pretrain)).unwrap();
    let bad: Vec<(Regime, Init<'_>)> = vec![
        (Regime::Pretrain, Init::From(&f.pretrain)),
        (Regime::Sft, Init::Fresh(&f.config.model)),
        (Regime::Emoshift, Init::Fresh(&f.config.model)),
        (Regime::Emoshift, Init::From(&f.sft)),
        (Regime::Emoshift, Init::From(&emoshift)),
        (Regime::SftShift, Init::From(&f.pretrain)),
        (Regime::SftShift, Init::Fresh(&f.config.model)),
    ];
    for (regime, init) in bad {
        assert!(
            matches!(train(regime, init), Err(Error::Regime(_))),
            "{regime} {init:?}"
        );
    }
    // The corpus kind is checked as well.
    let wrong = run_regime(
        &f.config.train_config(Regime::Sft),
        &f.pretraining,
        Init::From(&f.pretrain),
    );
    assert!(wrong.is_err());
}

#[test]
fn steer_only_regimes_leave_the_backbone_untouched() {
    let f = fixture();
    for (regime, parent) in [(Regime::Emoshift, &f.pretrain), (Regime::SftShift, &f.sft)] {
        let before = backbone_hash(&parent.params);
        let out = train(regime, Init::From(parent)).unwrap();
        for ((name, a), (_, b)) in parent
            .params
            .weights
            .named()
            .into_iter()
            .zip(out.params.weights.named())
        {
            assert!(a.bit_eq(b), "{regime}: {name} changed");
        }
        assert_eq!(backbone_hash(&out.params), before);
        assert_eq!(out.meta.backbone_hash, before);
        let lineage = out.meta.lineage.as_ref().unwrap();
        assert_eq!(
            (lineage.regime, lineage.backbone_hash.as_str()),
            (parent.meta.regime, before.as_str())
        );
        let bank = out.steer.as_ref().unwrap();
        assert!(!bank.is_zero(), "{regime}: steering did not train");
    }
    assert_ne!(f.sft.meta.backbone_hash, f.pretrain.meta.backbone_hash);
}

#[test]
fn runs_are_bit_reproducible() {
    let f = fixture();
    let again = train(Regime::Pretrain, Init::Fresh(&f.config.model)).unwrap();
    assert_eq!(
        checkpoint::to_bytes(&again).unwrap(),
        checkpoint::to_bytes(&f.pretrain).unwrap()
    );
    let a = train(Regime::Emoshift, Init::From(&f.pretrain)).unwrap();
    let b = train(Regime::Emoshift, Init::From(&f.pretrain)).unwrap();
    assert_eq!(checkpoint::to_bytes(&a).unwrap(), checkpoint::to_bytes(&b).unwrap());

    let mut other = f.config.clone();
    other.seed += 1;
    let c = run_regime(
        &other.train_config(Regime::Emoshift),
        &f.emotional,
        Init::From(&f.pretrain),
    )
    .unwrap();
    assert_ne!(c.checkpoint.steer, a.steer, "the shuffle depends on the seed");
}

#[test]
fn trainable_parameter_counts() {
    let f = fixture();
    let (e, d) = (f.config.model.n_emotions, f.config.model.d_model);
    let emoshift = train(Regime::Emoshift, Init::From(&f.pretrain)).unwrap();
    assert_eq!(emoshift.meta.trainable_params, e * d * d);
    assert_eq!(f.sft.meta.trainable_params, f.sft.params.param_count());
    assert_eq!(f.pretrain.meta.trainable_params, f.pretrain.params.param_count());

    // Default configuration.
    let config = ModelConfig::default();
    let full = TransformerParams::<f32>::init(&config, 0).unwrap().param_count();
    let steer = SteerBank::<f32>::init(5, 64, 0.001, SteerInit::Zeros, 0)
        .unwrap()
        .param_count();
    assert_eq!((steer, full), (20_480, 214_500));
    assert!(10 * steer < full);
}

#[test]
fn every_regime_lowers_dev_loss() {
    let f = fixture();
    let emoshift = train(Regime::Emoshift, Init::From(&f.pretrain)).unwrap();
    let sft_shift = train(Regime::SftShift, Init::From(&f.sft)).unwrap();
    for ckpt in [&f.pretrain, &f.sft, &emoshift, &sft_shift] {
        let losses = &ckpt.meta.dev_losses;
        assert_eq!(losses.len(), ckpt.meta.train.epochs + 1);
        assert_eq!(ckpt.meta.train_losses.len(), ckpt.meta.train.epochs);
        assert!(losses.last() < losses.first(), "{}: {losses:?}", ckpt.meta.regime);
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let f = fixture();
    let layouts: Vec<SequenceLayout> = f.emotional.dev.iter().map(layout_of).collect();
    let v = f.config.model.output_vocab() as f64;
    let mut params = TransformerParams::<f64>::init(&f.config.model, 0).unwrap();
    let loss = compute_loss(&params, None, &layouts).unwrap();
    assert!((loss - v.ln()).abs() < 0.1, "{loss}");
    params.weights.head_w = Tensor::zeros(params.weights.head_w.shape());
    params.weights.head_b = Tensor::zeros(params.weights.head_b.shape());
    let loss = compute_loss(&params, None, &layouts).unwrap();
    assert!((loss - v.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn loss_matches_a_manual_recomputation() {
    let f = fixture();
    let params = f.pretrain.params.cast::<f64>();
    let layouts: Vec<SequenceLayout> = f.emotional.dev.iter().take(5).map(layout_of).collect();
    let mut total = 0.0;
    let mut count = 0;
    for layout in &layouts {
        let logits = logits_for(&params, layout, None).unwrap();
        let (targets, mask) = layout.targets(&params.config);
        for r in (0..layout.len()).filter(|&r| mask[r]) {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total -= (row[targets[r]].exp() / z).ln();
            count += 1;
        }
    }
    let loss = compute_loss(&params, None, &layouts).unwrap();
    assert!((loss - total / count as f64).abs() < 1e-10);

    let one = compute_loss(&params, None, &layouts[..1]).unwrap();
    let twice = compute_loss(&params, None, &[layouts[0].clone(), layouts[0].clone()]).unwrap();
    assert!((one - twice).abs() <= 1e-14, "{one} vs {twice}");

    let unsupervised = SequenceLayout::conditioning(0, 0, vec![1, 2]);
    assert!(compute_loss(&params, None, &[unsupervised]).is_err());
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(
        a in prop::collection::vec(-100f64..100.0, 1..20),
        b in prop::collection::vec(-100f64..100.0, 1..20),
        max_norm in 0.01f64..10.0,
    ) {
        let mut grads: Vec<Tensor<f64>> = vec![Tensor::from_f64(&[a.len()], &a).unwrap(), Tensor::from_f64(&[b.len()], &b).unwrap()];
        let before = clip_grad_norm(&mut grads, max_norm);
        let after = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max_norm + 1e-6);
        if before <= max_norm {
            prop_assert_eq!(grads[0].data(), &a[..]);
        }
    }
}
