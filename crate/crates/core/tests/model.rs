use dcgnet::checkpoint::{Checkpoint, RunMeta};
use dcgnet::config::{LossWeights, ModelConfig, TrainConfig};
use dcgnet::dataset::Dataset;
use dcgnet::gradcheck::{relative_error, tiny_fixture};
use dcgnet::losses::LossBreakdown;
use dcgnet::model::DcgNet;
use dcgnet::schema::{ConceptDictionary, ConceptSpec};
use dcgnet::synth::{generate, SyntheticSpec};
use dcgnet::train::{build_model, evaluate, train, LogRecord};
use dcgnet::{Error, Tape, Tensor};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        values_per_concept: vec![2, 3, 2],
        num_patches: 6,
        patch_dim: 8,
        samples: 160,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        text_dim: 16,
        embed_dim: 16,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn small_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn diag_logits(model: &DcgNet, patches: &Tensor) -> Vec<f64> {
    model.predict([patches]).unwrap().remove(0).logits
}

#[test]
fn zero_head_weights_give_bias_logits() {
    let (mut model, batch, _) = tiny_fixture(1).unwrap();
    let (w, b) = (model.diag_w, model.diag_b);
    model.params_mut().get_mut(w).tensor.data_mut().fill(0.0);
    model.params_mut().get_mut(b).tensor.data_mut().copy_from_slice(&[0.3, -1.2, 2.5]);
    for s in &batch {
        assert_eq!(diag_logits(&model, &s.patches), vec![0.3, -1.2, 2.5]);
    }
}

#[test]
fn identical_inputs_give_identical_logits() {
    let (model, batch, _) = tiny_fixture(2).unwrap();
    let p = &batch[0].patches;
    let preds = model.predict([p, &batch[1].patches, p]).unwrap();
    assert_eq!(preds[0], preds[2]);
    assert_ne!(preds[0].logits, preds[1].logits);
}

#[test]
fn bottleneck_width_is_concepts_times_embed() {
    let (model, batch, _) = tiny_fixture(3).unwrap();
    let mut tape = Tape::new();
    let pass = model.begin(&mut tape, false).unwrap();
    let out = model.forward(&mut tape, &pass, &batch[0].patches).unwrap();
    let k = model.dictionary().num_concepts();
    assert_eq!(tape.value(out.features).shape(), &[1, k * model.config().embed_dim]);
    assert_eq!(tape.value(out.logits).shape(), &[1, model.num_classes()]);
}

#[test]
fn replaying_the_head_from_refined_states_is_exact() {
    let data = generate(&small_spec(4)).unwrap();
    let model = build_model(&data, &small_model_config(), 9).unwrap();
    let preds = model.predict(data.test.iter().map(|s| &s.patches)).unwrap();
    for p in &preds {
        assert_eq!(model.replay_head(&p.refined).unwrap(), p.logits);
    }
    // Different refined states replay to different logits: the head reads them.
    let mut shifted = preds[0].refined.clone();
    shifted.data_mut()[0] += 1.0;
    assert_ne!(model.replay_head(&shifted).unwrap(), preds[0].logits);
}

#[test]
fn wrong_patch_grid_is_rejected() {
    let (model, _, _) = tiny_fixture(1).unwrap();
    let err = model.predict([&Tensor::zeros(&[5, 3])]).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let (model, batch, ctx) = tiny_fixture(5).unwrap();
    let refs: Vec<_> = batch.iter().collect();
    let grads = |weights: LossWeights| -> (Vec<f64>, LossBreakdown) {
        let mut c = ctx.clone();
        c.weights = weights;
        let mut tape = Tape::new();
        let pass = model.begin(&mut tape, true).unwrap();
        let (total, parts, _) = model.objective(&mut tape, &pass, &refs, &c, None).unwrap();
        tape.backward(total).unwrap();
        let mut m = model.clone();
        m.params_mut().zero_grads();
        m.params_mut().accumulate_grads(&tape, &pass.bound).unwrap();
        let g = m.params().iter().flat_map(|(_, p)| p.tensor.grad().unwrap().to_vec()).collect();
        (g, parts)
    };
    let one = |i: usize| {
        let mut w = [0.0; 4];
        w[i] = 1.0;
        LossWeights {
            align: w[0],
            concept: w[1],
            cons: w[2],
            diag: w[3],
        }
    };
    let (full, parts) = grads(LossWeights::default());
    let pieces: Vec<Vec<f64>> = (0..4).map(|i| grads(one(i)).0).collect();
    for (j, &g) in full.iter().enumerate() {
        let sum: f64 = pieces.iter().map(|p| p[j]).sum();
        assert!(relative_error(g, sum, 1e-12) < 1e-9, "entry {j}: {g} vs {sum}");
    }
    assert_eq!(parts.total, parts.align + parts.concept + parts.cons + parts.diag);
    for v in [parts.align, parts.concept, parts.cons, parts.diag] {
        assert!(v >= 0.0);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (model, batch, _) = tiny_fixture(6).unwrap();
    let ckpt = Checkpoint {
        model,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        meta: RunMeta {
            seed: 6,
            epoch: 3,
            val_diag_f1: Some(0.75),
        },
    };
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Some(ckpt.model.dictionary())).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta, ckpt.meta);
    for s in &batch {
        assert_eq!(
            back.model.predict([&s.patches]).unwrap(),
            ckpt.model.predict([&s.patches]).unwrap()
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path, None).unwrap().to_bytes(), bytes);
}

#[test]
fn checkpoint_refuses_other_schema() {
    let (model, _, _) = tiny_fixture(7).unwrap();
    let bytes = Checkpoint {
        model,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        meta: RunMeta::default(),
    }
    .to_bytes();
    let other = ConceptDictionary::new(
        vec![
            ConceptSpec::new("shape", &["round", "oval"]),
            ConceptSpec::new("colour", &["pale", "dark"]),
        ],
        vec![],
    )
    .unwrap();
    let err = Checkpoint::from_bytes(&bytes, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, None), Err(Error::Checkpoint(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3], None),
        Err(Error::Checkpoint(_))
    ));
}

fn run(data: &Dataset, seed: u64, cfg: &TrainConfig) -> (Vec<String>, Vec<u8>, dcgnet::Result<()>) {
    let mut model = build_model(data, &small_model_config(), seed).unwrap();
    let mut log = Vec::new();
    let res = train(&mut model, data, cfg, &mut |r: &LogRecord| {
        log.push(serde_json::to_string(r).unwrap());
        Ok(())
    });
    let ckpt = Checkpoint {
        model,
        class_names: data.manifest.class_names.clone(),
        meta: RunMeta::default(),
    };
    (log, ckpt.to_bytes(), res.map(|_| ()))
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = generate(&small_spec(11)).unwrap();
    let untrained = evaluate(&build_model(&data, &small_model_config(), 1).unwrap(), &data.val).unwrap();
    let cfg = small_train_config(4);
    let (log_a, ckpt_a, res) = run(&data, 1, &cfg);
    res.unwrap();
    let (log_b, ckpt_b, _) = run(&data, 1, &cfg);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    let (log_c, _, _) = run(&data, 2, &cfg);
    assert_ne!(log_a, log_c);

    let steps = log_a.iter().filter(|l| l.contains("\"kind\":\"step\"")).count();
    assert_eq!(steps, 4 * data.train.len().div_ceil(16));
    let trained = Checkpoint::from_bytes(&ckpt_a, None).unwrap().model;
    let val = evaluate(&trained, &data.val).unwrap();
    assert!(val.diag_f1 > untrained.diag_f1, "{val:?} vs {untrained:?}");
}

#[test]
fn restored_parameters_come_from_best_validation_epoch() {
    let data = generate(&small_spec(12)).unwrap();
    let mut model = build_model(&data, &small_model_config(), 3).unwrap();
    let mut epochs = Vec::new();
    let report = train(&mut model, &data, &small_train_config(5), &mut |r: &LogRecord| {
        if let LogRecord::Epoch { epoch, val, .. } = r {
            epochs.push((*epoch, val.diag_f1));
        }
        Ok(())
    })
    .unwrap();
    let best = epochs.iter().fold((0, f64::NEG_INFINITY), |acc, &(e, f)| if f > acc.1 { (e, f) } else { acc });
    assert_eq!(report.best_epoch, best.0);
    assert_eq!(evaluate(&model, &data.val).unwrap().diag_f1, best.1);
}

#[test]
fn huge_learning_rate_diverges_and_restores() {
    let data = generate(&small_spec(13)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e3,
        warmup_fraction: 0.0,
        ..small_train_config(3)
    };
    let mut model = build_model(&data, &small_model_config(), 1).unwrap();
    let before = model.params().clone();
    let mut records = Vec::new();
    let err = train(&mut model, &data, &cfg, &mut |r: &LogRecord| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let Some(LogRecord::Abort { restored_epoch, .. }) = records.last() else {
        panic!("last record should be an abort: {:?}", records.last());
    };
    for ((_, a), (_, b)) in model.params().iter().zip(before.iter()) {
        if *restored_epoch == 0 {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        assert!(a.tensor.all_finite());
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let spec = SyntheticSpec {
        samples: 2000,
        ..small_spec(14)
    };
    let data = generate(&spec).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let model = build_model(&data, &small_model_config(), seed).unwrap();
        accs.push(evaluate(&model, &data.train).unwrap().diag_acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() < 0.1, "{accs:?}");
}
