use super::*;
use crate::diffcore::{adam_step, AdamConfig, AdamState};
use crate::synthdata::{generate_benchmark, DataConfig, Instance, ObjectDetection, QuestionCategory};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn small_data() -> crate::synthdata::Benchmark {
    let cfg = DataConfig {
        train_size: 40,
        val_size: 10,
        test_size: 10,
        ..DataConfig::default()
    };
    generate_benchmark(&cfg, 5).unwrap()
}

fn model_for(split: &crate::synthdata::DatasetSplit, seed: u64) -> Model {
    Model::init(
        ModelConfig::default(),
        QuestionVocab::from_lexicon(&Lexicon::builtin()),
        split.answer_vocab.clone(),
        split.feature_dim,
        seed,
    )
}

fn scene_from(features: Vec<Vec<f64>>) -> Scene {
    Scene {
        scene_id: 0,
        detections: features
            .into_iter()
            .enumerate()
            .map(|(id, feature)| ObjectDetection {
                id,
                category: "ball".into(),
                attributes: vec![],
                feature,
                bbox: [0.1, 0.1, 0.2, 0.2],
                active: true,
            })
            .collect(),
    }
}

fn encode(model: &Model, tokens: &[String]) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).unwrap();
    let q = model.encode_question(&mut tape, &bound, tokens).unwrap();
    tape.value(q).data().to_vec()
}

#[test]
fn encoder_is_deterministic_and_truncates() {
    let b = small_data();
    let model = model_for(&b.train, 1);
    let q = toks("what color is the ball");
    assert_eq!(encode(&model, &q), encode(&model, &q));

    let long: Vec<String> = toks("is the ball red is the ball red is the ball red is the ball red");
    assert_eq!(long.len(), 16);
    assert_eq!(encode(&model, &long), encode(&model, &long[..14]));
    assert_ne!(encode(&model, &long), encode(&model, &long[..13]));
    assert_eq!(encode(&model, &[]), vec![0.0; 32]);
}

#[test]
fn encoder_rejects_unknown_tokens() {
    let b = small_data();
    let model = model_for(&b.train, 1);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).unwrap();
    let err = model
        .encode_question(&mut tape, &bound, &toks("what is a zebra"))
        .unwrap_err();
    assert!(matches!(err, Error::UnknownToken(t) if t == "zebra"));
}

#[test]
fn identical_features_give_uniform_attention() {
    let b = small_data();
    let model = model_for(&b.train, 2);
    let scene = scene_from(vec![vec![0.3; 32]; 8]);
    let out = model
        .infer(&scene, &toks("what color is the ball"), AttentionMode::Learned)
        .unwrap();
    for a in &out.attention {
        assert!((a - 0.125).abs() < 1e-12);
    }
}

#[test]
fn masked_detection_gets_zero_attention() {
    let b = small_data();
    let model = model_for(&b.train, 3);
    let inst = &b.train.instances[0];
    let masked = inst.scene.with_masked(&[4]);
    let out = model
        .infer(&masked, &inst.qa.question_tokens, AttentionMode::Learned)
        .unwrap();
    assert_eq!(out.attention[4], 0.0);
    assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let full = model
        .infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)
        .unwrap();
    // Renormalized: ratios between surviving weights are unchanged.
    let r_full = full.attention[0] / full.attention[1];
    let r_masked = out.attention[0] / out.attention[1];
    assert!((r_full - r_masked).abs() < 1e-9 * r_full.abs().max(1.0));
}

#[test]
fn all_masked_scene_is_rejected() {
    let b = small_data();
    let model = model_for(&b.train, 3);
    let inst = &b.train.instances[0];
    let ids: Vec<usize> = (0..8).collect();
    let err = model.infer(
        &inst.scene.with_masked(&ids),
        &inst.qa.question_tokens,
        AttentionMode::Learned,
    );
    assert!(matches!(err, Err(Error::NoActiveDetections)));
}

#[test]
fn fuse_cases() {
    let b = small_data();
    let model = model_for(&b.train, 4);
    let mut tape = Tape::new();
    let v = tape
        .constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 7.0, 7.0]).unwrap())
        .unwrap();
    let one_hot = tape.constant(Tensor::row(vec![0.0, 1.0, 0.0])).unwrap();
    let fused = model.fuse(&mut tape, v, one_hot).unwrap();
    assert_eq!(tape.value(fused).data(), &[-3.0, 0.5]);

    let same = tape
        .constant(Tensor::matrix(2, 2, vec![0.4, -1.0, 0.4, -1.0]).unwrap())
        .unwrap();
    let half = tape.constant(Tensor::row(vec![0.5, 0.5])).unwrap();
    let fused = model.fuse(&mut tape, same, half).unwrap();
    assert_eq!(tape.value(fused).data(), &[0.4, -1.0]);

    let a = tape.constant(Tensor::row(vec![0.25, 0.75, 0.0])).unwrap();
    let with_zero = model.fuse(&mut tape, v, a).unwrap();
    let v2 = tape
        .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap())
        .unwrap();
    let a2 = tape.constant(Tensor::row(vec![0.25, 0.75])).unwrap();
    let without = model.fuse(&mut tape, v2, a2).unwrap();
    for (x, y) in tape.value(with_zero).data().iter().zip(tape.value(without).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_predict_one_half_and_loss_is_ln2_per_answer() {
    let b = small_data();
    let mut model = model_for(&b.train, 5);
    for p in &mut model.params {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let inst = &b.train.instances[0];
    let out = model
        .infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)
        .unwrap();
    assert!(out.probs.iter().all(|&p| p == 0.5));

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).unwrap();
    let vars = model
        .forward(
            &mut tape,
            &bound,
            &inst.scene,
            &inst.qa.question_tokens,
            AttentionMode::Learned,
        )
        .unwrap();
    let n = model.answer_vocab.len();
    let loss = tape.sigmoid_bce(vars.logits, &vec![0.0; n]).unwrap();
    assert!((tape.value(loss).item() - n as f64 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_weight_loss_over_twenty_answers() {
    let vocab = AnswerVocab::new((0..20).map(|i| format!("a{i}")).collect());
    let mut model = Model::init(
        ModelConfig::default(),
        QuestionVocab::from_lexicon(&Lexicon::builtin()),
        vocab,
        4,
        0,
    );
    for p in &mut model.params {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let scene = scene_from(vec![vec![0.1, 0.2, 0.3, 0.4]; 3]);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).unwrap();
    let vars = model
        .forward(
            &mut tape,
            &bound,
            &scene,
            &toks("what color is the ball"),
            AttentionMode::Learned,
        )
        .unwrap();
    let loss = tape.sigmoid_bce(vars.logits, &[0.0; 20]).unwrap();
    assert!((tape.value(loss).item() - 20.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn probabilities_lie_strictly_inside_unit_interval() {
    let b = small_data();
    let model = model_for(&b.train, 6);
    for inst in &b.train.instances {
        let out = model
            .infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)
            .unwrap();
        assert!(out.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

/// Independent forward pass over plain vectors for a 2-d configuration.
#[test]
fn logits_match_hand_rolled_forward() {
    let config = ModelConfig {
        word_dim: 2,
        question_dim: 2,
        attention_dim: 2,
        fusion_dim: 2,
        classifier_hidden: 2,
        max_question_len: 14,
    };
    let vocab = AnswerVocab::new(vec!["x".into(), "y".into()]);
    let model = Model::init(config, QuestionVocab::from_lexicon(&Lexicon::builtin()), vocab, 2, 17);
    let scene = scene_from(vec![vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 0.8]]);
    let tokens = toks("what color is the cup");
    let out = model.infer(&scene, &tokens, AttentionMode::Learned).unwrap();

    let blk = |b: Block| model.block(b).value.clone();
    let vecmat = |x: &[f64], m: &Tensor| -> Vec<f64> {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| x[i] * m.get(i, j)).sum())
            .collect()
    };
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };

    let emb = blk(Block::WordEmbeddings);
    let mut h = vec![0.0, 0.0];
    for id in model.question_vocab.encode(&tokens).unwrap() {
        let x = &emb.data()[id * 2..id * 2 + 2];
        let r: Vec<f64> = add(
            &add(
                &vecmat(x, &blk(Block::GruInputReset)),
                &vecmat(&h, &blk(Block::GruHiddenReset)),
            ),
            blk(Block::GruBiasReset).data(),
        )
        .into_iter()
        .map(sig)
        .collect();
        let z: Vec<f64> = add(
            &add(
                &vecmat(x, &blk(Block::GruInputUpdate)),
                &vecmat(&h, &blk(Block::GruHiddenUpdate)),
            ),
            blk(Block::GruBiasUpdate).data(),
        )
        .into_iter()
        .map(sig)
        .collect();
        let hn = add(
            &vecmat(&h, &blk(Block::GruHiddenNew)),
            blk(Block::GruBiasHiddenNew).data(),
        );
        let xn = add(&vecmat(x, &blk(Block::GruInputNew)), blk(Block::GruBiasInputNew).data());
        let n: Vec<f64> = (0..2).map(|j| (xn[j] + r[j] * hn[j]).tanh()).collect();
        h = (0..2).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
    }
    assert!(h.iter().zip(&out.question).all(|(a, b)| (a - b).abs() < 1e-12));

    let scores: Vec<f64> = scene
        .detections
        .iter()
        .map(|d| {
            let joint: Vec<f64> = d.feature.iter().chain(h.iter()).copied().collect();
            let hid: Vec<f64> = add(
                &vecmat(&joint, &blk(Block::AttnProjection)),
                blk(Block::AttnBias).data(),
            )
            .into_iter()
            .map(f64::tanh)
            .collect();
            vecmat(&hid, &blk(Block::AttnVector))[0]
        })
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let tot: f64 = ex.iter().sum();
    let alpha: Vec<f64> = ex.iter().map(|e| e / tot).collect();
    let vhat: Vec<f64> = (0..2)
        .map(|j| scene.detections.iter().zip(&alpha).map(|(d, a)| a * d.feature[j]).sum())
        .collect();
    let hv = relu(add(
        &vecmat(&vhat, &blk(Block::PredVisual)),
        blk(Block::PredVisualBias).data(),
    ));
    let hq = relu(add(
        &vecmat(&h, &blk(Block::PredQuestion)),
        blk(Block::PredQuestionBias).data(),
    ));
    let joint: Vec<f64> = hv.iter().zip(&hq).map(|(a, b)| a * b).collect();
    let h1 = relu(add(
        &vecmat(&joint, &blk(Block::PredHidden)),
        blk(Block::PredHiddenBias).data(),
    ));
    let logits = add(&vecmat(&h1, &blk(Block::PredOutput)), blk(Block::PredOutputBias).data());
    for (a, b) in logits.iter().zip(&out.logits) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn loss_decreases_when_overfitting_twenty_instances() {
    let b = small_data();
    let mut model = model_for(&b.train, 8);
    let batch: Vec<(&Scene, &QAInstance)> = b.train.instances[..20].iter().map(|i| (&i.scene, &i.qa)).collect();
    let mut state = AdamState::new();
    let config = AdamConfig::with_lr(1e-2);
    let (first, _) = model.loss_gradients(&batch, AttentionMode::Learned).unwrap();
    let mut last = first;
    for _ in 0..50 {
        let (loss, grads) = model.loss_gradients(&batch, AttentionMode::Learned).unwrap();
        adam_step(&mut model.params, &grads, &mut state, &config).unwrap();
        last = loss;
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn attention_is_permutation_equivariant() {
    let b = small_data();
    let model = model_for(&b.train, 9);
    let inst = &b.train.instances[3];
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let mut permuted = inst.scene.clone();
    permuted.detections = perm
        .iter()
        .enumerate()
        .map(|(new, &old)| ObjectDetection {
            id: new,
            ..inst.scene.detections[old].clone()
        })
        .collect();
    let a = model
        .infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)
        .unwrap();
    let p = model
        .infer(&permuted, &inst.qa.question_tokens, AttentionMode::Learned)
        .unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!((p.attention[new] - a.attention[old]).abs() < 1e-9);
    }
    for (x, y) in a.probs.iter().zip(&p.probs) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn masked_detection_receives_exactly_zero_feature_gradient() {
    let b = small_data();
    let model = model_for(&b.train, 10);
    let inst = &b.train.instances[1];
    let scene = inst.scene.with_masked(&[2, 5]);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true).unwrap();
    let features = model.scene_features(&mut tape, &scene, true).unwrap();
    let vars = model
        .forward_with_features(
            &mut tape,
            &bound,
            features,
            &scene.active_mask(),
            &inst.qa.question_tokens,
            AttentionMode::Learned,
        )
        .unwrap();
    let targets = soft_targets(&inst.qa.answers, &model.answer_vocab).unwrap();
    let loss = tape.sigmoid_bce(vars.logits, &targets).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(features).unwrap();
    let d = scene.feature_dim();
    for row in [2usize, 5] {
        assert!(g.data()[row * d..(row + 1) * d].iter().all(|&x| x == 0.0));
    }
    assert!(g.data()[0..d].iter().any(|&x| x != 0.0));
}

#[test]
fn uniform_attention_switch_still_predicts() {
    let b = small_data();
    let model = model_for(&b.train, 11);
    let inst: &Instance = &b.train.instances[0];
    let scene = inst.scene.with_masked(&[0]);
    let out = model
        .infer(&scene, &inst.qa.question_tokens, AttentionMode::Uniform)
        .unwrap();
    assert_eq!(out.attention[0], 0.0);
    assert!(out.attention[1..].iter().all(|&a| (a - 1.0 / 7.0).abs() < 1e-15));
    assert!(out.probs.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn forward_loss_is_deterministic() {
    let b = small_data();
    let model = model_for(&b.train, 12);
    let inst = &b.train.instances[2];
    let (o1, l1) = model
        .vqa_forward_loss(&inst.scene, &inst.qa, AttentionMode::Learned)
        .unwrap();
    let (o2, l2) = model
        .vqa_forward_loss(&inst.scene, &inst.qa, AttentionMode::Learned)
        .unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(o1, o2);
    assert_eq!(inst.qa.question_category, inst.qa.question_category);
    let _ = QuestionCategory::ALL;
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let b = small_data();
    let model = model_for(&b.train, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &model).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.fingerprint(), model.fingerprint());

    let mut ckpt = model.to_checkpoint();
    ckpt.config.question_dim = 31;
    assert!(Model::from_checkpoint(ckpt).is_err());
    let mut ckpt = model.to_checkpoint();
    ckpt.config_hash = "00".into();
    assert!(Model::from_checkpoint(ckpt).is_err());
}
