//! Central finite-difference checks for every tape operation and for the full
//! model loss, including the masked-scene regularization term.

#![allow(dead_code)]

use attreg::diffcore::{Tape, Tensor, Var};
use attreg::model::{AttentionMode, Model, ModelConfig, QuestionVocab};
use attreg::synthdata::{generate_benchmark, soft_targets, DataConfig, Lexicon};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 10;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const H_MODEL: f64 = 1e-5;

pub type Check = Result<(), String>;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off in the
/// numeric estimate from dominating near-zero gradients.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Random entries bounded away from zero so that relu kinks are not crossed
/// by the finite-difference step.
fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type OpFn = fn(&mut Tape, &[Var]) -> Var;

/// Builds `op` over parameter leaves, reduces it to a scalar through fixed
/// random weights, and compares backward against central differences.
pub fn check_op(name: &str, seed: u64, shapes: &[&[usize]], op: OpFn) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let probe_seed = rng.random::<u64>();

    let eval = |inputs: &[Tensor], backward: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(probe_seed), &shape);
        let w = tape.constant(w).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        if !backward {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, grads)
    };

    let (_, grads) = eval(&inputs, true);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            let analytic = grads[i].data()[j];
            let err = rel_err(analytic, numeric, 1e-7);
            if err >= TOL {
                return Err(format!(
                    "{name} seed {seed} input {i} entry {j}: analytic {analytic} numeric {numeric} rel {err:.2e}"
                ));
            }
        }
    }
    Ok(())
}

/// Every tape operation with the input shapes it is checked at.
pub fn op_suite() -> Vec<(&'static str, Vec<&'static [usize]>, OpFn)> {
    vec![
        ("matmul", vec![&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        ("add", vec![&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", vec![&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", vec![&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap()),
        ("mul_self", vec![&[2, 3]], |t, v| t.mul(v[0], v[0]).unwrap()),
        ("add_row", vec![&[3, 4], &[1, 4]], |t, v| t.add_row(v[0], v[1]).unwrap()),
        ("affine", vec![&[2, 3]], |t, v| t.affine(v[0], -1.7, 0.3).unwrap()),
        ("scale", vec![&[2, 3]], |t, v| t.scale(v[0], 2.5).unwrap()),
        ("tanh", vec![&[3, 3]], |t, v| t.tanh(v[0]).unwrap()),
        ("sigmoid", vec![&[3, 3]], |t, v| t.sigmoid(v[0]).unwrap()),
        ("relu", vec![&[3, 3]], |t, v| t.relu(v[0]).unwrap()),
        ("concat", vec![&[2, 3], &[2, 2]], |t, v| t.concat(v[0], v[1]).unwrap()),
        ("repeat_rows", vec![&[1, 4]], |t, v| t.repeat_rows(v[0], 3).unwrap()),
        ("gather", vec![&[5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2]).unwrap()),
        ("row", vec![&[4, 3]], |t, v| t.row(v[0], 2).unwrap()),
        ("reshape", vec![&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        ("masked_softmax", vec![&[6, 1]], |t, v| {
            t.masked_softmax(v[0], &[true, false, true, true, false, true]).unwrap()
        }),
        ("weighted_sum", vec![&[5, 3], &[5, 1]], |t, v| {
            t.weighted_sum(v[0], v[1]).unwrap()
        }),
        ("softmax_pool", vec![&[5, 3], &[5, 1]], |t, v| {
            let a = t.masked_softmax(v[1], &[true, true, false, true, true]).unwrap();
            t.weighted_sum(v[0], a).unwrap()
        }),
        ("sum", vec![&[3, 4]], |t, v| t.sum(v[0]).unwrap()),
        ("mean", vec![&[3, 4]], |t, v| t.mean(v[0]).unwrap()),
        ("sigmoid_bce", vec![&[1, 5]], |t, v| {
            t.sigmoid_bce(v[0], &[1.0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]).unwrap()
        }),
    ]
}

pub fn check_op_by_name(name: &str) -> Check {
    let (_, shapes, op) = op_suite().into_iter().find(|(n, _, _)| *n == name).expect("known op");
    (0..SEEDS).try_for_each(|seed| check_op(name, seed, &shapes, op))
}

pub fn check_all_ops() -> Check {
    op_suite()
        .into_iter()
        .try_for_each(|(name, shapes, op)| (0..SEEDS).try_for_each(|seed| check_op(name, seed, &shapes, op)))
}

/// `L_vqa(original) + lambda * L_bce(masked scene, zero target)` against
/// central differences over a sample of entries from every parameter block
/// and every detection feature.
pub fn check_full_model(seed: u64) -> Check {
    let cfg = DataConfig {
        train_size: 40,
        val_size: 10,
        test_size: 10,
        ..DataConfig::default()
    };
    let small = ModelConfig {
        word_dim: 6,
        question_dim: 8,
        attention_dim: 8,
        fusion_dim: 8,
        classifier_hidden: 10,
        ..ModelConfig::default()
    };
    let lambda = 0.7;
    let bench = generate_benchmark(&cfg, seed).unwrap();
    let mut model = Model::init(
        small,
        QuestionVocab::from_lexicon(&Lexicon::builtin()),
        bench.train.answer_vocab.clone(),
        bench.train.feature_dim,
        seed,
    );
    // Zero-initialized biases put relu inputs exactly at the kink; check at a
    // generic point instead.
    let mut jitter = ChaCha8Rng::seed_from_u64(seed + 500);
    for block in &mut model.params {
        for x in block.value.data_mut() {
            *x += jitter.random_range(-0.3..0.3);
        }
    }
    let inst = &bench.train.instances[seed as usize % bench.train.len()];
    let scene = inst.scene.clone();
    let masked = scene.with_masked(&[1, 4]);
    let zeros = vec![0.0; model.answer_vocab.len()];
    let targets = soft_targets(&inst.qa.answers, &model.answer_vocab).unwrap();

    let loss_of = |model: &Model, features: Option<&[Vec<f64>]>, backward: bool| -> (f64, Vec<Tensor>, Vec<f64>) {
        let mut scene = scene.clone();
        if let Some(f) = features {
            for (d, row) in scene.detections.iter_mut().zip(f) {
                d.feature = row.clone();
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, backward).unwrap();
        let feats = model.scene_features(&mut tape, &scene, backward).unwrap();
        let tokens = &inst.qa.question_tokens;
        let vars = model
            .forward_with_features(
                &mut tape,
                &bound,
                feats,
                &scene.active_mask(),
                tokens,
                AttentionMode::Learned,
            )
            .unwrap();
        let l_vqa = tape.sigmoid_bce(vars.logits, &targets).unwrap();
        let mvars = model
            .forward(&mut tape, &bound, &masked, tokens, AttentionMode::Learned)
            .unwrap();
        let l_reg = tape.sigmoid_bce(mvars.logits, &zeros).unwrap();
        let reg = tape.scale(l_reg, lambda).unwrap();
        let total = tape.add(l_vqa, reg).unwrap();
        let value = tape.value(total).item();
        if !backward {
            return (value, Vec::new(), Vec::new());
        }
        tape.backward(total).unwrap();
        let grads = model.collect_grads(&tape, &bound);
        let fgrad = tape.grad(feats).map(|g| g.data().to_vec()).unwrap_or_default();
        (value, grads, fgrad)
    };

    // Loss values are O(10), so a step of H_MODEL resolves gradients down to
    // about 1e-9 absolute; hence the 1e-5 floor.
    let (_, grads, fgrad) = loss_of(&model, None, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (b, block) in model.params.iter().enumerate() {
        let n = block.value.len();
        for _ in 0..n.min(12) {
            let j = rng.random_range(0..n);
            let mut plus = model.clone();
            plus.params[b].value.data_mut()[j] += H_MODEL;
            let mut minus = model.clone();
            minus.params[b].value.data_mut()[j] -= H_MODEL;
            let numeric = (loss_of(&plus, None, false).0 - loss_of(&minus, None, false).0) / (2.0 * H_MODEL);
            let analytic = grads[b].data()[j];
            if rel_err(analytic, numeric, 1e-5) >= TOL {
                return Err(format!(
                    "model seed {seed} block {} entry {j}: analytic {analytic} numeric {numeric}",
                    block.name
                ));
            }
        }
    }

    let base: Vec<Vec<f64>> = scene.detections.iter().map(|d| d.feature.clone()).collect();
    let d = scene.feature_dim();
    for i in 0..scene.len() {
        for _ in 0..3 {
            let j = rng.random_range(0..d);
            let shifted = |eps: f64| {
                let mut f = base.clone();
                f[i][j] += eps;
                f
            };
            let numeric = (loss_of(&model, Some(&shifted(H_MODEL)), false).0
                - loss_of(&model, Some(&shifted(-H_MODEL)), false).0)
                / (2.0 * H_MODEL);
            let analytic = fgrad[i * d + j];
            if rel_err(analytic, numeric, 1e-5) >= TOL {
                return Err(format!(
                    "model seed {seed} feature ({i},{j}): analytic {analytic} numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}
