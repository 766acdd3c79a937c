//! Bottom-up/top-down VQA backbone.
//!
//! A GRU encodes the question into `q`; each active detection is scored with
//! `s_i = w_a . tanh(W [v_i; q] + b)`; the masked softmax of the scores pools
//! the detection features into `v_hat`; a two-layer classifier over the
//! product of projected `v_hat` and projected `q` yields per-answer logits.

mod checkpoint;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, ParamBlock, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthdata::{soft_targets, AnswerVocab, Lexicon, QAInstance, Scene, MAX_QUESTION_LEN};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub question_dim: usize,
    pub attention_dim: usize,
    pub fusion_dim: usize,
    pub classifier_hidden: usize,
    pub max_question_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 16,
            question_dim: 32,
            attention_dim: 32,
            fusion_dim: 32,
            classifier_hidden: 64,
            max_question_len: MAX_QUESTION_LEN,
        }
    }
}

/// How detection weights are produced in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Uniform weights over active detections (attention module removed).
    Uniform,
}

/// Indices into [`Model::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Block {
    WordEmbeddings,
    GruInputReset,
    GruInputUpdate,
    GruInputNew,
    GruHiddenReset,
    GruHiddenUpdate,
    GruHiddenNew,
    GruBiasReset,
    GruBiasUpdate,
    GruBiasInputNew,
    GruBiasHiddenNew,
    AttnProjection,
    AttnBias,
    AttnVector,
    PredVisual,
    PredVisualBias,
    PredQuestion,
    PredQuestionBias,
    PredHidden,
    PredHiddenBias,
    PredOutput,
    PredOutputBias,
}

/// Word embeddings start with enough spread that question encodings of
/// different nouns separate before the attention has learned anything.
pub const EMBEDDING_STD: f64 = 0.9;

/// Xavier gain for the attention projection and scoring vector; larger
/// initial scores shorten the plateau where attention stays near uniform.
pub const ATTENTION_GAIN: f64 = 3.0;

const BLOCK_NAMES: [&str; 22] = [
    "word_embeddings",
    "gru.w_ir",
    "gru.w_iz",
    "gru.w_in",
    "gru.w_hr",
    "gru.w_hz",
    "gru.w_hn",
    "gru.b_r",
    "gru.b_z",
    "gru.b_in",
    "gru.b_hn",
    "attn.w",
    "attn.b",
    "attn.w_a",
    "pred.w_v",
    "pred.b_v",
    "pred.w_q",
    "pred.b_q",
    "pred.w_1",
    "pred.b_1",
    "pred.w_2",
    "pred.b_2",
];

/// Token-to-index map for question words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct QuestionVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl QuestionVocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        Self::new(lexicon.tokens().to_vec())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.index.get(t).copied().ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }
}

impl From<Vec<String>> for QuestionVocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<QuestionVocab> for Vec<String> {
    fn from(v: QuestionVocab) -> Self {
        v.tokens
    }
}

/// All trainable parameters plus the vocabularies they are tied to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub question_vocab: QuestionVocab,
    pub answer_vocab: AnswerVocab,
    pub params: Vec<ParamBlock>,
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, block: Block) -> Var {
        self.vars[block as usize]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub question: Var,
    pub scores: Var,
    pub attention: Var,
    pub fused: Var,
    pub logits: Var,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub question: Vec<f64>,
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ModelOutput {
    pub fn from_tape(tape: &Tape, vars: &ForwardVars) -> Self {
        let logits = tape.value(vars.logits).data().to_vec();
        Self {
            question: tape.value(vars.question).data().to_vec(),
            scores: tape.value(vars.scores).data().to_vec(),
            attention: tape.value(vars.attention).data().to_vec(),
            fused: tape.value(vars.fused).data().to_vec(),
            probs: logits.iter().map(|&x| sigmoid(x)).collect(),
            logits,
        }
    }

    /// Index of the highest score; ties go to the lower index.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh parameters: Xavier-uniform matrices (attention matrices scaled
    /// by [`ATTENTION_GAIN`]), zero biases, normal embeddings.
    pub fn init(
        config: ModelConfig,
        question_vocab: QuestionVocab,
        answer_vocab: AnswerVocab,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::block_shapes(&config, question_vocab.len(), answer_vocab.len(), feature_dim);
        let emb = Normal::new(0.0, EMBEDDING_STD).expect("valid normal");
        let params = BLOCK_NAMES
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if i == Block::WordEmbeddings as usize {
                    (0..n).map(|_| emb.sample(&mut rng)).collect()
                } else if shape[0] == 1 {
                    vec![0.0; n]
                } else {
                    let gain = if i == Block::AttnProjection as usize || i == Block::AttnVector as usize {
                        ATTENTION_GAIN
                    } else {
                        1.0
                    };
                    let limit = gain * (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                };
                ParamBlock::new(*name, Tensor::new(shape, data).expect("consistent shape"))
            })
            .collect();
        Self {
            config,
            question_vocab,
            answer_vocab,
            params,
        }
    }

    fn block_shapes(config: &ModelConfig, vocab: usize, answers: usize, feature_dim: usize) -> Vec<Vec<usize>> {
        let (w, q, h, f, c) = (
            config.word_dim,
            config.question_dim,
            config.attention_dim,
            config.fusion_dim,
            config.classifier_hidden,
        );
        vec![
            vec![vocab, w],
            vec![w, q],
            vec![w, q],
            vec![w, q],
            vec![q, q],
            vec![q, q],
            vec![q, q],
            vec![1, q],
            vec![1, q],
            vec![1, q],
            vec![1, q],
            vec![feature_dim + q, h],
            vec![1, h],
            vec![h, 1],
            vec![feature_dim, f],
            vec![1, f],
            vec![q, f],
            vec![1, f],
            vec![f, c],
            vec![1, c],
            vec![c, answers],
            vec![1, answers],
        ]
    }

    pub fn feature_dim(&self) -> usize {
        self.params[Block::AttnProjection as usize].value.rows() - self.config.question_dim
    }

    pub fn block(&self, block: Block) -> &ParamBlock {
        &self.params[block as usize]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut ParamBlock {
        &mut self.params[block as usize]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter block on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars })
    }

    /// Final GRU state over the first `max_question_len` tokens; zeros when empty.
    pub fn encode_question(&self, tape: &mut Tape, bound: &BoundParams, tokens: &[String]) -> Result<Var> {
        let n = tokens.len().min(self.config.max_question_len);
        let ids = self.question_vocab.encode(&tokens[..n])?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.config.question_dim]))?;
        if ids.is_empty() {
            return Ok(h);
        }
        let p = |b: Block| bound.get(b);
        let embedded = tape.gather(p(Block::WordEmbeddings), &ids)?;
        for t in 0..ids.len() {
            let x = tape.row(embedded, t)?;
            let gate = |tape: &mut Tape, wi: Block, wh: Block, b: Block, h: Var| -> Result<Var> {
                let xi = tape.matmul(x, p(wi))?;
                let hh = tape.matmul(h, p(wh))?;
                let sum = tape.add(xi, hh)?;
                Ok(tape.add(sum, p(b))?)
            };
            let r_pre = gate(
                tape,
                Block::GruInputReset,
                Block::GruHiddenReset,
                Block::GruBiasReset,
                h,
            )?;
            let r = tape.sigmoid(r_pre)?;
            let z_pre = gate(
                tape,
                Block::GruInputUpdate,
                Block::GruHiddenUpdate,
                Block::GruBiasUpdate,
                h,
            )?;
            let z = tape.sigmoid(z_pre)?;
            let xn = tape.matmul(x, p(Block::GruInputNew))?;
            let xn = tape.add(xn, p(Block::GruBiasInputNew))?;
            let hn = tape.matmul(h, p(Block::GruHiddenNew))?;
            let hn = tape.add(hn, p(Block::GruBiasHiddenNew))?;
            let gated = tape.mul(r, hn)?;
            let n_pre = tape.add(xn, gated)?;
            let cand = tape.tanh(n_pre)?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = tape.sub(h, cand)?;
            let keep = tape.mul(z, diff)?;
            h = tape.add(cand, keep)?;
        }
        Ok(h)
    }

    /// Attention scores and weights over the active detections.
    pub fn attend(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        mask: &[bool],
        question: Var,
        mode: AttentionMode,
    ) -> Result<(Var, Var)> {
        let k = mask.len();
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::NoActiveDetections);
        }
        let repeated = tape.repeat_rows(question, k)?;
        let joint = tape.concat(features, repeated)?;
        let proj = tape.matmul(joint, bound.get(Block::AttnProjection))?;
        let proj = tape.add_row(proj, bound.get(Block::AttnBias))?;
        let hidden = tape.tanh(proj)?;
        let scores = tape.matmul(hidden, bound.get(Block::AttnVector))?;
        let scores = tape.reshape(scores, &[1, k])?;
        let attention = match mode {
            AttentionMode::Learned => tape.masked_softmax(scores, mask)?,
            AttentionMode::Uniform => {
                let w = 1.0 / active as f64;
                let uniform = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
                tape.constant(Tensor::row(uniform))?
            }
        };
        Ok((scores, attention))
    }

    /// `v_hat = sum_i alpha_i v_i`.
    pub fn fuse(&self, tape: &mut Tape, features: Var, attention: Var) -> Result<Var> {
        Ok(tape.weighted_sum(features, attention)?)
    }

    /// Answer logits from the fused visual feature and the question encoding.
    pub fn predict(&self, tape: &mut Tape, bound: &BoundParams, fused: Var, question: Var) -> Result<Var> {
        let p = |b: Block| bound.get(b);
        let hv = tape.matmul(fused, p(Block::PredVisual))?;
        let hv = tape.add(hv, p(Block::PredVisualBias))?;
        let hv = tape.relu(hv)?;
        let hq = tape.matmul(question, p(Block::PredQuestion))?;
        let hq = tape.add(hq, p(Block::PredQuestionBias))?;
        let hq = tape.relu(hq)?;
        let joint = tape.mul(hv, hq)?;
        let h1 = tape.matmul(joint, p(Block::PredHidden))?;
        let h1 = tape.add(h1, p(Block::PredHiddenBias))?;
        let h1 = tape.relu(h1)?;
        let logits = tape.matmul(h1, p(Block::PredOutput))?;
        Ok(tape.add(logits, p(Block::PredOutputBias))?)
    }

    /// Places the scene's feature matrix on the tape.
    pub fn scene_features(&self, tape: &mut Tape, scene: &Scene, requires_grad: bool) -> Result<Var> {
        let features = Tensor::matrix(scene.len(), scene.feature_dim(), scene.feature_matrix())?;
        Ok(tape.leaf(features, requires_grad)?)
    }

    /// Full forward pass with features already on the tape.
    pub fn forward_with_features(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        mask: &[bool],
        tokens: &[String],
        mode: AttentionMode,
    ) -> Result<ForwardVars> {
        let question = self.encode_question(tape, bound, tokens)?;
        let (scores, attention) = self.attend(tape, bound, features, mask, question, mode)?;
        let fused = self.fuse(tape, features, attention)?;
        let logits = self.predict(tape, bound, fused, question)?;
        Ok(ForwardVars {
            features,
            question,
            scores,
            attention,
            fused,
            logits,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        scene: &Scene,
        tokens: &[String],
        mode: AttentionMode,
    ) -> Result<ForwardVars> {
        let features = self.scene_features(tape, scene, false)?;
        self.forward_with_features(tape, bound, features, &scene.active_mask(), tokens, mode)
    }

    /// Read-only forward pass on a private tape.
    pub fn infer(&self, scene: &Scene, tokens: &[String], mode: AttentionMode) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let vars = self.forward(&mut tape, &bound, scene, tokens, mode)?;
        Ok(ModelOutput::from_tape(&tape, &vars))
    }

    /// Forward pass plus the summed soft-target BCE loss of one instance.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        scene: &Scene,
        qa: &QAInstance,
        mode: AttentionMode,
    ) -> Result<(ForwardVars, Var)> {
        let targets = soft_targets(&qa.answers, &self.answer_vocab)?;
        let vars = self.forward(tape, bound, scene, &qa.question_tokens, mode)?;
        let loss = tape.sigmoid_bce(vars.logits, &targets)?;
        Ok((vars, loss))
    }

    /// Single-instance VQA loss evaluated on a private tape.
    pub fn vqa_forward_loss(&self, scene: &Scene, qa: &QAInstance, mode: AttentionMode) -> Result<(ModelOutput, f64)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let (vars, loss) = self.forward_loss(&mut tape, &bound, scene, qa, mode)?;
        Ok((ModelOutput::from_tape(&tape, &vars), tape.value(loss).item()))
    }

    /// Gradients of the mean per-instance loss with respect to every block.
    pub fn loss_gradients(&self, batch: &[(&Scene, &QAInstance)], mode: AttentionMode) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true)?;
        let mut total: Option<Var> = None;
        for (scene, qa) in batch {
            let (_, loss) = self.forward_loss(&mut tape, &bound, scene, qa, mode)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
        let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
        tape.backward(mean)?;
        Ok((tape.value(mean).item(), self.collect_grads(&tape, &bound)))
    }

    /// Gradient tensors for every block after a backward pass; zeros where unused.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests;
