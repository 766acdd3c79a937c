//! Faithfulness probes for grounding signals: keep-interval sweeps, single
//! region occlusion curves, a gradient-times-feature saliency comparator and
//! the ignored-key-object count.

use serde::{Deserialize, Serialize};

use crate::attreg::{identify_key_objects, locate_ignored, RegConfig};
use crate::diffcore::Tape;
use crate::error::{DiffError, Error, Result};
use crate::harness::accuracy;
use crate::model::{argmax, AttentionMode, Model};
use crate::rng::derive_seed;
use crate::synthdata::{Instance, Lexicon, QAInstance, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingSource {
    Attention,
    GradientSaliency,
    /// Pseudo-random weights derived from the seed and the detection's own
    /// content, so a permutation of the scene permutes the weights with it.
    Uniform,
}

impl GroundingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            GroundingSource::Attention => "attention",
            GroundingSource::GradientSaliency => "gradient",
            GroundingSource::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(GroundingSource::Attention),
            "gradient" | "gradient_saliency" => Some(GroundingSource::GradientSaliency),
            "uniform" => Some(GroundingSource::Uniform),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lo: f64,
    pub hi: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdRecord {
    pub rank: usize,
    pub mean_tvd: f64,
    pub n: usize,
}

/// Half the L1 distance between two score vectors.
pub fn tvd(p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(DiffError::ShapeMismatch {
            op: "tvd",
            left: vec![p1.len()],
            right: vec![p2.len()],
        }
        .into());
    }
    Ok(0.5 * p1.iter().zip(p2).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Active detection ids ordered by weight, highest first, ties by id.
pub fn rank_detections(weights: &[f64], active: &[bool]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..weights.len()).filter(|&i| active[i]).collect();
    ids.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    ids
}

/// Ids whose 1-based rank r satisfies `round(lo K / 100) < r <= round(hi K / 100)`
/// among `K` ranked detections. An interval too narrow to hold a rank keeps
/// the first rank after its lower edge.
pub fn interval_ids(ranked: &[usize], lo: f64, hi: f64) -> Vec<usize> {
    let k = ranked.len() as f64;
    let start = (lo * k / 100.0).round() as usize;
    let end = ((hi * k / 100.0).round() as usize).min(ranked.len());
    if end > start {
        ranked[start..end].to_vec()
    } else {
        let i = start.min(ranked.len().saturating_sub(1));
        ranked[i..=i].to_vec()
    }
}

fn content_hash(scene: &Scene, i: usize) -> u64 {
    scene.detections[i]
        .feature
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
}

/// Per-detection weights of `source` for one instance.
pub fn source_weights(
    model: &Model,
    scene: &Scene,
    qa: &QAInstance,
    source: GroundingSource,
    seed: u64,
) -> Result<Vec<f64>> {
    match source {
        GroundingSource::Attention => Ok(model
            .infer(scene, &qa.question_tokens, AttentionMode::Learned)?
            .attention),
        GroundingSource::GradientSaliency => gradient_saliency(model, scene, qa),
        GroundingSource::Uniform => Ok((0..scene.len())
            .map(|i| {
                let h = derive_seed(seed, qa.qid, content_hash(scene, i));
                (h >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()),
    }
}

/// Keeps only the detections ranked inside `(lo, hi]` percent and scores the
/// re-run prediction.
pub fn keep_interval_eval(
    model: &Model,
    instances: &[Instance],
    interval: (f64, f64),
    source: GroundingSource,
    seed: u64,
) -> Result<SweepResult> {
    let (lo, hi) = interval;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(Error::Config(format!(
            "interval ({lo}, {hi}] must satisfy 0 <= lo < hi <= 100"
        )));
    }
    let mut total = 0.0;
    for inst in instances {
        let weights = source_weights(model, &inst.scene, &inst.qa, source, seed)?;
        let ranked = rank_detections(&weights, &inst.scene.active_mask());
        let kept = interval_ids(&ranked, lo, hi);
        let scene = inst.scene.keeping_only(&kept);
        let out = model.infer(&scene, &inst.qa.question_tokens, AttentionMode::Learned)?;
        total += accuracy(model.answer_vocab.token(out.predicted()), &inst.qa.answers);
    }
    Ok(SweepResult {
        lo,
        hi,
        accuracy: if instances.is_empty() {
            0.0
        } else {
            total / instances.len() as f64
        },
        n: instances.len(),
    })
}

/// Mean TVD between full-scene scores and scores with the rank-r detection
/// masked, for every rank `1..=K`.
pub fn region_tvd_curve(
    model: &Model,
    instances: &[Instance],
    source: GroundingSource,
    seed: u64,
) -> Result<Vec<TvdRecord>> {
    let k = instances.iter().map(|i| i.scene.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for inst in instances {
        let full = model.infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)?;
        let weights = source_weights(model, &inst.scene, &inst.qa, source, seed)?;
        let ranked = rank_detections(&weights, &inst.scene.active_mask());
        if ranked.len() < 2 {
            continue;
        }
        for (r, &id) in ranked.iter().enumerate() {
            let masked = inst.scene.with_masked(&[id]);
            let out = model.infer(&masked, &inst.qa.question_tokens, AttentionMode::Learned)?;
            sums[r] += tvd(&full.probs, &out.probs)?;
            counts[r] += 1;
        }
    }
    Ok((0..k)
        .map(|r| TvdRecord {
            rank: r + 1,
            mean_tvd: if counts[r] == 0 {
                0.0
            } else {
                sums[r] / counts[r] as f64
            },
            n: counts[r],
        })
        .collect())
}

/// Distinct annotator answers present in the model's vocabulary.
pub fn ground_truth_ids(model: &Model, qa: &QAInstance) -> Vec<usize> {
    let mut ids: Vec<usize> = qa
        .answers
        .iter()
        .filter_map(|a| model.answer_vocab.index_of(a))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Gradient-times-feature saliency `relu(<dS/dv_i, v_i>)` where `S` sums the
/// ground-truth logits.
pub fn gradient_saliency(model: &Model, scene: &Scene, qa: &QAInstance) -> Result<Vec<f64>> {
    let inner = gradient_feature_products(model, scene, qa)?;
    Ok(inner.into_iter().map(|g| g.max(0.0)).collect())
}

/// `<dS/dv_i, v_i>` per detection, before the relu.
pub fn gradient_feature_products(model: &Model, scene: &Scene, qa: &QAInstance) -> Result<Vec<f64>> {
    let gt = ground_truth_ids(model, qa);
    if gt.is_empty() {
        return Err(Error::Config(format!(
            "question {} has no ground-truth answer in the vocabulary",
            qa.qid
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let features = model.scene_features(&mut tape, scene, true)?;
    let vars = model.forward_with_features(
        &mut tape,
        &bound,
        features,
        &scene.active_mask(),
        &qa.question_tokens,
        AttentionMode::Learned,
    )?;
    let column = tape.reshape(vars.logits, &[model.answer_vocab.len(), 1])?;
    let picked = tape.gather(column, &gt)?;
    let score = tape.sum(picked)?;
    tape.backward(score)?;
    let d = scene.feature_dim();
    let grad = tape
        .grad(features)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; scene.len() * d]);
    Ok(scene
        .detections
        .iter()
        .enumerate()
        .map(|(i, det)| {
            if !det.active {
                return 0.0;
            }
            det.feature
                .iter()
                .zip(&grad[i * d..(i + 1) * d])
                .map(|(v, g)| v * g)
                .sum()
        })
        .collect())
}

/// Mean `|V* ∩ V^o|` under the model's current attention.
pub fn ignored_key_count(model: &Model, instances: &[Instance], reg: &RegConfig) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let lexicon = Lexicon::builtin();
    let mut total = 0usize;
    for inst in instances {
        let out = model.infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)?;
        total += count_ignored_keys(&inst.scene, &inst.qa, &out.attention, reg, &lexicon);
    }
    Ok(total as f64 / instances.len() as f64)
}

/// `|V* ∩ V^o|` for one instance under the given attention weights.
pub fn count_ignored_keys(
    scene: &Scene,
    qa: &QAInstance,
    attention: &[f64],
    reg: &RegConfig,
    lexicon: &Lexicon,
) -> usize {
    let keys = identify_key_objects(scene, &qa.nouns, lexicon.embeddings(), reg.sigma, reg.top_m);
    let ignored = locate_ignored(attention, &scene.active_mask(), reg.ignored_pct);
    keys.iter().filter(|k| ignored.contains(&k.id)).count()
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Spearman correlation between rank and mean TVD over populated ranks.
pub fn curve_correlation(curve: &[TvdRecord]) -> Option<f64> {
    let pts: Vec<&TvdRecord> = curve.iter().filter(|r| r.n > 0).collect();
    let ranks: Vec<f64> = pts.iter().map(|r| r.rank as f64).collect();
    let tvds: Vec<f64> = pts.iter().map(|r| r.mean_tvd).collect();
    spearman(&ranks, &tvds)
}

/// Index of the predicted answer for a scene.
pub fn predict(model: &Model, scene: &Scene, tokens: &[String]) -> Result<usize> {
    Ok(argmax(&model.infer(scene, tokens, AttentionMode::Learned)?.probs))
}
