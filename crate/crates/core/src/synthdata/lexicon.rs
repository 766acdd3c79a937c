//! Fixed toy vocabulary: noun flags, answer groups, and a small word-embedding
//! table with controlled cosine similarities between categories and synonyms.

use std::collections::HashMap;

/// Object categories a detector can emit.
pub const CATEGORIES: [&str; 10] = [
    "ball", "cube", "cup", "dog", "cat", "car", "chair", "book", "frisbee", "lamp",
];

/// Nouns that never name a detectable category but may appear in questions.
pub const EXTRA_NOUNS: [&str; 1] = ["grass"];

/// `(synonym, category, cosine)`; synonyms are nouns but not category tokens.
pub const SYNONYMS: [(&str, &str, f64); 4] = [
    ("puppy", "dog", 0.8),
    ("kitten", "cat", 0.8),
    ("mug", "cup", 0.7),
    ("block", "cube", 0.65),
];

pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "white"];
pub const MATERIALS: [&str; 4] = ["metal", "wood", "plastic", "glass"];
pub const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
pub const YES_NO: [&str; 2] = ["yes", "no"];

const FUNCTION_WORDS: [&str; 14] = [
    "what", "color", "is", "the", "made", "of", "how", "many", "are", "there", "a", "near", "kind", "material",
];

/// Token flags plus the similarity embedding used for key-object identification.
#[derive(Clone, Debug)]
pub struct Lexicon {
    tokens: Vec<String>,
    nouns: HashMap<String, bool>,
    embeddings: EmbeddingTable,
}

impl Lexicon {
    pub fn builtin() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut nouns = HashMap::new();
        let mut add = |tok: &str, noun: bool, tokens: &mut Vec<String>| {
            if !nouns.contains_key(tok) {
                tokens.push(tok.to_string());
                nouns.insert(tok.to_string(), noun);
            }
        };
        for w in FUNCTION_WORDS {
            add(w, false, &mut tokens);
        }
        for w in CATEGORIES.iter().chain(EXTRA_NOUNS.iter()) {
            add(w, true, &mut tokens);
        }
        for (w, _, _) in SYNONYMS {
            add(w, true, &mut tokens);
        }
        for w in COLORS
            .iter()
            .chain(MATERIALS.iter())
            .chain(COUNTS.iter())
            .chain(YES_NO.iter())
        {
            add(w, false, &mut tokens);
        }
        Self {
            tokens,
            nouns,
            embeddings: EmbeddingTable::builtin(),
        }
    }

    pub fn is_noun(&self, token: &str) -> bool {
        self.nouns.get(token).copied().unwrap_or(false)
    }

    /// Every token the question templates can produce, in a fixed order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Word vectors for category tokens and nouns.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    /// Categories and extra nouns sit on orthonormal axes, so distinct ones have
    /// cosine 0; each synonym mixes its category axis with a private axis so its
    /// cosine to that category is exactly the listed value.
    pub fn builtin() -> Self {
        let n_axes = CATEGORIES.len() + EXTRA_NOUNS.len() + SYNONYMS.len();
        let axis = |i: usize| {
            let mut v = vec![0.0; n_axes];
            v[i] = 1.0;
            v
        };
        let mut vectors = HashMap::new();
        for (i, w) in CATEGORIES.iter().chain(EXTRA_NOUNS.iter()).enumerate() {
            vectors.insert(w.to_string(), axis(i));
        }
        let base = CATEGORIES.len() + EXTRA_NOUNS.len();
        for (k, (syn, cat, cos)) in SYNONYMS.iter().enumerate() {
            let c = CATEGORIES.iter().position(|x| x == cat).expect("synonym of a category");
            let mut v = vec![0.0; n_axes];
            v[c] = *cos;
            v[base + k] = (1.0 - cos * cos).sqrt();
            vectors.insert(syn.to_string(), v);
        }
        Self { vectors }
    }

    pub fn from_vectors(vectors: HashMap<String, Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Cosine similarity; `None` if either token has no vector.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let (va, vb) = (self.get(a)?, self.get(b)?);
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Some(0.0);
        }
        Some(dot / (na * nb))
    }
}

/// Noun tokens of a question, in order of first appearance.
pub fn extract_nouns(question_tokens: &[String], lexicon: &Lexicon) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in question_tokens {
        if lexicon.is_noun(tok) && !out.contains(tok) {
            out.push(tok.clone());
        }
    }
    out
}
