//! Verifiable reward, answer extraction, and the text metrics.

use thiserror::Error;

use crate::rng::fnv1a64;
use crate::vocab::{Tag, TokenId, Vocab};

/// Bucket count of the hashed n-gram text embedding.
pub const EMBED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("text {0:?} is empty after normalization")]
    EmptyText(String),
    #[error("embedding of {0:?} cancels to the zero vector")]
    ZeroEmbedding(String),
    #[error("super-category name is indistinguishable from the truth (similarity {0})")]
    UndefinedDenominator(f64),
}

/// Lowercase, drop punctuation, and collapse runs of whitespace, `-` and `_`
/// into single spaces. Shared by rewards and metrics.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            pending_space = !out.is_empty();
        } else if ch.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(ch.to_lowercase());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnswerExtract {
    pub think_span: Vec<TokenId>,
    pub answer_span: Vec<TokenId>,
    pub well_formed: bool,
}

fn span(tokens: &[TokenId], tag: Tag) -> Option<(usize, usize)> {
    let open = tokens.iter().position(|&t| t == tag.open_id())?;
    let close = tokens.iter().position(|&t| t == tag.close_id())?;
    (open < close).then_some((open + 1, close))
}

/// Locates the think and answer regions. A response is well formed iff it has
/// exactly one `<answer>` and one `</answer>`, in that order, around a
/// non-empty span.
pub fn extract_answer(tokens: &[TokenId]) -> AnswerExtract {
    let think_span = span(tokens, Tag::Think)
        .map(|(a, b)| tokens[a..b].to_vec())
        .unwrap_or_default();
    let count = |id: TokenId| tokens.iter().filter(|&&t| t == id).count();
    let single = count(Tag::Answer.open_id()) == 1 && count(Tag::Answer.close_id()) == 1;
    match span(tokens, Tag::Answer) {
        Some((a, b)) if single && b > a => AnswerExtract {
            think_span,
            answer_span: tokens[a..b].to_vec(),
            well_formed: true,
        },
        _ => AnswerExtract {
            think_span,
            answer_span: Vec::new(),
            well_formed: false,
        },
    }
}

/// Decoded answer text, or `None` when the response is malformed.
pub fn answer_text(tokens: &[TokenId], vocab: &Vocab) -> Option<String> {
    let ex = extract_answer(tokens);
    if !ex.well_formed {
        return None;
    }
    vocab.decode(&ex.answer_span).ok()
}

/// Normalized substring test on raw strings.
pub fn text_includes(truth: &str, answer: &str) -> bool {
    let t = normalize_text(truth);
    !t.is_empty() && normalize_text(answer).contains(&t)
}

/// `is_included(a, o)`: the normalized truth occurs inside the normalized
/// answer span. Malformed responses never include anything.
pub fn is_included(truth: &str, response: &[TokenId], vocab: &Vocab) -> bool {
    answer_text(response, vocab).is_some_and(|a| text_includes(truth, &a))
}

/// Binary reward: 1 iff well formed and the truth is included.
pub fn reward(truth: &str, response: &[TokenId], vocab: &Vocab) -> f64 {
    if is_included(truth, response, vocab) {
        1.0
    } else {
        0.0
    }
}

/// Unit-norm text embedding over hashed character 3-grams.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vec: Vec<f64>,
}

impl TextEmbedding {
    /// Cosine similarity; identical embeddings give exactly 1.
    pub fn dot(&self, other: &TextEmbedding) -> f64 {
        if self.vec == other.vec {
            return 1.0;
        }
        self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum()
    }
}

/// Character 3-grams of the normalized text, hashed with FNV-1a into
/// [`EMBED_DIM`] buckets with sign from bit 63. Texts shorter than three
/// characters form a single gram.
pub fn embed_text(text: &str) -> Result<TextEmbedding, MetricError> {
    let norm = normalize_text(text);
    if norm.is_empty() {
        return Err(MetricError::EmptyText(text.to_string()));
    }
    let chars: Vec<char> = norm.chars().collect();
    let mut vec = vec![0.0; EMBED_DIM];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv1a64(s.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        vec[(h % EMBED_DIM as u64) as usize] += sign;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(&mut add);
    }
    let n = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(MetricError::ZeroEmbedding(text.to_string()));
    }
    vec.iter_mut().for_each(|x| *x /= n);
    Ok(TextEmbedding { vec })
}

pub fn text_similarity(a: &str, b: &str) -> Result<f64, MetricError> {
    Ok(embed_text(a)?.dot(&embed_text(b)?))
}

/// Relative semantic similarity: how far the prediction climbs from the
/// super-category floor toward the truth, clamped at zero.
pub fn ss_relative(pred: &str, truth: &str, super_name: &str) -> Result<f64, MetricError> {
    let t = embed_text(truth)?;
    let floor = embed_text(super_name)?.dot(&t);
    if floor >= 1.0 - 1e-9 {
        return Err(MetricError::UndefinedDenominator(floor));
    }
    let sim = embed_text(pred)?.dot(&t);
    Ok(((sim - floor) / (1.0 - floor)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::with_words(["sparrow", "song", "a", "b", "acadian", "flycatcher"]).unwrap()
    }

    #[test]
    fn extracts_answer_span() {
        let v = vocab();
        let ids = v
            .encode("<think> a b </think> <answer> sparrow song </answer>")
            .unwrap();
        let ex = extract_answer(&ids);
        assert!(ex.well_formed);
        assert_eq!(v.decode(&ex.answer_span).unwrap(), "sparrow song");
        assert_eq!(v.decode(&ex.think_span).unwrap(), "a b");
    }

    #[test]
    fn malformed_answers() {
        let v = vocab();
        for text in [
            "<answer> sparrow song",
            "<answer> a </answer> <answer> b </answer>",
            "<answer> </answer>",
            "</answer> a <answer>",
        ] {
            assert!(!extract_answer(&v.encode(text).unwrap()).well_formed, "{text}");
        }
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("Acadian-Flycatcher"), "acadian flycatcher");
        assert_eq!(normalize_text("  a__b - c! "), "a b c");
        assert!(text_includes("boeing 737", "boeing 737-200"));
        assert!(!text_includes("least flycatcher", "acadian flycatcher"));
    }

    #[test]
    fn reward_is_gated_on_format() {
        let v = vocab();
        let good = v.encode("<answer> acadian flycatcher </answer> <eos>").unwrap();
        assert_eq!(reward("acadian flycatcher", &good, &v), 1.0);
        let think_only = v
            .encode("<think> acadian flycatcher </think> <answer> a </answer>")
            .unwrap();
        assert_eq!(reward("acadian flycatcher", &think_only, &v), 0.0);
        let bad = v.encode("<answer> acadian flycatcher").unwrap();
        assert_eq!(reward("acadian flycatcher", &bad, &v), 0.0);
    }

    #[test]
    fn embedding_is_unit_norm() {
        for s in ["abc", "ab", "kadol amir", "x"] {
            let e = embed_text(s).unwrap();
            assert!((e.dot(&e) - 1.0).abs() < 1e-12);
        }
        assert!(embed_text("--").is_err());
    }

    #[test]
    fn ss_relative_endpoints() {
        assert_eq!(ss_relative("kadol amir", "kadol amir", "kadol").unwrap(), 1.0);
        assert_eq!(ss_relative("kadol", "kadol amir", "kadol").unwrap(), 0.0);
        assert_eq!(ss_relative("zzzz", "kadol amir", "kadol").unwrap(), 0.0);
        assert!(ss_relative("a", "kadol", "kadol").is_err());
    }
}
