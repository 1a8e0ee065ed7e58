//! Projection of byte-level NLE spans onto an externally produced tokenization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nle::{NleSpan, NleType};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignError {
    #[error("spans overlap: [{0}, {1}) and [{2}, {3})")]
    Overlap(usize, usize, usize, usize),
    #[error("span [{start}, {end}) exceeds text length {len}")]
    Bounds { start: usize, end: usize, len: usize },
    #[error("token {index} has invalid offsets [{start}, {end}) for text length {len}")]
    TokenBounds {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("token {index} starts at {start}, before the previous token start {prev}")]
    NonMonotonic { index: usize, start: usize, prev: usize },
}

/// A single token as `(token_id, start, end)` over the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, usize, usize)", into = "(u32, usize, usize)")]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn new(id: u32, start: usize, end: usize) -> Self {
        Token { id, start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

impl From<(u32, usize, usize)> for Token {
    fn from((id, start, end): (u32, usize, usize)) -> Self {
        Token { id, start, end }
    }
}

impl From<Token> for (u32, usize, usize) {
    fn from(t: Token) -> Self {
        (t.id, t.start, t.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedDoc {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, tokens: Vec<Token>) -> Self {
        TokenizedDoc {
            doc_id: doc_id.into(),
            text: text.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Checks offsets are within the text and non-empty token starts never
    /// decrease. Empty `(s, s)` tokens (specials) are exempt from ordering.
    pub fn validate(&self) -> Result<(), AlignError> {
        let len = self.text.len();
        let mut prev = 0;
        for (index, t) in self.tokens.iter().enumerate() {
            if t.start > t.end || t.end > len {
                return Err(AlignError::TokenBounds {
                    index,
                    start: t.start,
                    end: t.end,
                    len,
                });
            }
            if t.is_empty() {
                continue;
            }
            if t.start < prev {
                return Err(AlignError::NonMonotonic {
                    index,
                    start: t.start,
                    prev,
                });
            }
            prev = t.start;
        }
        Ok(())
    }
}

/// Per-token NLE code: `0` outside any element, `1..=7` the [`NleType::code`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenNleLabels(pub Vec<u8>);

impl TokenNleLabels {
    pub fn zeros(n: usize) -> Self {
        TokenNleLabels(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Option<NleType> {
        self.0.get(i).copied().and_then(NleType::from_code)
    }
}

/// Returns spans sorted by start after checking bounds and pairwise disjointness.
pub fn checked_sorted_spans(spans: &[NleSpan], text_len: usize) -> Result<Vec<&NleSpan>, AlignError> {
    let mut sorted: Vec<&NleSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start > s.end || s.end > text_len {
            return Err(AlignError::Bounds {
                start: s.start,
                end: s.end,
                len: text_len,
            });
        }
    }
    for w in sorted.windows(2) {
        if w[0].end > w[1].start {
            return Err(AlignError::Overlap(w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    Ok(sorted)
}

/// Labels each token with the type of the span it overlaps.
///
/// One shared byte is enough to count as inside, so a token straddling a span
/// boundary is labelled with that span's type. A token touching spans of
/// different types takes the type covering most of its bytes; ties go to the
/// leftmost span. Empty tokens are always `0`.
pub fn align(doc: &TokenizedDoc, spans: &[NleSpan]) -> Result<TokenNleLabels, AlignError> {
    let sorted = checked_sorted_spans(spans, doc.text.len())?;
    doc.validate()?;

    let mut labels = Vec::with_capacity(doc.tokens.len());
    let mut first = 0;
    for t in &doc.tokens {
        if t.is_empty() {
            labels.push(0);
            continue;
        }
        while first < sorted.len() && sorted[first].end <= t.start {
            first += 1;
        }
        let mut overlap_by_code = [0usize; 8];
        let mut order: Vec<u8> = Vec::new();
        for s in sorted[first..].iter().take_while(|s| s.start < t.end) {
            let shared = s.end.min(t.end).saturating_sub(s.start.max(t.start));
            if shared == 0 {
                continue;
            }
            let code = s.nle_type.code();
            if overlap_by_code[code as usize] == 0 {
                order.push(code);
            }
            overlap_by_code[code as usize] += shared;
        }
        let best = order
            .iter()
            .copied()
            .fold(None::<u8>, |best, code| match best {
                Some(b) if overlap_by_code[b as usize] >= overlap_by_code[code as usize] => Some(b),
                _ => Some(code),
            })
            .unwrap_or(0);
        labels.push(best);
    }
    Ok(TokenNleLabels(labels))
}
