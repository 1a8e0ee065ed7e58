//! NLE frequency per million words over a document stream.
//!
//! Word rule: split on Unicode whitespace, trim non-alphanumeric characters
//! from both ends of each piece, and count the pieces that remain non-empty.
//! An NLE such as `hxxp://evil[.]com/a` therefore counts as one word, and a
//! lone dash or bullet counts as none. Absolute rates depend on this rule; only
//! ratios between corpora are meaningful across tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::NleDetector;
use crate::nle::NleType;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("corpus contains no words")]
    EmptyCorpus,
}

pub fn count_words(text: &str) -> u64 {
    text.split_whitespace()
        .filter(|w| !w.trim_matches(|c: char| !c.is_alphanumeric()).is_empty())
        .count() as u64
}

/// Associative, commutative running totals; merge shards in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsAccumulator {
    pub documents: u64,
    pub words: u64,
    pub counts: [u64; 7],
}

impl StatsAccumulator {
    pub fn add_document(&mut self, detector: &NleDetector, text: &str) {
        self.documents += 1;
        self.words += count_words(text);
        for span in detector.detect(text) {
            self.counts[span.nle_type.code() as usize - 1] += 1;
        }
    }

    pub fn merge(mut self, other: &StatsAccumulator) -> StatsAccumulator {
        self.documents += other.documents;
        self.words += other.words;
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }

    pub fn count(&self, t: NleType) -> u64 {
        self.counts[t.code() as usize - 1]
    }

    pub fn finish(&self, corpus_id: &str) -> Result<NleFrequencyReport, StatsError> {
        if self.words == 0 {
            return Err(StatsError::EmptyCorpus);
        }
        let per_type = NleType::ALL
            .into_iter()
            .map(|t| {
                let count = self.count(t);
                (t, TypeFrequency { count, per_million: per_million(count, self.words) })
            })
            .collect();
        Ok(NleFrequencyReport {
            corpus_id: corpus_id.to_string(),
            documents: self.documents,
            word_count: self.words,
            per_type,
        })
    }
}

/// `count * 10^6 / words`, computed in integer arithmetic up to one final division.
pub fn per_million(count: u64, words: u64) -> f64 {
    (u128::from(count) * 1_000_000) as f64 / words as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeFrequency {
    pub count: u64,
    pub per_million: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NleFrequencyReport {
    pub corpus_id: String,
    pub documents: u64,
    pub word_count: u64,
    pub per_type: BTreeMap<NleType, TypeFrequency>,
}

impl NleFrequencyReport {
    pub fn per_million(&self, t: NleType) -> f64 {
        self.per_type.get(&t).map_or(0.0, |f| f.per_million)
    }

    /// Aligned plain-text table, one row per type.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "corpus: {}", self.corpus_id);
        let _ = writeln!(out, "documents: {}  words: {}", self.documents, self.word_count);
        let _ = writeln!(out, "{:<6} {:>12} {:>16}", "NLE", "count", "per_million");
        for (t, f) in &self.per_type {
            let _ = writeln!(out, "{:<6} {:>12} {:>16.2}", t.name(), f.count, f.per_million);
        }
        out
    }
}

/// Single-pass statistics over a stream of documents.
pub fn compute_stats<I, S>(corpus_id: &str, docs: I) -> Result<NleFrequencyReport, StatsError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let detector = NleDetector::new();
    let mut acc = StatsAccumulator::default();
    for d in docs {
        acc.add_document(&detector, d.as_ref());
    }
    acc.finish(corpus_id)
}
