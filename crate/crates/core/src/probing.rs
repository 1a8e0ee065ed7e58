//! Terminology probing: target-token selection, masked instances with
//! near-FNLE flags, and accuracy scoring of model predictions.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{TokenNleLabels, TokenizedDoc};
use crate::nle::is_fnle_code;

/// Tokens within this many positions of an FNLE token count as near it.
pub const NEAR_FNLE_WINDOW: usize = 20;
pub const DEFAULT_MIN_TOKEN_ID: u32 = 25_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("no target tokens survived the vocabulary and id filters")]
    EmptyResult,
    #[error("phrase list is empty")]
    NoPhrases,
    #[error("{} instance(s) have no prediction, e.g. {:?}", .0.len(), .0.first())]
    MissingPrediction(Vec<(String, usize)>),
    #[error("label count {labels} does not match token count {tokens} in document {doc_id}")]
    Alignment {
        doc_id: String,
        labels: usize,
        tokens: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTarget {
    pub token_id: u32,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTargetList {
    pub tokens: Vec<ProbeTarget>,
    pub source_phrase_count: usize,
    /// Distinct single-token words found before the id filter.
    pub single_token_count: usize,
    pub min_token_id_filter: u32,
}

impl ProbeTargetList {
    pub fn ids(&self) -> HashSet<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }
}

/// Normalizes a byte-level BPE vocabulary key: a leading `Ġ` stands for a space.
pub fn normalize_vocab_surface(surface: &str) -> String {
    match surface.strip_prefix('\u{0120}') {
        Some(rest) => format!(" {rest}"),
        None => surface.to_string(),
    }
}

/// Splits phrases into words and keeps each word whose space-prefixed form is
/// a single vocabulary entry with id `>= min_id`. Order follows first appearance.
pub fn build_target_list<S: AsRef<str>>(
    phrases: &[S],
    vocab: &HashMap<String, u32>,
    min_id: u32,
) -> Result<ProbeTargetList, ProbeError> {
    if phrases.is_empty() {
        return Err(ProbeError::NoPhrases);
    }
    let mut seen = HashSet::new();
    let mut single = Vec::new();
    for phrase in phrases {
        for raw in phrase.as_ref().split_whitespace() {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if word.is_empty() {
                continue;
            }
            let surface = format!(" {word}");
            if let Some(&id) = vocab.get(&surface) {
                if seen.insert(id) {
                    single.push(ProbeTarget { token_id: id, surface });
                }
            }
        }
    }
    let single_token_count = single.len();
    let tokens: Vec<ProbeTarget> = single.into_iter().filter(|t| t.token_id >= min_id).collect();
    if tokens.is_empty() {
        return Err(ProbeError::EmptyResult);
    }
    Ok(ProbeTargetList {
        tokens,
        source_phrase_count: phrases.len(),
        single_token_count,
        min_token_id_filter: min_id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub doc_id: String,
    pub token_position: usize,
    pub gold_token_id: u32,
    pub near_fnle: bool,
}

impl ProbeInstance {
    pub fn key(&self) -> (String, usize) {
        (self.doc_id.clone(), self.token_position)
    }
}

/// Per-position flag: an FNLE-labelled token lies within `window` positions
/// (either side, the position itself included).
pub fn near_fnle_flags(labels: &TokenNleLabels, window: usize) -> Vec<bool> {
    let n = labels.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &c) in labels.as_slice().iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(is_fnle_code(c));
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(n);
            prefix[hi] > prefix[lo]
        })
        .collect()
}

/// Every occurrence of a target token becomes one instance; nothing is sampled.
pub fn probe_document(
    doc: &TokenizedDoc,
    labels: &TokenNleLabels,
    target_ids: &HashSet<u32>,
) -> Result<Vec<ProbeInstance>, ProbeError> {
    if labels.len() != doc.len() {
        return Err(ProbeError::Alignment {
            doc_id: doc.doc_id.clone(),
            labels: labels.len(),
            tokens: doc.len(),
        });
    }
    let near = near_fnle_flags(labels, NEAR_FNLE_WINDOW);
    Ok(doc
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| target_ids.contains(&t.id))
        .map(|(i, t)| ProbeInstance {
            doc_id: doc.doc_id.clone(),
            token_position: i,
            gold_token_id: t.id,
            near_fnle: near[i],
        })
        .collect())
}

pub fn build_probe_set<'a, I>(docs: I, targets: &ProbeTargetList) -> Result<Vec<ProbeInstance>, ProbeError>
where
    I: IntoIterator<Item = (&'a TokenizedDoc, &'a TokenNleLabels)>,
{
    let ids = targets.ids();
    let mut out = Vec::new();
    for (doc, labels) in docs {
        out.extend(probe_document(doc, labels, &ids)?);
    }
    Ok(out)
}

/// Token ids with every target occurrence replaced by `mask_token_id`.
pub fn masked_input_ids(doc: &TokenizedDoc, target_ids: &HashSet<u32>, mask_token_id: u32) -> Vec<u32> {
    doc.tokens
        .iter()
        .map(|t| if target_ids.contains(&t.id) { mask_token_id } else { t.id })
        .collect()
}

/// Exact counts behind the two accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProbeScore {
    pub correct_all: u64,
    pub total_all: u64,
    pub correct_near_fnle: u64,
    pub total_near_fnle: u64,
}

impl ProbeScore {
    pub fn accuracy_all(&self) -> Option<f64> {
        ratio(self.correct_all, self.total_all)
    }

    pub fn accuracy_near_fnle(&self) -> Option<f64> {
        ratio(self.correct_near_fnle, self.total_near_fnle)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn score_predictions(
    instances: &[ProbeInstance],
    predictions: &HashMap<(String, usize), u32>,
) -> Result<ProbeScore, ProbeError> {
    let missing: BTreeSet<(String, usize)> = instances
        .iter()
        .map(ProbeInstance::key)
        .filter(|k| !predictions.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(ProbeError::MissingPrediction(missing.into_iter().collect()));
    }
    let mut s = ProbeScore::default();
    for inst in instances {
        let hit = predictions[&inst.key()] == inst.gold_token_id;
        s.total_all += 1;
        s.correct_all += u64::from(hit);
        if inst.near_fnle {
            s.total_near_fnle += 1;
            s.correct_near_fnle += u64::from(hit);
        }
    }
    Ok(s)
}
